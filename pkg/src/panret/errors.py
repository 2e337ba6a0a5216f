"""Exception hierarchy. Every error carries a short machine-readable code used by the CLI."""


class PanretError(Exception):
    code = "PANRET_ERROR"


class ParseError(PanretError):
    code = "PARSE_ERROR"

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class UnsupportedChannel(ParseError):
    code = "UNSUPPORTED_CHANNEL"


class TooShort(PanretError):
    code = "TOO_SHORT"


class FpsMismatch(PanretError):
    code = "FPS_MISMATCH"


class EmptyDataset(PanretError):
    code = "EMPTY_DATASET"


class ManifestError(PanretError):
    code = "MANIFEST_ERROR"


class ShapeMismatch(PanretError, ValueError):
    code = "SHAPE_MISMATCH"


class StructureMismatch(PanretError):
    code = "STRUCTURE_MISMATCH"


class UnknownJoint(PanretError):
    code = "UNKNOWN_JOINT"


class EmptyPart(PanretError):
    code = "EMPTY_PART"


class OddDim(PanretError, ValueError):
    code = "ODD_DIM"


class BadLength(PanretError, ValueError):
    code = "BAD_LENGTH"


class DegenerateStats(PanretError):
    code = "DEGENERATE_STATS"


class PartitionMismatch(PanretError):
    code = "PARTITION_MISMATCH"


class PairMismatch(PanretError):
    code = "PAIR_MISMATCH"


class NonFiniteLoss(PanretError):
    code = "NON_FINITE_LOSS"


class CheckpointError(PanretError):
    code = "CHECKPOINT_ERROR"


class ConfigError(PanretError):
    code = "CONFIG_ERROR"


class NotEnoughClips(PanretError, ValueError):
    code = "NOT_ENOUGH_CLIPS"
