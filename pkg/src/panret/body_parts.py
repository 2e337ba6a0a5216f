"""Body-part partitions, the attention mask and joint positional encodings."""
import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .errors import EmptyPart, OddDim, PartitionMismatch, UnknownJoint

MASK_NEG = -1e9


@dataclass(frozen=True)
class BodyPartition:
    """``parts[k]`` holds joint indices in ``0..J-1`` plus the velocity
    pseudo-joint ``J``. Joints may appear in several parts or in none."""

    part_names: tuple
    parts: tuple
    num_joints: int

    def __post_init__(self):
        object.__setattr__(self, "part_names", tuple(self.part_names))
        object.__setattr__(self, "parts", tuple(tuple(sorted(set(p))) for p in self.parts))
        if len(self.parts) != len(self.part_names):
            raise PartitionMismatch("part names and joint sets differ in length")
        vel = self.num_joints
        for name, p in zip(self.part_names, self.parts):
            joints = [j for j in p if j != vel]
            if not joints:
                raise EmptyPart(f"body part {name!r} has no joints")
            if any(not 0 <= j <= vel for j in p):
                raise UnknownJoint(f"body part {name!r} has an index outside 0..{vel}")
            if vel not in p:
                raise PartitionMismatch(f"body part {name!r} lacks the velocity pseudo-joint")

    @property
    def N(self):
        return len(self.parts)

    @property
    def vel(self):
        return self.num_joints

    def joints(self, k):
        """Joint indices of part ``k`` without the velocity pseudo-joint."""
        return [j for j in self.parts[k] if j != self.vel]

    def covered(self):
        """Boolean (J+1,) mask of joints in at least one part (velocity included)."""
        m = np.zeros(self.num_joints + 1, dtype=bool)
        for p in self.parts:
            m[list(p)] = True
        return m

    def digest(self):
        blob = json.dumps([self.part_names, self.parts, self.num_joints]).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self):
        return {"part_names": list(self.part_names), "parts": [list(p) for p in self.parts],
                "num_joints": self.num_joints}

    @classmethod
    def from_dict(cls, d):
        return cls(d["part_names"], d["parts"], d["num_joints"])


def _canon(name):
    return name.split(":")[-1].split("|")[-1]


# Part rules: name -> regexes matched (case-insensitively) against joint names
# stripped of any namespace prefix.
_HUMANOID6 = {
    "head": [r"^neck", r"^head"],
    "spine": [r"^hips$", r"^pelvis$", r"^root$", r"^spine\d*$", r"^chest"],
    "left_arm": [r"^left(shoulder|arm|forearm|hand)", r"^l_?(shoulder|arm|forearm|hand|clavicle|elbow|wrist)"],
    "right_arm": [r"^right(shoulder|arm|forearm|hand)", r"^r_?(shoulder|arm|forearm|hand|clavicle|elbow|wrist)"],
    "left_leg": [r"^left(upleg|leg|foot|toe)", r"^l_?(upleg|hip|leg|knee|foot|ankle|toe)"],
    "right_leg": [r"^right(upleg|leg|foot|toe)", r"^r_?(upleg|hip|leg|knee|foot|ankle|toe)"],
}

_BIPED_QUAD3 = {
    "biped": {
        "spine": _HUMANOID6["spine"],
        "head": _HUMANOID6["head"],
        "legs": _HUMANOID6["left_leg"] + _HUMANOID6["right_leg"],
    },
    # forelegs of a quadruped are named like arms in most rigs
    "quadruped": {
        "spine": _HUMANOID6["spine"],
        "head": _HUMANOID6["head"],
        "legs": (_HUMANOID6["left_leg"] + _HUMANOID6["right_leg"]
                 + [r"^(left|right)(arm|forearm|hand|finger)", r"^[lr]_?(arm|forearm|hand|finger|paw)"]),
    },
}

PRESETS = ("humanoid6", "biped-quad3")


def _resolve_rules(rules, joint_names):
    parts = []
    for pname, pats in rules.items():
        rx = [re.compile(p, re.IGNORECASE) for p in pats]
        parts.append((pname, [j for j, n in enumerate(joint_names)
                              if any(r.search(_canon(n)) for r in rx)]))
    return parts


def _build(named, num_joints):
    for pname, joints in named:
        if not joints:
            raise EmptyPart(f"body part {pname!r} matched no joints")
    return BodyPartition([n for n, _ in named], [list(j) + [num_joints] for _, j in named],
                         num_joints)


def preset_partition(preset, skeleton, structure_kind=None):
    """Resolve a compiled-in preset against a skeleton's joint names.

    ``structure_kind`` selects the biped or quadruped variant of
    ``biped-quad3`` and is guessed from the joint names when omitted.
    """
    names = skeleton.joint_names
    if preset == "humanoid6":
        return _build(_resolve_rules(_HUMANOID6, names), len(names))
    if preset == "biped-quad3":
        kind = structure_kind or guess_kind(names)
        if kind not in _BIPED_QUAD3:
            raise PartitionMismatch(f"biped-quad3 has no variant {kind!r}")
        return _build(_resolve_rules(_BIPED_QUAD3[kind], names), len(names))
    raise PartitionMismatch(f"unknown partition preset {preset!r}")


def guess_kind(joint_names):
    lowered = [_canon(n).lower() for n in joint_names]
    return "quadruped" if any(n.startswith("tail") for n in lowered) else "biped"


def load_partition(config, skeleton, structure_id=None):
    """Build a partition from a preset name or a YAML/JSON file.

    File layout::

        parts: [spine, head, legs]
        structures:
          biped:
            spine: [Hips, Spine, Spine1]
            ...
          quadruped: ...

    A file may also name a preset (``preset: biped-quad3``) plus an optional
    ``kinds`` mapping from structure id to preset variant.
    """
    if isinstance(config, BodyPartition):
        return config
    if isinstance(config, str) and config in PRESETS:
        return preset_partition(config, skeleton)
    path = Path(config)
    data = yaml.safe_load(path.read_text())
    if "preset" in data:
        kind = (data.get("kinds") or {}).get(structure_id)
        return preset_partition(data["preset"], skeleton, kind)
    structures = data.get("structures", {})
    if structure_id not in structures:
        if len(structures) == 1:
            structure_id = next(iter(structures))
        else:
            raise PartitionMismatch(f"{path}: no partition for structure {structure_id!r}")
    table = structures[structure_id]
    order = data.get("parts") or list(table)
    if set(order) != set(table):
        raise PartitionMismatch(f"{path}: part list differs for structure {structure_id!r}")
    names = [_canon(n) for n in skeleton.joint_names]
    named = []
    for pname in order:
        idx = []
        for jn in table[pname] or []:
            if _canon(jn) not in names:
                raise UnknownJoint(f"{path}: part {pname!r} names unknown joint {jn!r}")
            idx.append(names.index(_canon(jn)))
        named.append((pname, idx))
    return _build(named, len(names))


def build_mask(partition, J=None, token_self_only=True, dtype=np.float32):
    """Additive attention mask U over ``[tokens(N), joints(J), vel]``.

    Entry 0 lets row attend column; ``MASK_NEG`` blocks it. Tokens see the
    joints of their part, joints see joints sharing a part and the tokens of
    their parts. Every row sees itself so uncovered joints stay finite.
    """
    J = partition.num_joints if J is None else J
    if J != partition.num_joints:
        raise PartitionMismatch(f"partition built for {partition.num_joints} joints, not {J}")
    N = partition.N
    S = N + J + 1
    member = np.zeros((N, J + 1), dtype=bool)
    for k, p in enumerate(partition.parts):
        member[k, list(p)] = True
    allow = np.zeros((S, S), dtype=bool)
    allow[:N, :N] = np.eye(N, dtype=bool) if token_self_only else True
    allow[:N, N:] = member
    allow[N:, :N] = member.T
    share = (member.T.astype(int) @ member.astype(int)) > 0
    allow[N:, N:] = share
    np.fill_diagonal(allow, True)
    return np.where(allow, 0.0, MASK_NEG).astype(dtype)


def positional_encoding(j, d, basis=10000.0):
    """Sinusoidal code of joint index ``j``: even slots sin, odd slots cos."""
    if d < 2 or d % 2:
        raise OddDim(f"embedding size must be even and >= 2, got {d}")
    i = np.arange(d // 2)
    ang = np.asarray(j, dtype=np.float64)[..., None] / np.power(basis, 2 * i / d)
    pe = np.empty(ang.shape[:-1] + (d,))
    pe[..., 0::2] = np.sin(ang)
    pe[..., 1::2] = np.cos(ang)
    return pe


def pe_table(num_rows, d, basis=10000.0):
    return positional_encoding(np.arange(num_rows), d, basis)
