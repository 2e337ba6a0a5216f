"""Versioned named-array archive used for checkpoints and prepared datasets.

Layout (a zip file, entries written in sorted order with fixed timestamps so
identical inputs give byte-identical files)::

    MAGIC            b"PANRET-ARCHIVE"
    meta.json        {"format_version": 1, "kind": ..., "arrays": {name: {shape, dtype}}, ...}
    arrays/<name>.npy
"""
import io
import json
import zipfile

import numpy as np

from .errors import CheckpointError

MAGIC = b"PANRET-ARCHIVE"
FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _entry(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_archive(path, arrays, meta, kind="checkpoint"):
    meta = dict(meta)
    meta["format_version"] = FORMAT_VERSION
    meta["kind"] = kind
    meta["arrays"] = {k: {"shape": list(np.shape(v)), "dtype": str(np.asarray(v).dtype)}
                      for k, v in sorted(arrays.items())}
    with zipfile.ZipFile(path, "w") as zf:
        _entry(zf, "MAGIC", MAGIC)
        _entry(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.asarray(arrays[name]), allow_pickle=False)
            _entry(zf, f"arrays/{name}.npy", buf.getvalue())


def load_archive(path, kind=None):
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"{path}: unreadable archive ({e})") from None
    with zf:
        names = set(zf.namelist())
        if "MAGIC" not in names or zf.read("MAGIC") != MAGIC:
            raise CheckpointError(f"{path}: not a panret archive")
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
        if kind is not None and meta.get("kind") != kind:
            raise CheckpointError(f"{path}: expected a {kind} archive, found {meta.get('kind')}")
        arrays = {}
        for name, info in meta["arrays"].items():
            a = np.load(io.BytesIO(zf.read(f"arrays/{name}.npy")), allow_pickle=False)
            if list(a.shape) != info["shape"]:
                raise CheckpointError(f"{path}: array {name} has shape {a.shape}, meta says {info['shape']}")
            arrays[name] = a
    return arrays, meta
