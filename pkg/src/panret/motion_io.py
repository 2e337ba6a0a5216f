"""BVH ingestion, facing localization, clip windowing, z-score statistics and manifests."""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml

from . import kinematics as kin
from .errors import (
    EmptyDataset, FpsMismatch, ManifestError, ParseError, StructureMismatch, TooShort,
    UnsupportedChannel,
)

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-5

_CHANNELS = {f"{a}{k}" for a in "XYZ" for k in ("position", "rotation")}


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SkeletonDef:
    """One concrete skeleton: joint tree, bone offsets and rest height.

    ``channels`` and ``end_sites`` only matter for writing BVH back out.
    """

    name: str
    parents: tuple
    offsets: np.ndarray
    joint_names: tuple
    end_effectors: frozenset = frozenset()
    height: float = 0.0
    channels: tuple = ()
    end_sites: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "parents", tuple(int(p) for p in self.parents))
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "offsets", _frozen(self.offsets))
        object.__setattr__(self, "end_effectors", frozenset(int(j) for j in self.end_effectors))
        object.__setattr__(self, "end_sites", {int(k): _frozen(v) for k, v in self.end_sites.items()})
        if not self.channels:
            chans = tuple(
                ("Xposition", "Yposition", "Zposition", "Zrotation", "Xrotation", "Yrotation")
                if p < 0 else ("Zrotation", "Xrotation", "Yrotation") for p in self.parents)
            object.__setattr__(self, "channels", chans)
        else:
            object.__setattr__(self, "channels", tuple(tuple(c) for c in self.channels))
        J = len(self.parents)
        if self.offsets.shape != (J, 3) or len(self.joint_names) != J or len(self.channels) != J:
            raise StructureMismatch(f"skeleton {self.name!r}: inconsistent joint counts")
        roots = [j for j, p in enumerate(self.parents) if p < 0]
        if roots != [0]:
            raise StructureMismatch(f"skeleton {self.name!r}: need exactly one root at index 0")
        for j, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < j:
                raise StructureMismatch(f"skeleton {self.name!r}: joint {j} has parent {p}")
        if not self.height:
            object.__setattr__(self, "height", rest_height(self))
        if self.height <= 0:
            raise StructureMismatch(f"skeleton {self.name!r}: non-positive height")

    @property
    def num_joints(self):
        return len(self.parents)

    def index(self, name):
        return self.joint_names.index(name)

    def rest_positions(self, include_end_sites=False):
        ident = np.zeros((1, self.num_joints, 4))
        ident[..., 0] = 1.0
        pos = kin.fk_world(ident, np.zeros((1, 3)), self.offsets, self.parents)[0]
        if not include_end_sites:
            return pos
        tips = [pos[j] + self.end_sites[j] for j in sorted(self.end_sites)]
        return np.concatenate([pos, np.array(tips).reshape(-1, 3)], axis=0)

    @property
    def foot_joints(self):
        """End-effector joints near the ground in the rest pose (feet/toes)."""
        named = [j for j, n in enumerate(self.joint_names)
                 if ("foot" in n.lower() or "toe" in n.lower()) and j in self.end_effectors]
        if named:
            return sorted(named)
        pos = self.rest_positions()
        if not self.end_effectors:
            return []
        ee = sorted(self.end_effectors)
        low = min(pos[j, 1] for j in ee)
        return [j for j in ee if pos[j, 1] - low <= 0.2 * self.height]

    def same_structure(self, other):
        return self.parents == other.parents and self.joint_names == other.joint_names

    def with_offsets(self, offsets, name=None):
        return SkeletonDef(name or self.name, self.parents, offsets, self.joint_names,
                           self.end_effectors, 0.0, self.channels, self.end_sites)

    def to_dict(self):
        return {
            "name": self.name,
            "parents": list(self.parents),
            "offsets": self.offsets.tolist(),
            "joint_names": list(self.joint_names),
            "end_effectors": sorted(self.end_effectors),
            "height": float(self.height),
            "channels": [list(c) for c in self.channels],
            "end_sites": {str(k): v.tolist() for k, v in sorted(self.end_sites.items())},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["parents"], np.array(d["offsets"]), d["joint_names"],
                   d.get("end_effectors", ()), d.get("height", 0.0), d.get("channels", ()),
                   {int(k): v for k, v in d.get("end_sites", {}).items()})


def rest_height(skel):
    """Vertical extent of the identity-rotation pose, end sites included."""
    pos = skel.rest_positions(include_end_sites=True)
    return float(pos[:, 1].max() - pos[:, 1].min())


@dataclass(frozen=True, eq=False)
class RawMotion:
    """Parsed motion before localization. ``joint_translations`` is only set
    when non-root joints carry position channels."""

    skeleton: SkeletonDef
    frame_time: float
    root_positions: np.ndarray
    local_rotations: np.ndarray
    joint_translations: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "root_positions", _frozen(self.root_positions))
        object.__setattr__(self, "local_rotations", _frozen(self.local_rotations))
        if self.joint_translations is not None:
            object.__setattr__(self, "joint_translations", _frozen(self.joint_translations))
        T = self.local_rotations.shape[0]
        if self.local_rotations.shape != (T, self.skeleton.num_joints, 4):
            raise StructureMismatch("rotation array does not match skeleton")
        if self.root_positions.shape != (T, 3):
            raise StructureMismatch("root position array does not match frame count")

    @property
    def num_frames(self):
        return self.local_rotations.shape[0]

    @property
    def fps(self):
        return 1.0 / self.frame_time

    def world_positions(self):
        return kin.fk_world(self.local_rotations, self.root_positions,
                            self.skeleton.offsets, self.skeleton.parents)


@dataclass(frozen=True, eq=False)
class MotionClip:
    """Facing-localized clip ``[Q, Vbar]``.

    ``start_position``/``start_yaw`` anchor the clip in the world so the
    original trajectory can be recovered: world root position at frame t is
    ``start_position + R_y(start_yaw) @ integrate_root(Vbar)[t]``.
    """

    Q: np.ndarray
    Vbar: np.ndarray
    skeleton: SkeletonDef
    start_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    start_yaw: float = 0.0
    source: str = ""
    index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "Q", _frozen(self.Q))
        object.__setattr__(self, "Vbar", _frozen(np.reshape(self.Vbar, (-1, 1, 4))))
        object.__setattr__(self, "start_position", _frozen(self.start_position))
        if self.Q.shape != (self.T, self.skeleton.num_joints, 4) or self.Vbar.shape[0] != self.T:
            raise StructureMismatch("clip arrays do not match skeleton")

    @property
    def T(self):
        return self.Q.shape[0]

    @property
    def motion(self):
        """(T, J+1, 4) array with the velocity pseudo-joint appended last."""
        return np.concatenate([self.Q, self.Vbar], axis=1)

    @classmethod
    def from_motion(cls, motion, skeleton, **kw):
        motion = np.asarray(motion, dtype=np.float64)
        return cls(motion[:, :-1], motion[:, -1:], skeleton, **kw)

    def positions(self):
        """World joint positions (origin start)."""
        return kin.fk(self.Q, self.Vbar, self.skeleton.offsets, self.skeleton.parents)

    def global_root(self):
        pos, yaw = kin.integrate_root(self.Vbar)
        return (self.start_position + kin.rotate_about_up(pos, np.array(self.start_yaw)),
                self.start_yaw + yaw)


def hemisphere_align(q, axis=0):
    """Flip signs so consecutive quaternions along ``axis`` have dot >= 0."""
    q = np.array(q, dtype=np.float64)
    q = np.moveaxis(q, axis, 0)
    for t in range(1, q.shape[0]):
        flip = np.sum(q[t] * q[t - 1], axis=-1) < 0
        q[t][flip] *= -1
    return np.moveaxis(q, 0, axis)


# --------------------------------------------------------------------------- BVH

def _tokens(text):
    for lineno, line in enumerate(text.splitlines(), start=1):
        for tok in line.split():
            yield lineno, tok


class _TokenStream:
    def __init__(self, text, path):
        self._toks = list(_tokens(text))
        self._i = 0
        self.path = path

    def peek(self):
        if self._i >= len(self._toks):
            return None, None
        return self._toks[self._i]

    def next(self, what="token"):
        if self._i >= len(self._toks):
            last = self._toks[-1][0] if self._toks else 1
            raise ParseError(f"unexpected end of file, expected {what}", last, self.path)
        tok = self._toks[self._i]
        self._i += 1
        return tok

    def expect(self, word):
        line, tok = self.next(repr(word))
        if tok.upper() != word.upper():
            raise ParseError(f"expected {word!r}, got {tok!r}", line, self.path)
        return line

    def number(self, what="number"):
        line, tok = self.next(what)
        try:
            return float(tok)
        except ValueError:
            raise ParseError(f"expected {what}, got {tok!r}", line, self.path) from None

    def integer(self, what="integer"):
        line, tok = self.next(what)
        try:
            return int(tok)
        except ValueError:
            raise ParseError(f"expected {what}, got {tok!r}", line, self.path) from None

    def rest_lines(self):
        """Remaining tokens grouped by line."""
        rows = {}
        for line, tok in self._toks[self._i:]:
            rows.setdefault(line, []).append(tok)
        self._i = len(self._toks)
        return rows


def parse_bvh(path, name=None):
    """Parse a BVH file into ``(SkeletonDef, RawMotion)``.

    Euler channels are converted to unit quaternions honoring each joint's
    channel order. End Sites are not joints; their owners are flagged as end
    effectors and their offsets kept for writing.
    """
    path = Path(path)
    return parse_bvh_text(path.read_text(), name=name or path.stem, path=str(path))


def parse_bvh_text(text, name="skeleton", path=None):
    ts = _TokenStream(text, path)
    ts.expect("HIERARCHY")
    line, tok = ts.next("ROOT")
    if tok.upper() != "ROOT":
        raise ParseError(f"expected ROOT, got {tok!r}", line, path)

    names, parents, offsets, channels, end_sites = [], [], [], [], {}

    def joint(parent):
        _, jname = ts.next("joint name")
        idx = len(names)
        names.append(jname)
        parents.append(parent)
        offsets.append(None)
        channels.append(())
        ts.expect("{")
        while True:
            line, tok = ts.next("joint body")
            up = tok.upper()
            if up == "OFFSET":
                offsets[idx] = [ts.number("offset") for _ in range(3)]
            elif up == "CHANNELS":
                n = ts.integer("channel count")
                chans = []
                for _ in range(n):
                    cl, c = ts.next("channel name")
                    if c not in _CHANNELS:
                        raise UnsupportedChannel(f"unsupported channel {c!r}", cl, path)
                    chans.append(c)
                channels[idx] = tuple(chans)
            elif up == "JOINT":
                joint(idx)
            elif up == "END":
                ts.expect("Site")
                ts.expect("{")
                ts.expect("OFFSET")
                end_sites[idx] = [ts.number("offset") for _ in range(3)]
                ts.expect("}")
            elif up == "}":
                break
            else:
                raise ParseError(f"unexpected token {tok!r}", line, path)
        if offsets[idx] is None:
            raise ParseError(f"joint {jname!r} has no OFFSET", line, path)

    joint(-1)
    ts.expect("MOTION")
    ts.expect("Frames:")
    n_frames = ts.integer("frame count")
    line, tok = ts.next("Frame Time:")
    if tok.upper() != "FRAME":
        raise ParseError(f"expected 'Frame Time:', got {tok!r}", line, path)
    ts.expect("Time:")
    frame_time = ts.number("frame time")
    n_ch = sum(len(c) for c in channels)
    rows = ts.rest_lines()
    data = []
    for line, toks in rows.items():
        if len(toks) != n_ch:
            raise ParseError(f"expected {n_ch} channel values, got {len(toks)}", line, path)
        try:
            data.append([float(t) for t in toks])
        except ValueError:
            raise ParseError("non-numeric motion value", line, path) from None
    if len(data) != n_frames:
        raise ParseError(f"header declares {n_frames} frames, found {len(data)}",
                         max(rows) if rows else None, path)
    data = np.array(data, dtype=np.float64).reshape(n_frames, n_ch)

    J = len(names)
    offsets = np.array(offsets, dtype=np.float64)
    rots = np.zeros((n_frames, J, 4))
    trans = np.repeat(offsets[None], n_frames, axis=0)
    has_trans = np.zeros(J, dtype=bool)
    col = 0
    for j, chans in enumerate(channels):
        rot_axes, rot_cols = "", []
        for k, c in enumerate(chans):
            if c.endswith("position"):
                trans[:, j, "XYZ".index(c[0])] = data[:, col + k]
                has_trans[j] = True
            else:
                rot_axes += c[0]
                rot_cols.append(col + k)
        col += len(chans)
        if rot_axes:
            rots[:, j] = kin.quat_from_euler(np.radians(data[:, rot_cols]), rot_axes)
        else:
            rots[:, j, 0] = 1.0
    rots = hemisphere_align(kin.quat_normalize(rots))

    skel = SkeletonDef(name, parents, offsets, names, end_sites.keys(), 0.0, channels, end_sites)
    if has_trans[0]:
        root_pos = trans[:, 0]
    else:
        root_pos = np.repeat(offsets[:1], n_frames, axis=0)
    joint_trans = trans if has_trans[1:].any() else None
    return skel, RawMotion(skel, frame_time, root_pos, rots, joint_trans)


def _fmt(x):
    s = f"{x:.6f}"
    return "0.000000" if s == "-0.000000" else s


def serialize_bvh(skel, raw=None, rotations=None, root_positions=None, frame_time=None):
    """BVH text for ``skel``; motion from ``raw`` or explicit arrays."""
    if raw is not None:
        rotations = raw.local_rotations
        root_positions = raw.root_positions
        frame_time = raw.frame_time
        joint_trans = raw.joint_translations
    else:
        joint_trans = None
    rotations = np.asarray(rotations, dtype=np.float64)
    root_positions = np.asarray(root_positions, dtype=np.float64)
    T = rotations.shape[0]
    children = {j: [] for j in range(skel.num_joints)}
    for j, p in enumerate(skel.parents):
        if p >= 0:
            children[p].append(j)

    out = ["HIERARCHY"]

    def emit(j, depth):
        ind = "\t" * depth
        kw = "ROOT" if skel.parents[j] < 0 else "JOINT"
        out.append(f"{ind}{kw} {skel.joint_names[j]}")
        out.append(f"{ind}{{")
        out.append(f"{ind}\tOFFSET {' '.join(_fmt(v) for v in skel.offsets[j])}")
        ch = skel.channels[j]
        if ch:
            out.append(f"{ind}\tCHANNELS {len(ch)} {' '.join(ch)}")
        for c in children[j]:
            emit(c, depth + 1)
        if j in skel.end_sites:
            out.append(f"{ind}\tEnd Site")
            out.append(f"{ind}\t{{")
            out.append(f"{ind}\t\tOFFSET {' '.join(_fmt(v) for v in skel.end_sites[j])}")
            out.append(f"{ind}\t}}")
        out.append(f"{ind}}}")

    emit(0, 0)
    out.append("MOTION")
    out.append(f"Frames: {T}")
    out.append(f"Frame Time: {frame_time:.8f}")

    cols = []
    for j, chans in enumerate(skel.channels):
        rot_axes = "".join(c[0] for c in chans if c.endswith("rotation"))
        eul = np.degrees(kin.quat_to_euler(rotations[:, j], rot_axes)) if rot_axes else None
        r = 0
        for c in chans:
            axis = "XYZ".index(c[0])
            if c.endswith("position"):
                if j == 0:
                    cols.append(root_positions[:, axis])
                elif joint_trans is not None:
                    cols.append(joint_trans[:, j, axis])
                else:
                    cols.append(np.full(T, skel.offsets[j, axis]))
            else:
                cols.append(eul[:, r])
                r += 1
    data = np.stack(cols, axis=1) if cols else np.zeros((T, 0))
    for row in data:
        out.append(" ".join(_fmt(v) for v in row))
    return "\n".join(out) + "\n"


def write_bvh(path, skel, raw=None, **kw):
    Path(path).write_text(serialize_bvh(skel, raw, **kw))


# ------------------------------------------------------------ localization

def decimation_stride(frame_time, fps, tol=0.01, source=""):
    src_fps = 1.0 / frame_time
    stride = int(round(src_fps / fps))
    if stride < 1 or abs(src_fps / stride - fps) > tol * fps:
        raise FpsMismatch(f"{source or 'motion'}: {src_fps:.3f} fps cannot be decimated to {fps} fps")
    return stride


def localize(raw, fps=None):
    """Decimate to ``fps`` and remove per-frame root yaw.

    Returns ``(Q, Vbar, world_root_positions, world_yaw)`` for the full
    sequence. ``Vbar[0]`` is zero; later frames hold the root displacement
    expressed in the previous frame's yaw frame and the yaw delta.
    """
    stride = 1 if fps is None else decimation_stride(raw.frame_time, fps, source=raw.skeleton.name)
    rots = raw.local_rotations[::stride]
    pos = raw.root_positions[::stride]
    yaw, rest = kin.swing_twist_yaw(rots[:, 0])
    Q = rots.copy()
    Q[:, 0] = rest
    Q = hemisphere_align(Q)
    T = Q.shape[0]
    vbar = np.zeros((T, 1, 4))
    if T > 1:
        delta = pos[1:] - pos[:-1]
        vbar[1:, 0, :3] = kin.rotate_about_up(delta, -yaw[:-1])
        vbar[1:, 0, 3] = kin.wrap_angle(yaw[1:] - yaw[:-1])
    return Q, vbar, pos, yaw


def localize_and_clip(raw, clip_len=64, fps=30, stride=None):
    """Localize ``raw`` and cut it into windows of ``clip_len`` frames.

    Windows are non-overlapping by default (``stride=clip_len``); the
    trailing remainder is dropped.
    """
    Q, vbar, pos, yaw = localize(raw, fps)
    T = Q.shape[0]
    if T < clip_len:
        raise TooShort(f"{raw.skeleton.name}: {T} frames after downsampling, need {clip_len}")
    stride = stride or clip_len
    clips = []
    for k, s in enumerate(range(0, T - clip_len + 1, stride)):
        v = vbar[s:s + clip_len].copy()
        if s == 0:
            start_pos, start_yaw = pos[0], yaw[0]
        else:
            start_pos, start_yaw = pos[s - 1], yaw[s - 1]
        clips.append(MotionClip(Q[s:s + clip_len], v, raw.skeleton, start_pos, float(start_yaw),
                                raw.skeleton.name, k))
    return clips


def delocalize(clip, frame_time=1 / 30):
    """Inverse of localization: a ``RawMotion`` placed via the clip anchor."""
    root_pos, yaw = clip.global_root()
    rots = clip.Q.copy()
    rots[:, 0] = kin.quat_mul(kin.yaw_quat(yaw), clip.Q[:, 0])
    return RawMotion(clip.skeleton, frame_time, root_pos, hemisphere_align(rots))


# ------------------------------------------------------------ normalization

@dataclass(frozen=True, eq=False)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean))
        object.__setattr__(self, "std", _frozen(np.maximum(self.std, STD_FLOOR)))


def _motion_array(x):
    if isinstance(x, MotionClip):
        return x.motion
    return x if torch.is_tensor(x) else np.asarray(x)


def compute_norm_stats(clips):
    """Per-channel mean/std over every frame of every training clip."""
    clips = list(clips)
    if not clips:
        raise EmptyDataset("cannot compute normalization statistics of an empty set")
    data = np.concatenate([_motion_array(c).reshape(-1, *_motion_array(c).shape[-2:])
                           for c in clips], axis=0)
    return NormStats(data.mean(axis=0), data.std(axis=0))


def apply_norm(x, stats):
    """Z-score a motion array (...,T,J+1,4) or a ``MotionClip`` (returns an array)."""
    m = _motion_array(x)
    if hasattr(m, "new_tensor"):
        return (m - m.new_tensor(stats.mean)) / m.new_tensor(stats.std)
    return (m - stats.mean) / stats.std


def invert_norm(x, stats):
    m = _motion_array(x)
    if hasattr(m, "new_tensor"):
        return m * m.new_tensor(stats.std) + m.new_tensor(stats.mean)
    return m * stats.std + stats.mean


# ------------------------------------------------------------ manifests

@dataclass
class ManifestEntry:
    path: Path
    split: str
    skeleton: str = ""
    motion: str = ""


@dataclass
class DatasetManifest:
    """Structure id, target fps and file -> split assignments.

    YAML layout::

        structure_id: A
        fps: 30
        clip_len: 64
        files:
          - {path: walk_01.bvh, split: train, skeleton: Aj}
          - {path: walk_02.bvh, split: test}
    """

    structure_id: str
    fps: int
    files: list
    clip_len: int = 64
    root: Path = Path(".")

    def split(self, name):
        return [f for f in self.files if f.split == name]

    def check_paths(self):
        missing = [str(f.path) for f in self.files if not f.path.exists()]
        if missing:
            raise ManifestError(f"missing files: {', '.join(missing)}")

    def to_dict(self):
        return {
            "structure_id": self.structure_id, "fps": self.fps, "clip_len": self.clip_len,
            "files": [{"path": str(f.path), "split": f.split, "skeleton": f.skeleton,
                       "motion": f.motion} for f in self.files],
        }


_MANIFEST_KEYS = {"structure_id", "fps", "clip_len", "files"}


def load_manifest(path, check=True):
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ManifestError(f"{path}: {e}") from None
    if not isinstance(data, dict):
        raise ManifestError(f"{path}: manifest must be a mapping")
    unknown = set(data) - _MANIFEST_KEYS
    if unknown:
        raise ManifestError(f"{path}: unknown keys {sorted(unknown)}")
    for key in ("structure_id", "fps", "files"):
        if key not in data:
            raise ManifestError(f"{path}: missing key {key!r}")
    entries, seen = [], {}
    for item in data["files"]:
        if isinstance(item, str):
            item = {"path": item, "split": "train"}
        split = item.get("split", "train")
        if split not in ("train", "test"):
            raise ManifestError(f"{path}: bad split {split!r} for {item.get('path')}")
        p = Path(item["path"])
        if not p.is_absolute():
            p = path.parent / p
        key = p.resolve()
        if key in seen and seen[key] != split:
            raise ManifestError(f"{path}: {item['path']} listed in both train and test")
        seen[key] = split
        if key in [e.path.resolve() for e in entries]:
            continue
        entries.append(ManifestEntry(p, split, str(item.get("skeleton") or p.parent.name),
                                     str(item.get("motion") or p.stem)))
    m = DatasetManifest(str(data["structure_id"]), int(data["fps"]), entries,
                        int(data.get("clip_len", 64)), path.parent)
    if check:
        m.check_paths()
    return m


def save_manifest(manifest, path):
    Path(path).write_text(yaml.safe_dump(manifest.to_dict(), sort_keys=False))


# ------------------------------------------------------------ joint mapping

def apply_joint_mapping(raw, template, mapping):
    """Re-express ``raw`` on the joint tree of ``template``.

    ``mapping`` maps template joint name -> source joint name or ``None``.
    Unmapped template joints get identity rotation and a zero offset, i.e.
    a zero-length bone.
    """
    src = raw.skeleton
    T = raw.num_frames
    rots = np.zeros((T, template.num_joints, 4))
    rots[..., 0] = 1.0
    offsets = np.zeros((template.num_joints, 3))
    for j, name in enumerate(template.joint_names):
        s = mapping.get(name, name if name in src.joint_names else None)
        if s is None:
            continue
        if s not in src.joint_names:
            from .errors import UnknownJoint

            raise UnknownJoint(f"mapping refers to unknown source joint {s!r}")
        si = src.index(s)
        rots[:, j] = raw.local_rotations[:, si]
        offsets[j] = src.offsets[si]
    skel = SkeletonDef(src.name, template.parents, offsets, template.joint_names,
                       template.end_effectors, 0.0, template.channels,
                       {j: np.zeros(3) for j in template.end_sites})
    return RawMotion(skel, raw.frame_time, raw.root_positions, hemisphere_align(rots))


def load_joint_mapping(path):
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ManifestError(f"{path}: joint mapping must be a mapping")
    return {str(k): (None if v in (None, "", "null") else str(v)) for k, v in data.items()}


# ------------------------------------------------------------ prepared clip sets

@dataclass
class ClipSet:
    """Stacked clips of one structure: physical motions plus per-clip skeleton data."""

    structure_id: str
    template: SkeletonDef
    motions: np.ndarray  # (n, T, J+1, 4)
    offsets: np.ndarray  # (n, J, 3)
    heights: np.ndarray  # (n,)
    skeleton_names: list
    motion_keys: list
    start_positions: np.ndarray = None  # (n, 3)
    start_yaws: np.ndarray = None  # (n,)

    def __post_init__(self):
        n = len(self.motions)
        if self.start_positions is None:
            self.start_positions = np.zeros((n, 3))
        if self.start_yaws is None:
            self.start_yaws = np.zeros(n)

    def __len__(self):
        return len(self.motions)

    @classmethod
    def from_clips(cls, structure_id, clips, template=None):
        clips = list(clips)
        if not clips:
            raise EmptyDataset(f"structure {structure_id!r}: no clips")
        template = template or clips[0].skeleton
        for c in clips:
            if not c.skeleton.same_structure(template):
                raise StructureMismatch(f"clip from {c.skeleton.name!r} does not match structure "
                                        f"{structure_id!r}")
        return cls(structure_id, template,
                   np.stack([c.motion for c in clips]),
                   np.stack([c.skeleton.offsets for c in clips]),
                   np.array([c.skeleton.height for c in clips]),
                   [c.skeleton.name for c in clips],
                   [f"{c.source}#{c.index}" for c in clips],
                   np.stack([c.start_position for c in clips]),
                   np.array([c.start_yaw for c in clips]))

    def skeleton(self, i):
        return self.template.with_offsets(self.offsets[i], name=self.skeleton_names[i])

    def clip(self, i):
        src, _, idx = self.motion_keys[i].rpartition("#")
        return MotionClip.from_motion(self.motions[i], self.skeleton(i),
                                      start_position=self.start_positions[i],
                                      start_yaw=float(self.start_yaws[i]), source=src,
                                      index=int(idx or 0))

    def clips(self):
        return [self.clip(i) for i in range(len(self))]

    def subset(self, idx):
        idx = list(idx)
        return ClipSet(self.structure_id, self.template, self.motions[idx], self.offsets[idx],
                       self.heights[idx], [self.skeleton_names[i] for i in idx],
                       [self.motion_keys[i] for i in idx], self.start_positions[idx],
                       self.start_yaws[idx])

    def arrays(self, prefix=""):
        return {f"{prefix}motions": self.motions, f"{prefix}offsets": self.offsets,
                f"{prefix}heights": self.heights, f"{prefix}start_positions": self.start_positions,
                f"{prefix}start_yaws": self.start_yaws}

    def meta(self):
        return {"structure_id": self.structure_id, "template": self.template.to_dict(),
                "skeleton_names": list(self.skeleton_names), "motion_keys": list(self.motion_keys)}

    @classmethod
    def from_parts(cls, arrays, meta, prefix=""):
        return cls(meta["structure_id"], SkeletonDef.from_dict(meta["template"]),
                   arrays[f"{prefix}motions"], arrays[f"{prefix}offsets"],
                   arrays[f"{prefix}heights"], list(meta["skeleton_names"]),
                   list(meta["motion_keys"]), arrays[f"{prefix}start_positions"],
                   arrays[f"{prefix}start_yaws"])


def save_prepared(path, splits, stats, extra_meta=None):
    """Write ``{split: ClipSet}`` plus normalization stats as one archive."""
    from .archive import save_archive

    arrays = {"norm/mean": stats.mean, "norm/std": stats.std}
    meta = {"splits": {}}
    for name, cs in sorted(splits.items()):
        arrays.update(cs.arrays(prefix=f"{name}/"))
        meta["splits"][name] = cs.meta()
    meta.update(extra_meta or {})
    save_archive(path, arrays, meta, kind="dataset")


def load_prepared(path):
    """Returns ``({split: ClipSet}, NormStats, meta)``."""
    from .archive import load_archive

    arrays, meta = load_archive(path, kind="dataset")
    splits = {name: ClipSet.from_parts(arrays, m, prefix=f"{name}/")
              for name, m in meta["splits"].items()}
    return splits, NormStats(arrays["norm/mean"], arrays["norm/std"]), meta
