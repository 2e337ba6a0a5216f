"""Procedural skeletons and walking-like motion used for fixtures and demos.

Nothing here comes from captured data; the generators exist so the pipeline
can be exercised end to end without licensed datasets.
"""
from pathlib import Path

import numpy as np

from . import kinematics as kin
from .motion_io import DatasetManifest, ManifestEntry, RawMotion, SkeletonDef, save_manifest, write_bvh

EULER_ORDERS = ("ZXY", "XYZ", "YXZ", "ZYX", "XZY", "YZX")


def _chain(table):
    """``table`` is a list of (name, parent_name, offset)."""
    names = [s[0] for s in table]
    parents = [-1 if s[1] is None else names.index(s[1]) for s in table]
    offsets = np.array([s[2] for s in table], dtype=np.float64)
    return names, parents, offsets


def _humanoid_table(extra_spine=False, fingers=False):
    table = [("Hips", None, (0.0, 0.0, 0.0)),
            ("Spine", "Hips", (0.0, 0.10, 0.0)),
            ("Spine1", "Spine", (0.0, 0.12, 0.0)),
            ("Spine2", "Spine1", (0.0, 0.12, 0.0))]
    top = "Spine2"
    if extra_spine:
        table.append(("Spine3", "Spine2", (0.0, 0.08, 0.0)))
        top = "Spine3"
    table += [("Neck", top, (0.0, 0.14, 0.0)), ("Head", "Neck", (0.0, 0.10, 0.0))]
    for prefix, sign in (("Left", 1.0), ("Right", -1.0)):
        table += [(f"{prefix}Shoulder", top, (sign * 0.06, 0.12, 0.0)),
                 (f"{prefix}Arm", f"{prefix}Shoulder", (sign * 0.12, 0.0, 0.0)),
                 (f"{prefix}ForeArm", f"{prefix}Arm", (sign * 0.26, 0.0, 0.0)),
                 (f"{prefix}Hand", f"{prefix}ForeArm", (sign * 0.24, 0.0, 0.0))]
        if fingers:
            table += [(f"{prefix}HandIndex1", f"{prefix}Hand", (sign * 0.08, 0.0, 0.02)),
                     (f"{prefix}HandIndex2", f"{prefix}HandIndex1", (sign * 0.03, 0.0, 0.0)),
                     (f"{prefix}HandThumb1", f"{prefix}Hand", (sign * 0.03, 0.0, 0.04))]
    for prefix, sign in (("Left", 1.0), ("Right", -1.0)):
        table += [(f"{prefix}UpLeg", "Hips", (sign * 0.09, -0.05, 0.0)),
                 (f"{prefix}Leg", f"{prefix}UpLeg", (0.0, -0.42, 0.0)),
                 (f"{prefix}Foot", f"{prefix}Leg", (0.0, -0.42, 0.0)),
                 (f"{prefix}ToeBase", f"{prefix}Foot", (0.0, -0.06, 0.12))]
    return table


def _quadruped_table():
    table = [("Hips", None, (0.0, 0.0, 0.0)),
            ("Spine", "Hips", (0.0, 0.02, 0.25)),
            ("Spine1", "Spine", (0.0, 0.0, 0.25)),
            ("Neck", "Spine1", (0.0, 0.12, 0.12)),
            ("Head", "Neck", (0.0, 0.08, 0.12))]
    for prefix, sign in (("Left", 1.0), ("Right", -1.0)):
        table += [(f"{prefix}Arm", "Spine1", (sign * 0.1, -0.05, 0.0)),
                 (f"{prefix}ForeArm", f"{prefix}Arm", (0.0, -0.25, 0.0)),
                 (f"{prefix}Hand", f"{prefix}ForeArm", (0.0, -0.25, 0.02))]
    for prefix, sign in (("Left", 1.0), ("Right", -1.0)):
        table += [(f"{prefix}UpLeg", "Hips", (sign * 0.1, -0.05, 0.0)),
                 (f"{prefix}Leg", f"{prefix}UpLeg", (0.0, -0.25, -0.03)),
                 (f"{prefix}Foot", f"{prefix}Leg", (0.0, -0.25, 0.02))]
    table += [("Tail", "Hips", (0.0, 0.03, -0.1)),
             ("Tail1", "Tail", (0.0, 0.0, -0.12)),
             ("Tail2", "Tail1", (0.0, 0.0, -0.12))]
    return table


STRUCTURES = {
    # Mixamo-like humanoid with fingers and an extra spine joint (29 joints)
    "humanoid_a": lambda: _humanoid_table(extra_spine=True, fingers=True),
    # Mixamo-like humanoid without fingers (22 joints)
    "humanoid_b": lambda: _humanoid_table(),
    "biped": lambda: _humanoid_table(),
    "quadruped": _quadruped_table,
}


def make_skeleton(structure, name=None, scale=1.0, jitter=0.0, rng=None, euler_order="ZXY",
                  mixed_orders=False):
    """A concrete skeleton of ``structure`` with scaled, optionally jittered bones."""
    rng = rng if rng is not None else np.random.default_rng(0)
    names, parents, offsets = _chain(STRUCTURES[structure]())
    offsets = offsets * scale
    if jitter:
        offsets[1:] *= 1.0 + jitter * rng.uniform(-1, 1, size=(len(names) - 1, 1))
    children = {p for p in parents if p >= 0}
    ends = [j for j in range(len(names)) if j not in children]
    end_sites = {}
    for j in ends:
        d = offsets[j]
        n = np.linalg.norm(d)
        end_sites[j] = (0.5 * d if n > 0 else np.array([0.0, 0.05 * scale, 0.0]))
    channels = []
    for j, p in enumerate(parents):
        order = rng.choice(EULER_ORDERS) if mixed_orders else euler_order
        rot = tuple(f"{a}rotation" for a in order)
        channels.append(("Xposition", "Yposition", "Zposition") + rot if p < 0 else rot)
    return SkeletonDef(name or structure, parents, offsets, names, ends, 0.0, channels, end_sites)


def _rx(a):
    return kin.quat_from_axis_angle(np.array([1.0, 0.0, 0.0]), np.asarray(a, dtype=np.float64))


def _rz(a):
    return kin.quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), np.asarray(a, dtype=np.float64))


def walk_motion(skel, frames=128, fps=30, speed=1.2, turn_rate=0.2, cadence=1.8, phase=0.0,
                rng=None, noise=0.0):
    """Walking-like motion: sinusoidal limb swing, root translating along its facing."""
    rng = rng if rng is not None else np.random.default_rng(0)
    dt = 1.0 / fps
    t = np.arange(frames) * dt
    w = 2 * np.pi * cadence * t + phase
    J = skel.num_joints
    rots = np.zeros((frames, J, 4))
    rots[..., 0] = 1.0
    names = [n.lower() for n in skel.joint_names]
    quad = any(n.startswith("tail") for n in names)
    for j, n in enumerate(names):
        side = 1.0 if n.startswith("left") else -1.0 if n.startswith("right") else 0.0
        limb = n[4:] if n.startswith("left") else n[5:] if n.startswith("right") else n
        if limb == "upleg":
            rots[:, j] = _rx(0.45 * side * np.sin(w))
        elif limb == "leg":
            rots[:, j] = _rx(0.6 * np.maximum(0.0, np.sin(w + side * np.pi / 2)))
        elif quad and limb == "arm":
            rots[:, j] = _rx(-0.45 * side * np.sin(w))
        elif quad and limb == "forearm":
            rots[:, j] = _rx(-0.5 * np.maximum(0.0, np.sin(w - side * np.pi / 2)))
        elif limb == "arm":
            rots[:, j] = kin.quat_mul(_rz(-side * 1.2), _rx(-0.35 * side * np.sin(w)))
        elif limb == "forearm":
            rots[:, j] = _rx(-0.3 - 0.15 * np.sin(w))
        elif n.startswith("spine"):
            rots[:, j] = _rx(0.03 * np.sin(2 * w))
        elif n.startswith("tail"):
            rots[:, j] = kin.quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), 0.3 * np.sin(w))
        elif n in ("head", "neck"):
            rots[:, j] = _rx(0.05 * np.sin(2 * w + 0.3))
    if noise:
        axes = rng.normal(size=(frames, J, 3))
        rots = kin.quat_mul(rots, kin.quat_from_axis_angle(axes, noise * rng.normal(size=(frames, J))))
    yaw = phase + turn_rate * t
    rots[:, 0] = kin.quat_mul(kin.yaw_quat(yaw), rots[:, 0])
    heading = np.stack([np.sin(yaw), np.zeros_like(yaw), np.cos(yaw)], axis=-1)
    root = np.cumsum(speed * dt * heading, axis=0) - speed * dt * heading[:1]
    hip_height = -skel.rest_positions(include_end_sites=True)[:, 1].min()
    root[:, 1] = hip_height * (1.0 + 0.02 * np.sin(2 * w))
    return RawMotion(skel, dt, root, kin.quat_normalize(rots))


def write_corpus(out_dir, structure, n_skeletons=2, n_motions=2, frames=140, fps=60, seed=0,
                 mixed_orders=False, test_fraction=0.0, speeds=(0.8, 1.6)):
    """Write BVH files ``<out_dir>/<skeleton>/<motion>.bvh`` and a manifest.

    Returns the manifest path.
    """
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # motion parameters are shared by every skeleton, so the same motion name
    # is the same animation on different proportions (usable as ground truth)
    motions = [dict(speed=float(rng.uniform(*speeds)), turn_rate=float(rng.uniform(-0.4, 0.4)),
                    cadence=float(rng.uniform(1.4, 2.2)), phase=float(rng.uniform(0, 2 * np.pi)))
               for _ in range(n_motions)]
    splits = ["test" if test_fraction and rng.uniform() < test_fraction else "train"
              for _ in range(n_motions)]
    entries = []
    for s in range(n_skeletons):
        sname = f"{structure}_{s}"
        scale = float(rng.uniform(0.8, 1.25))
        skel = make_skeleton(structure, sname, scale=scale, jitter=0.1, rng=rng,
                             mixed_orders=mixed_orders)
        (out_dir / sname).mkdir(exist_ok=True)
        for m, params in enumerate(motions):
            params = dict(params, speed=params["speed"] * scale)
            raw = walk_motion(skel, frames, fps, rng=rng, **params)
            path = out_dir / sname / f"walk_{m:02d}.bvh"
            write_bvh(path, skel, raw)
            entries.append(ManifestEntry(Path(sname) / path.name, splits[m], sname, path.stem))
    manifest = DatasetManifest(structure, 30, entries)
    mpath = out_dir / "manifest.yaml"
    save_manifest(manifest, mpath)
    return mpath
