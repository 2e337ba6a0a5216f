"""Quaternion algebra, forward kinematics and root-trajectory integration.

Quaternions are Hamilton, w-first ``(w, x, y, z)``; the world is right-handed
and y-up. Every function accepts either numpy arrays or torch tensors and
returns the same kind it was given. The torch path is differentiable, which
is what the kinematic loss relies on.
"""
import functools

import numpy as np
import torch

from .errors import ShapeMismatch

UP = 1  # index of the vertical axis

_AXES = {"X": 0, "Y": 1, "Z": 2}


def _np_compat(fn):
    """Run ``fn`` on tensors; convert numpy inputs in and outputs back."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        numpy_in = any(isinstance(a, np.ndarray) for a in args)
        if not numpy_in:
            return fn(*args, **kwargs)
        tensors = [a for a in args if torch.is_tensor(a)]
        if tensors:
            ref = tensors[0]
            args = [torch.as_tensor(a, dtype=ref.dtype) if isinstance(a, np.ndarray) else a
                    for a in args]
            return fn(*args, **kwargs)
        args = [torch.from_numpy(np.array(a, dtype=np.float64))
                if isinstance(a, np.ndarray) else a for a in args]
        out = fn(*args, **kwargs)
        if isinstance(out, tuple):
            return tuple(o.detach().numpy() if torch.is_tensor(o) else o for o in out)
        return out.detach().numpy()

    return wrapper


@_np_compat
def quat_mul(a, b):
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], dim=-1)


@_np_compat
def quat_conj(q):
    return q * q.new_tensor([1.0, -1.0, -1.0, -1.0])


@_np_compat
def quat_rotate_vec(q, v):
    """Rotate vectors ``v`` (...,3) by unit quaternions ``q`` (...,4)."""
    w, u = q[..., :1], q[..., 1:]
    if q.shape[:-1] != v.shape[:-1]:
        shape = torch.broadcast_shapes(q.shape[:-1], v.shape[:-1])
        w = w.expand(shape + (1,))
        u = u.expand(shape + (3,))
        v = v.expand(shape + (3,))
    t = 2.0 * torch.linalg.cross(u, v)
    return v + w * t + torch.linalg.cross(u, t)


@_np_compat
def quat_normalize(q, eps=1e-8, return_flag=False):
    """Unit-normalize; near-zero quaternions become identity (flagged)."""
    norm = q.norm(dim=-1, keepdim=True)
    bad = norm < eps
    ident = torch.zeros_like(q)
    ident[..., 0] = 1.0
    out = torch.where(bad, ident, q / norm.clamp_min(eps))
    if return_flag:
        return out, bad.squeeze(-1)
    return out


@_np_compat
def quat_from_axis_angle(axis, angle):
    axis = axis / axis.norm(dim=-1, keepdim=True)
    half = 0.5 * angle.unsqueeze(-1)
    return torch.cat([torch.cos(half), torch.sin(half) * axis], dim=-1)


@_np_compat
def quat_from_euler(angles, order):
    """Intrinsic Euler angles (radians) to quaternions.

    ``order`` lists the axes in application order as they appear in a BVH
    CHANNELS line, e.g. ``"ZXY"`` means ``R = Rz @ Rx @ Ry``. Shorter orders
    (one or two axes) are allowed.
    """
    order = order.upper()
    if angles.shape[-1] != len(order):
        raise ShapeMismatch(f"expected {len(order)} angles for order {order}")
    q = None
    for k, ax in enumerate(order):
        half = 0.5 * angles[..., k]
        comp = [torch.cos(half)] + [torch.zeros_like(half)] * 3
        comp[1 + _AXES[ax]] = torch.sin(half)
        qa = torch.stack(comp, dim=-1)
        q = qa if q is None else quat_mul(q, qa)
    return q


def quat_to_euler(q, order):
    """Quaternions to intrinsic Euler angles (radians) in BVH channel order.

    Numpy only; used when writing BVH files. Orders with fewer than three
    axes are completed with the missing axes and the extra angles dropped.
    """
    from scipy.spatial.transform import Rotation

    order = order.upper()
    full = order + "".join(a for a in "XYZ" if a not in order)
    q = np.asarray(q, dtype=np.float64)
    flat = q.reshape(-1, 4)
    rot = Rotation.from_quat(np.concatenate([flat[:, 1:], flat[:, :1]], axis=1))
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # gimbal lock is fine here
        eul = rot.as_euler(full)
    return eul[:, :len(order)].reshape(q.shape[:-1] + (len(order),))


@_np_compat
def quat_to_matrix(q):
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(q.shape[:-1] + (3, 3))


@_np_compat
def yaw_quat(angle):
    """Rotation by ``angle`` radians about the vertical axis."""
    half = 0.5 * angle
    z = torch.zeros_like(half)
    return torch.stack([torch.cos(half), z, torch.sin(half), z], dim=-1)


@_np_compat
def swing_twist_yaw(q):
    """Split ``q = yaw * rest`` where ``yaw`` rotates about the world vertical.

    Returns ``(yaw_angle, rest)``. The twist is the projection of ``q`` onto
    the vertical axis; when that projection vanishes (a half turn about a
    horizontal axis) the yaw is taken as zero.
    """
    w = q[..., 0]
    y = q[..., 2]
    degenerate = (w * w + y * y) < 1e-12
    angle = 2.0 * torch.atan2(y, w)
    angle = torch.where(degenerate, torch.zeros_like(angle), angle)
    angle = wrap_angle(angle)
    rest = quat_mul(quat_conj(yaw_quat(angle)), q)
    return angle, rest


@_np_compat
def wrap_angle(a):
    return torch.remainder(a + np.pi, 2 * np.pi) - np.pi


@_np_compat
def rotate_about_up(v, angle):
    c = torch.cos(angle)
    s = torch.sin(angle)
    x, y, z = v.unbind(-1)
    return torch.stack([c * x + s * z, y, -s * x + c * z], dim=-1)


@_np_compat
def integrate_root(vbar):
    """Rebuild the root trajectory from localized velocities.

    ``vbar`` is (...,T,1,4) or (...,T,4) holding ``(vx, vy, vz, r)``. Frame
    ``t`` moves by ``v_t`` expressed in the yaw frame of frame ``t-1``; yaw
    accumulates ``r``. Starts at the origin facing +z. Returns
    ``(root_positions (...,T,3), yaw (...,T))``.
    """
    if vbar.shape[-2:] == (1, 4):
        vbar = vbar[..., 0, :]
    if vbar.shape[-1] != 4:
        raise ShapeMismatch(f"velocity channel must have 4 entries, got {tuple(vbar.shape)}")
    r = vbar[..., 3]
    yaw = torch.cumsum(r, dim=-1)
    yaw_prev = yaw - r
    steps = rotate_about_up(vbar[..., :3], yaw_prev)
    return torch.cumsum(steps, dim=-2), yaw


def _parents_of(skel_or_parents):
    if hasattr(skel_or_parents, "parents"):
        return list(skel_or_parents.parents)
    return list(skel_or_parents)


@_np_compat
def fk_world(rotations, root_positions, offsets, parents):
    """Forward kinematics from world root rotation/translation.

    ``rotations`` (...,T,J,4) local quaternions with index 0 holding the world
    root rotation; ``root_positions`` (...,T,3); ``offsets`` (J,3) or
    (...,J,3). Returns joint positions (...,T,J,3); the root lands at
    ``root_positions + offsets[0]``.
    """
    parents = _parents_of(parents)
    J = rotations.shape[-2]
    if len(parents) != J or offsets.shape[-2] != J:
        raise ShapeMismatch(f"rotations have {J} joints, skeleton has {len(parents)}")
    off = offsets.unsqueeze(-3).to(rotations.dtype)  # (...,1,J,3)
    glob_rot = [None] * J
    glob_pos = [None] * J
    for j in range(J):
        p = parents[j]
        o = off[..., j, :]
        if p < 0:
            glob_rot[j] = rotations[..., j, :]
            glob_pos[j] = root_positions + o
        else:
            if p >= j:
                raise ShapeMismatch("parents must precede children")
            glob_rot[j] = quat_mul(glob_rot[p], rotations[..., j, :])
            glob_pos[j] = glob_pos[p] + quat_rotate_vec(glob_rot[p], o.expand_as(glob_pos[p]))
    return torch.stack(glob_pos, dim=-2)


@_np_compat
def localized_to_world(Q, vbar):
    """World root rotations and positions of a localized clip (origin start)."""
    root_pos, yaw = integrate_root(vbar)
    root_rot = quat_mul(yaw_quat(yaw), Q[..., 0, :])
    rot = torch.cat([root_rot.unsqueeze(-2), Q[..., 1:, :]], dim=-2)
    return rot, root_pos


@_np_compat
def fk(Q, vbar, offsets, parents):
    """Joint positions of a localized clip ``[Q, Vbar]``.

    The root trajectory is integrated from ``vbar`` starting at the origin
    with canonical facing.
    """
    parents = _parents_of(parents)
    if Q.shape[-2] != len(parents):
        raise ShapeMismatch(f"Q has {Q.shape[-2]} joints, skeleton has {len(parents)}")
    rot, root_pos = localized_to_world(Q, vbar)
    return fk_world(rot, root_pos, offsets, parents)


def fk_skeleton(Q, vbar, skel):
    """``fk`` with offsets and parents taken from a ``SkeletonDef``."""
    offsets = skel.offsets
    if torch.is_tensor(Q):
        offsets = torch.as_tensor(offsets, dtype=Q.dtype)
    return fk(Q, vbar, offsets, skel.parents)
