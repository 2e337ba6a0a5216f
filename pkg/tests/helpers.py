"""Shared fixtures builders and independent reference implementations for tests."""
import numpy as np
import torch

from panret import body_parts as bp
from panret import motion_io as mio
from panret import networks as nw
from panret import synthetic as sy
from panret import training as tr

ACCEPTANCE = []  # (number, name, passed, detail) rows printed at the end of the run


def record(n, name, ok, detail):
    """Log one acceptance criterion outcome, print it, and fail the test when it did not hold."""
    ACCEPTANCE.append((n, name, bool(ok), detail))
    print(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {name}: {detail}")
    assert ok, f"criterion {n} ({name}) failed: {detail}"


def random_unit_quats(rng, shape):
    q = rng.normal(size=tuple(shape) + (4,))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def random_tree(rng, max_joints=8):
    J = int(rng.integers(1, max_joints + 1))
    parents = [-1] + [int(rng.integers(0, j)) for j in range(1, J)]
    return parents


# ---- oracle: rotation matrices + recursion, no quaternion composition

def quat_to_matrix_ref(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def yaw_matrix_ref(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def fk_recursive(rotations, root_positions, offsets, parents, root_yaw=None):
    """Per-frame, per-joint recursive FK: global(j) = global(parent) * local(j).

    ``root_yaw`` (T,) optionally turns the root about +y before its own rotation.
    """
    T, J = rotations.shape[:2]
    out = np.zeros((T, J, 3))
    for t in range(T):
        cache = {}

        def glob(j):
            if j in cache:
                return cache[j]
            R = quat_to_matrix_ref(rotations[t, j])
            p = parents[j]
            if p < 0:
                if root_yaw is not None:
                    R = yaw_matrix_ref(root_yaw[t]) @ R
                res = (R, root_positions[t] + offsets[j])
            else:
                Rp, Pp = glob(p)
                res = (Rp @ R, Pp + Rp @ offsets[j])
            cache[j] = res
            return res

        for j in range(J):
            out[t, j] = glob(j)[1]
    return out


def integrate_ref(vbar):
    """Loop version of the root trajectory: step in the previous frame's yaw frame."""
    T = vbar.shape[0]
    pos = np.zeros((T, 3))
    yaw = np.zeros(T)
    p = np.zeros(3)
    a = 0.0
    for t in range(T):
        vx, vy, vz, r = vbar[t]
        c, s = np.cos(a), np.sin(a)
        p = p + np.array([c * vx + s * vz, vy, -s * vx + c * vz])
        a = a + r
        pos[t] = p
        yaw[t] = a
    return pos, yaw


def chain_skeleton(J=4, name="chain", scale=1.0):
    parents = list(range(-1, J - 1))
    offsets = np.zeros((J, 3))
    offsets[1:, 1] = scale * 0.5
    offsets[1:, 2] = scale * 0.1
    names = [f"j{i}" for i in range(J)]
    return mio.SkeletonDef(name, parents, offsets, names, [J - 1], end_sites={J - 1: [0, 0.1, 0]})


def two_part_partition(J):
    """Part 0: joints 0..1; part 1: joints 0, 2..J-2; joint J-1 left uncovered when J > 3."""
    upper = list(range(2, max(3, J - 1)))
    return bp.BodyPartition(["a", "b"], [[0, 1, J], [0] + upper + [J]], J)


def walking_clipsets(n_per_structure=2, frames=64, seed=0, structures=("humanoid_a", "humanoid_b")):
    rng = np.random.default_rng(seed)
    sets = {}
    for sid, st in zip(("A", "B"), structures):
        clips = []
        for k in range(n_per_structure):
            sk = sy.make_skeleton(st, f"{st}{k}", scale=1 + 0.15 * k, rng=rng)
            raw = sy.walk_motion(sk, frames, 30, phase=k, speed=1.0 + 0.3 * k)
            clips += mio.localize_and_clip(raw, frames, 30)
        sets[sid] = mio.ClipSet.from_clips(sid, clips)
    return sets


def build_trainer(sets, preset="humanoid6", cfg=None, train_cfg=None, dtype=torch.float32,
                  partitions=None, seed=0):
    torch.manual_seed(seed)
    structs = []
    for sid, cs in sets.items():
        part = (partitions or {}).get(sid) or bp.preset_partition(preset, cs.template)
        structs.append(tr.build_structure(sid, cs, part, mio.compute_norm_stats(cs.motions)))
    model = tr.RetargetModel(structs, cfg or nw.ModelConfig.tiny())
    if dtype == torch.float64:
        model.double()
    data = {s.id: tr.StructureData(s, sets[s.id], dtype=dtype) for s in structs}
    return tr.Trainer(model, data, train_cfg or tr.TrainConfig(batch_size=2, seed=seed))


def random_clipset(sid, skel, n, T, rng, speed=(0.02, 0.08)):
    """Random-pose clips with forward-moving root, for small gradient/shape tests."""
    J = skel.num_joints
    motions = np.zeros((n, T, J + 1, 4))
    motions[:, :, :J] = random_unit_quats(rng, (n, T, J))
    motions[:, :, J, 2] = rng.uniform(*speed, size=(n, T))
    motions[:, :, J, 0] = rng.uniform(-0.02, 0.02, size=(n, T))
    motions[:, :, J, 3] = rng.uniform(-0.05, 0.05, size=(n, T))
    offsets = np.repeat(skel.offsets[None], n, axis=0) * rng.uniform(0.8, 1.2, size=(n, 1, 1))
    heights = np.array([skel.with_offsets(o).height for o in offsets])
    return mio.ClipSet(sid, skel, motions, offsets, heights, [f"{skel.name}{i}" for i in range(n)],
                       [f"m{i}#0" for i in range(n)])


def pan_oracle(pan, tokens, x):
    """Literal per-frame, per-row masked attention with explicit exp/sum (float64 numpy)."""
    U = pan.mask.detach().double().numpy()
    tok = tokens.detach().double().numpy()
    x = x.detach().double().numpy()
    N, d = tok.shape
    lead = x.shape[:-2]
    flat = x.reshape((-1,) + x.shape[-2:])
    out = np.zeros((flat.shape[0], N, d))
    for f in range(flat.shape[0]):
        z = np.concatenate([tok, flat[f]], axis=0)
        for layer in pan.layers:
            Wq, bq = layer.q.weight.detach().double().numpy(), layer.q.bias.detach().double().numpy()
            Wk, bk = layer.k.weight.detach().double().numpy(), layer.k.bias.detach().double().numpy()
            Wv, bv = layer.v.weight.detach().double().numpy(), layer.v.bias.detach().double().numpy()
            S = z.shape[0]
            new = np.zeros_like(z)
            for i in range(S):
                qi = Wq @ z[i] + bq
                logits = np.array([(qi @ (Wk @ z[j] + bk) + U[i, j]) / np.sqrt(d) for j in range(S)])
                e = np.exp(logits - logits.max())
                wts = e / e.sum()
                for j in range(S):
                    new[i] += wts[j] * (Wv @ z[j] + bv)
            z = new
        out[f] = z[:N]
    return out.reshape(lead + (N, d))
