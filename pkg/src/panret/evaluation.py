"""Retargeting metrics: height-normalized MPJPE, foot-contact recall, FID, attention export."""
import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import EmptyDataset, NotEnoughClips, PairMismatch
from .motion_io import MotionClip, apply_norm

logger = logging.getLogger(__name__)

EPSILONS = np.logspace(-5, -1, 20)
SPEED_BINS = 10
COV_EPS = 1e-6


def _positions(x):
    if isinstance(x, MotionClip):
        return np.asarray(x.positions())
    return np.asarray(x, dtype=np.float64)


# --------------------------------------------------------------------------- MPJPE

def mpjpe(retargeted, ground_truth, skels=None, heights=None):
    """Mean squared joint position error over all pairs, divided by target height, x1e3.

    Inputs are lists of ``MotionClip`` (positions via FK) or position arrays
    (T, J, 3). Heights come from ``heights`` or the target skeletons.
    """
    retargeted, ground_truth = list(retargeted), list(ground_truth)
    if len(retargeted) != len(ground_truth) or not retargeted:
        raise PairMismatch(f"{len(retargeted)} retargeted clips vs {len(ground_truth)} references")
    if heights is None:
        if skels is None:
            skels = [g.skeleton for g in ground_truth]
        heights = [s.height for s in skels]
    heights = list(np.broadcast_to(np.asarray(heights, dtype=np.float64), (len(retargeted),)))
    total = 0.0
    for r, g, h in zip(retargeted, ground_truth, heights):
        pr, pg = _positions(r), _positions(g)
        if pr.shape != pg.shape:
            raise PairMismatch(f"position shapes differ: {pr.shape} vs {pg.shape}")
        total += np.mean(np.sum((pr - pg) ** 2, axis=-1)) / h
    return 1e3 * total / len(retargeted)


# --------------------------------------------------------------------------- contacts

@dataclass
class ContactSet:
    """Contact frames per foot joint at threshold ``eps`` (squared displacement per frame)."""

    frames: dict
    eps: float

    def total(self):
        return sum(len(v) for v in self.frames.values())


def contact_frames(positions, foot_joints, eps):
    """Frames ``t >= 1`` where ``||P_t - P_{t-1}||^2 < eps`` for each foot joint."""
    p = _positions(positions)
    d2 = np.sum((p[1:] - p[:-1]) ** 2, axis=-1)  # (T-1, J)
    return ContactSet({j: set((np.nonzero(d2[:, j] < eps)[0] + 1).tolist()) for j in foot_joints}, eps)


def contact_recall(gt, tar, epsilons=EPSILONS, gt_feet=None, tar_feet=None):
    """Recall of target contacts at ground-truth contact frames for each threshold.

    Feet are paired in sorted index order. A threshold with no ground-truth
    contacts yields NaN (undefined point) instead of raising.
    """
    gt_feet = sorted(gt_feet if gt_feet is not None else gt.skeleton.foot_joints)
    tar_feet = sorted(tar_feet if tar_feet is not None else tar.skeleton.foot_joints)
    if len(gt_feet) != len(tar_feet) or not gt_feet:
        raise PairMismatch(f"cannot pair feet {gt_feet} with {tar_feet}")
    pg, pt = _positions(gt), _positions(tar)
    if pg.shape[0] != pt.shape[0]:
        raise PairMismatch(f"clip lengths differ: {pg.shape[0]} vs {pt.shape[0]}")
    out = []
    for eps in np.atleast_1d(epsilons):
        cg = contact_frames(pg, gt_feet, eps)
        ct = contact_frames(pt, tar_feet, eps)
        denom = cg.total()
        if denom == 0:
            out.append(float("nan"))
            continue
        hits = sum(len(cg.frames[a] & ct.frames[b]) for a, b in zip(gt_feet, tar_feet))
        out.append(hits / denom)
    return np.array(out)


def recall_curve(pairs, epsilons=EPSILONS):
    """Pooled recall over many (gt, tar) clip pairs: summed hits over summed contacts."""
    hits = np.zeros(len(epsilons))
    denom = np.zeros(len(epsilons))
    for gt, tar in pairs:
        gf, tf = sorted(gt.skeleton.foot_joints), sorted(tar.skeleton.foot_joints)
        pg, pt = _positions(gt), _positions(tar)
        for i, eps in enumerate(epsilons):
            cg = contact_frames(pg, gf, eps)
            ct = contact_frames(pt, tf, eps)
            denom[i] += cg.total()
            hits[i] += sum(len(cg.frames[a] & ct.frames[b]) for a, b in zip(gf, tf))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, hits / np.maximum(denom, 1), np.nan)


# --------------------------------------------------------------------------- FID

class FidAutoencoder(nn.Module):
    """Temporal conv autoencoder; the third encoder layer's output is the feature."""

    def __init__(self, in_channels, width=256, kernel=15):
        super().__init__()
        pad = (kernel - 1) // 2
        self.enc1 = nn.Conv1d(in_channels, width, kernel, stride=2, padding=pad)
        self.enc2 = nn.Conv1d(width, width, kernel, stride=2, padding=pad)
        self.enc3 = nn.Conv1d(width, width, 3, stride=2, padding=1)
        self.dec1 = nn.Conv1d(width, width, 3, padding=1)
        self.dec2 = nn.Conv1d(width, width, kernel, padding=pad)
        self.dec3 = nn.Conv1d(width, in_channels, kernel, padding=pad)

    def encode(self, x):
        """(B, T, J+1, 4) -> L3 (B, width, T/32)."""
        h = x.reshape(x.shape[0], x.shape[1], -1).transpose(1, 2)
        h = F.max_pool1d(F.leaky_relu(self.enc1(h), 0.2), 2, 2)
        h = F.max_pool1d(F.leaky_relu(self.enc2(h), 0.2), 2, 2)
        return torch.tanh(self.enc3(h))

    def forward(self, x):
        h = self.encode(x)
        h = F.leaky_relu(self.dec1(F.interpolate(h, scale_factor=2, mode="linear")), 0.2)
        h = F.leaky_relu(self.dec2(F.interpolate(h, scale_factor=4, mode="linear")), 0.2)
        h = self.dec3(F.interpolate(h, scale_factor=4, mode="linear"))
        return h.transpose(1, 2).reshape(x.shape)

    def features(self, x):
        """Time-averaged L3 activations (B, width)."""
        return self.encode(x).mean(dim=-1)


def train_fid_model(motions, epochs=50, batch_size=32, lr=1e-3, width=256, seed=0,
                    holdout=None):
    """Fit a reconstruction autoencoder on normalized motions (n, T, J+1, 4).

    Returns ``(model, history)`` where history rows are (epoch, train_loss,
    holdout_loss or nan).
    """
    x = torch.as_tensor(np.asarray(motions), dtype=torch.float32)
    if len(x) == 0:
        raise EmptyDataset("no motions to fit the feature model on")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = FidAutoencoder(x.shape[-2] * 4, width)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    xh = None if holdout is None else torch.as_tensor(np.asarray(holdout), dtype=torch.float32)
    history = []
    for ep in range(epochs):
        order = rng.permutation(len(x))
        losses = []
        for i in range(0, len(x), batch_size):
            b = x[order[i:i + batch_size]]
            loss = F.mse_loss(model(b), b)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        hl = float("nan")
        if xh is not None:
            with torch.no_grad():
                hl = float(F.mse_loss(model(xh), xh))
        history.append((ep + 1, float(np.mean(losses)), hl))
    model.eval()
    return model, history


def _sqrtm_psd(c):
    w, v = np.linalg.eigh((c + c.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(feat_a, feat_b):
    """||m_a - m_b||^2 + Tr(c_a + c_b - 2 (c_a c_b)^{1/2}) from feature rows.

    The product root is taken as sqrt(c_a^{1/2} c_b c_a^{1/2}) with
    eigenvalues clipped at 0. Rank-deficient covariances get a small ridge.
    """
    a = np.asarray(feat_a, dtype=np.float64)
    b = np.asarray(feat_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise PairMismatch(f"feature sets must be (n, d) with equal d: {a.shape}, {b.shape}")
    mu_a, mu_b = a.mean(0), b.mean(0)
    c_a = np.atleast_2d(np.cov(a, rowvar=False))
    c_b = np.atleast_2d(np.cov(b, rowvar=False))
    d = a.shape[1]
    if min(len(a), len(b)) <= d or min(np.linalg.eigvalsh(c_a)[0], np.linalg.eigvalsh(c_b)[0]) <= 0:
        warnings.warn("singular feature covariance; adding a 1e-6 ridge", RuntimeWarning, stacklevel=2)
        c_a = c_a + COV_EPS * np.eye(d)
        c_b = c_b + COV_EPS * np.eye(d)
    ra = _sqrtm_psd(c_a)
    cross = _sqrtm_psd(ra @ c_b @ ra)
    value = np.sum((mu_a - mu_b) ** 2) + np.trace(c_a) + np.trace(c_b) - 2 * np.trace(cross)
    return float(max(value, 0.0))


def fid_features(model, motions, batch_size=256):
    x = torch.as_tensor(np.asarray(motions), dtype=torch.float32)
    out = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(model.features(x[i:i + batch_size]).numpy())
    return np.concatenate(out).astype(np.float64)


def fid(set_a, set_b, model):
    """FID between two normalized motion sets under a trained feature model."""
    return frechet_distance(fid_features(model, set_a), fid_features(model, set_b))


# --------------------------------------------------------------------------- sampling

def clip_speeds(motions):
    """Mean root speed per clip from (n, T, J+1, 4) physical motions."""
    m = np.asarray(motions)
    return np.linalg.norm(m[:, :, -1, :3], axis=-1).mean(axis=1)


def sample_by_velocity(motions, n_clips=1200, bins=SPEED_BINS, replace=False, rng=None):
    """Indices of clips drawn evenly across equal-width root-speed strata.

    Strata that cannot supply their share (without replacement) pass the
    remainder to the others.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    speeds = clip_speeds(motions) if np.ndim(motions) > 1 else np.asarray(motions)
    n = len(speeds)
    if n == 0:
        raise EmptyDataset("no clips to sample from")
    if n_clips > n and not replace:
        raise NotEnoughClips(f"requested {n_clips} clips from a set of {n} without replacement")
    lo, hi = speeds.min(), speeds.max()
    if hi > lo:
        labels = np.minimum(((speeds - lo) / (hi - lo) * bins).astype(int), bins - 1)
    else:
        labels = np.zeros(n, dtype=int)
    strata = [np.nonzero(labels == b)[0] for b in range(bins)]
    strata = [s for s in strata if len(s)]
    alloc = np.zeros(len(strata), dtype=int)
    remaining = n_clips
    open_ = list(range(len(strata)))
    while remaining > 0 and open_:
        share, extra = divmod(remaining, len(open_))
        order = rng.permutation(open_)
        grant = {k: share + (1 if i < extra else 0) for i, k in enumerate(order)}
        remaining = 0
        for k in list(open_):
            cap = len(strata[k]) - alloc[k] if not replace else grant[k]
            take = min(grant[k], cap)
            alloc[k] += take
            remaining += grant[k] - take
            if not replace and alloc[k] >= len(strata[k]):
                open_.remove(k)
    picks = [rng.choice(s, size=a, replace=replace) for s, a in zip(strata, alloc) if a]
    return np.sort(np.concatenate(picks)) if not replace else np.concatenate(picks)


# --------------------------------------------------------------------------- attention

@dataclass
class AttentionHeatmap:
    """First-layer attention of the part tokens for one clip.

    ``token_rows`` (T, N, J+1) are token-to-joint weights, ``token_self`` (T, N)
    the weight each token puts on itself, so token_rows.sum(-1) + token_self = 1.
    ``per_joint`` (T, J) is the display value: max over parts, with the root
    cell holding the max of root-rotation and root-velocity weights.
    """

    token_rows: np.ndarray
    token_self: np.ndarray
    part_names: list
    joint_names: list

    @property
    def per_joint(self):
        m = self.token_rows.max(axis=1)
        disp = m[:, :-1].copy()
        disp[:, 0] = np.maximum(disp[:, 0], m[:, -1])
        return disp

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["frame", "part", "token_self"] + list(self.joint_names) + ["root_velocity"])
            for t in range(self.token_rows.shape[0]):
                for k, name in enumerate(self.part_names):
                    w.writerow([t, name, f"{self.token_self[t, k]:.8g}"]
                               + [f"{v:.8g}" for v in self.token_rows[t, k]])


def export_attention(model, structure_id, clip, out_dir=None, frames=None):
    """Token-row attention weights for ``clip`` (physical ``MotionClip`` or array).

    When ``out_dir`` is given, writes ``attention.csv`` and a heatmap image.
    """
    s = model.structures[structure_id]
    motion = clip.motion if isinstance(clip, MotionClip) else np.asarray(clip)
    dtype = model._dtype()
    with torch.no_grad():
        x = torch.as_tensor(apply_norm(motion, s.norm), dtype=dtype)[None]
        w = model.nets[structure_id].motion_encoder.attention(x)[0].double().numpy()
    N = s.partition.N
    heat = AttentionHeatmap(w[:, :N, N:], w[:, np.arange(N), np.arange(N)],
                            list(s.partition.part_names), list(s.template.joint_names))
    if out_dir is not None:
        from .plotting import plot_attention

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        heat.write_csv(out_dir / "attention.csv")
        plot_attention(heat, out_dir / "attention.png", frames=frames)
    return heat


# --------------------------------------------------------------------------- report

@dataclass
class MetricReport:
    pairs: list = field(default_factory=list)  # dicts: source, target, clips, mpjpe
    epsilons: np.ndarray = field(default_factory=lambda: EPSILONS.copy())
    recall: np.ndarray = None
    fid: float = None
    notes: list = field(default_factory=list)

    def overall_mpjpe(self):
        if not self.pairs:
            return None
        n = sum(p["clips"] for p in self.pairs)
        return sum(p["mpjpe"] * p["clips"] for p in self.pairs) / n

    def write(self, out_dir):
        """Write metrics.csv, recall.csv (+ recall.png) and summary.json."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "metrics.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["source", "target", "clips", "mpjpe"])
            for p in self.pairs:
                w.writerow([p["source"], p["target"], p["clips"], f"{p['mpjpe']:.8g}"])
        written = ["metrics.csv"]
        if self.recall is not None:
            with open(out_dir / "recall.csv", "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["epsilon", "recall"])
                for e, r in zip(self.epsilons, self.recall):
                    w.writerow([f"{e:.8g}", "" if math.isnan(r) else f"{r:.8g}"])
            from .plotting import plot_recall_curve

            plot_recall_curve(self.epsilons, {"retargeted": self.recall}, out_dir / "recall.png")
            written += ["recall.csv", "recall.png"]
        summary = {"mpjpe": self.overall_mpjpe(), "fid": self.fid, "notes": self.notes,
                   "files": written}
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
        return written
