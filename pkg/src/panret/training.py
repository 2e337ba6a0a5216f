"""Unsupervised cyclic-adversarial training, losses, retargeting and checkpoints."""
import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import kinematics as kin
from .archive import load_archive, save_archive
from .body_parts import BodyPartition
from .errors import (
    CheckpointError, DegenerateStats, NonFiniteLoss, PartitionMismatch, ShapeMismatch,
)
from .motion_io import MotionClip, NormStats, SkeletonDef, apply_norm, hemisphere_align, invert_norm
from .networks import Discriminator, ModelConfig, StructureNet

logger = logging.getLogger(__name__)

MODES = ("humanoid", "biped_quad")
ADV_CONVENTIONS = ("lsgan", "maximize")
ZERO_SPEED = 1e-6


@dataclass
class LossWeights:
    rec: float = 1.0
    cyc: float = 2.5
    kine: float = 1e2
    adv: float = 1.0
    vel: float = 1e3

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 1000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    clip_len: int = 64
    fps: int = 30
    gd_ratio: int = 1
    seed: int = 0
    mode: str = "humanoid"
    adv_convention: str = "lsgan"
    weights: LossWeights = field(default_factory=LossWeights)
    steps_per_epoch: int = 0  # 0 -> ceil(largest dataset / batch_size)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.adv_convention not in ADV_CONVENTIONS:
            raise ValueError(f"adv_convention must be one of {ADV_CONVENTIONS}")

    def to_dict(self):
        return asdict(self)


@dataclass
class VelocityStats:
    v_min: float
    v_max: float

    def __post_init__(self):
        if not self.v_max > self.v_min:
            raise DegenerateStats(f"velocity range is empty ({self.v_min}..{self.v_max})")

    @classmethod
    def from_motions(cls, motions):
        """Root speed range over physical motions (..., T, J+1, 4)."""
        v = np.asarray(motions)[..., -1, :3]
        speed = np.linalg.norm(v, axis=-1)
        return cls(float(speed.min()), float(speed.max()))


@dataclass
class Structure:
    """Everything about one skeletal structure the networks need besides weights."""

    id: str
    template: SkeletonDef
    partition: BodyPartition
    norm: NormStats
    vel: VelocityStats = None
    offset_scale: float = 1.0

    @property
    def num_joints(self):
        return self.template.num_joints

    def joint_weight(self, mode):
        """(J+1,) float mask of rows constrained by the reconstruction terms."""
        if mode == "biped_quad":
            return self.partition.covered().astype(np.float64)
        return np.ones(self.num_joints + 1)

    def to_meta(self):
        return {"id": self.id, "template": self.template.to_dict(),
                "partition": self.partition.to_dict(), "partition_digest": self.partition.digest(),
                "vel": None if self.vel is None else asdict(self.vel),
                "offset_scale": self.offset_scale}

    @classmethod
    def from_meta(cls, meta, mean, std):
        vel = meta.get("vel")
        part = BodyPartition.from_dict(meta["partition"])
        if part.digest() != meta.get("partition_digest", part.digest()):
            raise CheckpointError(f"partition digest mismatch for structure {meta['id']!r}")
        return cls(meta["id"], SkeletonDef.from_dict(meta["template"]), part,
                   NormStats(mean, std), None if vel is None else VelocityStats(**vel),
                   float(meta["offset_scale"]))


@dataclass
class LossReport:
    rec: float
    cyc: float
    kine: float
    adv: float
    vel: float
    total: float
    disc: float
    step: int = 0

    def as_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------- losses

def _check_same(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _masked_mse(a, b, joint_weight=None):
    _check_same(a, b)
    sq = (a - b) ** 2
    if joint_weight is None:
        return sq.mean()
    w = torch.as_tensor(joint_weight, dtype=sq.dtype)
    if w.shape != sq.shape[-2:-1]:
        raise ShapeMismatch(f"joint weights {tuple(w.shape)} do not match rows of {tuple(sq.shape)}")
    w = w[:, None].expand(sq.shape)
    return (sq * w).sum() / w.sum()


def rec_loss(m, m_hat, joint_weight=None):
    """Mean squared error in normalized space (optionally restricted to weighted rows)."""
    return _masked_mse(m, m_hat, joint_weight)


def cyc_loss(h_a, h_b, m_a, m_bar, joint_weight=None):
    """Latent-code MSE plus cyclic motion MSE."""
    _check_same(h_a, h_b)
    return ((h_a - h_b) ** 2).mean() + _masked_mse(m_a, m_bar, joint_weight)


def adv_losses(disc, real, fake, convention="lsgan"):
    """Returns ``(loss_D, loss_G)``. ``fake`` is detached for ``loss_D``.

    ``lsgan``: D pushes real -> 1 and fake -> 0, G pushes fake -> 1.
    ``maximize``: D maximizes mean(C(real)^2) + mean((1 - C(fake))^2)
    (so its minimized loss is the negation); G minimizes mean((1 - C(fake))^2).
    """
    d_real = disc(real)
    d_fake_detached = disc(fake.detach())
    if convention == "lsgan":
        loss_d = ((d_real - 1) ** 2).mean() + (d_fake_detached ** 2).mean()
    elif convention == "maximize":
        loss_d = -((d_real ** 2).mean() + ((1 - d_fake_detached) ** 2).mean())
    else:
        raise ValueError(f"unknown adversarial convention {convention!r}")
    loss_g = ((disc(fake) - 1) ** 2).mean()
    return loss_d, loss_g


def kine_loss(m_a, m_bar, m_hat, offsets, parents, joint_weight=None, scale=None):
    """Position-space MSE of cycle and reconstruction paths.

    Motions are physical (denormalized) (..., T, J+1, 4); quaternions are
    renormalized before FK. ``joint_weight`` (J,) restricts the joints;
    ``scale`` (e.g. skeleton height, broadcastable to (...,)) divides positions.
    """
    _check_same(m_a, m_bar)
    _check_same(m_a, m_hat)

    def positions(m):
        q = kin.quat_normalize(m[..., :-1, :])
        p = kin.fk(q, m[..., -1:, :], offsets, parents)
        if scale is not None:
            s = torch.as_tensor(scale, dtype=p.dtype)
            p = p / s.reshape(s.shape + (1, 1, 1))
        return p

    p_a = positions(m_a)
    return (_masked_mse(p_a, positions(m_bar), joint_weight)
            + _masked_mse(p_a, positions(m_hat), joint_weight))


def _unit_scaled(v, stats):
    n = v.norm(dim=-1, keepdim=True)
    moving = n > ZERO_SPEED
    direction = torch.where(moving, v / n.clamp_min(ZERO_SPEED), torch.zeros_like(v))
    return direction * (n - stats.v_min) / (stats.v_max - stats.v_min)


def vel_loss(v_s, v_t, stats_s, stats_t):
    """Direction-preserving, range-normalized root velocity mismatch.

    ``v_s``/``v_t`` are (..., T, 3) physical root velocities (or full
    (..., T, 1, 4) Vbar tensors). Squared norm per frame, averaged.
    """
    for s in (stats_s, stats_t):
        if not s.v_max > s.v_min:
            raise DegenerateStats("velocity stats need v_max > v_min")
    if v_s.shape[-1] == 4:
        v_s = v_s[..., 0, :3] if v_s.dim() >= 3 and v_s.shape[-2] == 1 else v_s[..., :3]
    if v_t.shape[-1] == 4:
        v_t = v_t[..., 0, :3] if v_t.dim() >= 3 and v_t.shape[-2] == 1 else v_t[..., :3]
    _check_same(v_s, v_t)
    diff = _unit_scaled(v_s, stats_s) - _unit_scaled(v_t, stats_t)
    return (diff ** 2).sum(dim=-1).mean()


# --------------------------------------------------------------------------- model

class RetargetModel(nn.Module):
    """Generators and discriminators for a set of structures."""

    def __init__(self, structures, cfg=None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.structures = {s.id: s for s in structures}
        self.ids = [s.id for s in structures]
        Ns = {s.partition.N for s in structures}
        if len(Ns) != 1:
            raise PartitionMismatch(f"structures disagree on the number of body parts: {sorted(Ns)}")
        self.nets = nn.ModuleDict({s.id: StructureNet(s.partition, self.cfg) for s in structures})
        self.discs = nn.ModuleDict({s.id: Discriminator(s.num_joints, self.cfg) for s in structures})

    def generator_parameters(self):
        return list(self.nets.parameters())

    def discriminator_parameters(self):
        return list(self.discs.parameters())

    def skeleton_code(self, sid, offsets):
        s = self.structures[sid]
        if not torch.is_tensor(offsets):
            offsets = torch.from_numpy(np.array(offsets, dtype=np.float64))
        off = offsets.to(self._dtype()) / s.offset_scale
        return self.nets[sid].skeleton_encoder(off)

    def _dtype(self):
        return next(self.parameters()).dtype

    def encode(self, sid, m_norm):
        return self.nets[sid].motion_encoder(m_norm)

    def decode(self, sid, h_m, offsets):
        return self.nets[sid].decoder(h_m, self.skeleton_code(sid, offsets))


def retarget(clip, model, source_id, target_id, target_skel):
    """Encode ``clip`` with the source encoder, decode for ``target_skel``.

    Returns a physical ``MotionClip`` on the target skeleton with unit
    quaternions; the clip anchor is carried over.
    """
    src, tgt = model.structures[source_id], model.structures[target_id]
    if src.partition.N != tgt.partition.N:
        raise PartitionMismatch(f"{source_id} has {src.partition.N} parts, {target_id} has {tgt.partition.N}")
    dtype = model._dtype()
    with torch.no_grad():
        m = torch.as_tensor(apply_norm(clip.motion, src.norm), dtype=dtype)[None]
        h = model.encode(source_id, m)
        out = model.decode(target_id, h, target_skel.offsets[None])[0]
        phys = invert_norm(out.double(), tgt.norm).numpy()
    q = hemisphere_align(kin.quat_normalize(phys[:, :-1]))
    return MotionClip(q, phys[:, -1:], target_skel, clip.start_position, clip.start_yaw,
                      clip.source, clip.index)


# --------------------------------------------------------------------------- trainer

class StructureData:
    """Tensors for one structure's training clips."""

    def __init__(self, structure, clipset, dtype=torch.float32):
        self.structure = structure
        phys = torch.as_tensor(clipset.motions, dtype=torch.float64)
        self.normalized = apply_norm(phys, structure.norm).to(dtype)
        self.offsets = torch.as_tensor(clipset.offsets, dtype=dtype)
        self.heights = torch.as_tensor(clipset.heights, dtype=dtype)

    def __len__(self):
        return len(self.normalized)

    def batch(self, idx):
        idx = torch.as_tensor(idx, dtype=torch.long)
        return self.normalized[idx], self.offsets[idx], self.heights[idx]


class Trainer:
    """Owns the model, optimizers, batch RNG and step counters."""

    def __init__(self, model, data, config):
        self.model = model
        self.data = data
        self.config = config
        self.dtype = model._dtype()
        self.opt_g = torch.optim.Adam(model.generator_parameters(), lr=config.lr,
                                      betas=(config.beta1, config.beta2))
        self.opt_d = torch.optim.Adam(model.discriminator_parameters(), lr=config.lr,
                                      betas=(config.beta1, config.beta2))
        self.rng = np.random.default_rng(config.seed)
        self.g_steps = 0
        self.d_steps = 0
        self.epoch = 0
        self.history = []

    # -- routes

    def directions(self):
        ids = self.model.ids
        if len(ids) == 1:
            return [(ids[0], ids[0])]
        if len(ids) != 2:
            raise ValueError("training supports one or two structures")
        return [(ids[0], ids[1]), (ids[1], ids[0])]

    def _denorm(self, sid, m):
        return invert_norm(m.to(torch.float64), self.model.structures[sid].norm).to(m.dtype)

    def forward_losses(self, batches):
        """Generator-side losses for all directions.

        ``batches`` maps structure id -> (normalized motion, offsets, heights).
        Returns ``(terms, fakes)`` where ``terms`` holds summed loss tensors.
        """
        cfg = self.config
        model = self.model
        zero = torch.zeros((), dtype=self.dtype)
        terms = {k: zero for k in ("rec", "cyc", "kine", "adv", "vel")}
        fakes = {}
        for s, t in self.directions():
            m_s, off_s, h_s = batches[s]
            m_t, off_t, _ = batches[t]
            if s == t:
                off_t = off_t.roll(1, dims=0)
            st_s, st_t = model.structures[s], model.structures[t]
            w_s = st_s.joint_weight(cfg.mode)

            code = model.encode(s, m_s)
            m_hat = model.decode(s, code, off_s)
            m_st = model.decode(t, code, off_t)
            code_back = model.encode(t, m_st)
            m_bar = model.decode(s, code_back, off_s)

            terms["rec"] = terms["rec"] + rec_loss(m_s, m_hat, w_s)
            terms["cyc"] = terms["cyc"] + cyc_loss(code, code_back, m_s, m_bar, w_s)
            phys = [self._denorm(s, x) for x in (m_s, m_bar, m_hat)]
            terms["kine"] = terms["kine"] + kine_loss(
                *phys, off_s, st_s.template.parents, torch.as_tensor(w_s[:-1], dtype=self.dtype), h_s)
            terms["adv"] = terms["adv"] + ((model.discs[t](m_st) - 1) ** 2).mean()
            if cfg.mode == "biped_quad":
                v_src = phys[0][..., -1, :3]
                v_tgt = self._denorm(t, m_st)[..., -1, :3]
                terms["vel"] = terms["vel"] + vel_loss(v_src, v_tgt, st_s.vel, st_t.vel)
            fakes[(s, t)] = m_st
        w = cfg.weights
        total = (w.rec * terms["rec"] + w.cyc * terms["cyc"] + w.kine * terms["kine"]
                 + w.adv * terms["adv"])
        if cfg.mode == "biped_quad":
            total = total + w.vel * terms["vel"]
        terms["total"] = total
        return terms, fakes

    def discriminator_loss(self, batches, fakes):
        loss = torch.zeros((), dtype=self.dtype)
        for (s, t), fake in fakes.items():
            loss_d, _ = adv_losses(self.model.discs[t], batches[t][0], fake,
                                   self.config.adv_convention)
            loss = loss + loss_d
        return loss

    def sample_batches(self):
        out = {}
        for sid, d in self.data.items():
            n = len(d)
            bs = self.config.batch_size
            idx = self.rng.choice(n, size=bs, replace=n < bs) if n != bs else self.rng.permutation(n)
            out[sid] = d.batch(idx)
        return out

    def train_step(self, batches=None):
        batches = batches or self.sample_batches()
        terms, fakes = self.forward_losses(batches)
        vals = {k: float(v.detach()) for k, v in terms.items()}
        if not all(math.isfinite(v) for v in vals.values()):
            raise NonFiniteLoss(f"non-finite loss at step {self.g_steps}: {json.dumps(vals)}")
        self.opt_g.zero_grad(set_to_none=True)
        terms["total"].backward()
        self.opt_g.step()
        self.g_steps += 1

        fakes = {k: v.detach() for k, v in fakes.items()}
        for _ in range(self.config.gd_ratio):
            self.opt_d.zero_grad(set_to_none=True)
            loss_d = self.discriminator_loss(batches, fakes)
            if not math.isfinite(float(loss_d.detach())):
                raise NonFiniteLoss(f"non-finite discriminator loss at step {self.g_steps}")
            loss_d.backward()
            self.opt_d.step()
            self.d_steps += 1
        self.opt_g.zero_grad(set_to_none=True)
        report = LossReport(vals["rec"], vals["cyc"], vals["kine"], vals["adv"], vals["vel"],
                            vals["total"], float(loss_d.detach()), self.g_steps)
        self.history.append(report)
        return report

    def steps_per_epoch(self):
        if self.config.steps_per_epoch:
            return self.config.steps_per_epoch
        n = max(len(d) for d in self.data.values())
        return max(1, math.ceil(n / self.config.batch_size))

    def run_epoch(self):
        reports = [self.train_step() for _ in range(self.steps_per_epoch())]
        self.epoch += 1
        mean = {k: float(np.mean([getattr(r, k) for r in reports]))
                for k in ("rec", "cyc", "kine", "adv", "vel", "total", "disc")}
        mean["epoch"] = self.epoch
        return mean, reports

    # -- persistence

    def state_arrays(self):
        arrays = {f"model/{k}": v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}
        for tag, opt in (("G", self.opt_g), ("D", self.opt_d)):
            sd = opt.state_dict()
            for pid, st in sd["state"].items():
                for k, v in st.items():
                    arrays[f"optim/{tag}/{pid}/{k}"] = (v.detach().cpu().numpy() if torch.is_tensor(v)
                                                        else np.asarray(v))
        return arrays

    def save(self, path, extra_meta=None):
        meta = checkpoint_meta(self.model)
        meta.update({
            "train_config": self.config.to_dict(),
            "epoch": self.epoch, "g_steps": self.g_steps, "d_steps": self.d_steps,
            "rng_state": self.rng.bit_generator.state,
        })
        meta.update(extra_meta or {})
        arrays = self.state_arrays()
        arrays.update(_norm_arrays(self.model))
        save_archive(path, arrays, _jsonable(meta), kind="checkpoint")

    def restore(self, path):
        arrays, meta = load_archive(path, kind="checkpoint")
        _load_model_arrays(self.model, arrays)
        for tag, opt in (("G", self.opt_g), ("D", self.opt_d)):
            sd = opt.state_dict()
            state = {}
            for name, a in arrays.items():
                if name.startswith(f"optim/{tag}/"):
                    _, _, pid, key = name.split("/", 3)
                    t = torch.from_numpy(a.copy())
                    state.setdefault(int(pid), {})[key] = t
            sd["state"] = state
            opt.load_state_dict(sd)
        self.epoch = int(meta["epoch"])
        self.g_steps = int(meta["g_steps"])
        self.d_steps = int(meta["d_steps"])
        self.rng.bit_generator.state = meta["rng_state"]
        return meta


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _norm_arrays(model):
    out = {}
    for sid, s in model.structures.items():
        out[f"norm/{sid}/mean"] = s.norm.mean
        out[f"norm/{sid}/std"] = s.norm.std
    return out


def checkpoint_meta(model):
    return {
        "model_config": model.cfg.to_dict(),
        "structures": [model.structures[sid].to_meta() for sid in model.ids],
        "dtype": str(model._dtype()).replace("torch.", ""),
    }


def _load_model_arrays(model, arrays):
    sd = model.state_dict()
    new = {}
    for k, v in sd.items():
        key = f"model/{k}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {k}")
        a = arrays[key]
        if tuple(a.shape) != tuple(v.shape):
            raise CheckpointError(f"parameter {k}: shape {a.shape} != {tuple(v.shape)}")
        new[k] = torch.from_numpy(a.copy())
    model.load_state_dict(new)


def save_model(path, model, extra_meta=None):
    meta = checkpoint_meta(model)
    meta.update(extra_meta or {})
    arrays = {f"model/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays.update(_norm_arrays(model))
    save_archive(path, arrays, _jsonable(meta), kind="checkpoint")


def load_model(path):
    """Rebuild a ``RetargetModel`` from a checkpoint. Returns ``(model, meta)``."""
    arrays, meta = load_archive(path, kind="checkpoint")
    structures = [Structure.from_meta(m, arrays[f"norm/{m['id']}/mean"], arrays[f"norm/{m['id']}/std"])
                  for m in meta["structures"]]
    model = RetargetModel(structures, ModelConfig(**meta["model_config"]))
    if meta.get("dtype") == "float64":
        model.double()
    _load_model_arrays(model, arrays)
    model.eval()
    return model, meta


def build_structure(sid, clipset, partition, norm):
    """Structure metadata from a training clip set."""
    vel = None
    try:
        vel = VelocityStats.from_motions(clipset.motions)
    except DegenerateStats:
        logger.warning("structure %s: degenerate velocity range, velocity loss unavailable", sid)
    return Structure(sid, clipset.template, partition, norm, vel,
                     float(np.mean(clipset.heights)))


def write_loss_csv(path, rows, columns=("epoch", "rec", "cyc", "kine", "adv", "vel", "total", "disc")):
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
        if new:
            w.writeheader()
        for r in rows:
            w.writerow(r)


def param_digest(params):
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()
