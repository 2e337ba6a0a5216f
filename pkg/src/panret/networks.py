"""Learnable components: joint embedding, pose-aware attention, encoders, decoder, discriminator."""
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .body_parts import build_mask, pe_table
from .errors import BadLength, ShapeMismatch


@dataclass
class ModelConfig:
    d: int = 64
    embed_hidden: int = 256
    conv_hidden: int = 32
    kernel: int = 15
    skel_hidden: int = 64
    dec_hidden: int = 0  # 0 -> conv_hidden * N
    disc_channels: tuple = (256, 128)
    attn_layers: int = 2
    pan_stage2: bool = True
    stage2_mask: str = "full"  # "full" lets parts mix in stage 2, "part" keeps them isolated
    token_self_only: bool = True
    pe_basis: float = 10000.0

    def __post_init__(self):
        self.disc_channels = tuple(self.disc_channels)
        if self.kernel % 2 == 0:
            raise ValueError("kernel width must be odd")
        if self.stage2_mask not in ("part", "full"):
            raise ValueError(f"stage2_mask must be 'part' or 'full', got {self.stage2_mask!r}")

    def to_dict(self):
        d = asdict(self)
        d["disc_channels"] = list(self.disc_channels)
        return d

    @classmethod
    def tiny(cls, **kw):
        base = dict(d=8, embed_hidden=16, conv_hidden=8, skel_hidden=8, dec_hidden=16,
                    disc_channels=(16, 8))
        base.update(kw)
        return cls(**base)


def _init_linear(layer):
    bound = math.sqrt(6.0 / layer.weight.shape[1])
    nn.init.uniform_(layer.weight, -bound, bound)
    nn.init.zeros_(layer.bias)


def _init_conv(conv):
    fan_in = conv.weight.shape[1] * conv.weight.shape[2]
    bound = math.sqrt(6.0 / fan_in)
    nn.init.uniform_(conv.weight, -bound, bound)
    nn.init.zeros_(conv.bias)


class MLP3(nn.Module):
    """Relu(Relu(x W0 + b0) W1 + b1) W2 + b2."""

    def __init__(self, n_in, hidden, n_out):
        super().__init__()
        self.l0 = nn.Linear(n_in, hidden)
        self.l1 = nn.Linear(hidden, hidden)
        self.l2 = nn.Linear(hidden, n_out)
        for layer in (self.l0, self.l1, self.l2):
            _init_linear(layer)

    def forward(self, x):
        return self.l2(F.relu(self.l1(F.relu(self.l0(x)))))


class JointEmbedding(nn.Module):
    """Per-joint MLP embedding shifted by the joint's positional encoding."""

    def __init__(self, num_rows, d, hidden=256, basis=10000.0):
        super().__init__()
        self.phi = MLP3(4, hidden, d)
        self.register_buffer("pe", torch.tensor(pe_table(num_rows, d, basis), dtype=torch.float64))

    def forward(self, m):
        if m.shape[-2:] != (self.pe.shape[0], 4):
            raise ShapeMismatch(f"expected (..., {self.pe.shape[0]}, 4), got {tuple(m.shape)}")
        return self.phi(m) + self.pe.to(m.dtype)


class MaskedAttention(nn.Module):
    """Single-head attention softmax((QK' + U)/sqrt(d)) V; no residual, no norm."""

    def __init__(self, d):
        super().__init__()
        self.d = d
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        for layer in (self.q, self.k, self.v):
            _init_linear(layer)

    def forward(self, z, mask, return_weights=False):
        q, k, v = self.q(z), self.k(z), self.v(z)
        logits = (q @ k.transpose(-1, -2) + mask) / math.sqrt(self.d)
        w = torch.softmax(logits, dim=-1)
        out = w @ v
        return (out, w) if return_weights else out


class PAN(nn.Module):
    """Pose-aware attention: learnable part tokens prepended to the inputs,
    stacked masked attention, token rows returned."""

    def __init__(self, d, mask, layers=2):
        super().__init__()
        self.register_buffer("mask", torch.as_tensor(mask, dtype=torch.float32))
        self.layers = nn.ModuleList(MaskedAttention(d) for _ in range(layers))

    def forward(self, tokens, x, return_weights=False):
        """``tokens`` (N,d); ``x`` (..., S, d) -> (..., N, d) [, first-layer weights]."""
        N = tokens.shape[0]
        y = tokens.to(x.dtype).expand(x.shape[:-2] + tokens.shape)
        z = torch.cat([y, x], dim=-2)
        mask = self.mask.to(x.dtype)
        first = None
        for i, layer in enumerate(self.layers):
            if i == 0 and return_weights:
                z, first = layer(z, mask, return_weights=True)
            else:
                z = layer(z, mask)
        out = z[..., :N, :]
        return (out, first) if return_weights else out


class PartConv(nn.Module):
    """Per-part temporal convolution (groups = parts, so parts never mix)."""

    def __init__(self, n_parts, c_in, c_out, kernel, stride=2):
        super().__init__()
        self.n_parts = n_parts
        self.conv = nn.Conv1d(n_parts * c_in, n_parts * c_out, kernel, stride=stride,
                              padding=(kernel - 1) // 2, groups=n_parts)
        _init_conv(self.conv)  # weight is (out, c_in, k): fan-in is already per part

    def forward(self, h):
        """(B, T, N, C) -> (B, T', N, C')."""
        B, T, N, C = h.shape
        x = h.reshape(B, T, N * C).transpose(1, 2)
        y = F.relu(self.conv(x))
        return y.transpose(1, 2).reshape(B, y.shape[-1], N, -1)


class MotionEncoder(nn.Module):
    """PAN -> per-part strided conv -> (stage-2 mixing) -> per-part strided conv."""

    def __init__(self, partition, cfg):
        super().__init__()
        self.cfg = cfg
        self.N = partition.N
        self.num_rows = partition.num_joints + 1
        d, c = cfg.d, cfg.conv_hidden
        self.embed = JointEmbedding(self.num_rows, d, cfg.embed_hidden, cfg.pe_basis)
        self.tokens = nn.Parameter(torch.randn(self.N, d) * 0.02)
        mask = build_mask(partition, token_self_only=cfg.token_self_only)
        self.pan = PAN(d, mask, cfg.attn_layers)
        self.conv1 = PartConv(self.N, d, c, cfg.kernel)
        self.mid = nn.ModuleList(nn.Linear(c, c) for _ in range(self.N))
        for layer in self.mid:
            _init_linear(layer)
        if cfg.pan_stage2:
            self.tokens2 = nn.Parameter(torch.randn(self.N, c) * 0.02)
            if cfg.stage2_mask == "full":
                mask2 = np.zeros((2 * self.N, 2 * self.N), dtype=np.float32)
            else:
                allow = np.tile(np.eye(self.N, dtype=bool), (2, 2))
                mask2 = np.where(allow, 0.0, -1e9).astype(np.float32)
            self.pan2 = PAN(c, mask2, 1)
        self.conv2 = PartConv(self.N, c, d, cfg.kernel)

    def forward(self, m, return_attention=False):
        """``m`` (B, T, J+1, 4) normalized -> H_M (B, T/4, N, d)."""
        if m.dim() == 3:
            m = m.unsqueeze(0)
        B, T = m.shape[:2]
        if T % 4:
            raise BadLength(f"clip length {T} is not divisible by 4")
        x = self.embed(m)
        o, w = self.pan(self.tokens, x, return_weights=True)
        h = self.conv1(o)
        h = torch.stack([F.relu(layer(h[:, :, k])) for k, layer in enumerate(self.mid)], dim=2)
        if self.cfg.pan_stage2:
            h = self.pan2(self.tokens2, h)
        h = self.conv2(h)
        if return_attention:
            return h, w
        return h

    def attention(self, m):
        """First-layer softmax weights (B, T, S, S)."""
        return self.forward(m, return_attention=True)[1]


class SkeletonEncoder(nn.Module):
    """Per-part MLP over the concatenated offsets of the part's joints."""

    def __init__(self, partition, cfg):
        super().__init__()
        self.part_joints = [partition.joints(k) for k in range(partition.N)]
        self.num_joints = partition.num_joints
        self.mlps = nn.ModuleList(MLP3(3 * len(j), cfg.skel_hidden, cfg.d) for j in self.part_joints)

    def forward(self, offsets):
        """``offsets`` (B, J, 3) or (J, 3) -> H_S (B, 1, N, d)."""
        if offsets.dim() == 2:
            offsets = offsets.unsqueeze(0)
        if offsets.shape[-2:] != (self.num_joints, 3):
            raise ShapeMismatch(f"expected offsets (.., {self.num_joints}, 3), got {tuple(offsets.shape)}")
        codes = [mlp(offsets[:, j].reshape(offsets.shape[0], -1))
                 for j, mlp in zip(self.part_joints, self.mlps)]
        return torch.stack(codes, dim=1).unsqueeze(1)


class MotionDecoder(nn.Module):
    """Fuse H_M + H_S, then two (upsample x2, conv) blocks; the last has no Relu."""

    def __init__(self, n_parts, num_joints, cfg):
        super().__init__()
        self.N, self.d = n_parts, cfg.d
        self.num_rows = num_joints + 1
        hidden = cfg.dec_hidden or cfg.conv_hidden * n_parts
        pad = (cfg.kernel - 1) // 2
        self.conv1 = nn.Conv1d(n_parts * cfg.d, hidden, cfg.kernel, padding=pad)
        self.conv2 = nn.Conv1d(hidden, self.num_rows * 4, cfg.kernel, padding=pad)
        _init_conv(self.conv1)
        _init_conv(self.conv2)

    def forward(self, h_m, h_s=None):
        """(B, T/4, N, d) [+ (B, 1, N, d)] -> (B, T, J+1, 4) normalized motion."""
        if h_m.shape[-2:] != (self.N, self.d):
            raise ShapeMismatch(f"expected (.., {self.N}, {self.d}) code, got {tuple(h_m.shape)}")
        h = h_m if h_s is None else h_m + h_s
        B, t = h.shape[:2]
        x = h.reshape(B, t, -1).transpose(1, 2)
        x = F.interpolate(x, scale_factor=2, mode="linear", align_corners=False)
        x = F.relu(self.conv1(x))
        x = F.interpolate(x, scale_factor=2, mode="linear", align_corners=False)
        x = self.conv2(x)
        return x.transpose(1, 2).reshape(B, 4 * t, self.num_rows, 4)


class Discriminator(nn.Module):
    """Temporal conv stack 4(J+1) -> D -> D/2 -> 1 with stride 2; sigmoid output."""

    def __init__(self, num_joints, cfg):
        super().__init__()
        chans = [4 * (num_joints + 1)] + list(cfg.disc_channels) + [1]
        pad = (cfg.kernel - 1) // 2
        self.convs = nn.ModuleList(
            nn.Conv1d(a, b, cfg.kernel, stride=2, padding=pad) for a, b in zip(chans[:-1], chans[1:]))
        for c in self.convs:
            _init_conv(c)

    def forward(self, m):
        """(B, T, J+1, 4) -> per-timestep probabilities (B, T')."""
        B, T = m.shape[:2]
        x = m.reshape(B, T, -1).transpose(1, 2)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.relu(x)
        return torch.sigmoid(x[:, 0])

    def score(self, m):
        """Clip naturalness: mean over time of the sigmoid output."""
        return self.forward(m).mean(dim=-1)


class StructureNet(nn.Module):
    """Generator side for one skeletal structure."""

    def __init__(self, partition, cfg):
        super().__init__()
        self.motion_encoder = MotionEncoder(partition, cfg)
        self.skeleton_encoder = SkeletonEncoder(partition, cfg)
        self.decoder = MotionDecoder(partition.N, partition.num_joints, cfg)

    def encode(self, m):
        return self.motion_encoder(m)

    def decode(self, h_m, offsets):
        return self.decoder(h_m, self.skeleton_encoder(offsets))


def encode_motion(clip_motion, net):
    return net.motion_encoder(clip_motion)


def encode_skeleton(offsets, net):
    return net.skeleton_encoder(offsets)


def decode_motion(h_m, h_s, net):
    return net.decoder(h_m, h_s)


def discriminate(motion, disc):
    return disc.score(motion)
