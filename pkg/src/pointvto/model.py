"""Tiny two-level video denoiser hosting point-enhanced blocks, plus checkpoint I/O."""
from __future__ import annotations

import math
import os
import re
import tempfile
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .diffusion import NoiseSchedule, named_schedule, timestep_embedding
from .numerics import ParamGroup, softmax_lastdim
from .pet import PETBlock, PointSpatialAttention, PointTemporalAttention
from .points import MaskPyramid

LEVEL_FACTORS = (1, 2)


@dataclass
class DenoiserConfig:
    channels: int = 24
    frames: int = 8
    K: int = 16
    frame_hw: tuple = (32, 32)
    garment_hw: tuple = (16, 16)
    pet_levels: tuple = (True, True)
    self_attn_levels: tuple = (False, True)
    pta_garment_token: bool = True
    seed: int = 0
    num_steps: int = 50
    schedule: str = "scaled_linear"
    prediction: str = "x0"  # "x0": clean-frame head converted to noise; "eps": direct

    @property
    def level_factors(self) -> tuple[int, ...]:
        return LEVEL_FACTORS

    def noise_schedule(self) -> NoiseSchedule:
        return named_schedule(self.schedule, self.num_steps)


@dataclass
class ConditioningBundle:
    """Per-clip conditioning; every tensor has a leading batch axis.

    ``frames`` is the full pseudo video in mask-free mode or the agnostic
    video in mask-based mode; ``mask_channel`` is the agnostic mask in
    mask-based mode and zeros otherwise.
    """

    frames: torch.Tensor  # (B, T, 3, H, W) in [-1, 1]
    pose: torch.Tensor  # (B, T, 1, H, W)
    garment: torch.Tensor  # (B, 3, Hg, Wg) in [-1, 1], background zeroed
    mask_channel: torch.Tensor | None = None  # (B, T, 1, H, W)

    def frames_slice(self, start: int, stop: int) -> "ConditioningBundle":
        mc = None if self.mask_channel is None else self.mask_channel[:, start:stop]
        return ConditioningBundle(self.frames[:, start:stop], self.pose[:, start:stop],
                                  self.garment, mc)


class Attention(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)
        self.o = nn.Linear(dim, dim)
        self.scale = 1.0 / math.sqrt(dim)

    def forward(self, x, ctx=None):
        ctx = x if ctx is None else ctx
        a = softmax_lastdim(self.q(x) @ self.k(ctx).transpose(-1, -2) * self.scale)
        return self.o(a @ self.v(ctx))


class HostBlock(nn.Module):
    """Plain transformer block: optional self-attention, garment cross-attention, MLP."""

    def __init__(self, dim: int, self_attn: bool = True):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim) if self_attn else None
        self.attn = Attention(dim) if self_attn else None
        self.norm2 = nn.LayerNorm(dim)
        self.cross = Attention(dim)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x, ctx):
        if self.attn is not None:
            x = x + self.attn(self.norm1(x))
        x = x + self.cross(self.norm2(x), ctx)
        return x + self.mlp(self.norm3(x))


class TemporalAttention(nn.Module):
    """Per-pixel self-attention over frames; output projection starts at zero."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = Attention(dim)
        nn.init.zeros_(self.attn.o.weight)
        nn.init.zeros_(self.attn.o.bias)
        self.dim = dim

    def forward(self, x):  # (B, T, N, C)
        B, T, N, C = x.shape
        pos = timestep_embedding(torch.arange(T), C, dtype=x.dtype)
        h = (self.norm(x) + pos[None, :, None, :]).permute(0, 2, 1, 3).reshape(B * N, T, C)
        return x + self.attn(h).reshape(B, N, T, C).permute(0, 2, 1, 3)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb: int):
        super().__init__()
        self.n1 = nn.GroupNorm(4, c_in)
        self.c1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.t = nn.Linear(temb, c_out)
        self.n2 = nn.GroupNorm(4, c_out)
        self.c2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.c1(F.silu(self.n1(x)))
        h = h + self.t(temb)[:, :, None, None]
        h = self.c2(F.silu(self.n2(h)))
        return self.skip(x) + h


class GarmentEncoder(nn.Module):
    """Three conv blocks giving garment features at both denoiser levels."""

    def __init__(self, dim: int):
        super().__init__()
        self.c1 = nn.Conv2d(3, dim, 3, padding=1)
        self.c2 = nn.Conv2d(dim, dim, 3, padding=1)
        self.c3 = nn.Conv2d(dim, dim, 3, stride=2, padding=1)

    def forward(self, g):
        f1 = F.gelu(self.c2(F.gelu(self.c1(g))))
        f2 = F.gelu(self.c3(f1))
        return {1: f1, 2: f2}


class PoseEncoder(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.c1 = nn.Conv2d(1, dim, 3, padding=1)
        self.c2 = nn.Conv2d(dim, dim, 3, padding=1)

    def forward(self, p):
        return self.c2(F.silu(self.c1(p)))


def _tokens(x):  # (B*T, C, h, w) -> (B*T, h*w, C)
    return x.flatten(2).transpose(1, 2)


def _check(x, tag):
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite activation after {tag}")
    return x


class Denoiser(nn.Module):
    """Predicts the noise of a latent clip given garment, pose and alignment masks.

    With ``prediction="x0"`` the head outputs a residual on the conditioning
    frames; that clean estimate is turned into the noise the loss expects.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        if cfg.prediction not in ("x0", "eps"):
            raise ValueError(f"prediction must be 'x0' or 'eps', got {cfg.prediction!r}")
        self.cfg = cfg
        self.schedule = cfg.noise_schedule()
        self._alphabar = torch.tensor((1.0,) + tuple(self.schedule.alphabar), dtype=torch.float64)
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self._build(cfg)
        init_identity(self)

    def _build(self, cfg):
        C = cfg.channels
        self.time_mlp = nn.Sequential(nn.Linear(C, C), nn.SiLU(), nn.Linear(C, C))
        self.conv_in = nn.Conv2d(3 + 3 + 1, C, 3, padding=1)
        self.pose_enc = PoseEncoder(C)
        self.garment_enc = GarmentEncoder(C)
        self.res1 = ResBlock(C, C, C)
        self.res2 = ResBlock(C, C, C)
        self.res3 = ResBlock(2 * C, C, C)
        self.down = nn.Conv2d(C, C, 3, stride=2, padding=1)
        self.up = nn.Conv2d(C, C, 3, padding=1)
        self.blocks = nn.ModuleList([
            PETBlock(HostBlock(C, self_attn=sa), C, with_psa=False, with_pta=False)
            for sa in cfg.self_attn_levels])
        self.temporal = nn.ModuleList([TemporalAttention(C) for _ in LEVEL_FACTORS])
        self.norm_out = nn.GroupNorm(4, C)
        self.conv_out = nn.Conv2d(C, 3, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)
        # point modules last, so host weights do not depend on PET placement
        for block, pet in zip(self.blocks, cfg.pet_levels):
            if pet:
                block.psa = PointSpatialAttention(C)
                block.pta = PointTemporalAttention(C, cfg.pta_garment_token)

    def encode_garment(self, g: torch.Tensor) -> dict[int, torch.Tensor]:
        if g.ndim != 4 or g.shape[1] != 3 or tuple(g.shape[-2:]) != tuple(self.cfg.garment_hw):
            raise ValueError(f"garment must be (B, 3, {self.cfg.garment_hw}), got {tuple(g.shape)}")
        return self.garment_enc(g)

    def _level(self, i, h, B, T, gfeat, masks, f_t, use_pet):
        _, C, hh, ww = h.shape
        x = _tokens(h).reshape(B, T, hh * ww, C)
        mx = mg = None
        if masks is not None and use_pet:
            lvl = masks[LEVEL_FACTORS[i]]
            mx = lvl.person.to(h.dtype).flatten(-2)  # (B, T, K, N)
            mg = lvl.garment.to(h.dtype).flatten(-2)[:, 0]  # (B, K, Ng)
        x = self.blocks[i](x, _tokens(gfeat), mx, mg, f_t, use_pet=use_pet)
        x = _check(x, f"block{i + 1}")
        x = self.temporal[i](x)
        return x.reshape(B * T, hh, ww, C).permute(0, 3, 1, 2)

    def forward(self, z_t: torch.Tensor, t, cond: ConditioningBundle,
                masks: MaskPyramid | None = None, use_pet: bool = True) -> torch.Tensor:
        B, T = z_t.shape[:2]
        H, W = z_t.shape[-2:]
        C = self.cfg.channels
        if not torch.is_tensor(t):
            t = torch.full((B,), int(t))
        f_t = timestep_embedding(t, C, dtype=z_t.dtype)
        temb = self.time_mlp(f_t)
        temb_f = temb.repeat_interleave(T, dim=0)

        mc = cond.mask_channel if cond.mask_channel is not None else torch.zeros_like(cond.pose)
        inp = torch.cat([z_t, cond.frames, mc], dim=2).reshape(B * T, 7, H, W)
        h = self.conv_in(inp) + self.pose_enc(cond.pose.reshape(B * T, 1, H, W))
        gfeat = self.encode_garment(cond.garment)

        h1 = self.res1(h, temb_f)
        h1 = self._level(0, h1, B, T, gfeat[1], masks, f_t, use_pet)
        h2 = self.res2(self.down(h1), temb_f)
        h2 = self._level(1, h2, B, T, gfeat[2], masks, f_t, use_pet)
        u = self.up(F.interpolate(h2, scale_factor=2, mode="nearest"))
        h3 = self.res3(torch.cat([u, h1], dim=1), temb_f)
        out = self.conv_out(F.silu(self.norm_out(h3)))
        out = _check(out, "conv_out").reshape(B, T, 3, H, W)
        if self.cfg.prediction == "eps":
            return out
        ab = self._alphabar[t.long()].to(z_t.dtype).reshape(B, 1, 1, 1, 1)
        x0 = cond.frames + out
        return (z_t - ab.sqrt() * x0) / (1 - ab).sqrt()


def init_identity(model: nn.Module) -> None:
    """Zero every point-attention gate and the temporal scatter projection."""
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, PETBlock):
                if m.psa is not None:
                    m.psa.adaln.zero_gates()
                if m.pta is not None:
                    m.pta.w_o.zero_()


_GROUP_RULES = [
    (re.compile(r"(^|\.)psa\."), ParamGroup.PSA),
    (re.compile(r"(^|\.)pta\."), ParamGroup.PTA),
    (re.compile(r"^temporal\."), ParamGroup.TEMPORAL),
    (re.compile(r"^pose_enc\."), ParamGroup.POSE_ENCODER),
    (re.compile(r"^garment_enc\."), ParamGroup.GARMENT_ENCODER),
]


def param_group(name: str) -> ParamGroup:
    for pat, group in _GROUP_RULES:
        if pat.search(name):
            return group
    return ParamGroup.DENOISER


def param_groups(model: nn.Module) -> dict[str, ParamGroup]:
    return {name: param_group(name) for name, _ in model.named_parameters()}


def set_trainable(model: nn.Module, groups) -> list[nn.Parameter]:
    groups = {ParamGroup(g) for g in groups}
    trainable = []
    for name, p in model.named_parameters():
        p.requires_grad_(param_group(name) in groups)
        if p.requires_grad:
            trainable.append(p)
    return trainable


# -- checkpoints ------------------------------------------------------------

CKPT_MANIFEST = "manifest.txt"
CKPT_BLOB = "weights.bin"


def _atomic_write(path: str, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: Denoiser, directory: str, meta: dict | None = None) -> None:
    """Text manifest (one tensor per line) plus one little-endian float32 blob."""
    os.makedirs(directory, exist_ok=True)
    lines = [f"# {k} = {v}" for k, v in sorted((meta or {}).items())]
    cfg = model.cfg
    for k in ("channels", "frames", "K", "frame_hw", "garment_hw", "pet_levels",
              "self_attn_levels", "pta_garment_token", "num_steps", "schedule", "prediction"):
        lines.append(f"# config.{k} = {getattr(cfg, k)!r}")
    blobs, offset = [], 0
    for name, p in model.state_dict().items():
        arr = p.detach().cpu().numpy().astype("<f4")
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"{name}\t{param_group(name).value}\t{shape}\tfloat32\t{offset}")
        b = arr.tobytes(order="C")
        blobs.append(b)
        offset += len(b)
    _atomic_write(os.path.join(directory, CKPT_BLOB), b"".join(blobs))
    _atomic_write(os.path.join(directory, CKPT_MANIFEST), ("\n".join(lines) + "\n").encode("utf-8"))


def read_checkpoint_meta(directory: str) -> dict[str, str]:
    meta = {}
    with open(os.path.join(directory, CKPT_MANIFEST), encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("# "):
                k, _, v = line[2:].rstrip("\n").partition(" = ")
                meta[k] = v
    return meta


def load_state(directory: str) -> dict[str, np.ndarray]:
    with open(os.path.join(directory, CKPT_BLOB), "rb") as fh:
        blob = fh.read()
    out = {}
    with open(os.path.join(directory, CKPT_MANIFEST), encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            name, _group, shape, dtype, offset = line.rstrip("\n").split("\t")
            if dtype != "float32":
                raise ValueError(f"unsupported dtype {dtype} for {name}")
            dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
            n = int(np.prod(dims)) if dims else 1
            start = int(offset)
            out[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=start).reshape(dims).copy()
    return out


def _parse_cfg_value(v: str):
    import ast
    return ast.literal_eval(v)


def load_checkpoint(directory: str, cfg: DenoiserConfig | None = None) -> Denoiser:
    meta = read_checkpoint_meta(directory)
    if cfg is None:
        kw = {k.split(".", 1)[1]: _parse_cfg_value(v) for k, v in meta.items() if k.startswith("config.")}
        cfg = DenoiserConfig(**kw)
    model = Denoiser(cfg)
    state = load_state(directory)
    own = model.state_dict()
    if set(state) != set(own):
        missing, extra = set(own) - set(state), set(state) - set(own)
        raise ValueError(f"checkpoint/config mismatch; missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
    for name, arr in state.items():
        if tuple(arr.shape) != tuple(own[name].shape):
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {tuple(own[name].shape)}")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in state.items()})
    return model
