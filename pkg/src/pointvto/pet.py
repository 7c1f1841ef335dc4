"""Point-enhanced transformer: sparse point gather/scatter, spatial and temporal attention.

Feature maps are token matrices (..., N, C). Soft alignment masks are
(..., M, N): one row per point slot. A slot whose mask row is identically
zero is treated as padding everywhere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .numerics import FFN, layer_norm, softmax_lastdim

NEG_INF = -1e9


def _normalized(mask: torch.Tensor) -> torch.Tensor:
    s = mask.sum(dim=-1, keepdim=True)
    nz = s > 0
    return torch.where(nz, mask / torch.where(nz, s, torch.ones_like(s)), torch.zeros_like(mask))


def gather_point_features(F: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mask-weighted average of token features per point: (..., M, N) x (..., N, C) -> (..., M, C)."""
    return _normalized(mask) @ F


def scatter_point_features(update: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Transpose of :func:`gather_point_features`: (..., M, C) -> (..., N, C)."""
    return _normalized(mask).transpose(-1, -2) @ update


def point_validity(mask: torch.Tensor) -> torch.Tensor:
    return mask.sum(dim=-1) > 0


def point_attention_bias(Kx: torch.Tensor, Vg: torch.Tensor, f_t: torch.Tensor,
                         mask: torch.Tensor, bias_ffn) -> torch.Tensor:
    """Per-point scalar from ``bias_ffn(cat(Kx, Vg, f_t))`` spread over pixels by the mask.

    Shapes: Kx, Vg (..., M, C); f_t (..., Ct); mask (..., M, N). Returns (..., N, M).
    """
    if Kx.shape != Vg.shape:
        raise ValueError(f"Kx {tuple(Kx.shape)} and Vg {tuple(Vg.shape)} differ")
    if mask.shape[-2] != Kx.shape[-2]:
        raise ValueError("mask rows must match the number of points")
    ft = f_t.unsqueeze(-2).expand(*Kx.shape[:-1], f_t.shape[-1])
    b = bias_ffn(torch.cat([Kx, Vg, ft], dim=-1))  # (..., M, 1)
    if b.shape[-1] != 1:
        raise ValueError("bias FFN must emit one scalar per point")
    return mask.transpose(-1, -2) * b.transpose(-1, -2)


class AdaLN(nn.Module):
    """Regresses scales, shifts and residual gates from the timestep embedding.

    Scales are returned as ``1 + raw`` so a zero regressor is the identity
    modulation. The gate rows start at zero.
    """

    def __init__(self, cond_dim: int, dim: int, n_chunks: int = 6, gate_chunks=(4, 5)):
        super().__init__()
        self.dim, self.n_chunks, self.gate_chunks = dim, n_chunks, tuple(gate_chunks)
        self.linear = nn.Linear(cond_dim, n_chunks * dim)
        nn.init.normal_(self.linear.weight, std=0.02)
        nn.init.zeros_(self.linear.bias)
        self.zero_gates()

    def zero_gates(self):
        with torch.no_grad():
            for k in self.gate_chunks:
                self.linear.weight[k * self.dim:(k + 1) * self.dim].zero_()
                self.linear.bias[k * self.dim:(k + 1) * self.dim].zero_()

    def forward(self, f_t: torch.Tensor):
        g1, b1, g2, b2, a1, a2 = self.linear(torch.nn.functional.silu(f_t)).unsqueeze(-2).chunk(6, dim=-1)
        return 1 + g1, b1, 1 + g2, b2, a1, a2


def _proj(dim: int) -> nn.Parameter:
    w = torch.empty(dim, dim)
    nn.init.orthogonal_(w)
    return nn.Parameter(w)


class PointSpatialAttention(nn.Module):
    """Cross-attention from every pixel to sparse person points, injecting garment point values.

    The residual stream is the input feature map itself, so with zero gates
    (or no valid points) the module returns its input unchanged.
    """

    def __init__(self, dim: int, mlp_ratio: int = 2, bias_hidden: int | None = None,
                 use_bias: bool = True, use_mask_gate: bool = True):
        super().__init__()
        self.dim = dim
        self.w_q, self.w_k, self.w_v = _proj(dim), _proj(dim), _proj(dim)
        self.bias_ffn = FFN(3 * dim, bias_hidden or dim, 1)
        self.adaln = AdaLN(dim, dim)
        self.ffn = FFN(dim, mlp_ratio * dim)
        self.use_bias = use_bias
        self.use_mask_gate = use_mask_gate

    def forward(self, Fx: torch.Tensor, Fg: torch.Tensor, mx: torch.Tensor,
                mg: torch.Tensor, f_t: torch.Tensor) -> torch.Tensor:
        g1, b1, g2, b2, a1, a2 = self.adaln(f_t)
        valid = point_validity(mx)
        any_valid = valid.any(dim=-1)[..., None, None].to(Fx.dtype)

        q = Fx @ self.w_q
        Kp = gather_point_features(Fx, mx) @ self.w_k
        Vp = gather_point_features(Fg, mg) @ self.w_v
        scores = (g1 * layer_norm(q) + b1) @ Kp.transpose(-1, -2) / math.sqrt(self.dim)
        if self.use_bias:
            scores = scores + point_attention_bias(Kp, Vp, f_t, mx, self.bias_ffn)
        scores = scores + (~valid).to(Fx.dtype).unsqueeze(-2) * NEG_INF
        attn = softmax_lastdim(scores)
        h = Fx + a1 * (attn @ Vp) * any_valid

        gate = mx.max(dim=-2).values.unsqueeze(-1) if self.use_mask_gate else any_valid
        return h + gate * a2 * self.ffn(g2 * layer_norm(h) + b2)


@dataclass
class PointFeatures:
    person: torch.Tensor  # (..., T, M, C)
    garment: torch.Tensor  # (..., M, C)
    valid: torch.Tensor  # (..., T, M)
    garment_valid: torch.Tensor | None = None  # (..., M)

    def gvalid(self) -> torch.Tensor:
        return self.valid.any(dim=-2) if self.garment_valid is None else self.garment_valid


class PointTemporalAttention(nn.Module):
    """Self-attention across the T frame tokens plus the garment token of each point.

    Points never attend to each other. The output projection starts at zero.
    """

    def __init__(self, dim: int, use_garment_token: bool = True):
        super().__init__()
        self.dim = dim
        self.w_q, self.w_k, self.w_v = _proj(dim), _proj(dim), _proj(dim)
        self.w_o = nn.Parameter(torch.zeros(dim, dim))
        self.use_garment_token = use_garment_token

    def update(self, feats: PointFeatures) -> torch.Tensor:
        """Residual update for the person tokens, (..., T, M, C)."""
        Zp, valid = feats.person, feats.valid
        T = Zp.shape[-3]
        if T == 0:
            raise ValueError("temporal attention needs at least one frame")
        if self.use_garment_token:
            Z = torch.cat([Zp, feats.garment.unsqueeze(-3)], dim=-3)
            tok_valid = torch.cat([valid, feats.gvalid().unsqueeze(-2)], dim=-2)
        else:
            Z, tok_valid = Zp, valid
        Zt = Z.transpose(-3, -2)  # (..., M, T+1, C)
        vt = tok_valid.transpose(-2, -1).to(Z.dtype)  # (..., M, T+1)
        q, k, v = Zt @ self.w_q, Zt @ self.w_k, Zt @ self.w_v
        s = q @ k.transpose(-1, -2) / math.sqrt(self.dim)
        s = s + (1 - vt).unsqueeze(-2) * NEG_INF
        upd = (softmax_lastdim(s) @ v) * vt.unsqueeze(-1)
        return (upd[..., :T, :] @ self.w_o).transpose(-3, -2)

    def forward(self, feats: PointFeatures) -> PointFeatures:
        return PointFeatures(feats.person + self.update(feats), feats.garment,
                             feats.valid, feats.garment_valid)


def psa_forward(module: PointSpatialAttention, Fx, Fg, mx, mg, f_t):
    return module(Fx, Fg, mx, mg, f_t)


def pta_forward(module: PointTemporalAttention, feats: PointFeatures) -> PointFeatures:
    return module(feats)


class PETBlock(nn.Module):
    """A host transformer block followed by point-enhanced spatial and temporal attention.

    ``x`` is (B, T, N, C); ``garment`` is (B, Ng, C); ``mx`` (B, T, M, N);
    ``mg`` (B, M, Ng); ``f_t`` (B, C).
    """

    def __init__(self, host: nn.Module, dim: int, with_psa: bool = True, with_pta: bool = True,
                 pta_garment_token: bool = True):
        super().__init__()
        self.host = host
        self.psa = PointSpatialAttention(dim) if with_psa else None
        self.pta = PointTemporalAttention(dim, pta_garment_token) if with_pta else None

    def forward(self, x, garment, mx, mg, f_t, use_pet: bool = True):
        B, T, N, C = x.shape
        g_rep = garment.unsqueeze(1).expand(B, T, *garment.shape[1:]).reshape(B * T, *garment.shape[1:])
        h = self.host(x.reshape(B * T, N, C), g_rep).reshape(B, T, N, C)
        if not use_pet or mx is None:
            return h
        if self.psa is not None:
            mg_rep = mg.unsqueeze(1).expand(B, T, *mg.shape[1:]).reshape(B * T, *mg.shape[1:])
            ft_rep = f_t.unsqueeze(1).expand(B, T, f_t.shape[-1]).reshape(B * T, -1)
            h = self.psa(h.reshape(B * T, N, C), g_rep, mx.reshape(B * T, *mx.shape[2:]),
                         mg_rep, ft_rep).reshape(B, T, N, C)
        if self.pta is not None:
            feats = PointFeatures(gather_point_features(h, mx), gather_point_features(garment, mg),
                                  point_validity(mx), point_validity(mg))
            h = h + scatter_point_features(self.pta.update(feats), mx)
        return h
