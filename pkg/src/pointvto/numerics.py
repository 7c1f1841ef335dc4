"""Differentiable primitives shared by every model component.

Tensors are ``torch.Tensor`` values; torch's autograd supplies reverse-mode
derivatives and :func:`finite_diff_check` verifies them independently with
central differences. Gradient checks must run in float64.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F


class ParamGroup(str, enum.Enum):
    POSE_ENCODER = "PoseEncoder"
    GARMENT_ENCODER = "GarmentEncoder"
    DENOISER = "Denoiser"
    TEMPORAL = "Temporal"
    PSA = "PSA"
    PTA = "PTA"


def softmax_lastdim(x: torch.Tensor) -> torch.Tensor:
    """Max-subtracted softmax over the last axis."""
    if x.numel() == 0 or x.shape[-1] == 0:
        raise ValueError("softmax of an empty tensor")
    shifted = x - x.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def layer_norm(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Normalize over the channel (last) axis without an affine transform.

    Positions whose variance plus ``eps`` is exactly zero map to zeros.
    """
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True) + eps
    degenerate = var == 0
    safe = torch.where(degenerate, torch.ones_like(var), var)
    return torch.where(degenerate, torch.zeros_like(x), centered / torch.sqrt(safe))


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def ffn(x: torch.Tensor, w1: torch.Tensor, b1: torch.Tensor,
        w2: torch.Tensor, b2: torch.Tensor) -> torch.Tensor:
    """Two affine layers with a GELU in between; weights are (in, out)."""
    if x.shape[-1] != w1.shape[0] or w1.shape[1] != b1.shape[-1]:
        raise ValueError(f"ffn first layer mismatch: x{tuple(x.shape)} w1{tuple(w1.shape)}")
    if w1.shape[1] != w2.shape[0] or w2.shape[1] != b2.shape[-1]:
        raise ValueError(f"ffn second layer mismatch: w1{tuple(w1.shape)} w2{tuple(w2.shape)}")
    return gelu(x @ w1 + b1) @ w2 + b2


class FFN(torch.nn.Module):
    def __init__(self, dim_in: int, hidden: int, dim_out: int | None = None):
        super().__init__()
        dim_out = dim_in if dim_out is None else dim_out
        self.w1 = torch.nn.Parameter(torch.empty(dim_in, hidden))
        self.b1 = torch.nn.Parameter(torch.zeros(hidden))
        self.w2 = torch.nn.Parameter(torch.empty(hidden, dim_out))
        self.b2 = torch.nn.Parameter(torch.zeros(dim_out))
        torch.nn.init.normal_(self.w1, std=1.0 / math.sqrt(dim_in))
        torch.nn.init.normal_(self.w2, std=1.0 / math.sqrt(hidden))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return ffn(x, self.w1, self.b1, self.w2, self.b2)


def softening_kernel(size: int = 3, sigma: float = 1.0,
                     dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Gaussian kernel rescaled so its center is exactly 1."""
    if size % 2 == 0:
        raise ValueError("kernel size must be odd")
    r = torch.arange(size, dtype=dtype) - size // 2
    g = torch.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma**2))
    return g / g[size // 2, size // 2]


def depthwise_conv2d(mask: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Same-padded convolution applied independently to each channel.

    ``mask`` is (..., C, H, W); ``kernel`` is (k, k), shared by all channels.
    """
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError("kernel must be square (k, k)")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ValueError("even kernel size has no center")
    if mask.ndim < 3:
        raise ValueError("mask must be (..., C, H, W)")
    lead = mask.shape[:-3]
    c, h, w = mask.shape[-3:]
    x = mask.reshape(-1, c, h, w)
    weight = kernel.to(mask.dtype).expand(c, 1, k, k)
    # conv2d is cross-correlation; flip so this is a true convolution
    out = F.conv2d(x, torch.flip(weight, dims=(-2, -1)), padding=k // 2, groups=c)
    return out.reshape(*lead, c, h, w)


def maxpool2d(mask: torch.Tensor, factor: int) -> torch.Tensor:
    """Max over non-overlapping factor x factor windows, zero-padding ragged edges."""
    if factor <= 0:
        raise ValueError("pool factor must be positive")
    if factor == 1:
        return mask
    lead = mask.shape[:-2]
    h, w = mask.shape[-2:]
    x = mask.reshape(-1, 1, h, w)
    pad_h, pad_w = (-h) % factor, (-w) % factor
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h))
    out = F.max_pool2d(x, factor)
    return out.reshape(*lead, out.shape[-2], out.shape[-1])


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_input: int
    worst_index: int
    n_coords: int

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def finite_diff_check(op: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
                      tolerance: float | None = None, h: float = 1e-5,
                      seed: int = 0) -> GradCheckReport:
    """Compare autograd gradients of ``op`` against central differences.

    The output is contracted with a fixed random tensor to get a scalar.
    Every coordinate of every input (parameters included) is perturbed.
    Relative error uses ``max(|a|, |n|, 1e-3 * max|a|)`` as the denominator
    so that coordinates with vanishing gradient do not dominate.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != torch.float64:
            raise TypeError("finite_diff_check requires float64 inputs")

    with torch.no_grad():
        out0 = op(*inputs)
    gen = torch.Generator().manual_seed(seed)
    proj = torch.randn(out0.shape, generator=gen, dtype=torch.float64)

    def scalar(*args):
        return (op(*args) * proj).sum()

    leaves = [t.detach().clone().requires_grad_(True) for t in inputs]
    grads = torch.autograd.grad(scalar(*leaves), leaves, allow_unused=True)
    analytic = [torch.zeros_like(t) if g is None else g.detach() for t, g in zip(inputs, grads)]
    for i, g in enumerate(analytic):
        bad = (~torch.isfinite(g)).flatten().nonzero()
        if len(bad):
            raise FloatingPointError(
                f"non-finite analytic gradient at input {i}, coordinate {int(bad[0])}")

    scale = max(float(g.abs().max()) if g.numel() else 0.0 for g in analytic)
    floor = max(1e-3 * scale, 1e-12)
    worst = (0.0, 0, 0)
    n = 0
    with torch.no_grad():
        base = [t.detach().clone() for t in inputs]
        for i, x in enumerate(base):
            flat = x.view(-1)
            a_flat = analytic[i].reshape(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + h
                fp = scalar(*base).item()
                flat[j] = orig - h
                fm = scalar(*base).item()
                flat[j] = orig
                num = (fp - fm) / (2 * h)
                a = a_flat[j].item()
                rel = abs(a - num) / max(abs(a), abs(num), floor)
                n += 1
                if rel > worst[0]:
                    worst = (rel, i, j)
    report = GradCheckReport(worst[0], worst[1], worst[2], n)
    if tolerance is not None and not report.passed(tolerance):
        raise AssertionError(
            f"gradient mismatch {report.max_rel_error:.3e} >= {tolerance:g} "
            f"at input {report.worst_input}, coordinate {report.worst_index}")
    return report
