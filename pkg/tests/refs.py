"""Dense index-loop references and random tiny instances for the point-attention tests.

Everything here works on plain numpy arrays with explicit loops so that it
shares no code path with the vectorized torch implementation.
"""
import math

import numpy as np
import torch

from pointvto.pet import PETBlock, PointSpatialAttention, PointTemporalAttention

NEG = -1e9


def np64(x):
    return x.detach().double().numpy() if torch.is_tensor(x) else np.asarray(x, dtype=np.float64)


def ref_gather(F, mask):
    M, N = mask.shape
    out = np.zeros((M, F.shape[1]))
    for m in range(M):
        s = 0.0
        for n in range(N):
            s += mask[m, n]
        if s > 0:
            for n in range(N):
                for c in range(F.shape[1]):
                    out[m, c] += mask[m, n] / s * F[n, c]
    return out


def ref_scatter(U, mask):
    M, N = mask.shape
    out = np.zeros((N, U.shape[1]))
    for m in range(M):
        s = sum(mask[m, n] for n in range(N))
        if s > 0:
            for n in range(N):
                for c in range(U.shape[1]):
                    out[n, c] += mask[m, n] / s * U[m, c]
    return out


def ref_ln(v, eps=1e-6):
    mu = sum(v) / len(v)
    var = sum((x - mu) ** 2 for x in v) / len(v) + eps
    return np.array([(x - mu) / math.sqrt(var) for x in v])


def ref_gelu(a):
    return 0.5 * a * (1 + math.erf(a / math.sqrt(2)))


def ref_ffn(v, p):
    w1, b1, w2, b2 = p
    hidden = [ref_gelu(b1[j] + sum(v[i] * w1[i, j] for i in range(len(v)))) for j in range(w1.shape[1])]
    return np.array([b2[k] + sum(hidden[j] * w2[j, k] for j in range(len(hidden)))
                     for k in range(w2.shape[1])])


def ref_softmax(row):
    mx = max(row)
    e = [math.exp(x - mx) for x in row]
    s = sum(e)
    return [x / s for x in e]


def ffn_params(mod):
    return tuple(np64(t) for t in (mod.w1, mod.b1, mod.w2, mod.b2))


def ref_bias(Kx, Vg, f_t, mask, p):
    M, N = mask.shape
    b = [ref_ffn(np.concatenate([Kx[m], Vg[m], f_t]), p)[0] for m in range(M)]
    W = np.zeros((N, M))
    for n in range(N):
        for m in range(M):
            W[n, m] = mask[m, n] * b[m]
    return W


def ref_adaln(f_t, W, b):
    silu = np.array([x / (1 + math.exp(-x)) for x in f_t])
    raw = np.array([b[r] + sum(W[r, c] * silu[c] for c in range(len(silu))) for r in range(W.shape[0])])
    C = W.shape[0] // 6
    g1, b1, g2, b2, a1, a2 = (raw[i * C:(i + 1) * C] for i in range(6))
    return 1 + g1, b1, 1 + g2, b2, a1, a2


def ref_psa(mod: PointSpatialAttention, Fx, Fg, mx, mg, f_t):
    Fx, Fg, mx, mg, f_t = (np64(v) for v in (Fx, Fg, mx, mg, f_t))
    N, C = Fx.shape
    M = mx.shape[0]
    wq, wk, wv = np64(mod.w_q), np64(mod.w_k), np64(mod.w_v)
    g1, b1, g2, b2, a1, a2 = ref_adaln(f_t, np64(mod.adaln.linear.weight), np64(mod.adaln.linear.bias))
    valid = [sum(mx[m]) > 0 for m in range(M)]
    anyv = 1.0 if any(valid) else 0.0
    Kp = ref_gather(Fx, mx) @ wk
    Vp = ref_gather(Fg, mg) @ wv
    W = ref_bias(Kp, Vp, f_t, mx, ffn_params(mod.bias_ffn)) if mod.use_bias else np.zeros((N, M))
    out = np.zeros((N, C))
    for n in range(N):
        q = np.array([sum(Fx[n, i] * wq[i, c] for i in range(C)) for c in range(C)])
        lq = ref_ln(q)
        row = []
        for m in range(M):
            s = sum((g1[c] * lq[c] + b1[c]) * Kp[m, c] for c in range(C)) / math.sqrt(C)
            s += W[n, m] + (0.0 if valid[m] else NEG)
            row.append(s)
        a = ref_softmax(row)
        h = np.array([Fx[n, c] + a1[c] * anyv * sum(a[m] * Vp[m, c] for m in range(M)) for c in range(C)])
        gate = max(mx[m, n] for m in range(M)) if mod.use_mask_gate else anyv
        f = ref_ffn(g2 * ref_ln(h) + b2, ffn_params(mod.ffn))
        out[n] = h + gate * a2 * f
    return out


def ref_pta_update(mod: PointTemporalAttention, Zp, G, valid, gvalid):
    """Residual person update (T, M, C)."""
    Zp, G = np64(Zp), np64(G)
    valid, gvalid = np.asarray(valid), np.asarray(gvalid)
    T, M, C = Zp.shape
    wq, wk, wv, wo = (np64(w) for w in (mod.w_q, mod.w_k, mod.w_v, mod.w_o))
    out = np.zeros((T, M, C))
    for m in range(M):
        toks = [Zp[t, m] for t in range(T)]
        tv = [bool(valid[t, m]) for t in range(T)]
        if mod.use_garment_token:
            toks.append(G[m])
            tv.append(bool(gvalid[m]))
        for i in range(T):
            if not tv[i]:
                continue
            q = toks[i] @ wq
            row = [float(q @ (toks[j] @ wk)) / math.sqrt(C) + (0.0 if tv[j] else NEG) for j in range(len(toks))]
            a = ref_softmax(row)
            v = sum(a[j] * (toks[j] @ wv) for j in range(len(toks)))
            out[i, m] = v @ wo
    return out


def randomize(module, rng, scale=0.5):
    """Fill every parameter (gates and output projections included) with random values."""
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.as_tensor(rng.normal(0, scale, size=tuple(p.shape))))
    return module


def random_mask(rng, M, N, p_empty=0.25):
    """Soft mask rows in [0, 1] with some all-zero (padding) rows."""
    m = rng.random((M, N)) * (rng.random((M, N)) < 0.4)
    for i in range(M):
        if rng.random() < p_empty:
            m[i] = 0
    return m


def psa_instance(rng, N=None, M=None, C=4):
    N = N or int(rng.integers(1, 17))
    M = M or int(rng.integers(1, 5))
    Ng = int(rng.integers(1, 10))
    mod = randomize(PointSpatialAttention(C).double(), rng)
    Fx = torch.as_tensor(rng.normal(size=(N, C)))
    Fg = torch.as_tensor(rng.normal(size=(Ng, C)))
    mx = torch.as_tensor(random_mask(rng, M, N))
    mg = torch.as_tensor(random_mask(rng, M, Ng, 0.0))
    f_t = torch.as_tensor(rng.normal(size=C))
    return mod, Fx, Fg, mx, mg, f_t


def pta_instance(rng, T=None, M=None, C=4, garment_token=True):
    T = T or int(rng.integers(1, 5))
    M = M or int(rng.integers(1, 5))
    mod = randomize(PointTemporalAttention(C, garment_token).double(), rng)
    Zp = torch.as_tensor(rng.normal(size=(T, M, C)))
    G = torch.as_tensor(rng.normal(size=(M, C)))
    valid = torch.as_tensor(rng.random((T, M)) < 0.7)
    gvalid = torch.as_tensor(rng.random(M) < 0.8)
    return mod, Zp, G, valid, gvalid


class TinyHost(torch.nn.Module):
    """Deterministic stand-in host block: one linear map plus a garment mean."""

    def __init__(self, C):
        super().__init__()
        self.lin = torch.nn.Linear(C, C)

    def forward(self, x, ctx):
        return x + self.lin(x) + ctx.mean(dim=-2, keepdim=True)


def pet_block_instance(rng, B=1, T=2, N=5, Ng=4, M=3, C=4):
    block = randomize(PETBlock(TinyHost(C), C).double(), rng)
    x = torch.as_tensor(rng.normal(size=(B, T, N, C)))
    g = torch.as_tensor(rng.normal(size=(B, Ng, C)))
    mx = torch.as_tensor(np.stack([np.stack([random_mask(rng, M, N) for _ in range(T)]) for _ in range(B)]))
    mg = torch.as_tensor(np.stack([random_mask(rng, M, Ng, 0.0) for _ in range(B)]))
    f_t = torch.as_tensor(rng.normal(size=(B, C)))
    return block, x, g, mx, mg, f_t
