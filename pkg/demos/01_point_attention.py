"""
Point attention on a toy feature map
====================================

A 4x4 feature map, three person points and a small garment map. We look at
how the spatial point attention reads garment features into the pixels near
each point, and why a freshly built block changes nothing.
"""
import numpy as np
import torch

from pointvto.pet import (PointFeatures, PointSpatialAttention, PointTemporalAttention,
                          gather_point_features, scatter_point_features)

torch.manual_seed(0)
C, N, Ng, M = 4, 16, 9, 3
Fx = torch.randn(N, C, dtype=torch.float64)   # person pixels, flattened 4x4
Fg = torch.randn(Ng, C, dtype=torch.float64)  # garment pixels, flattened 3x3
f_t = torch.randn(C, dtype=torch.float64)     # timestep embedding

# one-hot masks: point m sits on pixel mx_idx[m] and garment texel mg_idx[m]
mx_idx, mg_idx = [0, 5, 15], [0, 4, 8]
mx = torch.zeros(M, N, dtype=torch.float64)
mg = torch.zeros(M, Ng, dtype=torch.float64)
mx[range(M), mx_idx] = 1
mg[range(M), mg_idx] = 1

# gather picks the point features out, scatter writes updates back in place
pts = gather_point_features(Fx, mx)
print("gathered rows equal the pixels:", torch.equal(pts, Fx[mx_idx]))
back = scatter_point_features(pts, mx)
print("scatter touches only point pixels:", int((back.abs().sum(1) > 0).sum()), "of", N)

# A new block has zero residual gates, so it is the identity ...
psa = PointSpatialAttention(C).double()
print("fresh PSA is identity:", torch.equal(psa(Fx, Fg, mx, mg, f_t), Fx))

# ... until the gates are trained. Give them some weight by hand.
with torch.no_grad():
    for p in psa.adaln.parameters():
        p.normal_(0, 0.5)
out = psa(Fx, Fg, mx, mg, f_t)
change = (out - Fx).norm(dim=1).reshape(4, 4)
# attention moves every pixel; the feed-forward residual adds to point pixels only
print("per-pixel change:")
print(np.round(change.detach().numpy(), 3))

# Temporal attention mixes the tokens of one point across frames, never across points.
pta = PointTemporalAttention(C).double()
with torch.no_grad():
    pta.w_o.normal_(0, 0.5)
T = 3
Zp = torch.randn(T, M, C, dtype=torch.float64)
valid = torch.ones(T, M, dtype=torch.bool)
upd = pta.update(PointFeatures(Zp, Fg[mg_idx], valid))
Zp2 = Zp.clone()
Zp2[:, 0] += 10.0
upd2 = pta.update(PointFeatures(Zp2, Fg[mg_idx], valid))
print("editing point 0 moves points 1 and 2:", not torch.equal(upd[:, 1:], upd2[:, 1:]))
