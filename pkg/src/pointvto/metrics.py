"""Frame and video metrics for synthetic try-on clips."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_SIGMA = 1.5
SSIM_WIN = 11
# a match counts only if it beats a flat mid-gray frame by this factor
PLACEMENT_CONTRAST = 0.9
NEUTRAL_GRAY = 0.5


def _gauss_window() -> np.ndarray:
    r = np.arange(SSIM_WIN) - SSIM_WIN // 2
    g = np.exp(-(r**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


def _filt(x: np.ndarray) -> np.ndarray:
    w = _gauss_window()
    x = ndimage.correlate1d(x, w, axis=0, mode="reflect")
    return ndimage.correlate1d(x, w, axis=1, mode="reflect")


def ssim_map(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Per-pixel SSIM of two (H, W) or (H, W, C) images, averaged over channels."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 3:
        return np.mean([ssim_map(x[..., c], y[..., c], data_range) for c in range(x.shape[-1])], axis=0)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filt(x), _filt(y)
    sxx = _filt(x * x) - mx * mx
    syy = _filt(y * y) - my * my
    sxy = _filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(x: np.ndarray, y: np.ndarray, mask: np.ndarray | None = None,
         data_range: float = 1.0) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5), optionally over a pixel mask."""
    m = ssim_map(x, y, data_range)
    if mask is None:
        return float(m.mean())
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty SSIM mask")
    return float(m[mask].mean())


def _texel_pairs(truth, t: int):
    """Pixel pairs (frame t, frame t+1) showing the same visible garment texel."""
    tex = truth._texel_maps[t]
    vis0, vis1 = truth.visible_mask(t), truth.visible_mask(t + 1)
    src, dst = [], []
    for r, c in np.argwhere(vis0):
        pix = truth.pixel_of_texel(t + 1, *tex[r, c])
        if pix is not None and vis1[pix]:
            src.append((r, c))
            dst.append(pix)
    return np.asarray(src, dtype=np.int64).reshape(-1, 2), np.asarray(dst, dtype=np.int64).reshape(-1, 2)


def temporal_consistency(video: np.ndarray, truth=None, region_masks: np.ndarray | None = None) -> float:
    """Mean over adjacent frames of the RMS change of the try-on region along oracle flow.

    With ``truth`` the flow follows the garment texels; without it, pixels
    are compared in place inside ``region_masks`` (a static-scene fallback).
    Lower is better. This is a pixel-level surrogate for video FID.
    """
    video = np.asarray(video, dtype=np.float64)
    T = video.shape[0]
    if T < 2:
        raise ValueError("temporal consistency needs at least two frames")
    vals = []
    for t in range(T - 1):
        if truth is not None:
            src, dst = _texel_pairs(truth, t)
            if region_masks is not None and len(src):
                keep = region_masks[t][src[:, 0], src[:, 1]]
                src, dst = src[keep], dst[keep]
        else:
            src = np.argwhere(region_masks[t] & region_masks[t + 1])
            dst = src
        if not len(src):
            continue
        d = video[t + 1][dst[:, 0], dst[:, 1]] - video[t][src[:, 0], src[:, 1]]
        vals.append(np.sqrt(np.mean(d * d)))
    return float(np.mean(vals)) if vals else 0.0


def _match_offset(frame: np.ndarray, template: np.ndarray, tmask: np.ndarray):
    """Top-left offset minimizing masked mean squared error, and that error."""
    th, tw = tmask.shape
    win = np.lib.stride_tricks.sliding_window_view(frame, (th, tw), axis=(0, 1))
    # win: (H-th+1, W-tw+1, C, th, tw)
    d = win - template.transpose(2, 0, 1)[None, None]
    w = tmask.astype(np.float64)
    err = (d * d * w).sum(axis=(2, 3, 4)) / (w.sum() * frame.shape[-1])
    r, c = np.unravel_index(np.argmin(err), err.shape)
    return (int(r), int(c)), float(err[r, c])


def placement_error(video: np.ndarray, truth, contrast: float = PLACEMENT_CONTRAST) -> float:
    """Mean pixel distance between where garment A is found and where it belongs.

    Per frame, the garment rendered at its true pose (visible texels only)
    is slid over the generated frame; the best match's displacement from
    the true position is the error. A match must reach ``contrast`` times
    the error the template has against a flat mid-gray frame, otherwise
    the frame has no detectable response and scores the image diagonal.
    """
    video = np.asarray(video, dtype=np.float64)
    H, W = video.shape[1:3]
    diag = float(np.hypot(H, W))
    ref = truth.render(truth.garment_a)
    errs = []
    for t in range(video.shape[0]):
        vis = truth.visible_mask(t)
        if not vis.any():
            continue
        rows, cols = np.nonzero(vis)
        r0, r1, c0, c1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
        template, tmask = ref[t, r0:r1, c0:c1], vis[r0:r1, c0:c1]
        (r, c), err = _match_offset(video[t], template, tmask)
        flat = float((((template - NEUTRAL_GRAY) ** 2) * tmask[..., None]).sum() / (tmask.sum() * 3))
        errs.append(float(np.hypot(r - r0, c - c0)) if err < contrast * flat else diag)
    return float(np.mean(errs)) if errs else diag
