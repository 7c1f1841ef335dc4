"""Synthetic patch-transfer videos with exact geometric ground truth.

A textured square patch (the "garment") moves over a static background.
Hard scenes add rotation, scaling and a moving occluding bar. Every
rendered pixel can be traced back to its garment texel, which is what the
alignment oracles and the motion-compensated metrics rely on.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np
from scipy import ndimage

FRAME_HW = (32, 32)
GARMENT_HW = (16, 16)
PATCH_SIZE = 10
GARMENT_ORIGIN = (3, 3)
NUM_GARMENTS = 12
OCCLUDER_WIDTH = 3
OCCLUDER_VALUE = 0.15


def garment_texture(gid: int, size: int = PATCH_SIZE) -> np.ndarray:
    """Four saturated quadrant colours with a faint per-texel grain, (size, size, 3)."""
    rng = np.random.default_rng(10_000 + gid)
    hue0 = (gid / NUM_GARMENTS + rng.uniform(0, 0.03)) % 1.0
    cols = []
    for q in range(4):
        hue = (hue0 + q * 0.25 + rng.uniform(-0.05, 0.05)) % 1.0
        val = 0.75 if q % 2 == 0 else 0.95
        cols.append(colorsys.hsv_to_rgb(hue, 0.85, val))
    tex = np.zeros((size, size, 3))
    h = size // 2
    tex[:h, :h], tex[:h, h:], tex[h:, :h], tex[h:, h:] = cols
    tex += rng.uniform(-0.03, 0.03, size=(size, size, 1))
    return np.clip(tex, 0.0, 1.0)


def garment_image(gid: int) -> tuple[np.ndarray, np.ndarray]:
    """Garment canvas with its mask applied, plus the mask itself."""
    img = np.zeros(GARMENT_HW + (3,))
    mask = np.zeros(GARMENT_HW, dtype=bool)
    oy, ox = GARMENT_ORIGIN
    img[oy:oy + PATCH_SIZE, ox:ox + PATCH_SIZE] = garment_texture(gid)
    mask[oy:oy + PATCH_SIZE, ox:ox + PATCH_SIZE] = True
    return img, mask


def background(seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0.35, 0.65, size=(5, 5))
    lum = ndimage.zoom(coarse, (FRAME_HW[0] / 5, FRAME_HW[1] / 5), order=1)
    tint = rng.uniform(-0.04, 0.04, size=3)
    return np.clip(lum[..., None] + tint, 0.0, 1.0)


@dataclass
class SceneTruth:
    """Exact per-frame patch pose, garments and occluder of one scene."""

    seed: int
    difficulty: str
    num_frames: int
    centers: list  # (T, 2) patch centre in pixel units (row, col)
    angles: list  # (T,) radians
    scales: list  # (T,)
    garment_a: int
    garment_b: int
    background_seed: int
    occluder: list | None = None  # (T,) left column of a full-height bar
    patch_size: int = PATCH_SIZE
    garment_origin: tuple = GARMENT_ORIGIN
    frame_hw: tuple = FRAME_HW
    garment_hw: tuple = GARMENT_HW
    extra_garments: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneTruth":
        d = json.loads(text)
        d["garment_origin"] = tuple(d["garment_origin"])
        d["frame_hw"] = tuple(d["frame_hw"])
        d["garment_hw"] = tuple(d["garment_hw"])
        return cls(**d)

    # -- geometry -----------------------------------------------------------

    def texel_coords(self, frame: int) -> tuple[np.ndarray, np.ndarray]:
        """Continuous texture coordinates (u, v) at every pixel centre."""
        h, w = self.frame_hw
        rr, cc = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
        cy, cx = self.centers[frame]
        a, s = self.angles[frame], self.scales[frame]
        dy, dx = rr - cy, cc - cx
        cos, sin = np.cos(a), np.sin(a)
        # inverse rotation of the pixel offset, then inverse scale
        u = (cos * dy + sin * dx) / s + self.patch_size / 2
        v = (-sin * dy + cos * dx) / s + self.patch_size / 2
        return u, v

    @cached_property
    def _texel_maps(self) -> list[np.ndarray]:
        """Integer texel index per pixel, -1 outside the patch; (T, H, W, 2)."""
        maps = []
        n = self.patch_size
        for t in range(self.num_frames):
            u, v = self.texel_coords(t)
            inside = (u >= 0) & (u < n) & (v >= 0) & (v < n)
            tex = np.stack([np.floor(u), np.floor(v)], axis=-1).astype(np.int64)
            tex[~inside] = -1
            maps.append(tex)
        return maps

    @cached_property
    def _texel_pixels(self) -> list[np.ndarray]:
        """For each texel, the rendered pixel whose centre lies closest to the texel centre."""
        out = []
        n = self.patch_size
        for t in range(self.num_frames):
            u, v = self.texel_coords(t)
            tex = self._texel_maps[t]
            best = np.full((n, n), np.inf)
            pix = np.full((n, n, 2), -1, dtype=np.int64)
            for r, c in np.argwhere(tex[..., 0] >= 0):
                i, j = tex[r, c]
                d = (u[r, c] - i - 0.5) ** 2 + (v[r, c] - j - 0.5) ** 2
                if d < best[i, j]:
                    best[i, j] = d
                    pix[i, j] = (r, c)
            out.append(pix)
        return out

    def patch_mask(self, frame: int) -> np.ndarray:
        return self._texel_maps[frame][..., 0] >= 0

    def occluder_mask(self, frame: int) -> np.ndarray:
        m = np.zeros(self.frame_hw, dtype=bool)
        if self.occluder is not None:
            c0 = int(self.occluder[frame])
            m[:, max(c0, 0):max(c0 + OCCLUDER_WIDTH, 0)] = True
        return m

    def visible_mask(self, frame: int) -> np.ndarray:
        return self.patch_mask(frame) & ~self.occluder_mask(frame)

    def texel_at(self, frame: int, r: int, c: int) -> tuple[int, int] | None:
        h, w = self.frame_hw
        if not (0 <= r < h and 0 <= c < w):
            return None
        i, j = self._texel_maps[frame][r, c]
        return None if i < 0 else (int(i), int(j))

    def pixel_of_texel(self, frame: int, u: int, v: int) -> tuple[int, int] | None:
        r, c = self._texel_pixels[frame][u, v]
        return None if r < 0 else (int(r), int(c))

    def occluded(self, frame: int, r: int, c: int) -> bool:
        return bool(self.occluder_mask(frame)[r, c])

    def centroid(self, frame: int) -> np.ndarray:
        return np.argwhere(self.patch_mask(frame)).mean(axis=0)

    def visible_frames(self) -> list[int]:
        return [t for t in range(self.num_frames) if self.visible_mask(t).any()]

    # -- rendering ----------------------------------------------------------

    def render(self, gid: int, with_occluder: bool = True) -> np.ndarray:
        """Video (T, H, W, 3) in [0, 1] wearing garment ``gid``."""
        tex = garment_texture(gid, self.patch_size)
        bg = background(self.background_seed)
        frames = np.empty((self.num_frames,) + tuple(self.frame_hw) + (3,))
        for t in range(self.num_frames):
            f = bg.copy()
            tm = self._texel_maps[t]
            inside = tm[..., 0] >= 0
            f[inside] = tex[tm[inside][:, 0], tm[inside][:, 1]]
            if with_occluder:
                f[self.occluder_mask(t)] = OCCLUDER_VALUE
            frames[t] = f
        return frames

    def pose_map(self, sigma: float = 2.0) -> np.ndarray:
        """Coarse pose stand-in: a Gaussian blob at the patch centre, (T, H, W)."""
        h, w = self.frame_hw
        rr, cc = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
        out = np.empty((self.num_frames, h, w))
        for t, (cy, cx) in enumerate(self.centers):
            out[t] = np.exp(-((rr - cy) ** 2 + (cc - cx) ** 2) / (2 * sigma**2))
        return out

    def agnostic_mask(self, dilation: int = 2) -> np.ndarray:
        return np.stack([ndimage.binary_dilation(self.patch_mask(t), iterations=dilation)
                         for t in range(self.num_frames)])


def _easy_motion(rng, T, velocity):
    n = PATCH_SIZE
    h, w = FRAME_HW
    vel = np.asarray(velocity if velocity is not None else rng.integers(-1, 2, size=2))
    lo = np.maximum(0, -vel * (T - 1))
    hi = np.minimum(np.array([h, w]) - n, np.array([h, w]) - n - vel * (T - 1))
    origin = np.array([rng.integers(lo[0], hi[0] + 1), rng.integers(lo[1], hi[1] + 1)])
    centers = [(origin + vel * t + n / 2).astype(float).tolist() for t in range(T)]
    return centers, [0.0] * T, [1.0] * T


def _hard_motion(rng, T):
    h, w = FRAME_HW
    vel = rng.uniform(-1.2, 1.2, size=2)
    amp = rng.uniform(0.5, 1.5, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    a0 = rng.uniform(-0.45, 0.45)
    da = rng.uniform(-0.12, 0.12)
    s0 = rng.uniform(0.85, 1.1)
    ds = rng.uniform(-0.03, 0.03)
    tt = np.arange(T)
    path = vel[None] * tt[:, None] + amp[None] * np.sin(0.9 * tt[:, None] + phase[None])
    path -= path.mean(axis=0)
    scales = np.clip(s0 + ds * tt, 0.8, 1.2)
    angles = np.clip(a0 + da * tt, -0.6, 0.6)
    radius = PATCH_SIZE * scales.max() * np.sqrt(2) / 2 + 0.5
    lo = radius - path.min(axis=0)
    hi = np.array([h, w]) - radius - path.max(axis=0)
    centre = np.array([rng.uniform(lo[i], max(hi[i], lo[i])) for i in range(2)])
    centers = (centre[None] + path).tolist()
    return centers, angles.tolist(), scales.tolist()


def gen_synthetic_scene(seed: int, difficulty: str = "easy", num_frames: int = 8,
                        velocity=None, garments_per_scene: int = 1
                        ) -> tuple[SceneTruth, np.ndarray, np.ndarray]:
    """Sample a scene and render it with garment A (truth) and garment B (counterfactual).

    Returns ``(truth, x_gt, x_cf)``. ``velocity`` pins the per-frame
    translation of easy scenes.
    """
    if difficulty not in ("easy", "hard"):
        raise ValueError("difficulty must be 'easy' or 'hard'")
    rng = np.random.default_rng(seed)
    ga, *others = rng.choice(NUM_GARMENTS, size=1 + garments_per_scene, replace=False)
    if difficulty == "easy":
        centers, angles, scales = _easy_motion(rng, num_frames, velocity)
        occ = None
    else:
        centers, angles, scales = _hard_motion(rng, num_frames)
        cx = np.asarray(centers)[:, 1]
        start = rng.uniform(cx.min() - 6, cx.max() + 3)
        speed = rng.uniform(-0.8, 0.8)
        occ = [int(np.floor(start + speed * t)) for t in range(num_frames)]
    truth = SceneTruth(seed=int(seed), difficulty=difficulty, num_frames=num_frames,
                       centers=[list(map(float, c)) for c in centers],
                       angles=[float(a) for a in angles], scales=[float(s) for s in scales],
                       garment_a=int(ga), garment_b=int(others[0]),
                       background_seed=int(rng.integers(2**31)), occluder=occ,
                       extra_garments=[int(g) for g in others[1:]])
    return truth, truth.render(truth.garment_a), truth.render(truth.garment_b)
