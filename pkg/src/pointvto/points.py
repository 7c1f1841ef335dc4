"""Point sampling, oracle alignment, error injection and soft alignment masks."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np
import torch

from .numerics import depthwise_conv2d, maxpool2d, softening_kernel

SENTINEL = -1


class SceneOracle(Protocol):
    """What the alignment oracles need to know about a synthetic scene."""

    num_frames: int
    garment_origin: tuple[int, int]

    def texel_at(self, frame: int, r: int, c: int) -> tuple[int, int] | None: ...
    def pixel_of_texel(self, frame: int, u: int, v: int) -> tuple[int, int] | None: ...
    def occluded(self, frame: int, r: int, c: int) -> bool: ...


@dataclass
class PointAlignment:
    """Per-frame person points, their garment matches and validity flags.

    ``frame_points`` is (T, K, 2), ``garment_points`` is (K, 2) and ``valid``
    is (T, K). Unused or invalid slots hold ``(-1, -1)``.
    """

    frame_points: np.ndarray
    garment_points: np.ndarray
    valid: np.ndarray
    anchor: int = 0

    def __post_init__(self):
        self.frame_points = np.asarray(self.frame_points, dtype=np.int64)
        self.garment_points = np.asarray(self.garment_points, dtype=np.int64)
        self.valid = np.asarray(self.valid, dtype=bool)
        t, k = self.valid.shape
        if self.frame_points.shape != (t, k, 2) or self.garment_points.shape != (k, 2):
            raise ValueError("inconsistent alignment shapes")
        if np.any(self.frame_points[~self.valid] != SENTINEL):
            raise ValueError("invalid frame entries must carry the (-1, -1) sentinel")
        if np.any(self.valid & ~self.garment_valid[None, :]):
            raise ValueError("a frame point is valid but its garment point is missing")

    @property
    def num_frames(self) -> int:
        return self.valid.shape[0]

    @property
    def K(self) -> int:
        return self.valid.shape[1]

    @property
    def garment_valid(self) -> np.ndarray:
        return np.all(self.garment_points >= 0, axis=-1)

    @property
    def M(self) -> int:
        return int(self.garment_valid.sum())

    @classmethod
    def empty(cls, num_frames: int, K: int) -> "PointAlignment":
        return cls(np.full((num_frames, K, 2), SENTINEL), np.full((K, 2), SENTINEL),
                   np.zeros((num_frames, K), dtype=bool))

    def frames(self, start: int, stop: int) -> "PointAlignment":
        return PointAlignment(self.frame_points[start:stop].copy(), self.garment_points.copy(),
                              self.valid[start:stop].copy(), anchor=self.anchor)

    def permuted(self, perm: Sequence[int]) -> "PointAlignment":
        perm = np.asarray(perm)
        return PointAlignment(self.frame_points[:, perm], self.garment_points[perm],
                              self.valid[:, perm], anchor=self.anchor)

    def __eq__(self, other):
        if not isinstance(other, PointAlignment):
            return NotImplemented
        return (np.array_equal(self.frame_points, other.frame_points)
                and np.array_equal(self.garment_points, other.garment_points)
                and np.array_equal(self.valid, other.valid))


def sample_frame_points(tryon_mask: np.ndarray, M: int, K: int, seed: int) -> np.ndarray:
    """Draw ``min(M, #on)`` distinct on-pixels uniformly; pad to K with sentinels."""
    if not 1 <= M <= K:
        raise ValueError(f"need 1 <= M <= K, got M={M}, K={K}")
    on = np.argwhere(np.asarray(tryon_mask) > 0)
    out = np.full((K, 2), SENTINEL, dtype=np.int64)
    n = min(M, len(on))
    if n:
        rng = np.random.default_rng(seed)
        out[:n] = on[rng.choice(len(on), size=n, replace=False)]
    return out


def oracle_match_garment(points: np.ndarray, frame: int, scene: SceneOracle) -> np.ndarray:
    """Exact garment coordinate of every point lying on the visible worn patch."""
    g = np.full((len(points), 2), SENTINEL, dtype=np.int64)
    oy, ox = scene.garment_origin
    for m, (r, c) in enumerate(points):
        if r < 0 or scene.occluded(frame, r, c):
            continue
        tex = scene.texel_at(frame, int(r), int(c))
        if tex is not None:
            g[m] = (tex[0] + oy, tex[1] + ox)
    return g


def oracle_track_points(points: np.ndarray, frame: int, scene: SceneOracle
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Trajectories of anchor-frame points through every frame of the scene.

    A point is invalid in frames where its texel is not rendered or is
    covered by the occluder.
    """
    T, K = scene.num_frames, len(points)
    coords = np.full((T, K, 2), SENTINEL, dtype=np.int64)
    valid = np.zeros((T, K), dtype=bool)
    for m, (r, c) in enumerate(points):
        if r < 0:
            continue
        tex = scene.texel_at(frame, int(r), int(c))
        if tex is None:
            continue
        for j in range(T):
            pix = (int(r), int(c)) if j == frame else scene.pixel_of_texel(j, *tex)
            if pix is None or scene.occluded(j, *pix):
                continue
            coords[j, m] = pix
            valid[j, m] = True
    return coords, valid


def align_from_oracle(scene: SceneOracle, tryon_mask: np.ndarray, frame: int,
                      M: int, K: int, seed: int) -> PointAlignment:
    pts = sample_frame_points(tryon_mask, M, K, seed)
    g = oracle_match_garment(pts, frame, scene)
    coords, valid = oracle_track_points(pts, frame, scene)
    keep = np.all(g >= 0, axis=-1)
    valid &= keep[None, :]
    coords[~valid] = SENTINEL
    g[~keep] = SENTINEL
    return PointAlignment(coords, g, valid, anchor=frame)


def perturb_alignment(align: PointAlignment, error_rate: float, seed: int,
                      frame_hw: tuple[int, int], garment_hw: tuple[int, int]) -> PointAlignment:
    """Replace ``ceil(rate * M_valid)`` point pairs with uniform random coordinates.

    A perturbed pair gets a new garment coordinate and a fresh random position
    in each frame where it was valid, so both matcher and tracker fail.
    """
    if not 0.0 <= error_rate <= 1.0:
        raise ValueError("error_rate must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    live = np.flatnonzero(align.garment_valid & align.valid.any(axis=0))
    n = min(len(live), math.ceil(error_rate * len(live) - 1e-9))
    fp, gp, valid = align.frame_points.copy(), align.garment_points.copy(), align.valid.copy()
    if n == 0:
        return PointAlignment(fp, gp, valid, anchor=align.anchor)
    chosen = np.sort(rng.choice(live, size=n, replace=False))
    T = align.num_frames
    for m in chosen:
        gp[m] = (rng.integers(garment_hw[0]), rng.integers(garment_hw[1]))
        rows = rng.integers(frame_hw[0], size=T)
        cols = rng.integers(frame_hw[1], size=T)
        for j in range(T):
            if valid[j, m]:
                fp[j, m] = (rows[j], cols[j])
    return PointAlignment(fp, gp, valid, anchor=align.anchor)


# -- alignment file ---------------------------------------------------------

_LINE = re.compile(r"^frame=(\d+) px=(\S*) pg=(\S*) valid=(\S*)$")


def _fmt_coords(coords: np.ndarray) -> str:
    return ";".join(f"{int(r)},{int(c)}" for r, c in coords)


def format_alignment(align: PointAlignment) -> str:
    lines = []
    pg = _fmt_coords(align.garment_points)
    for t in range(align.num_frames):
        v = ";".join("1" if b else "0" for b in align.valid[t])
        lines.append(f"frame={t} px={_fmt_coords(align.frame_points[t])} pg={pg} valid={v}")
    return "\n".join(lines) + "\n"


class AlignmentParseError(ValueError):
    pass


def _parse_coords(text: str, lineno: int) -> np.ndarray:
    if not text:
        return np.zeros((0, 2), dtype=np.int64)
    out = []
    for item in text.split(";"):
        parts = item.split(",")
        if len(parts) != 2:
            raise AlignmentParseError(f"line {lineno}: bad coordinate {item!r}")
        try:
            out.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise AlignmentParseError(f"line {lineno}: bad coordinate {item!r}") from None
    return np.asarray(out, dtype=np.int64)


def parse_alignment(text: str) -> PointAlignment:
    frames, pgs, valids, pxs = [], [], [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        m = _LINE.match(line)
        if m is None:
            raise AlignmentParseError(f"line {lineno}: malformed record {line!r}")
        frames.append(int(m.group(1)))
        pxs.append(_parse_coords(m.group(2), lineno))
        pgs.append(_parse_coords(m.group(3), lineno))
        flags = m.group(4).split(";") if m.group(4) else []
        if any(f not in ("0", "1") for f in flags):
            raise AlignmentParseError(f"line {lineno}: validity flags must be 0 or 1")
        valids.append(np.array([f == "1" for f in flags], dtype=bool))
        if not len(pxs[-1]) == len(pgs[-1]) == len(valids[-1]):
            raise AlignmentParseError(f"line {lineno}: px, pg and valid lengths differ")
        if len(pxs[-1]) != len(pxs[0]):
            raise AlignmentParseError(f"line {lineno}: point count differs from line 1")
        if not np.array_equal(pgs[-1], pgs[0]):
            raise AlignmentParseError(f"line {lineno}: garment points differ from line 1")
    if not frames:
        raise AlignmentParseError("line 1: no records")
    if frames != list(range(len(frames))):
        raise AlignmentParseError("frame indices must be 0..T-1 in order")
    try:
        return PointAlignment(np.stack(pxs), pgs[0], np.stack(valids))
    except ValueError as exc:
        raise AlignmentParseError(f"line 1: {exc}") from None


def write_alignment(path, align: PointAlignment) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_alignment(align))


def read_alignment(path) -> PointAlignment:
    with open(path, encoding="utf-8") as fh:
        return parse_alignment(fh.read())


# -- soft masks -------------------------------------------------------------

@dataclass
class SoftAlignmentMask:
    """Person masks (T, K, H, W) and garment masks (1, K, Hg, Wg), values in [0, 1]."""

    person: torch.Tensor
    garment: torch.Tensor

    @property
    def person_flat(self) -> torch.Tensor:
        return self.person.flatten(-2)

    @property
    def garment_flat(self) -> torch.Tensor:
        return self.garment.flatten(-2)


@dataclass
class MaskPyramid:
    levels: dict[int, SoftAlignmentMask] = field(default_factory=dict)

    def __getitem__(self, factor: int) -> SoftAlignmentMask:
        return self.levels[factor]

    @property
    def factors(self) -> list[int]:
        return sorted(self.levels)


def rasterize(coords: np.ndarray, valid: np.ndarray, hw: tuple[int, int],
              dtype=torch.float64) -> torch.Tensor:
    """One-hot planes (..., K, H, W) for coords (..., K, 2)."""
    coords = np.asarray(coords)
    valid = np.asarray(valid, dtype=bool)
    h, w = hw
    sel = coords[valid]
    if len(sel) and (np.any(sel < 0) or np.any(sel[:, 0] >= h) or np.any(sel[:, 1] >= w)):
        raise ValueError("valid point outside image bounds")
    out = np.zeros(valid.shape + (h, w))
    idx = np.nonzero(valid)
    out[idx + (coords[valid][:, 0], coords[valid][:, 1])] = 1.0
    return torch.as_tensor(out, dtype=dtype)


def build_soft_masks(align: PointAlignment, frame_hw: tuple[int, int],
                     garment_hw: tuple[int, int], kernel: torch.Tensor | None = None,
                     dtype=torch.float64) -> SoftAlignmentMask:
    kernel = softening_kernel(dtype=dtype) if kernel is None else kernel
    person = rasterize(align.frame_points, align.valid, frame_hw, dtype)
    garment = rasterize(align.garment_points[None], align.garment_valid[None], garment_hw, dtype)
    return SoftAlignmentMask(depthwise_conv2d(person, kernel), depthwise_conv2d(garment, kernel))


def build_pyramid(mask: SoftAlignmentMask, factors: Iterable[int]) -> MaskPyramid:
    return MaskPyramid({f: SoftAlignmentMask(maxpool2d(mask.person, f), maxpool2d(mask.garment, f))
                        for f in factors})


def zero_pyramid(num_frames: int, K: int, frame_hw, garment_hw, factors,
                 dtype=torch.float64) -> MaskPyramid:
    empty = PointAlignment.empty(num_frames, K)
    return build_pyramid(build_soft_masks(empty, frame_hw, garment_hw, dtype=dtype), factors)
