import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from pointvto.numerics import softening_kernel
from pointvto.points import (AlignmentParseError, PointAlignment, SENTINEL, align_from_oracle,
                             build_pyramid, build_soft_masks, format_alignment,
                             oracle_match_garment, oracle_track_points, parse_alignment,
                             perturb_alignment, read_alignment, sample_frame_points,
                             write_alignment)
from pointvto.scene import gen_synthetic_scene

HW = (32, 32)
GHW = (16, 16)


def random_alignment(rng, T=3, K=6, hw=HW, ghw=GHW):
    gvalid = rng.random(K) < 0.7
    g = np.where(gvalid[:, None], np.stack([rng.integers(ghw[0], size=K), rng.integers(ghw[1], size=K)], 1), -1)
    valid = (rng.random((T, K)) < 0.7) & gvalid[None]
    fp = np.stack([rng.integers(hw[0], size=(T, K)), rng.integers(hw[1], size=(T, K))], -1)
    fp[~valid] = -1
    return PointAlignment(fp, g, valid)


class TestSampling:
    def test_all_ones(self):
        pts = sample_frame_points(np.ones((8, 8)), 4, 16, seed=0)
        chosen = pts[pts[:, 0] >= 0]
        assert len(chosen) == 4
        assert len({tuple(p) for p in chosen}) == 4
        assert np.all((chosen >= 0) & (chosen < 8))

    def test_padding(self):
        m = np.zeros((8, 8))
        m[2, 1:6] = 1
        pts = sample_frame_points(m, 16, 16, seed=1)
        assert (pts[:, 0] >= 0).sum() == 5
        assert np.all(pts[5:] == SENTINEL)

    def test_seeded(self):
        m = np.random.default_rng(0).random((10, 10)) > 0.5
        assert np.array_equal(sample_frame_points(m, 6, 16, 3), sample_frame_points(m, 6, 16, 3))

    def test_empty_mask(self):
        assert np.all(sample_frame_points(np.zeros((4, 4)), 3, 16, 0) == SENTINEL)

    def test_bad_m(self):
        with pytest.raises(ValueError):
            sample_frame_points(np.ones((4, 4)), 17, 16, 0)


class TestOracles:
    def test_translation_identity_placement(self):
        truth, *_ = gen_synthetic_scene(4, "easy", velocity=(0, 0))
        r0 = int(truth.centers[0][0] - truth.patch_size / 2)
        c0 = int(truth.centers[0][1] - truth.patch_size / 2)
        pts = np.array([[r0 + 2, c0 + 3], [0, 0]])
        g = oracle_match_garment(pts, 0, truth)
        oy, ox = truth.garment_origin
        assert tuple(g[0]) == (2 + oy, 3 + ox)
        assert tuple(g[1]) == (SENTINEL, SENTINEL)  # background

    def test_static_track(self):
        truth, *_ = gen_synthetic_scene(4, "easy", velocity=(0, 0))
        on = np.argwhere(truth.visible_mask(0))[:3]
        coords, valid = oracle_track_points(on, 0, truth)
        assert valid.all()
        for t in range(truth.num_frames):
            assert np.array_equal(coords[t], on)

    def test_translation_track(self):
        truth, *_ = gen_synthetic_scene(5, "easy", velocity=(1, -1))
        on = np.argwhere(truth.visible_mask(2))[:4]
        coords, valid = oracle_track_points(on, 2, truth)
        assert valid.all()
        for t in range(truth.num_frames):
            assert np.array_equal(coords[t], on + (t - 2) * np.array([1, -1]))

    def test_occlusion_marks_invalid(self):
        for seed in range(50):
            truth, *_ = gen_synthetic_scene(seed, "hard")
            for t in range(truth.num_frames):
                hidden = np.argwhere(truth.patch_mask(t) & truth.occluder_mask(t))
                if len(hidden) == 0:
                    continue
                r, c = hidden[0]
                tex = truth.texel_at(t, r, c)
                anchor = next(f for f in range(truth.num_frames)
                              if truth.pixel_of_texel(f, *tex) is not None
                              and not truth.occluded(f, *truth.pixel_of_texel(f, *tex)))
                pt = np.array([truth.pixel_of_texel(anchor, *tex)])
                coords, valid = oracle_track_points(pt, anchor, truth)
                if truth.pixel_of_texel(t, *tex) == (r, c):
                    assert not valid[t, 0]
                    assert tuple(coords[t, 0]) == (SENTINEL, SENTINEL)
                    return
        pytest.fail("no occluded texel found")

    @pytest.mark.parametrize("seed", range(6))
    def test_zero_reprojection_error(self, seed):
        truth, *_ = gen_synthetic_scene(seed, "hard" if seed % 2 else "easy")
        anchor = truth.visible_frames()[0]
        al = align_from_oracle(truth, truth.visible_mask(anchor), anchor, 16, 16, seed)
        oy, ox = truth.garment_origin
        for t in range(truth.num_frames):
            for m in range(al.K):
                if al.valid[t, m]:
                    r, c = al.frame_points[t, m]
                    u, v = truth.texel_at(t, r, c)
                    assert (u + oy, v + ox) == tuple(al.garment_points[m])
                    assert not truth.occluded(t, r, c)


class TestPerturb:
    def _align(self, M=16):
        truth, *_ = gen_synthetic_scene(1, "easy", velocity=(0, 0))
        return align_from_oracle(truth, truth.visible_mask(0), 0, M, 16, 0)

    def test_rate_zero(self):
        a = self._align()
        assert perturb_alignment(a, 0.0, 3, HW, GHW) == a

    def test_rate_one(self):
        a = self._align()
        b = perturb_alignment(a, 1.0, 3, HW, GHW)
        changed = np.any(a.garment_points != b.garment_points, axis=-1) | \
            np.any(a.frame_points != b.frame_points, axis=(0, 2))
        assert changed.sum() >= a.M - 1  # a random draw may coincide with the truth
        assert np.array_equal(a.valid, b.valid)

    def test_half_ceiling(self):
        a = self._align()
        assert a.M == 16
        b = perturb_alignment(a, 0.5, 9, HW, GHW)
        touched = np.any(a.garment_points != b.garment_points, axis=-1) | \
            np.any(a.frame_points != b.frame_points, axis=(0, 2))
        assert touched.sum() == 8

    def test_ceiling_counts(self):
        for rate, expect in [(0.2, 4), (0.7, 12), (0.5, 8), (1 / 16, 1)]:
            assert min(16, math.ceil(rate * 16 - 1e-9)) == expect

    def test_deterministic(self):
        a = self._align()
        assert perturb_alignment(a, 0.4, 5, HW, GHW) == perturb_alignment(a, 0.4, 5, HW, GHW)

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            perturb_alignment(self._align(), 1.5, 0, HW, GHW)


class TestSoftMasks:
    def test_single_point(self):
        a = PointAlignment([[[5, 6], [-1, -1]]], [[2, 3], [-1, -1]], [[True, False]])
        sm = build_soft_masks(a, HW, GHW)
        assert sm.person.shape == (1, 2, 32, 32) and sm.garment.shape == (1, 2, 16, 16)
        assert sm.person[0, 0, 5, 6] == 1.0 and sm.person[0, 0].max() == 1.0
        assert sm.garment[0, 0, 2, 3] == 1.0
        assert torch.all(sm.person[0, 1] == 0) and torch.all(sm.garment[0, 1] == 0)

    def test_zero_points(self):
        sm = build_soft_masks(PointAlignment.empty(3, 4), HW, GHW)
        assert torch.all(sm.person == 0) and torch.all(sm.garment == 0)

    def test_kernel_sum_per_channel(self):
        a = PointAlignment([[[5, 6], [20, 20]]], [[2, 3], [10, 10]], [[True, True]])
        sm = build_soft_masks(a, HW, GHW)
        ksum = 1 + 4 * math.exp(-0.5) + 4 * math.exp(-1.0)  # summed 3x3 Gaussian, centre 1
        np.testing.assert_allclose(sm.person.sum(dim=(-1, -2)).numpy(), [[ksum, ksum]])

    def test_out_of_bounds(self):
        a = PointAlignment([[[40, 6]]], [[2, 3]], [[True]])
        with pytest.raises(ValueError):
            build_soft_masks(a, HW, GHW)


class TestPyramid:
    def test_identity_level(self):
        sm = build_soft_masks(random_alignment(np.random.default_rng(0)), HW, GHW)
        pyr = build_pyramid(sm, [1, 2])
        assert torch.equal(pyr[1].person, sm.person)

    def test_floor_division(self):
        a = PointAlignment([[[3, 2]]], [[3, 2]], [[True]])
        sm = build_soft_masks(a, (4, 4), (4, 4), kernel=torch.ones(1, 1, dtype=torch.float64))
        pyr = build_pyramid(sm, [2])
        assert pyr[2].person[0, 0].tolist() == [[0.0, 0.0], [0.0, 1.0]]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_survival_and_zero_padding(self, seed):
        a = random_alignment(np.random.default_rng(seed))
        pyr = build_pyramid(build_soft_masks(a, HW, GHW), [1, 2, 4])
        for f in pyr.factors:
            pm = pyr[f].person.flatten(-2).max(-1).values
            gm = pyr[f].garment.flatten(-2).max(-1).values[0]
            assert torch.all(pm[torch.as_tensor(a.valid)] > 0)
            assert torch.all(pm[~torch.as_tensor(a.valid)] == 0)
            assert torch.all(gm[torch.as_tensor(a.garment_valid)] > 0)


class TestAlignmentFile:
    def test_roundtrip(self, tmp_path):
        a = random_alignment(np.random.default_rng(2), T=4, K=5)
        p = tmp_path / "a.txt"
        write_alignment(p, a)
        b = read_alignment(p)
        assert a == b
        assert format_alignment(b) == p.read_text(encoding="utf-8")

    def test_record_format(self):
        a = PointAlignment([[[1, 2], [-1, -1]]], [[3, 4], [5, 6]], [[True, False]])
        assert format_alignment(a) == "frame=0 px=1,2;-1,-1 pg=3,4;5,6 valid=1;0\n"

    @pytest.mark.parametrize("text,line", [
        ("frame=0 px=1,2 pg=3,4 valid=1\nframe=1 px=1,x pg=3,4 valid=1\n", 2),
        ("frame=0 px=1,2 pg=3,4 valid=2\n", 1),
        ("frame=0 px=1,2 pg=3,4\n", 1),
        ("frame=0 px=1,2 pg=3,4 valid=1\nframe=1 px=1,2;3,3 pg=3,4 valid=1\n", 2),
    ])
    def test_parse_errors_carry_line(self, text, line):
        with pytest.raises(AlignmentParseError, match=f"line {line}"):
            parse_alignment(text)
