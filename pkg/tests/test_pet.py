import numpy as np
import pytest
import torch

from pointvto.numerics import finite_diff_check
from pointvto.pet import (AdaLN, PointFeatures, PointSpatialAttention, PointTemporalAttention,
                          gather_point_features, point_attention_bias, point_validity,
                          psa_forward, pta_forward, scatter_point_features)
from refs import (ffn_params, np64, pet_block_instance, psa_instance, pta_instance, ref_bias,
                  ref_gather, ref_psa, ref_pta_update, ref_scatter)

D = torch.float64


class TestGatherScatter:
    @pytest.mark.parametrize("seed", range(5))
    def test_loop_reference(self, seed):
        rng = np.random.default_rng(seed)
        F = rng.normal(size=(7, 3))
        mask = rng.random((4, 7)) * (rng.random((4, 7)) < 0.5)
        mask[1] = 0
        np.testing.assert_allclose(gather_point_features(torch.as_tensor(F), torch.as_tensor(mask)).numpy(),
                                   ref_gather(F, mask), atol=1e-12)
        U = rng.normal(size=(4, 3))
        np.testing.assert_allclose(scatter_point_features(torch.as_tensor(U), torch.as_tensor(mask)).numpy(),
                                   ref_scatter(U, mask), atol=1e-12)

    def test_adjoint(self):
        rng = np.random.default_rng(1)
        F, U = torch.as_tensor(rng.normal(size=(6, 2))), torch.as_tensor(rng.normal(size=(3, 2)))
        mask = torch.as_tensor(rng.random((3, 6)))
        lhs = (gather_point_features(F, mask) * U).sum()
        rhs = (F * scatter_point_features(U, mask)).sum()
        assert abs(lhs - rhs) < 1e-12

    def test_single_pixel_point(self):
        F = torch.arange(12, dtype=D).reshape(4, 3)
        mask = torch.zeros(1, 4, dtype=D)
        mask[0, 2] = 1
        assert torch.equal(gather_point_features(F, mask)[0], F[2])

    def test_padding_rows(self):
        mask = torch.zeros(2, 5, dtype=D)
        mask[0, 1] = 0.5
        assert point_validity(mask).tolist() == [True, False]
        assert torch.all(gather_point_features(torch.ones(5, 2, dtype=D), mask)[1] == 0)


class TestBias:
    def test_loop_reference(self):
        rng = np.random.default_rng(0)
        mod = PointSpatialAttention(4).double()
        Kx, Vg = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        f_t, mask = rng.normal(size=4), rng.random((3, 6))
        got = point_attention_bias(*(torch.as_tensor(v) for v in (Kx, Vg, f_t, mask)), mod.bias_ffn)
        np.testing.assert_allclose(got.detach().numpy(), ref_bias(Kx, Vg, f_t, mask, ffn_params(mod.bias_ffn)),
                                   atol=1e-12)

    def test_zero_mask_zero_bias(self):
        mod = PointSpatialAttention(4).double()
        z = torch.zeros(2, 4, dtype=D)
        out = point_attention_bias(torch.randn(2, 4, dtype=D), torch.randn(2, 4, dtype=D),
                                   torch.randn(4, dtype=D), torch.zeros(2, 5, dtype=D), mod.bias_ffn)
        assert torch.all(out == 0)
        with pytest.raises(ValueError):
            point_attention_bias(z, torch.zeros(3, 4, dtype=D), torch.zeros(4, dtype=D), torch.zeros(2, 5, dtype=D),
                                 mod.bias_ffn)


class TestPSA:
    @pytest.mark.parametrize("seed", range(8))
    def test_loop_reference(self, seed):
        mod, *args = psa_instance(np.random.default_rng(seed))
        got = psa_forward(mod, *args).detach().numpy()
        np.testing.assert_allclose(got, ref_psa(mod, *args), atol=1e-9)

    @pytest.mark.parametrize("flags", [(False, True), (True, False), (False, False)])
    def test_ablation_variants(self, flags):
        mod, *args = psa_instance(np.random.default_rng(3))
        mod.use_bias, mod.use_mask_gate = flags
        np.testing.assert_allclose(mod(*args).detach().numpy(), ref_psa(mod, *args), atol=1e-9)

    def test_identity_with_zero_gates(self):
        mod, Fx, Fg, mx, mg, f_t = psa_instance(np.random.default_rng(4))
        mod.adaln.zero_gates()
        assert torch.equal(mod(Fx, Fg, mx, mg, f_t), Fx)

    def test_identity_without_points(self):
        mod, Fx, Fg, mx, mg, f_t = psa_instance(np.random.default_rng(5))
        assert torch.equal(mod(Fx, Fg, torch.zeros_like(mx), mg, f_t), Fx)

    def test_single_valid_point_takes_all_attention(self):
        mod, Fx, Fg, mx, mg, f_t = psa_instance(np.random.default_rng(6), N=6, M=3)
        mx = mx.clone()
        mx[1:] = 0
        mx[0, 0] = 1.0
        mod.use_mask_gate = False
        expect = ref_psa(mod, Fx, Fg, mx, mg, f_t)
        np.testing.assert_allclose(mod(Fx, Fg, mx, mg, f_t).detach().numpy(), expect, atol=1e-9)


class TestPTA:
    @pytest.mark.parametrize("seed", range(8))
    @pytest.mark.parametrize("garment_token", [True, False])
    def test_loop_reference(self, seed, garment_token):
        mod, Zp, G, valid, gvalid = pta_instance(np.random.default_rng(seed), garment_token=garment_token)
        out = pta_forward(mod, PointFeatures(Zp, G, valid, gvalid))
        np.testing.assert_allclose(out.person.detach().numpy(),
                                   np64(Zp) + ref_pta_update(mod, Zp, G, valid, gvalid), atol=1e-9)

    def test_zero_output_projection_is_identity(self):
        C = 4
        mod = PointTemporalAttention(C).double()
        Zp = torch.randn(3, 2, C, dtype=D)
        feats = PointFeatures(Zp, torch.randn(2, C, dtype=D), torch.ones(3, 2, dtype=torch.bool))
        assert torch.equal(mod(feats).person, Zp)

    def test_invalid_queries_unchanged(self):
        mod, Zp, G, valid, gvalid = pta_instance(np.random.default_rng(2), T=3, M=2)
        valid = valid.clone()
        valid[1, 0] = False
        upd = mod.update(PointFeatures(Zp, G, valid, gvalid))
        assert torch.all(upd[1, 0] == 0)

    def test_empty_time_axis(self):
        mod = PointTemporalAttention(4).double()
        with pytest.raises(ValueError):
            mod.update(PointFeatures(torch.zeros(0, 2, 4, dtype=D), torch.zeros(2, 4, dtype=D),
                                     torch.zeros(0, 2, dtype=torch.bool)))


class TestAdaLN:
    def test_identity_at_init_zero_regressor(self):
        ada = AdaLN(4, 3).double()
        with torch.no_grad():
            ada.linear.weight.zero_()
        g1, b1, g2, b2, a1, a2 = ada(torch.randn(4, dtype=D))
        assert torch.all(g1 == 1) and torch.all(g2 == 1)
        assert torch.all(b1 == 0) and torch.all(a1 == 0) and torch.all(a2 == 0)

    def test_gates_zero_at_init(self):
        _, _, _, _, a1, a2 = AdaLN(4, 3).double()(torch.randn(2, 4, dtype=D))
        assert torch.all(a1 == 0) and torch.all(a2 == 0)


class TestPETBlock:
    def test_use_pet_false_is_host_only(self):
        block, x, g, mx, mg, f_t = pet_block_instance(np.random.default_rng(0))
        host = block.host(x.reshape(-1, *x.shape[2:]), g.expand(x.shape[1], *g.shape[1:]))
        assert torch.equal(block(x, g, mx, mg, f_t, use_pet=False), host.reshape(x.shape))

    def test_zero_masks_equal_host(self):
        block, x, g, mx, mg, f_t = pet_block_instance(np.random.default_rng(1))
        ref = block(x, g, None, None, f_t, use_pet=True)
        assert torch.equal(block(x, g, torch.zeros_like(mx), torch.zeros_like(mg), f_t), ref)

    def test_frame_loop_matches_batched(self):
        block, x, g, mx, mg, f_t = pet_block_instance(np.random.default_rng(2), B=2, T=3)
        out = block(x, g, mx, mg, f_t)
        # PSA part per frame, then PTA over the stacked frames
        for b in range(2):
            h = block.host(x[b], g[b].expand(3, *g.shape[1:]))
            h = torch.stack([block.psa(h[t], g[b], mx[b, t], mg[b], f_t[b]) for t in range(3)])
            feats = PointFeatures(gather_point_features(h, mx[b]), gather_point_features(g[b], mg[b]),
                                  point_validity(mx[b]), point_validity(mg[b]))
            h = h + scatter_point_features(block.pta.update(feats), mx[b])
            np.testing.assert_allclose(out[b].detach().numpy(), h.detach().numpy(), atol=1e-12)


class TestGradients:
    def test_psa_inputs(self):
        mod, Fx, Fg, mx, mg, f_t = psa_instance(np.random.default_rng(0), N=5, M=3)
        rep = finite_diff_check(lambda a, b, c: mod(a, b, mx, mg, c), [Fx, Fg, f_t])
        assert rep.passed(1e-4), rep

    def test_pta_inputs(self):
        mod, Zp, G, valid, gvalid = pta_instance(np.random.default_rng(1), T=3, M=2)
        rep = finite_diff_check(lambda z, g: mod.update(PointFeatures(z, g, valid, gvalid)), [Zp, G])
        assert rep.passed(1e-4), rep

    def test_bias_inputs(self):
        mod = PointSpatialAttention(3).double()
        rng = np.random.default_rng(2)
        args = [torch.as_tensor(rng.normal(size=s)) for s in ((2, 3), (2, 3), (3,), (2, 4))]
        rep = finite_diff_check(lambda k, v, f, m: point_attention_bias(k, v, f, m, mod.bias_ffn), args)
        assert rep.passed(1e-4), rep
