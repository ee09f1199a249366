import numpy as np
import pytest

from lightdet.bifpn import DSSBottleneck, DSSC3, DSSConv, LightBiFpn, bifpn_fuse
from lightdet.gam import GAM
from lightdet.tensor import Tensor, grad_check

from helpers import cast_f64


class TestDSSConv:
    def test_shapes_and_stride(self, rng):
        m = DSSConv(16, 32, 3, 2, rng=rng)
        y = m(Tensor(rng.standard_normal((2, 16, 8, 8)).astype(np.float32)))
        assert y.shape == (2, 32, 4, 4)
        assert m.out_hw((8, 8)) == (4, 4)

    def test_param_count(self, rng):
        m = DSSConv(16, 32, rng=rng)
        assert m.param_count() == (16 * 9 + 32) + (16 * 32 + 64)

    def test_odd_output_rejected(self, rng):
        with pytest.raises(ValueError):
            DSSConv(16, 15, rng=rng)

    def test_depthwise_stage_touches_channels_independently(self, rng):
        # before the pointwise mix, channel c of dw depends only on channel c of x
        m = DSSConv(4, 8, rng=rng)
        a = rng.standard_normal((1, 4, 6, 6)).astype(np.float32)
        b = a.copy()
        b[0, 3] += rng.standard_normal((6, 6)).astype(np.float32)
        ya = m.dw(Tensor(a)).numpy()
        yb = m.dw(Tensor(b)).numpy()
        assert np.array_equal(ya[0, :3], yb[0, :3])
        assert not np.allclose(ya[0, 3], yb[0, 3])

    def test_gradcheck(self, rng):
        m = cast_f64(DSSConv(4, 4, rng=rng))
        x = Tensor(rng.standard_normal((1, 4, 4, 4)))

        def f(t):
            return m(t).sum()

        err, _ = grad_check(f, [x])
        assert err <= 1e-4


class TestDSSC3:
    def test_bottleneck_residual_rule(self, rng):
        assert DSSBottleneck(8, 8, rng=rng).add
        assert not DSSBottleneck(8, 16, rng=rng).add
        assert not DSSBottleneck(8, 8, shortcut=False, rng=rng).add

    def test_reference_param_counts(self, rng):
        plain = DSSC3(160, 32, n=1, shortcut=False, rng=rng)
        assert plain.param_count() == 7024
        gated = DSSC3(160, 32, n=1, shortcut=False,
                      attentions=[GAM(16, hidden=4, rng=rng)], rng=rng)
        assert gated.param_count() == 13468

    def test_attention_slot_count_checked(self, rng):
        with pytest.raises(ValueError):
            DSSC3(16, 16, n=2, attentions=[None], rng=rng)

    def test_forward_shape(self, rng):
        m = DSSC3(24, 16, n=2, rng=rng)
        y = m(Tensor(rng.standard_normal((1, 24, 6, 6)).astype(np.float32)))
        assert y.shape == (1, 16, 6, 6)

    def test_gradcheck(self, rng):
        m = cast_f64(DSSC3(4, 4, n=1, rng=rng))
        x = Tensor(rng.standard_normal((1, 4, 4, 4)))

        def f(t):
            return m(t).mean()

        err, _ = grad_check(f, [x])
        assert err <= 1e-4


def tiny_neck(rng, **kw):
    return LightBiFpn(c3=8, c4=16, c5=32, mid=4, out3=8, out4=16, out5=32,
                      rng=rng, **kw)


class TestLightBiFpn:
    def test_level_shapes(self, rng):
        neck = tiny_neck(rng)
        p3 = Tensor(rng.standard_normal((1, 8, 8, 8)).astype(np.float32))
        p4 = Tensor(rng.standard_normal((1, 16, 4, 4)).astype(np.float32))
        p5 = Tensor(rng.standard_normal((1, 32, 2, 2)).astype(np.float32))
        n3, n4, n5 = bifpn_fuse(neck, [p3, p4, p5])
        assert n3.shape == (1, 8, 8, 8)
        assert n4.shape == (1, 16, 4, 4)
        assert n5.shape == (1, 32, 2, 2)

    def test_exactly_three_levels(self, rng):
        neck = tiny_neck(rng)
        two = [Tensor(np.zeros((1, 8, 8, 8), np.float32)),
               Tensor(np.zeros((1, 16, 4, 4), np.float32))]
        with pytest.raises(ValueError):
            bifpn_fuse(neck, two)

    def test_resolution_ratio_checked(self, rng):
        neck = tiny_neck(rng)
        bad = [Tensor(np.zeros((1, 8, 8, 8), np.float32)),
               Tensor(np.zeros((1, 16, 4, 4), np.float32)),
               Tensor(np.zeros((1, 32, 3, 3), np.float32))]
        with pytest.raises(ValueError):
            bifpn_fuse(neck, bad)

    def test_no_learned_fusion_scalars(self, rng):
        neck = tiny_neck(rng)
        for name, p in neck.named_parameters():
            assert p.size > 1, f"suspicious scalar parameter {name}"
            assert name.rsplit(".", 1)[-1] in ("weight", "bias")

    def test_middle_input_feeds_middle_output_directly(self, rng):
        # the extra bidirectional edge: P4 must reach out4's concat untouched
        neck = tiny_neck(rng)
        p3 = Tensor(rng.standard_normal((1, 8, 8, 8)).astype(np.float32))
        p4a = Tensor(rng.standard_normal((1, 16, 4, 4)).astype(np.float32))
        p5 = Tensor(rng.standard_normal((1, 32, 2, 2)).astype(np.float32))
        # zero every parameter that could carry P4 through the top-down path:
        # kill lat5+td4 so td is constant wrt p4, then check n4 still reacts
        for _, p in neck.lat5.named_parameters():
            p.data = np.zeros_like(p.data)
        for _, p in neck.td4.named_parameters():
            p.data = np.zeros_like(p.data)
        p4b = Tensor(p4a.numpy() + rng.standard_normal((1, 16, 4, 4)).astype(np.float32))
        _, n4a, _ = neck(p3, p4a, p5)
        _, n4b, _ = neck(p3, p4b, p5)
        assert not np.allclose(n4a.numpy(), n4b.numpy())

    def test_full_width_param_total_with_gates(self, rng):
        neck = LightBiFpn(c3=64, c4=128, c5=256, mid=32, out3=64, out4=128, out5=256,
                          attn_td=GAM(16, hidden=4, rng=rng),
                          attn_out4=GAM(64, hidden=4, rng=rng), rng=rng)
        assert neck.param_count() == 280392

    def test_cost_rows_cover_all_params(self, rng):
        neck = tiny_neck(rng)
        rows = neck.cost_rows((8, 8))
        assert sum(r[1] for r in rows) == neck.param_count()
        assert all(r[2] >= 0 for r in rows)

    def test_gradcheck(self, rng):
        neck = cast_f64(tiny_neck(rng))
        p3 = Tensor(rng.standard_normal((1, 8, 8, 8)))
        p4 = Tensor(rng.standard_normal((1, 16, 4, 4)))
        p5 = Tensor(rng.standard_normal((1, 32, 2, 2)))

        def f(a, b, c):
            n3, n4, n5 = neck(a, b, c)
            return n3.mean() + n4.mean() + n5.mean()

        err, _ = grad_check(f, [p3, p4, p5])
        assert err <= 1e-4
