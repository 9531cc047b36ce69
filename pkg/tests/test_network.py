import numpy as np
import pytest

from mobileie.network import (
    FSTParams,
    HDPAParams,
    MobileIENet,
    ModelConfig,
    audit_formula,
    fst_forward,
    fuse_network,
    hdpa_forward,
    param_count,
)
from mobileie.reparam import ConvBranch, FusedConv, MBRConvTrain, StateError
from mobileie.tensor import ShapeError

from oracles import central_diff, sigmoid_scalar


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def warmed(cfg, seed=0, dtype=np.float32, size=16):
    net = MobileIENet.init(cfg, seed=seed, dtype=dtype)
    x = np.random.default_rng(seed).random((2, cfg.in_channels, size, size)).astype(dtype)
    net.forward(x, "train")
    return net


def hand_count(C, c_in, c_out):
    """Fused parameters tallied layer by layer."""
    layers = [(5, c_in, C), (3, C, C), (3, C, C), (1, C, C), (1, C, C), (3, C, c_out)]
    convs = sum(k * k * i * o + o for k, i, o in layers)
    return convs + C + 2 * (1 + C)


class TestFST:
    def test_zero_in_gives_bias(self):
        p = FSTParams(np.ones(1), np.array([0.5, -1.0]))
        out = fst_forward(p, np.zeros((1, 2, 3, 3)))
        assert np.all(out[0, 0] == 0.5) and np.all(out[0, 1] == -1.0)

    def test_square(self):
        p = FSTParams.init(1, np.float64)
        assert fst_forward(p, np.full((1, 1, 1, 1), 3.0))[0, 0, 0, 0] == 9.0

    def test_even_function(self, rng):
        p = FSTParams(np.array([0.7]), rng.standard_normal(3))
        x = rng.standard_normal((2, 3, 4, 4))
        np.testing.assert_array_equal(fst_forward(p, x), fst_forward(p, -x))

    def test_bias_length(self, rng):
        with pytest.raises(ShapeError):
            fst_forward(FSTParams.init(2), rng.random((1, 3, 2, 2)))


def fused_1x1(w, b):
    return FusedConv(np.asarray(w, float).reshape(len(b), -1, 1, 1), np.asarray(b, float))


class TestHDPA:
    def test_zero_attention_halves_twice(self, rng):
        c = 3
        p = HDPAParams(fused_1x1(np.zeros((c, c)), np.zeros(c)), fused_1x1(np.zeros((c, c)), np.zeros(c)))
        f = rng.standard_normal((2, c, 5, 5))
        np.testing.assert_allclose(hdpa_forward(p, f), 0.25 * f, atol=1e-12)

    def test_saturated_gates_pass_through(self, rng):
        c = 2
        p = HDPAParams(fused_1x1(np.zeros((c, c)), np.full(c, 50.0)), fused_1x1(np.zeros((c, c)), np.full(c, 50.0)))
        f = rng.standard_normal((1, c, 4, 4))
        np.testing.assert_allclose(hdpa_forward(p, f), f, atol=1e-12)

    def test_matches_scalar_reference(self, rng):
        c = 3
        wg, bg = rng.standard_normal((c, c)), rng.standard_normal(c)
        wl, bl = rng.standard_normal((c, c)), rng.standard_normal(c)
        p = HDPAParams(fused_1x1(wg, bg), fused_1x1(wl, bl))
        f = rng.standard_normal((1, c, 3, 4))
        avg = [f[0, ch].sum() / 12 for ch in range(c)]
        ag = [sigmoid_scalar(sum(wg[o, q] * avg[q] for q in range(c)) + bg[o]) for o in range(c)]
        mx = [max(f[0, ch, i, j] * ag[ch] for i in range(3) for j in range(4)) for ch in range(c)]
        al = [sigmoid_scalar(sum(wl[o, q] * mx[q] for q in range(c)) + bl[o]) for o in range(c)]
        out = hdpa_forward(p, f)
        for ch in range(c):
            np.testing.assert_allclose(out[0, ch], ag[ch] * al[ch] * f[0, ch], atol=1e-12)

    def test_magnitude_never_grows(self, rng):
        net = warmed(ModelConfig(8))
        for _ in range(5):
            f = rng.standard_normal((2, 8, 6, 6)).astype(np.float32) * 10
            assert np.all(np.abs(hdpa_forward(net.hdpa, f)) <= np.abs(f))

    def test_channel_mismatch(self, rng):
        p = HDPAParams(fused_1x1(np.zeros((2, 2)), np.zeros(2)), fused_1x1(np.zeros((2, 2)), np.zeros(2)))
        with pytest.raises(ShapeError):
            hdpa_forward(p, rng.random((1, 3, 4, 4)))


class TestNetworkShapes:
    @pytest.mark.parametrize("variant", ["LLE", "UIE"])
    def test_enhancement_shape(self, rng, variant):
        net = warmed(ModelConfig(12, variant))
        y = net.forward(rng.random((2, 3, 40, 24)).astype(np.float32))
        assert y.shape == (2, 3, 40, 24)
        assert y.dtype == np.float32
        assert y.min() >= 0 and y.max() <= 1

    def test_isp_shape(self, rng):
        net = warmed(ModelConfig(12, "ISP"))
        y = net.forward(rng.random((1, 4, 128, 128)).astype(np.float32))
        assert y.shape == (1, 3, 256, 256)

    def test_wrong_input_channels(self, rng):
        net = warmed(ModelConfig(4, "ISP"))
        with pytest.raises(ShapeError):
            net.forward(rng.random((1, 3, 8, 8)))

    def test_bad_config(self):
        with pytest.raises(ValueError):
            ModelConfig(12, "SR")
        with pytest.raises(ValueError):
            ModelConfig(0)

    def test_seed_determinism(self):
        a = MobileIENet.init(ModelConfig(6), seed=3).state_dict()
        b = MobileIENet.init(ModelConfig(6), seed=3).state_dict()
        c = MobileIENet.init(ModelConfig(6), seed=4).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert any(not np.array_equal(a[k], c[k]) for k in a)


class TestFusion:
    @pytest.mark.parametrize("variant", ["LLE", "ISP"])
    def test_fused_network_matches(self, rng, variant):
        net = warmed(ModelConfig(12, variant), dtype=np.float64)
        fused = fuse_network(net)
        x = rng.random((3, net.config.in_channels, 20, 20))
        assert np.abs(net.forward(x) - fused.forward(x)).max() <= 1e-6

    def test_double_fuse(self):
        fused = fuse_network(warmed(ModelConfig(4)))
        with pytest.raises(StateError):
            fuse_network(fused)

    def test_fused_has_no_train_mode(self, rng):
        fused = fuse_network(warmed(ModelConfig(4)))
        with pytest.raises(StateError):
            fused.forward(rng.random((1, 3, 4, 4)), "train")
        with pytest.raises(StateError):
            fused.iwo_freeze()

    def test_fusing_does_not_mutate_source(self, rng):
        net = warmed(ModelConfig(4), dtype=np.float64)
        before = {k: v.copy() for k, v in net.state_dict().items()}
        fuse_network(net)
        after = net.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_freeze_then_fuse_equivalent(self, rng):
        net = warmed(ModelConfig(6), dtype=np.float64)
        x = rng.random((2, 3, 12, 12))
        ref = net.forward(x)
        net.iwo_freeze()
        np.testing.assert_array_equal(net.forward(x), ref)
        assert np.abs(fuse_network(net).forward(x) - ref).max() <= 1e-6


class TestAudit:
    @pytest.mark.parametrize("C", [1, 4, 8, 12])
    @pytest.mark.parametrize("variant,c_in,c_out", [("LLE", 3, 3), ("ISP", 4, 12)])
    def test_fused_count_matches_closed_form(self, C, variant, c_in, c_out):
        fused = fuse_network(warmed(ModelConfig(C, variant), size=8))
        total = param_count(fused)["total"]
        assert total == audit_formula(C, variant) == hand_count(C, c_in, c_out)

    def test_reference_configuration(self):
        assert audit_formula(12) == 4205
        assert audit_formula(12) == 20 * 144 + 110 * 12 + 5

    def test_train_form_larger(self):
        net = warmed(ModelConfig(12))
        assert param_count(net)["total"] > param_count(fuse_network(net))["total"]

    def test_freeze_adds_frozen_prior(self):
        net = warmed(ModelConfig(4))
        before = param_count(net)["total"]
        net.iwo_freeze()
        added = sum(layer.w_pre.size for layer in net.mbr_layers().values())
        assert param_count(net)["total"] == before + added


class TestBackward:
    def test_gradient_check(self, rng):
        cfg = ModelConfig(3, "ISP")
        net = MobileIENet.init(cfg, seed=5, dtype=np.float64)
        net.iwo_freeze()  # exercise w_pre in the graph
        x = rng.random((2, 4, 5, 5))
        t = rng.random((2, 3, 10, 10))

        def loss():
            return float(((net.forward(x, "train") - t) ** 2).sum() / 2)

        out = net.forward(x, "train")
        grads = net.backward(out - t)
        params = net.parameters()
        assert set(grads) == set(params)
        for name in ["stem.branch2.kernel", "stem.branch0.bn.gamma", "body1.w_learn", "fst0.scale",
                     "fst1.bias", "prelu.slope", "hdpa.attn_g.b_out", "hdpa.attn_l.branch0.kernel",
                     "head.branch1.bias"]:
            arr = params[name]
            for idx in np.random.default_rng(0).choice(arr.size, min(3, arr.size), replace=False):
                num = central_diff(loss, arr, idx, 1e-6)
                assert grads[name].flat[idx] == pytest.approx(num, rel=1e-4, abs=1e-7), name

    def test_backward_requires_cache(self):
        net = MobileIENet.init(ModelConfig(3))
        with pytest.raises(StateError):
            net.backward(np.zeros((1, 3, 4, 4)))


def test_branch_menu_in_network():
    net = MobileIENet.init(ModelConfig(4))
    sizes = {name: [br.kernel.shape[-1] for br in layer.branches] for name, layer in net.mbr_layers().items()}
    assert sizes["stem"] == [1, 3, 5]
    assert sizes["body0"] == sizes["head"] == [1, 3]
    assert sizes["hdpa.attn_g"] == [1]
    assert all(isinstance(layer, MBRConvTrain) for layer in net.mbr_layers().values())
    assert isinstance(net.stem.branches[0], ConvBranch)
