import numpy as np
import pytest

from diracnet import autograd as ag
from diracnet import nn
from diracnet.dirac import BatchNormStats, build_dirac_delta
from diracnet.nn import NetworkSpec, SpecError


def spec(n=1, k=1, variant="dirac", **kw):
    return NetworkSpec(n, k, variant=variant, **kw)


class TestBuilders:
    def test_diracnet_10_1_shapes(self, rng):
        net = nn.build_diracnet(spec())
        assert net.conv_count() == 7
        assert len(net.dirac_layers()) == 3
        out = net(rng.standard_normal((2, 3, 32, 32)).astype(np.float32))
        assert out.shape == (2, 10)

    def test_group_structure(self):
        net = nn.build_diracnet(spec(2, 2))
        convs = [l for l in net.layers if l.kind in ("conv2d", "dirac_conv2d")]
        assert [(c.in_channels, c.out_channels) for c in convs[:2]] == [(3, 16), (16, 32)]
        assert [c.kind for c in convs[1:5]] == ["conv2d"] + ["dirac_conv2d"] * 3
        assert convs[-1].out_channels == 128
        assert sum(l.kind == "max_pool2" for l in net.layers) == 2
        assert [l.group for _, l in net.dirac_layers()] == [0] * 3 + [1] * 3 + [2] * 3

    def test_conv_bn_relu_order(self):
        kinds = [l.kind for l in nn.build_diracnet(spec()).layers]
        for i, k in enumerate(kinds):
            if k in ("conv2d", "dirac_conv2d"):
                assert kinds[i + 1:i + 3] == ["batchnorm2d", "relu"]

    def test_diracnet_28_10_parameter_count(self):
        count = nn.build_diracnet(spec(4, 10)).parameter_count()
        assert abs(count - 36.5e6) / 36.5e6 <= 0.02

    @pytest.mark.parametrize("n,k", [(1, 1), (2, 2), (3, 1)])
    def test_plain_count_relation(self, n, k):
        d = nn.build_diracnet(spec(n, k))
        p = nn.build_plainnet(spec(n, k, "plain"))
        scalars = sum(2 * l.in_channels for _, l in d.dirac_layers())
        assert d.parameter_count() - p.parameter_count() == scalars

    def test_plain_same_output_shape(self, rng):
        x = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
        d = nn.build_diracnet(spec())(x)
        p = nn.build_plainnet(spec(variant="plain"))(x)
        assert d.shape == p.shape and np.isfinite(p.value).all()
        assert not nn.build_plainnet(spec(variant="plain")).dirac_layers()

    def test_builder_variant_mismatch(self):
        with pytest.raises(SpecError):
            nn.build_diracnet(spec(variant="plain"))
        with pytest.raises(SpecError):
            nn.build_plainnet(spec())

    def test_same_seed_same_weights(self):
        a = nn.build_diracnet(spec(), seed=4).state()
        b = nn.build_diracnet(spec(), seed=4).state()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])


class TestSpec:
    def test_lists_every_problem(self):
        with pytest.raises(SpecError) as info:
            NetworkSpec(0, -1, variant="wide").validate()
        msg = str(info.value)
        assert "blocks_per_group" in msg and "width_factor" in msg and "variant" in msg

    def test_negative_sigma(self):
        with pytest.raises(SpecError, match="init_sigma"):
            NetworkSpec(variant="resnet_dirac_init", init_sigma=-1.0).validate()

    def test_depth_and_widths(self):
        s = NetworkSpec(4, 10)
        assert s.depth == 28 and s.widths == (160, 320, 640)

    def test_dict_round_trip(self):
        s = NetworkSpec(2, 3, 7, variant="plain")
        assert NetworkSpec.from_dict(s.to_dict()) == s


class TestParameterGroups:
    @pytest.mark.parametrize("variant", ["dirac", "plain", "resnet_dirac_init"])
    def test_undecayed_set(self, variant):
        net = nn.build_network(spec(variant=variant))
        for name, v, group in net.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            expected = "undecayed" if leaf in ("a", "b", "gamma", "beta", "bias") else "decayed"
            assert group == expected, name
            if group == "undecayed":
                assert v.ndim == 1

    def test_dirac_names(self):
        names = {n.rsplit(".", 1)[-1] for n, _, _ in nn.build_diracnet(spec()).named_parameters()}
        assert {"W", "a", "b"} <= names


class TestChaining:
    def test_mismatch_rejected(self):
        layers = [nn.Conv2d(3, 8), nn.BatchNorm2d(4)]
        with pytest.raises(SpecError, match="layer 1"):
            nn.Network(layers, spec())

    def test_spatial_divisibility(self):
        net = nn.build_diracnet(spec())
        with pytest.raises(ValueError, match="divisible by 4"):
            net(np.zeros((2, 3, 30, 32), np.float32))


class TestActivationStability:
    @pytest.mark.parametrize("n", [1, 4, 16])
    def test_std_ratio_bounded(self, rng, n):
        net = nn.build_diracnet(spec(n))
        x = ag.Variable(rng.standard_normal((4, 3, 32, 32)).astype(np.float32))
        stds = []
        with ag.no_grad():
            h = x
            for layer in net.layers:
                h = layer(h, training=True)
                if layer.kind == "relu":
                    stds.append(float(h.value.std()))
        # first ReLU follows conv1; the next is group 1's first layer.
        ratio = stds[-1] / stds[1]
        assert 0.1 <= ratio <= 10, ratio

    def test_b_zero_dirac_layers_are_identity(self, rng):
        net = nn.build_diracnet(spec()).eval()
        for _, layer in net.dirac_layers():
            layer.params.b.value[:] = 0
            x = rng.standard_normal((2, layer.in_channels, 8, 8)).astype(np.float32)
            np.testing.assert_array_equal(layer(x).value, x)
        x = rng.standard_normal((1, 3, 32, 32)).astype(np.float32)
        both = net(np.concatenate([x, x])).value
        np.testing.assert_array_equal(both[0], both[1])


class TestForward:
    def test_eval_determinism(self, rng):
        net = nn.build_diracnet(spec()).eval()
        x = rng.standard_normal((3, 3, 32, 32)).astype(np.float32)
        np.testing.assert_array_equal(net(x).value, net(x).value)

    def test_batch_of_one_matches_batched(self, rng):
        net = nn.build_diracnet(spec(), seed=2)
        net(rng.standard_normal((8, 3, 32, 32)).astype(np.float32))  # move running stats
        net.eval()
        x = rng.standard_normal((5, 3, 32, 32)).astype(np.float32)
        batched = net(x).value
        single = np.concatenate([net(x[i:i + 1]).value for i in range(5)])
        assert np.abs(batched - single).max() <= 1e-5

    def test_train_mode_updates_running_stats(self, rng):
        net = nn.build_diracnet(spec())
        bn = next(l for l in net.layers if l.kind == "batchnorm2d")
        before = bn.stats.running_mean.copy()
        net(rng.standard_normal((2, 3, 32, 32)).astype(np.float32))
        assert not np.array_equal(before, bn.stats.running_mean)

    def test_forward_function(self, rng):
        net = nn.build_diracnet(spec()).eval()
        x = rng.standard_normal((2, 3, 32, 32)).astype(np.float32)
        np.testing.assert_array_equal(nn.forward(net, x).value, net(x).value)


class TestBatchNorm:
    def test_eval_identity(self, rng):
        x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        out = nn.batchnorm_forward(x, BatchNormStats.init(3), "eval")
        assert np.abs(out.value - x).max() <= 1e-4  # eps=1e-5 shrinks by ~5e-6

    def test_train_normalizes(self, rng):
        x = rng.normal(3.0, 2.0, (8, 3, 5, 5))
        out = nn.batchnorm_forward(x, BatchNormStats.init(3, np.float64), "train").value
        assert np.abs(out.mean(axis=(0, 2, 3))).max() <= 1e-4
        assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() <= 1e-4

    def test_running_stats_converge(self, rng):
        x = rng.normal(1.5, 0.5, (4, 2, 3, 3))
        bn = BatchNormStats.init(2, np.float64)
        for _ in range(200):
            nn.batchnorm_forward(x, bn, "train")
        n = x.shape[0] * x.shape[2] * x.shape[3]
        np.testing.assert_allclose(bn.running_mean, x.mean(axis=(0, 2, 3)), atol=1e-6)
        np.testing.assert_allclose(bn.running_var, x.var(axis=(0, 2, 3)) * n / (n - 1), atol=1e-6)

    def test_batch_of_one_in_train(self):
        with pytest.raises(ValueError, match="at least 2"):
            nn.batchnorm_forward(np.zeros((1, 2, 3, 3)), BatchNormStats.init(2), "train")

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            nn.batchnorm_forward(np.zeros((2, 2, 3, 3)), BatchNormStats.init(2), "test")


class TestResnetDiracInit:
    def test_sigma_zero_is_delta(self):
        net = nn.build_resnet_dirac_init(spec(1, 1, "resnet_dirac_init", init_sigma=0.0))
        blocks = [l for l in net.layers if l.kind == "residual_block"]
        assert len(blocks) == 3
        for block in blocks:
            w = block.conv2.weight.value
            np.testing.assert_array_equal(w, build_dirac_delta(w.shape[0], 3))

    def test_zero_init(self, rng):
        net = nn.build_resnet_dirac_init(spec(1, 1, "resnet_dirac_init", identity_init=False))
        assert all(not v.value.any() for n, v, g in net.named_parameters() if g == "decayed")
        out = net(rng.standard_normal((2, 3, 32, 32)).astype(np.float32)).value
        np.testing.assert_array_equal(out, 0)

    def test_projection_when_width_changes(self):
        net = nn.build_resnet_dirac_init(spec(2, 2, "resnet_dirac_init"))
        blocks = [l for l in net.layers if l.kind == "residual_block"]
        assert [b.proj is not None for b in blocks] == [True, False, True, False, True, False]

    def test_small_sigma_close_to_delta(self, rng):
        net = nn.build_resnet_dirac_init(spec(1, 1, "resnet_dirac_init", init_sigma=1e-8))
        conv = net.layers[0]
        delta = build_dirac_delta(3, 3, out_channels=16)
        assert np.abs(conv.weight.value - delta).max() < 1e-6
