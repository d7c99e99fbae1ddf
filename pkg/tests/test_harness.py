import numpy as np
import pytest

from acon import family as F
from acon.harness import layers as L
from acon.harness.data import Dataset, DatasetError, bars, blobs, get_dataset, load_csv, spiral
from acon.harness.models import (
    TFNET_CHANNELS,
    build_convnet,
    build_mini_resnet,
    build_mlp,
    build_model,
    build_tfnet,
    tfnet_block,
)
from acon.harness.network import Network, collect_beta_histogram, count_flops_params
from acon.harness.train import (
    SGD,
    TrainConfig,
    TrainingDiverged,
    batch_order,
    learning_rate,
    softmax_cross_entropy,
    train,
)
from acon.meta import UsageError
from acon.tensor import ConfigError, Shape4, ShapeError
from acon.verify import gradcheck_tensor, weighted_sum


def _net_gradcheck(net, x, seed=0):
    """Gradcheck every parameter and the input of ``net`` (real64)."""
    rng = np.random.default_rng(seed)
    g = rng.normal(size=net.forward(x).shape)
    net.zero_grad()
    net.forward(x)
    gx = net.backward(g)
    reports = [gradcheck_tensor(lambda v: weighted_sum(net.forward(v), g), x, gx, target="input")]
    grads = {k: v.copy() for k, v in net.named_grads().items()}
    for name, p in net.named_parameters().items():
        base = p.copy()

        def loss(v, name=name):
            net.set_parameter(name, v)
            return weighted_sum(net.forward(x), g)

        reports.append(gradcheck_tensor(loss, base, grads[name], target=name))
        net.set_parameter(name, base)
    return reports


class TestLayers:
    @pytest.mark.parametrize("act", L.ACTIVATIONS[1:])
    def test_two_layer_toy_net_gradcheck(self, act):
        rng = np.random.default_rng(3)
        net = Network([L.Dense(3, 4, rng=rng, dtype=np.float64),
                       L.make_activation(act, 4, rng, np.float64, reduction_r=2),
                       L.Dense(4, 2, rng=rng, dtype=np.float64)], (3,), np.float64)
        if act == "acon-c":
            net.set_parameter("1.p1", rng.normal(1, 0.3, 4))
            net.set_parameter("1.p2", rng.normal(0, 0.3, 4))
        for rep in _net_gradcheck(net, rng.normal(size=(5, 3))):
            assert rep.passed, rep

    def test_conv_layers_gradcheck(self):
        rng = np.random.default_rng(4)
        net = Network([
            L.Conv2d(2, 3, 3, stride=2, rng=rng, dtype=np.float64),
            L.ChannelAffine(3, dtype=np.float64),
            L.Acon("B", 3, dtype=np.float64),
            L.Residual([L.PointwiseConv(3, 3, bias=True, rng=rng, dtype=np.float64),
                        L.MetaAcon("pixel", 3, dtype=np.float64),
                        L.DepthwiseConv(3, 3, rng=rng, dtype=np.float64)]),
            L.AconFReLU(3, rng=rng, dtype=np.float64),
            L.GlobalAvgPool(),
            L.Flatten(),
            L.Dense(3, 2, rng=rng, dtype=np.float64),
        ], (2, 6, 6), np.float64)
        for rep in _net_gradcheck(net, rng.normal(size=(2, 2, 6, 6))):
            assert rep.passed, rep

    def test_backward_before_forward(self):
        with pytest.raises(UsageError):
            L.Dense(2, 2).backward(np.ones((1, 2)))

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            L.make_activation("gelu", 4)

    def test_acon_b_initial_p(self):
        assert np.all(L.Acon("B", 3).params["p"] == 0.25)

    def test_decay_exclusions(self):
        assert L.Acon("C", 2).no_decay >= {"p1", "p2", "beta"}
        assert L.MetaAcon("channel", 32).no_decay >= {"p1", "p2", "w1", "w2"}
        assert "beta" in L.AconFReLU(2).no_decay
        assert "weight" not in L.Dense(2, 2).no_decay


class TestNetwork:
    def test_shape_chain_checked(self):
        with pytest.raises(ShapeError):
            Network([L.Dense(3, 4), L.Dense(5, 2)], (3,))

    def test_parameter_names_unique_and_nested(self):
        net = build_mini_resnet((3, 8, 8), 4, width=8, blocks=1)
        names = list(net.named_parameters())
        assert len(names) == len(set(names))
        assert any(n.count(".") == 2 for n in names)

    def test_config_roundtrip(self):
        net = build_mini_resnet((3, 8, 8), 4, width=8)
        again = Network.from_config(net.config())
        assert again.config() == net.config()
        assert again.shapes == net.shapes

    def test_forward_checks_input(self):
        with pytest.raises(ShapeError):
            build_mlp(2, 2).forward(np.zeros((4, 3)))

    def test_set_parameter_checks_shape(self):
        net = build_mlp(2, 2)
        with pytest.raises(ShapeError):
            net.set_parameter("0.weight", np.zeros((1, 1)))
        with pytest.raises(KeyError):
            net.set_parameter("nope", np.zeros(1))


class TestFlops:
    def test_dense(self):
        net = Network([L.Dense(5, 3, bias=False)], (5,))
        assert count_flops_params(net, (7, 5)) == (7 * 3 * 5, 3 * 5)

    def test_pointwise(self):
        net = Network([L.PointwiseConv(4, 6)], (4, 5, 3))
        assert count_flops_params(net, Shape4(2, 4, 5, 3)) == (6 * 4 * 5 * 3 * 2, 24)

    def test_activations_count_zero(self):
        for act in L.ACTIVATIONS:
            layer = L.make_activation(act, 4)
            assert layer.flops((4, 3, 3)) == 0

    def test_additive_over_layers(self):
        net = build_convnet((2, 6, 6), 3, width=4)
        total, _ = count_flops_params(net)
        parts = [layer.flops(s) for layer, s in zip(net.layers, net.shapes)]
        assert total == sum(parts)

    def test_resizing_input(self):
        net = build_tfnet(0.5, (3, 32, 32), 10)
        small, p_small = count_flops_params(net)
        big, p_big = count_flops_params(net, Shape4(1, 3, 64, 64))
        fc = 1024 * 10  # the classifier does not scale with the spatial extent
        assert p_small == p_big and big - fc == 4 * (small - fc)


class TestTFNet:
    @pytest.mark.parametrize("mult,flops,params", [(0.5, 41e6, 1.4e6), (2.0, 474e6, 3.8e6)])
    def test_reference_counts(self, mult, flops, params):
        f, p = count_flops_params(build_tfnet(mult))
        assert abs(f - flops) / flops <= 0.10
        assert abs(p - params) / params <= 0.10

    def test_logits_and_stage_channels(self):
        net = build_tfnet(0.5)
        assert net.output_shape == (1000,)
        chans = sorted({s[0] for s in net.shapes if len(s) == 3})
        assert set(TFNET_CHANNELS[0.5]) <= set(chans)
        assert (1024, 7, 7) in net.shapes

    def test_unsupported_multiplier(self):
        with pytest.raises(ConfigError):
            build_tfnet(0.75)

    def test_extent_divisible_by_32(self):
        with pytest.raises(ConfigError):
            build_tfnet(0.5, (3, 100, 100))

    def test_built_only_from_pw_and_frelu(self):
        net = build_tfnet(1.0)
        body = net.layers[2:-5]
        assert {type(layer) for layer in body} == {L.PointwiseConv, L.AconFReLU}
        assert sum(isinstance(layer, L.AconFReLU) and layer.downsample for layer in body) == 4

    def test_stride2_block_downsamples_second_frelu(self):
        block = tfnet_block(4, 8, 2, np.random.default_rng(0), np.float64)
        frelus = [layer for layer in block if isinstance(layer, L.AconFReLU)]
        assert [f.downsample for f in frelus] == [False, True]

    def test_forward_backward_small_input(self):
        net = build_tfnet(0.5, (3, 32, 32), 10)
        x = np.random.default_rng(0).normal(size=(2, 3, 32, 32)).astype(np.float32)
        y = net.forward(x)
        assert y.shape == (2, 10) and np.all(np.isfinite(y))
        assert net.backward(np.ones_like(y)).shape == x.shape

    @pytest.mark.parametrize("stride", [1, 2])
    def test_block_relu_limit(self, stride):
        rng = np.random.default_rng(5)
        block = tfnet_block(4, 4, stride, rng, np.float64)
        for layer in block:
            if isinstance(layer, L.AconFReLU):
                layer.params["beta"] = np.full(4, 1e3)
        x = rng.uniform(-1, 1, size=(3, 4, 8, 8))
        soft = hard = x
        for layer in block:
            if isinstance(layer, L.AconFReLU):
                ea, eb = F.frelu_branches(hard, layer.params["dw_weight"], layer.downsample)
                clear = np.abs(ea - eb) >= 0.01
                step_soft = layer.forward(hard)
                step_hard = F.frelu(hard, layer.params["dw_weight"], layer.downsample)
                assert np.max(np.abs(step_soft - step_hard)[clear]) <= 1e-3
                soft, hard = layer.forward(soft), step_hard
            else:
                soft, hard = layer.forward(soft), layer.forward(hard)
        assert np.max(np.abs(soft - hard)) <= 1e-3


class TestTrain:
    def _data(self):
        return spiral(n_per_class=50)

    def test_lr_zero_keeps_parameters(self):
        net = build_mlp(2, 2, (8, 8), dtype=np.float64)
        before = {k: v.copy() for k, v in net.named_parameters().items()}
        train(net, self._data(), TrainConfig(lr=0.0, steps=20, batch=16))
        for k, v in net.named_parameters().items():
            np.testing.assert_array_equal(v, before[k])

    def test_deterministic(self):
        curves = []
        for _ in range(2):
            net = build_mlp(2, 2, (8, 8), "meta-acon-channel", rng=np.random.default_rng(3), dtype=np.float64,
                            reduction_r=4)
            res = train(net, self._data(), TrainConfig(steps=40, batch=16, seed=3))
            curves.append([m.loss for m in res.steps])
        assert curves[0] == curves[1]

    def test_metrics_recorded(self):
        net = build_mlp(2, 2, (8, 8), dtype=np.float64)
        res = train(net, self._data(), TrainConfig(steps=30, batch=32))
        assert [m.step for m in res.steps] == list(range(30))
        # 100 samples at 32 per step is 4 steps per epoch: 7 full epochs plus a partial one
        assert len(res.epoch_accuracy) == 8
        assert res.epoch_accuracy[-1][1] == res.final_accuracy

    def test_decay_skips_acon_and_routing(self):
        net = build_mlp(2, 2, (8, 8), "meta-acon-channel", dtype=np.float64, reduction_r=4)
        net.layers.insert(1, L.Acon("C", 8, dtype=np.float64))
        net = Network(net.layers, net.input_shape, np.float64)
        before = {k: v.copy() for k, v in net.named_parameters().items()}
        net.zero_grad()
        SGD(momentum=0.9, weight_decay=0.1).step(net, lr=0.5)
        mask = net.decay_mask()
        for name, v in net.named_parameters().items():
            leaf = name.split(".")[-1]
            if leaf in ("p1", "p2", "beta", "w1", "w2", "bias"):
                assert not mask[name]
                np.testing.assert_array_equal(v, before[name])
            else:
                assert mask[name]
                np.testing.assert_allclose(v, before[name] * (1 - 0.5 * 0.1))

    def test_divergence_reports_step_and_lr(self):
        net = build_mlp(2, 2, (8, 8), dtype=np.float64)
        with pytest.raises(TrainingDiverged) as info:
            train(net, self._data(), TrainConfig(lr=1e8, schedule="constant", steps=50, batch=16))
        assert info.value.lr == 1e8 and 0 <= info.value.step < 50

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            train(build_mlp(3, 2), self._data(), TrainConfig(steps=1))

    @pytest.mark.parametrize("bad", [dict(lr=-1.0), dict(batch=0), dict(schedule="step"), dict(momentum=1.0)])
    def test_config_validation(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)

    def test_schedules(self):
        lin = TrainConfig(lr=0.1, schedule="linear-decay", steps=100)
        cos = TrainConfig(lr=0.1, schedule="cosine", steps=100)
        assert learning_rate(lin, 0) == 0.1 and learning_rate(lin, 50) == pytest.approx(0.05)
        assert learning_rate(cos, 0) == 0.1 and learning_rate(cos, 50) == pytest.approx(0.05)
        assert learning_rate(cos, 100) == pytest.approx(0.0, abs=1e-15)

    def test_batch_order_covers_each_epoch(self):
        seen = [idx for _, idx in batch_order(10, 4, 3, seed=0)]
        assert sorted(np.concatenate(seen).tolist()) == list(range(10))

    def test_cross_entropy_gradient(self):
        rng = np.random.default_rng(0)
        logits, labels = rng.normal(size=(4, 3)), np.array([0, 2, 1, 2])
        loss, g = softmax_cross_entropy(logits, labels)
        rep = gradcheck_tensor(lambda v: softmax_cross_entropy(v, labels)[0], logits, g)
        assert rep.passed
        big_loss, _ = softmax_cross_entropy(logits * 1e4, labels)
        assert np.isfinite(big_loss)

    def test_spiral_mlp_converges(self):
        net = build_mlp(2, 2, (64, 64), "acon-c", rng=np.random.default_rng(1), dtype=np.float64)
        res = train(net, spiral(), TrainConfig(steps=2000, seed=1))
        assert res.final_accuracy >= 0.95


class TestBetaHistogram:
    def test_zero_inputs_single_bin(self):
        net = build_mlp(2, 2, (8, 8), "meta-acon-channel", dtype=np.float64, reduction_r=4)
        net.set_parameter("0.bias", np.zeros(8))
        h = collect_beta_histogram(net, np.zeros((3, 2)), 1, bins=10)
        assert not h.shared
        assert np.all(np.count_nonzero(h.counts, axis=1) == 1)
        # beta = 0.5 sits on the edge shared by bins 4 and 5 and lands in the upper one
        assert np.all(h.counts[:, 5] == 8)

    def test_one_bin_holds_everything(self):
        net = build_mlp(2, 2, (8, 8), "meta-acon-pixel", dtype=np.float64)
        h = collect_beta_histogram(net, np.random.default_rng(0).normal(size=(4, 2)), 1, bins=1)
        np.testing.assert_array_equal(h.counts, 8)

    def test_plain_acon_shared(self):
        net = build_mlp(2, 2, (8, 8), "acon-c", dtype=np.float64)
        net.set_parameter("1.beta", np.linspace(0.5, 2, 8))
        h = collect_beta_histogram(net, np.random.default_rng(0).normal(size=(7, 2)), 1)
        assert h.shared and all(np.array_equal(h.counts[0], row) for row in h.counts)

    def test_meta_differs(self):
        net = build_mlp(2, 2, (16, 16), "meta-acon-pixel", dtype=np.float64)
        h = collect_beta_histogram(net, np.random.default_rng(0).normal(size=(7, 2)), 3)
        assert len({tuple(row) for row in h.counts}) == 7

    def test_wrong_layer_kind(self):
        net = build_mlp(2, 2, (8, 8), "acon-c")
        with pytest.raises(UsageError):
            collect_beta_histogram(net, np.zeros((2, 2)), 0)
        with pytest.raises(UsageError):
            collect_beta_histogram(net, np.zeros((2, 2)), 99)


class TestModels:
    def test_resnet_placement_after_3x3(self):
        net = build_mini_resnet((3, 8, 8), 4, width=8, activation="meta-acon-channel")
        blocks = [layer for layer in net.layers if isinstance(layer, L.Residual)]
        for block in blocks:
            kinds = [type(layer) for layer in block.body]
            i = kinds.index(L.DepthwiseConv)
            assert kinds[i + 1] is L.MetaAcon
            assert sum(k is L.MetaAcon for k in kinds) == 1
        assert not any(isinstance(layer, L.MetaAcon) for layer in net.layers)

    def test_resnet_placement_all(self):
        net = build_mini_resnet((3, 8, 8), 4, width=8, activation="acon-c", placement="all")
        assert not any(isinstance(layer, L.ReLU) for layer in net.layers)

    def test_build_model_flattens_for_mlp(self):
        net = build_model("mlp", (1, 4, 4), 2, width=8)
        assert net.input_shape == (16,)

    def test_build_model_unknown(self):
        with pytest.raises(ConfigError):
            build_model("vgg", (3, 8, 8), 2)


class TestData:
    def test_generators(self):
        for d in (spiral(), blobs(), bars()):
            assert len(d) == d.y.shape[0] and d.y.max() == d.num_classes - 1
        assert bars().feature_shape == (1, 8, 8)

    def test_generators_are_seeded(self):
        np.testing.assert_array_equal(spiral(seed=4).x, spiral(seed=4).x)
        assert not np.array_equal(spiral(seed=4).x, spiral(seed=5).x)

    def test_csv_file_with_header(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("# label,f0,f1,f2,f3\n0,1,2,3,4\n1,5,6,7,8\n")
        d = load_csv(str(p), feature_shape=(1, 2, 2))
        assert d.x.shape == (2, 1, 2, 2) and d.x[1, 0, 1, 0] == 7 and d.num_classes == 2

    def test_csv_directory(self, tmp_path):
        (tmp_path / "a.csv").write_text("0,1,2\n")
        (tmp_path / "b.csv").write_text("2,3,4\n1,5,6\n")
        d = get_dataset(str(tmp_path))
        assert len(d) == 3 and d.num_classes == 3

    def test_csv_errors(self, tmp_path):
        with pytest.raises(DatasetError):
            load_csv(str(tmp_path / "missing.csv"))
        (tmp_path / "bad.csv").write_text("0.5,1,2\n")
        with pytest.raises(DatasetError):
            load_csv(str(tmp_path / "bad.csv"))
        (tmp_path / "ok.csv").write_text("0,1,2,3\n")
        with pytest.raises(DatasetError):
            load_csv(str(tmp_path / "ok.csv"), feature_shape=(2, 2))

    def test_dataset_validation(self):
        with pytest.raises(DatasetError):
            Dataset(np.zeros((2, 1)), np.array([0, 3]), 2)
