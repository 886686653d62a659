"""Unit tests for the loss, gradients, Adam and the training loop."""

import numpy as np
import pytest
import torch
from torch.nn import functional as F

from roadscope.config.settings import TrainConfig
from roadscope.core.exceptions import EmptyResult, LabelOutOfRange, ShapeMismatch
from roadscope.ingest.models import RoadClass
from roadscope.nn.model import (
    Conv2DSpec,
    DSConvSpec,
    DenseSpec,
    GlobalAvgPoolSpec,
    MaxPoolSpec,
    ModelSpec,
    ReLUSpec,
    SoftmaxSpec,
    build_model,
    embedding_head,
    tiny_road_net,
)
from roadscope.nn.training import (
    AdamState,
    adam_step,
    backward,
    cross_entropy,
    downscale_area,
    labels_of,
    train,
)


def test_cross_entropy_values():
    """Test the clipped loss and its logit gradient."""
    probs = torch.tensor([[0.7, 0.2, 0.1], [0.0, 1.0, 0.0]], dtype=torch.float64)

    loss, grad = cross_entropy(probs, [0, 0])

    assert loss == pytest.approx((-np.log(0.7) - np.log(1e-7)) / 2)
    expected = torch.tensor([[-0.3, 0.2, 0.1], [-1.0, 1.0, 0.0]], dtype=torch.float64) / 2
    assert torch.allclose(grad, expected)


def test_labels_out_of_range():
    """Test label validation."""
    with pytest.raises(LabelOutOfRange):
        cross_entropy(torch.full((1, 3), 1 / 3), [3])


class TestAdam:
    """Bias-corrected Adam update."""

    def test_first_step(self):
        cfg = TrainConfig()
        p = torch.tensor([1.0, -2.0], dtype=torch.float64)
        g = torch.tensor([1.0, -3.0], dtype=torch.float64)
        state = AdamState.fresh([p])

        adam_step([p], [g], state, cfg)

        assert state.t == 1
        assert p[0].item() - 1.0 == pytest.approx(-9.9999999e-5, rel=1e-9)
        assert p[1].item() + 2.0 == pytest.approx(9.9999999e-5, rel=1e-9)

    def test_all_zero_step_is_noop(self):
        cfg = TrainConfig()
        p = torch.tensor([3.0, 4.0], dtype=torch.float64)
        q = torch.tensor([1.0], dtype=torch.float64)
        state = AdamState.fresh([p, q])
        adam_step([p, q], [torch.ones(2, dtype=torch.float64), torch.ones(1, dtype=torch.float64)], state, cfg)
        before = (p.clone(), q.clone(), [m.clone() for m in state.m], [v.clone() for v in state.v])

        adam_step([p, q], [torch.zeros(2, dtype=torch.float64), torch.zeros(1, dtype=torch.float64)], state, cfg)

        assert state.t == 1
        assert torch.equal(p, before[0]) and torch.equal(q, before[1])
        assert all(torch.equal(a, b) for a, b in zip(state.m, before[2]))
        assert all(torch.equal(a, b) for a, b in zip(state.v, before[3]))

    def test_zero_tensor_in_live_step_keeps_momentum(self):
        cfg = TrainConfig(lr=0.1)
        p = torch.zeros(1, dtype=torch.float64)
        q = torch.zeros(1, dtype=torch.float64)
        state = AdamState.fresh([p, q])
        one = torch.ones(1, dtype=torch.float64)
        adam_step([p, q], [one, one], state, cfg)
        after_first = p.item()

        adam_step([p, q], [torch.zeros(1, dtype=torch.float64), one], state, cfg)

        assert state.t == 2
        assert state.m[0].item() == pytest.approx(0.09)
        assert state.v[0].item() == pytest.approx(0.999 * 0.001)
        m_hat = 0.09 / (1 - 0.9 ** 2)
        v_hat = 0.999 * 0.001 / (1 - 0.999 ** 2)
        assert p.item() - after_first == pytest.approx(-0.1 * m_hat / (np.sqrt(v_hat) + 1e-8))

    @pytest.mark.property
    def test_zero_gradients_never_move_parameters(self):
        rng = np.random.default_rng(0)
        cfg = TrainConfig()
        for _ in range(100):
            p = torch.from_numpy(rng.normal(size=4))
            state = AdamState(
                m=[torch.from_numpy(rng.normal(size=4))],
                v=[torch.from_numpy(rng.random(4))],
                t=int(rng.integers(0, 50)),
            )
            original, t = p.clone(), state.t

            adam_step([p], [torch.zeros(4, dtype=torch.float64)], state, cfg)

            assert torch.equal(p, original)
            assert state.t == t

    def test_shape_checks(self):
        p = torch.zeros(2)
        with pytest.raises(ShapeMismatch):
            adam_step([p], [torch.zeros(3)], AdamState.fresh([p]), TrainConfig())


GRADIENT_CHECK_SPECS = {
    "conv_relu_dense": [
        Conv2DSpec(kernel=3, padding=1, out_channels=3),
        ReLUSpec(),
        GlobalAvgPoolSpec(),
        DenseSpec(out=3),
        SoftmaxSpec(),
    ],
    "ds_conv_max_pool": [
        DSConvSpec(kernel=3, padding=1, out_channels=4),
        ReLUSpec(),
        MaxPoolSpec(kernel=2, stride=2),
        DSConvSpec(kernel=3, stride=2, padding=1, out_channels=3),
        GlobalAvgPoolSpec(),
        DenseSpec(out=3),
        SoftmaxSpec(),
    ],
}


@pytest.mark.parametrize("layers", GRADIENT_CHECK_SPECS.values(), ids=GRADIENT_CHECK_SPECS.keys())
def test_backward_matches_finite_differences(layers):
    """Test autograd gradients against central differences in float64."""
    model = build_model(ModelSpec(layers=layers), (2, 6, 6), seed=3).double()
    x = torch.rand(4, 2, 6, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    y = torch.tensor([0, 1, 2, 1])

    grads = backward(model, x, y)

    def loss_value() -> float:
        with torch.no_grad():
            return float(F.cross_entropy(model.logits(x), y))

    h = 1e-6
    for param, grad in zip(model.parameters(), grads):
        flat = param.data.view(-1)
        for i in range(min(flat.numel(), 5)):
            original = flat[i].item()
            flat[i] = original + h
            up = loss_value()
            flat[i] = original - h
            down = loss_value()
            flat[i] = original
            assert grad.view(-1)[i].item() == pytest.approx((up - down) / (2 * h), abs=1e-6)


def test_overfits_one_sample(make_entries):
    """Test that the default network and optimizer fit a single sample."""
    entries = make_entries({RoadClass.MINOR: 1})
    model = build_model(tiny_road_net(), (3, 32, 32), seed=0)
    inputs = torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(4))
    cfg = TrainConfig(epochs=200)

    result = train(model, entries, cfg, inputs=inputs)

    assert result.steps == 200
    assert result.history[-1].accuracy == 1.0
    assert result.history[-1].loss < result.history[0].loss
    assert result.init_digest != result.final_digest


def test_training_is_deterministic(make_entries):
    """Test identical digests for identical seeds and inputs."""
    entries = make_entries({c: 6 for c in RoadClass})
    inputs = torch.rand(18, 8, generator=torch.Generator().manual_seed(1))
    cfg = TrainConfig(lr=1e-3, epochs=3, batch_size=4, seed=7)

    a = train(build_model(embedding_head(), (8,), seed=7), entries, cfg, inputs=inputs)
    b = train(build_model(embedding_head(), (8,), seed=7), entries, cfg, inputs=inputs)

    assert a.final_digest == b.final_digest
    assert [h.loss for h in a.history] == [h.loss for h in b.history]
    assert a.steps == 3 * 5


def test_train_input_checks(make_entries):
    """Test empty manifests and mismatched inputs."""
    model = build_model(embedding_head(), (8,))
    with pytest.raises(EmptyResult):
        train(model, [], TrainConfig(), inputs=torch.zeros(0, 8))
    with pytest.raises(ShapeMismatch):
        train(model, make_entries({RoadClass.MAJOR: 2}), TrainConfig(), inputs=torch.zeros(3, 8))
    with pytest.raises(ValueError):
        train(model, make_entries({RoadClass.MAJOR: 2}), TrainConfig())


def test_labels_follow_class_order(make_entries):
    """Test label indices in declaration order."""
    entries = make_entries({RoadClass.TWO_TRACK: 1, RoadClass.MAJOR: 1, RoadClass.MINOR: 1})

    assert labels_of(entries).tolist() == [2, 0, 1]


def test_downscale_area():
    """Test area averaging to the model input size."""
    pixels = np.zeros((4, 4, 3), dtype=np.uint8)
    pixels[:2, :2] = 255

    x = downscale_area(pixels, 2)

    assert x.shape == (3, 2, 2)
    assert torch.allclose(x[0], torch.tensor([[1.0, 0.0], [0.0, 0.0]]))
    assert downscale_area(pixels, 4).max() == 1.0
    with pytest.raises(ShapeMismatch):
        downscale_area(np.zeros((4, 4), dtype=np.uint8), 2)


def test_cross_entropy_reference_values():
    """Test perfect, uniform and clipped predictions."""
    assert cross_entropy(torch.tensor([[1.0, 0.0, 0.0]]), [0])[0] == pytest.approx(0.0)
    assert cross_entropy(torch.full((2, 3), 1 / 3), [0, 2])[0] == pytest.approx(np.log(3), rel=1e-6)
    assert cross_entropy(torch.tensor([[1e-12, 0.5, 0.5]], dtype=torch.float64), [0])[0] == pytest.approx(-np.log(1e-7))


def test_adam_moment_damping():
    """Test that a reversed gradient pulls the parameter back toward zero."""
    cfg = TrainConfig()
    p = torch.zeros(1, dtype=torch.float64)
    state = AdamState.fresh([p])

    adam_step([p], [torch.ones(1, dtype=torch.float64)], state, cfg)
    first = p.item()
    adam_step([p], [-torch.ones(1, dtype=torch.float64)], state, cfg)

    assert first == pytest.approx(-9.9999999e-5, abs=1e-10)
    assert abs(p.item()) < abs(first)


def test_duplicated_sample_gradient():
    """Test that a batch of one sample twice has the single-sample mean gradient."""
    model = build_model(embedding_head(8), (4,), seed=2).double()
    x = torch.tensor([[0.1, 0.4, -0.3, 0.9]], dtype=torch.float64)

    single = backward(model, x, [1])
    double = backward(model, torch.cat([x, x]), [1, 1])

    for a, b in zip(single, double):
        assert torch.allclose(a, b, atol=1e-12)


def test_zero_learning_rate_keeps_weights(make_entries):
    """Test that lr = 0 leaves the weights byte-identical."""
    entries = make_entries({c: 2 for c in RoadClass})
    cfg = TrainConfig(lr=0.0, epochs=2, batch_size=2)

    result = train(build_model(embedding_head(), (8,)), entries, cfg, inputs=torch.rand(6, 8))

    assert result.final_digest == result.init_digest
