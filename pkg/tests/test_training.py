import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from posekan import (
    Dataset,
    MissingGroundTruthError,
    ModelConfig,
    NonFiniteGradientError,
    NonFiniteLossError,
    ShapeMismatchError,
    TrainConfig,
    TrainState,
    amsgrad_step,
    build_model,
    elastic_loss,
    evaluate,
    grad_check,
    lr_schedule,
    make_synthetic_task,
    train,
)
from posekan.training import (
    METRICS_HEADER,
    action_average,
    epoch_permutation,
    metrics_report,
    train_epoch,
)
from posekan.verify import _LossOp


@pytest.fixture(scope="module")
def tiny_task():
    return make_synthetic_task(16, 12, seed=5)


def _tiny_model(ds, **kw):
    cfg = dict(embed_dim=4, blocks=1, stack_depth=1, seed=0)
    cfg.update(kw)
    return build_model(ds.skeleton, ModelConfig(**cfg))


class TestElasticLoss:
    def test_zero_at_target(self, rng):
        Y = rng.normal(size=(2, 4, 3))
        loss, grad = elastic_loss(Y, Y.copy(), 0.03)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_endpoints(self, rng):
        Y, Yh = rng.normal(size=(2, 3, 5, 3))
        d = Yh - Y
        mse = (d**2).sum(-1).mean()
        mae = np.abs(d).sum(-1).mean()
        assert elastic_loss(Y, Yh, 0.0)[0] == pytest.approx(mse, rel=1e-14)
        assert elastic_loss(Y, Yh, 1.0)[0] == pytest.approx(mae, rel=1e-14)

    def test_single_joint_example(self):
        loss, _ = elastic_loss(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]]), 0.03)
        assert loss == pytest.approx(1.0, abs=1e-15)

    def test_gradient(self, rng):
        Y = rng.normal(size=(2, 4, 3))
        Yh = Y + rng.choice([-1.0, 1.0], Y.shape) * rng.uniform(0.01, 0.5, Y.shape)
        assert grad_check(_LossOp(Y, 0.03), [Yh]).passed

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            elastic_loss(np.zeros((2, 3)), np.zeros((3, 3)))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 4, 3), elements=st.floats(-10, 10)),
           arrays(np.float64, (3, 4, 3), elements=st.floats(-10, 10)),
           st.floats(0, 1))
    def test_nonnegative(self, Y, Yh, alpha):
        assert elastic_loss(Y, Yh, alpha)[0] >= 0.0


class TestAmsgrad:
    def _state(self, **kw):
        return TrainState(**kw)

    def test_zero_gradient_no_change(self):
        theta = {"w": np.array([1.0, -2.0])}
        amsgrad_step(self._state(), theta, {"w": np.zeros(2)})
        np.testing.assert_array_equal(theta["w"], [1.0, -2.0])

    def test_hand_trace(self):
        theta = {"w": np.array([1.0])}
        st_ = self._state(lr=0.001)
        amsgrad_step(st_, theta, {"w": np.array([1.0])})
        assert st_.m["w"][0] == pytest.approx(0.1, abs=1e-15)
        assert st_.v["w"][0] == pytest.approx(0.001, abs=1e-15)
        assert st_.v_hat["w"][0] == pytest.approx(0.001, abs=1e-15)
        expected = 1.0 - 0.001 * 0.1 / (math.sqrt(0.001) + 1e-8)
        assert abs(theta["w"][0] - expected) <= 1e-15
        assert abs(theta["w"][0] - 0.996838) <= 1e-6

    def test_max_retained(self):
        theta = {"w": np.array([1.0])}
        st_ = self._state()
        amsgrad_step(st_, theta, {"w": np.array([1.0])})
        first = st_.v_hat["w"].copy()
        amsgrad_step(st_, theta, {"w": np.array([0.0])})
        assert st_.v["w"][0] < first[0]
        np.testing.assert_array_equal(st_.v_hat["w"], first)

    def test_vhat_monotone(self, rng):
        theta = {"w": rng.normal(size=20)}
        st_ = self._state()
        prev = np.zeros(20)
        for _ in range(1000):
            amsgrad_step(st_, theta, {"w": rng.normal(size=20) * rng.exponential()})
            assert np.all(st_.v_hat["w"] >= prev)
            prev = st_.v_hat["w"].copy()
        assert st_.step == 1000

    def test_non_finite_gradient_leaves_parameters(self):
        theta = {"a": np.ones(2), "b": np.ones(2)}
        with pytest.raises(NonFiniteGradientError, match="b"):
            amsgrad_step(self._state(), theta, {"a": np.ones(2), "b": np.array([1.0, np.inf])})
        np.testing.assert_array_equal(theta["a"], 1.0)


class TestSchedule:
    def test_examples(self):
        assert lr_schedule(0) == 0.001
        assert lr_schedule(3) == 0.001
        assert lr_schedule(8) == pytest.approx(0.0009801, abs=1e-15)

    def test_closed_form_range(self):
        for e in range(101):
            assert lr_schedule(e, 0.001, 0.99, 4) == 0.001 * 0.99 ** (e // 4)

    def test_state_follows_epoch(self):
        st_ = TrainState()
        st_.set_epoch(9)
        assert st_.epoch == 9 and st_.lr == lr_schedule(9)


class TestTrainingLoop:
    def test_permutation_depends_on_seed_and_epoch(self):
        a = epoch_permutation(50, 1, 0)
        np.testing.assert_array_equal(a, epoch_permutation(50, 1, 0))
        assert not np.array_equal(a, epoch_permutation(50, 1, 1))
        assert sorted(a) == list(range(50))

    def test_one_batch_epoch_equals_manual_step(self, tiny_task):
        cfg = TrainConfig(epochs=1, batch_size=len(tiny_task), seed=3)
        auto = _tiny_model(tiny_task)
        st_auto = TrainState(rng_seed=3)
        loss = train_epoch(auto, tiny_task, st_auto, cfg, 0)

        manual = _tiny_model(tiny_task)
        order = epoch_permutation(len(tiny_task), 3, 0)
        Y = tiny_task.targets[order] / tiny_task.target_scale
        manual.zero_grad()
        Yh, cache = manual.forward(tiny_task.inputs[order], train=True, dropout_key=(3, 0))
        ref_loss, dY = elastic_loss(Y, Yh, 0.03)
        manual.backward(cache, dY)
        st_manual = TrainState(rng_seed=3)
        st_manual.set_epoch(0)
        amsgrad_step(st_manual, manual.params(), manual.grads)

        assert loss == ref_loss
        for k, p in auto.params().items():
            np.testing.assert_array_equal(p, manual.params()[k])

    def test_same_seed_same_curve(self, tiny_task):
        cfg = TrainConfig(epochs=3, batch_size=5, seed=9)
        _, _, h1 = train(_tiny_model(tiny_task), tiny_task, cfg)
        _, _, h2 = train(_tiny_model(tiny_task), tiny_task, cfg)
        assert [r["loss"] for r in h1] == [r["loss"] for r in h2]

    def test_loss_decreases(self, tiny_task):
        _, _, h = train(_tiny_model(tiny_task, dropout=0.0), tiny_task,
                        TrainConfig(epochs=15, batch_size=4, seed=0))
        assert h[-1]["loss"] < 0.5 * h[0]["loss"]

    def test_outputs_written(self, tiny_task, tmp_path):
        cfg = TrainConfig(epochs=4, batch_size=6, out_dir=str(tmp_path), checkpoint_every=2,
                          config_echo="# config: test")
        train(_tiny_model(tiny_task), tiny_task, cfg, val_dataset=tiny_task)
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == "# config: test" and lines[1] == METRICS_HEADER
        assert len(lines) == 2 + 2 * 4
        train_row = lines[2].split(",")
        assert train_row[:2] == ["1", "train"] and train_row[-1] == ""
        assert lines[3].split(",")[1] == "val"
        assert sorted(p.name for p in tmp_path.glob("*.pkan")) == ["ckpt_epoch2.pkan", "ckpt_epoch4.pkan"]

    def test_non_finite_loss(self, tiny_task):
        bad = Dataset(tiny_task.inputs, tiny_task.targets + np.inf, tiny_task.skeleton)
        with pytest.raises(NonFiniteLossError) as info:
            train(_tiny_model(bad), bad, TrainConfig(epochs=1))
        assert info.value.epoch == 0

    def test_missing_targets(self, tiny_task):
        bare = Dataset(tiny_task.inputs, None, tiny_task.skeleton)
        with pytest.raises(MissingGroundTruthError):
            train(_tiny_model(bare), bare, TrainConfig(epochs=1))


class TestEvaluate:
    def test_perfect_predictor(self, tiny_task):
        rep = metrics_report(tiny_task.targets.copy(), tiny_task)
        assert rep["mpjpe"] == 0.0
        assert rep["pa_mpjpe"] <= 1e-9
        assert rep["pck"] == 100.0 and rep["auc"] == 100.0

    def test_constant_offset(self, tiny_task):
        pred = tiny_task.targets + np.array([10.0, 0.0, 0.0])
        assert metrics_report(pred, tiny_task)["mpjpe"] == pytest.approx(10.0, abs=1e-12)

    def test_action_average_equal_counts(self, tiny_task, rng):
        ds = make_synthetic_task(16, 8, seed=2)
        ds.actions = ["a", "b"] * 4
        rep = metrics_report(ds.targets + rng.normal(0, 20, ds.targets.shape), ds)
        assert set(rep["per_action"]) == {"a", "b"}
        assert action_average(rep, "mpjpe") == pytest.approx(rep["mpjpe"], rel=1e-12)

    def test_evaluate_reports_loss(self, tiny_task):
        rep = evaluate(_tiny_model(tiny_task), tiny_task)
        assert rep["loss"] > 0 and rep["mpjpe"] > 0
        assert len(rep["per_action"]) == 4

    def test_missing_truth(self, tiny_task):
        with pytest.raises(MissingGroundTruthError):
            evaluate(_tiny_model(tiny_task), Dataset(tiny_task.inputs, None, tiny_task.skeleton))
