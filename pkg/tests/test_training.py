import json
import math

import numpy as np
import pytest

from _fixtures import micro_dataset, micro_model
from hgarn import tensor as T
from hgarn.dataset import Dataset
from hgarn.gradcheck import check_gradients
from hgarn.hiergraph import build_graph
from hgarn.model import GraphMasks
from hgarn.tensor import Tape, Tensor, backward
from hgarn.training import (Adam, TrainSettings, TrainingError, cross_entropy, mahec_label,
                            sample_losses, soft_cross_entropy, total_loss, train)

L1, L2, L3 = 0, 1, 2


# ---- MaHec labels


def test_mahec_examples():
    np.testing.assert_array_equal(mahec_label([L1, L2], L3, 1.0, 4), [0, 0, 1, 0])
    lab = mahec_label([L1, L1, L2], L3, 0.7, 4)
    np.testing.assert_allclose(lab, [0.2, 0.1, 0.7, 0.0], rtol=0, atol=1e-15)
    assert lab[L3] == 0.7
    assert abs(lab.sum() - 1.0) <= 1e-12
    lab = mahec_label([L1, L1, L2], L1, 0.7, 4)
    assert lab[L1] == 0.7
    assert lab[L2] == pytest.approx(0.1, abs=1e-15)


def test_mahec_presence_mode():
    lab = mahec_label([L1, L1, L2], L3, 0.7, 4, mode="presence")
    np.testing.assert_allclose(lab, [0.1, 0.1, 0.7, 0.0], rtol=0, atol=1e-15)


def test_mahec_errors():
    with pytest.raises(ValueError):
        mahec_label([], 0, 0.7, 3)
    with pytest.raises(ValueError):
        mahec_label([0], 3, 0.7, 3)
    with pytest.raises(ValueError):
        mahec_label([0], 1, 0.7, 3, mode="softmax")


def test_mahec_mass_when_target_not_in_history():
    rng = np.random.default_rng(0)
    for _ in range(200):
        hist = rng.integers(0, 10, size=rng.integers(1, 12))
        target = int(rng.choice(np.setdiff1d(np.arange(12), hist)))
        w = rng.random()
        lab = mahec_label(hist, target, w, 12)
        assert abs(lab.sum() - 1.0) <= 1e-12
        assert (lab >= 0).all()
        assert not lab[np.setdiff1d(np.arange(12), np.append(hist, target))].any()


# ---- losses


def test_cross_entropy_examples():
    n = 5
    assert soft_cross_entropy(Tensor(np.zeros((1, n))), np.eye(n)[:1]).item() == \
        pytest.approx(math.log(n), abs=1e-14)
    margin = Tensor([[3.0, 0, 0, 0, 0]])
    assert soft_cross_entropy(margin, np.eye(n)[:1]).item() < math.log(n)
    assert soft_cross_entropy(Tensor([[0.0, 0.0]]), [[0.7, 0.3]]).item() == \
        pytest.approx(math.log(2), abs=1e-15)


def test_soft_ce_with_one_hot_equals_hard_ce_bitwise():
    rng = np.random.default_rng(1)
    logits = Tensor(rng.normal(size=(4, 7)) * 3)
    targets = [3, 0, 6, 3]
    hist = [[1, 1, 2], [0, 4], [5], [3, 3]]
    labels = np.stack([mahec_label(h, t, 1.0, 7) for h, t in zip(hist, targets)])
    assert soft_cross_entropy(logits, labels).item() == cross_entropy(logits, targets).item()


def test_loss_shift_invariance():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 6))
    w = np.stack([mahec_label([0, 1, 1], t, 0.7, 6) for t in (2, 3, 4)])
    a = soft_cross_entropy(Tensor(x), w).item()
    b = soft_cross_entropy(Tensor(x + 123.4), w).item()
    assert abs(a - b) <= 1e-10


def test_total_loss():
    assert total_loss(Tensor([[2.0]]), Tensor([[3.0]])).item() == 5.0
    assert total_loss(Tensor([[2.0]]), Tensor([[3.0]]), 1.0, 0.0).item() == 2.0
    assert total_loss(Tensor([[2.0]]), None).item() == 2.0
    with pytest.raises(ValueError):
        total_loss(Tensor([[2.0]]), None, -1.0)


def test_total_loss_gradient_is_sum_of_parts():
    rng = np.random.default_rng(3)
    w = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    lab = np.eye(4)[[1, 2]]

    def grad(which):
        w.zero_grad()
        with Tape() as tape:
            a = soft_cross_entropy(w * 2.0, lab)
            b = soft_cross_entropy(T.tanh(w), lab)
            loss = {"a": a, "b": b, "ab": total_loss(a, b)}[which]
        backward(tape, loss)
        return w.grad.copy()

    np.testing.assert_allclose(grad("ab"), grad("a") + grad("b"), rtol=1e-13, atol=1e-15)


# ---- Adam


def test_adam_zero_gradient_keeps_parameters():
    p = Tensor(np.ones((2, 2)), requires_grad=True)
    Adam({"p": p}, lr=0.1).step()
    np.testing.assert_array_equal(p.data, np.ones((2, 2)))


def test_adam_first_step_is_lr():
    for g in (1e-3, 0.5, 40.0):
        p = Tensor([[1.0]], requires_grad=True)
        p.grad[:] = g
        Adam({"p": p}, lr=1e-3).step()
        assert 1.0 - p.item() == pytest.approx(1e-3, rel=1e-4)
        assert p.grad[0, 0] == 0.0


def test_adam_rejects_nan():
    p = Tensor([[1.0]], requires_grad=True)
    p.grad[:] = np.nan
    with pytest.raises(TrainingError):
        Adam({"p": p}).step()


def test_adam_deterministic_ten_steps():
    def run():
        rng = np.random.default_rng(0)
        p = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        opt = Adam({"p": p}, lr=0.01)
        for _ in range(10):
            with Tape() as tape:
                loss = T.tanh(p @ p).sum()
            backward(tape, loss)
            opt.step()
        return p.data.copy()

    np.testing.assert_array_equal(run(), run())


# ---- end to end


@pytest.mark.parametrize("mode", ["frequency", "presence"])
def test_micro_instance_gradcheck(mode):
    ds = micro_dataset()
    model = micro_model(seed=2)
    masks = GraphMasks.from_graph(build_graph(ds, 1.0))
    settings = TrainSettings(mahec_mode=mode)
    errors = check_gradients(lambda: sample_losses(model, masks, ds.train[:1], settings)[2],
                             model.params)
    assert max(errors.values()) < 1e-4, errors


def test_train_rejects_empty_training_set():
    ds = micro_dataset()
    empty = Dataset([], ds.test, ds.affiliation, ds.gps, 2, 3, 4)
    with pytest.raises(TrainingError):
        train(empty, build_graph(ds, 1.0), micro_model(), TrainSettings(epochs=1))


def _mean_loss(model, ds, graph, settings):
    masks = GraphMasks.from_graph(graph)
    return np.mean([sample_losses(model, masks, [t], settings)[2].item() for t in ds.train])


def test_first_epoch_reduces_loss(tmp_path):
    ds = micro_dataset()
    graph = build_graph(ds, 1.0)
    model = micro_model(seed=0)
    settings = TrainSettings(epochs=1, lr=0.01, holdout_fraction=0.0)
    before = _mean_loss(model, ds, graph, settings)
    result = train(ds, graph, model, settings, log_path=tmp_path / "log.jsonl")
    assert _mean_loss(model, ds, graph, settings) < before
    entry = json.loads((tmp_path / "log.jsonl").read_text())
    assert set(entry) == {"epoch", "loss_L", "loss_C", "loss_total", "recall1_holdout",
                          "wallclock_s"}
    assert result.log[0]["epoch"] == 1


def test_training_is_deterministic():
    ds = micro_dataset()
    graph = build_graph(ds, 1.0)
    runs = []
    for _ in range(2):
        model = micro_model(seed=1)
        train(ds, graph, model, TrainSettings(epochs=3, lr=0.01, seed=5, holdout_fraction=0.0))
        runs.append(model.state_dict())
    for k in runs[0]:
        np.testing.assert_array_equal(runs[0][k], runs[1][k])


def test_no_activity_variant_trains_without_activity_loss():
    ds = micro_dataset()
    graph = build_graph(ds, 1.0)
    model = micro_model(no_activity=True)
    result = train(ds, graph, model, TrainSettings(epochs=2, lr=0.01, holdout_fraction=0.0))
    assert all(e["loss_C"] is None for e in result.log)
    assert all(e["loss_total"] == e["loss_L"] for e in result.log)


def test_batched_training_runs():
    ds = micro_dataset()
    graph = build_graph(ds, 1.0)
    model = micro_model()
    result = train(ds, graph, model, TrainSettings(epochs=2, batch_size=2, holdout_fraction=0.0))
    assert len(result.log) == 2 and np.isfinite(result.log[-1]["loss_total"])
