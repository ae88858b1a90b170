"""Soft labels, losses, Adam and the epoch loop."""
from __future__ import annotations

import json
import logging
import math
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .dataset import Dataset, Trajectory
from .hiergraph import HierarchicalGraph
from .model import HGARN, GraphMasks
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def mahec_label(history: Sequence[int], target: int, w_c: float, vocab_size: int,
                mode: str = "frequency") -> np.ndarray:
    """History-enhanced confidence label.

    The target gets ``w_c``; every other id gets ``(1 - w_c)`` times its share
    of the history (``frequency``: visit count / length; ``presence``:
    1 / length for any visited id). The target entry is overwritten even
    when it also occurs in the history, so the mass can fall short of 1.
    """
    history = np.asarray(history, dtype=np.int64)
    if history.size == 0:
        raise ValueError("MaHec label needs a non-empty history")
    if not 0 <= target < vocab_size:
        raise ValueError(f"target {target} outside vocabulary of size {vocab_size}")
    if not 0.0 <= w_c <= 1.0:
        raise ValueError("w_c must lie in [0, 1]")
    counts = np.bincount(history, minlength=vocab_size).astype(np.float64)
    if mode == "frequency":
        f = counts / history.size
    elif mode == "presence":
        f = (counts > 0) / history.size
    else:
        raise ValueError(f"unknown MaHec mode {mode!r}")
    label = (1.0 - w_c) * f
    label[target] = w_c
    return label


def soft_cross_entropy(logits: Tensor, weights: np.ndarray) -> Tensor:
    """Mean over rows of ``-sum_i weights_i * log softmax(logits)_i``."""
    weights = np.asarray(weights, dtype=np.float64).reshape(logits.shape)
    logp = T.log_softmax_rows(logits)
    per_row = T.sum_rows(T.hadamard(logp, Tensor(weights)))
    return -T.reduce(per_row, "mean")


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Hard-label cross entropy; picks the target log-probability directly."""
    logp = T.log_softmax_rows(logits)
    return -T.reduce(T.take_per_row(logp, targets), "mean")


def total_loss(loss_l: Tensor, loss_c: Tensor | None, lambda_l: float = 1.0,
               lambda_c: float = 1.0) -> Tensor:
    if lambda_l < 0 or lambda_c < 0:
        raise ValueError("loss weights must be non-negative")
    out = loss_l * lambda_l
    if loss_c is not None:
        out = out + loss_c * lambda_c
    return out


class Adam:
    """Adam with bias correction over a name -> Tensor mapping."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        for name, p in self.params.items():
            if not np.isfinite(p.grad).all():
                raise TrainingError(f"non-finite gradient in {name}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad = np.zeros_like(p.data)


# --------------------------------------------------------------------------


@dataclass
class TrainSettings:
    epochs: int = 20
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    lambda_l: float = 1.0
    lambda_c: float = 1.0
    w_c: float = 0.7
    mahec_mode: str = "frequency"
    no_mahec: bool = False
    seed: int = 0
    holdout_fraction: float = 0.1
    eval_every: int = 1
    patience: int = 5
    target_recall: float | None = None


@dataclass
class TrainResult:
    model: HGARN
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_recall: float = -1.0
    best_state: dict[str, np.ndarray] | None = None


def make_batches(samples: Sequence[Trajectory], batch_size: int, rng: np.random.Generator
                 ) -> list[list[Trajectory]]:
    """Shuffle, then group into batches of equal history length."""
    order = rng.permutation(len(samples))
    if batch_size == 1:
        return [[samples[i]] for i in order]
    buckets: dict[int, list[Trajectory]] = defaultdict(list)
    for i in order:
        buckets[len(samples[i].history)].append(samples[i])
    batches = []
    for n in sorted(buckets):
        items = buckets[n]
        batches.extend(items[k:k + batch_size] for k in range(0, len(items), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def sample_losses(model: HGARN, masks: GraphMasks, batch: Sequence[Trajectory],
                  settings: TrainSettings) -> tuple[Tensor, Tensor | None, Tensor]:
    """(L_L, L_C, total) for one batch; call under a tape to train."""
    reps = model.graph_reps(masks)
    act_logits, loc_logits = model.forward(batch, reps)
    cfg = model.config
    w_c = 1.0 if settings.no_mahec else settings.w_c
    loc_labels = np.stack([mahec_label(t.history_array("location_id"), t.target.location_id,
                                       w_c, cfg.n_locations, settings.mahec_mode) for t in batch])
    loss_l = soft_cross_entropy(loc_logits, loc_labels)
    loss_c = None
    if act_logits is not None:
        act_labels = np.stack([mahec_label(t.history_array("activity_id"), t.target.activity_id,
                                           w_c, cfg.n_activities, settings.mahec_mode) for t in batch])
        loss_c = soft_cross_entropy(act_logits, act_labels)
    return loss_l, loss_c, total_loss(loss_l, loss_c, settings.lambda_l, settings.lambda_c)


def train(dataset: Dataset, graph: HierarchicalGraph, model: HGARN, settings: TrainSettings,
          log_path=None, monitor: Sequence[Trajectory] | None = None) -> TrainResult:
    """Optimise ``model`` in place on ``dataset.train``.

    A ``holdout_fraction`` slice of the training trajectories is kept out of
    the updates and scored with Recall@1 every ``eval_every`` epochs; with a
    fraction of 0 the training set itself is scored. The best-scoring
    parameters are kept in ``result.best_state``.
    """
    from .evaluation import model_ranker, recall_at

    samples = list(dataset.train)
    if not samples:
        raise TrainingError("training set is empty")
    rng = np.random.default_rng(settings.seed)
    if monitor is None:
        n_hold = int(round(settings.holdout_fraction * len(samples)))
        if n_hold and n_hold < len(samples):
            perm = rng.permutation(len(samples))
            monitor = [samples[i] for i in perm[:n_hold]]
            samples = [samples[i] for i in sorted(perm[n_hold:])]
        else:
            monitor = samples
    masks = GraphMasks.from_graph(graph)
    opt = Adam(model.params, settings.lr, settings.beta1, settings.beta2, settings.eps)
    result = TrainResult(model)
    best_loss, stale = math.inf, 0
    start = time.perf_counter()
    sink = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, settings.epochs + 1):
            sums = np.zeros(3)
            n_rows = 0
            for batch in make_batches(samples, settings.batch_size, rng):
                with Tape() as tape:
                    loss_l, loss_c, loss = sample_losses(model, masks, batch, settings)
                if not np.isfinite(loss.item()):
                    raise TrainingError(f"non-finite loss at epoch {epoch}")
                T.backward(tape, loss)
                opt.step()
                k = len(batch)
                sums += k * np.array([loss_l.item(), loss_c.item() if loss_c is not None else 0.0,
                                      loss.item()])
                n_rows += k
            means = sums / n_rows
            recall1 = None
            if epoch % settings.eval_every == 0 or epoch == settings.epochs:
                recall1 = recall_at(model_ranker(model, graph), monitor, 1)
                if recall1 > result.best_recall:
                    result.best_recall, result.best_epoch = recall1, epoch
                    result.best_state = {k: v.copy() for k, v in model.state_dict().items()}
            entry = {"epoch": epoch, "loss_L": float(means[0]),
                     "loss_C": float(means[1]) if model.config.has_activity else None,
                     "loss_total": float(means[2]), "recall1_holdout": recall1,
                     "wallclock_s": round(time.perf_counter() - start, 3)}
            result.log.append(entry)
            if sink:
                sink.write(json.dumps(entry) + "\n")
                sink.flush()
            log.info("epoch %d loss %.4f recall@1 %s", epoch, means[2], recall1)
            if means[2] < best_loss - 1e-12:
                best_loss, stale = means[2], 0
            else:
                stale += 1
                if stale == settings.patience:
                    log.warning("loss has not improved for %d epochs", stale)
            if settings.target_recall is not None and recall1 is not None \
                    and recall1 >= settings.target_recall:
                break
    finally:
        if sink:
            sink.close()
    if result.best_state is None:
        result.best_state = {k: v.copy() for k, v in model.state_dict().items()}
    return result
