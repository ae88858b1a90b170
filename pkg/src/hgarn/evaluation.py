"""Recall/NDCG, per-setting evaluation and the Markov-chain baseline."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataset import EXPLORATIVE, RECURRING, Trajectory
from .hiergraph import HierarchicalGraph
from .model import HGARN, GraphMasks

MAIN = "main"
SETTINGS = (MAIN, RECURRING, EXPLORATIVE)
DEFAULT_KS = {MAIN: (1, 5, 10), RECURRING: (1, 5, 10), EXPLORATIVE: (10, 20)}

# takes a batch of trajectories and a depth, returns one ranked id list per trajectory
Ranker = Callable[[Sequence[Trajectory], int], list[list[int]]]


def rank_metrics(ranked: Sequence[int], target: int, k: int) -> tuple[float, float]:
    """(recall@k, ndcg@k) for a single relevant item; NDCG uses log base 2."""
    if len(set(ranked)) != len(ranked):
        raise ValueError("ranking contains duplicate ids")
    for pos, item in enumerate(ranked[:k], 1):
        if item == target:
            return 1.0, 1.0 / math.log2(pos + 1)
    return 0.0, 0.0


def top_k(scores: np.ndarray, k: int) -> list[int]:
    """Ids ordered by descending score, ties by ascending id."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    return order[:k].tolist()


@dataclass
class EvalReport:
    model: str
    config_hash: str | None = None
    counts: dict[str, int] = field(default_factory=dict)
    metrics: dict[str, dict[str, dict[int, float] | None]] = field(default_factory=dict)

    def recall(self, setting: str, k: int) -> float | None:
        m = self.metrics.get(setting)
        return None if m is None else m["recall"][k]

    def ndcg(self, setting: str, k: int) -> float | None:
        m = self.metrics.get(setting)
        return None if m is None else m["ndcg"][k]

    def to_dict(self) -> dict:
        metrics = {}
        for s, m in self.metrics.items():
            metrics[s] = None if m is None else {kind: {str(k): v for k, v in vals.items()}
                                                for kind, vals in m.items()}
        return {"model": self.model, "config_hash": self.config_hash, "counts": self.counts,
                "metrics": metrics}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_rows(self) -> list[dict]:
        rows = []
        for s in SETTINGS:
            m = self.metrics.get(s)
            if m is None:
                rows.append({"model": self.model, "setting": s, "k": "", "recall": "", "ndcg": "",
                             "count": self.counts.get(s, 0)})
                continue
            for k in m["recall"]:
                rows.append({"model": self.model, "setting": s, "k": k, "recall": m["recall"][k],
                             "ndcg": m["ndcg"][k], "count": self.counts[s]})
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["model", "setting", "k", "recall", "ndcg", "count"])
        w.writeheader()
        w.writerows(self.csv_rows())
        return buf.getvalue()


def evaluate(ranker: Ranker, samples: Sequence[Trajectory], ks: Mapping[str, Sequence[int]] | None = None,
             name: str = "model", config_hash: str | None = None, batch_size: int = 256) -> EvalReport:
    """Average recall/NDCG per setting; ``main`` is all samples."""
    ks = dict(DEFAULT_KS if ks is None else ks)
    depth = max(max(v) for v in ks.values())
    hits = {s: {k: [0.0, 0.0] for k in ks.get(s, ())} for s in SETTINGS}
    counts = Counter()
    for ranked, t in zip(rank_all(ranker, samples, depth, batch_size), samples):
        if t.setting not in (RECURRING, EXPLORATIVE):
            raise ValueError("every sample must be tagged recurring or explorative")
        for s in (MAIN, t.setting):
            counts[s] += 1
            for k in ks.get(s, ()):
                r, n = rank_metrics(ranked, t.target.location_id, k)
                hits[s][k][0] += r
                hits[s][k][1] += n
    report = EvalReport(name, config_hash, {s: counts[s] for s in SETTINGS})
    for s in SETTINGS:
        if counts[s] == 0 or s not in ks:
            report.metrics[s] = None
            continue
        report.metrics[s] = {"recall": {k: v[0] / counts[s] for k, v in hits[s].items()},
                             "ndcg": {k: v[1] / counts[s] for k, v in hits[s].items()}}
    return report


def rank_all(ranker: Ranker, samples: Sequence[Trajectory], depth: int, batch_size: int = 256
             ) -> list[list[int]]:
    """Run ``ranker`` over samples grouped by history length; keeps input order."""
    out: list[list[int] | None] = [None] * len(samples)
    groups = defaultdict(list)
    for i, t in enumerate(samples):
        groups[len(t.history)].append(i)
    for idx in groups.values():
        for lo in range(0, len(idx), batch_size):
            chunk = idx[lo:lo + batch_size]
            for i, ranked in zip(chunk, ranker([samples[i] for i in chunk], depth)):
                out[i] = ranked
    return out


def recall_at(ranker: Ranker, samples: Sequence[Trajectory], k: int) -> float:
    if not samples:
        return 0.0
    ranked = rank_all(ranker, samples, k)
    return float(np.mean([t.target.location_id in r[:k] for r, t in zip(ranked, samples)]))


def model_ranker(model: HGARN, graph: HierarchicalGraph | GraphMasks) -> Ranker:
    """Ranker over location logits; graph representations computed once."""
    reps = model.graph_reps(graph)

    def rank(batch, depth):
        _, logits = model.forward(batch, reps)
        return [top_k(row, depth) for row in logits.data]

    return rank


# --------------------------------------------------------------------------
# Markov chain baseline


@dataclass
class MarkovModel:
    """First-order transition counts, global and per user, plus popularity."""

    n_locations: int
    transitions: dict[int, Counter] = field(default_factory=dict)
    user_transitions: dict[int, dict[int, Counter]] = field(default_factory=dict)
    popularity: np.ndarray | None = None
    per_user: bool = True
    fallback: bool = True
    _pop_order: list[int] | None = field(default=None, repr=False)

    def popularity_order(self) -> list[int]:
        if self._pop_order is None:
            self._pop_order = top_k(self.popularity, self.n_locations)
        return self._pop_order

    def successors(self, last: int, user: int | None = None) -> Counter:
        if self.per_user and user is not None:
            return self.user_transitions.get(user, {}).get(last, Counter())
        return self.transitions.get(last, Counter())


def markov_fit(trajectories: Sequence[Trajectory], n_locations: int, per_user: bool = True,
               fallback: bool = True) -> MarkovModel:
    model = MarkovModel(n_locations, per_user=per_user, fallback=fallback)
    pop = np.zeros(n_locations, dtype=np.int64)
    for t in trajectories:
        locs = [r.location_id for r in t.records]
        np.add.at(pop, locs, 1)
        for a, b in zip(locs, locs[1:]):
            model.transitions.setdefault(a, Counter())[b] += 1
            model.user_transitions.setdefault(t.user_id, {}).setdefault(a, Counter())[b] += 1
    model.popularity = pop
    return model


def markov_predict(model: MarkovModel, last: int, k: int, user: int | None = None) -> list[int]:
    """Successors of ``last`` by count (ties: popularity, then id), then popularity fill."""
    pop = model.popularity
    succ = model.successors(last, user)
    ranked = sorted(succ, key=lambda b: (-succ[b], -pop[b], b))[:k]
    if model.fallback and len(ranked) < k:
        taken = set(ranked)
        for b in model.popularity_order():
            if len(ranked) == k:
                break
            if b not in taken:
                ranked.append(b)
    return ranked


def markov_ranker(model: MarkovModel) -> Ranker:
    def rank(batch, depth):
        return [markov_predict(model, t.history[-1].location_id, depth, t.user_id) for t in batch]

    return rank
