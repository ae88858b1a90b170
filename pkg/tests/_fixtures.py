"""Small hand-built datasets shared by the tests."""
from __future__ import annotations

from datetime import datetime, timezone

import numpy as np

from hgarn.dataset import EXPLORATIVE, RECURRING, Dataset, MobilityRecord, Trajectory
from hgarn.evaluation import evaluate, model_ranker
from hgarn.hiergraph import build_graph
from hgarn.model import build_variant
from hgarn.synth import SynthSpec, synth_generate
from hgarn.dataset import RawCheckin, prepare
from hgarn.training import TrainSettings, train

MONDAY = int(datetime(2012, 4, 16, tzinfo=timezone.utc).timestamp())


def record(user, act, loc, hour=9, weekday=0, ts=0, lat=40.0, lon=-74.0):
    return MobilityRecord(user, act, loc, hour, weekday, ts, lat, lon)


def trajectory(user, steps, setting=RECURRING, t0=0):
    """``steps`` is a list of (activity, location, hour) tuples."""
    recs = tuple(record(user, a, l, h, 0, t0 + 3600 * i) for i, (a, l, h) in enumerate(steps))
    return Trajectory(user, recs, setting)


def micro_dataset() -> Dataset:
    """|U|=2, |C|=3, |L|=4, histories of length 3."""
    affiliation = np.array([0, 1, 2, 0])
    gps = np.array([[40.700, -74.000], [40.705, -74.000], [40.800, -74.000], [40.701, -74.001]])
    train = [trajectory(0, [(0, 0, 9), (1, 1, 9), (2, 2, 10), (0, 3, 11)]),
             trajectory(1, [(2, 2, 8), (0, 3, 8), (1, 1, 9), (0, 0, 12)], t0=10 ** 6)]
    test = [trajectory(0, [(1, 1, 9), (0, 0, 9), (2, 2, 10), (1, 1, 11)], t0=2 * 10 ** 6),
            trajectory(1, [(0, 0, 8), (2, 2, 8), (0, 3, 9), (2, 2, 12)], t0=3 * 10 ** 6)]
    return Dataset(train, test, affiliation, gps, 2, 3, 4)


def micro_model(seed=0, **flags):
    return build_variant(2, 3, 4, seed=seed, d=4, d_u=2, d_t=2, d_g=4, hidden=6, heads=2, **flags)


def routine_dataset(seed, users=15, locations=120, activities=8, trajectories=30, length=9,
                    ratio=0.85):
    rows, _ = synth_generate(SynthSpec(users=users, locations=locations, activities=activities,
                                       recurring_ratio=ratio, trajectories_per_user=trajectories,
                                       trajectory_len=length, seed=seed))
    raw = [RawCheckin(r["user"], r["venue"], r["category"], r["lat"], r["lon"], r["ts"])
           for r in rows]
    return prepare(raw)


def train_and_score(ds, graph, seed, flags, settings, dims):
    flags = dict(flags)
    no_mahec = flags.pop("no_mahec", False)
    model = build_variant(ds.n_users, ds.n_activities, ds.n_locations, seed=seed, **dims, **flags)
    s = TrainSettings(**{**settings, "no_mahec": no_mahec, "seed": seed})
    train(ds, graph, model, s)
    return evaluate(model_ranker(model, graph), ds.test)


__all__ = ["EXPLORATIVE", "RECURRING", "MONDAY", "record", "trajectory", "micro_dataset",
           "micro_model", "routine_dataset", "train_and_score", "build_graph"]
