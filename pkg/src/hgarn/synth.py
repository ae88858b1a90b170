"""Seeded synthetic check-in corpora in the canonical JSONL format.

Two generators:

* :func:`synth_generate` - users follow weekly activity routines and pick a
  venue of the scheduled activity; each trajectory target is forced to be
  recurring or explorative so the recurring share is known exactly.
* :func:`synth_cycles` - every user loops a fixed short cycle of venues,
  which makes the next venue a deterministic function of (user, last venue).

Trajectories are separated by 96 hours so 72-hour segmentation recovers
them one-to-one. Venues that end up with too few visits for the cleaning
threshold receive isolated padding check-ins placed after the user's last
trajectory; those never form trajectories and never precede a target.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

DAY = 86400
TRAJ_SPACING = 4 * DAY
PAD_SPACING = 100 * 3600
EPOCH = int(datetime(2012, 4, 16, tzinfo=timezone.utc).timestamp())  # a Monday
CENTER = (40.73, -73.99)


class InfeasibleSpec(ValueError):
    pass


@dataclass
class SynthSpec:
    users: int = 20
    locations: int = 60
    activities: int = 6
    recurring_ratio: float = 0.859
    trajectories_per_user: int = 20
    trajectory_len: int = 5
    favourites: int = 2
    min_count: int = 10
    seed: int = 0


def _venues(rng, n_loc, n_act, spread_deg=0.04):
    if n_loc < n_act:
        raise InfeasibleSpec("need at least one venue per activity")
    category = np.arange(n_loc) % n_act
    gps = np.column_stack([CENTER[0] + rng.uniform(-spread_deg, spread_deg, n_loc),
                           CENTER[1] + rng.uniform(-spread_deg, spread_deg, n_loc)])
    return category, gps


def _row(user, venue, category, gps, ts):
    return {"user": f"u{user}", "venue": f"v{venue}", "category": f"c{category[venue]}",
            "lat": round(float(gps[venue, 0]), 6), "lon": round(float(gps[venue, 1]), 6),
            "ts": int(ts)}


def _pad(rows, visits, last_ts, category, gps, min_count, rng):
    """Isolated check-ins lifting every venue and user to ``min_count``."""
    users = sorted(last_ts)
    t_cursor = {u: last_ts[u] + PAD_SPACING for u in users}
    user_counts = {u: 0 for u in users}
    for r in rows:
        user_counts[int(r["user"][1:])] += 1
    k = 0
    for v in range(len(category)):
        while visits[v] < min_count:
            u = users[k % len(users)]
            k += 1
            rows.append(_row(u, v, category, gps, t_cursor[u]))
            t_cursor[u] += PAD_SPACING
            visits[v] += 1
            user_counts[u] += 1
    for u in users:
        while user_counts[u] < min_count:
            v = int(rng.integers(len(category)))
            rows.append(_row(u, v, category, gps, t_cursor[u]))
            t_cursor[u] += PAD_SPACING
            user_counts[u] += 1
    return rows


def synth_generate(spec: SynthSpec) -> tuple[list[dict], dict]:
    """Routine-driven corpus with an exact recurring/explorative split.

    Returns ``(rows, metadata)``; metadata holds the per-trajectory ground
    truth (target venue and setting) in generation order.
    """
    if not 0.0 <= spec.recurring_ratio <= 1.0:
        raise InfeasibleSpec("recurring_ratio must lie in [0, 1]")
    if spec.trajectory_len < 2:
        raise InfeasibleSpec("trajectory_len must be at least 2")
    rng = np.random.default_rng(spec.seed)
    category, gps = _venues(rng, spec.locations, spec.activities)
    by_act = [np.flatnonzero(category == c) for c in range(spec.activities)]

    n_traj = spec.users * spec.trajectories_per_user
    n_exp = int(round((1.0 - spec.recurring_ratio) * n_traj))
    explorative = np.zeros(n_traj, dtype=bool)
    explorative[rng.permutation(n_traj)[:n_exp]] = True

    rows, truth = [], []
    visits = np.zeros(spec.locations, dtype=np.int64)
    last_ts = {}
    for u in range(spec.users):
        # two routines (weekday / weekend) of activities with increasing hours
        routines = []
        for _ in range(2):
            acts = rng.integers(spec.activities, size=spec.trajectory_len)
            # the day ends with an activity already done that day (e.g. back home)
            acts[-1] = acts[rng.integers(spec.trajectory_len - 1)]
            hours = 7 + np.cumsum(rng.integers(0, 3, size=spec.trajectory_len))
            routines.append((acts, np.minimum(hours, 23)))
        fav = [rng.choice(v, size=min(spec.favourites, len(v)), replace=False) for v in by_act]
        visited: set[int] = set()
        for k in range(spec.trajectories_per_user):
            day = EPOCH + k * TRAJ_SPACING
            weekend = datetime.fromtimestamp(day, tz=timezone.utc).weekday() >= 5
            acts, hours = routines[int(weekend)]
            venues = []
            for a in acts[:-1]:
                f = fav[a]
                venues.append(int(f[0] if len(f) == 1 or rng.random() < 0.7 else f[1]))
            seen = visited | set(venues)
            a_t = acts[-1]
            idx = len(truth)
            if explorative[idx]:
                pool = [v for v in by_act[a_t] if v not in seen] or \
                       [v for v in range(spec.locations) if v not in seen]
                if not pool:
                    raise InfeasibleSpec(f"user {u} has no unvisited venue left for an "
                                         "explorative target")
                target = int(rng.choice(pool))
            else:
                # return to the venue used for this activity earlier the same day
                today = [v for v, a in zip(venues, acts[:-1]) if a == a_t]
                pool = today or [v for v in fav[a_t] if v in seen] or \
                    [v for v in by_act[a_t] if v in seen] or sorted(seen)
                target = int(pool[-1] if today else rng.choice(pool))
            venues.append(target)
            for i, (v, h) in enumerate(zip(venues, hours)):
                # the minute offset keeps records ordered even when hours clip at 23
                ts = day + int(h) * 3600 + 60 * i + int(rng.integers(0, 59))
                rows.append(_row(u, v, category, gps, ts))
                visits[v] += 1
                last_ts[u] = ts
            visited.update(venues)
            truth.append({"user": f"u{u}", "target": f"v{target}",
                          "setting": "explorative" if explorative[idx] else "recurring"})
    rows = _pad(rows, visits, last_ts, category, gps, spec.min_count, rng)
    meta = {"generator": "routine", "spec": spec.__dict__, "trajectories": truth,
            "recurring_share": 1.0 - n_exp / n_traj if n_traj else None}
    return rows, meta


def synth_cycles(users: int = 20, locations: int = 30, cycle_len: int = 3,
                 trajectories_per_user: int = 6, trajectory_len: int = 4, activities: int = 5,
                 min_count: int = 10, seed: int = 0) -> tuple[list[dict], dict]:
    """Each user walks its own fixed cycle of ``cycle_len`` venues forever."""
    rng = np.random.default_rng(seed)
    category, gps = _venues(rng, locations, activities)
    rows, last_ts, cycles = [], {}, {}
    visits = np.zeros(locations, dtype=np.int64)
    for u in range(users):
        cyc = [(u * cycle_len + j) % locations for j in range(cycle_len)]
        cycles[f"u{u}"] = [f"v{v}" for v in cyc]
        pos = int(rng.integers(cycle_len))
        for k in range(trajectories_per_user):
            day = EPOCH + k * TRAJ_SPACING
            for i in range(trajectory_len):
                v = cyc[pos % cycle_len]
                pos += 1
                # consecutive pairs share an hour slot so activities co-occur
                ts = day + (8 + i // 2) * 3600 + 600 * i
                rows.append(_row(u, v, category, gps, ts))
                visits[v] += 1
                last_ts[u] = ts
    rows = _pad(rows, visits, last_ts, category, gps, min_count, rng)
    return rows, {"generator": "cycles", "cycles": cycles}


def write_jsonl(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
