"""Check-in ingestion, cleaning, sessionisation and the train/test split."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

RECURRING = "recurring"
EXPLORATIVE = "explorative"
MAX_MALFORMED_SHARE = 0.10
FOURSQUARE_TIME = "%a %b %d %H:%M:%S %z %Y"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class RawCheckin:
    user: str
    venue: str
    category: str
    lat: float
    lon: float
    ts: int  # local seconds since epoch
    category_name: str = ""


@dataclass(frozen=True, slots=True)
class MobilityRecord:
    user_id: int
    activity_id: int
    location_id: int
    hour_slot: int
    weekday: int
    timestamp: int
    lat: float
    lon: float


@dataclass(frozen=True)
class Trajectory:
    user_id: int
    records: tuple[MobilityRecord, ...]
    setting: str | None = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def history(self) -> tuple[MobilityRecord, ...]:
        return self.records[:-1]

    @property
    def target(self) -> MobilityRecord:
        return self.records[-1]

    def history_array(self, attr: str) -> np.ndarray:
        return np.array([getattr(r, attr) for r in self.records[:-1]], dtype=np.int64)


@dataclass
class Dataset:
    train: list[Trajectory]
    test: list[Trajectory]
    affiliation: np.ndarray  # location_id -> activity_id
    gps: np.ndarray  # location_id -> (lat, lon)
    n_users: int
    n_activities: int
    n_locations: int
    n_hour_slots: int = 24
    n_weekdays: int = 7
    user_keys: list[str] = field(default_factory=list)
    activity_keys: list[str] = field(default_factory=list)
    activity_names: list[str] = field(default_factory=list)
    location_keys: list[str] = field(default_factory=list)

    @property
    def trajectories(self) -> list[Trajectory]:
        return self.train + self.test

    def content_hash(self) -> str:
        header, lines = _bundle_parts(self)
        return _digest(header, lines)

    def statistics(self) -> dict:
        def share(trajs):
            tags = Counter(t.setting for t in trajs)
            n = tags[RECURRING] + tags[EXPLORATIVE]
            return (tags[RECURRING] / n, tags[EXPLORATIVE] / n) if n else (None, None)

        rec_all, exp_all = share(self.trajectories)
        rec_test, exp_test = share(self.test)
        return {
            "users": self.n_users,
            "activities": self.n_activities,
            "locations": self.n_locations,
            "trajectories": len(self.trajectories),
            "train_trajectories": len(self.train),
            "test_trajectories": len(self.test),
            "records": sum(len(t) for t in self.trajectories),
            "recurring_share": rec_all,
            "explorative_share": exp_all,
            "test_recurring_share": rec_test,
            "test_explorative_share": exp_test,
        }


# --------------------------------------------------------------------------
# parsing


def _parse_tsv_row(parts: list[str]) -> RawCheckin:
    if len(parts) != 8:
        raise ValueError(f"expected 8 columns, got {len(parts)}")
    user, venue, cat_id, cat_name, lat, lon, offset, utc = parts
    lat, lon = float(lat), float(lon)
    if not (-90 <= lat <= 90 and -180 <= lon <= 180):
        raise ValueError("coordinates out of range")
    utc_s = int(datetime.strptime(utc.strip(), FOURSQUARE_TIME).timestamp())
    return RawCheckin(user, venue, cat_id, lat, lon, utc_s + int(offset) * 60, cat_name)


def _parse_json_row(line: str) -> RawCheckin:
    obj = json.loads(line)
    lat, lon = float(obj["lat"]), float(obj["lon"])
    if not (-90 <= lat <= 90 and -180 <= lon <= 180):
        raise ValueError("coordinates out of range")
    return RawCheckin(str(obj["user"]), str(obj["venue"]), str(obj["category"]), lat, lon,
                      int(obj["ts"]), str(obj.get("category_name", obj["category"])))


def parse_checkins(path, fmt: str = "foursquare_tsv") -> tuple[list[RawCheckin], int]:
    """Read raw check-ins. Returns ``(records, skipped_rows)``.

    ``foursquare_tsv`` rows are converted to local time with the per-row
    offset (minutes). ``canonical_jsonl`` rows already carry local ``ts``.
    """
    if fmt not in ("foursquare_tsv", "canonical_jsonl"):
        raise DatasetError(f"unknown input format {fmt!r}")
    try:
        with open(path, encoding="utf-8", errors="replace") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc

    records, bad = [], []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            if fmt == "foursquare_tsv":
                records.append(_parse_tsv_row(line.split("\t")))
            else:
                records.append(_parse_json_row(line))
        except (ValueError, KeyError, TypeError) as exc:
            bad.append((lineno, line[:120], str(exc)))
    total = len(records) + len(bad)
    if total and len(bad) / total > MAX_MALFORMED_SHARE:
        samples = "\n".join(f"  line {n}: {txt!r} ({why})" for n, txt, why in bad[:5])
        raise DatasetError(f"{len(bad)}/{total} malformed rows in {path}:\n{samples}")
    if bad:
        log.warning("skipped %d malformed rows in %s", len(bad), path)
    return records, len(bad)


# --------------------------------------------------------------------------
# cleaning


def deduplicate(records: Iterable[RawCheckin]) -> list[RawCheckin]:
    """Keep the first record per (user, timestamp); input order is preserved."""
    seen, out = set(), []
    for r in records:
        key = (r.user, r.ts)
        if key not in seen:
            seen.add(key)
            out.append(r)
    return out


def clean(records: Sequence[RawCheckin], min_count: int = 10) -> list[RawCheckin]:
    """Drop users and venues with fewer than ``min_count`` records until stable."""
    if min_count < 1:
        raise DatasetError("min_count must be >= 1")
    current = list(records)
    while True:
        users = Counter(r.user for r in current)
        venues = Counter(r.venue for r in current)
        kept = [r for r in current if users[r.user] >= min_count and venues[r.venue] >= min_count]
        if len(kept) == len(current):
            break
        current = kept
    if not current:
        raise DatasetError("dataset exhausted by filtering")
    return current


def discretize_time(timestamp: int, n_hour_slots: int = 24) -> tuple[int, int]:
    """Local timestamp -> (hour slot, weekday with Monday = 0)."""
    if n_hour_slots < 1 or 24 % n_hour_slots:
        raise DatasetError(f"hour slot count must divide 24, got {n_hour_slots}")
    dt = datetime.fromtimestamp(timestamp, tz=timezone.utc)
    return dt.hour // (24 // n_hour_slots), dt.weekday()


@dataclass
class _Index:
    user_keys: list[str]
    activity_keys: list[str]
    activity_names: list[str]
    location_keys: list[str]
    affiliation: np.ndarray
    gps: np.ndarray


def densify(records: Sequence[RawCheckin], n_hour_slots: int = 24) -> tuple[list[MobilityRecord], _Index]:
    """Map raw keys to dense 0-based ids (sorted key order).

    A venue keeps the category and coordinates of its earliest record.
    """
    ordered = sorted(records, key=lambda r: (r.ts, r.user, r.venue))
    venue_cat, venue_gps, cat_name = {}, {}, {}
    for r in ordered:
        venue_cat.setdefault(r.venue, r.category)
        venue_gps.setdefault(r.venue, (r.lat, r.lon))
        cat_name.setdefault(r.category, r.category_name or r.category)
    user_keys = sorted({r.user for r in records})
    loc_keys = sorted(venue_cat)
    act_keys = sorted(set(venue_cat.values()))
    uid = {k: i for i, k in enumerate(user_keys)}
    lid = {k: i for i, k in enumerate(loc_keys)}
    aid = {k: i for i, k in enumerate(act_keys)}
    affiliation = np.array([aid[venue_cat[k]] for k in loc_keys], dtype=np.int64)
    gps = np.array([venue_gps[k] for k in loc_keys], dtype=np.float64).reshape(-1, 2)
    out = []
    for r in ordered:
        loc = lid[r.venue]
        hour, wd = discretize_time(r.ts, n_hour_slots)
        out.append(MobilityRecord(uid[r.user], int(affiliation[loc]), loc, hour, wd, r.ts,
                                  float(gps[loc, 0]), float(gps[loc, 1])))
    index = _Index(user_keys, act_keys, [cat_name[k] for k in act_keys], loc_keys, affiliation, gps)
    return out, index


# --------------------------------------------------------------------------
# trajectories


def segment_trajectories(records: Sequence[MobilityRecord], gap_hours: float = 72,
                         min_trajectory_len: int = 3) -> list[Trajectory]:
    """Split one user's time-ordered records wherever the gap exceeds ``gap_hours``."""
    if not records:
        return []
    limit = gap_hours * 3600
    chunks, cur = [], [records[0]]
    for prev, rec in zip(records, records[1:]):
        if rec.timestamp < prev.timestamp:
            raise DatasetError("records must be sorted by timestamp")
        if rec.timestamp - prev.timestamp > limit:
            chunks.append(cur)
            cur = []
        cur.append(rec)
    chunks.append(cur)
    return [Trajectory(c[0].user_id, tuple(c)) for c in chunks if len(c) >= min_trajectory_len]


def split_train_test(trajectories: Sequence[Trajectory], train_share: float = 0.8
                     ) -> tuple[list[Trajectory], list[Trajectory]]:
    """Chronological per-user split: the first ceil(0.8 n) trajectories train."""
    by_user = defaultdict(list)
    for t in trajectories:
        by_user[t.user_id].append(t)
    train, test = [], []
    for user in sorted(by_user):
        trajs = sorted(by_user[user], key=lambda t: t.records[0].timestamp)
        n = len(trajs)
        cut = n if n < 2 else math.ceil(round(train_share * n, 9))
        train.extend(trajs[:cut])
        test.extend(trajs[cut:])
    return train, test


def tag_setting(trajectory: Trajectory, prior_records: Iterable[MobilityRecord]) -> str:
    """Recurring iff the target location appears among the user's earlier records.

    The trajectory's own history always counts as earlier records.
    """
    target = trajectory.target
    seen = any(r.location_id == target.location_id and r.timestamp < target.timestamp
               for r in (*trajectory.history, *prior_records))
    return RECURRING if seen else EXPLORATIVE


def tag_all(trajectories: Sequence[Trajectory], records_by_user: dict[int, list[MobilityRecord]]
            ) -> list[Trajectory]:
    """Tag every trajectory against the full record stream of its user."""
    first_visit: dict[int, dict[int, int]] = {}
    for user, recs in records_by_user.items():
        fv = {}
        for r in recs:
            if r.location_id not in fv or r.timestamp < fv[r.location_id]:
                fv[r.location_id] = r.timestamp
        first_visit[user] = fv
    out = []
    for t in trajectories:
        fv = first_visit.get(t.user_id, {})
        tgt = t.target
        seen = fv.get(tgt.location_id, tgt.timestamp) < tgt.timestamp
        out.append(replace(t, setting=RECURRING if seen else EXPLORATIVE))
    return out


def prepare(raw: Sequence[RawCheckin], *, n_hour_slots: int = 24, min_count: int = 10,
            gap_hours: float = 72, min_trajectory_len: int = 3) -> Dataset:
    """parse output -> dedup -> clean -> densify -> segment -> split -> tag."""
    cleaned = clean(deduplicate(raw), min_count)
    records, index = densify(cleaned, n_hour_slots)
    by_user: dict[int, list[MobilityRecord]] = defaultdict(list)
    for r in records:
        by_user[r.user_id].append(r)
    trajectories = []
    for user in sorted(by_user):
        trajectories.extend(segment_trajectories(by_user[user], gap_hours, min_trajectory_len))
    if not trajectories:
        raise DatasetError("no trajectory survives segmentation")
    trajectories = tag_all(trajectories, by_user)
    train, test = split_train_test(trajectories)
    return Dataset(train, test, index.affiliation, index.gps, len(index.user_keys),
                   len(index.activity_keys), len(index.location_keys), n_hour_slots, 7,
                   index.user_keys, index.activity_keys, index.activity_names, index.location_keys)


# --------------------------------------------------------------------------
# bundle: one JSON header line, then one JSON line per trajectory


def _bundle_parts(ds: Dataset) -> tuple[dict, list[str]]:
    header = {
        "format": "hgarn-dataset",
        "version": 1,
        "n_users": ds.n_users,
        "n_activities": ds.n_activities,
        "n_locations": ds.n_locations,
        "n_hour_slots": ds.n_hour_slots,
        "n_weekdays": ds.n_weekdays,
        "user_keys": ds.user_keys,
        "activity_keys": ds.activity_keys,
        "activity_names": ds.activity_names,
        "location_keys": ds.location_keys,
        "affiliation": ds.affiliation.tolist(),
        "gps": ds.gps.tolist(),
    }
    lines = []
    for split, trajs in (("train", ds.train), ("test", ds.test)):
        for t in trajs:
            rows = [[r.activity_id, r.location_id, r.hour_slot, r.weekday, r.timestamp]
                    for r in t.records]
            lines.append(json.dumps({"user": t.user_id, "split": split, "setting": t.setting,
                                     "records": rows}, separators=(",", ":")))
    return header, lines


def _digest(header: dict, lines: list[str]) -> str:
    h = hashlib.sha256(json.dumps(header, sort_keys=True).encode())
    for line in lines:
        h.update(line.encode())
        h.update(b"\n")
    return h.hexdigest()[:16]


def save_dataset(ds: Dataset, path) -> str:
    header, lines = _bundle_parts(ds)
    digest = _digest(header, lines)
    header["hash"] = digest
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for line in lines:
            fh.write(line + "\n")
    return digest


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read dataset bundle {path}: {exc}") from exc
    if header.get("format") != "hgarn-dataset":
        raise DatasetError(f"{path} is not a dataset bundle")
    stored = header.pop("hash", None)
    if stored is not None and stored != _digest(header, lines):
        raise DatasetError(f"{path}: content hash mismatch, bundle was modified")
    gps = np.array(header["gps"], dtype=np.float64).reshape(-1, 2)
    affiliation = np.array(header["affiliation"], dtype=np.int64)
    train, test = [], []
    for line in lines:
        obj = json.loads(line)
        u = obj["user"]
        recs = tuple(MobilityRecord(u, a, l, h, w, ts, float(gps[l, 0]), float(gps[l, 1]))
                     for a, l, h, w, ts in obj["records"])
        (train if obj["split"] == "train" else test).append(Trajectory(u, recs, obj["setting"]))
    return Dataset(train, test, affiliation, gps, header["n_users"], header["n_activities"],
                   header["n_locations"], header["n_hour_slots"], header["n_weekdays"],
                   header["user_keys"], header["activity_keys"], header["activity_names"],
                   header["location_keys"])
