"""The three-layer location / localized-activity / activity graph."""
from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .dataset import Trajectory

EARTH_RADIUS_KM = 6371.0088


def haversine_km(p1, p2) -> float | np.ndarray:
    """Great-circle distance between ``(lat, lon)`` points given in degrees.

    Broadcasts over leading dimensions, so arrays of points work as well.
    """
    p1 = np.radians(np.asarray(p1, dtype=np.float64))
    p2 = np.radians(np.asarray(p2, dtype=np.float64))
    dlat = p2[..., 0] - p1[..., 0]
    dlon = p2[..., 1] - p1[..., 1]
    a = np.sin(dlat / 2) ** 2 + np.cos(p1[..., 0]) * np.cos(p2[..., 0]) * np.sin(dlon / 2) ** 2
    d = 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    return float(d) if np.ndim(d) == 0 else d


def pairwise_haversine_km(gps: np.ndarray) -> np.ndarray:
    gps = np.asarray(gps, dtype=np.float64)
    return haversine_km(gps[:, None, :], gps[None, :, :])


def build_location_adjacency(gps: np.ndarray, d_h_km: float) -> np.ndarray:
    """A^L: venues strictly closer than ``d_h_km`` are linked; unit diagonal."""
    if d_h_km <= 0:
        raise ValueError("distance threshold must be positive")
    a = (pairwise_haversine_km(gps) < d_h_km).astype(np.uint8)
    np.fill_diagonal(a, 1)
    return a


def build_activity_cooccurrence(trajectories: Iterable[Trajectory], n_activities: int) -> np.ndarray:
    """Symmetric same-hour-slot co-occurrence counts over trajectory histories.

    Each unordered pair of history records sharing an hour slot adds one
    to both mirrored cells (once on the diagonal for equal activities).
    """
    m = np.zeros((n_activities, n_activities), dtype=np.int64)
    for traj in trajectories:
        hist = traj.history
        if len(hist) < 2:
            continue
        slots: dict[int, list[int]] = {}
        for r in hist:
            slots.setdefault(r.hour_slot, []).append(r.activity_id)
        for acts in slots.values():
            if len(acts) < 2:
                continue
            n = np.bincount(acts, minlength=n_activities)
            nz = np.flatnonzero(n)
            cnt = n[nz]
            block = np.outer(cnt, cnt)
            np.fill_diagonal(block, cnt * (cnt - 1) // 2)
            m[np.ix_(nz, nz)] += block
    return m


def threshold_activity_adjacency(m: np.ndarray) -> np.ndarray:
    """A^C: entries strictly above the mean of all entries, plus self-loops."""
    m = np.asarray(m)
    if not m.any():
        warnings.warn("activity co-occurrence matrix is all zero; A^C reduces to identity",
                      RuntimeWarning, stacklevel=2)
    a = (m > m.mean()).astype(np.uint8)
    np.fill_diagonal(a, 1)
    return a


def build_affiliation(affiliation: np.ndarray, n_locations: int, n_activities: int
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Location -> category incidence and its bipartite block form."""
    affiliation = np.asarray(affiliation)
    if affiliation.shape != (n_locations,):
        raise ValueError(f"expected a category for each of {n_locations} locations, "
                         f"got {affiliation.shape}")
    if ((affiliation < 0) | (affiliation >= n_activities)).any():
        bad = np.flatnonzero((affiliation < 0) | (affiliation >= n_activities))[:5].tolist()
        raise ValueError(f"locations {bad} have no valid category")
    inc = np.zeros((n_locations, n_activities), dtype=np.uint8)
    inc[np.arange(n_locations), affiliation] = 1
    n = n_locations + n_activities
    block = np.zeros((n, n), dtype=np.uint8)
    block[:n_locations, n_locations:] = inc
    block[n_locations:, :n_locations] = inc.T
    return inc, block


def build_cc_adjacency(a_act: np.ndarray) -> np.ndarray:
    """[[A^C, I], [I, 0]] linking activity nodes to their localized copies."""
    c = a_act.shape[0]
    out = np.zeros((2 * c, 2 * c), dtype=np.uint8)
    out[:c, :c] = a_act
    eye = np.eye(c, dtype=np.uint8)
    out[:c, c:] = eye
    out[c:, :c] = eye
    return out


@dataclass
class HierarchicalGraph:
    a_loc: np.ndarray
    m_act: np.ndarray
    a_act: np.ndarray
    a_loc_act_l: np.ndarray
    a_loc_act: np.ndarray
    a_cc_new: np.ndarray
    d_h_km: float
    n_hour_slots: int = 24
    dataset_hash: str | None = None

    @property
    def n_locations(self) -> int:
        return self.a_loc.shape[0]

    @property
    def n_activities(self) -> int:
        return self.a_act.shape[0]

    def matrices(self) -> dict[str, np.ndarray]:
        return {"a_loc": self.a_loc, "m_act": self.m_act, "a_act": self.a_act,
                "a_loc_act_l": self.a_loc_act_l, "a_loc_act": self.a_loc_act,
                "a_cc_new": self.a_cc_new}

    def content_hash(self) -> str:
        h = hashlib.sha256(repr((self.d_h_km, self.n_hour_slots)).encode())
        for name, m in self.matrices().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(m, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]


def build_graph(dataset, d_h_km: float = 1.0) -> HierarchicalGraph:
    """All adjacency matrices from a prepared dataset (training histories only)."""
    a_loc = build_location_adjacency(dataset.gps, d_h_km)
    m_act = build_activity_cooccurrence(dataset.train, dataset.n_activities)
    a_act = threshold_activity_adjacency(m_act)
    inc, block = build_affiliation(dataset.affiliation, dataset.n_locations, dataset.n_activities)
    return HierarchicalGraph(a_loc, m_act, a_act, inc, block, build_cc_adjacency(a_act),
                             float(d_h_km), dataset.n_hour_slots, dataset.content_hash())


# --------------------------------------------------------------------------
# persistence: JSON header + COO edge lists


def save_graph(graph: HierarchicalGraph, path) -> str:
    digest = graph.content_hash()
    doc = {
        "header": {"format": "hgarn-graph", "version": 1, "n_locations": graph.n_locations,
                   "n_activities": graph.n_activities, "d_h_km": graph.d_h_km,
                   "n_hour_slots": graph.n_hour_slots, "dataset_hash": graph.dataset_hash,
                   "hash": digest},
        "matrices": {},
    }
    for name, m in graph.matrices().items():
        rows, cols = np.nonzero(m)
        entry = {"shape": list(m.shape), "rows": rows.tolist(), "cols": cols.tolist()}
        if name == "m_act":
            entry["values"] = m[rows, cols].tolist()
        doc["matrices"][name] = entry
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
    return digest


def load_graph(path) -> HierarchicalGraph:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    header = doc["header"]
    if header.get("format") != "hgarn-graph":
        raise ValueError(f"{path} is not a graph bundle")
    mats = {}
    for name, e in doc["matrices"].items():
        dtype = np.int64 if name == "m_act" else np.uint8
        m = np.zeros(e["shape"], dtype=dtype)
        m[e["rows"], e["cols"]] = e.get("values", 1)
        mats[name] = m
    g = HierarchicalGraph(mats["a_loc"], mats["m_act"], mats["a_act"], mats["a_loc_act_l"],
                          mats["a_loc_act"], mats["a_cc_new"], header["d_h_km"],
                          header["n_hour_slots"], header.get("dataset_hash"))
    if header.get("hash") and g.content_hash() != header["hash"]:
        raise ValueError(f"{path}: content hash mismatch")
    return g


def export_csv(graph: HierarchicalGraph, directory) -> list[Path]:
    """Dense CSV dump of every matrix, one file each."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, m in graph.matrices().items():
        p = directory / f"{name}.csv"
        with open(p, "w", newline="") as fh:
            csv.writer(fh).writerows(m.tolist())
        written.append(p)
    return written
