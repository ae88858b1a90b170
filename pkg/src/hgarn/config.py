"""Run configuration: one JSON file plus ``key=value`` overrides."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields

from .model import ModelConfig
from .training import TrainSettings

MAHEC_MODES = ("frequency", "presence")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    raw_path: str | None = None
    raw_format: str = "foursquare_tsv"
    n_hour_slots: int = 24
    gap_hours: float = 72.0
    min_trajectory_len: int = 3
    min_count: int = 10
    # graph
    d_h_km: float = 1.0
    # model
    d: int = 200
    d_u: int = 10
    d_t: int = 30
    d_g: int = 50
    hidden: int = 600
    heads: int = 2
    lambda_r: float = 0.6
    # objective
    lambda_l: float = 1.0
    lambda_c: float = 1.0
    w_c: float = 0.7
    mahec_mode: str = "frequency"
    # optimisation
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    epochs: int = 20
    seed: int = 0
    holdout_fraction: float = 0.1
    eval_every: int = 1
    patience: int = 5
    target_recall: float | None = None
    # ablations
    no_mahec: bool = False
    no_activity: bool = False
    no_hgat: bool = False
    no_agat: bool = False
    no_res: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("n_hour_slots", "min_trajectory_len", "min_count", "d", "d_u", "d_t", "d_g",
                     "hidden", "heads", "batch_size", "epochs", "eval_every", "patience"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        for name in ("gap_hours", "d_h_km", "lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if 24 % self.n_hour_slots:
            raise ConfigError("n_hour_slots must divide 24")
        for name in ("lambda_r", "w_c", "holdout_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.lambda_l < 0 or self.lambda_c < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.mahec_mode not in MAHEC_MODES:
            raise ConfigError(f"mahec_mode must be one of {MAHEC_MODES}")
        if self.raw_format not in ("foursquare_tsv", "canonical_jsonl"):
            raise ConfigError("raw_format must be foursquare_tsv or canonical_jsonl")
        if self.no_activity and self.no_res:
            raise ConfigError("no_activity cannot be combined with no_res")
        if self.no_hgat and self.no_agat:
            raise ConfigError("no_hgat already removes what no_agat keeps")

    # ---- (de)serialisation

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg = cls.__new__(cls)
        for f in fields(cls):
            setattr(cfg, f.name, data.get(f.name, f.default))
        cfg._coerce()
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(os.path.expandvars(str(path)), encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def with_overrides(self, pairs) -> "RunConfig":
        data = self.to_dict()
        for pair in pairs or ():
            key, sep, raw = pair.partition("=")
            if not sep:
                raise ConfigError(f"override {pair!r} is not key=value")
            key = key.strip()
            if key not in data:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            if isinstance(value, str) and value.lower() in ("true", "false", "none", "null"):
                value = {"true": True, "false": False}.get(value.lower())
            data[key] = value
        return RunConfig.from_dict(data)

    def _coerce(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            default = f.default
            if isinstance(default, bool):
                if not isinstance(v, bool):
                    raise ConfigError(f"{f.name} must be true or false")
            elif isinstance(default, float) and isinstance(v, int) and not isinstance(v, bool):
                setattr(self, f.name, float(v))
            elif f.name == "target_recall" and isinstance(v, int) and not isinstance(v, bool):
                setattr(self, f.name, float(v))
            elif f.name == "raw_path" and v is not None:
                setattr(self, f.name, os.path.expandvars(str(v)))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    # ---- views

    def model_config(self, n_users: int, n_activities: int, n_locations: int,
                     n_hour_slots: int | None = None, n_weekdays: int = 7) -> ModelConfig:
        return ModelConfig(n_users=n_users, n_activities=n_activities, n_locations=n_locations,
                           n_hour_slots=n_hour_slots or self.n_hour_slots, n_weekdays=n_weekdays,
                           d=self.d, d_u=self.d_u, d_t=self.d_t, d_g=self.d_g, hidden=self.hidden,
                           heads=self.heads, lambda_r=self.lambda_r, no_hgat=self.no_hgat,
                           no_agat=self.no_agat, no_res=self.no_res, no_activity=self.no_activity)

    def train_settings(self) -> TrainSettings:
        names = {f.name for f in fields(TrainSettings)}
        return TrainSettings(**{k: v for k, v in self.to_dict().items() if k in names})
