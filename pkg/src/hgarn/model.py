"""The hierarchical graph attention recurrent network and its ablations."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .dataset import Trajectory
from .hiergraph import HierarchicalGraph
from .tensor import Tensor

EMBED_INIT = 0.05


@dataclass
class ModelConfig:
    n_users: int
    n_activities: int
    n_locations: int
    n_hour_slots: int = 24
    n_weekdays: int = 7
    d: int = 200
    d_u: int = 10
    d_t: int = 30
    d_g: int = 50
    hidden: int = 600
    heads: int = 2
    lambda_r: float = 0.6
    no_hgat: bool = False
    no_agat: bool = False
    no_res: bool = False
    no_activity: bool = False

    def __post_init__(self):
        for name in ("n_users", "n_activities", "n_locations", "n_hour_slots", "n_weekdays",
                     "d", "d_u", "d_t", "d_g", "hidden", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.lambda_r <= 1.0:
            raise ValueError("lambda_r must lie in [0, 1]")
        if self.no_activity and self.no_res:
            raise ValueError("no_activity leaves only the residual decoder; it cannot be "
                             "combined with no_res")
        if self.no_hgat and self.no_agat:
            raise ValueError("no_agat keeps the location-layer attention that no_hgat removes")

    @property
    def has_activity(self) -> bool:
        return not self.no_activity

    @property
    def has_loc_graph(self) -> bool:
        return not self.no_hgat

    @property
    def has_act_graph(self) -> bool:
        return self.has_activity and not (self.no_hgat or self.no_agat)

    @property
    def has_residual(self) -> bool:
        return not self.no_res

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class GraphMasks:
    """Boolean attention masks derived once from a graph."""

    loc: np.ndarray
    loc_act: np.ndarray
    act: np.ndarray

    @classmethod
    def from_graph(cls, graph: HierarchicalGraph) -> "GraphMasks":
        loc_act = graph.a_loc_act > 0
        # a category without venues would be an isolated node; give it a self-loop
        empty = ~loc_act.any(axis=1)
        loc_act[empty, empty] = True
        return cls(graph.a_loc > 0, loc_act, graph.a_cc_new > 0)


@dataclass
class GraphReps:
    h_loc: Tensor | None
    h_act: Tensor | None
    attention: dict[str, list[np.ndarray]] | None = None


# --------------------------------------------------------------------------
# building blocks


def gat_layer(h: Tensor, mask: np.ndarray, params: dict[str, Tensor], prefix: str,
              heads: int, attention_out: list | None = None) -> Tensor:
    """Multi-head masked graph attention followed by a shared projection.

    Per head: Z = H W_k, scores s1 + s2^T from the two reduced attention
    vectors, LeakyReLU, masked row softmax, ELU(alpha Z). Heads are
    concatenated and mapped with W, b.
    """
    outs = []
    for k in range(heads):
        z = h @ params[f"{prefix}.W{k}"]
        src = z @ params[f"{prefix}.a_src{k}"]
        dst = z @ params[f"{prefix}.a_dst{k}"]
        e = T.leaky_relu(src + dst.T)
        alpha = T.masked_softmax_rows(e, mask)
        if attention_out is not None:
            attention_out.append(alpha.data.copy())
        outs.append(T.elu(alpha @ z))
    cat = outs[0] if heads == 1 else T.concat(outs, "cols")
    return cat @ params[f"{prefix}.W"] + params[f"{prefix}.b"]


def lstm_step(xw: Tensor, h_prev: Tensor | None, c_prev: Tensor | None,
              w_h: Tensor, b_h: Tensor) -> tuple[Tensor, Tensor]:
    """One recurrence given the already-projected input ``xw = x W_x + b_x``.

    ``None`` states stand for the all-zero initial state.
    """
    pre = xw + b_h if h_prev is None else xw + (h_prev @ w_h + b_h)
    n = pre.shape[1] // 4
    p = T.sigmoid(T.slice_cols(pre, 0, n))
    q = T.sigmoid(T.slice_cols(pre, n, 2 * n))
    g = T.tanh(T.slice_cols(pre, 2 * n, 3 * n))
    o = T.sigmoid(T.slice_cols(pre, 3 * n, 4 * n))
    c = p * g if c_prev is None else q * c_prev + p * g
    return o * T.tanh(c), c


def encode_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, params: dict[str, Tensor],
                prefix: str) -> tuple[Tensor, Tensor]:
    xw = x @ params[f"{prefix}.W_x"] + params[f"{prefix}.b_x"]
    return lstm_step(xw, h_prev, c_prev, params[f"{prefix}.W_h"], params[f"{prefix}.b_h"])


def _linear(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return x @ params[f"{prefix}.W"] + params[f"{prefix}.b"]


# --------------------------------------------------------------------------


class HGARN:
    """Parameters plus the forward pass.

    ``params`` is an ordered name -> leaf tensor mapping; names encode the
    sub-module (``emb.location``, ``gat_loc.W0``, ``lstm_loc.W_h``...).
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self._build()

    # ---- construction

    def _add(self, name: str, shape: tuple[int, int], bound: float | None) -> None:
        data = np.zeros(shape) if bound is None else self.rng.uniform(-bound, bound, shape)
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def _add_gat(self, prefix: str, d_in: int, d_out: int) -> None:
        cfg = self.config
        glorot = np.sqrt(6.0 / (d_in + cfg.d_g))
        for k in range(cfg.heads):
            self._add(f"{prefix}.W{k}", (d_in, cfg.d_g), glorot)
            self._add(f"{prefix}.a_src{k}", (cfg.d_g, 1), np.sqrt(6.0 / (cfg.d_g + 1)))
            self._add(f"{prefix}.a_dst{k}", (cfg.d_g, 1), np.sqrt(6.0 / (cfg.d_g + 1)))
        self._add(f"{prefix}.W", (cfg.heads * cfg.d_g, d_out), np.sqrt(6.0 / (cfg.heads * cfg.d_g + d_out)))
        self._add(f"{prefix}.b", (1, d_out), None)

    def _add_lstm(self, prefix: str, d_in: int) -> None:
        hid = self.config.hidden
        bound = 1.0 / np.sqrt(hid)
        self._add(f"{prefix}.W_x", (d_in, 4 * hid), bound)
        self._add(f"{prefix}.b_x", (1, 4 * hid), bound)
        self._add(f"{prefix}.W_h", (hid, 4 * hid), bound)
        self._add(f"{prefix}.b_h", (1, 4 * hid), bound)

    def _add_linear(self, prefix: str, d_in: int, d_out: int) -> None:
        bound = 1.0 / np.sqrt(d_in)
        self._add(f"{prefix}.W", (d_in, d_out), bound)
        self._add(f"{prefix}.b", (1, d_out), bound)

    def _build(self) -> None:
        cfg = self.config
        self._add("emb.user", (cfg.n_users, cfg.d_u), EMBED_INIT)
        self._add("emb.hour", (cfg.n_hour_slots, cfg.d_t), EMBED_INIT)
        self._add("emb.weekday", (cfg.n_weekdays, cfg.d_t), EMBED_INIT)
        self._add("emb.location", (cfg.n_locations, cfg.d), EMBED_INIT)
        if cfg.has_activity:
            self._add("emb.activity", (cfg.n_activities, cfg.d), EMBED_INIT)
        if cfg.has_loc_graph:
            self._add_gat("gat_loc", cfg.d, cfg.d_g)
        if cfg.has_act_graph:
            self._add_gat("gat_lc", cfg.d, cfg.d)
            self._add_gat("gat_act", cfg.d, cfg.d_g)
        self._add_lstm("lstm_loc", self.location_input_width)
        if cfg.has_activity:
            self._add_lstm("lstm_act", self.activity_input_width)
            self._add_linear("mlp_c", cfg.hidden, cfg.n_activities)
            self._add_linear("mlp_l_h", 2 * cfg.hidden, cfg.hidden)
            self._add_linear("mlp_l", cfg.hidden + cfg.n_activities, cfg.n_locations)
        if cfg.has_residual:
            self._add_linear("mlp_l_r", cfg.hidden, cfg.n_locations)

    @property
    def activity_input_width(self) -> int:
        cfg = self.config
        return cfg.d_u + cfg.d_t + cfg.d + (cfg.d_g if cfg.has_act_graph else 0)

    @property
    def location_input_width(self) -> int:
        cfg = self.config
        width = cfg.d_u + cfg.d_t + cfg.d
        if cfg.has_act_graph:
            width += cfg.d_g
        if cfg.has_loc_graph:
            width += cfg.d_g
        return width

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    # ---- forward

    def graph_reps(self, masks: GraphMasks | HierarchicalGraph, keep_attention: bool = False
                   ) -> GraphReps:
        """H^L and H^C for the current embeddings (``None`` where ablated)."""
        if isinstance(masks, HierarchicalGraph):
            masks = GraphMasks.from_graph(masks)
        cfg, p = self.config, self.params
        att = {"loc": [], "lc": [], "act": []} if keep_attention else None
        h_loc = h_act = None
        e_l = p["emb.location"]
        if cfg.has_loc_graph:
            h_loc = gat_layer(e_l, masks.loc, p, "gat_loc", cfg.heads, att and att["loc"])
        if cfg.has_act_graph:
            e_c = p["emb.activity"]
            n_l, n_c = cfg.n_locations, cfg.n_activities
            lc = gat_layer(T.concat([e_l, e_c], "rows"), masks.loc_act, p, "gat_lc", cfg.heads,
                           att and att["lc"])
            h_lc = T.slice_rows(lc, n_l, n_l + n_c)
            act = gat_layer(T.concat([e_c, h_lc], "rows"), masks.act, p, "gat_act", cfg.heads,
                            att and att["act"])
            h_act = T.slice_rows(act, 0, n_c)
        return GraphReps(h_loc, h_act, att)

    def forward(self, batch: Sequence[Trajectory], reps: GraphReps
                ) -> tuple[Tensor | None, Tensor]:
        """Next-activity and next-location logits for trajectories whose
        histories all have the same length. Rows follow ``batch`` order."""
        if not batch:
            raise ValueError("empty batch")
        n = len(batch[0].history)
        if n < 1:
            raise ValueError("trajectory history is empty")
        if any(len(t.history) != n for t in batch):
            raise ValueError("batched trajectories need equal history lengths")
        cfg, p = self.config, self.params
        b = len(batch)
        # step-major flattening: row i*b + j is step i of trajectory j
        def ids(attr):
            return np.array([[getattr(r, attr) for r in t.history] for t in batch]).T.reshape(-1)

        users = np.repeat(np.array([[t.user_id for t in batch]]), n, axis=0).reshape(-1)
        acts, locs = ids("activity_id"), ids("location_id")
        e_u = T.gather_rows(p["emb.user"], users)
        e_t = T.gather_rows(p["emb.hour"], ids("hour_slot")) + T.gather_rows(p["emb.weekday"], ids("weekday"))
        h_act_rows = T.gather_rows(reps.h_act, acts) if reps.h_act is not None else None

        loc_parts = [e_u, e_t, T.gather_rows(p["emb.location"], locs)]
        if h_act_rows is not None:
            loc_parts.append(h_act_rows)
        if reps.h_loc is not None:
            loc_parts.append(T.gather_rows(reps.h_loc, locs))
        h_l = self._encode(T.concat(loc_parts, "cols"), "lstm_loc", n, b)

        if not cfg.has_activity:
            return None, _linear(h_l, p, "mlp_l_r")

        act_parts = [e_u, e_t, T.gather_rows(p["emb.activity"], acts)]
        if h_act_rows is not None:
            act_parts.append(h_act_rows)
        h_c = self._encode(T.concat(act_parts, "cols"), "lstm_act", n, b)

        act_logits = _linear(h_c, p, "mlp_c")
        fused = T.tanh(_linear(T.concat([h_l, h_c], "cols"), p, "mlp_l_h"))
        via_act = _linear(T.concat([fused, act_logits], "cols"), p, "mlp_l")
        if not cfg.has_residual:
            return act_logits, via_act
        direct = _linear(h_l, p, "mlp_l_r")
        lam = cfg.lambda_r
        return act_logits, direct * lam + via_act * (1.0 - lam)

    def _encode(self, x: Tensor, prefix: str, steps: int, batch: int) -> Tensor:
        p = self.params
        xw = x @ p[f"{prefix}.W_x"] + p[f"{prefix}.b_x"]
        h = c = None
        for i in range(steps):
            step = xw if steps == 1 else T.slice_rows(xw, i * batch, (i + 1) * batch)
            h, c = lstm_step(step, h, c, p[f"{prefix}.W_h"], p[f"{prefix}.b_h"])
        return h

    # ---- state

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)
            self.params[k].zero_grad()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()


def build_variant(n_users: int, n_activities: int, n_locations: int, *, seed: int = 0,
                  **options) -> HGARN:
    """Model for the given ablation flags (``no_hgat``, ``no_agat``, ``no_res``,
    ``no_activity``) and dimensions; ``no_mahec`` is a training-time flag and
    is accepted and ignored here."""
    options.pop("no_mahec", None)
    cfg = ModelConfig(n_users=n_users, n_activities=n_activities, n_locations=n_locations, **options)
    return HGARN(cfg, seed=seed)


def config_dict(model: HGARN) -> dict:
    return asdict(model.config)
