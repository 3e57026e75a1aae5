"""Base traffic-state model and personal residual model.

Base model pipeline, per entity kind (edges and nodes):

1. embedding: per-categorical-slot table lookups, summed with a
   slot-independent identity embedding and an affine projection of the
   standardized numeric features;
2. spatial graph convolution: ``ReLU(sum_c theta_c L^c h) W`` per layer,
   with L the symmetric normalized Laplacian and powers applied iteratively;
3. spatio-temporal cross product: per-entity head rows ``U = hW + b`` (b is a
   per-entity scalar) contracted with a temporal attention vector ``a`` into
   scalar travel times ``Y = output_scale * (U @ a)``;
4. route prediction: sum of the route's edge entries and interior-node
   entries of the traffic state at the route's slot.

The temporal attention vector comes from a K x I table whose row k encodes
(day-of-week one-hot, slot-k one-hot, holiday embedding) through a linear
projection; component i of the attention is the softmax over the K slots of
column i, evaluated at the context's slot. With a purely linear projection
the day-of-week and holiday contributions are constant per column and cancel
in the softmax, so attention varies with the slot only; the construction is
kept as stated for shape fidelity.

The personal model maps a driver profile (embedded sparse features plus
linearly transformed standardized dense features) through one linear head to
a scalar bias in seconds; the final prediction is ``y_hat + bias``.

All backward passes are hand-written and certified by nn.check_gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from datetime import datetime

import numpy as np

from . import nn
from .graph import RoadNetwork, Route

# Edge-indexed tensors (one row/coordinate per edge), the difference attack's
# default observation surface.
EDGE_INDEXED_TABLES = ("embed_e.identity", "head_e.b")

DAYS_PER_WEEK = 7


@dataclass(frozen=True)
class ModelConfig:
    """Shapes and scaling of the base and personal models.

    output_scale multiplies the cross-product output; it is a fixed constant
    (never trained, noised, or aggregated) that keeps trainable coordinates
    at order one while predictions live at hundreds of seconds.
    """

    embed_dim: int = 16
    gcn_layers: int = 1
    hops: int = 2
    head_width: int = 16
    time_slots: int = 48
    holiday_dim: int = 4
    output_scale: float = 300.0
    personal_embed_dim: int = 4
    personal_dense_dim: int = 4
    profile_arity: int = 5

    def __post_init__(self) -> None:
        if self.hops < 0:
            raise ValueError("hops must be >= 0")
        if self.time_slots < 1:
            raise ValueError("time_slots must be >= 1")
        if self.gcn_layers < 1:
            raise ValueError("gcn_layers must be >= 1")
        for name in ("embed_dim", "head_width", "holiday_dim", "personal_embed_dim", "personal_dense_dim", "profile_arity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(frozen=True)
class TimeContext:
    day_of_week: int  # 0 = Monday
    slot: int
    is_holiday: bool = False

    @classmethod
    def from_datetime(cls, dt: datetime, n_slots: int, holidays: frozenset = frozenset()) -> "TimeContext":
        return cls(day_of_week=dt.weekday(), slot=slot_of_time(dt, n_slots), is_holiday=dt.date() in holidays)

    def sort_key(self) -> tuple[int, int, bool]:
        return (self.day_of_week, self.slot, self.is_holiday)


def slot_of_time(dt: datetime, n_slots: int) -> int:
    seconds = dt.hour * 3600 + dt.minute * 60 + dt.second
    return min(int(seconds / 86400.0 * n_slots), n_slots - 1)


@dataclass
class TrafficState:
    """Per-slot estimated travel times for every edge and node (seconds)."""

    slot: int
    n_slots: int
    y_edges: np.ndarray
    y_nodes: np.ndarray


@dataclass
class BaseModelParams:
    """Trainable tensors plus the fixed numeric-feature standardization.

    The standardization constants are a pure function of the network, so they
    are recomputed on load and never travel with uploads or checkpoints.
    """

    cfg: ModelConfig
    values: nn.ParamSet
    edge_num_mean: np.ndarray = field(repr=False)
    edge_num_std: np.ndarray = field(repr=False)
    node_num_mean: np.ndarray = field(repr=False)
    node_num_std: np.ndarray = field(repr=False)

    def clone(self) -> "BaseModelParams":
        return replace(self, values=nn.clone_params(self.values))

    def with_values(self, values: nn.ParamSet) -> "BaseModelParams":
        return replace(self, values=values)


def _param_shapes(network: RoadNetwork, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, j_width, k, h = cfg.embed_dim, cfg.head_width, cfg.time_slots, cfg.holiday_dim
    shapes: dict[str, tuple[int, ...]] = {}
    for side, vocabs, count, num_cols in (
        ("e", network.edge_vocabs, network.n_edges, network.edge_numeric.shape[1]),
        ("v", network.node_vocabs, network.n_nodes, network.node_numeric.shape[1]),
    ):
        for slot_idx, vocab in enumerate(vocabs):
            shapes[f"embed_{side}.slot{slot_idx}"] = (vocab, d)
        shapes[f"embed_{side}.identity"] = (count, d)
        shapes[f"num_proj_{side}.w"] = (num_cols, d)
        shapes[f"num_proj_{side}.b"] = (d,)
        for layer in range(cfg.gcn_layers):
            shapes[f"gcn_{side}.l{layer}.w"] = (d, d)
            shapes[f"gcn_{side}.l{layer}.theta"] = (cfg.hops + 1,)
        shapes[f"head_{side}.w"] = (d, j_width)
        shapes[f"head_{side}.b"] = (count,)
    shapes["temporal.holiday"] = (2, h)
    shapes["temporal.w"] = (DAYS_PER_WEEK + k + h, j_width)
    shapes["temporal.b"] = (j_width,)
    return shapes


def _standardization(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = matrix.mean(axis=0) if matrix.size else np.zeros(matrix.shape[1])
    std = matrix.std(axis=0) if matrix.size else np.ones(matrix.shape[1])
    std = np.where(std < 1e-9, 1.0, std)
    return mean, std


def init_base_params(network: RoadNetwork, cfg: ModelConfig, seed: int) -> BaseModelParams:
    """Seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init, one independent
    stream per tensor so the result is insensitive to creation order."""
    values: nn.ParamSet = {}
    for name, shape in sorted(_param_shapes(network, cfg).items()):
        values[name] = nn.init_uniform(shape, nn.spawn_rng(seed, "init", name))
    em, es = _standardization(network.edge_numeric)
    vm, vs = _standardization(network.node_numeric)
    return BaseModelParams(cfg=cfg, values=values, edge_num_mean=em, edge_num_std=es, node_num_mean=vm, node_num_std=vs)


# ---------------------------------------------------------------------------
# forward passes


def embed_features(network: RoadNetwork, params: BaseModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Initial entity representations: summed slot lookups + identity rows +
    projected standardized numeric features."""
    he, _ = _embed_side(network, params, "e")
    hv, _ = _embed_side(network, params, "v")
    return he, hv


def _embed_side(network: RoadNetwork, params: BaseModelParams, side: str):
    v = params.values
    if side == "e":
        cat, num = network.edge_categorical, network.edge_numeric
        mean, std = params.edge_num_mean, params.edge_num_std
    else:
        cat, num = network.node_categorical, network.node_numeric
        mean, std = params.node_num_mean, params.node_num_std
    x = (num - mean) / std
    h = x @ v[f"num_proj_{side}.w"] + v[f"num_proj_{side}.b"]
    for slot_idx in range(cat.shape[1]):
        table = v[f"embed_{side}.slot{slot_idx}"]
        ids = cat[:, slot_idx]
        if ids.size and ids.max() >= table.shape[0]:
            raise IndexError(f"categorical value {ids.max()} outside vocabulary {table.shape[0]} for slot {slot_idx}")
        h = h + table[ids]
    h = h + v[f"embed_{side}.identity"]
    return h, x


def gcn_forward(laplacian, h: np.ndarray, w: np.ndarray, theta: np.ndarray, hops: int) -> np.ndarray:
    """One graph-convolution layer: ReLU(sum_{c=0}^{hops} theta_c L^c h) W.

    Powers of L are applied iteratively; L^c is never materialized.
    """
    if laplacian.shape[0] != h.shape[0]:
        raise ValueError(f"laplacian rows {laplacian.shape[0]} != h rows {h.shape[0]}")
    if len(theta) != hops + 1:
        raise ValueError(f"theta must have {hops + 1} coefficients, got {len(theta)}")
    acc = theta[0] * h
    power = h
    for c in range(1, hops + 1):
        power = laplacian @ power
        acc = acc + theta[c] * power
    return nn.relu(acc) @ w


def _gcn_stack_forward(laplacian, h0: np.ndarray, params: BaseModelParams, side: str):
    caches = []
    h = h0
    for layer in range(params.cfg.gcn_layers):
        w = params.values[f"gcn_{side}.l{layer}.w"]
        theta = params.values[f"gcn_{side}.l{layer}.theta"]
        powers = [h]
        for _ in range(params.cfg.hops):
            powers.append(laplacian @ powers[-1])
        s = theta[0] * powers[0]
        for c in range(1, len(theta)):
            s = s + theta[c] * powers[c]
        activated = nn.relu(s)
        caches.append({"powers": powers, "mask": s > 0, "activated": activated, "w": w, "theta": theta})
        h = activated @ w
    return h, caches


def _gcn_stack_backward(laplacian, caches, d_out: np.ndarray, grads: nn.GradSet, side: str) -> np.ndarray:
    for layer in reversed(range(len(caches))):
        cache = caches[layer]
        grads[f"gcn_{side}.l{layer}.w"] += cache["activated"].T @ d_out
        d_act = d_out @ cache["w"].T
        d_s = np.where(cache["mask"], d_act, 0.0)
        theta = cache["theta"]
        powers = cache["powers"]
        grads[f"gcn_{side}.l{layer}.theta"] += np.array([float(np.sum(powers[c] * d_s)) for c in range(len(theta))])
        d_h = theta[0] * d_s
        q = d_s
        for c in range(1, len(theta)):
            q = laplacian @ q  # L symmetric, so L^T = L
            d_h = d_h + theta[c] * q
        d_out = d_h
    return d_out


def _temporal_code(ctx: TimeContext, cfg: ModelConfig, holiday_table: np.ndarray) -> np.ndarray:
    """(K, 7+K+holiday_dim) raw codes: row k is the context rendered at slot k."""
    k = cfg.time_slots
    dow = np.zeros(DAYS_PER_WEEK)
    dow[ctx.day_of_week] = 1.0
    hol = holiday_table[1 if ctx.is_holiday else 0]
    return np.concatenate([np.tile(dow, (k, 1)), np.eye(k), np.tile(hol, (k, 1))], axis=1)


def build_temporal_table(params: BaseModelParams, ctx: TimeContext) -> np.ndarray:
    """K x I table of projected temporal codes for the context's day."""
    code = _temporal_code(ctx, params.cfg, params.values["temporal.holiday"])
    return code @ params.values["temporal.w"] + params.values["temporal.b"]


def temporal_attention(temporal_table: np.ndarray, ctx: TimeContext) -> np.ndarray:
    """Length-I attention: per column, softmax over the K slots, read at the
    context's slot. Components lie in (0, 1)."""
    if not 0 <= ctx.slot < temporal_table.shape[0]:
        raise ValueError(f"slot {ctx.slot} outside table with K={temporal_table.shape[0]}")
    probs = nn.softmax(temporal_table, axis=0)
    return probs[ctx.slot].copy()


def _heads_forward(network: RoadNetwork, params: BaseModelParams):
    v = params.values
    he0, xe = _embed_side(network, params, "e")
    hv0, xv = _embed_side(network, params, "v")
    he, caches_e = _gcn_stack_forward(network.laplacian_edges, he0, params, "e")
    hv, caches_v = _gcn_stack_forward(network.laplacian_nodes, hv0, params, "v")
    ue = he @ v["head_e.w"] + v["head_e.b"][:, None]
    uv = hv @ v["head_v.w"] + v["head_v.b"][:, None]
    return {"xe": xe, "xv": xv, "he": he, "hv": hv, "ue": ue, "uv": uv, "caches_e": caches_e, "caches_v": caches_v}


def traffic_state(network: RoadNetwork, params: BaseModelParams, ctx: TimeContext) -> TrafficState:
    """Estimated travel-time vectors for every edge and node at ctx."""
    fw = _heads_forward(network, params)
    a = temporal_attention(build_temporal_table(params, ctx), ctx)
    scale = params.cfg.output_scale
    return TrafficState(
        slot=ctx.slot,
        n_slots=params.cfg.time_slots,
        y_edges=scale * (fw["ue"] @ a),
        y_nodes=scale * (fw["uv"] @ a),
    )


def predict_route(state: TrafficState, route: Route, strict: bool = True) -> float:
    """Sum of the route's edge entries plus interior-node entries.

    With strict=True the route's departure slot must match the state's slot;
    strict=False serves online queries from the latest available state.
    """
    route_slot = slot_of_time(route.departure_time, state.n_slots)
    if strict and route_slot != state.slot:
        raise ValueError(f"route slot {route_slot} does not match state slot {state.slot}")
    total = 0.0
    for pos in route.edge_positions():
        total += float(state.y_edges[pos])
    for pos in route.node_positions():
        total += float(state.y_nodes[pos])
    return total


# ---------------------------------------------------------------------------
# base-model loss and analytic backward


def base_loss(
    network: RoadNetwork,
    params: BaseModelParams,
    batch: list[tuple[Route, float]],
    holidays: frozenset = frozenset(),
) -> tuple[float, nn.GradSet]:
    """Sum of squared route errors and gradients over every base tensor.

    Routes are grouped by time context; embeddings, graph convolutions, and
    heads are shared across the batch, so one backward pass serves all groups.
    """
    if not batch:
        raise ValueError("empty batch")
    cfg = params.cfg
    v = params.values
    scale = cfg.output_scale
    fw = _heads_forward(network, params)
    ue, uv = fw["ue"], fw["uv"]
    grads = nn.zeros_like_params(v)

    groups: dict[TimeContext, list[tuple[Route, float]]] = {}
    for route, y in batch:
        ctx = TimeContext.from_datetime(route.departure_time, cfg.time_slots, holidays)
        groups.setdefault(ctx, []).append((route, y))

    due = np.zeros_like(ue)
    duv = np.zeros_like(uv)
    loss = 0.0
    for ctx in sorted(groups, key=TimeContext.sort_key):
        code = _temporal_code(ctx, cfg, v["temporal.holiday"])
        table = code @ v["temporal.w"] + v["temporal.b"]
        probs = nn.softmax(table, axis=0)
        attn = probs[ctx.slot]
        w_edges = np.zeros(network.n_edges)
        w_nodes = np.zeros(network.n_nodes)
        d_attn = np.zeros_like(attn)
        for route, y in groups[ctx]:
            e_pos = route.edge_positions()
            n_pos = route.node_positions()
            srow = ue[e_pos].sum(axis=0)
            if n_pos:
                srow = srow + uv[n_pos].sum(axis=0)
            err = scale * float(srow @ attn) - y
            loss += err * err
            g = 2.0 * err
            np.add.at(w_edges, e_pos, g)
            if n_pos:
                np.add.at(w_nodes, n_pos, g)
            d_attn += g * scale * srow
        due += scale * np.outer(w_edges, attn)
        duv += scale * np.outer(w_nodes, attn)
        # softmax-at-slot backward: a_i = probs[t, i]
        d_at_slot = d_attn * probs[ctx.slot]
        d_table = -probs * d_at_slot[None, :]
        d_table[ctx.slot] += d_at_slot
        grads["temporal.w"] += code.T @ d_table
        grads["temporal.b"] += d_table.sum(axis=0)
        d_code = d_table @ v["temporal.w"].T
        hol_block = DAYS_PER_WEEK + cfg.time_slots
        grads["temporal.holiday"][1 if ctx.is_holiday else 0] += d_code[:, hol_block:].sum(axis=0)

    for side, du, h_top, caches, laplacian, cat, x_std in (
        ("e", due, fw["he"], fw["caches_e"], network.laplacian_edges, network.edge_categorical, fw["xe"]),
        ("v", duv, fw["hv"], fw["caches_v"], network.laplacian_nodes, network.node_categorical, fw["xv"]),
    ):
        grads[f"head_{side}.w"] += h_top.T @ du
        grads[f"head_{side}.b"] += du.sum(axis=1)
        d_h = du @ v[f"head_{side}.w"].T
        d_h0 = _gcn_stack_backward(laplacian, caches, d_h, grads, side)
        grads[f"embed_{side}.identity"] += d_h0
        for slot_idx in range(cat.shape[1]):
            table = v[f"embed_{side}.slot{slot_idx}"]
            grads[f"embed_{side}.slot{slot_idx}"] += nn.embedding_scatter(table.shape, cat[:, slot_idx], d_h0)
        grads[f"num_proj_{side}.w"] += x_std.T @ d_h0
        grads[f"num_proj_{side}.b"] += d_h0.sum(axis=0)
    return loss, grads


# ---------------------------------------------------------------------------
# personal residual model


@dataclass(frozen=True)
class DriverProfile:
    """Sparse + dense driver descriptors feeding the personal model.

    top_regions / top_edges are fixed-arity id lists padded with the reserved
    padding id (grid cell count, resp. edge count).
    """

    break_start_h: float
    break_end_h: float
    top_regions: tuple[int, ...]
    top_edges: tuple[int, ...]
    avg_trip_distance_m: float
    trips_per_day: float

    def dense_features(self) -> np.ndarray:
        return np.array([self.break_start_h, self.break_end_h, self.avg_trip_distance_m, self.trips_per_day])


@dataclass
class PersonalModelParams:
    cfg: ModelConfig
    values: nn.ParamSet
    dense_mean: np.ndarray = field(repr=False)
    dense_std: np.ndarray = field(repr=False)

    def clone(self) -> "PersonalModelParams":
        return replace(self, values=nn.clone_params(self.values))


def fit_dense_stats(profiles: list[DriverProfile]) -> tuple[np.ndarray, np.ndarray]:
    """Population mean/std of the dense profile features, stored with the
    model so inference standardizes reproducibly."""
    matrix = np.stack([p.dense_features() for p in profiles])
    return _standardization(matrix)


def init_personal_params(
    n_region_cells: int,
    n_edges: int,
    cfg: ModelConfig,
    seed: int,
    dense_mean: np.ndarray | None = None,
    dense_std: np.ndarray | None = None,
) -> PersonalModelParams:
    pd = cfg.personal_embed_dim
    dd = cfg.personal_dense_dim
    x_dim = 2 * cfg.profile_arity * pd + dd
    shapes = {
        "p.region": (n_region_cells + 1, pd),
        "p.edge": (n_edges + 1, pd),
        "p.dense.w": (4, dd),
        "p.dense.b": (dd,),
        "p.head.w": (x_dim, 1),
        "p.head.b": (1,),
    }
    values = {name: nn.init_uniform(shape, nn.spawn_rng(seed, "p-init", name)) for name, shape in sorted(shapes.items())}
    return PersonalModelParams(
        cfg=cfg,
        values=values,
        dense_mean=dense_mean if dense_mean is not None else np.zeros(4),
        dense_std=dense_std if dense_std is not None else np.ones(4),
    )


def _personal_forward(profile: DriverProfile, params: PersonalModelParams):
    v = params.values
    x_dense = (profile.dense_features() - params.dense_mean) / params.dense_std
    hidden = x_dense @ v["p.dense.w"] + v["p.dense.b"]
    regions = nn.embedding_lookup(v["p.region"], profile.top_regions)
    edges = nn.embedding_lookup(v["p.edge"], profile.top_edges)
    x_u = np.concatenate([regions.ravel(), edges.ravel(), hidden])
    bias = float(x_u @ v["p.head.w"][:, 0]) + float(v["p.head.b"][0])
    return bias, {"x_dense": x_dense, "x_u": x_u, "regions": regions.shape, "edges": edges.shape}


def personal_bias(profile: DriverProfile, params: PersonalModelParams) -> float:
    """Scalar travel-time bias in seconds for this driver."""
    return _personal_forward(profile, params)[0]


def predict_final(y_hat: float, bias: float) -> float:
    """Personalized prediction: base estimate plus the driver bias."""
    return y_hat + bias


def personal_loss(
    profile: DriverProfile,
    params: PersonalModelParams,
    batch: list[tuple[float, float]],
) -> tuple[float, nn.GradSet]:
    """Sum over (y, y_hat) pairs of (y - y_hat - bias)^2 with gradients that
    touch only the personal tensors; y_hat values are frozen inputs."""
    if not batch:
        raise ValueError("empty batch")
    v = params.values
    bias, cache = _personal_forward(profile, params)
    grads = nn.zeros_like_params(v)
    loss = 0.0
    d_bias = 0.0
    for y, y_hat in batch:
        r = y - y_hat - bias
        loss += r * r
        d_bias += -2.0 * r
    x_u = cache["x_u"]
    grads["p.head.w"] += d_bias * x_u[:, None]
    grads["p.head.b"] += np.array([d_bias])
    d_xu = d_bias * v["p.head.w"][:, 0]
    pd = params.cfg.personal_embed_dim
    arity = params.cfg.profile_arity
    region_block = arity * pd
    d_regions = d_xu[:region_block].reshape(arity, pd)
    d_edges = d_xu[region_block : 2 * region_block].reshape(arity, pd)
    d_hidden = d_xu[2 * region_block :]
    grads["p.region"] += nn.embedding_scatter(v["p.region"].shape, profile.top_regions, d_regions)
    grads["p.edge"] += nn.embedding_scatter(v["p.edge"].shape, profile.top_edges, d_edges)
    grads["p.dense.w"] += np.outer(cache["x_dense"], d_hidden)
    grads["p.dense.b"] += d_hidden
    return loss, grads
