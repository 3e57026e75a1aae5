"""Schedule-driven federated training: selection, local SGD, aggregation.

One aggregation round at schedule instant t: clients with at least one
trajectory departing in the elapsed window [previous instant, t) are
eligible; a uniform subset of them copies the delivered global model, runs
local epochs of per-trajectory SGD on the base loss, noises the result per
the privacy config, and uploads it with its in-window sample count n_m. The
server folds the uploads into F <- sum (n_m / n) f_m in canonical client-id
order, refreshes the served traffic state at the instant's slot, and records
the round. Travel-time queries arriving before the next instant are answered
from that state.

The day is partitioned into bands with per-band aggregation intervals; the
default schedule densifies during the rush bands (16 instants per day).

Client selection draws a per-round key from the supplied generator and ranks
clients by a keyed hash, so the chosen subset is uniform, deterministic under
the seed, and insensitive to pool order or to the presence of non-selected
clients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, time, timedelta

import numpy as np

from . import data as datamod
from . import nn
from .data import EPOCH_DATE, TrajectoryRecord, World
from .graph import RoadNetwork, Route
from .model import (
    BaseModelParams,
    ModelConfig,
    PersonalModelParams,
    TimeContext,
    TrafficState,
    base_loss,
    init_base_params,
    personal_loss,
    predict_route,
    traffic_state,
)
from .privacy import DpConfig, noise_params


@dataclass(frozen=True)
class FederatedConfig:
    clients_per_round: int = 10
    local_epochs: int = 2
    base_lr: float = 1e-6
    personal_epochs: int = 300
    personal_lr: float = 3e-4
    dp_epsilon: float = math.inf
    dp_clip: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.clients_per_round < 1:
            raise ValueError("clients_per_round must be >= 1")
        if self.local_epochs < 1 or self.personal_epochs < 1:
            raise ValueError("epoch counts must be >= 1")
        if self.base_lr < 0 or self.personal_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if not (self.dp_epsilon > 0):
            raise ValueError("dp_epsilon must be > 0 (math.inf disables noise)")
        if self.dp_clip <= 0:
            raise ValueError("dp_clip must be > 0")


@dataclass
class ClientState:
    """A client's private data and models; trajectories never leave it."""

    client_id: str
    network: RoadNetwork
    trajectories: list[TrajectoryRecord] = field(default_factory=list)
    profile: object = None
    localized_global: BaseModelParams | None = None
    personal: PersonalModelParams | None = None

    @property
    def sample_count(self) -> int:
        return len(self.trajectories)

    def in_window(self, start: datetime, end: datetime) -> list[TrajectoryRecord]:
        return [t for t in self.trajectories if start <= t.departure < end]


@dataclass(frozen=True)
class AggregationSchedule:
    """Day bands (start hour, end hour, interval hours); bands partition
    [0, 24) and each interval divides its band's length. A band contributes
    instants start, start + delta, ..., end - delta."""

    bands: tuple[tuple[float, float, float], ...]

    def __post_init__(self) -> None:
        if not self.bands:
            raise ValueError("schedule needs at least one band")
        total = 0.0
        ordered = sorted(self.bands, key=lambda b: b[0] % 24)
        for start, end, delta in self.bands:
            length = (end - start) % 24 or 24.0
            if delta <= 0:
                raise ValueError(f"band {start}-{end}: interval must be > 0")
            quotient = length / delta
            if abs(quotient - round(quotient)) > 1e-9:
                raise ValueError(f"band {start}-{end}: interval {delta} does not divide length {length}")
            total += length
        if abs(total - 24.0) > 1e-9:
            raise ValueError(f"bands cover {total} hours, expected exactly 24")
        for i, (start, end, _) in enumerate(ordered):
            nxt = ordered[(i + 1) % len(ordered)][0] % 24
            if abs((end % 24) - nxt) > 1e-9:
                raise ValueError(f"bands do not partition the day: {end % 24} != {nxt}")

    def instants(self) -> list[float]:
        """Sorted aggregation times-of-day in hours."""
        out: set[float] = set()
        for start, end, delta in self.bands:
            length = (end - start) % 24 or 24.0
            steps = int(round(length / delta))
            for i in range(steps):
                out.add(round((start + i * delta) % 24, 9))
        return sorted(out)

    def band_label(self, hour: float) -> str:
        for start, end, delta in self.bands:
            length = (end - start) % 24 or 24.0
            steps = int(round(length / delta))
            for i in range(steps):
                if abs(((start + i * delta) % 24) - hour) < 1e-9:
                    return f"{_fmt_hour(start)}-{_fmt_hour(end)}"
        raise ValueError(f"{hour} is not an aggregation instant of this schedule")


def _fmt_hour(h: float) -> str:
    h = h % 24
    return f"{int(h):02d}:{int(round((h - int(h)) * 60)):02d}"


def default_schedule() -> AggregationSchedule:
    """Dense half-hourly aggregation in the rush bands, sparse overnight."""
    return AggregationSchedule(
        bands=(
            (23.0, 7.0, 4.0),
            (7.0, 9.0, 0.5),
            (9.0, 17.0, 2.0),
            (17.0, 19.0, 0.5),
            (19.0, 23.0, 2.0),
        )
    )


@dataclass(frozen=True)
class Instant:
    """One aggregation instant and its elapsed training window [start, end)."""

    day: int
    hour: float
    start: datetime
    end: datetime

    @property
    def label(self) -> str:
        return _fmt_hour(self.hour)


def day_instants(schedule: AggregationSchedule, day: int, prev_end: datetime | None = None) -> list[Instant]:
    """The day's instants with windows chained from prev_end (or midnight)."""
    day_start = datetime.combine(EPOCH_DATE + timedelta(days=day), time())
    prev = prev_end if prev_end is not None else day_start
    out = []
    for hour in schedule.instants():
        end = day_start + timedelta(hours=hour)
        out.append(Instant(day=day, hour=hour, start=prev, end=end))
        prev = end
    return out


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    day: int
    time_label: str
    band: str
    slot: int
    selected: tuple[str, ...]
    clients: tuple[tuple[str, int, str], ...]  # (id, n_m, upload digest)
    n_total: int
    aggregate_digest: str
    timestamp: str  # simulated aggregation instant, ISO-8601
    skipped: bool
    train_mae: float | None

    def as_dict(self) -> dict:
        return {
            "round": self.round_index,
            "day": self.day,
            "time": self.time_label,
            "band": self.band,
            "slot": self.slot,
            "selected": list(self.selected),
            "clients": [{"id": cid, "n": n, "digest": digest} for cid, n, digest in self.clients],
            "n_total": self.n_total,
            "aggregate_digest": self.aggregate_digest,
            "timestamp": self.timestamp,
            "skipped": self.skipped,
            "train_mae": self.train_mae,
        }


@dataclass
class ServerState:
    network: RoadNetwork
    model_cfg: ModelConfig
    global_params: BaseModelParams
    schedule: AggregationSchedule
    round_index: int = 0
    latest_state: TrafficState | None = None

    def serve(self, route: Route) -> float:
        """Answer a travel-time query from the last aggregated state."""
        if self.latest_state is None:
            raise ValueError("no aggregated traffic state available yet")
        return predict_route(self.latest_state, route, strict=False)


def init_server(
    network: RoadNetwork,
    model_cfg: ModelConfig,
    fed_cfg: FederatedConfig,
    schedule: AggregationSchedule | None = None,
) -> ServerState:
    return ServerState(
        network=network,
        model_cfg=model_cfg,
        global_params=init_base_params(network, model_cfg, fed_cfg.seed),
        schedule=schedule if schedule is not None else default_schedule(),
    )


def build_clients(world: World, days: int = 1) -> list[ClientState]:
    """One client per driver, holding the sampled trajectories of `days`."""
    clients = {d.driver_id: ClientState(client_id=d.driver_id, network=world.network) for d in world.drivers}
    for day in range(days):
        for rec in datamod.sample_trajectories(world, day):
            clients[rec.driver_id].trajectories.append(rec)
    return [clients[k] for k in sorted(clients)]


def select_clients(pool, m: int, rng: np.random.Generator) -> list[str]:
    """Uniform m-subset of client ids, deterministic under the generator seed.

    A single round key is drawn from rng; each client is ranked by a hash of
    (key, client id), so non-selected clients cannot influence the outcome.
    """
    ids = sorted(getattr(c, "client_id", c) for c in pool)
    if len(set(ids)) != len(ids):
        raise ValueError("pool contains duplicate client ids")
    if m > len(ids):
        raise ValueError(f"cannot select {m} clients from a pool of {len(ids)}")
    round_key = int(rng.integers(0, 2**62))
    ranked = sorted(ids, key=lambda cid: (nn.stable_hash("select", round_key, cid), cid))
    return sorted(ranked[:m])


# Local SGD under heavy DP noise can run away within steps. A step is
# skipped when it would move any coordinate further than this cap (or when
# the loss is no longer finite), so unstable samples leave the model
# untouched; a round where every step is skipped re-uploads the delivered
# model as-is. Healthy training stays orders of magnitude below the cap.
_MAX_STEP = 1.0


def _step_ok(loss: float, grads: nn.GradSet, lr: float) -> bool:
    if not math.isfinite(loss):
        return False
    for g in grads.values():
        if g.size and not (lr * float(np.abs(g).max()) <= _MAX_STEP):
            return False
    return True


def client_update(
    client: ClientState,
    global_params: BaseModelParams,
    config: FederatedConfig,
    window: tuple[datetime, datetime],
    round_index: int = 0,
) -> tuple[nn.ParamSet, int]:
    """Local training on the in-window trajectories, then DP noising.

    Copies the delivered global model (overwriting any previous localized
    copy), runs local_epochs passes of per-trajectory SGD in chronological
    order, stores the un-noised result as the client's localized global
    model, and returns the noised upload with the in-window sample count.
    """
    batch = sorted(client.in_window(*window), key=lambda t: (t.departure, t.y))
    if not batch:
        raise ValueError(f"client {client.client_id} has no trajectories in the window")
    localized = global_params.clone()
    values = localized.values
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(config.local_epochs):
            for traj in batch:
                loss, grads = base_loss(client.network, localized, [(traj.route, traj.y)])
                if not _step_ok(loss, grads, config.base_lr):
                    continue
                values = nn.sgd_step(values, grads, config.base_lr)
                localized.values = values
    client.localized_global = localized
    dp = DpConfig(epsilon=config.dp_epsilon, clip_bound=config.dp_clip, seed=config.seed)
    upload = noise_params(values, dp, rng=nn.spawn_rng(config.seed, "dp", client.client_id, round_index))
    return upload, len(batch)


def aggregate(received: list[tuple[int, nn.ParamSet]]) -> nn.ParamSet:
    """Sample-weighted average F = sum (n_m / n) f_m, per coordinate."""
    if not received:
        raise ValueError("nothing to aggregate")
    total = sum(n for n, _ in received)
    if total <= 0:
        raise ValueError("aggregate weight n = 0")
    template = received[0][1]
    out = {k: np.zeros_like(v) for k, v in template.items()}
    for n_m, params in received:
        nn.assert_congruent(template, params)
        weight = n_m / total
        for key in out:
            out[key] += weight * params[key]
    return out


def run_round(
    server: ServerState,
    pool: list[ClientState],
    instant: Instant,
    config: FederatedConfig,
    holidays: frozenset = frozenset(),
) -> tuple[RoundRecord, BaseModelParams, TrafficState | None]:
    """One aggregation round at the given instant.

    Zero eligible clients skips the round (recorded, global untouched).
    """
    window = (instant.start, instant.end)
    ctx = TimeContext.from_datetime(instant.end, server.model_cfg.time_slots, holidays)
    band = server.schedule.band_label(instant.hour)
    eligible = [c for c in pool if c.in_window(*window)]
    if not eligible:
        record = RoundRecord(
            round_index=server.round_index,
            day=instant.day,
            time_label=instant.label,
            band=band,
            slot=ctx.slot,
            selected=(),
            clients=(),
            n_total=0,
            aggregate_digest=nn.params_digest(server.global_params.values),
            timestamp=instant.end.isoformat(),
            skipped=True,
            train_mae=None,
        )
        server.round_index += 1
        return record, server.global_params, server.latest_state

    m = min(config.clients_per_round, len(eligible))
    chosen = select_clients(eligible, m, nn.spawn_rng(config.seed, "select", server.round_index))
    by_id = {c.client_id: c for c in eligible}
    received: list[tuple[int, nn.ParamSet]] = []
    client_rows: list[tuple[str, int, str]] = []
    for cid in chosen:
        upload, n_m = client_update(by_id[cid], server.global_params, config, window, round_index=server.round_index)
        received.append((n_m, upload))
        client_rows.append((cid, n_m, nn.params_digest(upload)))
    new_values = aggregate(received)
    server.global_params = server.global_params.with_values(new_values)
    state = traffic_state(server.network, server.global_params, ctx)
    server.latest_state = state

    errors = []
    state_cache: dict[TimeContext, TrafficState] = {ctx: state}
    for cid in chosen:
        for traj in by_id[cid].in_window(*window):
            tctx = TimeContext.from_datetime(traj.departure, server.model_cfg.time_slots, holidays)
            if tctx not in state_cache:
                state_cache[tctx] = traffic_state(server.network, server.global_params, tctx)
            errors.append(abs(predict_route(state_cache[tctx], traj.route) - traj.y))
    record = RoundRecord(
        round_index=server.round_index,
        day=instant.day,
        time_label=instant.label,
        band=band,
        slot=ctx.slot,
        selected=tuple(chosen),
        clients=tuple(client_rows),
        n_total=sum(n for n, _ in received),
        aggregate_digest=nn.params_digest(new_values),
        timestamp=instant.end.isoformat(),
        skipped=False,
        train_mae=float(np.mean(errors)) if errors else None,
    )
    server.round_index += 1
    return record, server.global_params, state


def fine_tune_personal(client: ClientState, config: FederatedConfig, holidays: frozenset = frozenset()) -> PersonalModelParams:
    """Personal-model SGD on residuals against the frozen localized global.

    The localized global model's bytes are digest-guarded: fine-tuning must
    not alter them.
    """
    if client.localized_global is None:
        raise ValueError("client has no localized global model to freeze")
    if client.personal is None:
        raise ValueError("client personal model is not initialized")
    if client.profile is None:
        raise ValueError("client profile has not been extracted")
    guard = nn.params_digest(client.localized_global.values)
    n_slots = client.localized_global.cfg.time_slots
    states: dict[TimeContext, TrafficState] = {}
    pairs: list[tuple[float, float]] = []
    for traj in sorted(client.trajectories, key=lambda t: (t.departure, t.y)):
        ctx = TimeContext.from_datetime(traj.departure, n_slots, holidays)
        if ctx not in states:
            states[ctx] = traffic_state(client.network, client.localized_global, ctx)
        pairs.append((traj.y, predict_route(states[ctx], traj.route)))
    values = client.personal.values
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(config.personal_epochs):
            for pair in pairs:
                loss, grads = personal_loss(client.profile, client.personal, [pair])
                if not _step_ok(loss, grads, config.personal_lr):
                    continue
                values = nn.sgd_step(values, grads, config.personal_lr)
                client.personal.values = values
    if nn.params_digest(client.localized_global.values) != guard:
        raise RuntimeError("fine-tuning altered the frozen localized global model")
    return client.personal
