"""Experiment orchestration, metrics, config files, and traffic-state export.

run_experiment wires the whole pipeline: generate a synthetic world, run the
aggregation schedule over the configured training days, then let every client
download its final base model, extract its profile, and fine-tune a personal
residual model. Evaluation holds out freshly sampled days after the training
span (disjointness is audited by id-set intersection) and reports three
splits: the untrained initialization (baseline), the localized global model
alone, and the personalized combination.

All file writes happen here, from the single orchestrating thread: a JSONL
round log, per-round parameter checkpoints, a prediction dump CSV, and a
metrics JSON. Timestamps in artifacts are simulated aggregation instants, so
identical config and seed reproduce artifacts byte for byte when noise is
off.
"""

from __future__ import annotations

import configparser
import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import get_type_hints

import numpy as np

from . import federated as fed
from . import nn
from .data import (
    TrajectoryRecord,
    World,
    WorldSpec,
    extract_profile,
    generate_world,
    sample_trajectories,
    save_trajectories,
)
from .federated import (
    AggregationSchedule,
    ClientState,
    FederatedConfig,
    RoundRecord,
    ServerState,
    default_schedule,
)
from .graph import RoadNetwork, Route, save_network
from .model import (
    ModelConfig,
    TimeContext,
    TrafficState,
    fit_dense_stats,
    init_personal_params,
    personal_bias,
    predict_final,
    predict_route,
    traffic_state,
)

PREDICTION_FIELDS = ("client_id", "route_seq", "y_true_s", "y_hat_s", "y_final_s")
CONGESTION_BUCKETS = ("very_congested", "congested", "slow", "unblocked")
SPEED_FLOOR_S = 1.0


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricReport:
    split: str
    mae: float
    rmse: float
    mape: float
    count: int
    per_client: dict[str, "MetricReport"] | None = None

    def as_dict(self) -> dict:
        out = {"split": self.split, "mae": self.mae, "rmse": self.rmse, "mape": self.mape, "count": self.count}
        if self.per_client is not None:
            out["per_client"] = {cid: rep.as_dict() for cid, rep in sorted(self.per_client.items())}
        return out


def compute_metrics(pairs, split: str = "all") -> MetricReport:
    """MAE, RMSE, and MAPE (percent) over (y, prediction) pairs."""
    arr = np.asarray([(float(y), float(p)) for y, p in pairs], dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot compute metrics on an empty sample set")
    y, pred = arr[:, 0], arr[:, 1]
    if np.any(y <= 0):
        raise ValueError("ground-truth travel times must be > 0 (MAPE denominator)")
    err = pred - y
    return MetricReport(
        split=split,
        mae=float(np.mean(np.abs(err))),
        rmse=float(np.sqrt(np.mean(err * err))),
        mape=float(np.mean(np.abs(err) / y) * 100.0),
        count=int(arr.shape[0]),
    )


def grouped_metrics(rows: list[tuple[str, float, float]], split: str) -> MetricReport:
    """Pooled report over (client_id, y, prediction) rows with a per-client breakdown."""
    if not rows:
        raise ValueError("cannot compute metrics on an empty sample set")
    pooled = compute_metrics([(y, p) for _, y, p in rows], split=split)
    per_client = {
        cid: compute_metrics([(y, p) for c, y, p in rows if c == cid], split=f"{split}/{cid}")
        for cid in sorted({r[0] for r in rows})
    }
    return replace(pooled, per_client=per_client)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class AttackSettings:
    epsilons: tuple[float, ...] = (math.inf, 100.0, 10.0, 1.0, 0.1)
    k: int = 10
    rounds: int = 3
    seeds: int = 20

    def __post_init__(self) -> None:
        if self.k < 1 or self.rounds < 1 or self.seeds < 1:
            raise ValueError("attack k, rounds, and seeds must all be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldSpec = WorldSpec()
    model: ModelConfig = ModelConfig()
    federated: FederatedConfig = FederatedConfig()
    schedule: AggregationSchedule | None = None
    days: int = 1
    eval_days: int = 1
    max_rounds: int | None = None
    out_dir: str | None = None
    holidays: frozenset = frozenset()
    attack: AttackSettings = AttackSettings()

    def __post_init__(self) -> None:
        if self.days < 1:
            raise ValueError("need at least one simulated training day")
        if self.eval_days < 1:
            raise ValueError("need at least one held-out evaluation day")
        if self.max_rounds is not None and self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1 when set")


_SECTION_CLASSES = {"world": WorldSpec, "model": ModelConfig, "federated": FederatedConfig}


def _coerce(raw: str, typ: type) -> object:
    if typ is bool:
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    if typ is str:
        return raw.strip()
    raise ValueError(f"config values of type {typ!r} are not supported")


def _parse_section(parser: configparser.ConfigParser, name: str, cls: type) -> object:
    hints = get_type_hints(cls)
    kwargs = {}
    for key, raw in parser.items(name):
        if key not in hints:
            raise ValueError(f"[{name}] has no setting named {key!r}")
        try:
            kwargs[key] = _coerce(raw, hints[key])
        except ValueError as exc:
            raise ValueError(f"[{name}] {key}: {exc}") from exc
    return cls(**kwargs)


def parse_bands(text: str) -> AggregationSchedule:
    """Schedule syntax: comma-separated `start-end:interval` hour triples."""
    bands = []
    for part in text.split(","):
        part = part.strip()
        span, sep, delta = part.partition(":")
        start, sep2, end = span.partition("-")
        if not sep or not sep2:
            raise ValueError(f"band {part!r} is not of the form start-end:interval")
        bands.append((float(start), float(end), float(delta)))
    return AggregationSchedule(bands=tuple(bands))


def load_config(source) -> ExperimentConfig:
    """Read a flat INI config ([world]/[model]/[federated]/[experiment]/[schedule]/[attack])."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    with open(source, encoding="utf-8") as fh:
        parser.read_file(fh)
    known = set(_SECTION_CLASSES) | {"experiment", "schedule", "attack"}
    for section in parser.sections():
        if section not in known:
            raise ValueError(f"unknown config section [{section}]")
    kwargs: dict = {}
    for name, cls in _SECTION_CLASSES.items():
        if parser.has_section(name):
            kwargs[name] = _parse_section(parser, name, cls)
    if parser.has_section("experiment"):
        for key, raw in parser.items("experiment"):
            if key in ("days", "eval_days", "max_rounds"):
                kwargs[key] = int(raw)
            elif key in ("out", "out_dir"):
                kwargs["out_dir"] = raw.strip()
            else:
                raise ValueError(f"[experiment] has no setting named {key!r}")
    if parser.has_section("schedule"):
        for key, raw in parser.items("schedule"):
            if key != "bands":
                raise ValueError(f"[schedule] has no setting named {key!r}")
            kwargs["schedule"] = parse_bands(raw)
    if parser.has_section("attack"):
        akw: dict = {}
        for key, raw in parser.items("attack"):
            if key == "epsilons":
                akw["epsilons"] = tuple(float(p.strip()) for p in raw.split(","))
            elif key in ("k", "rounds", "seeds"):
                akw[key] = int(raw)
            else:
                raise ValueError(f"[attack] has no setting named {key!r}")
        kwargs["attack"] = AttackSettings(**akw)
    return ExperimentConfig(**kwargs)


# ---------------------------------------------------------------------------
# experiment


@dataclass
class ExperimentResult:
    world: World
    server: ServerState
    clients: list[ClientState]
    rounds: list[RoundRecord]
    reports: dict[str, MetricReport]
    eval_trajectories: list[TrajectoryRecord]
    predictions: list[dict]
    out_dir: Path | None


def _route_tokens(route: Route, network: RoadNetwork) -> str:
    tokens = []
    for kind, pos in route.steps:
        rec = network.edges[pos] if kind == "e" else network.nodes[pos]
        tokens.append(f"{kind}{rec.id}")
    return "|".join(tokens)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    world = generate_world(cfg.world)
    schedule = cfg.schedule if cfg.schedule is not None else default_schedule()
    server = fed.init_server(world.network, cfg.model, cfg.federated, schedule)
    init_params = server.global_params.clone()
    pool = fed.build_clients(world, days=cfg.days)

    out = Path(cfg.out_dir) if cfg.out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    records: list[RoundRecord] = []
    log_lines: list[str] = []
    prev_end = None
    done = False
    for day in range(cfg.days):
        for instant in fed.day_instants(schedule, day, prev_end):
            prev_end = instant.end
            if cfg.max_rounds is not None and len(records) >= cfg.max_rounds:
                done = True
                break
            record, params, _ = fed.run_round(server, pool, instant, cfg.federated, cfg.holidays)
            records.append(record)
            log_lines.append(json.dumps(record.as_dict(), sort_keys=True))
            if out is not None and not record.skipped:
                name = f"global_d{instant.day:02d}_{instant.label.replace(':', '')}.bin"
                nn.save_params(params.values, out / "checkpoints" / name)
        if done:
            break

    # Every client ends the run with a localized global model: participants
    # keep their last locally trained copy, the rest download the final global.
    for client in pool:
        if client.localized_global is None:
            client.localized_global = server.global_params.clone()
    profiles = {
        c.client_id: extract_profile(c.trajectories, world.grid, world.network, cfg.model.profile_arity) for c in pool
    }
    dense_mean, dense_std = fit_dense_stats([profiles[c.client_id] for c in pool])
    for client in pool:
        client.profile = profiles[client.client_id]
        client.personal = init_personal_params(
            world.grid.n_cells,
            world.network.n_edges,
            cfg.model,
            nn.stable_hash(cfg.federated.seed, "personal", client.client_id),
            dense_mean=dense_mean,
            dense_std=dense_std,
        )
        fed.fine_tune_personal(client, cfg.federated, cfg.holidays)

    eval_records: list[TrajectoryRecord] = []
    for day in range(cfg.days, cfg.days + cfg.eval_days):
        eval_records.extend(sample_trajectories(world, day))
    train_ids = {(t.driver_id, t.departure) for c in pool for t in c.trajectories}
    eval_ids = {(t.driver_id, t.departure) for t in eval_records}
    leaked = train_ids & eval_ids
    if leaked:
        raise RuntimeError(f"evaluation split overlaps training data on {len(leaked)} trajectories")

    by_client = {c.client_id: c for c in pool}
    init_cache: dict[TimeContext, TrafficState] = {}
    local_cache: dict[tuple[str, TimeContext], TrafficState] = {}
    base_rows: list[tuple[str, float, float]] = []
    glob_rows: list[tuple[str, float, float]] = []
    pers_rows: list[tuple[str, float, float]] = []
    pred_rows: list[dict] = []
    for traj in sorted(eval_records, key=lambda t: (t.driver_id, t.departure)):
        client = by_client[traj.driver_id]
        ctx = TimeContext.from_datetime(traj.departure, cfg.model.time_slots, cfg.holidays)
        if ctx not in init_cache:
            init_cache[ctx] = traffic_state(world.network, init_params, ctx)
        key = (client.client_id, ctx)
        if key not in local_cache:
            local_cache[key] = traffic_state(world.network, client.localized_global, ctx)
        y_init = predict_route(init_cache[ctx], traj.route)
        y_hat = predict_route(local_cache[key], traj.route)
        y_final = predict_final(y_hat, personal_bias(client.profile, client.personal))
        base_rows.append((traj.driver_id, traj.y, y_init))
        glob_rows.append((traj.driver_id, traj.y, y_hat))
        pers_rows.append((traj.driver_id, traj.y, y_final))
        pred_rows.append(
            {
                "client_id": traj.driver_id,
                "route_seq": _route_tokens(traj.route, world.network),
                "y_true_s": repr(traj.y),
                "y_hat_s": repr(y_hat),
                "y_final_s": repr(y_final),
            }
        )
    reports = {
        "baseline": grouped_metrics(base_rows, "baseline"),
        "global": grouped_metrics(glob_rows, "global"),
        "personalized": grouped_metrics(pers_rows, "personalized"),
    }

    if out is not None:
        with open(out / "round_log.jsonl", "w", encoding="utf-8", newline="") as fh:
            fh.write("\n".join(log_lines) + "\n")
        nn.save_params(server.global_params.values, out / "checkpoints" / "global_final.bin")
        with open(out / "predictions.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(PREDICTION_FIELDS))
            writer.writeheader()
            writer.writerows(pred_rows)
        payload = {name: rep.as_dict() for name, rep in reports.items()}
        with open(out / "metrics.json", "w", encoding="utf-8", newline="") as fh:
            fh.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")

    return ExperimentResult(
        world=world,
        server=server,
        clients=pool,
        rounds=records,
        reports=reports,
        eval_trajectories=eval_records,
        predictions=pred_rows,
        out_dir=out,
    )


def write_world(world: World, out_dir, days: int = 1) -> None:
    """Dump the road network and per-day trajectory files for external use."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_network(world.network, out / "nodes.csv", out / "edges.csv", out / "schema.txt")
    for day in range(days):
        save_trajectories(sample_trajectories(world, day), world.network, out / f"trajectories_day{day:02d}.csv")


# ---------------------------------------------------------------------------
# traffic-state export


def implied_speed_kph(length_m: float, travel_time_s: float, floor_s: float = SPEED_FLOOR_S) -> float:
    """Speed implied by an edge estimate, with a floor to survive Y <= 0."""
    return length_m / max(travel_time_s, floor_s) * 3.6


def congestion_bucket(speed_kph: float, limit_kph: float) -> str:
    """Quarter [0, limit): very_congested / congested / slow / unblocked (to inf)."""
    if limit_kph <= 0:
        raise ValueError("speed limit must be > 0")
    if speed_kph < 0:
        raise ValueError("speed must be >= 0")
    return CONGESTION_BUCKETS[min(int(speed_kph // (limit_kph / 4.0)), 3)]


def export_state(state: TrafficState, network: RoadNetwork, dest=None) -> list[dict]:
    """Per-entity travel times with per-edge congestion buckets, optionally as CSV.

    Node rows carry no bucket: the coloring convention applies to road
    segments only.
    """
    if len(state.y_edges) != network.n_edges or len(state.y_nodes) != network.n_nodes:
        raise ValueError("traffic state does not match the network shape")
    rows: list[dict] = []
    for pos, edge in enumerate(network.edges):
        y = float(state.y_edges[pos])
        speed = implied_speed_kph(edge.length_m, y)
        rows.append(
            {
                "slot": str(state.slot),
                "entity_kind": "edge",
                "entity_id": str(edge.id),
                "travel_time_s": repr(max(y, 0.0)),
                "bucket": congestion_bucket(speed, edge.speed_limit_kph),
            }
        )
    for pos, node in enumerate(network.nodes):
        y = float(state.y_nodes[pos])
        rows.append(
            {
                "slot": str(state.slot),
                "entity_kind": "node",
                "entity_id": str(node.id),
                "travel_time_s": repr(max(y, 0.0)),
                "bucket": "",
            }
        )
    if dest is not None:
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["slot", "entity_kind", "entity_id", "travel_time_s", "bucket"])
            writer.writeheader()
            writer.writerows(rows)
    return rows
