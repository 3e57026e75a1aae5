"""Federated-loop tests: schedule, selection, client update, aggregation,
round execution, personal fine-tuning, reproducibility."""

import math
from dataclasses import replace
from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedtte import data, federated, model, nn
from fedtte.data import TrajectoryRecord
from fedtte.federated import (
    AggregationSchedule,
    ClientState,
    FederatedConfig,
    aggregate,
    build_clients,
    client_update,
    day_instants,
    default_schedule,
    fine_tune_personal,
    init_server,
    run_round,
    select_clients,
)


# ---------------------------------------------------------------- schedule

def test_default_schedule_bands():
    sched = default_schedule()
    assert sched.bands == (
        (23.0, 7.0, 4.0),
        (7.0, 9.0, 0.5),
        (9.0, 17.0, 2.0),
        (17.0, 19.0, 0.5),
        (19.0, 23.0, 2.0),
    )


def test_default_schedule_sixteen_instants():
    instants = default_schedule().instants()
    assert len(instants) == 16
    assert instants == sorted(instants)


def test_default_schedule_rush_half_hours():
    instants = default_schedule().instants()
    in_rush = [h for h in instants if 7.0 <= h < 9.0]
    assert in_rush == [7.0, 7.5, 8.0, 8.5]


def test_single_band_schedule_one_round_per_day():
    sched = AggregationSchedule(bands=((0.0, 0.0, 24.0),))
    assert sched.instants() == [0.0]
    # a day is one window spanning the entire previous day: classic FedAvg
    instants = day_instants(sched, day=1, prev_end=datetime(2024, 1, 1, 0, 0))
    assert len(instants) == 1
    assert instants[0].start == datetime(2024, 1, 1, 0, 0)
    assert instants[0].end == datetime(2024, 1, 2, 0, 0)


def test_schedule_rejects_gap_and_nondividing_delta():
    with pytest.raises(ValueError):
        AggregationSchedule(bands=((0.0, 12.0, 1.0),))  # covers half the day
    with pytest.raises(ValueError):
        AggregationSchedule(bands=((0.0, 0.0, 7.0),))  # 7 does not divide 24


def test_day_instants_chain_windows():
    instants = day_instants(default_schedule(), day=0)
    assert instants[0].start == datetime(2024, 1, 1, 0, 0)
    assert instants[0].end == datetime(2024, 1, 1, 3, 0)
    for prev, cur in zip(instants, instants[1:]):
        assert cur.start == prev.end
    # chaining across days: day 1's 03:00 instant covers day 0's 23:00 tail
    next_day = day_instants(default_schedule(), day=1, prev_end=instants[-1].end)
    assert next_day[0].start == datetime(2024, 1, 1, 23, 0)
    assert next_day[0].end == datetime(2024, 1, 2, 3, 0)


def test_band_label():
    sched = default_schedule()
    assert sched.band_label(7.5) == "07:00-09:00"
    assert sched.band_label(3.0) == "23:00-07:00"


# ---------------------------------------------------------------- config

def test_federated_config_validation():
    with pytest.raises(ValueError):
        FederatedConfig(clients_per_round=0)
    with pytest.raises(ValueError):
        FederatedConfig(local_epochs=0)
    with pytest.raises(ValueError):
        FederatedConfig(base_lr=-1e-6)
    with pytest.raises(ValueError):
        FederatedConfig(dp_epsilon=0.0)
    FederatedConfig(base_lr=0.0)  # lr = 0 is legal: freeze-the-model replay


# ---------------------------------------------------------------- selection

def test_select_entire_pool(tiny_world):
    pool = build_clients(tiny_world)
    rng = nn.spawn_rng(0, "sel")
    chosen = select_clients(pool, len(pool), rng)
    assert chosen == sorted(c.client_id for c in pool)


def test_select_deterministic_under_seed(tiny_world):
    pool = build_clients(tiny_world)
    a = select_clients(pool, 2, nn.spawn_rng(5, "sel"))
    b = select_clients(pool, 2, nn.spawn_rng(5, "sel"))
    assert a == b


def test_select_rejects_oversized_m(tiny_world):
    pool = build_clients(tiny_world)
    with pytest.raises(ValueError):
        select_clients(pool, len(pool) + 1, nn.spawn_rng(0, "sel"))


def test_select_inclusion_frequency_hypergeometric():
    spec = data.WorldSpec(grid_rows=2, grid_cols=2, n_drivers=10, trips_per_day=1, seed=2)
    pool = build_clients(data.generate_world(spec))
    counts = {c.client_id: 0 for c in pool}
    draws = 10_000
    for i in range(draws):
        for cid in select_clients(pool, 3, nn.spawn_rng(i, "freq")):
            counts[cid] += 1
    for cid, n in counts.items():
        assert abs(n / draws - 0.3) <= 0.02, cid


# ---------------------------------------------------------------- client_update

def _one_client_world():
    spec = data.WorldSpec(
        grid_rows=2, grid_cols=2, n_drivers=1, trips_per_day=4,
        congestion="flat", obs_sigma_s=0.0, bias_spread_s=0.0, time_slots=4, seed=3,
    )
    return data.generate_world(spec)


def _full_day():
    return datetime(2024, 1, 1, 0, 0), datetime(2024, 1, 2, 0, 0)


def test_client_update_lr_zero_no_noise_returns_global(tiny_cfg):
    world = _one_client_world()
    client = build_clients(world)[0]
    global_params = model.init_base_params(world.network, tiny_cfg, seed=0)
    cfg = FederatedConfig(clients_per_round=1, local_epochs=3, base_lr=0.0, dp_epsilon=math.inf)
    upload, n_m = client_update(client, global_params, cfg, _full_day())
    assert n_m == len(client.trajectories)
    for name in global_params.values:
        assert np.array_equal(upload[name], global_params.values[name])


def test_client_update_single_trajectory_matches_hand_step(tiny_cfg):
    world = _one_client_world()
    client = build_clients(world)[0]
    client.trajectories = client.trajectories[:1]
    global_params = model.init_base_params(world.network, tiny_cfg, seed=1)
    lr = 1e-6
    cfg = FederatedConfig(clients_per_round=1, local_epochs=1, base_lr=lr, dp_epsilon=math.inf)
    upload, n_m = client_update(client, global_params, cfg, _full_day())
    assert n_m == 1

    rec = client.trajectories[0]
    _, grads = model.base_loss(world.network, global_params, [(rec.route, rec.y)])
    expected = nn.sgd_step(global_params.values, grads, lr)
    for name in expected:
        assert np.array_equal(upload[name], expected[name]), name


def test_client_update_empty_window_rejected(tiny_cfg):
    world = _one_client_world()
    client = build_clients(world)[0]
    global_params = model.init_base_params(world.network, tiny_cfg, seed=0)
    cfg = FederatedConfig()
    empty = (datetime(2030, 1, 1), datetime(2030, 1, 2))
    with pytest.raises(ValueError):
        client_update(client, global_params, cfg, empty)


def test_client_update_stores_localized_copy(tiny_cfg):
    world = _one_client_world()
    client = build_clients(world)[0]
    global_params = model.init_base_params(world.network, tiny_cfg, seed=0)
    cfg = FederatedConfig(local_epochs=1, base_lr=1e-6, dp_epsilon=math.inf)
    upload, _ = client_update(client, global_params, cfg, _full_day())
    assert client.localized_global is not None
    for name in upload:
        assert np.array_equal(client.localized_global.values[name], upload[name])
    # the client trained a private copy; the global set is untouched
    fresh = model.init_base_params(world.network, tiny_cfg, seed=0)
    for name in fresh.values:
        assert np.array_equal(global_params.values[name], fresh.values[name])


# ---------------------------------------------------------------- aggregate

def test_aggregate_identical_uploads_fixed_point():
    p = {"w": np.array([1.0, -2.0]), "b": np.array([0.5])}
    out = aggregate([(3, nn.clone_params(p)), (5, nn.clone_params(p))])
    for name in p:
        assert np.array_equal(out[name], p[name])


def test_aggregate_weighted_mean_scalars():
    out = aggregate([(1, {"x": np.array([0.0])}), (3, {"x": np.array([4.0])})])
    assert out["x"][0] == 3.0


def test_aggregate_permutation_invariant():
    rng = np.random.default_rng(0)
    uploads = [(int(n), {"w": rng.normal(size=4)}) for n in rng.integers(1, 9, size=5)]
    fwd = aggregate(uploads)
    rev = aggregate(list(reversed(uploads)))
    assert np.allclose(fwd["w"], rev["w"], atol=1e-15)


def test_aggregate_rejects_empty_and_zero_weight():
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ValueError):
        aggregate([(0, {"w": np.zeros(1)})])


def test_aggregate_rejects_incongruent_sets():
    with pytest.raises(ValueError):
        aggregate([(1, {"w": np.zeros(2)}), (1, {"w": np.zeros(3)})])


@settings(max_examples=40)
@given(st.integers(min_value=0, max_value=10_000))
def test_aggregate_convex_combination(seed):
    rng = np.random.default_rng(seed)
    uploads = [(int(rng.integers(1, 7)), {"w": rng.normal(size=5)}) for _ in range(4)]
    out = aggregate(uploads)["w"]
    stack = np.stack([u["w"] for _, u in uploads])
    assert np.all(out >= stack.min(axis=0) - 1e-12)
    assert np.all(out <= stack.max(axis=0) + 1e-12)


@settings(max_examples=25)
@given(st.integers(min_value=0, max_value=10_000), st.integers(min_value=2, max_value=6))
def test_aggregate_duplicate_splitting_invariant(seed, k):
    rng = np.random.default_rng(seed)
    other = (3, {"w": rng.normal(size=4)})
    merged = (k, {"w": rng.normal(size=4)})
    split = [(1, nn.clone_params(merged[1])) for _ in range(k)]
    whole = aggregate([other, merged])
    parts = aggregate([other, *split])
    assert np.allclose(whole["w"], parts["w"], atol=1e-12)


# ---------------------------------------------------------------- run_round

def _server_and_pool(world, fed_cfg, model_cfg, schedule=None):
    server = init_server(world.network, model_cfg, fed_cfg, schedule=schedule)
    return server, build_clients(world)


def _whole_day_instant():
    """Single instant whose window spans all of day 0."""
    sched = AggregationSchedule(bands=((0.0, 0.0, 24.0),))
    return sched, day_instants(sched, day=1, prev_end=datetime(2024, 1, 1, 0, 0))[0]


def test_run_round_single_client_pool_adopts_upload(tiny_cfg):
    world = _one_client_world()
    cfg = FederatedConfig(clients_per_round=1, local_epochs=1, base_lr=1e-6, dp_epsilon=math.inf)
    sched, instant = _whole_day_instant()
    server, pool = _server_and_pool(world, cfg, tiny_cfg, schedule=sched)
    record, new_global, state = run_round(server, pool, instant, cfg)
    assert not record.skipped
    assert record.selected == (pool[0].client_id,)
    for name in new_global.values:
        assert np.array_equal(new_global.values[name], pool[0].localized_global.values[name])
    assert state is not None


def test_run_round_zero_eligible_is_skipped_and_recorded(tiny_cfg):
    world = _one_client_world()
    cfg = FederatedConfig(clients_per_round=1)
    server, pool = _server_and_pool(world, cfg, tiny_cfg)
    for c in pool:
        c.trajectories = []
    instant = day_instants(server.schedule, day=0)[0]
    before = nn.params_digest(server.global_params.values)
    record, new_global, state = run_round(server, pool, instant, cfg)
    assert record.skipped
    assert record.selected == ()
    assert record.n_total == 0
    assert nn.params_digest(new_global.values) == before


def test_run_round_identical_clients_equal_centralized_sgd(tiny_cfg):
    # noise off, both clients hold the same data: the weighted average of two
    # identical updates is that update, i.e. centralized SGD on the shared data
    world = _one_client_world()
    cfg = FederatedConfig(clients_per_round=2, local_epochs=1, base_lr=1e-6, dp_epsilon=math.inf)
    sched, instant = _whole_day_instant()
    server, pool = _server_and_pool(world, cfg, tiny_cfg, schedule=sched)
    base = pool[0]
    twin = ClientState(
        client_id="d_twin",
        network=base.network,
        trajectories=[replace(t, driver_id="d_twin") for t in base.trajectories],
    )
    record, new_global, _ = run_round(server, [base, twin], instant, cfg)
    assert not record.skipped
    assert len(record.selected) == 2

    central = init_server(world.network, tiny_cfg, cfg)
    batch = sorted(
        ((t.route, t.y) for t in base.trajectories if t.departure < instant.end),
        key=lambda ry: (ry[0].departure_time, ry[1]),
    )
    values = central.global_params.values
    for route, y in batch:
        _, grads = model.base_loss(world.network, central.global_params.with_values(values), [(route, y)])
        values = nn.sgd_step(values, grads, cfg.base_lr)
    for name in values:
        assert np.allclose(new_global.values[name], values[name], atol=1e-12), name


def test_run_round_serves_from_latest_state(tiny_cfg):
    world = _one_client_world()
    cfg = FederatedConfig(clients_per_round=1, local_epochs=1, base_lr=1e-6, dp_epsilon=math.inf)
    server, pool = _server_and_pool(world, cfg, tiny_cfg)
    instant = next(i for i in day_instants(server.schedule, day=0) if i.hour == 7.5)
    with pytest.raises(ValueError):
        server.serve(pool[0].trajectories[0].route)  # nothing aggregated yet
    record, _, state = run_round(server, pool, instant, cfg)
    # queries between 07:30 and 08:00 are answered from the 07:30 aggregate
    if not record.skipped:
        assert server.latest_state is state
        route = pool[0].trajectories[0].route
        assert server.serve(route) == model.predict_route(state, route, strict=False)
        assert state.slot == model.slot_of_time(instant.end, tiny_cfg.time_slots)


def test_run_round_excluded_client_has_no_influence(tiny_cfg):
    spec = data.WorldSpec(
        grid_rows=2, grid_cols=2, n_drivers=6, trips_per_day=4,
        congestion="flat", obs_sigma_s=0.0, bias_spread_s=0.0, time_slots=4, seed=13,
    )
    world = data.generate_world(spec)
    cfg = FederatedConfig(clients_per_round=3, local_epochs=1, base_lr=1e-6, dp_epsilon=math.inf)
    sched, instant = _whole_day_instant()
    server, pool = _server_and_pool(world, cfg, tiny_cfg, schedule=sched)
    record, _, _ = run_round(server, pool, instant, cfg)
    bystanders = [c.client_id for c in pool if c.client_id not in record.selected]
    assert bystanders, "need a non-selected client for this test"

    server2, pool2 = _server_and_pool(world, cfg, tiny_cfg, schedule=sched)
    trimmed = [c for c in pool2 if c.client_id != bystanders[0]]
    record2, _, _ = run_round(server2, trimmed, instant, cfg)
    assert record2 == record


def test_round_record_n_total_is_sum_of_client_counts(tiny_world, tiny_cfg):
    cfg = FederatedConfig(clients_per_round=3, local_epochs=1, base_lr=1e-6, dp_epsilon=math.inf)
    sched, instant = _whole_day_instant()
    server, pool = _server_and_pool(tiny_world, cfg, tiny_cfg, schedule=sched)
    record, _, _ = run_round(server, pool, instant, cfg)
    assert not record.skipped
    assert record.n_total == sum(n for _, n, _ in record.clients)
    assert len(record.clients) == len(record.selected)


def test_full_day_bit_reproducible(tiny_world, tiny_cfg):
    def run_day():
        cfg = FederatedConfig(clients_per_round=3, local_epochs=1, base_lr=1e-6, dp_epsilon=math.inf, seed=4)
        server, pool = _server_and_pool(tiny_world, cfg, tiny_cfg)
        records = []
        for instant in day_instants(server.schedule, day=0):
            record, _, _ = run_round(server, pool, instant, cfg)
            records.append(record)
        return records, nn.params_digest(server.global_params.values)

    records1, digest1 = run_day()
    records2, digest2 = run_day()
    assert digest1 == digest2
    assert records1 == records2


# ---------------------------------------------------------------- fine_tune_personal

def _prepared_client(world, tiny_cfg, residual=0.0, seed=0):
    client = build_clients(world)[0]
    client.localized_global = model.init_base_params(world.network, tiny_cfg, seed=seed)
    states = {}
    shifted = []
    for t in client.trajectories:
        ctx = model.TimeContext.from_datetime(t.departure, tiny_cfg.time_slots)
        if ctx not in states:
            states[ctx] = model.traffic_state(world.network, client.localized_global, ctx)
        y_hat = model.predict_route(states[ctx], t.route)
        shifted.append(replace(t, y=y_hat + residual))
    client.trajectories = shifted
    grid = world.grid
    client.profile = data.extract_profile(client.trajectories, grid, world.network, arity=tiny_cfg.profile_arity)
    client.personal = model.init_personal_params(grid.n_cells, world.network.n_edges, tiny_cfg, seed=seed)
    for name in client.personal.values:
        client.personal.values[name] = np.zeros_like(client.personal.values[name])
    return client


def test_fine_tune_zero_residuals_leaves_parameters(tiny_cfg):
    world = _one_client_world()
    client = _prepared_client(world, tiny_cfg, residual=0.0)
    cfg = FederatedConfig(personal_epochs=50, personal_lr=1e-3)
    before = nn.clone_params(client.personal.values)
    fine_tune_personal(client, cfg)
    for name in before:
        assert np.array_equal(client.personal.values[name], before[name]), name


def test_fine_tune_constant_residual_learns_bias(tiny_cfg):
    # all-zero init keeps every input coordinate at 0, so only the head bias
    # moves: a pure constant fit that must converge to the +10 s residual
    world = _one_client_world()
    client = _prepared_client(world, tiny_cfg, residual=10.0)
    cfg = FederatedConfig(personal_epochs=2000, personal_lr=3e-4)
    fine_tune_personal(client, cfg)
    assert client.personal.values["p.head.b"][0] == pytest.approx(10.0, abs=0.1)
    assert model.personal_bias(client.profile, client.personal) == pytest.approx(10.0, abs=0.1)


def test_fine_tune_never_touches_localized_global(tiny_cfg):
    world = _one_client_world()
    client = _prepared_client(world, tiny_cfg, residual=5.0)
    cfg = FederatedConfig(personal_epochs=20, personal_lr=1e-4)
    digest = nn.params_digest(client.localized_global.values)
    fine_tune_personal(client, cfg)
    assert nn.params_digest(client.localized_global.values) == digest


def test_fine_tune_requires_localized_global(tiny_cfg):
    world = _one_client_world()
    client = build_clients(world)[0]
    with pytest.raises(ValueError):
        fine_tune_personal(client, FederatedConfig())
