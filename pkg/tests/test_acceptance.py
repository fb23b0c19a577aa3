"""End-to-end acceptance checks, one test per criterion.

Each test records PASS or FAIL in ``conftest.ACCEPTANCE``; the summary is
printed at the end of the pytest run.
"""

from __future__ import annotations

import functools
import itertools
import json
import random
import time

import pytest

from nicpool.app_model import Packet
from nicpool.cluster import build_cluster
from nicpool.dataplane import DataplaneConfig, SaturatingSource, Simulator, instantiate, make_flows
from nicpool.planner import AllocationPlan, compute_allocation, place, plan_replication
from nicpool.profiler import minimal_allocation, unloaded_latency
from nicpool.scenario import bundled_scenarios, load_config, order_violations, parse_config, run_scenario
from nicpool.state_engine import ENTRY_SIZE

import conftest
from conftest import big_cluster, cpu_chain
from test_planner import ALLOCATION_CASES, oracle_plan

PKT_BITS = 1500 * 8


def criterion(n, title):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                conftest.ACCEPTANCE[n] = (title, False, f"{type(exc).__name__}: {exc}".splitlines()[0][:160])
                raise
            conftest.ACCEPTANCE[n] = (title, True, detail or "")
        return run
    return wrap


@pytest.fixture(scope="module")
def reports():
    """Every bundled scenario plus the shrink/migration case, run once."""
    out = {name: json.loads(run_scenario(name).to_json()) for name in bundled_scenarios()}
    out["shrink_migration"] = json.loads(run_scenario(parse_config(SHRINK)).to_json())
    return out


SHRINK = """\
schema_version: 1
name: shrink_migration
seed: 9
duration_ms: 800
bin_ms: 50
cluster: bf2_rack
dataplane: {ring_capacity: 64}
apps:
  - id: fm
    use: flow_monitor
    target_gbps: 0.4
    traffic: {rate: 0.42, flows: 32}
timeline:
  - {at_ms: 400, event: set_target, app: fm, target_gbps: 0.2}
"""


@criterion(1, "replication plan for the four-stage example")
def test_c01_replication_example():
    t0 = time.perf_counter()
    plan = plan_replication([20, 18, 27, 10])
    elapsed = time.perf_counter() - t0
    assert plan.R == (2, 2, 3, 1)
    assert len(plan.segments) == 1
    assert plan.pipeline_count == 3
    assert elapsed < 1.0
    return f"R={list(plan.R)}, {plan.pipeline_count} pipelines, {elapsed * 1000:.2f} ms"


@criterion(2, "planner matches brute force on every chain of length <= 6 over 1..5")
def test_c02_exhaustive_oracle():
    t0 = time.perf_counter()
    count = 0
    for n in range(1, 7):
        for L in itertools.product(range(1, 6), repeat=n):
            plan = plan_replication(L)
            R, segs = oracle_plan(L)
            assert list(plan.R) == R and [tuple(s) for s in plan.segments] == segs, L
            for lo, d in plan.segments:
                assert plan.R[d] == 1
                for i in range(lo, d + 1):
                    assert plan.R[i] * L[d] >= L[i] > (plan.R[i] - 1) * L[d]
            count += 1
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0
    return f"{count} chains in {elapsed:.1f} s"


def _saturated(L, alloc, until=60_000.0):
    c = big_cluster(cores=512)
    app = cpu_chain(L)
    sim = Simulator(c, DataplaneConfig(ring_capacity=64))
    instantiate(sim, app, place(app, alloc, c))
    sim.attach(SaturatingSource(app.app_id, make_flows(16, 1)))
    sim.run(until / 2)
    busy0 = sim.pool_busy()
    stats = sim.run(until)
    return sim, stats.rate_gbps(app.app_id, until / 2, until), busy0


@criterion(3, "saturated throughput follows the slowest stage and scales with copies")
def test_c03_throughput_law(reports):
    rng = random.Random(2024)
    worst = 0.0
    for _ in range(20):
        L = [rng.randint(1, 30) for _ in range(rng.randint(1, 6))]
        R = plan_replication(L).R
        k = rng.randint(0, 3)
        m = rng.randint(0 if k else 1, 3)
        totals = tuple(r * k + m for r in R)
        _, got, _ = _saturated(L, AllocationPlan(R, totals, k, m, None))
        want = PKT_BITS * min(t / l for t, l in zip(totals, L)) / 1000.0
        worst = max(worst, abs(got / want - 1))
    assert worst <= 0.05
    scaling = reports["pipeline_scaling"]["analysis"]["scaling"]
    base = scaling[0]["gbps"] / scaling[0]["copies"]
    for row in scaling:
        assert row["gbps"] == pytest.approx(row["copies"] * base, rel=0.05)
    return f"worst error {worst:.2%} over 20 configs; copies {[r['copies'] for r in scaling]}"


@criterion(4, "bubble elimination and the latency tradeoff")
def test_c04_bubbles():
    L = [20, 18, 27, 10]
    R = plan_replication(L).R
    sim, _, busy0 = _saturated(L, AllocationPlan(R, R, 1, 0, None))
    d = L.index(min(L))
    busy1 = sim.pool_busy()
    span = 30_000.0
    util = sum(busy1[k] - busy0[k] for k in busy1 if k[1] == d) / (R[d] * span)
    assert util >= 0.98

    # four back-to-back packets, three pipelines either way
    def burst(alloc):
        c = big_cluster()
        app = cpu_chain(L)
        s = Simulator(c)
        pipes = instantiate(s, app, place(app, alloc, c))
        for f in make_flows(4, 2):
            s.inject(app.app_id, Packet(f, 1500), 0.0)
        s.run(float("inf"))
        return len(pipes), max(s.apps[app.app_id].stats.lats)

    n_part, partial = burst(AllocationPlan(R, R, 1, 0, None))
    n_full, full = burst(AllocationPlan((1,) * 4, (3,) * 4, 3, 0, None))
    assert n_part == n_full == 3
    assert partial >= full
    return f"min-stage utilization {util:.3f}; burst latency partial {partial:.1f} us >= full {full:.1f} us"


@criterion(5, "per-flow egress order under spill, migration and failover")
def test_c05_ordering(reports):
    seen = {"spill": 0, "migration": 0, "failover": 0}
    for name, rep in reports.items():
        for a, rec in rep["apps"].items():
            assert rec["order_violations"] == 0, (name, a)
            c = rec["counters"]
            seen["spill"] += c["flow_spills"]
            seen["migration"] += c["migrations"]
            seen["failover"] += c["replayed"]
    assert all(seen.values()), seen
    return f"{len(reports)} scenarios, 0 violations; spills {seen['spill']}, migrations {seen['migration']}, " \
           f"replayed {seen['failover']}"


@criterion(6, "one remote sub-pipeline adds about one RTT of latency")
def test_c06_remote_split():
    app = cpu_chain([10, 10])
    alloc = minimal_allocation(app)
    single = unloaded_latency(app, alloc, build_cluster({"nics": [{"id": "a", "cores": 3}]}))

    def split(rtt):
        c = build_cluster({"default_rtt_us": rtt, "nics": [{"id": "a", "cores": 2}, {"id": "b", "cores": 2}]})
        return unloaded_latency(app, alloc, c)

    added = split(4.52) - single
    rtt_part = split(4.52) - split(0.0)
    assert 4.5 <= added <= 8.0
    assert rtt_part == pytest.approx(4.52, abs=0.5)
    return f"+{added:.2f} us, of which {rtt_part:.2f} us is RTT"


@criterion(7, "allocation formula on ten hand-computed cases")
def test_c07_allocation():
    for R, P, t, lam, full, rem, total in ALLOCATION_CASES:
        a = compute_allocation(R, P, t, lam)
        assert (a.full_copies, a.remainder_units, a.per_stage_total) == (full, rem, total), (R, P)
    return f"{len(ALLOCATION_CASES)} cases"


@criterion(8, "state engine semantics")
def test_c08_state_engine():
    from nicpool.app_model import AccessPattern
    from nicpool.cluster import RackNetwork
    from nicpool.state_engine import StateEntry, StateFabric, StateTable, hash_key

    rng = random.Random(8)
    nics = [f"nic{i}" for i in range(8)]
    for trial in range(5):
        f = StateFabric(RackNetwork(), nics)
        f.register_app("app", AccessPattern.NON_EXTERNAL_WRITE, nics)
        n = 1 << 12 if trial == 0 else rng.randint(0, 1 << 12)
        for i in range(n):
            f.add("app", rng.choice(nics), f"k{i}", rng.randint(-999, 999))
        items, _ = f.traverse("app", "nic0")
        assert f.compute("app", "nic5", "SUM")[0] == sum(v for _, v in items)
        assert f.compute("app", "nic2", "COUNT")[0] == len(items) == n

    f = StateFabric(RackNetwork(), nics[:3])
    f.register_app("app", AccessPattern.FULL_ACCESS, nics[:3])
    for i in range(37):
        f.add("app", "nic0", f"k{i}", i, now=float(i))
    for i in range(37, 200):
        f.set("app", "nic0", f"k{i % 37}", i, now=float(i))
    assert len({f.table("app", n).content_bytes() for n in nics[:3]}) == 1

    raw = StateEntry("x", hash_key("x"), 64, 8, 1.0).pack()
    assert len(raw) == ENTRY_SIZE == 64

    t = StateTable("nic0", "app")
    t.add("k", 1, 0.0)
    assert t.evict_expired(500e6) == 0
    assert t.evict_expired(500e6 + 1) == 1
    return "reduce == traverse up to 4096 entries on 8 NICs; replicas identical; 64 B entries; eviction boundary"


@criterion(9, "adaptive scaling meets each target within 5% after <= 500 ms")
def test_c09_adaptive_scaling(reports):
    conv = reports["adaptive_scaling"]["analysis"]["convergence"]
    assert len(conv) == 4
    for rec in conv:
        assert rec["convergence_ms"] is not None and rec["convergence_ms"] <= 500, rec
        assert rec["error"] <= 0.05, rec
    return "convergence ms " + ", ".join(f"{r['target_gbps']}:{r['convergence_ms']:.0f}" for r in conv)


@criterion(10, "failover recovers >= 95% within 500 ms of detection, no cached packet lost")
def test_c10_failover(reports):
    rep = reports["failover"]
    rec = rep["analysis"]["recovery"]
    assert len(rec) == 3
    for r in rec:
        assert r["recovery_ms"] is not None and r["recovery_ms"] <= 500, r
    for a, app in rep["apps"].items():
        c = app["counters"]
        assert c["failover_cache_overflow"] == 0
        assert c["replayed"] == c["failover_cached"] > 0
    return "recovery ms " + ", ".join(f"{r['app']}@{r['nic']}:{r['recovery_ms']:.0f}" for r in rec)


@criterion(11, "multiplexing: 2 NICs fine-grained vs 3 whole-NIC")
def test_c11_multiplexing(reports):
    m = reports["multiplexing"]["analysis"]["multiplexing"]
    assert len(m["apps"]) == 3
    assert m["fine_grained_nics"] == 2
    assert m["whole_nic_nics"] == 3
    return f"{m['fine_grained_nics']} vs {m['whole_nic_nics']}"


@criterion(12, "identical config and seed give a byte-identical report")
def test_c12_determinism(reports):
    for name, first in reports.items():
        cfg = parse_config(SHRINK) if name == "shrink_migration" else load_config(name)
        again = run_scenario(cfg).to_json()
        assert again == json.dumps(first, sort_keys=True, indent=1) + "\n", name
    return f"{len(reports)} scenarios re-run"
