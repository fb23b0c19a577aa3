from __future__ import annotations

import pytest

from nicpool.app_model import StageKind, StageSpec, build_app
from nicpool.controller import MS, Controller, ControllerConfig, Status
from nicpool.dataplane import DataplaneConfig, RateSource, Simulator, make_flows
from nicpool.planner import PerfTarget

from conftest import bf2_cluster, cpu_chain

FAST = ControllerConfig(profile_warmup_us=2 * MS, profile_measure_us=10 * MS)


def controller(n=4, cores=8):
    sim = Simulator(bf2_cluster(n=n, cores=cores), DataplaneConfig(ring_capacity=64))
    ctl = Controller(sim, FAST)
    ctl.start()
    return sim, ctl


def test_submit_profiles_plans_and_places():
    _, ctl = controller()
    dep = ctl.submit_app(cpu_chain([20, 18, 27, 10]), PerfTarget(1.0))
    assert dep.status == Status.RUNNING
    assert dep.plan.R == (2, 2, 3, 1)
    assert dep.t_gbps == pytest.approx(1.2, rel=0.01)
    assert dep.profile.lambda_gbps == pytest.approx(0.444, rel=0.02)
    assert dep.capacity_gbps() >= 1.0


def test_missing_accelerator_fails_the_app():
    _, ctl = controller()
    dep = ctl.submit_app(build_app([StageSpec("aes", StageKind.ACCEL_FN, accel="AES")], app_id="x"),
                         PerfTarget(0.1))
    assert dep.status == Status.FAILED and "InsufficientForProfiling" in dep.reason


def test_small_target_gets_minimal_copies_only():
    _, ctl = controller()
    dep = ctl.submit_app(cpu_chain([20, 18, 27, 10]), PerfTarget(0.3))
    assert dep.placement.counts() == (0, 1)


def test_oversized_target_is_best_effort():
    _, ctl = controller(n=1)
    dep = ctl.submit_app(cpu_chain([20, 18, 27, 10]), PerfTarget(50.0))
    assert dep.status == Status.BEST_EFFORT


def test_same_target_is_a_noop():
    _, ctl = controller()
    ctl.submit_app(cpu_chain([10]), PerfTarget(1.0))
    out = ctl.set_target("chain", PerfTarget(1.0))
    assert out.noop and not out.added and not out.removed


def test_scale_up_goes_live_after_launch_delay():
    sim, ctl = controller()
    dep = ctl.submit_app(cpu_chain([10]), PerfTarget(1.2))
    sim.run(50 * MS)
    out = ctl.set_target("chain", PerfTarget(3.6))
    assert out.added and out.ready_at_us == pytest.approx(250 * MS)
    assert len(dep.placement.copies) == 1
    sim.run(260 * MS)
    assert len(dep.placement.copies) == 3


def test_failure_is_detected_and_replaced_on_backup():
    sim, ctl = controller(n=3, cores=4)
    app = cpu_chain([10, 10], app_id="fw")
    dep = ctl.submit_app(app, PerfTarget(1.2), failover=True)
    home = dep.placement.nics()
    backup = dep.backup_nic
    assert backup not in home
    sim.attach(RateSource("fw", make_flows(4, 1), 0.6))
    sim.run(120 * MS)
    ctl.fail_nic(home[0])
    sim.run(260 * MS)
    (rep,) = ctl.recoveries
    assert rep.detected_at_us == pytest.approx(200 * MS)
    assert rep.apps[0]["replacement_nics"] == [[backup]]
    sim.run(500 * MS)
    assert dep.placement.nics() == [backup]
    assert dep.status == Status.RUNNING


def test_failure_of_an_idle_nic_touches_nothing():
    _, ctl = controller()
    ctl.submit_app(cpu_chain([10]), PerfTarget(1.0))
    rep = ctl.handle_failure("nic4")
    assert rep.apps == []


def test_sync_tick_copies_state_to_backup():
    sim, ctl = controller()
    app = cpu_chain([10], app_id="st", stateful=True)
    dep = ctl.submit_app(app, PerfTarget(1.0), failover=True)
    nic = dep.placement.nics()[0]
    ctl.fabric.add("st", nic, "flow", 3)
    ctl.sync_tick(sim.now)
    assert ctl.fabric.backup_table("st", nic, dep.backup_nic).get("flow") == 3


def test_summary_lists_deployments_in_order():
    _, ctl = controller()
    ctl.submit_app(cpu_chain([10], app_id="a"), PerfTarget(1.0))
    ctl.submit_app(cpu_chain([10], app_id="b"), PerfTarget(1.0))
    s = ctl.summary()
    assert s["admission_order"] == ["a", "b"]
    assert s["deployments"]["b"]["status"] == "Running"
