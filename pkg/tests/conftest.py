from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

from nicpool.app_model import StageKind, StageSpec, build_app
from nicpool.cluster import LatencyModel, build_cluster

settings.register_profile("nicpool", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("nicpool")

BF2_ACCELS = [{"kind": "Regex", "latency": {"fixed_us": 40}}, {"kind": "Compression", "latency": {"fixed_us": 30}}]
PENSANDO_ACCELS = [{"kind": "AES", "latency": {"fixed_us": 40}}, {"kind": "Compression", "latency": {"fixed_us": 30}}]


def cpu_chain(latencies, app_id="chain", stateful=False):
    """A chain of CPU stages with fixed service times."""
    stages = [StageSpec(f"s{i}", StageKind.PKT_TRANS, "identity", service_model=LatencyModel(float(x)))
              for i, x in enumerate(latencies)]
    return build_app(stages, stateful=stateful, app_id=app_id)


def bf2_cluster(n=4, cores=8, rtt=4.52, **extra):
    return build_cluster({"default_rtt_us": rtt,
                          "nics": [{"id": "nic", "count": n, "model": "BF2", "cores": cores,
                                    "accelerators": BF2_ACCELS, **extra}]})


def big_cluster(cores=64, n=1, rtt=4.52):
    return build_cluster({"default_rtt_us": rtt, "nics": [{"id": "big", "count": n, "cores": cores}]})


@pytest.fixture
def rack():
    return bf2_cluster()


# acceptance criterion number -> (title, passed, detail)
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {title}"
                                    + (f" ({detail})" if detail else ""))
