from __future__ import annotations

import json
import textwrap

import pytest

from nicpool.cluster import build_cluster
from nicpool.errors import ParseError, ValidationError
from nicpool.scenario import bundled_scenarios, load_config, order_violations, parse_config, percentiles, run_scenario

ConfigErrorTypes = (ParseError, ValidationError)

BASE = """\
schema_version: 1
name: tiny
seed: 4
duration_ms: 40
bin_ms: 10
cluster: bf2_rack
dataplane: {ring_capacity: 64}
controller: {profile_warmup_ms: 2, profile_measure_ms: 10}
apps:
  - {id: fw, use: firewall, target_gbps: 0.3}
"""


def test_parse_minimal_scenario():
    cfg = parse_config(BASE)
    assert cfg.name == "tiny" and cfg.seed == 4
    assert [a.app.app_id for a in cfg.apps] == ["fw"]
    assert len(build_cluster(cfg.cluster)) == 4


def test_syntax_error_reports_line():
    with pytest.raises(ParseError) as err:
        parse_config(BASE + "  - {id: x, use: firewall\n")
    assert err.value.line is not None


def test_type_error_reports_line_and_field():
    with pytest.raises(ParseError) as err:
        parse_config(BASE.replace("duration_ms: 40", "duration_ms: forty"))
    assert err.value.line == 4 and err.value.field == "duration_ms"


def test_unknown_field_is_rejected():
    with pytest.raises(ParseError) as err:
        parse_config(BASE + "colour: blue\n")
    assert err.value.field == "colour"


def test_missing_seed_is_rejected():
    with pytest.raises(ConfigErrorTypes):
        parse_config(BASE.replace("seed: 4\n", ""))


def test_unknown_accelerator_is_a_validation_error():
    text = BASE.replace("  - {id: fw, use: firewall, target_gbps: 0.3}\n", textwrap.dedent("""\
          - id: odd
            target_gbps: 0.1
            spec:
              stages:
                - {name: a, kind: AccelFn, accel: AES}
        """))
    with pytest.raises(ValidationError):
        parse_config(text)


def test_timeline_must_be_ordered():
    text = BASE + "timeline:\n  - {at_ms: 20, event: set_target, app: fw, target_gbps: 0.5}\n" \
                  "  - {at_ms: 10, event: set_target, app: fw, target_gbps: 0.2}\n"
    with pytest.raises(ConfigErrorTypes):
        parse_config(text)


def test_every_bundled_scenario_parses():
    for name in bundled_scenarios():
        assert load_config(name).name == name


def test_run_is_deterministic_and_seed_sensitive(tmp_path):
    cfg = parse_config(BASE)
    a = run_scenario(cfg, tmp_path / "a.json")
    b = run_scenario(cfg, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    data = json.loads((tmp_path / "a.json").read_text())
    assert data["apps"]["fw"]["counters"]["egress"] > 0
    assert a.to_json() == b.to_json()
    c = run_scenario(cfg.with_overrides(seed=5))
    assert c["seed"] == 5


def test_percentiles_and_order_violations():
    p = percentiles([float(i) for i in range(1, 101)])
    assert p["count"] == 100 and p["p50"] == pytest.approx(50.5) and p["p99"] == pytest.approx(99.01)
    assert order_violations([("f", 0, 0), ("f", 0, 2), ("f", 0, 1), ("g", 0, 0)]) == 1


INLINE = BASE.replace("  - {id: fw, use: firewall, target_gbps: 0.3}\n", textwrap.dedent("""\
      - id: gw
        target_gbps: 0.1
        spec:
          stages:
            - {name: ddos, kind: PktFlt, ucf: ddos_check, service: SERVICE}
            - {name: re, kind: AccelFn, accel: Regex}
    """))


def test_inline_service_as_number_or_mapping():
    a = parse_config(INLINE.replace("SERVICE", "100")).apps[0].app
    b = parse_config(INLINE.replace("SERVICE", "{fixed_us: 100}")).apps[0].app
    assert a.stages[0].service_model == b.stages[0].service_model


def test_stage_type_error_keeps_its_line():
    with pytest.raises(ParseError) as err:
        parse_config(INLINE.replace("SERVICE", "fast"))
    assert err.value.line == 14 and str(err.value).count("field") == 1
