import hashlib
import json

import numpy as np
import pytest

import churn
from conftest import fixture_path
from laeids.classify import ResourceStatus, Tier
from laeids.errors import UnorderedEvents
from laeids.orchestrator import (Action, Alert, EventKind, OrchestratorConfig, OrchestratorState,
                                 PerceptionEvent, Severity, handle_event, read_events_jsonl, run_scenario,
                                 write_alerts_jsonl, write_events_jsonl)
from laeids.pso_select import DeviceProfile
from laeids.swarm_env import SimConfig, generate_scenario
from orch_fixture import MASKS, QUAD, corpora, pipeline, replay_sessions


def _alerts_jsonl(alerts):
    return [json.dumps(a.to_json()) for a in alerts]


def test_join_caches_repository_mask():
    s, alerts = handle_event(OrchestratorState(), PerceptionEvent(EventKind.NODE_JOIN, "n1", 0, QUAD), pipeline())
    assert alerts == []
    assert s.nodes["n1"].mask == MASKS["quadcopter"] and s.nodes["n1"].entry_id == "e1"
    assert s.nodes["n1"].tier is Tier.HEAVY


def test_novel_profile_uses_nearest_entry_and_pool_fallback():
    hexa = DeviceProfile("hexacopter", (50.0, 2.0, 480.0), "synthetic-v1")
    s, _ = handle_event(OrchestratorState(), PerceptionEvent(EventKind.NODE_JOIN, "n1", 0, hexa), pipeline())
    assert s.nodes["n1"].entry_id == "e1"


def test_nine_of_ten_malicious_isolates():
    st = OrchestratorState()
    st, _ = handle_event(st, PerceptionEvent(EventKind.NODE_JOIN, "n1", 0, QUAD), pipeline())
    batch = replay_sessions("malicious")[:9] + replay_sessions("benign")[:1]
    st, alerts = handle_event(st, PerceptionEvent(EventKind.TRAFFIC_BATCH, "n1", 1, batch), pipeline())
    assert len(alerts) == 1
    a = alerts[0]
    assert (a.severity, a.action) == (Severity.INTRUSION, Action.ISOLATED)
    assert sum(v.is_malicious for v in a.verdicts) == 9
    assert st.isolated == {"n1"}


def test_handle_event_does_not_mutate_input():
    st0 = OrchestratorState()
    handle_event(st0, PerceptionEvent(EventKind.NODE_JOIN, "n1", 0, QUAD), pipeline())
    assert st0.nodes == {} and st0.n_events == 0


def test_alert_invariant():
    with pytest.raises(ValueError):
        Alert("n", (), (), Severity.INTRUSION, Action.NONE, 0)


def test_event_payload_must_match_kind():
    with pytest.raises(TypeError):
        PerceptionEvent(EventKind.NODE_JOIN, "n", 0, ResourceStatus())
    with pytest.raises(TypeError):
        PerceptionEvent(EventKind.RESOURCE_UPDATE, "n", 0, QUAD)


def test_empty_and_benign_scenarios():
    r = run_scenario([], pipeline())
    assert r.alerts == [] and r.summary["events"] == 0
    evs = [PerceptionEvent(EventKind.NODE_JOIN, "n", 0, QUAD),
           PerceptionEvent(EventKind.TRAFFIC_BATCH, "n", 1, replay_sessions("benign")[:5])]
    r = run_scenario(evs, pipeline())
    assert r.summary["alerts_by_severity"]["INTRUSION"] == 0
    assert r.summary["verdicts"] == 5


def test_unordered_events_rejected():
    evs = [PerceptionEvent(EventKind.NODE_JOIN, "n", 5, QUAD), PerceptionEvent(EventKind.NODE_LEAVE, "n", 4)]
    with pytest.raises(UnorderedEvents):
        run_scenario(evs, pipeline())


def test_pipeline_error_becomes_reported_alert():
    bad = replay_sessions("benign")[0]
    bad = type(bad)(bad.session_id, bad.five_tuple, 0, bad.payload, np.zeros(3), "benign")
    evs = [PerceptionEvent(EventKind.NODE_JOIN, "n", 0, QUAD), PerceptionEvent(EventKind.TRAFFIC_BATCH, "n", 1, [bad])]
    r = run_scenario(evs, pipeline())
    (a,) = r.alerts
    assert (a.severity, a.action) == (Severity.SUSPECT, Action.REPORTED) and "pipeline error" in a.reason


def test_churn_fixture_matches_hand_trace():
    events = churn.churn_events()
    res = run_scenario(events, pipeline())
    st = res.state
    assert set(st.isolated) == churn.EXPECTED_ISOLATED
    assert st.dropped == churn.EXPECTED_DROPPED_SESSIONS
    assert st.dropped_batches == churn.EXPECTED_DROPPED_BATCHES
    got = [(a.timestamp + 1, a.node_id, a.severity.value, a.action.value) for a in res.alerts]
    assert got == churn.EXPECTED_ALERTS
    assert len(st.verdicts) == churn.EXPECTED_VERDICTS
    light = res.alerts[-1].verdicts
    assert all(v.tier is Tier.LIGHT for v in light)
    assert "C" not in st.nodes and "B" in st.nodes


def test_isolation_is_absorbing_per_event():
    events = churn.churn_events()
    st = OrchestratorState()
    isolated_at = {}
    for i, ev in enumerate(events):
        before = len(st.verdicts)
        st, alerts = handle_event(st, ev, pipeline())
        for n in st.isolated:
            isolated_at.setdefault(n, i)
        if ev.kind is EventKind.TRAFFIC_BATCH and ev.node_id in isolated_at and isolated_at[ev.node_id] < i:
            assert len(st.verdicts) == before
            assert [a.severity for a in alerts] == [Severity.INFO]
    assert set(isolated_at) == {"A", "B"}


def test_replay_is_pure():
    events = churn.churn_events()
    a = run_scenario(events, pipeline())
    b = run_scenario(events, pipeline())
    assert _alerts_jsonl(a.alerts) == _alerts_jsonl(b.alerts)


def golden_events():
    _, replay = corpora()
    return generate_scenario(SimConfig(replay=replay, n_nodes=4, steps=25, seed=7))[:50]


def _events_digest(events):
    h = hashlib.sha256()
    for e in events:
        h.update(json.dumps(e.to_json(), sort_keys=True).encode())
    return h.hexdigest()[:16]


def test_golden_50_event_scenario(tmp_path):
    events = golden_events()
    assert len(events) == 50
    with open(fixture_path("golden_scenario.json")) as fh:
        meta = json.load(fh)
    assert _events_digest(events) == meta["events_digest"]
    res = run_scenario(events, pipeline())
    write_alerts_jsonl(tmp_path / "alerts.jsonl", res.alerts)
    assert (tmp_path / "alerts.jsonl").read_text() == open(fixture_path("golden_alerts.jsonl")).read()


def test_event_jsonl_roundtrip(tmp_path):
    events = churn.churn_events()
    write_events_jsonl(tmp_path / "e.jsonl", events)
    back = read_events_jsonl(tmp_path / "e.jsonl")
    assert [e.to_json() for e in back] == [e.to_json() for e in events]
    assert _alerts_jsonl(run_scenario(back, pipeline()).alerts) == _alerts_jsonl(
        run_scenario(events, pipeline()).alerts)


def test_theta_is_configurable():
    events = churn.churn_events()
    res = run_scenario(events, pipeline(), OrchestratorConfig(theta_isolate=0.7))
    assert res.state.isolated == frozenset()
