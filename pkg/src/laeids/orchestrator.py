"""Perception -> reasoning -> action loop over environment events.

The loop keeps per-node state: the feature mask chosen from the knowledge
repository at join time, the last resource report and the classifier tier
it implies. Traffic from a node is classified session by session; a batch
whose malicious fraction reaches ``theta_isolate`` isolates the node for the
rest of the scenario.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from laeids.classify import (ClassifierModel, ResourcePolicy, ResourceStatus, Tier, bits_to_mask, mask_to_bits,
                             predict_batch, select_tier, verdicts_from_scores)
from laeids.diffusion import FeatureMemory
from laeids.errors import DimensionMismatch, UnorderedEvents
from laeids.imaging import ImageConfig, ScalerStats, sessions_to_matrix
from laeids.ingest import FlowSession
from laeids.pso_select import DeviceProfile, KnowledgeRepository, query_repository

log = logging.getLogger(__name__)


class EventKind(str, Enum):
    TRAFFIC_BATCH = "TRAFFIC_BATCH"
    NODE_JOIN = "NODE_JOIN"
    NODE_LEAVE = "NODE_LEAVE"
    RESOURCE_UPDATE = "RESOURCE_UPDATE"


_PAYLOAD_TYPES = {
    EventKind.TRAFFIC_BATCH: (list, tuple),
    EventKind.NODE_JOIN: (DeviceProfile,),
    EventKind.RESOURCE_UPDATE: (ResourceStatus,),
    EventKind.NODE_LEAVE: (type(None),),
}


@dataclass(frozen=True)
class PerceptionEvent:
    kind: EventKind
    node_id: str
    timestamp: int  # microseconds
    payload: object = None

    def __post_init__(self):
        object.__setattr__(self, "kind", EventKind(self.kind))
        if not isinstance(self.payload, _PAYLOAD_TYPES[self.kind]):
            raise TypeError(f"{self.kind.value} event cannot carry {type(self.payload).__name__}")
        if self.kind is EventKind.TRAFFIC_BATCH:
            object.__setattr__(self, "payload", tuple(self.payload))

    def to_json(self) -> dict:
        if self.kind is EventKind.TRAFFIC_BATCH:
            payload = [s.to_json() for s in self.payload]
        elif self.payload is None:
            payload = None
        else:
            payload = self.payload.to_json()
        return {"kind": self.kind.value, "node_id": self.node_id, "timestamp": self.timestamp, "payload": payload}

    @classmethod
    def from_json(cls, d: dict) -> "PerceptionEvent":
        kind = EventKind(d["kind"])
        raw = d.get("payload")
        if kind is EventKind.TRAFFIC_BATCH:
            payload = [FlowSession.from_json(s) for s in raw]
        elif kind is EventKind.NODE_JOIN:
            payload = DeviceProfile.from_json(raw)
        elif kind is EventKind.RESOURCE_UPDATE:
            payload = ResourceStatus(**raw)
        else:
            payload = None
        return cls(kind, d["node_id"], int(d["timestamp"]), payload)


def write_events_jsonl(path, events: Iterable[PerceptionEvent]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            fh.write(json.dumps(e.to_json()) + "\n")


def read_events_jsonl(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [PerceptionEvent.from_json(json.loads(line)) for line in fh if line.strip()]


class Severity(str, Enum):
    INFO = "INFO"
    SUSPECT = "SUSPECT"
    INTRUSION = "INTRUSION"


class Action(str, Enum):
    NONE = "NONE"
    ISOLATED = "ISOLATED"
    REPORTED = "REPORTED"


@dataclass(frozen=True)
class Alert:
    node_id: str
    session_ids: tuple
    verdicts: tuple
    severity: Severity
    action: Action
    timestamp: int
    reason: str = ""

    def __post_init__(self):
        if self.severity is Severity.INTRUSION and self.action is Action.NONE:
            raise ValueError("an intrusion alert must carry an action")

    def to_json(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "node_id": self.node_id,
            "severity": self.severity.value,
            "action": self.action.value,
            "reason": self.reason,
            "session_ids": list(self.session_ids),
            "verdicts": [{"predicted": v.predicted, "is_malicious": v.is_malicious,
                          "score": round(max(v.scores), 6), "tier": v.tier.value} for v in self.verdicts],
        }


def write_alerts_jsonl(path, alerts: Iterable[Alert]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a in alerts:
            fh.write(json.dumps(a.to_json()) + "\n")


FEATURE_MODES = ("concat", "tabular", "phi")


@dataclass
class DetectionPipeline:
    """Everything the online loop needs, produced by the offline stages.

    ``pool`` maps a mask bitstring to one model per tier; nodes whose
    repository mask has no pool entry use ``default_mask``.
    """

    image_cfg: ImageConfig
    scaler: Optional[ScalerStats]
    memory: Optional[FeatureMemory]
    repository: KnowledgeRepository
    pool: dict
    default_mask: str
    default_profile: DeviceProfile
    feature_mode: str = "concat"
    policy: ResourcePolicy = ResourcePolicy()
    advisor: object = None

    def features(self, sessions: Sequence[FlowSession], mask) -> np.ndarray:
        return build_features(sessions, mask, self.feature_mode, self.image_cfg, self.scaler, self.memory)

    def models_for(self, mask_bits: str) -> dict:
        return self.pool.get(mask_bits) or self.pool[self.default_mask]


def build_features(sessions, mask, mode: str, image_cfg: ImageConfig, scaler, memory) -> np.ndarray:
    """Classifier input rows: masked tabular features, representation vectors, or both."""
    if mode not in FEATURE_MODES:
        raise ValueError(f"unknown feature mode {mode!r}")
    parts = []
    if mode in ("concat", "tabular"):
        tab = np.vstack([s.tabular_features for s in sessions]) if sessions else np.zeros((0, len(mask)))
        if tab.shape[1] != len(mask):
            raise DimensionMismatch(f"sessions have {tab.shape[1]} features, mask has {len(mask)}")
        parts.append(tab[:, np.asarray(mask, dtype=bool)])
    if mode in ("concat", "phi"):
        if memory is None:
            raise ValueError("feature memory required for representation features")
        parts.append(memory.features(sessions_to_matrix(sessions, image_cfg, scaler)))
    return np.hstack(parts)


@dataclass(frozen=True)
class OrchestratorConfig:
    theta_isolate: float = 0.5


@dataclass(frozen=True)
class NodeState:
    profile: DeviceProfile
    mask: str
    entry_id: str
    status: ResourceStatus
    tier: Tier
    registered_by: str = "join"


@dataclass
class OrchestratorState:
    nodes: dict = field(default_factory=dict)
    isolated: frozenset = frozenset()
    dropped: dict = field(default_factory=dict)  # node -> dropped session count
    verdicts: list = field(default_factory=list)  # (node, session_id, label, Verdict)
    n_events: int = 0
    dropped_batches: dict = field(default_factory=dict)  # node -> dropped batch count

    def copy(self) -> "OrchestratorState":
        return OrchestratorState(dict(self.nodes), self.isolated, dict(self.dropped), list(self.verdicts),
                                 self.n_events, dict(self.dropped_batches))


def _register(pipeline: DetectionPipeline, profile: DeviceProfile, how: str,
              status: ResourceStatus = ResourceStatus()) -> NodeState:
    match = query_repository(pipeline.repository, profile, pipeline.advisor)
    bits = mask_to_bits(match.mask)
    if bits not in pipeline.pool:
        bits = pipeline.default_mask
    tier = select_tier(pipeline.models_for(bits), status, pipeline.policy)
    return NodeState(profile, bits, match.entry_id, status, tier, how)


def _classify(pipeline: DetectionPipeline, node: NodeState, sessions) -> list:
    model: ClassifierModel = pipeline.models_for(node.mask)[node.tier]
    X = pipeline.features(sessions, bits_to_mask(node.mask))
    return verdicts_from_scores(model, predict_batch(model, X))


def handle_event(state: OrchestratorState, event: PerceptionEvent, pipeline: DetectionPipeline,
                 config: OrchestratorConfig = OrchestratorConfig()):
    """Apply one event; returns the new state and the alerts it raised."""
    s = state.copy()
    s.n_events += 1
    alerts = []
    nid, ts = event.node_id, event.timestamp
    try:
        if event.kind is EventKind.NODE_JOIN:
            s.nodes[nid] = _register(pipeline, event.payload, "join")
        elif event.kind is EventKind.NODE_LEAVE:
            s.nodes.pop(nid, None)
        elif event.kind is EventKind.RESOURCE_UPDATE:
            node = s.nodes.get(nid) or _register(pipeline, pipeline.default_profile, "auto")
            tier = select_tier(pipeline.models_for(node.mask), event.payload, pipeline.policy)
            s.nodes[nid] = replace(node, status=event.payload, tier=tier)
        else:
            sessions = list(event.payload)
            sids = tuple(x.session_id for x in sessions)
            if nid in s.isolated:
                s.dropped[nid] = s.dropped.get(nid, 0) + len(sessions)
                s.dropped_batches[nid] = s.dropped_batches.get(nid, 0) + 1
                alerts.append(Alert(nid, sids, (), Severity.INFO, Action.NONE, ts, "dropped: node isolated"))
                return s, alerts
            if nid not in s.nodes:
                s.nodes[nid] = _register(pipeline, pipeline.default_profile, "auto")
                alerts.append(Alert(nid, sids, (), Severity.SUSPECT, Action.REPORTED, ts,
                                    "traffic from unregistered node"))
            if not sessions:
                return s, alerts
            verdicts = _classify(pipeline, s.nodes[nid], sessions)
            for x, v in zip(sessions, verdicts):
                s.verdicts.append((nid, x.session_id, x.label, v))
            n_bad = sum(v.is_malicious for v in verdicts)
            frac = n_bad / len(verdicts)
            if frac >= config.theta_isolate:
                s.isolated = s.isolated | {nid}
                alerts.append(Alert(nid, sids, tuple(verdicts), Severity.INTRUSION, Action.ISOLATED, ts,
                                    f"malicious fraction {frac:.3f} >= {config.theta_isolate}"))
            elif n_bad:
                alerts.append(Alert(nid, sids, tuple(verdicts), Severity.SUSPECT, Action.REPORTED, ts,
                                    f"malicious fraction {frac:.3f}"))
    except Exception as exc:  # a broken stage must not stop the loop
        log.warning("event %s for %s failed: %s", event.kind.value, nid, exc)
        sids = tuple(x.session_id for x in event.payload) if event.kind is EventKind.TRAFFIC_BATCH else ()
        alerts.append(Alert(nid, sids, (), Severity.SUSPECT, Action.REPORTED, ts,
                            f"pipeline error: {type(exc).__name__}: {exc}"))
    return s, alerts


@dataclass
class ScenarioResult:
    alerts: list
    latencies: list  # seconds per event
    summary: dict
    state: OrchestratorState

    def latency_stats(self) -> dict:
        if not self.latencies:
            return {"events": 0}
        a = np.asarray(self.latencies)
        return {"events": int(a.size), "mean_s": float(a.mean()), "p50_s": float(np.percentile(a, 50)),
                "p95_s": float(np.percentile(a, 95)), "max_s": float(a.max())}


def run_scenario(events: Sequence[PerceptionEvent], pipeline: DetectionPipeline,
                 config: OrchestratorConfig = OrchestratorConfig(),
                 state: Optional[OrchestratorState] = None) -> ScenarioResult:
    for a, b in zip(events, events[1:]):
        if b.timestamp < a.timestamp:
            raise UnorderedEvents(f"event at {b.timestamp} follows event at {a.timestamp}")
    state = state or OrchestratorState()
    alerts, latencies = [], []
    for ev in events:
        t0 = time.perf_counter()
        state, new = handle_event(state, ev, pipeline, config)
        latencies.append(time.perf_counter() - t0)
        alerts.extend(new)
    by_sev = {s.value: sum(a.severity is s for a in alerts) for s in Severity}
    summary = {
        "events": len(events),
        "alerts": len(alerts),
        "alerts_by_severity": by_sev,
        "isolated_nodes": sorted(state.isolated),
        "dropped_sessions": dict(sorted(state.dropped.items())),
        "dropped_batches": dict(sorted(state.dropped_batches.items())),
        "verdicts": len(state.verdicts),
    }
    return ScenarioResult(alerts, latencies, summary, state)
