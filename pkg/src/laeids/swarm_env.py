"""Synthetic aerial-swarm scenarios and a desk-scale traffic corpus.

Churn is probabilistic: each step every absent node may join and every
present node may leave, report resources or send a traffic batch. Batteries
only drain. Nodes drawn as hostile at their first join send a configurable
share of attack sessions; everyone else replays benign traffic.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from laeids.classify import ResourceStatus
from laeids.errors import MissingClassInSource
from laeids.ingest import FeatureSchema, FiveTuple, FlowSession, Protocol
from laeids.orchestrator import EventKind, PerceptionEvent
from laeids.pso_select import DeviceProfile

SYNTH_FEATURES = (
    "payload_len", "byte_entropy", "byte_mean", "byte_std", "zero_frac",
    "printable_frac", "distinct_frac", "mean_abs_diff", "top_byte_frac", "compress_ratio",
)
SYNTH_SCHEMA = FeatureSchema("synthetic-v1", SYNTH_FEATURES, ("benign", "malicious"))


def byte_entropy(payload: bytes) -> float:
    """Shannon entropy of the byte histogram, in bits (0..8)."""
    if not payload:
        return 0.0
    counts = np.bincount(np.frombuffer(payload, dtype=np.uint8), minlength=256)
    p = counts[counts > 0] / len(payload)
    return float(-(p * np.log2(p)).sum())


def payload_features(payload: bytes) -> np.ndarray:
    """Summary statistics in the order of ``SYNTH_FEATURES``."""
    b = np.frombuffer(payload, dtype=np.uint8).astype(np.float64)
    n = b.size
    if n == 0:
        return np.zeros(len(SYNTH_FEATURES))
    counts = np.bincount(b.astype(np.int64), minlength=256)
    return np.array([
        n,
        byte_entropy(payload),
        b.mean(),
        b.std(),
        counts[0] / n,
        np.mean((b >= 32) & (b < 127)),
        np.count_nonzero(counts) / 256.0,  # share of the byte alphabet used
        np.abs(np.diff(b)).mean() if n > 1 else 0.0,
        counts.max() / n,
        len(zlib.compress(payload, 6)) / n,
    ])


@dataclass(frozen=True)
class CorpusConfig:
    n_benign: int = 1500
    n_malicious: int = 1500
    image_size: int = 1024  # bytes per image; payload lengths stay within it
    seed: int = 42
    n_templates: int = 4
    noise_amplitude: int = 8  # benign byte jitter; raising it narrows the entropy gap
    noise_rate: float = 0.15  # share of benign bytes that get jitter
    min_len: int = 128


def _templates(rng: np.random.Generator, k: int) -> list:
    out = []
    for i in range(k):
        hdr = bytes([0xFE, 0x21 + i]) + b"LAE" + bytes([i]) * 3
        fields = rng.integers(32, 127, size=int(rng.integers(8, 24)), dtype=np.uint8).tobytes()
        out.append(hdr + fields + bytes(int(rng.integers(4, 16))))
    return out


def synth_corpus(cfg: CorpusConfig = CorpusConfig()) -> list:
    """Labeled sessions: structured low-entropy benign payloads, random high-entropy attacks."""
    if cfg.n_benign < 1 or cfg.n_malicious < 1:
        raise ValueError("need at least one session per class")
    rng = np.random.default_rng(cfg.seed)
    templates = _templates(rng, cfg.n_templates)
    max_len = max(cfg.min_len + 1, cfg.image_size)
    labels = ["benign"] * cfg.n_benign + ["malicious"] * cfg.n_malicious
    order = rng.permutation(len(labels))
    sessions = []
    for i, j in enumerate(order):
        label = labels[j]
        length = int(rng.integers(cfg.min_len, max_len + 1))
        if label == "benign":
            t = templates[int(rng.integers(len(templates)))]
            body = np.frombuffer((t * (length // len(t) + 1))[:length], dtype=np.uint8).astype(np.int64)
            hit = rng.random(length) < cfg.noise_rate
            jitter = rng.integers(-cfg.noise_amplitude, cfg.noise_amplitude + 1, size=length)
            payload = ((body + hit * jitter) % 256).astype(np.uint8).tobytes()
            proto = Protocol.UDP
        else:
            payload = rng.integers(0, 256, size=length, dtype=np.uint8).tobytes()
            proto = Protocol.TCP
        node = int(rng.integers(1, 255))
        ft = FiveTuple(f"10.0.{node}.{int(rng.integers(1, 255))}", "10.1.0.1",
                       int(rng.integers(1024, 65536)), 14550 if proto is Protocol.UDP else 443, proto)
        sessions.append(FlowSession(
            session_id=f"synth{cfg.seed}-{i:05d}",
            five_tuple=ft,
            start_time=1_700_000_000_000_000 + i * 1000,
            payload=payload,
            tabular_features=payload_features(payload),
            label=label,
            schema_name=SYNTH_SCHEMA.name,
        ))
    return sessions


DEFAULT_PROFILES = (
    DeviceProfile("quadcopter", (54.0, 2.0, 512.0), SYNTH_SCHEMA.name),
    DeviceProfile("fixed_wing", (11.0, 1.0, 256.0), SYNTH_SCHEMA.name),
    DeviceProfile("ground_sensor", (1.0, 0.0, 64.0), SYNTH_SCHEMA.name),
)


@dataclass(frozen=True)
class SimConfig:
    replay: tuple = ()  # labeled FlowSessions to sample traffic from
    n_nodes: int = 5
    initial_nodes: Optional[int] = None  # defaults to n_nodes
    steps: int = 50
    join_prob: float = 0.05
    leave_prob: float = 0.03
    traffic_prob: float = 0.4
    resource_prob: float = 0.2
    battery_drain_mean: float = 0.01
    battery_drain_jitter: float = 0.005
    attack_mix: tuple = (("malicious", 0.3),)  # (class, share of hostile nodes)
    hostile_intensity: float = 0.8  # share of a hostile node's sessions that are attacks
    batch_size: int = 6
    profiles: tuple = DEFAULT_PROFILES
    benign_label: str = "benign"
    seed: int = 7
    step_us: int = 1_000_000

    def __post_init__(self):
        object.__setattr__(self, "replay", tuple(self.replay))
        mix = self.attack_mix.items() if isinstance(self.attack_mix, dict) else self.attack_mix
        object.__setattr__(self, "attack_mix", tuple((str(k), float(v)) for k, v in mix))
        for name in ("join_prob", "leave_prob", "traffic_prob", "resource_prob", "hostile_intensity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if any(v < 0 for _, v in self.attack_mix) or sum(v for _, v in self.attack_mix) > 1.0 + 1e-12:
            raise ValueError("attack fractions must be >= 0 and sum to at most 1")


@dataclass
class _Node:
    node_id: str
    present: bool = False
    joined_once: bool = False
    hostile_class: Optional[str] = None
    profile: Optional[DeviceProfile] = None
    battery: float = 1.0
    cpu: float = 0.2


def generate_scenario(cfg: SimConfig) -> list:
    """Timestamp-ordered PerceptionEvents; identical configs give identical streams."""
    pools: dict = {}
    for s in cfg.replay:
        pools.setdefault(s.label, []).append(s)
    needed = [cfg.benign_label] + [c for c, f in cfg.attack_mix if f > 0]
    missing = [c for c in needed if not pools.get(c)]
    if missing:
        raise MissingClassInSource(f"replay source lacks classes {missing}")
    rng = np.random.default_rng(cfg.seed)
    classes = [c for c, _ in cfg.attack_mix]
    shares = np.array([f for _, f in cfg.attack_mix]) if classes else np.zeros(0)
    hostile_total = float(shares.sum()) if classes else 0.0
    nodes = [_Node(f"uav-{i:02d}") for i in range(cfg.n_nodes)]
    initial = cfg.n_nodes if cfg.initial_nodes is None else cfg.initial_nodes
    events = []

    def emit(step, kind, node, payload=None):
        # event index as sub-step offset keeps timestamps strictly increasing
        events.append(PerceptionEvent(kind, node.node_id, step * cfg.step_us + len(events), payload))

    def join(step, node):
        if not node.joined_once:
            node.profile = cfg.profiles[int(rng.integers(len(cfg.profiles)))]
            node.battery = float(1.0 - 0.3 * rng.random())
            node.cpu = float(0.5 * rng.random())
            if rng.random() < hostile_total:
                node.hostile_class = classes[int(rng.choice(len(classes), p=shares / hostile_total))]
            node.joined_once = True
        node.present = True
        emit(step, EventKind.NODE_JOIN, node, node.profile)

    def batch(step, node):
        out = []
        for k in range(cfg.batch_size):
            attack = node.hostile_class is not None and rng.random() < cfg.hostile_intensity
            pool = pools[node.hostile_class if attack else cfg.benign_label]
            src = pool[int(rng.integers(len(pool)))]
            out.append(replace(src, session_id=f"{src.session_id}#{len(events)}.{k}"))
        emit(step, EventKind.TRAFFIC_BATCH, node, out)

    for node in nodes[:initial]:
        join(0, node)
    for step in range(cfg.steps):
        for node in nodes:
            if not node.present:
                if rng.random() < cfg.join_prob:
                    join(step, node)
                continue
            if step > 0 and rng.random() < cfg.leave_prob:
                node.present = False
                emit(step, EventKind.NODE_LEAVE, node)
                continue
            drain = cfg.battery_drain_mean + cfg.battery_drain_jitter * (2 * rng.random() - 1)
            node.battery = max(0.0, node.battery - max(0.0, drain))
            node.cpu = float(np.clip(node.cpu + 0.2 * (rng.random() - 0.5), 0.0, 1.0))
            if rng.random() < cfg.resource_prob:
                emit(step, EventKind.RESOURCE_UPDATE, node, ResourceStatus(node.battery, node.cpu, 0.5))
            if rng.random() < cfg.traffic_prob:
                batch(step, node)
    return events
