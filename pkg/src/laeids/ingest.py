"""Flow-record loading, packet sessionization and anonymization."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from laeids.errors import EmptyInput, MissingFile, NonMonotonicTimestamps, SchemaMismatch

DEFAULT_IDLE_TIMEOUT = 64.0  # seconds
ANON_SRC = "ANON_A"
ANON_DST = "ANON_B"


class Protocol(str, Enum):
    TCP = "TCP"
    UDP = "UDP"
    OTHER = "OTHER"

    @classmethod
    def parse(cls, value) -> "Protocol":
        if isinstance(value, Protocol):
            return value
        v = str(value).strip().upper()
        if v in ("6", "TCP"):
            return cls.TCP
        if v in ("17", "UDP"):
            return cls.UDP
        return cls.OTHER


class FiveTuple(NamedTuple):
    src: str
    dst: str
    sport: int
    dport: int
    proto: Protocol = Protocol.OTHER

    def canonical(self) -> "FiveTuple":
        """Direction-normalised form: the lexicographically smaller endpoint first."""
        a, b = (self.src, self.sport), (self.dst, self.dport)
        if b < a:
            return FiveTuple(self.dst, self.src, self.dport, self.sport, self.proto)
        return self

    def __str__(self) -> str:
        return f"{self.src}:{self.sport}>{self.dst}:{self.dport}/{self.proto.value}"

    @classmethod
    def parse(cls, text: str) -> "FiveTuple":
        """Inverse of ``str()``: ``src:sport>dst:dport/PROTO``."""
        try:
            ends, proto = text.rsplit("/", 1)
            a, b = ends.split(">")
            src, sport = a.rsplit(":", 1)
            dst, dport = b.rsplit(":", 1)
            return cls(src, dst, int(sport), int(dport), Protocol.parse(proto))
        except ValueError as exc:
            raise ValueError(f"bad five-tuple {text!r}") from exc


NULL_TUPLE = FiveTuple("0.0.0.0", "0.0.0.0", 0, 0, Protocol.OTHER)


@dataclass(frozen=True)
class FeatureSchema:
    """Feature and class vocabulary of a tabular flow dataset.

    ``class_names[0]`` is always the benign class.
    """

    name: str
    feature_names: tuple
    class_names: tuple
    label_column: str = "label"

    def __post_init__(self):
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if not self.feature_names:
            raise ValueError("schema needs at least one feature")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise ValueError("feature names must be unique")
        if len(self.class_names) < 2 or len(set(self.class_names)) != len(self.class_names):
            raise ValueError("schema needs a benign class and at least one attack class")

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def benign(self) -> str:
        return self.class_names[0]

    def class_index(self, label: str) -> int:
        return self.class_names.index(label)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "feature_names": list(self.feature_names),
            "class_names": list(self.class_names),
            "label_column": self.label_column,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(d["name"], d["feature_names"], d["class_names"], d.get("label_column", "label"))


@dataclass
class FlowSession:
    session_id: str
    five_tuple: FiveTuple = NULL_TUPLE
    start_time: int = 0  # microseconds since epoch
    payload: bytes = b""
    tabular_features: np.ndarray = field(default_factory=lambda: np.zeros(0))
    label: Optional[str] = None
    schema_name: str = ""

    def __post_init__(self):
        self.payload = bytes(self.payload)
        self.tabular_features = np.asarray(self.tabular_features, dtype=np.float64)
        for port in (self.five_tuple.sport, self.five_tuple.dport):
            if not 0 <= port <= 65535:
                raise ValueError(f"port {port} out of range")
        if self.start_time < 0:
            raise ValueError("start_time must be >= 0")

    def to_json(self) -> dict:
        return {
            "session_id": self.session_id,
            "five_tuple": str(self.five_tuple),
            "start_time": int(self.start_time),
            "payload": self.payload.hex(),
            "tabular_features": [float(v) for v in self.tabular_features],
            "label": self.label,
            "schema_name": self.schema_name,
        }

    @classmethod
    def from_json(cls, d: dict) -> "FlowSession":
        return cls(
            session_id=d["session_id"],
            five_tuple=FiveTuple.parse(d["five_tuple"]),
            start_time=int(d["start_time"]),
            payload=bytes.fromhex(d["payload"]),
            tabular_features=np.asarray(d["tabular_features"], dtype=np.float64),
            label=d.get("label"),
            schema_name=d.get("schema_name", ""),
        )


class SessionList(list):
    """A list of sessions that also remembers how many input rows were rejected."""

    def __init__(self, items=(), skipped_count: int = 0):
        super().__init__(items)
        self.skipped_count = skipped_count


def _parse_number(cell: str) -> Optional[float]:
    try:
        v = float(cell)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def load_flow_records(path, schema: FeatureSchema, limit: Optional[int] = None) -> SessionList:
    """Read a labeled CSV of flow records into sessions.

    Extra columns are ignored. Rows with a non-numeric or non-finite feature
    cell, or with a label outside the schema, are skipped and counted in
    ``skipped_count``.
    """
    if not os.path.isfile(path):
        raise MissingFile(f"no such file: {path}")
    out = SessionList()
    stem = os.path.splitext(os.path.basename(str(path)))[0]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyInput(f"{path} is empty") from None
        wanted = list(schema.feature_names) + [schema.label_column]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise SchemaMismatch(f"columns not found in header: {missing[:3]}")
        cols = [header.index(c) for c in schema.feature_names]
        label_col = header.index(schema.label_column)
        for row_no, row in enumerate(reader):
            if limit is not None and len(out) >= limit:
                break
            if not row:
                continue
            if len(row) < len(header):
                out.skipped_count += 1
                continue
            values = [_parse_number(row[c]) for c in cols]
            label = row[label_col].strip()
            if any(v is None for v in values) or label not in schema.class_names:
                out.skipped_count += 1
                continue
            out.append(FlowSession(
                session_id=f"{stem}:{row_no}",
                tabular_features=np.array(values),
                label=label,
                schema_name=schema.name,
            ))
    if not out:
        raise EmptyInput(f"{path}: no valid rows ({out.skipped_count} skipped)")
    return out


def infer_schema(path, label_column: str = "label", name: Optional[str] = None,
                 benign: Optional[str] = None, exclude: Sequence[str] = (), sample_rows: int = 2000) -> FeatureSchema:
    """Build a schema from a CSV header, keeping columns numeric in every sampled row."""
    if not os.path.isfile(path):
        raise MissingFile(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if label_column not in header:
            raise SchemaMismatch(f"label column {label_column!r} not in header")
        numeric = [c not in exclude and c != label_column for c in header]
        labels = set()
        li = header.index(label_column)
        for i, row in enumerate(reader):
            if i >= sample_rows:
                break
            if len(row) < len(header):
                continue
            labels.add(row[li].strip())
            for j, cell in enumerate(row):
                if numeric[j] and _parse_number(cell) is None:
                    numeric[j] = False
    features = [c for c, ok in zip(header, numeric) if ok]
    if benign is None:
        benign = next((l for l in sorted(labels) if l.lower() in ("benign", "normal", "0")), sorted(labels)[0])
    classes = [benign] + sorted(labels - {benign})
    return FeatureSchema(name or os.path.splitext(os.path.basename(str(path)))[0], features, classes, label_column)


def write_flow_csv(path, sessions: Iterable[FlowSession], schema: FeatureSchema) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(schema.feature_names) + [schema.label_column])
        for s in sessions:
            w.writerow([repr(float(v)) for v in s.tabular_features] + [s.label or ""])


def write_sessions_jsonl(path, sessions: Iterable[FlowSession]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sessions:
            fh.write(json.dumps(s.to_json()) + "\n")


def read_sessions_jsonl(path) -> list:
    if not os.path.isfile(path):
        raise MissingFile(f"no such file: {path}")
    with open(path, encoding="utf-8") as fh:
        return [FlowSession.from_json(json.loads(line)) for line in fh if line.strip()]


def _as_tuple(ft) -> FiveTuple:
    if isinstance(ft, FiveTuple):
        return ft
    if isinstance(ft, str):
        return FiveTuple.parse(ft)
    proto = Protocol.parse(ft[4]) if len(ft) > 4 else Protocol.OTHER
    return FiveTuple(str(ft[0]), str(ft[1]), int(ft[2]), int(ft[3]), proto)


def _session_id(key: FiveTuple, start: int) -> str:
    return f"{key}@{start}"


def sessionize(packets, idle_timeout: float = DEFAULT_IDLE_TIMEOUT) -> list:
    """Group ``(five_tuple, timestamp_us, payload)`` packets into sessions.

    Packets sharing a canonical five-tuple belong to one session until the gap
    to the previous packet exceeds ``idle_timeout`` seconds. Output is ordered
    by (canonical tuple, start time), so it does not depend on how packets of
    different flows were interleaved.
    """
    timeout_us = idle_timeout * 1_000_000
    flows: dict = {}
    for ft, ts, payload in packets:
        key = _as_tuple(ft).canonical()
        ts = int(ts)
        runs = flows.setdefault(key, [])
        if runs:
            last_ts, chunks, start = runs[-1]
            if ts < last_ts:
                raise NonMonotonicTimestamps(str(key))
            if ts - last_ts <= timeout_us:
                chunks.append(bytes(payload))
                runs[-1] = (ts, chunks, start)
                continue
        runs.append((ts, [bytes(payload)], ts))
    out = []
    for key in sorted(flows, key=lambda k: (k.src, k.sport, k.dst, k.dport, k.proto.value)):
        for _, chunks, start in flows[key]:
            out.append(FlowSession(_session_id(key, start), key, start, b"".join(chunks)))
    return out


def read_packet_fixture(path, tuples: Optional[dict] = None) -> list:
    """Parse ``tuple_id,timestamp_us,hex_payload`` lines.

    ``tuple_id`` is either a literal ``src:sport>dst:dport/PROTO`` or a key of
    ``tuples``. Blank lines and ``#`` comments are ignored.
    """
    if not os.path.isfile(path):
        raise MissingFile(f"no such file: {path}")
    packets = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tid, ts, hexpay = (p.strip() for p in line.split(",", 2))
            ft = tuples[tid] if tuples and tid in tuples else FiveTuple.parse(tid)
            packets.append((ft, int(ts), bytes.fromhex(hexpay)))
    return packets


def anonymize(session: FlowSession, header_bytes: int = 0) -> FlowSession:
    """Replace addresses with placeholders and zero the first ``header_bytes`` of payload."""
    ft = session.five_tuple._replace(src=ANON_SRC, dst=ANON_DST)
    k = min(max(header_bytes, 0), len(session.payload))
    payload = bytes(k) + session.payload[k:]
    return replace(session, five_tuple=ft, payload=payload)
