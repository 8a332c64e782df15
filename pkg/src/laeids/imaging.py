"""Session -> grayscale image transforms."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from laeids.errors import EmptyInput, EmptySource, NonFiniteFeature, ShapeMismatch
from laeids.ingest import FlowSession

TIMG_MAGIC = b"TIMG"
_TIMG_HEADER = struct.Struct("<4sIII")  # magic, height, width, image count


class ImageSource(str, Enum):
    PAYLOAD_BYTES = "payload_bytes"
    TABULAR_QUANTIZED = "tabular_quantized"


@dataclass(frozen=True)
class ImageConfig:
    height: int = 32
    width: int = 32
    source: ImageSource = ImageSource.PAYLOAD_BYTES
    # PAYLOAD_BYTES only: empty payloads fall back to the tabular encoding
    tabular_fallback: bool = False

    def __post_init__(self):
        object.__setattr__(self, "source", ImageSource(self.source))
        if self.height < 2 or self.width < 2:
            raise ValueError("image must be at least 2x2")

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def to_dict(self) -> dict:
        return {"height": self.height, "width": self.width,
                "source": self.source.value, "tabular_fallback": self.tabular_fallback}

    @classmethod
    def from_dict(cls, d: dict) -> "ImageConfig":
        return cls(d.get("height", 32), d.get("width", 32),
                   ImageSource(d.get("source", "payload_bytes")), d.get("tabular_fallback", False))


@dataclass
class TrafficImage:
    pixels: np.ndarray  # (height, width), values in [0, 1]
    source_session_id: str = ""

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def flat(self) -> np.ndarray:
        return self.pixels.reshape(-1)


@dataclass(frozen=True)
class ScalerStats:
    """Per-feature min/max from the training split."""

    mins: np.ndarray
    maxs: np.ndarray

    def transform(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise NonFiniteFeature("tabular feature is NaN or infinite")
        if x.shape[-1] != self.mins.shape[0]:
            raise ShapeMismatch(f"expected {self.mins.shape[0]} features, got {x.shape[-1]}")
        return np.clip((x - self.mins) / (self.maxs - self.mins), 0.0, 1.0)

    def to_dict(self) -> dict:
        return {"mins": self.mins.tolist(), "maxs": self.maxs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerStats":
        return cls(np.asarray(d["mins"], dtype=np.float64), np.asarray(d["maxs"], dtype=np.float64))


def fit_scaler(training_sessions: Iterable[FlowSession]) -> ScalerStats:
    rows = [s.tabular_features for s in training_sessions if s.tabular_features.size]
    if not rows:
        raise EmptyInput("no training sessions with tabular features")
    X = np.vstack(rows)
    if not np.all(np.isfinite(X)):
        raise NonFiniteFeature("training features contain NaN or infinite values")
    mins = X.min(axis=0)
    maxs = X.max(axis=0)
    maxs = np.where(maxs > mins, maxs, mins + 1.0)
    return ScalerStats(mins, maxs)


def payload_pixels(payload: bytes, n_pixels: int) -> np.ndarray:
    buf = np.zeros(n_pixels, dtype=np.float64)
    head = np.frombuffer(payload[:n_pixels], dtype=np.uint8)
    buf[: head.size] = head / 255.0
    return buf


def tabular_pixels(features, scaler: ScalerStats, n_pixels: int) -> np.ndarray:
    scaled = scaler.transform(features)
    if scaled.size > n_pixels:
        raise ShapeMismatch(f"{scaled.size} features do not fit into {n_pixels} pixels")
    buf = np.zeros(n_pixels, dtype=np.float64)
    buf[: scaled.size] = scaled
    return buf


def session_to_image(session: FlowSession, cfg: ImageConfig, scaler: Optional[ScalerStats] = None) -> TrafficImage:
    L = cfg.n_pixels
    use_tabular = cfg.source is ImageSource.TABULAR_QUANTIZED
    if not use_tabular and not session.payload:
        if not cfg.tabular_fallback:
            raise EmptySource(f"session {session.session_id} has no payload")
        use_tabular = True
    if use_tabular:
        if session.tabular_features.size == 0:
            raise EmptySource(f"session {session.session_id} has no tabular features")
        if scaler is None:
            raise ValueError("tabular images need scaler statistics")
        flat = tabular_pixels(session.tabular_features, scaler, L)
    else:
        flat = payload_pixels(session.payload, L)
    return TrafficImage(flat.reshape(cfg.height, cfg.width), session.session_id)


def sessions_to_matrix(sessions: Sequence[FlowSession], cfg: ImageConfig,
                       scaler: Optional[ScalerStats] = None) -> np.ndarray:
    """Flattened images stacked row-wise, shape (n, H*W)."""
    out = np.empty((len(sessions), cfg.n_pixels))
    for i, s in enumerate(sessions):
        out[i] = session_to_image(s, cfg, scaler).flat()
    return out


def benign_only(sessions: Iterable[FlowSession], benign_label: str) -> list:
    return [s for s in sessions if s.label == benign_label]


def all_classes(sessions: Iterable[FlowSession]) -> list:
    return list(sessions)


def images_to_bytes(images: Sequence[TrafficImage]) -> bytes:
    if not images:
        raise EmptyInput("no images to serialise")
    h, w = images[0].height, images[0].width
    if any(im.pixels.shape != (h, w) for im in images):
        raise ShapeMismatch("images in one blob must share a shape")
    body = np.stack([im.pixels for im in images]).astype("<f4").tobytes()
    return _TIMG_HEADER.pack(TIMG_MAGIC, h, w, len(images)) + body


def images_from_bytes(blob: bytes) -> list:
    magic, h, w, n = _TIMG_HEADER.unpack_from(blob)
    if magic != TIMG_MAGIC:
        raise ValueError("not a TIMG blob")
    body = np.frombuffer(blob, dtype="<f4", offset=_TIMG_HEADER.size, count=n * h * w)
    return [TrafficImage(body[i * h * w:(i + 1) * h * w].astype(np.float64).reshape(h, w)) for i in range(n)]


def save_images(path, images: Sequence[TrafficImage]) -> None:
    with open(path, "wb") as fh:
        fh.write(images_to_bytes(images))


def load_images(path) -> list:
    with open(path, "rb") as fh:
        return images_from_bytes(fh.read())
