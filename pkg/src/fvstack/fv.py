"""Fisher Vector encoding, sum pooling and the double-normalization chain."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, DescriptorFormatError
from .gmm import GmmModel, _check_dim, posterior

POOLED_RAW = "pooled-raw"
NORMALIZED = "normalized"

REP_MAGIC = b"FVR1"


@dataclass(frozen=True, eq=False)
class FisherVector:
    channel: str
    values: np.ndarray
    K: int
    D: int
    stage: str = POOLED_RAW

    def __post_init__(self):
        if self.values.shape != (2 * self.K * self.D,):
            raise DataError(
                f"Fisher vector of channel {self.channel} has length {self.values.size}, "
                f"expected 2*K*D = {2 * self.K * self.D}"
            )


@dataclass(frozen=True, eq=False)
class VideoRepresentation:
    video_id: str
    labels: frozenset
    vector: np.ndarray


def fv_length(K: int, D: int) -> int:
    return 2 * K * D


def fv_encode_row(model: GmmModel, x) -> np.ndarray:
    """Fisher Vector of one descriptor, laid out as [phi_1, ..., phi_K] with
    each phi_k = [first-order block (D), second-order block (D)]."""
    x = _check_dim(model, x)
    if x.ndim != 1:
        raise DataError("fv_encode_row expects a single descriptor row")
    gamma = posterior(model, x)
    z = (x - model.means) / model.stds
    first = (gamma / np.sqrt(model.weights))[:, None] * z
    second = (gamma / np.sqrt(2.0 * model.weights))[:, None] * (z**2 - 1.0)
    return np.concatenate([first, second], axis=1).ravel()


def fv_pool(model: GmmModel, rows, channel: str = "") -> FisherVector:
    """Sum of the per-row Fisher Vectors, via zeroth/first/second-order statistics."""
    X = np.atleast_2d(_check_dim(model, rows))
    if X.shape[0] == 0:
        raise DataError("cannot pool an empty set of descriptors")
    gamma = posterior(model, X)
    s0 = gamma.sum(axis=0)[:, None]
    s1 = gamma.T @ X
    s2 = gamma.T @ X**2
    mu, sd, w = model.means, model.stds, model.weights[:, None]
    first = (s1 - mu * s0) / (sd * np.sqrt(w))
    second = ((s2 - 2.0 * mu * s1 + mu**2 * s0) / sd**2 - s0) / np.sqrt(2.0 * w)
    values = np.concatenate([first, second], axis=1).ravel()
    return FisherVector(channel, values, model.K, model.dim, POOLED_RAW)


def signed_sqrt(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.sqrt(np.abs(v))


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v.copy()


def _normalize(v) -> np.ndarray:
    return l2_normalize(signed_sqrt(v))


def finalize_video(
    per_channel: Sequence[FisherVector],
    channels: Sequence[str] | None = None,
    video_id: str = "",
    labels=frozenset(),
) -> VideoRepresentation:
    """Per-channel signed sqrt + l2, concatenate, then signed sqrt + l2 again."""
    names = [fv.channel for fv in per_channel]
    if channels is not None and list(channels) != names:
        raise DataError(f"channel set {names} does not match the configured {list(channels)}")
    if not per_channel:
        raise DataError("no channel Fisher vectors to finalize")
    for fv in per_channel:
        if fv.stage != POOLED_RAW:
            raise DataError(f"channel {fv.channel}: expected a pooled-raw Fisher vector")
    once = np.concatenate([_normalize(fv.values) for fv in per_channel])
    return VideoRepresentation(video_id, frozenset(labels), _normalize(once))


def write_representation(rep: VideoRepresentation, path) -> None:
    labels = sorted(rep.labels)
    header = REP_MAGIC + struct.pack(f"<II{len(labels)}I", rep.vector.size, len(labels), *labels)
    body = np.asarray(rep.vector).astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_representation(path, video_id: str | None = None) -> VideoRepresentation:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != REP_MAGIC:
        raise DescriptorFormatError("bad magic, expected FVR1", 0)
    if len(buf) < 12:
        raise DescriptorFormatError("truncated header", len(buf))
    dim, n_labels = struct.unpack_from("<II", buf, 4)
    pos = 12 + 4 * n_labels
    if len(buf) < pos:
        raise DescriptorFormatError("truncated label list", len(buf))
    labels = struct.unpack_from(f"<{n_labels}I", buf, 12)
    if len(buf) != pos + 4 * dim:
        raise DescriptorFormatError(
            f"payload holds {(len(buf) - pos) // 4} values, header declares {dim}",
            min(len(buf), pos + 4 * dim),
        )
    vec = np.frombuffer(buf, dtype="<f4", count=dim, offset=pos)
    bad = np.flatnonzero(~np.isfinite(vec))
    if bad.size:
        raise DescriptorFormatError("non-finite value", pos + 4 * int(bad[0]))
    return VideoRepresentation(
        video_id if video_id is not None else path.stem,
        frozenset(labels),
        vec.astype(np.float32),
    )
