"""Trajectory descriptor sets: binary I/O, RootSIFT, STA, DAFS stacking and a
synthetic generator.

Descriptor files (``.fvd``) are little-endian::

    b"FVD1" | u32 version=1 | u32 channel_count
    channel_count x { u8 name_len | name (utf-8) | u32 raw_dim }
    u32 label_count | label_count x u32 | u64 record_count
    record_count x { f32 x | f32 y | f32 t | per channel raw_dim x f32 }

The video id is not part of the payload; it is the file stem.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError, DescriptorFormatError

MAGIC = b"FVD1"
VERSION = 1


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    raw_dim: int

    def __post_init__(self):
        if not isinstance(self.raw_dim, (int, np.integer)) or self.raw_dim <= 0:
            raise DataError(f"channel {self.name!r}: raw_dim must be a positive integer")
        encoded = self.name.encode("utf-8")
        if not 0 < len(encoded) < 256:
            raise DataError(f"channel name {self.name!r} must encode to 1..255 bytes")


IDT_CHANNELS = (
    ChannelSpec("Traj", 30),
    ChannelSpec("HOG", 96),
    ChannelSpec("HOF", 108),
    ChannelSpec("MBHx", 96),
    ChannelSpec("MBHy", 96),
)


@dataclass(frozen=True)
class TransformTag:
    """One semantically-neutral video transformation used for DAFS."""

    skip_level: int = 1
    mirrored: bool = False

    def __post_init__(self):
        if self.skip_level < 1:
            raise DataError("skip_level must be >= 1")

    @property
    def is_identity(self) -> bool:
        return self.skip_level == 1 and not self.mirrored

    def __str__(self) -> str:
        return f"s{self.skip_level}{'m' if self.mirrored else ''}"

    @classmethod
    def parse(cls, text: str) -> "TransformTag":
        """Parse the ``s<skip>[m]`` form produced by ``str()``."""
        text = text.strip()
        if not text.startswith("s"):
            raise DataError(f"bad transform tag {text!r}")
        mirrored = text.endswith("m")
        body = text[1:-1] if mirrored else text[1:]
        try:
            return cls(int(body), mirrored)
        except ValueError:
            raise DataError(f"bad transform tag {text!r}") from None


IDENTITY = TransformTag()
# {1,2,3} x {plain, mirrored}; configurable, see README for the "7 versions" note.
DEFAULT_VARIANTS = tuple(TransformTag(s, m) for s in (1, 2, 3) for m in (False, True))


@dataclass(frozen=True)
class TrajectoryRecord:
    x: float
    y: float
    t: float
    values: dict


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    """All trajectories of one video, stored column-wise.

    ``coords`` is an (n, 3) float32 array of normalized (x, y, t) and
    ``values`` maps channel name to an (n, raw_dim) float32 array.
    """

    video_id: str
    labels: frozenset
    channels: tuple
    coords: np.ndarray
    values: dict = field(repr=False)

    def __post_init__(self):
        channels = tuple(self.channels)
        names = [c.name for c in channels]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate channel names in {names}")
        coords = np.asarray(self.coords, dtype=np.float32).reshape(-1, 3)
        n = coords.shape[0]
        if set(self.values) != set(names):
            raise DataError(f"values keys {sorted(self.values)} do not match channels {names}")
        values = {}
        for c in channels:
            v = np.asarray(self.values[c.name], dtype=np.float32)
            if v.ndim == 1 and n == 0:
                v = v.reshape(0, c.raw_dim)
            if v.shape != (n, c.raw_dim):
                raise DataError(
                    f"channel {c.name}: expected shape {(n, c.raw_dim)}, got {v.shape}"
                )
            if not np.all(np.isfinite(v)):
                raise DataError(f"channel {c.name}: non-finite descriptor values")
            v = v.copy()
            v.setflags(write=False)
            values[c.name] = v
        if not np.all(np.isfinite(coords)) or np.any(coords < 0) or np.any(coords > 1):
            raise DataError("trajectory coordinates must lie in [0, 1]")
        coords = coords.copy()
        coords.setflags(write=False)
        labels = frozenset(int(lbl) for lbl in self.labels)
        if any(lbl < 0 for lbl in labels):
            raise DataError("class indices must be non-negative")
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", labels)

    @property
    def n_records(self) -> int:
        return self.coords.shape[0]

    @property
    def channel_names(self) -> tuple:
        return tuple(c.name for c in self.channels)

    @property
    def records(self) -> Iterator[TrajectoryRecord]:
        for i in range(self.n_records):
            x, y, t = (float(v) for v in self.coords[i])
            yield TrajectoryRecord(x, y, t, {k: v[i] for k, v in self.values.items()})

    def channel(self, name: str) -> np.ndarray:
        try:
            return self.values[name]
        except KeyError:
            raise DataError(f"unknown channel {name!r}") from None

    def same_as(self, other: "DescriptorSet") -> bool:
        """Bit-exact equality of ids, labels, channel specs and payload."""
        return (
            self.video_id == other.video_id
            and self.labels == other.labels
            and self.channels == other.channels
            and self.coords.tobytes() == other.coords.tobytes()
            and all(self.values[k].tobytes() == other.values[k].tobytes() for k in self.values)
        )


def normalize_coordinates(xyt, width: float, height: float, n_frames: float) -> np.ndarray:
    """Map raw pixel/frame coordinates to [0, 1] by the video extent."""
    xyt = np.asarray(xyt, dtype=np.float64).reshape(-1, 3)
    scale = np.array([width, height, n_frames], dtype=np.float64)
    if np.any(scale <= 0):
        raise DataError("video width, height and frame count must be positive")
    return np.clip(xyt / scale, 0.0, 1.0).astype(np.float32)


# -- binary I/O ---------------------------------------------------------------


def write_descriptors(dset: DescriptorSet, path) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(dset.channels))]
    for c in dset.channels:
        name = c.name.encode("utf-8")
        parts.append(struct.pack("<B", len(name)) + name + struct.pack("<I", c.raw_dim))
    labels = sorted(dset.labels)
    parts.append(struct.pack(f"<I{len(labels)}I", len(labels), *labels))
    parts.append(struct.pack("<Q", dset.n_records))
    body = np.concatenate(
        [dset.coords] + [dset.values[c.name] for c in dset.channels], axis=1
    )
    parts.append(body.astype("<f4", copy=False).tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise DescriptorFormatError(f"truncated header while reading {what}", self.pos)
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def raw(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise DescriptorFormatError(f"truncated header while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def read_descriptors(path, video_id: str | None = None) -> DescriptorSet:
    path = Path(path)
    rd = _Reader(path.read_bytes())
    if rd.raw(4, "magic") != MAGIC:
        raise DescriptorFormatError("bad magic, expected FVD1", 0)
    (version,) = rd.take("<I", "version")
    if version != VERSION:
        raise DescriptorFormatError(f"unsupported version {version}", 4)
    (n_channels,) = rd.take("<I", "channel count")
    if n_channels == 0:
        raise DescriptorFormatError("channel count must be positive", 8)
    channels = []
    for _ in range(n_channels):
        start = rd.pos
        (name_len,) = rd.take("<B", "channel name length")
        try:
            name = rd.raw(name_len, "channel name").decode("utf-8")
        except UnicodeDecodeError:
            raise DescriptorFormatError("channel name is not valid utf-8", start + 1) from None
        (raw_dim,) = rd.take("<I", "channel dimension")
        if name_len == 0 or raw_dim == 0:
            raise DescriptorFormatError("empty channel name or zero dimension", start)
        if any(c.name == name for c in channels):
            raise DescriptorFormatError(f"duplicate channel {name!r}", start)
        channels.append(ChannelSpec(name, raw_dim))
    (n_labels,) = rd.take("<I", "label count")
    labels = rd.take(f"<{n_labels}I", "labels") if n_labels else ()
    (n_records,) = rd.take("<Q", "record count")

    dims = [c.raw_dim for c in channels]
    row_floats = 3 + sum(dims)
    body_start = rd.pos
    expected = n_records * row_floats * 4
    available = len(rd.buf) - body_start
    if available < expected:
        complete = available // (row_floats * 4)
        raise DescriptorFormatError(
            f"truncated payload: header declares {n_records} records, "
            f"file holds {complete} complete records",
            body_start + complete * row_floats * 4,
        )
    if available > expected:
        raise DescriptorFormatError("trailing bytes after last record", body_start + expected)
    body = np.frombuffer(rd.buf, dtype="<f4", count=n_records * row_floats, offset=body_start)
    bad = np.flatnonzero(~np.isfinite(body))
    if bad.size:
        raise DescriptorFormatError("non-finite descriptor value", body_start + 4 * int(bad[0]))
    body = body.reshape(n_records, row_floats).astype(np.float32)
    coords = body[:, :3]
    out_of_range = np.flatnonzero(((coords < 0) | (coords > 1)).ravel())
    if out_of_range.size:
        i = int(out_of_range[0])
        raise DescriptorFormatError(
            "coordinate outside [0, 1]", body_start + 4 * ((i // 3) * row_floats + i % 3)
        )
    values = {}
    col = 3
    for c in channels:
        values[c.name] = body[:, col:col + c.raw_dim]
        col += c.raw_dim
    return DescriptorSet(
        video_id=video_id if video_id is not None else path.stem,
        labels=frozenset(labels),
        channels=tuple(channels),
        coords=coords,
        values=values,
    )


# -- per-row transforms ---------------------------------------------------------


def rootsift(v) -> np.ndarray:
    """Signed RootSIFT: l1-normalize each row then take the signed square root.

    Works on a single row or on a matrix of rows; all-zero rows are returned
    unchanged.
    """
    v = np.asarray(v, dtype=np.float64)
    mass = np.abs(v).sum(axis=-1, keepdims=True)
    mass = np.where(mass > 0, mass, 1.0)
    return np.sign(v) * np.sqrt(np.abs(v) / mass)


def augment_sta(rows, coords) -> np.ndarray:
    """Append (x, y, t) to PCA-reduced descriptor rows."""
    rows = np.asarray(rows, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    if rows.ndim == 1:
        return np.concatenate([rows, coords.reshape(3)])
    if coords.shape != (rows.shape[0], 3):
        raise DataError(f"coords shape {coords.shape} does not match {rows.shape[0]} rows")
    return np.hstack([rows, coords])


def dafs_stack(variants: Sequence) -> DescriptorSet:
    """Stack the trajectories of several transformed versions of one video.

    ``variants`` is a sequence of ``(TransformTag, DescriptorSet)`` pairs.
    """
    if not variants:
        raise DataError("dafs_stack needs at least one variant")
    first = variants[0][1]
    if len(variants) == 1:
        return first
    for tag, dset in variants[1:]:
        if dset.channels != first.channels:
            raise DataError(f"variant {tag}: channel specs differ from the first variant")
        if dset.video_id != first.video_id:
            raise DataError(f"variant {tag}: video id {dset.video_id!r} != {first.video_id!r}")
        if dset.labels != first.labels:
            raise DataError(f"variant {tag}: labels differ from the first variant")
    sets = [d for _, d in variants]
    return DescriptorSet(
        video_id=first.video_id,
        labels=first.labels,
        channels=first.channels,
        coords=np.concatenate([d.coords for d in sets]),
        values={c.name: np.concatenate([d.values[c.name] for d in sets]) for c in first.channels},
    )


def apply_transform(dset: DescriptorSet, tag: TransformTag, mirror_dims: int = 2) -> DescriptorSet:
    """Simulate a transformed re-extraction of already-extracted descriptors.

    Frame skipping keeps every ``skip_level``-th trajectory. Mirroring maps
    x to 1 - x and flips the sign of the first ``mirror_dims`` entries of
    every channel (the horizontally-oriented part of a descriptor).
    """
    if tag.is_identity:
        return dset
    keep = np.arange(0, dset.n_records, tag.skip_level)
    coords = dset.coords[keep].copy()
    values = {k: v[keep].copy() for k, v in dset.values.items()}
    if tag.mirrored:
        coords[:, 0] = 1.0 - coords[:, 0]
        for v in values.values():
            v[:, :mirror_dims] *= -1.0
    return DescriptorSet(dset.video_id, dset.labels, dset.channels, coords, values)


def make_variants(dset: DescriptorSet, tags=DEFAULT_VARIANTS, mirror_dims: int = 2) -> list:
    return [(tag, apply_transform(dset, tag, mirror_dims)) for tag in tags]


# -- synthetic data ---------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Description of a synthetic descriptor dataset.

    Every channel draws records around ``n_codewords`` shared prototypes.
    In the ``clusters`` layout each class shifts every prototype along its
    own random direction by ``separation``. In the ``xor`` layout (two
    classes) two binary latent factors shift channel 0 and channel 1
    respectively, and the class is their exclusive or, so no linear function
    of the concatenated per-channel representation separates the classes.

    The geometry (prototypes, directions) depends only on
    ``geometry_seed``; the ``seed`` passed to :func:`synth_generate` only
    controls sampling, so two seeds give two datasets of the same task.
    """

    n_classes: int = 2
    videos_per_class: int = 10
    records_per_video: int = 100
    channels: tuple = (ChannelSpec("A", 8), ChannelSpec("B", 8))
    separation: float = 1.0
    layout: str = "clusters"
    n_codewords: int = 4
    codeword_spread: float = 3.0
    noise: float = 1.0
    video_jitter: float = 0.3
    mirror_dims: int = 2
    geometry_seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 1 or self.videos_per_class < 1 or self.records_per_video < 1:
            raise DataError("class, video and record counts must be positive")
        if self.n_codewords < 1 or not self.channels:
            raise DataError("need at least one codeword and one channel")
        if min(self.noise, self.codeword_spread) <= 0 or self.video_jitter < 0:
            raise DataError("noise and spread must be positive, jitter non-negative")
        if self.separation < 0:
            raise DataError("separation must be non-negative")
        if self.layout not in ("clusters", "xor"):
            raise DataError(f"unknown layout {self.layout!r}")
        if self.layout == "xor" and (self.n_classes != 2 or len(self.channels) < 2):
            raise DataError("xor layout needs exactly 2 classes and at least 2 channels")


def _unit_rows(rng, shape) -> np.ndarray:
    u = rng.standard_normal(shape)
    return u / np.linalg.norm(u, axis=-1, keepdims=True)


def synth_generate(spec: SynthSpec, seed: int) -> list:
    spec.validate()
    geo = np.random.default_rng(spec.geometry_seed)
    M = spec.n_codewords
    codewords, directions = {}, {}
    for c in spec.channels:
        codewords[c.name] = geo.standard_normal((M, c.raw_dim)) * spec.codeword_spread
        directions[c.name] = _unit_rows(geo, (spec.n_classes, M, c.raw_dim))

    rng = np.random.default_rng(seed)
    out = []
    for y in range(spec.n_classes):
        for v in range(spec.videos_per_class):
            n = spec.records_per_video
            if spec.layout == "xor":
                a = v % 2
                b = a ^ y
                shift_sign = {spec.channels[0].name: 2 * a - 1, spec.channels[1].name: 2 * b - 1}
            values = {}
            for ci, c in enumerate(spec.channels):
                word = rng.integers(M, size=n)
                rows = codewords[c.name][word]
                if spec.layout == "clusters":
                    rows = rows + spec.separation * directions[c.name][y][word]
                elif c.name in shift_sign:
                    # factor directions reuse the class-0 direction table
                    rows = rows + spec.separation * shift_sign[c.name] * directions[c.name][0][word]
                rows = rows + spec.video_jitter * rng.standard_normal(c.raw_dim)
                rows = rows + spec.noise * rng.standard_normal((n, c.raw_dim))
                values[c.name] = rows
            coords = rng.random((n, 3))
            out.append(
                DescriptorSet(
                    video_id=f"s{seed}_c{y}_v{v:04d}",
                    labels=frozenset({y}),
                    channels=tuple(spec.channels),
                    coords=coords,
                    values=values,
                )
            )
    return out
