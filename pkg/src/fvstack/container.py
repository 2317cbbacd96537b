"""Single-file model container (``.fvc``).

Layout, little-endian::

    b"FVC1" | u32 version | u32 section_count
    section_count x { 4-byte tag | u64 payload_len | payload | u32 crc32(payload) }

A payload is ``u32 meta_len | meta (utf-8 JSON) | u32 n_arrays`` followed by
``n_arrays`` x ``{ u8 ndim | ndim x u64 shape | f64 data (row-major) }``.
Stage dimensions are checked against each other when a container is loaded.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classify import LinearSvmModel
from .config import PipelineConfig, config_to_text, parse_config
from .errors import DataError, DescriptorFormatError
from .gmm import GmmModel
from .net import Layer, LayerSpec, MlpModel, predict
from .reduction import ReductionModel

MAGIC = b"FVC1"
VERSION = 1


class Ensemble:
    """Bagged networks; the score of the ensemble is the mean member score."""

    def __init__(self, members):
        if not members:
            raise DataError("an ensemble needs at least one member")
        self.members = list(members)

    @property
    def in_dim(self) -> int:
        return self.members[0].in_dim

    @property
    def n_outputs(self) -> int:
        return self.members[0].n_outputs

    def decision_function(self, X) -> np.ndarray:
        return np.mean([predict(m, X) for m in self.members], axis=0)


@dataclass(eq=False)
class ModelContainer:
    config: PipelineConfig
    descriptor_pca: dict = field(default_factory=dict)
    gmms: dict = field(default_factory=dict)
    reduction: ReductionModel | None = None
    classifier: object = None
    n_classes: int | None = None
    trace: list = field(default_factory=list)

    @property
    def has_unsupervised(self) -> bool:
        return bool(self.gmms)

    def validate(self) -> None:
        cfg = self.config
        if self.has_unsupervised:
            if set(self.gmms) != set(cfg.channel_names) or set(self.descriptor_pca) != set(
                cfg.channel_names
            ):
                raise DataError("container stages do not cover the configured channels")
            for c in cfg.channels:
                pca, gmm = self.descriptor_pca[c.name], self.gmms[c.name]
                if pca.d != c.raw_dim:
                    raise DataError(f"{c.name}: descriptor PCA input {pca.d} != raw dim {c.raw_dim}")
                if gmm.dim != pca.r + 3:
                    raise DataError(f"{c.name}: GMM dim {gmm.dim} != PCA output {pca.r} + 3")
        rep_dim = self.representation_dim()
        if self.reduction is not None and rep_dim is not None and self.reduction.d != rep_dim:
            raise DataError(f"reduction input {self.reduction.d} != representation dim {rep_dim}")
        if self.classifier is not None:
            in_dim = (
                self.classifier.W.shape[1]
                if isinstance(self.classifier, LinearSvmModel)
                else self.classifier.in_dim
            )
            out = (
                self.classifier.n_classes
                if isinstance(self.classifier, LinearSvmModel)
                else self.classifier.n_outputs
            )
            if rep_dim is not None and in_dim != rep_dim:
                raise DataError(f"classifier input {in_dim} != representation dim {rep_dim}")
            if self.n_classes is not None and out != self.n_classes:
                raise DataError(f"classifier outputs {out} != class count {self.n_classes}")

    def representation_dim(self) -> int | None:
        if not self.has_unsupervised:
            return None
        return sum(2 * g.K * g.dim for g in self.gmms.values())


# -- low-level encoding -------------------------------------------------------------


def _pack_section(tag: bytes, meta: dict, arrays=()) -> bytes:
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [struct.pack("<I", len(meta_b)), meta_b, struct.pack("<I", len(arrays))]
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        parts.append(struct.pack(f"<B{a.ndim}Q", a.ndim, *a.shape))
        parts.append(a.tobytes())
    payload = b"".join(parts)
    return tag + struct.pack("<Q", len(payload)) + payload + struct.pack("<I", zlib.crc32(payload))


def _unpack_payload(payload: bytes, base: int):
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(payload):
            raise DescriptorFormatError("truncated section payload", base + pos)
        out = struct.unpack_from(fmt, payload, pos)
        pos += size
        return out

    (meta_len,) = take("<I")
    if pos + meta_len > len(payload):
        raise DescriptorFormatError("truncated section metadata", base + pos)
    meta = json.loads(payload[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (n_arrays,) = take("<I")
    arrays = []
    for _ in range(n_arrays):
        (ndim,) = take("<B")
        shape = take(f"<{ndim}Q")
        count = int(np.prod(shape)) if ndim else 1
        if pos + 8 * count > len(payload):
            raise DescriptorFormatError("truncated array data", base + pos)
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=pos).reshape(shape)
        arrays.append(arr.astype(np.float64))
        pos += 8 * count
    if pos != len(payload):
        raise DescriptorFormatError("unexpected bytes at end of section", base + pos)
    return meta, arrays


def _mlp_section(model: MlpModel, member: int) -> bytes:
    meta = {
        "member": member,
        "task": model.task,
        "bn_eps": model.bn_eps,
        "bn_momentum": model.bn_momentum,
        "layers": [
            {
                "in_dim": l.spec.in_dim,
                "out_dim": l.spec.out_dim,
                "has_bn": l.spec.has_bn,
                "nonlinearity": l.spec.nonlinearity,
                "trainable": l.spec.trainable,
                "dropout_p": l.spec.dropout_p,
                "l2_post": l.spec.l2_post,
            }
            for l in model.layers
        ],
    }
    arrays = []
    for l in model.layers:
        arrays += [l.W, l.b]
        if l.spec.has_bn:
            arrays += [l.gamma, l.beta, l.running_mean, l.running_var]
    return _pack_section(b"MLP_", meta, arrays)


def _mlp_from(meta, arrays) -> MlpModel:
    layers = []
    it = iter(arrays)
    for spec_d in meta["layers"]:
        spec = LayerSpec(**spec_d)
        layer = Layer(spec, next(it).copy(), next(it).copy())
        if spec.has_bn:
            layer.gamma, layer.beta = next(it).copy(), next(it).copy()
            layer.running_mean, layer.running_var = next(it).copy(), next(it).copy()
        layers.append(layer)
    return MlpModel(layers, meta["task"], meta["bn_eps"], meta["bn_momentum"])


def _pca_arrays(m: ReductionModel):
    return [m.mean, m.basis, m.eigvals]


def save_container(container: ModelContainer, path) -> None:
    container.validate()
    sections = [_pack_section(b"CONF", {"text": config_to_text(container.config)})]
    for name in container.config.channel_names:
        if name in container.descriptor_pca:
            pca = container.descriptor_pca[name]
            sections.append(
                _pack_section(b"DPCA", {"channel": name, "whiten": pca.whiten}, _pca_arrays(pca))
            )
        if name in container.gmms:
            g = container.gmms[name]
            sections.append(_pack_section(b"GMMS", {"channel": name}, [g.weights, g.means, g.stds]))
    if container.reduction is not None:
        r = container.reduction
        sections.append(_pack_section(b"REDU", {"whiten": r.whiten}, _pca_arrays(r)))
    clf = container.classifier
    head = {"n_classes": container.n_classes, "kind": None}
    if isinstance(clf, LinearSvmModel):
        head["kind"] = "svm"
        sections.append(_pack_section(b"SVM_", {"C": clf.C}, [clf.W, clf.b]))
    elif isinstance(clf, MlpModel):
        head["kind"] = "net"
        sections.append(_mlp_section(clf, 0))
    elif isinstance(clf, Ensemble):
        head["kind"] = "ensemble"
        sections += [_mlp_section(m, i) for i, m in enumerate(clf.members)]
    elif clf is not None:
        raise DataError(f"cannot store classifier of type {type(clf).__name__}")
    head["trace"] = [list(row) for row in container.trace]
    sections.append(_pack_section(b"HEAD", head))
    blob = MAGIC + struct.pack("<II", VERSION, len(sections)) + b"".join(sections)
    Path(path).write_bytes(blob)


def load_container(path) -> ModelContainer:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise DescriptorFormatError("bad magic, expected FVC1", 0)
    if len(buf) < 12:
        raise DescriptorFormatError("truncated container header", len(buf))
    version, n_sections = struct.unpack_from("<II", buf, 4)
    if version > VERSION:
        raise DescriptorFormatError(f"container version {version} is newer than {VERSION}", 4)
    pos = 12
    sections = []
    for _ in range(n_sections):
        if pos + 12 > len(buf):
            raise DescriptorFormatError("truncated section header", pos)
        tag = buf[pos:pos + 4]
        (length,) = struct.unpack_from("<Q", buf, pos + 4)
        start = pos + 12
        if start + length + 4 > len(buf):
            raise DescriptorFormatError(f"truncated section {tag!r}", pos)
        payload = buf[start:start + length]
        (crc,) = struct.unpack_from("<I", buf, start + length)
        if zlib.crc32(payload) != crc:
            raise DescriptorFormatError(f"checksum mismatch in section {tag!r}", pos)
        sections.append((tag, *_unpack_payload(payload, start)))
        pos = start + length + 4
    if pos != len(buf):
        raise DescriptorFormatError("trailing bytes after last section", pos)

    conf = [s for s in sections if s[0] == b"CONF"]
    if len(conf) != 1:
        raise DataError("container must hold exactly one configuration section")
    container = ModelContainer(parse_config(conf[0][1]["text"]))
    members = []
    head = {}
    for tag, meta, arrays in sections:
        if tag == b"DPCA":
            container.descriptor_pca[meta["channel"]] = ReductionModel(*arrays, meta["whiten"])
        elif tag == b"GMMS":
            container.gmms[meta["channel"]] = GmmModel(*arrays)
        elif tag == b"REDU":
            container.reduction = ReductionModel(*arrays, meta["whiten"])
        elif tag == b"SVM_":
            container.classifier = LinearSvmModel(arrays[0], arrays[1], meta["C"])
        elif tag == b"MLP_":
            members.append((meta["member"], _mlp_from(meta, arrays)))
        elif tag == b"HEAD":
            head = meta
    if members:
        members = [m for _, m in sorted(members, key=lambda p: p[0])]
        if head.get("kind") == "ensemble":
            container.classifier = Ensemble(members)
        else:
            container.classifier = members[0]
    container.n_classes = head.get("n_classes")
    container.trace = [tuple(row) for row in head.get("trace", [])]
    container.validate()
    return container
