"""Pipeline configuration: an INI-style key/value file with sections.

Example::

    [channels]
    Traj = 30
    HOG = 96

    [gmm]
    K = 256
    em_iters = 10
    sample_size = 256000

    [net]
    depth = 2
    width = 4096
    batch_size = 128

Every key is optional; missing keys take the defaults below.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

from .descriptor_io import DEFAULT_VARIANTS, IDT_CHANNELS, ChannelSpec, TransformTag
from .errors import ConfigError, FvStackError
from .gmm import FitConfig

REDUCTION_MODES = ("unsupervised_pca", "supervised_midtoend")
CLASSIFIERS = ("net", "svm")

DEFAULT_SWEEP = {
    "batch_sizes": (128, 256, 512),
    "widths": (512, 1024, 2048, 4096),
    "depths": (1, 2, 3, 4),
    "dropouts": tuple(round(0.1 * i, 1) for i in range(10)),
}


@dataclass(frozen=True)
class NetConfig:
    depth: int = 2
    width: int = 4096
    dropout: float = 0.0
    batch_size: int = 128
    epochs: int = 50
    task: str = "multiclass"
    lr: float = 1e-3
    adam: str = "scaled_eps"
    bn: bool = True
    bn_momentum: float = 0.99
    seed: int = 0


@dataclass(frozen=True)
class PipelineConfig:
    channels: tuple = IDT_CHANNELS
    dafs: bool = True
    dafs_variants: tuple = DEFAULT_VARIANTS
    mirror_dims: int = 2
    gmm: FitConfig = FitConfig()
    pca_factor: int = 2
    pca_dims: dict = field(default_factory=dict)  # per-channel override of raw_dim // factor
    reduction_mode: str = "unsupervised_pca"
    reduction_r: int | float = 0.99
    max_supervised_width: int = 1024
    classifier: str = "net"
    svm_C: float = 100.0
    net: NetConfig = NetConfig()
    bag_count: int = 8
    sweep: dict = field(default_factory=lambda: dict(DEFAULT_SWEEP))

    def __post_init__(self):
        names = [c.name for c in self.channels]
        if not names or len(set(names)) != len(names):
            raise ConfigError("channel names must be non-empty and unique")
        unknown = set(self.pca_dims) - set(names)
        if unknown:
            raise ConfigError(f"pca dims given for unknown channels {sorted(unknown)}")
        if self.pca_factor < 1:
            raise ConfigError("pca factor must be >= 1")
        for c in self.channels:
            if not 1 <= self.pca_dim(c.name) <= c.raw_dim:
                raise ConfigError(f"PCA dimension of {c.name} must lie in [1, {c.raw_dim}]")
        if self.reduction_mode not in REDUCTION_MODES:
            raise ConfigError(f"reduction mode must be one of {REDUCTION_MODES}")
        if self.classifier not in CLASSIFIERS:
            raise ConfigError(f"classifier must be one of {CLASSIFIERS}")
        if self.net.depth < 1 or self.net.width < 1 or self.net.batch_size < 1:
            raise ConfigError("net depth, width and batch size must be >= 1")
        if not 0 <= self.net.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.net.task not in ("multiclass", "multilabel"):
            raise ConfigError("task must be multiclass or multilabel")
        if self.bag_count < 1:
            raise ConfigError("bagging count must be >= 1")
        if isinstance(self.reduction_r, float) and not 0 < self.reduction_r <= 1:
            raise ConfigError("a fractional reduction r must lie in (0, 1]")

    @property
    def channel_names(self) -> tuple:
        return tuple(c.name for c in self.channels)

    def pca_dim(self, name: str) -> int:
        if name in self.pca_dims:
            return int(self.pca_dims[name])
        raw = next(c.raw_dim for c in self.channels if c.name == name)
        return max(1, raw // self.pca_factor)

    def gmm_dim(self, name: str) -> int:
        """Descriptor dimension seen by the GMM: PCA output plus (x, y, t)."""
        return self.pca_dim(name) + 3

    def fv_dims(self) -> dict:
        return {c.name: 2 * self.gmm.K * self.gmm_dim(c.name) for c in self.channels}

    def representation_dim(self) -> int:
        return sum(self.fv_dims().values())

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, gmm=replace(self.gmm, seed=seed), net=replace(self.net, seed=seed))


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.replace(" ", "").split(",") if x)


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(" ", "").split(",") if x)


def _number(text: str):
    text = text.strip()
    return float(text) if any(ch in text for ch in ".eE") else int(text)


def parse_config(text: str) -> PipelineConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # channel names are case-sensitive
    try:
        cp.read_string(text)
        kw = {}
        if cp.has_section("channels"):
            kw["channels"] = tuple(
                ChannelSpec(name, int(dim)) for name, dim in cp.items("channels")
            )
        if cp.has_section("dafs"):
            s = cp["dafs"]
            kw["dafs"] = s.getboolean("enabled", True)
            if "variants" in s:
                kw["dafs_variants"] = tuple(
                    TransformTag.parse(v) for v in s["variants"].split(",") if v.strip()
                )
            kw["mirror_dims"] = s.getint("mirror_dims", 2)
        if cp.has_section("gmm"):
            s = cp["gmm"]
            kw["gmm"] = FitConfig(
                K=s.getint("K", 256),
                em_iters=s.getint("em_iters", 10),
                sample_size=s.getint("sample_size", 256_000),
                seed=s.getint("seed", 0),
                variance_floor=s.getfloat("variance_floor", 1e-4),
            )
        if cp.has_section("descriptor_pca"):
            s = cp["descriptor_pca"]
            kw["pca_factor"] = s.getint("factor", 2)
            if "dims" in s:
                kw["pca_dims"] = {
                    k.strip(): int(v)
                    for k, v in (item.split(":") for item in s["dims"].split(",") if item.strip())
                }
        if cp.has_section("reduction"):
            s = cp["reduction"]
            kw["reduction_mode"] = s.get("mode", "unsupervised_pca")
            kw["reduction_r"] = _number(s.get("r", "0.99"))
            kw["max_supervised_width"] = s.getint("max_supervised_width", 1024)
        if cp.has_section("classifier"):
            s = cp["classifier"]
            kw["classifier"] = s.get("kind", "net")
            kw["svm_C"] = s.getfloat("C", 100.0)
        if cp.has_section("net"):
            s = cp["net"]
            d = NetConfig()
            kw["net"] = NetConfig(
                depth=s.getint("depth", d.depth),
                width=s.getint("width", d.width),
                dropout=s.getfloat("dropout", d.dropout),
                batch_size=s.getint("batch_size", d.batch_size),
                epochs=s.getint("epochs", d.epochs),
                task=s.get("task", d.task),
                lr=s.getfloat("lr", d.lr),
                adam=s.get("adam", d.adam),
                bn=s.getboolean("bn", d.bn),
                bn_momentum=s.getfloat("bn_momentum", d.bn_momentum),
                seed=s.getint("seed", d.seed),
            )
        if cp.has_section("bagging"):
            kw["bag_count"] = cp["bagging"].getint("count", 8)
        if cp.has_section("sweep"):
            s = cp["sweep"]
            grid = dict(DEFAULT_SWEEP)
            for key in ("batch_sizes", "widths", "depths"):
                if key in s:
                    grid[key] = _ints(s[key])
            if "dropouts" in s:
                grid["dropouts"] = _floats(s["dropouts"])
            kw["sweep"] = grid
        return PipelineConfig(**kw)
    except ConfigError:
        raise
    except (configparser.Error, ValueError, KeyError, StopIteration, FvStackError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def config_to_text(cfg: PipelineConfig) -> str:
    """Render ``cfg`` so that ``parse_config(config_to_text(cfg)) == cfg``."""
    lines = ["[channels]"]
    lines += [f"{c.name} = {c.raw_dim}" for c in cfg.channels]
    lines += [
        "",
        "[dafs]",
        f"enabled = {str(cfg.dafs).lower()}",
        f"variants = {', '.join(str(t) for t in cfg.dafs_variants)}",
        f"mirror_dims = {cfg.mirror_dims}",
        "",
        "[gmm]",
        f"K = {cfg.gmm.K}",
        f"em_iters = {cfg.gmm.em_iters}",
        f"sample_size = {cfg.gmm.sample_size}",
        f"seed = {cfg.gmm.seed}",
        f"variance_floor = {cfg.gmm.variance_floor!r}",
        "",
        "[descriptor_pca]",
        f"factor = {cfg.pca_factor}",
    ]
    if cfg.pca_dims:
        lines.append("dims = " + ", ".join(f"{k}:{v}" for k, v in cfg.pca_dims.items()))
    r = cfg.reduction_r
    lines += [
        "",
        "[reduction]",
        f"mode = {cfg.reduction_mode}",
        f"r = {r!r}" if isinstance(r, float) else f"r = {r}",
        f"max_supervised_width = {cfg.max_supervised_width}",
        "",
        "[classifier]",
        f"kind = {cfg.classifier}",
        f"C = {cfg.svm_C!r}",
        "",
        "[net]",
    ]
    n = cfg.net
    lines += [
        f"depth = {n.depth}",
        f"width = {n.width}",
        f"dropout = {n.dropout!r}",
        f"batch_size = {n.batch_size}",
        f"epochs = {n.epochs}",
        f"task = {n.task}",
        f"lr = {n.lr!r}",
        f"adam = {n.adam}",
        f"bn = {str(n.bn).lower()}",
        f"bn_momentum = {n.bn_momentum!r}",
        f"seed = {n.seed}",
        "",
        "[bagging]",
        f"count = {cfg.bag_count}",
        "",
        "[sweep]",
    ]
    g = cfg.sweep
    lines += [
        "batch_sizes = " + ", ".join(str(v) for v in g["batch_sizes"]),
        "widths = " + ", ".join(str(v) for v in g["widths"]),
        "depths = " + ", ".join(str(v) for v in g["depths"]),
        "dropouts = " + ", ".join(repr(float(v)) for v in g["dropouts"]),
    ]
    return "\n".join(lines) + "\n"
