"""End-to-end orchestration: unsupervised fitting, encoding, training, bagging,
transfer across datasets, evaluation and architecture sweeps."""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Sequence

import numpy as np

from .classify import EvalReport, evaluate, label_matrix, scores_of, svm_train
from .config import PipelineConfig
from .container import Ensemble, ModelContainer
from .descriptor_io import DescriptorSet, augment_sta, dafs_stack, make_variants, rootsift
from .errors import ConfigError, DataError, FvStackError
from .fv import VideoRepresentation, finalize_video, fv_pool
from .gmm import gmm_fit, sample_training_pool
from .net import MlpModel, TrainConfig, build_mlp, replace_output_layer, train
from .reduction import pca_fit, project, reduction_layer_weights

log = logging.getLogger(__name__)

TRANSFERABLE = frozenset({"gmm", "reduction", "supervised"})


def _stage(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except FvStackError as exc:
        raise type(exc)(f"[{stage}] {exc}") from exc


def _channel_seed(base: int, index: int) -> int:
    return base + 1009 * index


# -- unsupervised layers -------------------------------------------------------------


def fit_unsupervised(sets: Sequence[DescriptorSet], cfg: PipelineConfig) -> ModelContainer:
    """RootSIFT -> descriptor PCA -> STA -> GMM, one per channel."""
    if not sets:
        raise DataError("no training videos")
    container = ModelContainer(cfg)
    for ci, ch in enumerate(cfg.channels):
        seed = _channel_seed(cfg.gmm.seed, ci)
        rows, coords = _stage(
            f"sample:{ch.name}", sample_training_pool, sets, ch.name, cfg.gmm.sample_size, seed,
            with_coords=True,
        )
        if rows.shape[1] != ch.raw_dim:
            raise DataError(f"[sample:{ch.name}] data has dim {rows.shape[1]}, config {ch.raw_dim}")
        rows = rootsift(rows)
        pca = _stage(f"descriptor-pca:{ch.name}", pca_fit, rows, cfg.pca_dim(ch.name),
                     whiten=False, method="covariance")
        augmented = augment_sta(project(pca, rows), coords)
        gmm = _stage(f"gmm:{ch.name}", gmm_fit, augmented, replace(cfg.gmm, seed=seed))
        container.descriptor_pca[ch.name] = pca
        container.gmms[ch.name] = gmm
        log.info("fitted %s: PCA %d->%d, GMM K=%d dim=%d", ch.name, ch.raw_dim, pca.r, gmm.K, gmm.dim)
    return container


def pooled_channel_fvs(container: ModelContainer, dset: DescriptorSet) -> list:
    """Raw (un-normalized) sum-pooled Fisher vector of every channel."""
    names = container.config.channel_names
    if dset.channel_names != names:
        raise DataError(
            f"video {dset.video_id}: channels {dset.channel_names} do not match the model's {names}"
        )
    out = []
    for ch in container.config.channels:
        if dset.channel(ch.name).shape[1] != ch.raw_dim:
            raise DataError(f"video {dset.video_id}: channel {ch.name} has the wrong dimension")
        rows = project(container.descriptor_pca[ch.name], rootsift(dset.channel(ch.name)))
        rows = augment_sta(rows, dset.coords)
        out.append(fv_pool(container.gmms[ch.name], rows, ch.name))
    return out


def _variants_of(item, cfg: PipelineConfig, dafs: bool):
    if isinstance(item, DescriptorSet):
        if not dafs:
            return [(None, item)]
        # only the identity extraction is available: simulate the other transforms
        return make_variants(item, cfg.dafs_variants, cfg.mirror_dims)
    variants = list(item)
    if not dafs:
        variants = [(t, d) for t, d in variants if t is None or t.is_identity]
        if len(variants) != 1:
            raise DataError("without DAFS exactly one identity variant is needed per video")
    return variants


def encode_video(container: ModelContainer, item, dafs: bool | None = None) -> VideoRepresentation:
    """Encode one video given as a :class:`DescriptorSet` or as a list of
    ``(TransformTag, DescriptorSet)`` variants."""
    if not container.has_unsupervised:
        raise DataError("container has no unsupervised stage; run fit-unsup first")
    cfg = container.config
    dafs = cfg.dafs if dafs is None else dafs
    stacked = dafs_stack(_variants_of(item, cfg, dafs))
    fvs = pooled_channel_fvs(container, stacked)
    rep = finalize_video(fvs, cfg.channel_names, stacked.video_id, stacked.labels)
    # representations are cached as float32; keep fresh ones identical to cached ones
    return VideoRepresentation(rep.video_id, rep.labels, rep.vector.astype(np.float32))


def encode(container: ModelContainer, videos, dafs: bool | None = None, threads: int = 1) -> list:
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda v: encode_video(container, v, dafs), videos))
    return [encode_video(container, v, dafs) for v in videos]


# -- supervised layers -----------------------------------------------------------------


def stack_reps(reps: Sequence[VideoRepresentation]):
    if not reps:
        raise DataError("no cached representations")
    dims = {r.vector.size for r in reps}
    if len(dims) != 1:
        raise DataError(f"representations have mixed dimensions {sorted(dims)}")
    X = np.stack([np.asarray(r.vector, dtype=np.float64) for r in reps])
    return X, [r.labels for r in reps]


def _targets(labels, n_classes: int, task: str):
    if task == "multiclass":
        if any(len(l) != 1 for l in labels):
            raise DataError("multiclass training needs exactly one label per video")
        return np.array([next(iter(l)) for l in labels])
    return label_matrix(labels, n_classes)


def _n_classes(labels, n_classes: int | None) -> int:
    if n_classes is not None:
        return n_classes
    seen = [k for l in labels for k in l]
    if not seen:
        raise DataError("training videos carry no labels")
    return max(seen) + 1


def _train_config(cfg: PipelineConfig, seed: int | None = None) -> TrainConfig:
    n = cfg.net
    return TrainConfig(
        batch_size=n.batch_size, epochs=n.epochs, seed=n.seed if seed is None else seed,
        lr=n.lr, adam=n.adam,
    )


def fit_reduction(cfg: PipelineConfig, X):
    return _stage("reduction-pca", pca_fit, X, cfg.reduction_r, whiten=True)


def build_head(cfg: PipelineConfig, in_dim: int, n_classes: int, reduction=None,
               seed: int | None = None, net=None) -> MlpModel:
    """Network for the configured reduction mode; ``depth`` counts the layers
    before the output, the first being the reduction layer."""
    net = net or cfg.net
    seed = net.seed if seed is None else seed
    if cfg.reduction_mode == "unsupervised_pca":
        if reduction is None:
            raise DataError("unsupervised_pca mode needs a fitted reduction model")
        hidden = (net.width,) * (net.depth - 1)
        first = reduction_layer_weights(reduction)
    else:
        width = min(net.width, cfg.max_supervised_width)
        hidden = (width,) * net.depth
        first = None
    return build_mlp(
        in_dim, n_classes, hidden=hidden, task=net.task, bn=net.bn, dropout_p=net.dropout,
        seed=seed, first_layer=first, bn_momentum=net.bn_momentum,
    )


def train_classifier(container: ModelContainer, reps, cfg: PipelineConfig | None = None,
                     n_classes: int | None = None) -> ModelContainer:
    """Fit the classifier on cached representations; returns a new container."""
    cfg = cfg or container.config
    X, labels = stack_reps(reps)
    rep_dim = container.representation_dim()
    if rep_dim is not None and X.shape[1] != rep_dim:
        raise DataError(f"representations have dim {X.shape[1]}, model produces {rep_dim}")
    c = _n_classes(labels, n_classes)
    out = ModelContainer(cfg, dict(container.descriptor_pca), dict(container.gmms), n_classes=c)
    if cfg.classifier == "svm":
        out.classifier = _stage("svm", svm_train, X, labels, cfg.svm_C, n_classes=c)
        return out
    y = _targets(labels, c, cfg.net.task)
    if cfg.reduction_mode == "unsupervised_pca":
        out.reduction = fit_reduction(cfg, X)
    model = build_head(cfg, X.shape[1], c, out.reduction)
    out.classifier, out.trace = _stage("train", train, model, X, y, _train_config(cfg))
    return out


def bag(container: ModelContainer, reps, cfg: PipelineConfig | None = None,
        count: int | None = None, n_classes: int | None = None) -> ModelContainer:
    """Train ``count`` networks from seeds ``seed, seed+1, ...`` on the same
    cached inputs and average their scores."""
    cfg = cfg or container.config
    count = cfg.bag_count if count is None else count
    if count < 1:
        raise ConfigError("bagging count must be >= 1")
    if cfg.classifier != "net":
        raise ConfigError("bagging needs the net classifier")
    X, labels = stack_reps(reps)
    c = _n_classes(labels, n_classes)
    y = _targets(labels, c, cfg.net.task)
    out = ModelContainer(cfg, dict(container.descriptor_pca), dict(container.gmms), n_classes=c)
    if cfg.reduction_mode == "unsupervised_pca":
        out.reduction = fit_reduction(cfg, X)
    members = []
    for i in range(count):
        seed = cfg.net.seed + i
        model = build_head(cfg, X.shape[1], c, out.reduction, seed=seed)
        trained, trace = _stage(f"bag-member-{i}", train, model, X, y, _train_config(cfg, seed))
        members.append(trained)
        if i == 0:
            out.trace = trace
    out.classifier = Ensemble(members)
    return out


def transfer(source: ModelContainer, target_videos, what=(), cfg: PipelineConfig | None = None,
             n_classes: int | None = None, threads: int = 1):
    """Build a model for a target dataset, copying the stages named in
    ``what`` (subset of ``{"gmm", "reduction", "supervised"}``) from
    ``source``. Transferred supervised layers get a new output layer and are
    fine-tuned at a tenth of the learning rate.

    Returns ``(container, target_reps)``.
    """
    what = frozenset(what)
    if not what <= TRANSFERABLE:
        raise ConfigError(f"unknown stages {sorted(what - TRANSFERABLE)}")
    cfg = cfg or source.config
    if "gmm" in what:
        if not source.has_unsupervised:
            raise DataError("source container has no GMMs to transfer")
        if source.config.channels != cfg.channels:
            raise DataError("source and target channel specs differ")
        base = ModelContainer(
            replace(cfg, gmm=source.config.gmm, pca_factor=source.config.pca_factor,
                    pca_dims=source.config.pca_dims),
            dict(source.descriptor_pca), dict(source.gmms),
        )
    else:
        base = fit_unsupervised(_identity_sets(target_videos), cfg)
    reps = encode(base, target_videos, threads=threads)
    if not what & {"reduction", "supervised"}:
        return train_classifier(base, reps, base.config, n_classes), reps

    if base.config.classifier != "net":
        raise ConfigError("transferring supervised stages needs the net classifier")
    X, labels = stack_reps(reps)
    c = _n_classes(labels, n_classes)
    y = _targets(labels, c, base.config.net.task)
    out = ModelContainer(base.config, base.descriptor_pca, base.gmms, n_classes=c)
    src_model = source.classifier
    if isinstance(src_model, Ensemble):
        src_model = src_model.members[0]
    if "supervised" in what:
        if not isinstance(src_model, MlpModel):
            raise DataError("source container has no trained network")
        if base.config.reduction_mode == "unsupervised_pca" and "reduction" not in what:
            raise ConfigError("supervised layers after a PCA layer transfer only with the reduction layer")
        if src_model.in_dim != X.shape[1]:
            raise DataError(f"source network expects {src_model.in_dim} inputs, target has {X.shape[1]}")
        out.reduction = source.reduction
        model, ft_cfg = replace_output_layer(
            src_model, c, base.config.net.seed, _train_config(base.config)
        )
        out.classifier, out.trace = _stage("fine-tune", train, model, X, y, ft_cfg)
        return out, reps
    # reduction only
    if source.reduction is None:
        raise DataError("source container has no reduction layer")
    if source.reduction.d != X.shape[1]:
        raise DataError(f"source reduction expects {source.reduction.d} inputs, target has {X.shape[1]}")
    out.reduction = source.reduction
    model = build_head(base.config, X.shape[1], c, out.reduction)
    out.classifier, out.trace = _stage("train", train, model, X, y, _train_config(base.config))
    return out, reps


def _identity_sets(videos) -> list:
    out = []
    for item in videos:
        if isinstance(item, DescriptorSet):
            out.append(item)
        else:
            ident = [d for t, d in item if t is None or t.is_identity]
            out.append(ident[0] if ident else item[0][1])
    return out


# -- evaluation ------------------------------------------------------------------------------


def eval_model(container: ModelContainer, reps, protocol: str = "mAcc",
               negative_class: int = 0, plot=None) -> EvalReport:
    if container.classifier is None:
        raise DataError("container has no classifier; run train first")
    X, labels = stack_reps(reps)
    report = evaluate(container.classifier, X, labels, protocol,
                      n_classes=container.n_classes, negative_class=negative_class)
    if plot is not None:
        plot_pr_curves(scores_of(container.classifier, X),
                       label_matrix(labels, container.n_classes), list(report.per_class_ap), plot)
    return report


def accuracy(container_or_model, reps) -> float:
    model = getattr(container_or_model, "classifier", container_or_model)
    X, labels = stack_reps(reps)
    truth = np.array([next(iter(l)) for l in labels])
    return float(np.mean(scores_of(model, X).argmax(axis=1) == truth))


def plot_pr_curves(scores, Y, classes, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for k in classes:
        order = np.argsort(-scores[:, k], kind="stable")
        rel = Y[order, k] > 0
        hits = np.cumsum(rel)
        precision = hits / np.arange(1, rel.size + 1)
        recall = hits / max(rel.sum(), 1)
        ax.plot(recall, precision, label=f"class {k}")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def sweep(container: ModelContainer, train_reps, val_reps, cfg: PipelineConfig | None = None,
          seeds=(0,), grid: dict | None = None) -> list:
    """Train one network per (batch, width, depth, dropout, seed) and return
    rows of ``(batch, width, depth, dropout, seed, val_accuracy)``."""
    cfg = cfg or container.config
    grid = grid or cfg.sweep
    X, labels = stack_reps(train_reps)
    c = _n_classes(labels, None)
    y = _targets(labels, c, cfg.net.task)
    reduction = fit_reduction(cfg, X) if cfg.reduction_mode == "unsupervised_pca" else None
    Xv, vlabels = stack_reps(val_reps)
    rows = []
    for bs, width, depth, p, seed in itertools.product(
        grid["batch_sizes"], grid["widths"], grid["depths"], grid["dropouts"], seeds
    ):
        net = replace(cfg.net, batch_size=bs, width=width, depth=depth, dropout=p, seed=seed)
        model = build_head(cfg, X.shape[1], c, reduction, net=net)
        tcfg = TrainConfig(batch_size=bs, epochs=net.epochs, seed=seed, lr=net.lr, adam=net.adam)
        trained, _ = train(model, X, y, tcfg)
        report = evaluate(trained, Xv, vlabels,
                          "mAcc" if cfg.net.task == "multiclass" else "mAP", n_classes=c)
        score = report.mean_accuracy if report.mean_accuracy is not None else report.mAP
        rows.append((bs, width, depth, p, seed, score))
        log.info("sweep batch=%d width=%d depth=%d dropout=%.1f seed=%d -> %.4f", *rows[-1])
    return rows
