"""Fully connected supervised head: batch norm, ReLU, dropout, softmax/sigmoid
outputs, cross-entropy losses, exact backpropagation and Adam."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, NumericError

NONLINEARITIES = ("relu", "softmax", "sigmoid", "none")
TASKS = {"multiclass": "softmax", "multilabel": "sigmoid"}
PROB_CLIP = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    has_bn: bool = False
    nonlinearity: str = "relu"
    trainable: bool = True
    dropout_p: float = 0.0
    l2_post: bool = False  # l2-normalize the layer output (frozen PCA layer)

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise DataError("layer dimensions must be positive")
        if self.nonlinearity not in NONLINEARITIES:
            raise DataError(f"unknown nonlinearity {self.nonlinearity!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise DataError("dropout_p must lie in [0, 1)")


@dataclass(eq=False)
class Layer:
    spec: LayerSpec
    W: np.ndarray
    b: np.ndarray
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    def param_names(self):
        return ("W", "b", "gamma", "beta") if self.spec.has_bn else ("W", "b")


@dataclass(eq=False)
class MlpModel:
    layers: list
    task: str = "multiclass"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.99

    def __post_init__(self):
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}")
        if not self.layers:
            raise DataError("a model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.spec.out_dim != nxt.spec.in_dim:
                raise DataError(
                    f"layer dims do not chain: {prev.spec.out_dim} -> {nxt.spec.in_dim}"
                )
        out = self.layers[-1].spec
        if out.has_bn or out.nonlinearity != TASKS[self.task] or out.dropout_p:
            raise DataError(
                f"output layer must be plain {TASKS[self.task]} without BN or dropout"
            )
        for layer in self.layers:
            if layer.W.shape != (layer.spec.out_dim, layer.spec.in_dim):
                raise DataError("weight shape does not match its layer spec")

    @property
    def in_dim(self) -> int:
        return self.layers[0].spec.in_dim

    @property
    def n_outputs(self) -> int:
        return self.layers[-1].spec.out_dim

    def params(self, trainable_only: bool = True) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            if trainable_only and not layer.spec.trainable:
                continue
            for name in layer.param_names():
                out[f"{i}.{name}"] = getattr(layer, name)
        return out

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def decision_function(self, X) -> np.ndarray:
        return predict(self, X)


def _init_layer(spec: LayerSpec, rng) -> Layer:
    bound = 1.0 / np.sqrt(spec.in_dim)
    layer = Layer(
        spec=spec,
        W=rng.uniform(-bound, bound, size=(spec.out_dim, spec.in_dim)),
        b=np.zeros(spec.out_dim),
    )
    if spec.has_bn:
        layer.gamma = np.ones(spec.out_dim)
        layer.beta = np.zeros(spec.out_dim)
        layer.running_mean = np.zeros(spec.out_dim)
        layer.running_var = np.ones(spec.out_dim)
    return layer


def build_mlp(
    in_dim: int,
    n_outputs: int,
    hidden=(),
    task: str = "multiclass",
    bn: bool = True,
    dropout_p: float = 0.0,
    seed: int = 0,
    first_layer=None,
    bn_momentum: float = 0.99,
) -> MlpModel:
    """Build ``[frozen first_layer] -> hidden FC layers -> output``.

    ``first_layer`` is an optional :class:`~fvstack.reduction.ReductionLayer`
    used as a fixed, l2-normalized projection in front of the trainable part.
    """
    if task not in TASKS:
        raise DataError(f"unknown task {task!r}")
    rng = np.random.default_rng(seed)
    layers = []
    dim = in_dim
    if first_layer is not None:
        r, d = first_layer.weight.shape
        if d != in_dim:
            raise DataError(f"reduction layer expects {d} inputs, got {in_dim}")
        spec = LayerSpec(d, r, nonlinearity="none", trainable=False, l2_post=True)
        # C order keeps BLAS results identical to a reloaded container
        layers.append(Layer(spec, np.array(first_layer.weight, dtype=np.float64, order="C"),
                            np.array(first_layer.offset, dtype=np.float64)))
        dim = r
    for width in hidden:
        spec = LayerSpec(dim, int(width), has_bn=bn, nonlinearity="relu", dropout_p=dropout_p)
        layers.append(_init_layer(spec, rng))
        dim = int(width)
    layers.append(_init_layer(LayerSpec(dim, n_outputs, nonlinearity=TASKS[task]), rng))
    return MlpModel(layers, task=task, bn_momentum=bn_momentum)


# -- forward / loss / backward -----------------------------------------------------------


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(kind: str, u: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(u, 0.0)
    if kind == "softmax":
        return softmax(u)
    if kind == "sigmoid":
        return sigmoid(u)
    return u


def _layer_forward(layer: Layer, h: np.ndarray, train: bool, rng, eps: float):
    spec = layer.spec
    cache = {"h_in": h}
    z = h @ layer.W.T + layer.b
    if spec.has_bn:
        if train:
            mu = z.mean(axis=0)
            var = z.var(axis=0)
            cache.update(batch_mean=mu, batch_var=var)
        else:
            mu, var = layer.running_mean, layer.running_var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (z - mu) * inv_std
        cache.update(xhat=xhat, inv_std=inv_std)
        u = layer.gamma * xhat + layer.beta
    else:
        u = z
    cache["u"] = u
    a = _activate(spec.nonlinearity, u)
    if spec.l2_post:
        norms = np.linalg.norm(a, axis=1, keepdims=True)
        norms = np.where(norms > 0, norms, 1.0)
        cache["pre_norm"] = norms
        a = a / norms
        cache["normed"] = a
    if train and spec.dropout_p > 0:
        keep = 1.0 - spec.dropout_p
        mask = (rng.random(a.shape) < keep) / keep
        cache["mask"] = mask
        a = a * mask
    return a, cache


def forward(model: MlpModel, batch, mode: str = "infer", rng=None, start: int = 0):
    """Run the network; returns ``(output, caches)``.

    ``mode`` is ``"train"`` (batch statistics, dropout) or ``"infer"``
    (running statistics, no dropout). ``start`` skips leading layers whose
    output has already been computed (``batch`` is then that output).
    """
    if mode not in ("train", "infer"):
        raise DataError(f"unknown mode {mode!r}")
    h = np.asarray(batch, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != model.layers[start].spec.in_dim:
        raise DataError(
            f"batch has {h.shape[-1]} columns, layer {start} expects "
            f"{model.layers[start].spec.in_dim}"
        )
    train = mode == "train"
    if train and h.shape[0] < 2 and any(l.spec.has_bn for l in model.layers[start:]):
        raise DataError("train-mode batch norm needs a batch of at least 2")
    if rng is None:
        rng = np.random.default_rng(0)
    caches = [None] * len(model.layers)
    for i in range(start, len(model.layers)):
        h, caches[i] = _layer_forward(model.layers[i], h, train, rng, model.bn_eps)
    return h, caches


def loss(y_hat, y, task: str = "multiclass", reduction: str = "sum") -> float:
    """Categorical (multiclass) or binary (multilabel) cross-entropy.

    ``reduction="sum"`` sums over samples as in the textbook formulas;
    ``"mean"`` divides by the batch size, which is what the optimizer uses.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise DataError(f"prediction shape {y_hat.shape} != target shape {y.shape}")
    p = np.clip(y_hat, PROB_CLIP, 1.0 - PROB_CLIP)
    if task == "multiclass":
        total = -np.sum(y * np.log(p))
    elif task == "multilabel":
        total = -np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    else:
        raise DataError(f"unknown task {task!r}")
    if reduction == "mean":
        return float(total / y.shape[0])
    if reduction != "sum":
        raise DataError(f"unknown reduction {reduction!r}")
    return float(total)


def backward(model: MlpModel, caches, targets, reduction: str = "mean") -> dict:
    """Gradients of the batch loss for every trainable parameter."""
    last = len(model.layers) - 1
    if caches is None or caches[last] is None:
        raise DataError("backward needs the caches of a train-mode forward pass")
    y = np.asarray(targets, dtype=np.float64)
    out = caches[last]
    y_hat = _activate(model.layers[last].spec.nonlinearity, out["u"])
    if y.shape != y_hat.shape:
        raise DataError(f"target shape {y.shape} != output shape {y_hat.shape}")
    scale = 1.0 / y.shape[0] if reduction == "mean" else 1.0
    # softmax + categorical CE and sigmoid + binary CE share this pre-activation gradient
    d_u = (y_hat - y) * scale

    grads = {}
    first_trainable = next(
        (i for i, l in enumerate(model.layers) if l.spec.trainable), len(model.layers)
    )
    for i in range(last, -1, -1):
        layer, cache = model.layers[i], caches[i]
        if cache is None:
            break
        spec = layer.spec
        if i != last:
            d_a = d_h
            if "mask" in cache:
                d_a = d_a * cache["mask"]
            if spec.l2_post:
                a = cache["normed"]
                d_a = (d_a - a * np.sum(a * d_a, axis=1, keepdims=True)) / cache["pre_norm"]
            if spec.nonlinearity == "relu":
                d_u = d_a * (cache["u"] > 0)
            elif spec.nonlinearity == "none":
                d_u = d_a
            else:
                raise DataError(f"{spec.nonlinearity} is only supported on the output layer")
        if spec.has_bn:
            xhat, inv_std = cache["xhat"], cache["inv_std"]
            d_gamma = np.sum(d_u * xhat, axis=0)
            d_beta = np.sum(d_u, axis=0)
            d_xhat = d_u * layer.gamma
            n = d_u.shape[0]
            d_z = inv_std / n * (
                n * d_xhat - d_xhat.sum(axis=0) - xhat * np.sum(d_xhat * xhat, axis=0)
            )
        else:
            d_z = d_u
        if spec.trainable:
            grads[f"{i}.W"] = d_z.T @ cache["h_in"]
            grads[f"{i}.b"] = d_z.sum(axis=0)
            if spec.has_bn:
                grads[f"{i}.gamma"] = d_gamma
                grads[f"{i}.beta"] = d_beta
        if i <= first_trainable:
            break
        d_h = d_z @ layer.W
    return grads


# -- optimizer ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moments and hyper-parameters.

    ``formulation="scaled_eps"`` uses
    ``theta -= lr * m / ((1 - b1^t) * sqrt(v / (1 - b2^t)) + eps)``;
    ``"standard"`` uses ``theta -= lr * m_hat / (sqrt(v_hat) + eps)``.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    formulation: str = "scaled_eps"
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict):
    """One in-place Adam update of ``params``; returns ``(params, state)``."""
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {key}")
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for key, g in grads.items():
        p = params[key]
        if p.shape != np.shape(g):
            raise DataError(f"gradient shape {np.shape(g)} != parameter shape {p.shape} ({key})")
        m = state.m.get(key)
        v = state.v.get(key)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[key], state.v[key] = m, v
        if state.formulation == "scaled_eps":
            step = state.lr * m / (c1 * np.sqrt(v / c2) + state.eps)
        elif state.formulation == "standard":
            step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        else:
            raise DataError(f"unknown Adam formulation {state.formulation!r}")
        p -= step
    return params, state


# -- training ----------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 50
    seed: int = 0
    dropout_p: float | None = None  # None keeps the model's rates
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    adam: str = "scaled_eps"


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"labels must lie in [0, {n_classes})")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _targets(model: MlpModel, y) -> np.ndarray:
    y = np.asarray(y)
    if model.task == "multiclass" and y.ndim == 1:
        return one_hot(y, model.n_outputs)
    if y.ndim != 2 or y.shape[1] != model.n_outputs:
        raise DataError(f"targets must have {model.n_outputs} columns")
    return y.astype(np.float64)


def _frozen_prefix(model: MlpModel) -> int:
    """Number of leading layers that are deterministic and untrainable."""
    k = 0
    for layer in model.layers[:-1]:
        s = layer.spec
        if s.trainable or s.has_bn or s.dropout_p > 0:
            break
        k += 1
    return k


def _accuracy(model: MlpModel, scores: np.ndarray, Y: np.ndarray) -> float:
    if model.task == "multiclass":
        return float(np.mean(scores.argmax(axis=1) == Y.argmax(axis=1)))
    return float(np.mean((scores >= 0.5) == (Y >= 0.5)))


def train(model: MlpModel, X, y, cfg: TrainConfig = TrainConfig()):
    """Mini-batch Adam on the batch-averaged loss.

    Returns ``(trained_model, trace)`` with one ``(epoch, loss, train_acc)``
    row per epoch; the input model is not modified.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("training data is empty")
    if X.shape[1] != model.in_dim:
        raise DataError(f"data has {X.shape[1]} features, model expects {model.in_dim}")
    Y = _targets(model, y)
    if Y.shape[0] != X.shape[0]:
        raise DataError("feature and label counts differ")
    model = model.copy()
    if cfg.dropout_p is not None:
        for layer in model.layers[:-1]:
            if layer.spec.trainable:
                layer.spec = replace(layer.spec, dropout_p=cfg.dropout_p)

    rng = np.random.default_rng(cfg.seed)
    state = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.adam)
    start = _frozen_prefix(model)
    H = X
    for i in range(start):
        H, _ = _layer_forward(model.layers[i], H, False, rng, model.bn_eps)
    has_bn = any(l.spec.has_bn for l in model.layers)
    params = model.params()
    n = X.shape[0]
    bs = max(1, min(cfg.batch_size, n))
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, seen, correct = 0.0, 0, 0.0
        for lo in range(0, n, bs):
            idx = order[lo:lo + bs]
            if has_bn and idx.size < 2:
                continue
            out, caches = forward(model, H[idx], "train", rng, start=start)
            grads = backward(model, caches, Y[idx])
            adam_step(state, params, grads)
            for i, layer in enumerate(model.layers):
                c = caches[i]
                if c is not None and "batch_mean" in c:
                    mom = model.bn_momentum
                    layer.running_mean = mom * layer.running_mean + (1 - mom) * c["batch_mean"]
                    layer.running_var = mom * layer.running_var + (1 - mom) * c["batch_var"]
            total += loss(out, Y[idx], model.task, "sum")
            correct += _accuracy(model, out, Y[idx]) * idx.size
            seen += idx.size
        if seen == 0:
            raise DataError("no usable mini-batch (batch norm needs at least 2 samples)")
        trace.append((epoch + 1, total / seen, correct / seen))
    return model, trace


def predict(model: MlpModel, X, batch_size: int = 1024) -> np.ndarray:
    """Infer-mode class scores (softmax or sigmoid outputs)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.in_dim:
        raise DataError(f"expected {model.in_dim} features")
    outs = [forward(model, X[lo:lo + batch_size], "infer")[0]
            for lo in range(0, X.shape[0], batch_size)]
    return np.concatenate(outs) if outs else np.empty((0, model.n_outputs))


def replace_output_layer(model: MlpModel, new_class_count: int, seed: int,
                         cfg: TrainConfig = TrainConfig()):
    """Swap the classification layer for a fresh one with ``new_class_count``
    outputs. Returns the new model and a fine-tuning config with lr / 10."""
    if new_class_count < 2:
        raise DataError("need at least 2 classes")
    new = model.copy()
    old = new.layers[-1].spec
    spec = replace(old, out_dim=new_class_count)
    new.layers[-1] = _init_layer(spec, np.random.default_rng(seed))
    new.__post_init__()
    return new, replace(cfg, lr=cfg.lr / 10.0)
