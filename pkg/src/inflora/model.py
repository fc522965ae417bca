"""Feed-forward classifier with frozen backbone layers and low-rank branches.

Batches are column-major: a batch of ``n`` samples in ``d`` dimensions is a
``d x n`` array, matching ``e = W h`` for a single column ``h``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import InvalidInput, ShapeError, StateError
from .linalg import ORTHO_TOL, as_matrix, orthonormality_error


class Mode(Enum):
    BRANCH_ONLY = "branch_only"
    FULL_WEIGHT_PROBE = "full_weight_probe"


@dataclass
class LoraLinearLayer:
    w: np.ndarray
    bias: np.ndarray
    adapted: bool = True
    activation: str = "relu"
    branch_a: np.ndarray | None = None
    branch_b: np.ndarray | None = None

    @property
    def d_in(self):
        return self.w.shape[1]

    @property
    def d_out(self):
        return self.w.shape[0]

    @property
    def has_branch(self):
        return self.branch_a is not None

    @property
    def rank(self):
        return 0 if self.branch_b is None else self.branch_b.shape[0]

    def effective_weight(self):
        if not self.has_branch:
            return self.w
        return self.w + self.branch_a @ self.branch_b

    def trainable_count(self):
        if not self.has_branch:
            return 0
        return self.branch_a.size + self.branch_b.size

    def expand_branch(self, b, require_orthonormal=True):
        """Attach a frozen ``b`` and a zero-initialized trainable ``a``."""
        if self.has_branch:
            raise StateError("layer already has an active branch")
        b = as_matrix(b, "b")
        if b.shape[1] != self.d_in or b.shape[0] < 1:
            raise ShapeError(f"b must be r x {self.d_in}, got {b.shape}")
        if require_orthonormal and orthonormality_error(b, axis=1) > ORTHO_TOL:
            raise InvalidInput("rows of b are not orthonormal")
        self.branch_b = b.copy()
        self.branch_a = np.zeros((self.d_out, b.shape[0]))

    def merge_branch(self):
        """Fold ``a @ b`` into ``w`` and drop the branch. Returns the increment."""
        if not self.has_branch:
            raise StateError("no active branch to merge")
        delta = self.branch_a @ self.branch_b
        self.w = self.w + delta
        self.branch_a = None
        self.branch_b = None
        return delta


@dataclass
class Head:
    w: np.ndarray
    bias: np.ndarray

    @property
    def n_classes(self):
        return self.w.shape[0]


@dataclass
class Network:
    layers: list
    head: Head

    @property
    def dims(self):
        return (self.layers[0].d_in, [l.d_out for l in self.layers], self.head.n_classes)

    @property
    def d_feat(self):
        return self.layers[-1].d_out

    def adapted_indices(self):
        return [i for i, l in enumerate(self.layers) if l.adapted]

    def trainable_parameters(self):
        """Name -> array (by reference) of everything an optimizer may touch."""
        params = {}
        for i, layer in enumerate(self.layers):
            if layer.has_branch:
                params[f"layers.{i}.a"] = layer.branch_a
        params["head.w"] = self.head.w
        params["head.bias"] = self.head.bias
        return params

    def trainable_count(self):
        return sum(l.trainable_count() for l in self.layers) + self.head.w.size + self.head.bias.size

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class ForwardCache:
    inputs: list
    pre: list
    features: np.ndarray
    logits: np.ndarray


@dataclass
class Gradients:
    params: dict
    probe: dict = field(default_factory=dict)


def build_network(d_in, hidden, n_classes, rng, adapted=None, activations=None):
    """He-initialized backbone, zero head. All backbone layers adapted by default."""
    widths = [d_in, *hidden]
    if adapted is None:
        adapted = [True] * len(hidden)
    if activations is None:
        activations = ["relu"] * len(hidden)
    if len(adapted) != len(hidden) or len(activations) != len(hidden):
        raise InvalidInput("adapted/activations must have one entry per backbone layer")
    layers = []
    for k in range(len(hidden)):
        w = rng.standard_normal((widths[k + 1], widths[k])) * np.sqrt(2.0 / widths[k])
        layers.append(
            LoraLinearLayer(w=w, bias=np.zeros(widths[k + 1]), adapted=bool(adapted[k]), activation=activations[k])
        )
    head = Head(w=np.zeros((n_classes, widths[-1])), bias=np.zeros(n_classes))
    return Network(layers=layers, head=head)


def _activate(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "none":
        return z
    raise InvalidInput(f"unknown activation {kind!r}")


def forward(net, x):
    """Logits (C x n) and the per-layer cache needed by :func:`backward`."""
    h = as_matrix(x, "x")
    if h.shape[0] != net.layers[0].d_in:
        raise ShapeError(f"input has {h.shape[0]} rows, network expects {net.layers[0].d_in}")
    if h.shape[1] < 1:
        raise ShapeError("empty batch")
    inputs, pre = [], []
    for layer in net.layers:
        inputs.append(h)
        z = layer.w @ h
        if layer.has_branch:
            z = z + layer.branch_a @ (layer.branch_b @ h)
        z = z + layer.bias[:, None]
        pre.append(z)
        h = _activate(layer.activation, z)
    logits = net.head.w @ h + net.head.bias[:, None]
    return logits, ForwardCache(inputs=inputs, pre=pre, features=h, logits=logits)


def features(net, x):
    return forward(net, x)[1].features


def backward(net, cache, grad_logits, mode=Mode.BRANCH_ONLY, strict=True):
    """Gradients of the loss whose logit-gradient is ``grad_logits``.

    BRANCH_ONLY returns gradients of every active ``a`` and of the head.
    FULL_WEIGHT_PROBE also fills ``probe`` with gradients of each frozen ``w``
    and ``bias``; those are never consumed by :func:`apply_gradients`.
    With ``strict`` an adapted layer lacking a branch is an error.
    """
    mode = Mode(mode)
    g = as_matrix(grad_logits, "grad_logits")
    if g.shape != cache.logits.shape:
        raise ShapeError(f"grad_logits shape {g.shape} != logits shape {cache.logits.shape}")
    if mode is Mode.BRANCH_ONLY and strict:
        for i, layer in enumerate(net.layers):
            if layer.adapted and not layer.has_branch:
                raise StateError(f"adapted layer {i} has no branch")
    params, probe = {}, {}
    params["head.w"] = g @ cache.features.T
    params["head.bias"] = g.sum(axis=1)
    delta = net.head.w.T @ g
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.activation == "relu":
            delta = delta * (cache.pre[i] > 0.0)
        h = cache.inputs[i]
        if layer.has_branch:
            # (dL/de) h^T B^T, grouped to keep the r-dimensional product small.
            params[f"layers.{i}.a"] = delta @ (layer.branch_b @ h).T
        if mode is Mode.FULL_WEIGHT_PROBE:
            probe[f"layers.{i}.w"] = delta @ h.T
            probe[f"layers.{i}.bias"] = delta.sum(axis=1)
        if i > 0:
            delta = layer.effective_weight().T @ delta
    return Gradients(params=params, probe=probe)


def _check_labels(labels, n):
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != n:
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise InvalidInput("labels must be integers")
    return y


def cross_entropy(logits, labels, lo, hi):
    """Batch-mean softmax cross-entropy over the logit rows ``[lo, hi)``.

    Rows outside the window get exactly zero gradient.
    """
    logits = as_matrix(logits, "logits")
    y = _check_labels(labels, logits.shape[1])
    if np.any((y < lo) | (y >= hi)):
        raise InvalidInput(f"labels outside class range [{lo}, {hi})")
    n = logits.shape[1]
    z = logits[lo:hi]
    z = z - z.max(axis=0, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=0))
    cols = np.arange(n)
    loss = float(np.mean(logsum - z[y - lo, cols]))
    p = np.exp(z - logsum)
    p[y - lo, cols] -= 1.0
    grad = np.zeros_like(logits)
    grad[lo:hi] = p / n
    return loss, grad


def local_ce_loss(logits, labels, task_classes):
    """Cross-entropy restricted to the current task's contiguous class range."""
    task_classes = range(task_classes[0], task_classes[-1] + 1) if not isinstance(task_classes, range) else task_classes
    if task_classes.step != 1 or len(task_classes) == 0:
        raise InvalidInput("task_classes must be a non-empty contiguous range")
    return cross_entropy(logits, labels, task_classes.start, task_classes.stop)


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise InvalidInput(f"unknown optimizer {self.kind!r}")


def step_params(params, grads, opt):
    """In-place update of ``params`` (name -> array) from ``grads``."""
    for name, p in params.items():
        if name not in grads:
            raise ShapeError(f"missing gradient for {name}")
        if grads[name].shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {grads[name].shape}, expected {p.shape}")
    extra = set(grads) - set(params)
    if extra:
        raise ShapeError(f"gradients for non-trainable parameters: {sorted(extra)}")
    if opt.kind == "sgd":
        for name, p in params.items():
            p -= opt.lr * grads[name]
        return
    opt.t += 1
    bc1 = 1.0 - opt.beta1**opt.t
    bc2 = 1.0 - opt.beta2**opt.t
    for name, p in params.items():
        g = grads[name]
        m = opt.m.get(name)
        if m is None or m.shape != p.shape:
            m = opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        p -= opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)


def apply_gradients(net, grads, opt):
    step_params(net.trainable_parameters(), grads.params, opt)


def pretrain_backbone(net, x, y, n_classes, rng, epochs=30, batch_size=128, lr=1e-3):
    """Train backbone weights and biases on an auxiliary task, then drop the temporary head.

    Returns the per-epoch mean loss.
    """
    x = as_matrix(x, "x")
    y = np.asarray(y)
    tmp = Network(layers=net.layers, head=Head(w=np.zeros((n_classes, net.d_feat)), bias=np.zeros(n_classes)))
    opt = OptimizerState(kind="adam", lr=lr)
    n = x.shape[1]
    trace = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            logits, cache = forward(tmp, x[:, idx])
            loss, g = cross_entropy(logits, y[idx], 0, n_classes)
            total += loss * idx.size
            grads = backward(tmp, cache, g, Mode.FULL_WEIGHT_PROBE, strict=False)
            params = {"head.w": tmp.head.w, "head.bias": tmp.head.bias}
            flat = {"head.w": grads.params["head.w"], "head.bias": grads.params["head.bias"]}
            for i, layer in enumerate(tmp.layers):
                params[f"layers.{i}.w"] = layer.w
                params[f"layers.{i}.bias"] = layer.bias
                flat[f"layers.{i}.w"] = grads.probe[f"layers.{i}.w"]
                flat[f"layers.{i}.bias"] = grads.probe[f"layers.{i}.bias"]
            step_params(params, flat, opt)
        trace.append(total / n)
    return trace
