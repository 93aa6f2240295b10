"""Cascaded feedforward network: topology, cascade mask, forward pass and exact gradients.

Every hidden layer after the first may receive direct connections from the
input channels. A connection pairs one input channel (all of its samples)
with one hidden neuron, so each active connection carries a weight vector
as long as the channel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

ACTIVATIONS = ("tanh", "logistic", "relu")
LOG_EPS = 1e-12


@dataclass(frozen=True)
class CfnnTopology:
    n_channels: int
    n_samples: int
    hidden: tuple = (3,) * 17
    n_classes: int = 2
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if len(self.hidden) < 1 or min(self.hidden) < 1:
            raise ValueError("need at least one hidden layer of size >= 1")
        if self.n_channels < 1 or self.n_samples < 1 or self.n_classes < 1:
            raise ValueError("channel, sample and class counts must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def n_inputs(self) -> int:
        return self.n_channels * self.n_samples

    @property
    def n_cascade_neurons(self) -> int:
        """Hidden neurons eligible for cascade input (all layers but the first)."""
        return sum(self.hidden[1:])

    @property
    def max_connections(self) -> int:
        return self.n_channels * self.n_cascade_neurons

    @property
    def n_blocks(self) -> int:
        return len(self.hidden) - 1

    def block_neurons(self, block: int) -> range:
        """Cascade-neuron indices of hidden layer ``block + 2`` (1-based layers)."""
        start = sum(self.hidden[1:block + 1])
        return range(start, start + self.hidden[block + 1])

    def block_size(self, block: int) -> int:
        return self.n_channels * self.hidden[block + 1]


# -- cascade masks -------------------------------------------------------------

def empty_mask(top: CfnnTopology) -> np.ndarray:
    return np.zeros((top.n_channels, top.n_cascade_neurons), dtype=bool)


def full_mask(top: CfnnTopology) -> np.ndarray:
    return np.ones((top.n_channels, top.n_cascade_neurons), dtype=bool)


def blocks_mask(top: CfnnTopology, blocks) -> np.ndarray:
    """Mask with every channel connected to every neuron of the listed blocks."""
    mask = empty_mask(top)
    for b in blocks:
        if not 0 <= b < top.n_blocks:
            raise ValueError(f"block {b} outside [0, {top.n_blocks})")
        mask[:, list(top.block_neurons(b))] = True
    return mask


def count_mask(top: CfnnTopology, count: int) -> np.ndarray:
    """Fill whole blocks shallow-to-deep until ``count`` connections are active."""
    if count < 0 or count > top.max_connections:
        raise ValueError(f"connection count {count} outside [0, {top.max_connections}]")
    blocks, total = [], 0
    for b in range(top.n_blocks):
        if total == count:
            break
        blocks.append(b)
        total += top.block_size(b)
    if total != count:
        raise ValueError(f"{count} connections is not a whole number of blocks")
    return blocks_mask(top, blocks)


def check_mask(top: CfnnTopology, mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (top.n_channels, top.n_cascade_neurons):
        raise ValueError(f"mask shape {mask.shape} != "
                         f"{(top.n_channels, top.n_cascade_neurons)}")
    return mask


def mask_rle(mask) -> str:
    """Run lengths of the row-major flattened mask, starting with a run of zeros."""
    flat = np.asarray(mask, dtype=bool).ravel()
    runs, current, n = [], False, 0
    for v in flat:
        if v == current:
            n += 1
        else:
            runs.append(n)
            current, n = v, 1
    runs.append(n)
    return " ".join(map(str, runs))


def mask_from_rle(text: str, shape) -> np.ndarray:
    flat, value = [], False
    for n in map(int, text.split()):
        flat.extend([value] * n)
        value = not value
    if len(flat) != shape[0] * shape[1]:
        raise ValueError("run-length mask does not match its shape")
    return np.array(flat, dtype=bool).reshape(shape)


# -- parameters ----------------------------------------------------------------

@dataclass
class CfnnWeights:
    W: list
    b: list
    U: np.ndarray  # (active connections, n_samples) in (neuron, channel) order


class CfnnNet:
    """Parameter layout and numerics for one (topology, mask) pair.

    The flat parameter vector holds, in order: ``W_1, b_1, ..., W_L, b_L,
    W_out, b_out`` (row-major) and then one row of ``n_samples`` weights per
    active cascade connection, sorted by (neuron, channel). Inactive
    connections have no slot.
    """

    def __init__(self, topology: CfnnTopology, mask=None):
        self.topology = topology
        self.mask = empty_mask(topology) if mask is None else check_mask(topology, mask)
        sizes = (topology.n_inputs,) + topology.hidden + (topology.n_classes,)
        self.layer_shapes = [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]
        # active (neuron, channel) pairs in neuron-major order
        neuron, channel = np.nonzero(self.mask.T)
        self.active = np.stack([neuron, channel], axis=1)
        self.n_layer_params = sum(o * i + o for o, i in self.layer_shapes)
        self.n_params = self.n_layer_params + len(self.active) * topology.n_samples

    @property
    def n_connections(self) -> int:
        return len(self.active)

    # flat <-> structured
    def unflatten(self, theta) -> CfnnWeights:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError(f"parameter vector has length {theta.size}, expected {self.n_params}")
        W, b, off = [], [], 0
        for o, i in self.layer_shapes:
            W.append(theta[off:off + o * i].reshape(o, i))
            off += o * i
            b.append(theta[off:off + o])
            off += o
        U = theta[off:].reshape(len(self.active), self.topology.n_samples)
        return CfnnWeights(W, b, U)

    def flatten(self, weights: CfnnWeights) -> np.ndarray:
        parts = []
        for W, b in zip(weights.W, weights.b):
            parts += [np.ravel(W), np.ravel(b)]
        parts.append(np.ravel(weights.U))
        return np.concatenate(parts).astype(np.float64)

    def init_params(self, seed=0) -> np.ndarray:
        """Glorot-uniform weights per matrix, zero biases, zero cascade weights scaled in."""
        rng = np.random.default_rng(seed)
        parts = []
        top = self.topology
        for o, i in self.layer_shapes:
            lim = np.sqrt(6.0 / (i + o))
            parts += [rng.uniform(-lim, lim, o * i), np.zeros(o)]
        if len(self.active):
            # a neuron's cascade fan-in is the width of its active channels
            fan_in = self.mask.sum(axis=0)[self.active[:, 0]] * top.n_samples
            lim = np.sqrt(6.0 / (fan_in + 1.0))
            parts.append((rng.uniform(-1, 1, (len(self.active), top.n_samples))
                          * lim[:, None]).ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    def dense_cascade(self, U) -> np.ndarray:
        """Cascade weights scattered into a (cascade neurons, n_inputs) matrix."""
        top = self.topology
        dense = np.zeros((top.n_cascade_neurons, top.n_channels, top.n_samples))
        if len(self.active):
            dense[self.active[:, 0], self.active[:, 1]] = U
        return dense.reshape(top.n_cascade_neurons, top.n_inputs)

    # numerics
    def _act(self, z):
        kind = self.topology.activation
        if kind == "tanh":
            return np.tanh(z)
        if kind == "logistic":
            return 0.5 * (1.0 + np.tanh(0.5 * z))
        return np.maximum(z, 0.0)

    def _act_grad(self, h, z):
        kind = self.topology.activation
        if kind == "tanh":
            return 1.0 - h * h
        if kind == "logistic":
            return h * (1.0 - h)
        return (z > 0).astype(z.dtype)

    def _check_input(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.topology.n_inputs:
            raise ValueError(f"input width {X.shape[-1]} != {self.topology.n_inputs}")
        return X

    def _forward(self, w: CfnnWeights, X, dense=None):
        top = self.topology
        cascade = None
        if len(self.active):
            dense = self.dense_cascade(w.U) if dense is None else dense
            cascade = X @ dense.T
        hs, zs = [], []
        h = X
        offset = 0
        for layer, (W, b) in enumerate(zip(w.W[:-1], w.b[:-1])):
            z = h @ W.T + b
            if layer > 0 and cascade is not None:
                n = top.hidden[layer]
                z = z + cascade[:, offset:offset + n]
                offset += n
            elif layer > 0:
                offset += top.hidden[layer]
            h = self._act(z)
            zs.append(z)
            hs.append(h)
        logits = h @ w.W[-1].T + w.b[-1]
        logits = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        return p, hs, zs

    def compile(self, w: CfnnWeights):
        """Pack first-layer weights and the connected cascade rows into one matrix.

        Returns ``(proj, layers)`` for :meth:`infer`; rows of cascade neurons
        with no active connection are left out, so a single product with the
        input produces every input-dependent term.
        """
        top = self.topology
        dense = self.dense_cascade(w.U)
        rows = [w.W[0]]
        layers = []
        start = top.hidden[0]
        offset = 0
        for layer in range(1, len(top.hidden)):
            n = top.hidden[layer]
            block = dense[offset:offset + n]
            offset += n
            if block.any():
                rows.append(block)
                layers.append((w.W[layer], w.b[layer], slice(start, start + n)))
                start += n
            else:
                layers.append((w.W[layer], w.b[layer], None))
        proj = np.ascontiguousarray(np.vstack(rows))
        head = (w.b[0], w.W[-1], w.b[-1])
        return proj, head, layers

    def infer(self, plan, X) -> np.ndarray:
        """Class probabilities from a :meth:`compile` plan; same values as :meth:`forward`."""
        proj, (b0, W_out, b_out), layers = plan
        act = self._act
        terms = X @ proj.T
        h = act(terms[:, :b0.size] + b0)
        for W, b, cols in layers:
            z = h @ W.T + b
            if cols is not None:
                z += terms[:, cols]
            h = act(z)
        logits = h @ W_out.T + b_out
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        return p

    def forward(self, theta, X) -> np.ndarray:
        """Class probabilities, one row per input row."""
        X = self._check_input(X)
        return self._forward(self.unflatten(theta), X)[0]

    def loss(self, theta, X, y) -> float:
        p = self.forward(theta, X)
        return cross_entropy(p, y)

    def loss_grad(self, theta, X, y):
        """Mean cross-entropy and its exact gradient in flat-parameter order."""
        X = self._check_input(X)
        y = np.asarray(y, dtype=int)
        w = self.unflatten(theta)
        p, hs, zs = self._forward(w, X)
        n = X.shape[0]
        loss = cross_entropy(p, y)
        top = self.topology

        delta = p.copy()
        delta[np.arange(n), y] -= 1.0
        delta /= n
        gW = [None] * len(w.W)
        gb = [None] * len(w.b)
        gW[-1] = delta.T @ hs[-1]
        gb[-1] = delta.sum(axis=0)
        back = delta @ w.W[-1]
        cascade_delta = np.zeros((n, top.n_cascade_neurons))
        offsets = np.concatenate([[0], np.cumsum(top.hidden[1:])])
        for layer in range(len(top.hidden) - 1, -1, -1):
            d = back * self._act_grad(hs[layer], zs[layer])
            if not np.all(np.isfinite(d)):
                raise FloatingPointError(f"non-finite activations in hidden layer {layer + 1}")
            inp = hs[layer - 1] if layer > 0 else X
            gW[layer] = d.T @ inp
            gb[layer] = d.sum(axis=0)
            if layer > 0:
                cascade_delta[:, offsets[layer - 1]:offsets[layer]] = d
            back = d @ w.W[layer]
        parts = []
        for a, b in zip(gW, gb):
            parts += [a.ravel(), b]
        if len(self.active):
            # dL/du_{n,c} = sum over rows of delta_n * x_c, taken from the dense product
            gU = (cascade_delta.T @ X).reshape(
                top.n_cascade_neurons, top.n_channels, top.n_samples)[self.active[:, 0],
                                                                      self.active[:, 1]]
            parts.append(gU.ravel())
        return loss, np.concatenate(parts)


def cross_entropy(p, y) -> float:
    """Mean of ``-log p[target]`` with the probability clamped at 1e-12."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=int))
    if np.any(y < 0) or np.any(y >= p.shape[1]):
        raise ValueError("target class outside [0, K)")
    picked = p[np.arange(len(y)), y]
    return float(np.mean(-np.log(np.maximum(picked, LOG_EPS))))


@dataclass(frozen=True)
class LossReport:
    loss: float
    class_counts: np.ndarray  # predicted-class histogram
    grad: np.ndarray


def forward(theta, mask, topology: CfnnTopology, X) -> np.ndarray:
    return CfnnNet(topology, mask).forward(theta, X)


def backward(theta, mask, topology: CfnnTopology, X, y) -> LossReport:
    net = CfnnNet(topology, mask)
    X = net._check_input(X)
    loss, grad = net.loss_grad(theta, X, y)
    pred = np.argmax(net.forward(theta, X), axis=1)
    return LossReport(loss, np.bincount(pred, minlength=topology.n_classes), grad)


# -- estimator --------------------------------------------------------------------


class CascadeFFNClassifier(ClassifierMixin, BaseEstimator):
    """Cascaded feedforward classifier trained by full-batch conjugate gradient.

    Parameters
    ----------
    n_channels : int
        Channels each input row is split into; the row width must be a multiple.
    hidden : tuple of int
        Hidden layer sizes.
    connections : int
        Active cascade connections, filled in whole blocks from the shallowest
        eligible layer. Ignored when ``mask`` is given.
    mask : array of bool, optional
        Explicit (channel, cascade neuron) mask.
    activation : {"tanh", "logistic", "relu"}
    max_iter, grad_tol, restart_period, pr_clamp
        Optimiser settings (see ``trainer.TrainConfig``).
    weight_decay : float
        L2 penalty coefficient on all parameters; 0 disables it.
    random_state : int
        Seed for the initial weights.
    """

    def __init__(self, n_channels=30, hidden=(3,) * 17, connections=0, mask=None,
                 activation="tanh", max_iter=300, grad_tol=1e-6, restart_period=None,
                 pr_clamp=True, weight_decay=0.0, random_state=0):
        self.n_channels = n_channels
        self.hidden = hidden
        self.connections = connections
        self.mask = mask
        self.activation = activation
        self.max_iter = max_iter
        self.grad_tol = grad_tol
        self.restart_period = restart_period
        self.pr_clamp = pr_clamp
        self.weight_decay = weight_decay
        self.random_state = random_state

    def train_config(self):
        from .trainer import TrainConfig
        return TrainConfig(max_iter=self.max_iter, grad_tol=self.grad_tol,
                           restart_period=self.restart_period, pr_clamp=self.pr_clamp,
                           weight_decay=float(self.weight_decay), seed=int(self.random_state))

    def _topology(self, width, n_classes):
        if width % self.n_channels:
            raise ValueError(f"row width {width} is not a multiple of {self.n_channels} channels")
        return CfnnTopology(self.n_channels, width // self.n_channels, tuple(self.hidden),
                            n_classes, self.activation)

    def fit(self, X, y):
        from .trainer import train
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError(f"{len(y)} labels for {X.shape[0]} rows")
        classes, y_enc = np.unique(y, return_inverse=True)
        top = self._topology(X.shape[1], len(classes))
        mask = (check_mask(top, self.mask) if self.mask is not None
                else count_mask(top, int(self.connections)))
        net = CfnnNet(top, mask)
        theta, report = train(net, X, y_enc, self.train_config())
        self._set_fitted(top, mask, classes, theta)
        self.report_ = report
        return self

    def _set_fitted(self, topology, mask, classes, theta):
        self.topology_ = topology
        self.mask_ = np.asarray(mask, dtype=bool)
        self.classes_ = np.asarray(classes)
        self.theta_ = np.asarray(theta, dtype=np.float64)
        self.n_features_in_ = topology.n_inputs
        self.net_ = CfnnNet(topology, self.mask_)
        self._weights = self.net_.unflatten(self.theta_)
        self._plan = self.net_.compile(self._weights)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "theta_")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.n_features_in_:
            raise ValueError(f"input width {X.shape[-1]} != {self.n_features_in_}")
        if not np.isfinite(X).all():
            raise ValueError("input contains NaN or infinity")
        return self.net_.infer(self._plan, X)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


# -- model files ----------------------------------------------------------------------

MODEL_TAG = "cfnnmodel-v1"
_ESTIMATOR_KEYS = ("max_iter", "grad_tol", "restart_period", "pr_clamp", "weight_decay",
                   "random_state")


@dataclass
class CfnnModel:
    """A fitted head plus the window layout and normaliser its inputs expect."""

    head: str
    estimator: CascadeFFNClassifier
    spec: object  # scenario_data.WindowSpec
    normalizer: object  # scenario_data.WindowNormalizer

    def prepare(self, rows, normalized: bool = False) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        if rows.shape[1] != self.spec.width:
            raise ValueError(f"window width {rows.shape[1]} != model width {self.spec.width}")
        return rows if normalized else self.normalizer.transform(rows)


def save_model(model: CfnnModel, path):
    """Write the text model file; floats use shortest round-trip repr."""
    est = model.estimator
    check_is_fitted(est, "theta_")
    top = est.topology_
    lines = [
        MODEL_TAG,
        f"head = {model.head}",
        f"activation = {top.activation}",
        f"channels = {top.n_channels}",
        f"samples = {top.n_samples}",
        f"hidden = {' '.join(map(str, top.hidden))}",
        f"classes = {' '.join(str(int(c)) for c in est.classes_)}",
        f"window = {json.dumps(model.spec.to_dict(), sort_keys=True)}",
        f"train = {json.dumps({k: getattr(est, k) for k in _ESTIMATOR_KEYS}, sort_keys=True)}",
        f"mask = {mask_rle(est.mask_)}",
        f"norm_mean = {' '.join(map(repr, model.normalizer.mean_.tolist()))}",
        f"norm_scale = {' '.join(map(repr, model.normalizer.scale_.tolist()))}",
        f"params = {est.theta_.size}",
    ]
    lines += map(repr, est.theta_.tolist())
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def load_model(path) -> CfnnModel:
    from .scenario_data import WindowNormalizer, WindowSpec

    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != MODEL_TAG:
        raise ValueError(f"{path}: not a {MODEL_TAG} file")
    head = {}
    i = 1
    while i < len(lines):
        key, sep, value = lines[i].partition(" = ")
        if not sep:
            raise ValueError(f"{path}:{i + 1}: expected 'key = value'")
        head[key.strip()] = value
        i += 1
        if key.strip() == "params":
            break
    try:
        n_params = int(head["params"])
        hidden = tuple(int(v) for v in head["hidden"].split())
        classes = np.array([int(v) for v in head["classes"].split()])
        top = CfnnTopology(int(head["channels"]), int(head["samples"]), hidden,
                           len(classes), head["activation"])
        mask = mask_from_rle(head["mask"], (top.n_channels, top.n_cascade_neurons))
        spec = WindowSpec.from_dict(json.loads(head["window"]))
        train_kw = json.loads(head["train"])
        norm = WindowNormalizer.from_stats([float(v) for v in head["norm_mean"].split()],
                                           [float(v) for v in head["norm_scale"].split()])
    except KeyError as exc:
        raise ValueError(f"{path}: missing header field {exc}") from None
    theta = np.array([float(v) for v in lines[i:i + n_params]])
    if theta.size != n_params:
        raise ValueError(f"{path}: expected {n_params} parameters, found {theta.size}")
    est = CascadeFFNClassifier(n_channels=top.n_channels, hidden=hidden,
                               mask=mask, activation=top.activation,
                               **train_kw)
    est._set_fitted(top, mask, classes, theta)
    if est.net_.n_params != n_params:
        raise ValueError(f"{path}: parameter count does not match topology and mask")
    return CfnnModel(head["head"], est, spec, norm)


# -- dual-head decision ------------------------------------------------------------

@dataclass(frozen=True)
class HeadDecision:
    unstable: bool
    pair: tuple | None  # surfaced only when the stability head says unstable
    p_stability: np.ndarray
    pair_raw: tuple | None  # pair head output, always evaluated when a pair model exists
    p_pair: np.ndarray | None

    @property
    def label(self) -> str:
        return "unstable" if self.unstable else "stable"


def predict_heads(stability: CfnnModel, pair: CfnnModel | None, row,
                  normalized: bool = False) -> HeadDecision:
    """Run both heads on one window; the pair is reported only for unstable calls."""
    from .transim import class_to_pair

    if pair is not None and pair.spec != stability.spec:
        raise ValueError(f"window layouts differ: {stability.spec} vs {pair.spec}")
    x = stability.prepare(row, normalized)
    p_stab = stability.estimator.predict_proba(x)[0]
    unstable = bool(stability.estimator.classes_[int(np.argmax(p_stab))] == 1)
    pair_raw = p_pair = None
    if pair is not None:
        # both heads were trained on the same normalised rows
        p_pair = pair.estimator.predict_proba(x)[0]
        cls = int(pair.estimator.classes_[int(np.argmax(p_pair))])
        pair_raw = class_to_pair(cls, stability.spec.n_gen)
    return HeadDecision(unstable, pair_raw if unstable else None, p_stab, pair_raw, p_pair)
