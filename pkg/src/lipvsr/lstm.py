"""Single-layer LSTM frame classifier trained with momentum SGD.

Gates and the cell candidate all use the logistic sigmoid, and so does the
cell output squashing: ``h_t = o_t * sigmoid(c_t)``.  Gate parameters are kept
stacked input-major in one ``(D+H, 4H)`` matrix, columns ordered input,
forget, output, candidate; :class:`LstmParams` exposes the conventional
``(H, D+H)`` per-gate views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .dataio import FormatError

_GATES = ("i", "f", "o", "c")
WEIGHT_NAMES = ("W", "Wy")
TENSOR_ORDER = ("W", "b", "Wy", "by")


def sigmoid(x):
    # two-branch form never exponentiates a large positive number
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class LstmParams:
    W: np.ndarray    # (D+H, 4H), input-major
    b: np.ndarray    # (4H,)
    Wy: np.ndarray   # (C, H)
    by: np.ndarray   # (C,)
    scaling: float = 1.0
    seed: int = 0

    @property
    def input_dim(self):
        return self.W.shape[0] - self.hidden_dim

    @property
    def hidden_dim(self):
        return self.W.shape[1] // 4

    @property
    def n_classes(self):
        return self.Wy.shape[0]

    def gate(self, name):
        """(H x (D+H) weights, bias) views for gate ``'i'``, ``'f'``, ``'o'`` or ``'c'``."""
        H = self.hidden_dim
        j = _GATES.index(name)
        return self.W[:, j * H:(j + 1) * H].T, self.b[j * H:(j + 1) * H]

    W_i = property(lambda self: self.gate("i")[0])
    W_f = property(lambda self: self.gate("f")[0])
    W_o = property(lambda self: self.gate("o")[0])
    W_c = property(lambda self: self.gate("c")[0])

    def tensors(self):
        return {name: getattr(self, name) for name in TENSOR_ORDER}

    def copy(self):
        return LstmParams(self.W.copy(), self.b.copy(), self.Wy.copy(), self.by.copy(),
                          self.scaling, self.seed)

    @classmethod
    def zeros(cls, input_dim, hidden_dim, n_classes):
        H, D, C = hidden_dim, input_dim, n_classes
        return cls(np.zeros((D + H, 4 * H)), np.zeros(4 * H), np.zeros((C, H)), np.zeros(C))

    @classmethod
    def init(cls, input_dim, hidden_dim=64, n_classes=28, seed=0, scaling=1.0):
        """Uniform(-r, r) weights with r = 1/sqrt(D+H); forget bias +1, other biases 0."""
        H, D, C = hidden_dim, input_dim, n_classes
        rng = np.random.default_rng(seed)
        r = 1.0 / math.sqrt(D + H)
        W = rng.uniform(-r, r, size=(D + H, 4 * H))
        Wy = rng.uniform(-r, r, size=(C, H))
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0
        return cls(W, b, Wy, np.zeros(C), scaling, seed)

    def save(self, path, meta=None):
        fields = dict(D=self.input_dim, H=self.hidden_dim, C=self.n_classes, seed=self.seed,
                      scaling=repr(float(self.scaling)))
        fields.update(meta or {})
        header = "LIPLSTM " + " ".join(f"{k}={v}" for k, v in fields.items()) + "\n"
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            for name in TENSOR_ORDER:
                fh.write(np.ascontiguousarray(getattr(self, name), dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        """Returns ``(params, header_fields)``."""
        data = Path(path).read_bytes()
        nl = data.find(b"\n")
        if nl < 0 or not data.startswith(b"LIPLSTM "):
            raise FormatError("not an LSTM model file", path, 0)
        fields = dict(tok.split("=", 1) for tok in data[8:nl].decode("ascii").split())
        D, H, C = int(fields["D"]), int(fields["H"]), int(fields["C"])
        shapes = {"W": (D + H, 4 * H), "b": (4 * H,), "Wy": (C, H), "by": (C,)}
        total = sum(math.prod(s) for s in shapes.values())
        payload = data[nl + 1:]
        if len(payload) != 8 * total:
            raise FormatError(f"model payload is {len(payload)} bytes, expected {8 * total}",
                              path, nl + 1)
        flat = np.frombuffer(payload, dtype="<f8")
        arrays, pos = {}, 0
        for name in TENSOR_ORDER:
            n = math.prod(shapes[name])
            arrays[name] = flat[pos:pos + n].reshape(shapes[name]).astype(np.float64)
            pos += n
        params = cls(**arrays, scaling=float(fields["scaling"]), seed=int(fields["seed"]))
        return params, fields


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.5
    weight_decay: float = 0.001
    momentum: float = 0.8
    max_iterations: int = 10000
    bptt_horizon: int | None = None
    hidden_dim: int = 64
    n_classes: int = 28
    scaling: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.learning_rate, self.weight_decay, self.momentum) < 0:
            raise ValueError("rates must be non-negative")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class Cache:
    x: np.ndarray        # (T, D) scaled inputs
    gates: np.ndarray    # (T, 4H) post-sigmoid i, f, o, g
    c: np.ndarray        # (T+1, H), row 0 is c_0
    h: np.ndarray        # (T+1, H), row 0 is h_0
    sc: np.ndarray       # (T, H) sigmoid(c_t)
    probs: np.ndarray    # (T, C)


def forward(params, features):
    """Posteriors (T, C) and the activation cache for :func:`backward`."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(f"expected (T, {params.input_dim}) features, got {x.shape}")
    if x.shape[0] < 1:
        raise ValueError("empty sequence")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input features")
    if params.scaling != 1.0:
        x = x * params.scaling
    T, D, H = x.shape[0], params.input_dim, params.hidden_dim
    Wx, Wh = params.W[:D], params.W[D:]
    pre_x = x @ Wx + params.b
    gates = np.empty((T, 4 * H))
    c = np.zeros((T + 1, H))
    h = np.zeros((T + 1, H))
    sc = np.empty((T, H))
    for t in range(T):
        g = sigmoid(pre_x[t] + h[t] @ Wh)
        gates[t] = g
        c[t + 1] = g[H:2 * H] * c[t] + g[:H] * g[3 * H:]
        sc[t] = sigmoid(c[t + 1])
        h[t + 1] = g[2 * H:3 * H] * sc[t]
    probs = softmax(h[1:] @ params.Wy.T + params.by)
    return probs, Cache(x, gates, c, h, sc, probs)


def posteriors(params, features):
    return forward(params, features)[0]


def loss(probs, labels):
    """Mean cross-entropy in nats per frame."""
    p = np.asarray(probs)
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (p.shape[0],):
        raise ValueError(f"{y.shape[0] if y.ndim else 0} labels for {p.shape[0]} frames")
    if y.size and (y.min() < 0 or y.max() >= p.shape[1]):
        raise ValueError("label out of range")
    with np.errstate(divide="ignore"):
        return float(-np.mean(np.log(p[np.arange(len(y)), y])))


def backward(params, cache, labels, bptt_horizon=None, out=None):
    """Exact gradients of the mean cross-entropy.

    With ``bptt_horizon`` set, gradients stop flowing backwards across every
    ``bptt_horizon``-th frame boundary.  ``out`` may hold a preallocated
    gradient dict to write into.
    """
    y = np.asarray(labels, dtype=np.int64)
    T, H = cache.gates.shape[0], params.hidden_dim
    D = params.input_dim
    if y.shape != (T,):
        raise ValueError(f"{y.size} labels for a {T}-frame cache")
    if y.min() < 0 or y.max() >= params.n_classes:
        raise ValueError("label out of range")
    dlogits = cache.probs.copy()
    dlogits[np.arange(T), y] -= 1.0
    dlogits /= T
    h_out = cache.h[1:]
    gWy = dlogits.T @ h_out
    gby = dlogits.sum(axis=0)
    dh_out = dlogits @ params.Wy
    Wh = params.W[D:]
    dz = np.empty((T, 4 * H))
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    for t in range(T - 1, -1, -1):
        g = cache.gates[t]
        i, f, o, cand = g[:H], g[H:2 * H], g[2 * H:3 * H], g[3 * H:]
        sc = cache.sc[t]
        dh = dh_out[t] + dh_next
        dc = dh * o * sc * (1.0 - sc) + dc_next
        dgate = np.concatenate([dc * cand, dc * cache.c[t], dh * sc, dc * i])
        dz[t] = dgate * g * (1.0 - g)
        if bptt_horizon and t % bptt_horizon == 0:
            dh_next = np.zeros(H)
            dc_next = np.zeros(H)
        else:
            dh_next = Wh @ dz[t]
            dc_next = dc * f
    if out is None:
        out = {name: np.empty_like(arr) for name, arr in params.tensors().items()}
    gW = out["W"]
    np.matmul(cache.x.T, dz, out=gW[:D])
    np.matmul(cache.h[:-1].T, dz, out=gW[D:])
    out["b"][...] = dz.sum(axis=0)
    out["Wy"][...] = gWy
    out["by"][...] = gby
    return out


@njit(cache=True)
def _momentum_update(w, v, g, lr, mu, decay):
    for n in range(w.size):
        vn = mu * v[n] - lr * (g[n] + decay * w[n])
        v[n] = vn
        w[n] += vn


def sgd_step(params, grads, velocity, cfg):
    """Momentum update with L2 decay on weights only; updates arrays in place.

    ``v <- momentum*v - lr*(g + decay*w)``, ``w <- w + v``.
    """
    for name in TENSOR_ORDER:
        w, g, v = getattr(params, name), grads[name], velocity[name]
        decay = cfg.weight_decay if name in WEIGHT_NAMES else 0.0
        _momentum_update(w.reshape(-1), v.reshape(-1), np.ascontiguousarray(g).reshape(-1),
                         float(cfg.learning_rate), float(cfg.momentum), float(decay))
    return params, velocity


def train(dataset, cfg=TrainConfig(), params=None, callback=None):
    """Train on ``[(features, labels), ...]``; one utterance per iteration.

    The utterance order is reshuffled at every pass with a generator seeded
    from ``cfg.seed``.  Returns ``(params, loss_trace)``.
    """
    data = list(dataset)
    if not data:
        raise ValueError("empty training set")
    for n, (x, y) in enumerate(data):
        if y is None:
            raise ValueError(f"utterance {n} has no frame labels")
    dims = {np.shape(x)[1] for x, _ in data}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dimensions {sorted(dims)}")
    if params is None:
        params = LstmParams.init(dims.pop(), cfg.hidden_dim, cfg.n_classes, cfg.seed,
                                 cfg.scaling)
    velocity = {name: np.zeros_like(arr) for name, arr in params.tensors().items()}
    grads = {name: np.empty_like(arr) for name, arr in params.tensors().items()}
    order_rng = np.random.default_rng([cfg.seed, 1])
    trace = np.empty(cfg.max_iterations)
    order = []
    for it in range(cfg.max_iterations):
        if not order:
            order = list(order_rng.permutation(len(data)))
        x, y = data[order.pop(0)]
        probs, cache = forward(params, x)
        trace[it] = loss(probs, y)
        backward(params, cache, y, cfg.bptt_horizon, out=grads)
        sgd_step(params, grads, velocity, cfg)
        if callback is not None:
            callback(it, trace[it])
    return params, trace


def frame_accuracy(params, dataset):
    """Fraction of frames whose argmax posterior (lowest index on ties) equals the label."""
    hits = total = 0
    for x, y in dataset:
        pred = np.argmax(posteriors(params, x), axis=1)
        hits += int(np.sum(pred == np.asarray(y)))
        total += len(y)
    return hits / total if total else 0.0
