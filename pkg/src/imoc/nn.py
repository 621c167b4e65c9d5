"""Small reverse-mode differentiation over a closed primitive set, the shared
encoder + heads network, RMSProp/Adam, orthogonal init and checkpoints.

Everything is float64 numpy. A ``Tape`` records the ops applied to parameter
nodes; ``Tape.backward`` walks them in reverse. Supported primitives: affine
maps (dense or one-hot input), rectifier, log-softmax/softmax, softmax
cross-entropy, categorical and Bernoulli entropy, logistic, log, gather,
concatenation, elementwise products/sums with constants, square, and
stop-gradient.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class NonFiniteError(FloatingPointError):
    pass


class Node:
    __slots__ = ("value", "grad", "backward_fn", "tape")

    def __init__(self, value, backward_fn=None, tape=None):
        self.value = value
        self.grad = None
        self.backward_fn = backward_fn
        self.tape = tape

    @property
    def needs_grad(self) -> bool:
        return self.tape is not None

    @property
    def shape(self):
        return np.shape(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(other, -1.0) if isinstance(other, Node) else -np.asarray(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)


class Tape:
    """Records differentiable ops over a parameter dict."""

    def __init__(self, params: dict, record: bool = True):
        self.params = params
        self.record = record
        self.nodes: list[Node] = []
        self.param_nodes: dict[str, Node] = {}

    def param(self, name: str) -> Node:
        node = self.param_nodes.get(name)
        if node is None:
            node = Node(self.params[name], tape=self if self.record else None)
            self.param_nodes[name] = node
        return node

    def backward(self, loss: Node, buffer: Optional[dict] = None) -> dict:
        """Accumulate d(loss)/d(params) into ``buffer`` (created if None)."""
        if buffer is None:
            buffer = {k: np.zeros_like(v) for k, v in self.params.items()}
        if not loss.needs_grad:
            return buffer
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is not None and node.backward_fn is not None:
                node.backward_fn(node.grad)
        for name, node in self.param_nodes.items():
            if node.grad is not None:
                buffer[name] += node.grad
        return buffer


def _val(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _acc(node, g):
    if isinstance(node, Node) and node.needs_grad:
        node.grad = g if node.grad is None else node.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(i, keepdims=True)
    return g


def _make(value, parents, backward_fn) -> Node:
    for p in parents:
        if isinstance(p, Node) and p.tape is not None:
            node = Node(value, backward_fn, p.tape)
            p.tape.nodes.append(node)
            return node
    return Node(value)


# ------------------------------------------------------------------ primitives

def affine(x, w, b):
    xv, wv, bv = _val(x), _val(w), _val(b)
    out = xv @ wv + bv

    def bw(g):
        _acc(x, g @ wv.T)
        _acc(w, xv.T @ g)
        _acc(b, g.sum(0))
    return _make(out, (x, w, b), bw)


def onehot_affine(index: np.ndarray, w, b):
    """Affine map applied to one-hot rows given by integer ``index``."""
    wv = _val(w)
    out = wv[index] + _val(b)

    def bw(g):
        if isinstance(w, Node) and w.needs_grad:
            gw = np.zeros_like(wv)
            np.add.at(gw, index, g)
            _acc(w, gw)
        _acc(b, g.sum(0))
    return _make(out, (w, b), bw)


def relu(x):
    xv = _val(x)
    mask = xv > 0

    def bw(g):
        _acc(x, g * mask)
    return _make(xv * mask, (x,), bw)


def log_softmax(x):
    xv = _val(x)
    z = xv - xv.max(-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(-1, keepdims=True))
    p = np.exp(out)

    def bw(g):
        _acc(x, g - p * g.sum(-1, keepdims=True))
    return _make(out, (x,), bw)


def softmax(x):
    xv = _val(x)
    z = np.exp(xv - xv.max(-1, keepdims=True))
    p = z / z.sum(-1, keepdims=True)

    def bw(g):
        _acc(x, p * (g - (g * p).sum(-1, keepdims=True)))
    return _make(p, (x,), bw)


def softmax_cross_entropy(logits, labels: np.ndarray):
    """Per-row -log softmax(logits)[label]."""
    xv = _val(logits)
    z = xv - xv.max(-1, keepdims=True)
    lse = np.log(np.exp(z).sum(-1))
    rows = np.arange(len(labels))
    out = lse - z[rows, labels]
    p = np.exp(z - lse[:, None])

    def bw(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        _acc(logits, d * g[:, None])
    return _make(out, (logits,), bw)


def entropy(logits):
    """Entropy of the categorical distribution softmax(logits), over the last axis."""
    xv = _val(logits)
    z = xv - xv.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    p = np.exp(logp)
    h = -(p * logp).sum(-1)

    def bw(g):
        _acc(logits, -p * (logp + h[..., None]) * g[..., None])
    return _make(h, (logits,), bw)


def logistic(x):
    xv = _val(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * xv))

    def bw(g):
        _acc(x, g * s * (1.0 - s))
    return _make(s, (x,), bw)


def bernoulli_entropy(logit):
    """Entropy of Bernoulli(logistic(logit))."""
    lv = _val(logit)
    s = 0.5 * (1.0 + np.tanh(0.5 * lv))
    # -s log s - (1-s) log(1-s) == softplus(l) - s*l
    h = np.logaddexp(0.0, lv) - s * lv

    def bw(g):
        _acc(logit, -g * s * (1.0 - s) * lv)
    return _make(h, (logit,), bw)


def log(x, floor: float = 0.0):
    xv = _val(x)
    safe = np.maximum(xv, floor) if floor > 0 else xv
    out = np.log(safe)

    def bw(g):
        _acc(x, g / safe * (xv >= floor))
    return _make(out, (x,), bw)


def stop_gradient(x):
    return Node(np.array(_val(x)))


def add(a, b):
    av, bv = _val(a), _val(b)

    def bw(g):
        if isinstance(a, Node):
            _acc(a, _unbroadcast(g, np.shape(av)))
        if isinstance(b, Node):
            _acc(b, _unbroadcast(g, np.shape(bv)))
    return _make(av + bv, (a, b), bw)


def mul(a, b):
    av, bv = _val(a), _val(b)

    def bw(g):
        if isinstance(a, Node):
            _acc(a, _unbroadcast(g * bv, np.shape(av)))
        if isinstance(b, Node):
            _acc(b, _unbroadcast(g * av, np.shape(bv)))
    return _make(av * bv, (a, b), bw)


def scale(x, c: float):
    def bw(g):
        _acc(x, g * c)
    return _make(_val(x) * c, (x,), bw)


def square(x):
    xv = _val(x)

    def bw(g):
        _acc(x, 2.0 * xv * g)
    return _make(xv * xv, (x,), bw)


def total(x):
    xv = _val(x)

    def bw(g):
        _acc(x, np.broadcast_to(g, xv.shape).astype(np.float64))
    return _make(np.asarray(xv.sum()), (x,), bw)


def mean(x):
    n = max(np.size(_val(x)), 1)
    return scale(total(x), 1.0 / n)


def weighted_sum(x, weights: np.ndarray, axis: int):
    """sum(x * weights, axis) with constant weights."""
    xv = _val(x)

    def bw(g):
        _acc(x, np.expand_dims(g, axis) * weights)
    return _make((xv * weights).sum(axis), (x,), bw)


def gather(x, index: np.ndarray):
    """x[i, index[i]] along the second axis (keeps trailing axes)."""
    xv = _val(x)
    rows = np.arange(xv.shape[0])

    def bw(g):
        d = np.zeros_like(xv)
        np.add.at(d, (rows, index), g)
        _acc(x, d)
    return _make(xv[rows, index], (x,), bw)


def reshape(x, shape):
    xv = _val(x)

    def bw(g):
        _acc(x, g.reshape(xv.shape))
    return _make(xv.reshape(shape), (x,), bw)


def concat(xs, axis: int = -1):
    vals = [_val(x) for x in xs]
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, splits, axis=axis)):
            _acc(x, part)
    return _make(np.concatenate(vals, axis=axis), tuple(xs), bw)


# --------------------------------------------------------------------- network

@dataclass
class NetworkSpec:
    """One-hot state -> dense(hidden) -> ReLU encoder feeding linear heads.

    ``split_encoder`` gives beta / p_hat / mu_hat their own encoder.
    """
    n_states: int
    n_actions: int
    n_options: int = 4
    hidden: int = 128
    heads: tuple = ("policy", "q", "beta", "phat", "muhat")
    split_encoder: bool = False

    def head_shapes(self) -> dict:
        o, a, h = self.n_options, self.n_actions, self.hidden
        widths = {"policy": (h, o * a), "q": (h, o), "beta": (h, o),
                  "phat": (2 * h, o), "muhat": (h, o)}
        return {k: widths[k] for k in self.heads}

    def param_shapes(self) -> dict:
        shapes = {"enc.W": (self.n_states, self.hidden), "enc.b": (self.hidden,)}
        if self.split_encoder:
            shapes.update({"enc2.W": (self.n_states, self.hidden), "enc2.b": (self.hidden,)})
        for name, (fan_in, fan_out) in self.head_shapes().items():
            shapes[f"{name}.W"] = (fan_in, fan_out)
            shapes[f"{name}.b"] = (fan_out,)
        return shapes

    def encoder_for(self, head: str) -> str:
        if self.split_encoder and head in ("beta", "phat", "muhat"):
            return "enc2"
        return "enc"

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["heads"] = list(self.heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["heads"] = tuple(d["heads"])
        return cls(**d)


def orthogonal(shape, rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_orthogonal(spec: NetworkSpec, rng: np.random.Generator, gain: float = 1.0) -> dict:
    params = {}
    for name, shape in spec.param_shapes().items():
        if len(shape) == 2:
            params[name] = orthogonal(shape, rng, gain)
        else:
            params[name] = np.zeros(shape)
    return params


class Net:
    """Binds a spec and parameter dict to a tape for building losses."""

    def __init__(self, spec: NetworkSpec, params: dict, record: bool = True):
        self.spec = spec
        self.tape = Tape(params, record)
        self._features: dict = {}

    def p(self, name: str):
        return self.tape.param(name)

    def encode(self, states: np.ndarray, enc: str = "enc"):
        states = np.asarray(states)
        if states.size and (states.min() < 0 or states.max() >= self.spec.n_states):
            raise IndexError(f"state index out of range [0, {self.spec.n_states})")
        key = (enc, states.tobytes(), states.shape)
        if key not in self._features:
            self._features[key] = relu(onehot_affine(states, self.p(f"{enc}.W"), self.p(f"{enc}.b")))
        return self._features[key]

    def head(self, name: str, states: np.ndarray):
        feat = self.encode(states, self.spec.encoder_for(name))
        return affine(feat, self.p(f"{name}.W"), self.p(f"{name}.b"))

    def policy_logits(self, states):
        out = self.head("policy", states)
        return reshape(out, (len(states), self.spec.n_options, self.spec.n_actions))

    def phat_logits(self, starts, finals):
        enc = self.spec.encoder_for("phat")
        feat = concat([self.encode(starts, enc), self.encode(finals, enc)], axis=-1)
        return affine(feat, self.p("phat.W"), self.p("phat.b"))

    def backward(self, loss, buffer: Optional[dict] = None) -> dict:
        return self.tape.backward(loss, buffer)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(-1, keepdims=True))
    return z / z.sum(-1, keepdims=True)


def _features(spec: NetworkSpec, params: dict, states: np.ndarray, head: str) -> np.ndarray:
    enc = spec.encoder_for(head)
    return np.maximum(params[f"{enc}.W"][states] + params[f"{enc}.b"], 0.0)


def forward(spec: NetworkSpec, params: dict, states) -> dict:
    """Head outputs (no gradient) for a batch of state indices.

    Returns ``policy`` (B, O, A) probabilities, ``policy_logits``, ``q`` (B, O),
    ``beta_logits`` and ``beta`` (B, O), and ``muhat`` (B, O) probabilities when
    the spec has those heads.
    """
    states = np.asarray(states, dtype=np.int64)
    if states.size == 0:
        raise ValueError("empty state batch")
    if states.min() < 0 or states.max() >= spec.n_states:
        raise IndexError(f"state index out of range [0, {spec.n_states})")
    feats = {}

    def head(name):
        enc = spec.encoder_for(name)
        if enc not in feats:
            feats[enc] = _features(spec, params, states, name)
        return feats[enc] @ params[f"{name}.W"] + params[f"{name}.b"]

    out = {}
    if "policy" in spec.heads:
        logits = head("policy").reshape(len(states), spec.n_options, spec.n_actions)
        out["policy_logits"] = logits
        out["policy"] = _softmax(logits)
    if "q" in spec.heads:
        out["q"] = head("q")
    if "beta" in spec.heads:
        lb = head("beta")
        out["beta_logits"] = lb
        out["beta"] = 0.5 * (1.0 + np.tanh(0.5 * lb))
    if "muhat" in spec.heads:
        out["muhat"] = _softmax(head("muhat"))
    return out


def phat_probs(spec: NetworkSpec, params: dict, starts, finals) -> np.ndarray:
    starts, finals = np.asarray(starts, dtype=np.int64), np.asarray(finals, dtype=np.int64)
    feat = np.concatenate([_features(spec, params, starts, "phat"),
                           _features(spec, params, finals, "phat")], axis=-1)
    return _softmax(feat @ params["phat.W"] + params["phat.b"])


def accumulate_gradient(spec: NetworkSpec, params: dict, loss_fn: Callable[[Net], Node],
                        buffer: dict, name: str = "loss") -> float:
    """Run ``loss_fn`` on a fresh tape, add its gradient to ``buffer``, return the loss."""
    net = Net(spec, params)
    loss = loss_fn(net)
    value = float(_val(loss))
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite {name}: {value}")
    grads = net.backward(loss, {k: np.zeros_like(v) for k, v in params.items()})
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k} from {name}")
        buffer[k] += g
    return value


# ------------------------------------------------------------------ optimizers

@dataclass
class OptimizerState:
    kind: str = "rmsprop"
    lr: float = 2e-3
    alpha: float = 0.99  # rmsprop smoothing
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    moments: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("rmsprop", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    """Rescale ``grads`` in place so their global norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_norm(grads)
    if not np.isfinite(norm):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        raise NonFiniteError(f"non-finite gradient in {bad}")
    if max_norm is not None and norm > max_norm:
        c = max_norm / norm
        for g in grads.values():
            g *= c
    return norm


def apply_gradients(params: dict, buffer: dict, opt: OptimizerState,
                    max_global_norm: Optional[float] = None) -> float:
    """Clip, take one optimizer step in place, zero the buffer. Returns pre-clip norm."""
    norm = clip_by_global_norm(buffer, max_global_norm)
    opt.step += 1
    for k, g in buffer.items():
        p = params[k]
        if opt.kind == "rmsprop":
            v = opt.moments.setdefault(k, np.zeros_like(p))
            v *= opt.alpha
            v += (1.0 - opt.alpha) * g * g
            p -= opt.lr * g / (np.sqrt(v) + opt.eps)
        else:
            m = opt.moments.setdefault(k, np.zeros_like(p))
            v = opt.moments.setdefault(k + "#v", np.zeros_like(p))
            b1, b2 = opt.betas
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / (1.0 - b1 ** opt.step)
            vhat = v / (1.0 - b2 ** opt.step)
            p -= opt.lr * mhat / (np.sqrt(vhat) + opt.eps)
        g[...] = 0.0
    return norm


# ----------------------------------------------------------------- checkpoints

MAGIC = b"IMOC-CKPT v1\n"


def save_arrays(path, arrays: dict, meta: Optional[dict] = None) -> None:
    """Deterministic binary dump: magic, JSON header line, raw C-order blocks."""
    header = {"meta": meta or {}, "arrays": []}
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        raw = a.tobytes()
        header["arrays"].append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                                 "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    for raw in blobs:
        buf.write(raw)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_arrays(path) -> tuple[dict, dict]:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path} is not an IMOC checkpoint")
    rest = data[len(MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    body = rest[nl + 1:]
    arrays = {}
    for e in header["arrays"]:
        raw = body[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["meta"]
