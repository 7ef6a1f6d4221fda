"""Dense float64 building blocks: parameters, a per-operation gradient tape,
finite-difference checking, optimizers and the checkpoint container.

All arrays are 2-D numpy float64 matrices. A row is one sample; batched
operations stack samples along axis 0.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class TapeStateError(RuntimeError):
    pass


class DeterminismError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise DimensionError(msg)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def activation_forward(x: np.ndarray, kind: str) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "softmax":
        if x.shape[0] != 1:
            raise DimensionError(f"softmax expects a single row, got shape {x.shape}")
        return softmax(x)
    raise ValueError(f"unknown activation {kind!r}")


def affine_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    _check(x.shape[1] == W.shape[0], f"affine: x {x.shape} incompatible with W {W.shape}")
    _check(b.shape == (1, W.shape[1]), f"affine: W {W.shape} incompatible with b {b.shape}")
    return x @ W + b


class Param:
    """Named trainable matrix with a gradient buffer of the same shape."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        value = np.array(value, dtype=np.float64, ndmin=2)
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape})"


def init_uniform(rng: np.random.Generator, name: str, fan_in: int, fan_out: int) -> Param:
    bound = 1.0 / np.sqrt(fan_in)
    return Param(name, rng.uniform(-bound, bound, size=(fan_in, fan_out)))


def init_linear(rng: np.random.Generator, prefix: str, n_in: int, n_out: int) -> tuple[Param, Param]:
    W = init_uniform(rng, f"{prefix}.W", n_in, n_out)
    bound = 1.0 / np.sqrt(n_in)
    b = Param(f"{prefix}.b", rng.uniform(-bound, bound, size=(1, n_out)))
    return W, b


class Node:
    __slots__ = ("value", "grad", "needs_grad")

    def __init__(self, value: np.ndarray, needs_grad: bool):
        self.value = value
        self.grad = None
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    def _acc(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g


class _ParamNode(Node):
    """Leaf whose gradient buffer is the Param's own grad array."""

    __slots__ = ("param",)

    def __init__(self, param: Param):
        super().__init__(param.value, True)
        self.param = param
        self.grad = param.grad

    def _acc(self, g: np.ndarray) -> None:
        self.grad += g


class Tape:
    """Records operations in execution order; `backward` replays them reversed.

    Each op appends a closure that reads the output node's grad and
    accumulates into its inputs. Constant nodes never receive gradients.
    """

    def __init__(self):
        self._ops: list[Callable[[], None]] = []
        self._params: dict[int, _ParamNode] = {}
        self._nodes = 0
        self._done = False

    def __len__(self) -> int:
        return len(self._ops)

    def const(self, value) -> Node:
        return Node(np.array(value, dtype=np.float64, ndmin=2), False)

    def param(self, p: Param) -> Node:
        node = self._params.get(id(p))
        if node is None:
            node = _ParamNode(p)
            self._params[id(p)] = node
        return node

    def _out(self, value: np.ndarray, *inputs: Node) -> Node:
        return Node(value, any(n.needs_grad for n in inputs))

    # -- linear ops ---------------------------------------------------------

    def affine(self, x: Node, W: Node, b: Node | None = None) -> Node:
        xv, Wv = x.value, W.value
        _check(xv.shape[1] == Wv.shape[0], f"affine: x {xv.shape} incompatible with W {Wv.shape}")
        if b is not None:
            _check(b.value.shape == (1, Wv.shape[1]), f"affine: W {Wv.shape} incompatible with b {b.value.shape}")
            out = self._out(xv @ Wv + b.value, x, W, b)
        else:
            out = self._out(xv @ Wv, x, W)

        def back():
            g = out.grad
            if g is None:
                return
            if x.needs_grad:
                x._acc(g @ Wv.T)
            if W.needs_grad:
                W._acc(xv.T @ g)
            if b is not None and b.needs_grad:
                b._acc(g.sum(axis=0, keepdims=True))

        self._ops.append(back)
        return out

    def add(self, a: Node, b: Node) -> Node:
        _check(a.shape == b.shape, f"add: shapes {a.shape} and {b.shape} differ")
        out = self._out(a.value + b.value, a, b)

        def back():
            g = out.grad
            if g is None:
                return
            if a.needs_grad:
                a._acc(g)
            if b.needs_grad:
                b._acc(g)

        self._ops.append(back)
        return out

    def sub(self, a: Node, b: Node) -> Node:
        _check(a.shape == b.shape, f"sub: shapes {a.shape} and {b.shape} differ")
        out = self._out(a.value - b.value, a, b)

        def back():
            g = out.grad
            if g is None:
                return
            if a.needs_grad:
                a._acc(g)
            if b.needs_grad:
                b._acc(-g)

        self._ops.append(back)
        return out

    def mul(self, a: Node, b: Node) -> Node:
        _check(a.shape == b.shape, f"mul: shapes {a.shape} and {b.shape} differ")
        av, bv = a.value, b.value
        out = self._out(av * bv, a, b)

        def back():
            g = out.grad
            if g is None:
                return
            if a.needs_grad:
                a._acc(g * bv)
            if b.needs_grad:
                b._acc(g * av)

        self._ops.append(back)
        return out

    def scale(self, a: Node, k: float) -> Node:
        out = self._out(a.value * k, a)

        def back():
            if out.grad is not None and a.needs_grad:
                a._acc(out.grad * k)

        self._ops.append(back)
        return out

    # -- activations --------------------------------------------------------

    def sigmoid(self, x: Node) -> Node:
        s = sigmoid(x.value)
        out = self._out(s, x)

        def back():
            if out.grad is not None and x.needs_grad:
                x._acc(out.grad * s * (1.0 - s))

        self._ops.append(back)
        return out

    def tanh(self, x: Node) -> Node:
        t = np.tanh(x.value)
        out = self._out(t, x)

        def back():
            if out.grad is not None and x.needs_grad:
                x._acc(out.grad * (1.0 - t * t))

        self._ops.append(back)
        return out

    def softmax(self, x: Node) -> Node:
        """Row-wise softmax (each row is one sample)."""
        s = softmax(x.value)
        out = self._out(s, x)

        def back():
            g = out.grad
            if g is not None and x.needs_grad:
                x._acc(s * (g - (g * s).sum(axis=1, keepdims=True)))

        self._ops.append(back)
        return out

    def activation(self, x: Node, kind: str) -> Node:
        return getattr(self, kind)(x)

    # -- shape ops ----------------------------------------------------------

    def concat(self, parts: Sequence[Node]) -> Node:
        rows = parts[0].shape[0]
        for p in parts:
            _check(p.shape[0] == rows, f"concat: row counts {parts[0].shape} and {p.shape} differ")
        widths = [p.shape[1] for p in parts]
        out = self._out(np.concatenate([p.value for p in parts], axis=1), *parts)

        def back():
            g = out.grad
            if g is None:
                return
            o = 0
            for p, w in zip(parts, widths):
                if p.needs_grad:
                    p._acc(g[:, o:o + w])
                o += w

        self._ops.append(back)
        return out

    def slice(self, x: Node, start: int, stop: int) -> Node:
        _check(0 <= start < stop <= x.shape[1], f"slice [{start}:{stop}] out of range for {x.shape}")
        out = self._out(x.value[:, start:stop], x)

        def back():
            g = out.grad
            if g is None or not x.needs_grad:
                return
            full = np.zeros_like(x.value)
            full[:, start:stop] = g
            x._acc(full)

        self._ops.append(back)
        return out

    def expand(self, a: Node, widths: Sequence[int]) -> Node:
        """Repeat column k of `a` widths[k] times (block broadcast)."""
        _check(a.shape[1] == len(widths), f"expand: {a.shape} needs {len(widths)} columns")
        widths = np.asarray(widths)
        offsets = np.concatenate([[0], np.cumsum(widths)[:-1]])
        out = self._out(np.repeat(a.value, widths, axis=1), a)

        def back():
            g = out.grad
            if g is not None and a.needs_grad:
                a._acc(np.add.reduceat(g, offsets, axis=1))

        self._ops.append(back)
        return out

    def block_scale(self, x: Node, a: Node, widths: Sequence[int]) -> Node:
        """Multiply every column of block k of `x` by a[:, k]; fused expand+mul."""
        widths = np.asarray(widths)
        _check(a.shape[1] == len(widths) and int(widths.sum()) == x.shape[1] and a.shape[0] == x.shape[0],
               f"block_scale: x {x.shape} incompatible with weights {a.shape} over blocks {widths.tolist()}")
        offsets = np.concatenate([[0], np.cumsum(widths)[:-1]])
        xv, av = x.value, a.value
        arep = np.repeat(av, widths, axis=1)
        out = self._out(xv * arep, x, a)

        def back():
            g = out.grad
            if g is None:
                return
            if x.needs_grad:
                x._acc(g * arep)
            if a.needs_grad:
                a._acc(np.add.reduceat(g * xv, offsets, axis=1))

        self._ops.append(back)
        return out

    def lstm_cell(self, z: Node, c_prev: Node) -> tuple[Node, Node]:
        """Gate nonlinearity of a standard LSTM cell.

        `z` holds pre-activations ordered [input, forget, output, candidate].
        Returns (h, c). Equivalent to the slice/sigmoid/tanh/mul/add chain.
        """
        n = c_prev.shape[1]
        _check(z.shape == (c_prev.shape[0], 4 * n), f"lstm_cell: z {z.shape} incompatible with c {c_prev.shape}")
        zv, cp = z.value, c_prev.value
        s = sigmoid(zv[:, :3 * n])
        i, f, o = s[:, :n], s[:, n:2 * n], s[:, 2 * n:]
        g = np.tanh(zv[:, 3 * n:])
        c = f * cp + i * g
        tc = np.tanh(c)
        h = o * tc
        needs = z.needs_grad or c_prev.needs_grad
        h_node = Node(h, needs)
        c_node = Node(c, needs)

        def back():
            gh, gc = h_node.grad, c_node.grad
            if gh is None and gc is None:
                return
            dc = np.zeros_like(c) if gc is None else gc.copy()
            if gh is not None:
                dc += gh * o * (1.0 - tc * tc)
            if z.needs_grad:
                dz = np.empty_like(zv)
                dz[:, :n] = dc * g * i * (1.0 - i)
                dz[:, n:2 * n] = dc * cp * f * (1.0 - f)
                dz[:, 2 * n:3 * n] = (gh * tc * o * (1.0 - o)) if gh is not None else 0.0
                dz[:, 3 * n:] = dc * i * (1.0 - g * g)
                z._acc(dz)
            if c_prev.needs_grad:
                c_prev._acc(dc * f)

        self._ops.append(back)
        return h_node, c_node

    def rows(self, x: Node, start: int, stop: int) -> Node:
        _check(0 <= start < stop <= x.shape[0], f"rows [{start}:{stop}] out of range for {x.shape}")
        out = self._out(x.value[start:stop], x)

        def back():
            g = out.grad
            if g is None or not x.needs_grad:
                return
            full = np.zeros_like(x.value)
            full[start:stop] = g
            x._acc(full)

        self._ops.append(back)
        return out

    def stack_rows(self, parts: Sequence[Node]) -> Node:
        """Vertically stack equal-width nodes into one (sum of rows) x n node."""
        cols = parts[0].shape[1]
        for p in parts:
            _check(p.shape[1] == cols, f"stack_rows: widths {parts[0].shape} and {p.shape} differ")
        sizes = [p.shape[0] for p in parts]
        out = self._out(np.concatenate([p.value for p in parts], axis=0), *parts)

        def back():
            g = out.grad
            if g is None:
                return
            o = 0
            for p, r in zip(parts, sizes):
                if p.needs_grad:
                    p._acc(g[o:o + r])
                o += r

        self._ops.append(back)
        return out

    # -- reductions ---------------------------------------------------------

    def weighted_sse(self, pred: Node, target: np.ndarray, weights: np.ndarray,
                     row_mask: np.ndarray | None = None) -> Node:
        """sum_rows mask_r * sum_cols w_c * (pred - target)^2 as a 1x1 node."""
        target = np.asarray(target, dtype=np.float64)
        _check(pred.shape == target.shape, f"weighted_sse: pred {pred.shape} vs target {target.shape}")
        w = np.asarray(weights, dtype=np.float64).reshape(1, -1)
        _check(w.shape[1] == pred.shape[1], f"weighted_sse: weights {w.shape} vs pred {pred.shape}")
        m = np.ones((pred.shape[0], 1)) if row_mask is None else np.asarray(row_mask, dtype=np.float64).reshape(-1, 1)
        _check(m.shape[0] == pred.shape[0], f"weighted_sse: mask {m.shape} vs pred {pred.shape}")
        diff = pred.value - target
        wm = m * w
        out = self._out(np.array([[float(np.sum(wm * diff * diff))]]), pred)

        def back():
            if out.grad is not None and pred.needs_grad:
                pred._acc(2.0 * out.grad[0, 0] * wm * diff)

        self._ops.append(back)
        return out

    def sq_dist(self, a: Node, b: Node, row_mask: np.ndarray | None = None) -> Node:
        """sum over masked rows of ||a_r - b_r||^2 as a 1x1 node."""
        _check(a.shape == b.shape, f"sq_dist: shapes {a.shape} and {b.shape} differ")
        m = np.ones((a.shape[0], 1)) if row_mask is None else np.asarray(row_mask, dtype=np.float64).reshape(-1, 1)
        d = a.value - b.value
        out = self._out(np.array([[float(np.sum(m * d * d))]]), a, b)

        def back():
            if out.grad is None:
                return
            g = 2.0 * out.grad[0, 0] * m * d
            if a.needs_grad:
                a._acc(g)
            if b.needs_grad:
                b._acc(-g)

        self._ops.append(back)
        return out

    def total(self, parts: Sequence[Node]) -> Node:
        for p in parts:
            _check(p.shape == (1, 1), f"total: expects 1x1 nodes, got {p.shape}")
        out = self._out(np.array([[float(sum(p.value[0, 0] for p in parts))]]), *parts)

        def back():
            if out.grad is None:
                return
            for p in parts:
                if p.needs_grad:
                    p._acc(out.grad)

        self._ops.append(back)
        return out

    # -- driver -------------------------------------------------------------

    def backward(self, loss: Node, seed_grad: float = 1.0) -> None:
        """Accumulate d(seed_grad * loss)/d(param) into every watched Param."""
        if not self._ops:
            raise TapeStateError("backward called before any forward operation was recorded")
        if self._done:
            raise TapeStateError("backward already ran on this tape; record a new forward pass")
        if loss.shape != (1, 1):
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.array([[float(seed_grad)]])
        for op in reversed(self._ops):
            op()
        self._done = True


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, int]
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(loss_fn: Callable[[Tape], Node], params: Iterable[Param], epsilon: float = 1e-5,
               tolerance: float = 1e-4, floor: float | None = None, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    `loss_fn` builds the forward pass on the tape it is handed and returns the
    scalar loss node. The relative error of each entry is
    |analytic - numeric| / max(|analytic|, |numeric|, floor). By default the
    floor is the resolution of central differences at this loss scale,
    |loss| * machine_eps / (epsilon * tolerance), but never below 1e-6:
    gradients smaller than that cannot be confirmed to `tolerance`. With
    `max_entries`, a random subset of entries per parameter is probed.
    """
    if not 1e-6 <= epsilon <= 1e-4:
        raise ValueError(f"epsilon {epsilon} outside [1e-6, 1e-4]")
    params = list(params)

    def value() -> float:
        return float(loss_fn(Tape()).value[0, 0])

    base = value()
    if value() != base:
        raise DeterminismError("loss_fn returned different values for identical parameters")
    if floor is None:
        floor = max(1e-6, abs(base) * np.finfo(np.float64).eps / (epsilon * tolerance))

    for p in params:
        p.zero_grad()
    tape = Tape()
    loss = loss_fn(tape)
    if float(loss.value[0, 0]) != base:
        raise DeterminismError("loss_fn is not reproducible between evaluations")
    tape.backward(loss)

    worst = (0.0, "", (0, 0))
    n = 0
    for p in params:
        analytic = p.grad.copy()
        idx = list(np.ndindex(*p.value.shape))
        if max_entries is not None and len(idx) > max_entries:
            r = rng if rng is not None else np.random.default_rng(0)
            pick = r.choice(len(idx), size=max_entries, replace=False)
            idx = [idx[i] for i in sorted(pick)]
        for ij in idx:
            old = p.value[ij]
            p.value[ij] = old + epsilon
            up = value()
            p.value[ij] = old - epsilon
            down = value()
            p.value[ij] = old
            numeric = (up - down) / (2.0 * epsilon)
            a = analytic[ij]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            n += 1
            if rel > worst[0]:
                worst = (rel, p.name, ij)
    for p in params:
        p.zero_grad()
    return GradCheckReport(worst[0], worst[1], worst[2], n, tolerance)


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def optimizer_step(params: Sequence[Param], state: OptimizerState) -> None:
    """Apply one update in place, advance the step counter and zero grads."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {p.name!r}")
    state.step_count += 1
    lr = state.learning_rate
    if state.kind == "sgd":
        for p in params:
            p.value -= lr * p.grad
            p.zero_grad()
        return
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step_count
    c2 = 1.0 - b2 ** state.step_count
    for p in params:
        mv = state.moments.get(p.name)
        if mv is None:
            mv = (np.zeros_like(p.value), np.zeros_like(p.value))
            state.moments[p.name] = mv
        m, v = mv
        if m.shape != p.value.shape:
            raise DimensionError(f"moment shape {m.shape} does not match {p.name} {p.value.shape}")
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * p.grad * p.grad
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.zero_grad()


def snapshot(params: Sequence[Param]) -> dict[str, np.ndarray]:
    return {p.name: p.value.copy() for p in params}


def restore(params: Sequence[Param], values: dict[str, np.ndarray]) -> None:
    for p in params:
        p.value[...] = values[p.name]


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout (all integers little-endian):
#   8 bytes  magic b"AELSTMCK"
#   u32      format version
#   u64      header length H
#   H bytes  UTF-8 JSON header
#   payload  concatenated little-endian float64 arrays, row-major
# The header lists {"name", "shape", "offset", "count"} for every array,
# the config hash, free-form metadata and optimizer scalars. Arrays named
# "opt.m/<param>" and "opt.v/<param>" carry Adam moments.

MAGIC = b"AELSTMCK"
FORMAT_VERSION = 1


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    config_hash: str = ""
    meta: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)

    @classmethod
    def from_params(cls, params: Sequence[Param], config_hash: str = "", meta: dict | None = None,
                    opt: OptimizerState | None = None) -> "Checkpoint":
        arrays = {p.name: p.value.copy() for p in params}
        optd = {}
        if opt is not None:
            optd = {"kind": opt.kind, "learning_rate": opt.learning_rate, "beta1": opt.beta1,
                    "beta2": opt.beta2, "eps": opt.eps, "step_count": opt.step_count}
            for name, (m, v) in opt.moments.items():
                arrays[f"opt.m/{name}"] = m.copy()
                arrays[f"opt.v/{name}"] = v.copy()
        return cls(arrays, config_hash, dict(meta or {}), optd)

    def load_into(self, params: Sequence[Param]) -> None:
        for p in params:
            if p.name not in self.arrays:
                raise KeyError(f"checkpoint has no array {p.name!r}")
            a = self.arrays[p.name]
            if a.shape != p.value.shape:
                raise DimensionError(f"checkpoint {p.name} shape {a.shape} vs model {p.value.shape}")
            p.value[...] = a

    def optimizer_state(self) -> OptimizerState | None:
        if not self.optimizer:
            return None
        o = self.optimizer
        st = OptimizerState(o["learning_rate"], o["kind"], o["beta1"], o["beta2"], o["eps"], o["step_count"])
        for k, m in self.arrays.items():
            if k.startswith("opt.m/"):
                name = k[len("opt.m/"):]
                st.moments[name] = (m.copy(), self.arrays[f"opt.v/{name}"].copy())
        return st

    def save(self, path: str | Path) -> None:
        entries, chunks, offset = [], [], 0
        for name in sorted(self.arrays):
            a = np.ascontiguousarray(self.arrays[name], dtype="<f8")
            entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
            chunks.append(a.tobytes())
            offset += a.size * 8
        header = json.dumps({"version": FORMAT_VERSION, "config_hash": self.config_hash,
                             "meta": self.meta, "optimizer": self.optimizer, "arrays": entries},
                            sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
            f.write(header)
            for c in chunks:
                f.write(c)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if raw[:8] != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<IQ", raw[8:20])
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(raw[20:20 + hlen])
        base = 20 + hlen
        arrays = {}
        for e in header["arrays"]:
            start = base + e["offset"]
            a = np.frombuffer(raw, dtype="<f8", count=e["count"], offset=start)
            arrays[e["name"]] = a.reshape(e["shape"]).astype(np.float64)
        return cls(arrays, header["config_hash"], header["meta"], header["optimizer"])
