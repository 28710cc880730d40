"""A small reverse-mode differentiation tape over float64 numpy arrays.

Only the handful of primitives the tracker needs are provided.  Every
primitive checks shapes when it is recorded; nothing is broadcast silently.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DTYPE = np.float64
CHECKPOINT_MAGIC = b"LTCK"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class TapeUsageError(RuntimeError):
    pass


class Node:
    __slots__ = ("value", "parents", "backward", "needs_grad", "param", "index")

    def __init__(self, value, parents=(), backward=None, needs_grad=False, param=None):
        self.value = value
        self.parents = parents
        self.backward = backward
        self.needs_grad = needs_grad
        self.param = param
        self.index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return np.shape(self.value)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 0:
        return float(_sigmoid(x.reshape(1))[0])
    return _sigmoid(x)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


class Tape:
    """Records primitive applications for one forward pass.

    Gradients of parameters reachable from the loss are added into the
    bound ``ParamStore`` by :meth:`backward`.
    """

    def __init__(self, store: "ParamStore | None" = None):
        self.store = store
        self.nodes: list[Node] = []
        self._params: dict[str, Node] = {}
        self._done = False

    def _add(self, value, parents, backward) -> Node:
        if self._done:
            raise TapeUsageError("tape already consumed by backward()")
        needs = any(p.needs_grad for p in parents)
        node = Node(value, tuple(parents), backward if needs else None, needs)
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        node = Node(np.asarray(value, dtype=DTYPE))
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def param(self, name: str) -> Node:
        if self.store is None:
            raise TapeUsageError("tape has no parameter store")
        node = self._params.get(name)
        if node is None:
            node = Node(self.store.params[name], needs_grad=True, param=name)
            node.index = len(self.nodes)
            self.nodes.append(node)
            self._params[name] = node
        return node

    # primitives

    def affine(self, x: Node, w: Node, b: Node | None = None) -> Node:
        """x @ w + b for x of shape (d,) or (n, d) and w of shape (d, m)."""
        _require(w.value.ndim == 2, f"affine weight must be 2-D, got {w.shape}")
        _require(x.value.ndim in (1, 2), f"affine input must be 1-D or 2-D, got {x.shape}")
        _require(x.shape[-1] == w.shape[0], f"affine shapes {x.shape} and {w.shape} do not align")
        if b is not None:
            _require(b.shape == (w.shape[1],), f"affine bias {b.shape} does not match {w.shape}")
        out = x.value @ w.value
        if b is not None:
            out = out + b.value
        parents = (x, w) if b is None else (x, w, b)

        def back(g, grad):
            if x.needs_grad:
                grad(x)[...] += g @ w.value.T
            if w.needs_grad:
                if x.value.ndim == 1:
                    grad(w)[...] += np.outer(x.value, g)
                else:
                    grad(w)[...] += x.value.T @ g
            if b is not None and b.needs_grad:
                grad(b)[...] += g if g.ndim == 1 else g.sum(axis=0)

        return self._add(out, parents, back)

    def embed(self, table: Node, ids: Sequence[int] | np.ndarray) -> Node:
        """Rows ``table[ids]``, shape (n, d)."""
        ids = np.asarray(ids, dtype=np.int64)
        _require(table.value.ndim == 2, "embedding table must be 2-D")
        _require(ids.ndim == 1, "embedding ids must be 1-D")
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise IndexError(f"token id out of range [0, {table.shape[0]})")

        def back(g, grad):
            np.add.at(grad(table), ids, g)

        return self._add(table.value[ids], (table,), back)

    def relu(self, x: Node) -> Node:
        mask = x.value > 0

        def back(g, grad):
            grad(x)[...] += g * mask

        return self._add(np.where(mask, x.value, 0.0), (x,), back)

    def tanh(self, x: Node) -> Node:
        y = np.tanh(x.value)

        def back(g, grad):
            grad(x)[...] += g * (1.0 - y * y)

        return self._add(y, (x,), back)

    def sigmoid(self, x: Node) -> Node:
        y = _sigmoid(np.asarray(x.value, dtype=DTYPE))

        def back(g, grad):
            grad(x)[...] += g * y * (1.0 - y)

        return self._add(y, (x,), back)

    def mul(self, a: Node, b: Node) -> Node:
        _require(a.shape == b.shape, f"mul shapes {a.shape} and {b.shape} differ")

        def back(g, grad):
            if a.needs_grad:
                grad(a)[...] += g * b.value
            if b.needs_grad:
                grad(b)[...] += g * a.value

        return self._add(a.value * b.value, (a, b), back)

    def add(self, a: Node, b: Node) -> Node:
        _require(a.shape == b.shape, f"add shapes {a.shape} and {b.shape} differ")

        def back(g, grad):
            if a.needs_grad:
                grad(a)[...] += g
            if b.needs_grad:
                grad(b)[...] += g

        return self._add(a.value + b.value, (a, b), back)

    def concat(self, a: Node, b: Node) -> Node:
        """Concatenate along the last axis."""
        _require(a.value.ndim == b.value.ndim, "concat operands differ in rank")
        _require(a.shape[:-1] == b.shape[:-1], f"concat shapes {a.shape} and {b.shape} differ")
        split = a.shape[-1]

        def back(g, grad):
            if a.needs_grad:
                grad(a)[...] += g[..., :split]
            if b.needs_grad:
                grad(b)[...] += g[..., split:]

        return self._add(np.concatenate([a.value, b.value], axis=-1), (a, b), back)

    def slice(self, x: Node, start: int, stop: int) -> Node:
        """Slice ``x[..., start:stop]``."""
        _require(0 <= start < stop <= x.shape[-1], f"slice [{start}:{stop}] out of bounds for {x.shape}")

        def back(g, grad):
            grad(x)[..., start:stop] += g

        return self._add(x.value[..., start:stop], (x,), back)

    def row(self, x: Node, t: int) -> Node:
        _require(x.value.ndim == 2 and 0 <= t < x.shape[0], f"row {t} out of bounds for {x.shape}")

        def back(g, grad):
            grad(x)[t] += g

        return self._add(x.value[t], (x,), back)

    def stack(self, rows: Sequence[Node]) -> Node:
        _require(len(rows) > 0, "stack of nothing")
        shape = rows[0].shape
        _require(all(r.shape == shape for r in rows), "stack rows differ in shape")

        def back(g, grad):
            for k, r in enumerate(rows):
                if r.needs_grad:
                    grad(r)[...] += g[k]

        return self._add(np.stack([r.value for r in rows]), tuple(rows), back)

    def softmax_cross_entropy(self, logits: Node, targets: Sequence[int] | np.ndarray) -> tuple[Node, np.ndarray]:
        """Summed cross-entropy of rows of ``logits`` against ``targets``.

        Returns the scalar loss node and the softmax probabilities.
        """
        z = np.atleast_2d(logits.value)
        targets = np.asarray(targets, dtype=np.int64).reshape(-1)
        _require(z.shape[0] == targets.shape[0], f"{z.shape[0]} logit rows for {targets.shape[0]} targets")
        if targets.size and (targets.min() < 0 or targets.max() >= z.shape[1]):
            raise IndexError("target class out of range")
        logp = log_softmax(z)
        rows = np.arange(targets.shape[0])
        loss = -float(np.sum(logp[rows, targets]))
        probs = np.exp(logp)

        def back(g, grad):
            d = probs.copy()
            d[rows, targets] -= 1.0
            grad(logits)[...] += float(g) * d.reshape(logits.shape)

        out = probs if logits.value.ndim == 2 else probs[0]
        return self._add(np.asarray(loss), (logits,), back), out

    def backward(self, loss: Node, seed: float = 1.0) -> None:
        """Accumulate d(seed * loss)/d(param) into the bound store's grads."""
        if not self.nodes or loss.index < 0 or loss.index >= len(self.nodes) or self.nodes[loss.index] is not loss:
            raise TapeUsageError("backward() on a node that was not recorded by this tape")
        if self._done:
            raise TapeUsageError("backward() called twice on one tape")
        if np.size(loss.value) != 1:
            raise TapeUsageError("backward() needs a scalar loss")
        self._done = True
        if not loss.needs_grad:
            return
        grads: dict[int, np.ndarray] = {loss.index: np.asarray(seed, dtype=DTYPE)}

        def grad(node: Node) -> np.ndarray:
            buf = grads.get(node.index)
            if buf is None:
                buf = np.zeros(np.shape(node.value), dtype=DTYPE)
                grads[node.index] = buf
            return buf

        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads.pop(node.index, None)
            if g is None or not node.needs_grad:
                continue
            if node.param is not None:
                self.store.grads[node.param] += g
            elif node.backward is not None:
                node.backward(g, grad)


@dataclass
class ParamStore:
    """Named float64 tensors with their gradients and ADAM moments."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> None:
        value = np.array(value, dtype=DTYPE)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        return ParamStore(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.grads.items()},
            {k: v.copy() for k, v in self.m.items()},
            {k: v.copy() for k, v in self.v.items()},
            self.step,
        )

    def n_values(self) -> int:
        return sum(p.size for p in self.params.values())


@dataclass(frozen=True)
class TensorInit:
    name: str
    shape: tuple[int, ...]
    fan_in: int
    bias: bool = False
    # (start, stop, value) ranges of a bias vector set after the fill
    constants: tuple[tuple[int, int, float], ...] = ()


@dataclass(frozen=True)
class InitSpec:
    tensors: tuple[TensorInit, ...]

    def __post_init__(self):
        for t in self.tensors:
            if t.fan_in < 1:
                raise ValueError(f"{t.name}: fan-in must be >= 1")


def init_params(spec: InitSpec, rng: np.random.Generator) -> ParamStore:
    """Gaussian weights with std sqrt(2 / fan_in); biases zero unless overridden."""
    store = ParamStore()
    for t in spec.tensors:
        if t.bias:
            value = np.zeros(t.shape, dtype=DTYPE)
        else:
            value = rng.normal(0.0, np.sqrt(2.0 / t.fan_in), size=t.shape)
        for start, stop, const in t.constants:
            value[..., start:stop] = const
        store.add(t.name, value)
    return store


def grad_norm(store: ParamStore) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in store.grads.values())))


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = grad_norm(store)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in store.grads.values():
            g *= scale
    return norm


def adam_step(
    store: ParamStore,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = store.grads[name]
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if lr != 0.0:
            p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        g.fill(0.0)


def save_checkpoint(store: ParamStore, path: str | Path, manifest: dict | None = None) -> None:
    """Write parameters as a binary file plus ``<path>.json`` manifest.

    Layout: magic, u32 version, u32 count, then per tensor: u32 name length,
    utf-8 name, u32 ndim, u64 dims, little-endian float64 values (row-major).
    """
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(store.params)))
        for name in sorted(store.params):
            value = np.ascontiguousarray(store.params[name], dtype="<f8")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", value.ndim))
            f.write(struct.pack(f"<{value.ndim}Q", *value.shape))
            f.write(value.tobytes())
    meta = dict(manifest or {})
    meta["format_version"] = CHECKPOINT_VERSION
    meta["shapes"] = {k: list(v.shape) for k, v in sorted(store.params.items())}
    with open(path.with_name(path.name + ".json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    path = Path(path)
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    store = ParamStore()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        value = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        store.add(name, value.astype(DTYPE))
    meta_path = path.with_name(path.name + ".json")
    manifest = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return store, manifest

