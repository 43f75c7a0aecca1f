"""Dense tensors and a reverse-mode tape.

A ``Tensor`` wraps a numpy array (float32 by default, float64 for
gradient checking).  Operations executed while a ``Tape`` is active
append nodes in execution order, which is already a topological order,
so ``backward`` is a single reverse sweep over the node list.  Tensors
are immutable once created; only the optimizer mutates parameter
storage, and it does so between tapes.

Reductions inherit numpy's pairwise summation, which is deterministic
for a fixed shape, so identical inputs always give identical outputs.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError, NumericsError

_UID = itertools.count(1)
_tls = threading.local()

_debug_checks = False


def set_debug_checks(on: bool) -> None:
    """Toggle NaN/Inf scans on every op output (slow; test configs only)."""
    global _debug_checks
    _debug_checks = bool(on)


def debug_checks_enabled() -> bool:
    return _debug_checks


class Tensor:
    """Dense real array with shape metadata.  Rank >= 1, extents >= 1."""

    __slots__ = ("data", "uid")

    def __init__(self, data, dtype=None):
        if dtype is None and not isinstance(data, np.ndarray):
            dtype = np.float32  # 32-bit default; arrays keep their precision
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise DimensionError(f"tensor extents must all be >= 1, got shape {arr.shape}")
        self.data = arr
        self.uid = next(_UID)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


class Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Append-only record of ops for one forward pass / training step."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        if getattr(_tls, "tape", None) is not None:
            raise ContractError("a tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tape = None
        return False


def active_tape() -> Tape | None:
    return getattr(_tls, "tape", None)


def record(inputs, output: Tensor, backward) -> None:
    """Append a node to the active tape, if any, and run debug checks."""
    if _debug_checks and not np.all(np.isfinite(output.data)):
        raise NumericsError(f"non-finite value in op output of shape {output.shape}")
    tape = getattr(_tls, "tape", None)
    if tape is not None:
        tape.nodes.append(Node(inputs, output, backward))


class SelectionTape:
    """Record the discrete choices of a forward pass, then replay them.

    Relu masks and pool argmax selections make the loss only piecewise
    smooth: a parameter step of h can cross a kink or flip an index, and
    the difference quotient stops matching any one-sided derivative.
    Recording the choices at the evaluation point and replaying them for
    every finite-difference probe turns each probe into the smooth
    function the tape actually differentiates.  Kink behaviour itself is
    the job of the per-op checks, which control their evaluation points.
    """

    def __init__(self):
        self._lists = {"relu": [], "pool": []}
        self._cursors = {"relu": 0, "pool": 0}
        self.replaying = False

    def start_replay(self):
        self.replaying = True
        self.rewind()

    def rewind(self):
        for k in self._cursors:
            self._cursors[k] = 0

    def take(self, kind: str, compute):
        if self.replaying:
            picks = self._lists[kind]
            cursor = self._cursors[kind]
            if cursor >= len(picks):
                raise ContractError(f"selection replay ran past the recorded {kind} choices")
            self._cursors[kind] = cursor + 1
            return picks[cursor]
        value = compute()
        self._lists[kind].append(value)
        return value


def active_selections() -> SelectionTape | None:
    return getattr(_tls, "selections", None)


@contextmanager
def frozen_selections(tape: SelectionTape):
    if getattr(_tls, "selections", None) is not None:
        raise ContractError("a selection tape is already active on this thread")
    _tls.selections = tape
    try:
        yield tape
    finally:
        _tls.selections = None


class Grads:
    """Gradient lookup returned by ``backward``."""

    def __init__(self, table):
        self._table = table

    def of(self, t: Tensor):
        return self._table.get(t.uid)


def backward(tape: Tape, loss: Tensor, store: "ParameterStore | None" = None,
             keep=()) -> Grads:
    """Reverse sweep over the tape, seeding d(loss)/d(loss) = 1.

    Populates ``store`` gradients additively when given (call
    ``store.zero_grads()`` or ``adam_step`` between steps).  Gradients of
    intermediate tensors are freed as soon as they are consumed unless
    the tensor is listed in ``keep``; leaves are always retained.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    keep_ids = {t.uid for t in keep}
    table = {loss.uid: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = table.get(node.output.uid)
        if g is None:
            continue
        parts = node.backward(g)
        for t, p in zip(node.inputs, parts):
            if p is None:
                continue
            cur = table.get(t.uid)
            if cur is None:
                table[t.uid] = p
            else:
                # first contribution may be a view into another buffer;
                # copy before accumulating in place
                if cur.base is not None or not cur.flags.writeable:
                    cur = cur.copy()
                    table[t.uid] = cur
                np.add(cur, p, out=cur)
        if node.output.uid not in keep_ids:
            table.pop(node.output.uid, None)
    grads = Grads(table)
    if store is not None:
        store.accumulate(grads)
    return grads


class ParamEntry:
    __slots__ = ("value", "grad", "adam_m", "adam_v", "step")

    def __init__(self, value: Tensor):
        self.value = value
        self.grad = np.zeros_like(value.data)
        self.adam_m = np.zeros_like(value.data)
        self.adam_v = np.zeros_like(value.data)
        self.step = 0


class ParameterStore:
    """Named trainable tensors with gradient slots and Adam state."""

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}

    def create(self, name: str, data) -> Tensor:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = data if isinstance(data, Tensor) else Tensor(data)
        self._entries[name] = ParamEntry(t)
        return t

    def __contains__(self, name):
        return name in self._entries

    def __getitem__(self, name) -> ParamEntry:
        return self._entries[name]

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def n_values(self) -> int:
        return sum(e.value.size for e in self._entries.values())

    def zero_grads(self) -> None:
        for e in self._entries.values():
            e.grad[...] = 0

    def accumulate(self, grads: Grads) -> None:
        for e in self._entries.values():
            g = grads.of(e.value)
            if g is not None:
                e.grad += g


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def finite_diff_grad(f, x: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` with respect to ``x``.

    ``f`` is re-evaluated with ``x.data`` perturbed one element at a
    time; the data is restored afterwards.  O(h^2) accurate; run at
    float64 for meaningful comparisons.
    """
    if h <= 0:
        raise ContractError("finite difference step must be positive")
    flat = x.data.reshape(-1)
    out = np.empty(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(x))
        flat[i] = orig - h
        fm = _scalar(f(x))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.data.shape)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-5) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, floor).

    The floor keeps legitimately-zero gradients from tripping the check
    on finite-difference noise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
