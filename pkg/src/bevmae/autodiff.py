"""A small reverse-mode tape specialised to the pre-training graph.

Every op appends one node to the tape of its inputs; nodes are stored in
creation order, which is therefore a valid topological order, and
``Tape.backward`` simply walks them in reverse.

Non-smooth ops (ReLU, Chamfer nearest-neighbour choice) log the branch they
took in ``Tape.branches`` so gradient checks can tell when a finite-difference
probe has crossed a kink.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class Tensor:
    __slots__ = ("data", "tape", "name", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, tape: "Tape", parents=(), backward_fn=None, name=None, requires_grad=False):
        self.data = data
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__


class Tape:
    """Records ops in creation order; owns the named parameter leaves."""

    def __init__(self, dtype=np.float64, track_branches: bool = True):
        self.dtype = np.dtype(dtype)
        self.track_branches = track_branches
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}
        self.branches: list[np.ndarray] = []

    def param(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} registered twice")
        t = Tensor(np.asarray(value, dtype=self.dtype), self, name=name, requires_grad=True)
        self.params[name] = t
        return t

    def constant(self, value) -> Tensor:
        return Tensor(np.asarray(value, dtype=self.dtype), self)

    def record(self, data, parents, backward_fn) -> Tensor:
        req = any(p.requires_grad for p in parents)
        out = Tensor(data, self, parents if req else (), backward_fn if req else None, requires_grad=req)
        self.nodes.append(out)
        return out

    def log_branch(self, decision) -> None:
        if self.track_branches:
            self.branches.append(np.asarray(decision).copy())

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` for every registered parameter."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return {
            name: grads.get(id(t), np.zeros_like(t.data)).reshape(t.data.shape)
            for name, t in self.params.items()
        }


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise TypeError("at least one argument must be a Tensor")


def _as_tensor(x, tape: Tape) -> Tensor:
    return x if isinstance(x, Tensor) else tape.constant(x)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return tape.record(a.data + b.data, (a, b), bw)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def scale(a: Tensor, c: float) -> Tensor:
    return a.tape.record(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    a.tape.log_branch(on)
    return a.tape.record(np.where(on, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * on,))


def total(a: Tensor) -> Tensor:
    return a.tape.record(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def mean(xs: list) -> Tensor:
    """Arithmetic mean of a list of scalar tensors, summed in list order."""
    tape = _tape_of(*xs)
    xs = [_as_tensor(x, tape) for x in xs]
    n = len(xs)
    acc = xs[0].data.copy()
    for x in xs[1:]:
        acc = acc + x.data
    return tape.record(acc / n, tuple(xs), lambda g: tuple(g / n for _ in xs))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return a.tape.record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- linear

def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape ``(M, Cin)``."""
    tape = _tape_of(x, w)
    x = _as_tensor(x, tape)
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ w.data.T
        gw = x.data.T @ g
        return (gx, gw) + ((g.sum(axis=0),) if b is not None else ())

    parents = (x, w) + ((b,) if b is not None else ())
    return tape.record(out, parents, bw)


def gather_cells(x: Tensor, ij: np.ndarray) -> Tensor:
    """Rows ``x[i, j, :]`` of a dense ``(X, Y, C)`` map at each ``(i, j)``."""
    ij = np.asarray(ij, dtype=np.int64).reshape(-1, 2)
    shape = x.data.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, (ij[:, 0], ij[:, 1]), g)
        return (gx,)

    return x.tape.record(x.data[ij[:, 0], ij[:, 1]], (x,), bw)


def fill_rows(base: Tensor, rows: np.ndarray, token: Tensor) -> Tensor:
    """Copy of ``base`` with ``token`` written into every row in ``rows``."""
    tape = _tape_of(base, token)
    base = _as_tensor(base, tape)
    rows = np.asarray(rows, dtype=bool)
    out = base.data.copy()
    out[rows] = token.data

    def bw(g):
        gb = g.copy()
        gb[rows] = 0
        return gb, g[rows].sum(axis=0)

    return tape.record(out, (base, token), bw)


# ---------------------------------------------------------------- convolution

@dataclass
class Rulebook:
    """Input/output row pairs per kernel tap for one sparse conv layer.

    For a fixed tap, both ``in_rows[k]`` and ``out_rows[k]`` are free of
    duplicates, which lets forward and backward use plain fancy indexing.
    """

    in_rows: list
    out_rows: list
    n_out: int


def sparse_conv(x: Tensor, w: Tensor, b: Optional[Tensor], rules: Rulebook) -> Tensor:
    """Gather-matmul-scatter sparse convolution. ``w`` is ``(K, Cin, Cout)``."""
    tape = _tape_of(x, w)
    x = _as_tensor(x, tape)
    cout = w.data.shape[2]
    out = np.zeros((rules.n_out, cout), dtype=np.result_type(x.data, w.data))
    for k, (ri, ro) in enumerate(zip(rules.in_rows, rules.out_rows)):
        if len(ri):
            out[ro] += x.data[ri] @ w.data[k]
    if b is not None:
        out += b.data

    def bw(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for k, (ri, ro) in enumerate(zip(rules.in_rows, rules.out_rows)):
            if len(ri):
                go = g[ro]
                gx[ri] += go @ w.data[k].T
                gw[k] = x.data[ri].T @ go
        return (gx, gw) + ((g.sum(axis=0),) if b is not None else ())

    parents = (x, w) + ((b,) if b is not None else ())
    return tape.record(out, parents, bw)


def scatter_dense(x: Tensor, cells: np.ndarray, slots: np.ndarray, shape) -> Tensor:
    """Write row ``r`` of ``x`` to ``out[i, j, slot*C:(slot+1)*C]``.

    ``cells`` is ``(M, 2)``, ``slots`` is ``(M,)``; target positions must be
    unique. Used to flatten the z axis into channels.
    """
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    slots = np.asarray(slots, dtype=np.int64)
    c = x.data.shape[1]
    X, Y, n_slots = shape
    out = np.zeros((X, Y, n_slots, c), dtype=x.data.dtype)
    out[cells[:, 0], cells[:, 1], slots] = x.data

    def bw(g):
        return (g.reshape(X, Y, n_slots, c)[cells[:, 0], cells[:, 1], slots],)

    return x.tape.record(out.reshape(X, Y, n_slots * c), (x,), bw)


def conv2d_same(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dense ``k x k`` convolution, stride 1, zero padding ``k // 2``.

    ``x`` is ``(X, Y, Cin)`` and ``w`` is ``(k, k, Cin, Cout)``.
    """
    tape = _tape_of(x, w)
    x = _as_tensor(x, tape)
    k = w.data.shape[0]
    p = k // 2
    X, Y, cin = x.data.shape
    xp = np.pad(x.data, ((p, p), (p, p), (0, 0)))
    out = np.zeros((X, Y, w.data.shape[3]), dtype=np.result_type(x.data, w.data))
    for a in range(k):
        for c in range(k):
            out += xp[a:a + X, c:c + Y] @ w.data[a, c]
    if b is not None:
        out += b.data

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        g2 = g.reshape(-1, g.shape[2])
        for a in range(k):
            for c in range(k):
                gxp[a:a + X, c:c + Y] += g @ w.data[a, c].T
                gw[a, c] = xp[a:a + X, c:c + Y].reshape(-1, cin).T @ g2
        gx = gxp[p:p + X, p:p + Y]
        return (gx, gw) + ((g2.sum(axis=0),) if b is not None else ())

    parents = (x, w) + ((b,) if b is not None else ())
    return tape.record(out, parents, bw)


# ---------------------------------------------------------------- grad check

@dataclass
class GradCheckEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    entries: list
    skipped_kinks: int = 0

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    def per_parameter(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for e in self.entries:
            out[e.name] = max(out.get(e.name, 0.0), e.rel_error)
        return dict(sorted(out.items(), key=lambda kv: -kv[1]))

    def worst(self, n: int = 10) -> list:
        return sorted(self.entries, key=lambda e: -e.rel_error)[:n]


def relative_error(a: float, n: float, floor: float = 1e-6) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(
    f: Callable[[dict], tuple],
    params: dict[str, np.ndarray],
    h: float = 1e-4,
    samples_per_param: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-6,
    max_redraws: int = 200,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``f(params, need_grad)`` must return ``(loss_value, grads_dict,
    branch_signature)``; probes pass ``need_grad=False`` and may return
    ``None`` for the gradients. A component
    whose ``+h`` or ``-h`` probe changes the branch signature sits within
    ``h`` of a kink; it is counted in ``skipped_kinks`` and a different
    component is drawn instead. With ``samples_per_param=None`` every
    component is checked (kinked ones still skipped).
    """
    rng = np.random.default_rng(seed)
    _, grads, base_sig = f(params, True)
    entries = []
    skipped = 0
    for name in sorted(params):
        value = params[name]
        n = value.size
        if samples_per_param is None or samples_per_param >= n:
            queue = list(range(n))
            want = n
        else:
            queue = list(rng.permutation(n))
            want = samples_per_param
        done = 0
        redraws = 0
        for flat in queue:
            if done >= want:
                break
            idx = np.unravel_index(flat, value.shape)
            orig = value[idx]
            value[idx] = orig + h
            fp, _, sig_p = f(params, False)
            value[idx] = orig - h
            fm, _, sig_m = f(params, False)
            value[idx] = orig
            if sig_p != base_sig or sig_m != base_sig:
                skipped += 1
                redraws += 1
                if redraws > max_redraws:
                    raise RuntimeError(f"too many kink crossings while checking {name}")
                continue
            numeric = (fp - fm) / (2 * h)
            analytic = float(grads[name][idx])
            entries.append(GradCheckEntry(name, tuple(int(i) for i in idx), analytic, numeric,
                                          relative_error(analytic, numeric, floor)))
            done += 1
        if done == 0 and n > 0:
            raise RuntimeError(f"no component of {name} could be checked away from kinks")
    entries.sort(key=lambda e: -e.rel_error)
    return GradCheckReport(entries, skipped)


def branch_signature(tape: Tape) -> int:
    """Hash of every branch decision logged on ``tape``."""
    import hashlib

    hsh = hashlib.blake2b(digest_size=16)
    for b in tape.branches:
        hsh.update(np.ascontiguousarray(b).tobytes())
        hsh.update(b"|")
    return int.from_bytes(hsh.digest(), "little")
