"""A small reverse-mode tape over numpy arrays.

Every op takes an optional ``tape``. With ``tape=None`` the op only computes its
value; otherwise it appends a record whose closure maps the output gradient to
input gradients. ``Tape.backward`` replays the records in reverse, which is a
reverse topological order because records are appended as values are created.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class TapeError(RuntimeError):
    pass


class Var:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Var{label}{self.value.shape}"


class Param(Var):
    """A trainable leaf; gradients accumulate across backward passes."""

    __slots__ = ()

    def __init__(self, value, name: str | None = None):
        super().__init__(np.array(value, dtype=np.float64), True, name)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


class Tape:
    def __init__(self):
        self.records: list[tuple[Var, tuple[Var, ...], Callable]] = []

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Var, parents: Sequence[Var], backward_fn: Callable) -> Var:
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            self.records.append((out, tuple(parents), backward_fn))
        return out

    def backward(self, out: Var, seed=None) -> None:
        """Accumulate d(seed . out)/d(leaf) into the ``grad`` of every reachable leaf.

        The tape is consumed: records are cleared afterwards.
        """
        if not any(rec[0] is out for rec in self.records):
            raise TapeError("backward called on a value that was not recorded on this tape")
        seed = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=np.float64)
        if seed.shape != out.value.shape:
            raise TapeError(f"seed shape {seed.shape} != output shape {out.value.shape}")
        produced = {id(rec[0]) for rec in self.records}
        grads: dict[int, list] = {id(out): [out, seed]}
        for node, parents, fn in reversed(self.records):
            entry = grads.pop(id(node), None)
            if entry is None:
                continue
            for parent, pg in zip(parents, fn(entry[1])):
                if pg is None or not parent.requires_grad:
                    continue
                slot = grads.get(id(parent))
                if slot is None:
                    grads[id(parent)] = [parent, pg]
                else:
                    slot[1] = slot[1] + pg
        for key, (leaf, g) in grads.items():
            if key not in produced:
                leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self.records.clear()


def _rec(tape, out, parents, fn):
    return tape.record(out, parents, fn) if tape is not None else out


def matmul(tape, x: Var, w: Var) -> Var:
    out = Var(x.value @ w.value)
    return _rec(tape, out, (x, w), lambda g: (g @ w.value.T, x.value.T @ g))


def affine(tape, x: Var, w: Var, b: Var) -> Var:
    """``x @ w.T + b`` with ``w`` stored as (out, in)."""
    out = Var(x.value @ w.value.T + b.value)
    return _rec(tape, out, (x, w, b),
                lambda g: (g @ w.value, g.T @ x.value, g.sum(axis=0)))


def add(tape, a: Var, b: Var) -> Var:
    out = Var(a.value + b.value)
    return _rec(tape, out, (a, b), lambda g: (g, g))


def scale(tape, a: Var, c: float) -> Var:
    out = Var(a.value * c)
    return _rec(tape, out, (a,), lambda g: (g * c,))


def relu(tape, a: Var) -> Var:
    mask = a.value > 0
    out = Var(np.where(mask, a.value, 0.0))
    return _rec(tape, out, (a,), lambda g: (g * mask,))


def square(tape, a: Var) -> Var:
    out = Var(a.value * a.value)
    return _rec(tape, out, (a,), lambda g: (2.0 * a.value * g,))


def total(tape, a: Var) -> Var:
    out = Var(np.array(a.value.sum()))
    return _rec(tape, out, (a,), lambda g: (np.full_like(a.value, g),))


def gather(tape, a: Var, idx: np.ndarray) -> Var:
    """Rows ``a[idx]``; repeated indices accumulate on the way back."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Var(a.value[idx])

    def back(g):
        n = a.value.shape[0]
        scatter = sp.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))),
                                shape=(n, idx.size))
        return (np.asarray(scatter @ g),)
    return _rec(tape, out, (a,), back)


def spmm(tape, mat: sp.spmatrix, a: Var) -> Var:
    """Constant sparse matrix times ``a``."""
    mat = sp.csr_matrix(mat)
    out = Var(np.asarray(mat @ a.value))
    return _rec(tape, out, (a,), lambda g: (np.asarray(mat.T @ g),))


def concat(tape, parts: Sequence[Var]) -> Var:
    out = Var(np.concatenate([p.value for p in parts], axis=0))
    bounds = np.cumsum([0] + [p.value.shape[0] for p in parts])

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))
    return _rec(tape, out, tuple(parts), back)


def replace_rows(tape, base: Var, idx: np.ndarray, rows: Var) -> Var:
    """Copy of ``base`` with ``base[idx] = rows`` (``idx`` without repeats)."""
    idx = np.asarray(idx, dtype=np.int64)
    value = base.value.copy()
    value[idx] = rows.value
    out = Var(value)

    def back(g):
        gb = g.copy()
        gb[idx] = 0.0
        return gb, g[idx]
    return _rec(tape, out, (base, rows), back)


def batchnorm_train(tape, x: Var, gamma: Var, beta: Var, eps: float):
    """Normalize each column by the batch mean and biased variance.

    Returns the output and the batch ``(mean, var)`` for running statistics.
    """
    mu = x.value.mean(axis=0)
    var = x.value.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv
    out = Var(xhat * gamma.value + beta.value)
    n = x.value.shape[0]

    def back(g):
        dxhat = g * gamma.value
        dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)
    return _rec(tape, out, (x, gamma, beta), back), (mu, var)


def batchnorm_eval(tape, x: Var, gamma: Var, beta: Var, mean: np.ndarray, var: np.ndarray,
                   eps: float) -> Var:
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mean) * inv
    out = Var(xhat * gamma.value + beta.value)
    return _rec(tape, out, (x, gamma, beta),
                lambda g: (g * gamma.value * inv, (g * xhat).sum(axis=0), g.sum(axis=0)))


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(tape, logits: Var, labels: np.ndarray, weights: np.ndarray | None = None) -> Var:
    """Mean softmax cross-entropy over rows (optionally weighted sum instead)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.value.shape
    if labels.shape != (n,) or (n and (labels.min() < 0 or labels.max() >= c)):
        raise ValueError("labels must index the logit columns, one per row")
    if weights is None:
        weights = np.full(n, 1.0 / max(n, 1))
    logp = log_softmax(logits.value)
    out = Var(np.array(-(weights * logp[np.arange(n), labels]).sum()))

    def back(g):
        probs = np.exp(logp)
        probs[np.arange(n), labels] -= 1.0
        return (g * weights[:, None] * probs,)
    return _rec(tape, out, (logits,), back)
