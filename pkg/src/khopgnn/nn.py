"""Dense networks, batch normalization, Adam and a finite-difference checker."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tape, Var


class Module:
    """Base class: parameters are discovered from attributes, in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Param):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{key}.")

    def parameters(self) -> list[Param]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            items = value.values() if isinstance(value, dict) else (
                value if isinstance(value, (list, tuple)) else [value])
            for item in items:
                if isinstance(item, Module):
                    yield from item.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state(self) -> dict[str, np.ndarray]:
        out = {name: p.value.copy() for name, p in self.named_parameters()}
        for path, m in self._named_modules():
            if isinstance(m, BatchNorm):
                out[f"{path}running_mean"] = m.running_mean.copy()
                out[f"{path}running_var"] = m.running_var.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        for name, p in params.items():
            if state[name].shape != p.value.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.value = np.array(state[name], dtype=np.float64)
        for path, m in self._named_modules():
            if isinstance(m, BatchNorm):
                m.running_mean = np.array(state[f"{path}running_mean"], dtype=np.float64)
                m.running_var = np.array(state[f"{path}running_var"], dtype=np.float64)

    def _named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value._named_modules(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._named_modules(f"{prefix}{name}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item._named_modules(f"{prefix}{name}.{key}.")


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class Dense(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = Param(glorot(rng, out_dim, in_dim), "weight")
        self.bias = Param(np.zeros(out_dim), "bias")

    @property
    def in_dim(self) -> int:
        return self.weight.value.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.value.shape[0]

    def __call__(self, x: Var, tape: Tape | None = None) -> Var:
        if x.value.shape[-1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {x.value.shape[-1]}")
        return ad.affine(tape, x, self.weight, self.bias)


class Mlp(Module):
    """Two dense layers with a ReLU in between; the output layer is linear."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator):
        self.layers = [Dense(in_dim, hidden, rng), Dense(hidden, out_dim, rng)]

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def __call__(self, x: Var, tape: Tape | None = None) -> Var:
        h = x
        for i, layer in enumerate(self.layers):
            if i:
                h = ad.relu(tape, h)
            h = layer(h, tape)
        return h


def mlp_forward(m: Mlp, x, tape: Tape | None = None) -> Var:
    """Apply ``m`` to a vector or a batch of row vectors."""
    x = ad.as_var(x)
    if x.value.ndim == 1:
        return _unrow(tape, m(_rows(tape, x), tape))
    return m(x, tape)


def _rows(tape, x: Var) -> Var:
    out = Var(x.value[None, :])
    return ad._rec(tape, out, (x,), lambda g: (g[0],))


def _unrow(tape, x: Var) -> Var:
    out = Var(x.value[0])
    return ad._rec(tape, out, (x,), lambda g: (g[None, :],))


class BatchNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, momentum: float = 0.1):
        self.scale = Param(np.ones(dim), "scale")
        self.shift = Param(np.zeros(dim), "shift")
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.eps = eps
        self.momentum = momentum
        self.training = True

    def __call__(self, x: Var, tape: Tape | None = None) -> Var:
        return batchnorm_forward(self, x, self.training, tape)


def batchnorm_forward(bn: BatchNorm, x: Var, training: bool, tape: Tape | None = None) -> Var:
    if training:
        if x.value.shape[0] == 0:
            raise ValueError("batch normalization needs a non-empty batch in training mode")
        out, (mu, var) = ad.batchnorm_train(tape, x, bn.scale, bn.shift, bn.eps)
        n = x.value.shape[0]
        unbiased = var * n / (n - 1) if n > 1 else var
        bn.running_mean = (1 - bn.momentum) * bn.running_mean + bn.momentum * mu
        bn.running_var = (1 - bn.momentum) * bn.running_var + bn.momentum * unbiased
        return out
    return ad.batchnorm_eval(tape, x, bn.scale, bn.shift, bn.running_mean, bn.running_var, bn.eps)


def softmax_cross_entropy(logits, label: int) -> tuple[float, np.ndarray]:
    """Loss and gradient for one example, stable under large logits."""
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < z.size:
        raise ValueError(f"label {label} out of range for {z.size} classes")
    logp = ad.log_softmax(z)
    grad = np.exp(logp)
    grad[label] -= 1.0
    return float(-logp[label]), grad


@dataclass
class AdamState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], s: AdamState) -> list[np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not s.m:
        s.m = [np.zeros_like(p) for p in params]
        s.v = [np.zeros_like(p) for p in params]
    s.step += 1
    c1 = 1.0 - s.beta1 ** s.step
    c2 = 1.0 - s.beta2 ** s.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or s.m[i].shape != p.shape:
            raise ValueError(f"shape mismatch for parameter {i}: {p.shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {i}")
        s.m[i] = s.beta1 * s.m[i] + (1 - s.beta1) * g
        s.v[i] = s.beta2 * s.v[i] + (1 - s.beta2) * g * g
        out.append(p - s.lr * (s.m[i] / c1) / (np.sqrt(s.v[i] / c2) + s.eps))
    return out


class Adam:
    def __init__(self, params: list[Param], lr: float = 1e-2, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in self.params]
        new = adam_step([p.value for p in self.params], grads, self.state)
        for p, value in zip(self.params, new):
            p.value = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def finite_difference_check(loss_fn: Callable[[Tape | None], Var], params: list[Param],
                            h: float = 1e-5, floor: float = 1e-6, min_h: float = 1e-9):
    """Compare reverse-mode gradients of ``loss_fn`` with central differences.

    ``loss_fn(tape)`` must rebuild the scalar loss from the current parameter
    values. Where the central estimates at ``h`` and ``h/2`` disagree by more
    than rounding noise (the step straddles a ReLU kink) the step is shrunk
    until they agree or ``min_h`` is reached. Returns ``(max_rel_err, analytic,
    numeric)`` with the error per coordinate measured as
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    for p in params:
        p.grad = None
    tape = Tape()
    loss = loss_fn(tape)
    tape.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.value) for p in params]
    # rounding error of a central difference is about eps * |loss| / step;
    # shrinking the step further only amplifies it
    scale = 100 * np.finfo(np.float64).eps * max(1.0, abs(float(loss.value)))

    def central(p, idx, step):
        orig = p.value[idx]
        p.value[idx] = orig + step
        up = float(loss_fn(None).value)
        p.value[idx] = orig - step
        down = float(loss_fn(None).value)
        p.value[idx] = orig
        return (up - down) / (2 * step)

    numeric = []
    worst = 0.0
    for p, a in zip(params, analytic):
        est = np.zeros_like(p.value)
        for idx in np.ndindex(p.value.shape):
            step = h
            coarse = central(p, idx, step)
            fine = central(p, idx, step / 2)
            while (abs(coarse - fine) > 1e-4 * max(abs(coarse), abs(fine)) + scale / step
                   and step > min_h):
                step /= 10
                coarse = central(p, idx, step)
                fine = central(p, idx, step / 2)
            est[idx] = fine
            err = abs(a[idx] - fine) / max(abs(a[idx]), abs(fine), floor)
            worst = max(worst, err)
        numeric.append(est)
    return worst, analytic, numeric


def save_checkpoint(path, module: Module, config: dict | None = None) -> None:
    """JSON checkpoint: ``{"config": ..., "tensors": [{"name", "shape", "data"}]}``."""
    tensors = [{"name": name, "shape": list(arr.shape), "data": arr.ravel().tolist()}
               for name, arr in module.state().items()]
    with open(path, "w") as fh:
        json.dump({"config": config or {}, "tensors": tensors}, fh)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path) as fh:
        blob = json.load(fh)
    state = {t["name"]: np.array(t["data"], dtype=np.float64).reshape(t["shape"])
             for t in blob["tensors"]}
    return blob["config"], state
