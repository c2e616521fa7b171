"""Layers, losses, optimizers and checkpoints on top of :mod:`.tensor`."""

from __future__ import annotations

import json
import math
import os
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor, _new, _record, _sigmoid, as_tensor


class Module:
    """Parameter container. Parameters are attributes holding tensors with
    ``requires_grad=True``; sub-modules are walked recursively in attribute
    order, which makes parameter order deterministic."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


def uniform_param(rng: np.random.Generator, shape, fan_in: int, name: str | None = None) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.n_in, self.n_out = n_in, n_out
        self.weight = uniform_param(rng, (n_in, n_out), n_in)
        self.bias = uniform_param(rng, (n_out,), n_in) if bias else None

    def __call__(self, x) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LSTMCell(Module):
    """Weights for the four gates stacked column-wise in order input, forget,
    cell, output: ``w_x`` is ``(D, 4H)``, ``w_h`` is ``(H, 4H)``."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        self.n_in, self.hidden = n_in, hidden
        self.w_x = uniform_param(rng, (n_in, 4 * hidden), n_in)
        self.w_h = uniform_param(rng, (hidden, 4 * hidden), hidden)
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = 1.0
        self.bias = Tensor(b, requires_grad=True)

    def __call__(self, x, h, c) -> tuple[Tensor, Tensor]:
        return lstm_cell(x, h, c, self)

    def zero_state(self, batch: int | None = None) -> tuple[Tensor, Tensor]:
        shape = (self.hidden,) if batch is None else (batch, self.hidden)
        return Tensor(np.zeros(shape)), Tensor(np.zeros(shape))


def lstm_cell(x, h, c, p: LSTMCell) -> tuple[Tensor, Tensor]:
    """One LSTM step as a single fused tape operation.

    ``i, f, o = sigmoid(.)``, ``g = tanh(.)``, ``c' = f*c + i*g``,
    ``h' = o*tanh(c')``. Inputs may be 1-D or carry a leading batch axis.
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    H, D = p.hidden, p.n_in
    if x.shape[-1] != D or h.shape[-1] != H or c.shape[-1] != H:
        raise DimensionError(
            f"lstm_cell: x {x.shape}, h {h.shape}, c {c.shape} do not match D={D}, H={H}"
        )
    xd, hd, cd = x.data, h.data, c.data
    z = xd @ p.w_x.data + hd @ p.w_h.data + p.bias.data
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H : 2 * H])
    g = np.tanh(z[..., 2 * H : 3 * H])
    o = _sigmoid(z[..., 3 * H :])
    c_new = f * cd + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    out = (_new(h_new), _new(c_new))

    def fn(grads):
        gh, gc = grads
        d_o = gh * tc
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                dc * g * i * (1.0 - i),
                dc * cd * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                d_o * o * (1.0 - o),
            ],
            axis=-1,
        )
        dz2 = dz.reshape(-1, 4 * H)
        return (
            dz @ p.w_x.data.T,
            dz @ p.w_h.data.T,
            dc * f,
            xd.reshape(-1, D).T @ dz2,
            hd.reshape(-1, H).T @ dz2,
            dz2.sum(axis=0),
        )

    return _record(out, (x, h, c, p.w_x, p.w_h, p.bias), fn)


def lstm_cell_reference(x, h, c, p: LSTMCell) -> tuple[Tensor, Tensor]:
    """The same step composed from primitive ops; slow, used as a cross-check."""
    H = p.hidden
    z = T.matmul(x, p.w_x) + T.matmul(h, p.w_h) + p.bias
    i = T.sigmoid(T.slice_(z, 0, H))
    f = T.sigmoid(T.slice_(z, H, 2 * H))
    g = T.tanh(T.slice_(z, 2 * H, 3 * H))
    o = T.sigmoid(T.slice_(z, 3 * H, 4 * H))
    c_new = f * c + i * g
    return o * T.tanh(c_new), c_new


def mse(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred - target
    return T.mean(diff * diff)


def cross_entropy(logits, target) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over the batch.

    ``logits`` is ``(K,)`` with an integer class, or ``(B, K)`` with ``B`` ids.
    """
    logits = as_tensor(logits)
    k = logits.shape[-1]
    ids = np.asarray(target, dtype=np.int64)
    if np.any(ids < 0) or np.any(ids >= k):
        raise ValueError(f"class id out of range [0, {k})")
    logp = T.log_softmax(logits)
    if logits.ndim == 1:
        if ids.ndim != 0:
            raise DimensionError("a single logit vector needs a single class id")
        return -logp[int(ids)]
    if ids.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {ids.shape} vs logits {logits.shape}")
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, ids[..., None], 1.0, axis=-1)
    return -T.sum(logp * onehot) * (1.0 / ids.size)


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = grads.get(p)
            if g is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: list[Tensor], lr: float = 1e-2):
        self.params, self.lr = params, lr

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        for p in self.params:
            g = grads.get(p)
            if g is not None:
                p.data = p.data - self.lr * g


def clip_grad_norm(grads: dict[Tensor, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(float(np.sum([np.sum(g * g) for g in grads.values()])))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for key in grads:
            grads[key] = grads[key] * scale
    return total


CHECKPOINT_FORMAT = "mtts-fusion-checkpoint"


def save_checkpoint(path: str | os.PathLike, module: Module, meta: dict | None = None) -> None:
    """JSON checkpoint: ``{"format", "version", "meta", "params": {name: {shape, data}}}``.

    Floats are written with ``repr``, the shortest string that round-trips,
    so loading restores every parameter bit for bit.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "meta": meta or {},
        "params": {
            name: {"shape": list(p.shape), "data": p.data.ravel().tolist()}
            for name, p in module.named_parameters()
        },
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def read_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    state = {
        name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["params"].items()
    }
    return state, doc.get("meta", {})
