#!/usr/bin/env python3
"""
Minimal reverse-mode differentiation for the segmentation network.

A Tape records every op of one forward pass as a backward closure; backward()
seeds the output gradient with ones and runs the closures in exact reverse
order. Tensors are (channels x time) for activations and any shape for
parameters; batch size is fixed at 1 (one full video per step).

Ops: dilated_conv1d ("same" padding, kernel 3 by default), pointwise_conv
(1x1), relu, softmax over channels, concat_channels, add, dropout, scale and
sum_scalars. Losses record their own closures through Tape.record().

Also here: ADAM with bias correction, a central finite-difference gradient
checker, Kaiming-uniform initialization and the checkpoint file format:
    "SEGTCN-CKPT v1\\n" + one JSON line {"topology", "params": [{name, shape}]}
    + little-endian float32 values in manifest order.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

KERNEL_SIZE = 3
LEARNING_RATE = 0.001
BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
GRAD_CHECK_STEP = 1e-5
GRAD_CHECK_COORDS = 32
GRAD_CHECK_FLOOR = 1e-8

CHECKPOINT_MAGIC = b'SEGTCN-CKPT v1\n'


class ShapeError(ValueError):
    """Tensor, track or checkpoint dimensions don't line up."""


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """A value plus a same-shape gradient accumulator."""

    def __init__(self, value, name: Optional[str] = None, requires_grad: bool = True):
        self.value = np.asarray(value)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    def grad_or_zeros(self) -> np.ndarray:
        return self.grad if self.grad is not None else np.zeros_like(self.value)

    def __repr__(self):
        return f"Tensor({self.name or '?'}, shape={self.shape}, dtype={self.value.dtype})"


class Tensor2D(Tensor):
    """Activation map: channels x time."""

    def __init__(self, value, name: Optional[str] = None, requires_grad: bool = True):
        super().__init__(value, name, requires_grad)
        if self.value.ndim != 2:
            raise ShapeError(f"Tensor2D needs a (channels, time) array, got shape {self.value.shape}")

    @property
    def channels(self) -> int:
        return self.value.shape[0]

    @property
    def time(self) -> int:
        return self.value.shape[1]


class Tape:
    """One forward pass worth of backward closures. Not thread-safe; build one
    tape per forward pass."""

    def __init__(self, training: bool = False, seed: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None):
        self.training = training
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self._records: List[Tuple[str, Callable[[], None]]] = []

    def __len__(self):
        return len(self._records)

    def record(self, name: str, backward: Callable[[], None]):
        self._records.append((name, backward))

    def backward(self, out: Tensor):
        out.grad = np.ones_like(out.value)
        for _, fn in reversed(self._records):
            fn()

    # ── Convolutions ──────────────────────────────────────────────────────────

    def dilated_conv1d(self, x: Tensor2D, weight: Tensor, bias: Tensor, dilation: int = 1) -> Tensor2D:
        """y[o,t] = b[o] + sum_{i,k} w[o,i,k] * x[i, t + (k - (K-1)/2) * dilation],
        zero outside [0, T). Output length equals input length."""
        out_ch, in_ch, kernel = weight.shape
        if x.channels != in_ch or bias.shape != (out_ch,):
            raise ShapeError(f"conv weight {weight.shape} / bias {bias.shape} don't fit input {x.shape}")
        if kernel % 2 != 1:
            raise ShapeError(f"kernel size must be odd for same-length output, got {kernel}")
        if dilation < 1:
            raise ShapeError(f"dilation must be >= 1, got {dilation}")
        T = x.time
        pad = dilation * (kernel - 1) // 2
        xp = np.pad(x.value, ((0, 0), (pad, pad)))
        taps = np.stack([xp[:, k * dilation:k * dilation + T] for k in range(kernel)])  # (K, I, T)
        y = np.tensordot(weight.value, taps, axes=([2, 1], [0, 1])) + bias.value[:, None]
        out = Tensor2D(y)

        def backward():
            if out.grad is None:
                return
            gy = out.grad
            weight.accumulate(np.tensordot(gy, taps, axes=([1], [2])).transpose(0, 2, 1))
            bias.accumulate(gy.sum(axis=1))
            if x.requires_grad:
                g_taps = np.tensordot(weight.value, gy, axes=([0], [0]))  # (I, K, T)
                gxp = np.zeros_like(xp)
                for k in range(kernel):
                    gxp[:, k * dilation:k * dilation + T] += g_taps[:, k, :]
                x.accumulate(gxp[:, pad:pad + T])

        self.record('dilated_conv1d', backward)
        return out

    def pointwise_conv(self, x: Tensor2D, weight: Tensor, bias: Tensor) -> Tensor2D:
        out_ch, in_ch = weight.shape
        if x.channels != in_ch or bias.shape != (out_ch,):
            raise ShapeError(f"1x1 conv weight {weight.shape} / bias {bias.shape} don't fit input {x.shape}")
        out = Tensor2D(weight.value @ x.value + bias.value[:, None])

        def backward():
            if out.grad is None:
                return
            gy = out.grad
            weight.accumulate(gy @ x.value.T)
            bias.accumulate(gy.sum(axis=1))
            x.accumulate(weight.value.T @ gy)

        self.record('pointwise_conv', backward)
        return out

    # ── Elementwise / structural ──────────────────────────────────────────────

    def relu(self, x: Tensor2D) -> Tensor2D:
        mask = x.value > 0
        out = Tensor2D(np.where(mask, x.value, 0).astype(x.value.dtype))

        def backward():
            if out.grad is not None:
                x.accumulate(out.grad * mask)

        self.record('relu', backward)
        return out

    def softmax(self, x: Tensor2D) -> Tensor2D:
        """Normalizes each time column over channels."""
        shifted = x.value - x.value.max(axis=0, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=0, keepdims=True)
        out = Tensor2D(y)

        def backward():
            if out.grad is None:
                return
            gy = out.grad
            x.accumulate(y * (gy - (gy * y).sum(axis=0, keepdims=True)))

        self.record('softmax', backward)
        return out

    softmax_over_channels = softmax

    def concat_channels(self, parts: Sequence[Tensor2D]) -> Tensor2D:
        times = {p.time for p in parts}
        if len(times) != 1:
            raise ShapeError(f"concat needs equal time lengths, got {sorted(times)}")
        bounds = np.cumsum([0] + [p.channels for p in parts])
        out = Tensor2D(np.concatenate([p.value for p in parts], axis=0))

        def backward():
            if out.grad is None:
                return
            for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
                p.accumulate(out.grad[lo:hi])

        self.record('concat_channels', backward)
        return out

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
        out = type(a)(a.value + b.value) if isinstance(a, Tensor2D) else Tensor(a.value + b.value)

        def backward():
            if out.grad is not None:
                a.accumulate(out.grad)
                b.accumulate(out.grad)

        self.record('add', backward)
        return out

    elementwise_add = add

    def dropout(self, x: Tensor2D, rate: float) -> Tensor2D:
        """Zero each activation with probability `rate` and scale survivors by
        1/(1 - rate). Identity when the tape isn't training or rate is 0."""
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        if not self.training or rate == 0.0:
            return x
        keep = (self.rng.random(x.shape) >= rate).astype(x.value.dtype) / (1.0 - rate)
        out = Tensor2D(x.value * keep)

        def backward():
            if out.grad is not None:
                x.accumulate(out.grad * keep)

        self.record('dropout', backward)
        return out

    def scale(self, x: Tensor, factor: float) -> Tensor:
        out = Tensor(x.value * factor)

        def backward():
            if out.grad is not None:
                x.accumulate(out.grad * factor)

        self.record('scale', backward)
        return out

    def sum_scalars(self, terms: Sequence[Tensor]) -> Tensor:
        if not terms:
            raise ShapeError("sum_scalars needs at least one term")
        out = Tensor(np.sum([t.value for t in terms], axis=0))

        def backward():
            if out.grad is not None:
                for t in terms:
                    t.accumulate(out.grad)

        self.record('sum_scalars', backward)
        return out


# ── Parameters ────────────────────────────────────────────────────────────────

def kaiming_uniform(shape: Tuple[int, ...], rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Fan-in scaled uniform init, bound 1/sqrt(fan_in) (Kaiming-uniform with
    a = sqrt(5), the usual Conv1d default)."""
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def zero_grads(params: Dict[str, Tensor]):
    for p in params.values():
        p.zero_grad()


def cast_params(params: Dict[str, Tensor], dtype) -> None:
    for p in params.values():
        p.value = p.value.astype(dtype)
        p.grad = None


# ── ADAM ──────────────────────────────────────────────────────────────────────

@dataclass
class AdamState:
    lr: float = LEARNING_RATE
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = ADAM_EPS
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected ADAM update, in place on `params` and `state`. A parameter
    with no gradient entry is treated as having a zero gradient."""
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter '{name}'")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} doesn't match parameter '{name}' {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'")

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)


def adam_step_tensors(params: Dict[str, Tensor], state: AdamState) -> None:
    values = {name: p.value for name, p in params.items()}
    grads = {name: p.grad for name, p in params.items() if p.grad is not None}
    adam_step(values, grads, state)


# ── Gradient checking ─────────────────────────────────────────────────────────

def grad_check(loss_fn: Callable[[], Tuple[Tape, Tensor]], params: Dict[str, Tensor],
               step: float = GRAD_CHECK_STEP, coords: int = GRAD_CHECK_COORDS,
               seed: int = 0) -> float:
    """Compare the taped gradient against central differences.

    `loss_fn` must rebuild the graph from the current parameter values and
    return (tape, scalar loss tensor); it is called once for the analytic pass
    and twice per probed coordinate. Probes up to `coords` random coordinates per
    parameter and returns the max of |a - n| / max(|a|, |n|, 1e-8). Run it on
    float64 parameters."""
    zero_grads(params)
    tape, loss = loss_fn()
    tape.backward(loss)
    analytic = {name: p.grad_or_zeros().copy() for name, p in params.items()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.value.reshape(-1)
        picks = rng.choice(flat.size, size=min(coords, flat.size), replace=False)
        a_flat = analytic[name].reshape(-1)
        for i in picks:
            original = flat[i]
            flat[i] = original + step
            f_plus = float(loss_fn()[1].value)
            flat[i] = original - step
            f_minus = float(loss_fn()[1].value)
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(a_flat[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), GRAD_CHECK_FLOOR)
            if err > worst:
                worst = err
                logger.debug(f"grad_check {name}[{i}]: analytic {a:.6e} numeric {numeric:.6e}")
    zero_grads(params)
    return worst


# ── Checkpoints ───────────────────────────────────────────────────────────────

def save_checkpoint(path, params: Dict[str, Tensor], topology: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        'topology': topology,
        'params': [{'name': name, 'shape': list(p.shape)} for name, p in params.items()],
    }
    header = json.dumps(manifest, sort_keys=True, separators=(',', ':')).encode('utf-8') + b'\n'
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(header)
        for p in params.values():
            f.write(np.ascontiguousarray(p.value, dtype='<f4').tobytes())
    return path


def load_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    path = Path(path)
    try:
        with open(path, 'rb') as f:
            magic = f.readline()
            header = f.readline()
            payload = f.read()
    except OSError as e:
        raise ShapeError(f"cannot read checkpoint {path}: {e}") from e
    if magic != CHECKPOINT_MAGIC:
        raise ShapeError(f"{path}: not a SEGTCN-CKPT v1 checkpoint")
    manifest = json.loads(header.decode('utf-8'))
    params: Dict[str, np.ndarray] = {}
    offset = 0
    for spec in manifest['params']:
        count = int(np.prod(spec['shape'])) if spec['shape'] else 1
        chunk = payload[offset:offset + 4 * count]
        if len(chunk) != 4 * count:
            raise ShapeError(f"{path}: truncated at parameter '{spec['name']}'")
        params[spec['name']] = np.frombuffer(chunk, dtype='<f4').reshape(spec['shape']).astype(np.float32)
        offset += 4 * count
    if offset != len(payload):
        raise ShapeError(f"{path}: {len(payload) - offset} trailing bytes after the parameters")
    return manifest['topology'], params
