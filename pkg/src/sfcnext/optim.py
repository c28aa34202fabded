"""Adam, AdamW and Adamax parameter updates."""

from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericsError

KINDS = ("adam", "adamw", "adamax")


@dataclass
class OptimizerState:
    """Per-parameter moment buffers plus hyperparameters.

    ``v`` holds the second raw moment for Adam/AdamW and the infinity-norm
    accumulator for Adamax.
    """

    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def init_optimizer(kind, params, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                   weight_decay=None):
    kind = kind.lower()
    if kind not in KINDS:
        raise ValueError(f"unknown optimizer kind {kind!r}, expected one of {KINDS}")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if weight_decay is None:
        # AdamW without a stated decay defaults to the usual 0.01
        weight_decay = 0.01 if kind == "adamw" else 0.0
    state = OptimizerState(kind=kind, lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                           weight_decay=weight_decay)
    for p in params:
        state.m.append(np.zeros(p.shape, dtype=np.float32))
        state.v.append(np.zeros(p.shape, dtype=np.float32))
    return state


def optimizer_step(state, params, grads=None):
    """Apply one update to every parameter; grads default to ``p.grad``."""
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params) or len(params) != len(state.m):
        raise ValueError("optimizer_step: parameter/gradient/state count mismatch")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros(p.shape, dtype=p.dtype)
        g = np.asarray(g)
        if g.shape != p.data.shape:
            raise ValueError(
                f"optimizer_step: gradient shape {g.shape} != parameter shape {p.data.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter index {i}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros(p.shape, dtype=p.dtype)
        g = np.asarray(g, dtype=np.float32)
        if state.kind == "adam" and state.weight_decay != 0.0:
            g = g + state.weight_decay * p.data  # coupled L2
        m = state.m[i]
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        if state.kind == "adamax":
            np.maximum(b2 * v, np.abs(g), out=v)
            p.data -= (state.lr / bias1) * m / (v + state.eps)
        else:
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / bias1
            vhat = v / (1.0 - b2 ** t)
            if state.kind == "adamw" and state.weight_decay != 0.0:
                p.data -= state.lr * state.weight_decay * p.data  # decoupled decay
            p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
