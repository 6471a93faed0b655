"""Adam, plus a backtracking wrapper for monotone-objective optimization."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One functional Adam update on lists of numpy arrays.

    ``state`` is ``{"t": int, "m": [...], "v": [...]}``; pass ``None`` to
    start from zero moments. Returns (new_params, new_state).
    """
    if state is None:
        state = {
            "t": 0,
            "m": [np.zeros_like(p) for p in params],
            "v": [np.zeros_like(p) for p in params],
        }
    t = state["t"] + 1
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * (g * g)
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, {"t": t, "m": new_m, "v": new_v}


class Adam:
    def __init__(self, params: list[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr_scale: float = 1.0) -> None:
        grads = [
            p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params
        ]
        new_p, self.state = adam_step(
            [p.data for p in self.params],
            grads,
            self.state,
            self.lr * lr_scale,
            self.beta1,
            self.beta2,
            self.eps,
        )
        for p, d in zip(self.params, new_p):
            p.data = d.astype(p.data.dtype)

    def snapshot(self):
        import copy

        return (
            [p.data.copy() for p in self.params],
            copy.deepcopy(self.state),
        )

    def restore(self, snap) -> None:
        datas, state = snap
        for p, d in zip(self.params, datas):
            p.data = d.copy()
        self.state = None if state is None else {
            "t": state["t"],
            "m": [m.copy() for m in state["m"]],
            "v": [v.copy() for v in state["v"]],
        }


def backtracking_step(opt: Adam, base_value: float, eval_value, max_halvings: int = 5):
    """Take an Adam step using the already-computed gradients, halving the
    step size (up to ``max_halvings``) while the objective increases; reject
    the step entirely if it still does.

    ``eval_value()`` recomputes the objective only (no gradients), at the
    current parameter values. Returns (value_after, accepted).
    """
    snap = opt.snapshot()
    scale = 1.0
    for _ in range(max_halvings + 1):
        opt.step(lr_scale=scale)
        trial = eval_value()
        if trial <= base_value + 1e-12:
            return trial, True
        opt.restore(snap)
        scale *= 0.5
    return base_value, False
