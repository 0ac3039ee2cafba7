"""Adam with bias correction; frozen groups are skipped entirely."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParamSet


@dataclass
class AdamConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")


def adam_step(pset: ParamSet, grads: dict, hyper: AdamConfig) -> None:
    """One in-place Adam update for all non-frozen groups. grads maps
    (group name, tensor name) to an ndarray matching the tensor shape."""
    for gname, group in pset.groups.items():
        if group.frozen:
            continue
        group.opt_t += 1
        t = group.opt_t
        for tname, theta in group.tensors.items():
            g = grads[(gname, tname)]
            m = group.opt_m.setdefault(tname, np.zeros_like(theta))
            v = group.opt_v.setdefault(tname, np.zeros_like(theta))
            m += (1.0 - hyper.beta1) * (g - m)
            v += (1.0 - hyper.beta2) * (g * g - v)
            m_hat = m / (1.0 - hyper.beta1 ** t)
            v_hat = v / (1.0 - hyper.beta2 ** t)
            theta -= hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)


def grad_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    return float(np.sqrt(total))
