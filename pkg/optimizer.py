"""
PA-EWC Desk Lab - AdamW Optimizer

Adaptive moments with decoupled weight decay, applied to a ParamStore.
Updates replace each block's array instead of writing into it, so values
captured by earlier tapes and snapshots never change.
"""

import logging
from typing import Dict, Mapping

import numpy as np

from errors import ConfigError, InputError
from toy_model import ParamStore

logger = logging.getLogger(__name__)


class AdamW:
    """
    AdamW over named parameter blocks

    Per block: m = b1 m + (1-b1) g; v = b2 v + (1-b2) g^2;
    theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
    """

    def __init__(self, params: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-2):
        if lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {lr}")
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {betas}")
        if eps <= 0 or weight_decay < 0:
            raise ConfigError("eps must be > 0 and weight_decay >= 0")
        self.params = params
        self.lr = lr
        self.betas = (b1, b2)
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {name: np.zeros(t.shape) for name, t in params.items()}
        self.v: Dict[str, np.ndarray] = {name: np.zeros(t.shape) for name, t in params.items()}

    def step(self, grads: Mapping[str, np.ndarray]):
        missing = set(self.params.names) - set(grads)
        if missing:
            raise InputError(f"gradients missing for blocks {sorted(missing)}")
        self.step_count += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for name, tensor in self.params.items():
            if not tensor.requires_grad:
                continue
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            update = m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * tensor.data
            tensor.data = tensor.data - self.lr * update
