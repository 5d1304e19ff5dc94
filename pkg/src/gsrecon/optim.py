"""AdamW with decoupled weight decay, linear warmup, and cosine decay."""

from __future__ import annotations

import math

import numpy as np


def lr_at(step: int, base_lr: float, warmup: int, total: int) -> float:
    """Schedule value for a 1-indexed step: linear warmup to base_lr over
    `warmup` steps, then cosine decay to 0 at `total`."""
    if warmup > 0 and step <= warmup:
        return base_lr * step / warmup
    if total <= warmup:
        return base_lr
    frac = min(1.0, (step - warmup) / (total - warmup))
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is <= max_norm.
    Returns the pre-clip norm."""
    sq = 0.0
    for g in grads.values():
        sq += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer with bias correction.

    Steps with a non-finite gradient are skipped and counted, not applied.
    """

    def __init__(self, lr: float = 3e-4, betas=(0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.05, warmup: int = 0,
                 total_steps: int = 1):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup = warmup
        self.total_steps = total_steps
        self.step_count = 0
        self.skipped = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def current_lr(self) -> float:
        return lr_at(self.step_count + 1, self.lr, self.warmup, self.total_steps)

    def step(self, weights: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> bool:
        """Apply one update in place; returns False if skipped."""
        for g in grads.values():
            if not np.isfinite(g).all():
                self.skipped += 1
                return False
        self.step_count += 1
        t = self.step_count
        lr = lr_at(t, self.lr, self.warmup, self.total_steps)
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, w in weights.items():
            g = grads.get(name)
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(w)
                self.v[name] = np.zeros_like(w)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * w
            w -= lr * update
        return True
