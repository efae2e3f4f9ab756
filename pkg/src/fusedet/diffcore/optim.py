"""AdamW with decoupled weight decay and the exponential learning-rate decay."""

from __future__ import annotations

import numpy as np

LR_DECAY_FACTOR = 0.99996
LR_DECAY_EVERY = 2


def lr_at_step(base_lr, step, decay_factor=LR_DECAY_FACTOR):
    """Learning rate after ``step`` optimizer steps: decayed every two steps."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return base_lr * decay_factor ** (step // LR_DECAY_EVERY)


class OptimizerState:
    """Per-parameter moment buffers plus the shared step counter."""

    def __init__(self, params, base_lr, weight_decay, decay_factor=LR_DECAY_FACTOR):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step_count = 0
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.decay_factor = decay_factor


def adamw_step(params, grads, state, betas=(0.9, 0.999), eps=1e-8):
    """One decoupled-weight-decay Adam update, in place on ``params``.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
    with lr from the exponential schedule at the current step count.
    """
    beta1, beta2 = betas
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ValueError(f"betas must lie in [0, 1), got {betas}")
    lr = lr_at_step(state.base_lr, state.step_count, state.decay_factor)
    if lr <= 0.0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (lr * (m_hat / (np.sqrt(v_hat) + eps) + state.weight_decay * p.data)).astype(p.dtype)


class AdamW:
    """Stateful wrapper applying ``adamw_step`` to a fixed parameter list."""

    def __init__(self, params, lr=1e-4, weight_decay=1e-4, betas=(0.9, 0.999),
                 eps=1e-8, decay_factor=LR_DECAY_FACTOR):
        if lr <= 0.0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.state = OptimizerState(self.params, lr, weight_decay, decay_factor)

    def step(self):
        grads = [p.grad for p in self.params]
        adamw_step(self.params, grads, self.state, self.betas, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @property
    def step_count(self):
        return self.state.step_count

    def current_lr(self):
        return lr_at_step(self.state.base_lr, self.state.step_count, self.state.decay_factor)
