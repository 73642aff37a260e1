"""AdamW optimizer, one-cycle learning-rate schedule, gradient checking.

The optimizer operates on flat name->array parameter dicts and updates in
place. Weight decay is decoupled (applied as a separate shrink after the
moment update) and resolved per tensor name, so adapters can carry a ridge
penalty while the backbone trains without one. Tensors absent from the
grads dict are untouched: freezing is simply not producing a gradient.
"""

import math
from dataclasses import dataclass

import numpy as np

from duala import kernels
from duala.errors import DimensionMismatchError, NonFiniteError, ValidationError


@dataclass
class LRSchedule:
    total_steps: int
    peak_lr: float
    warmup_frac: float = 0.3
    start_factor: float = 25.0
    end_factor: float = 1e4

    def validate(self):
        if self.total_steps < 1:
            raise ValidationError("schedule needs at least one step")
        if self.peak_lr < 0:
            raise ValidationError("peak_lr must be >= 0")
        if not 0.0 < self.warmup_frac <= 1.0:
            raise ValidationError("warmup_frac must lie in (0, 1]")
        if self.start_factor < 1 or self.end_factor < 1:
            raise ValidationError("dampening factors must be >= 1")


def lr_at(schedule, step):
    """One-cycle rate: cosine ramp to peak_lr at the warmup point, cosine
    anneal down to peak_lr/end_factor at the end."""
    schedule.validate()
    total = schedule.total_steps
    if not 0 <= step < total:
        raise ValidationError(f"step {step} outside schedule of {total}")
    warm = min(max(1, int(round(schedule.warmup_frac * total))), total)
    peak = schedule.peak_lr
    if step < warm:
        lo = peak / schedule.start_factor
        frac = step / warm
    else:
        # anneal so the final step lands on peak/end_factor exactly
        lo = peak / schedule.end_factor
        frac = 1.0 - (step - warm) / max(1, total - 1 - warm)
    return lo + (peak - lo) * 0.5 * (1.0 - math.cos(math.pi * frac))


class AdamW:
    """Adaptive-moment optimizer with decoupled per-tensor weight decay.

    weight_decay may be a float (applied to every stepped tensor) or a
    mapping from tensor name to coefficient (missing names decay at 0).
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {}
        self.v = {}
        self.t = 0

    def _decay_for(self, name):
        if isinstance(self.weight_decay, dict):
            return float(self.weight_decay.get(name, 0.0))
        return float(self.weight_decay)

    def step(self, params, grads, lr):
        """Update params in place from grads; one shared step count per call."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in sorted(grads):
            p = params[name]
            g = np.asarray(grads[name])
            if g.shape != p.shape:
                raise DimensionMismatchError(
                    f"gradient for {name} has shape {g.shape}, "
                    f"parameter has {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            kernels.adamw_update(p, g.astype(p.dtype, copy=False),
                                 self.m[name], self.v[name],
                                 lr, self.beta1, self.beta2, self.eps,
                                 self._decay_for(name), bc1, bc2)
        return params


def flatten_tensors(tensors, order=None):
    """(vector, layout) for a dict of arrays; unflatten_tensors inverts."""
    names = sorted(tensors) if order is None else list(order)
    layout = [(n, tensors[n].shape) for n in names]
    if not names:
        return np.zeros(0), layout
    vec = np.concatenate([np.asarray(tensors[n], dtype=np.float64).ravel()
                          for n in names])
    return vec, layout


def unflatten_tensors(vec, layout):
    out = {}
    pos = 0
    for name, shape in layout:
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        out[name] = np.asarray(vec[pos:pos + size]).reshape(shape)
        pos += size
    return out


def grad_check(fn, theta, eps=1e-5):
    """Max relative error between fn's gradient and central differences.

    fn maps a 1-D float64 vector to (value, gradient) and must be
    deterministic; a repeated evaluation that disagrees raises. The error
    on each coordinate is |g - g_fd| over max(|g|, |g_fd|, floor), where
    the floor is 1e-3 of the gradient's largest magnitude so coordinates
    the function barely touches don't amplify finite-difference noise.
    """
    theta = np.asarray(theta, dtype=np.float64)
    v1, grad = fn(theta)
    v2, _ = fn(theta)
    if v1 != v2:
        raise ValidationError("fn is not deterministic under repeated calls")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape:
        raise DimensionMismatchError("gradient shape does not match theta")
    fd = np.empty_like(theta)
    for i in range(theta.size):
        bump = np.zeros_like(theta)
        bump[i] = eps
        up, _ = fn(theta + bump)
        down, _ = fn(theta - bump)
        fd[i] = (up - down) / (2.0 * eps)
    scale = max(np.max(np.abs(grad), initial=0.0),
                np.max(np.abs(fd), initial=0.0), 1e-8)
    denom = np.maximum(np.maximum(np.abs(grad), np.abs(fd)), 1e-3 * scale)
    rel = np.abs(grad - fd) / denom
    return float(rel.max(initial=0.0))
