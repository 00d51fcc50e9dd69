"""Central finite-difference verification of analytic gradients.

All checks run in float64; central differences are too noisy in float32 to
be a trustworthy oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradcheckReport:
    """Outcome of one gradient check.

    ``max_rel_err`` is the maximum over checked coordinates of
    |analytic - numeric| / max(|analytic|, |numeric|); exact agreement
    (including both sides zero) scores 0.
    """

    passed: bool
    tol: float
    eps: float
    max_rel_err: float
    max_abs_err: float
    checked: int
    worst: tuple[str, int] | None = None
    per_input: dict[str, float] = field(default_factory=dict)

    def __bool__(self) -> bool:
        return self.passed


def _rel_err(analytic: float, numeric: float) -> float:
    diff = abs(analytic - numeric)
    denom = max(abs(analytic), abs(numeric))
    if denom < 1e-12:
        return diff
    return diff / denom


def gradcheck(f: Callable[..., Tensor], xs: Tensor | Sequence[Tensor],
              eps: float = 1e-6, tol: float = 1e-4,
              sample: int | None = None, rng: np.random.Generator | None = None,
              ) -> GradcheckReport:
    """Compare analytic gradients of scalar ``f(*xs)`` against central differences.

    ``xs`` are the differentiation points; each must be a float64 Tensor.
    With ``sample`` set, only that many randomly chosen coordinates per input
    are perturbed (for large models where the full sweep is prohibitive).
    """
    inputs = [xs] if isinstance(xs, Tensor) else list(xs)
    for i, x in enumerate(inputs):
        if x.dtype != np.float64:
            raise TypeError(f"gradcheck input {i} must be float64, got {x.dtype.name}")
        x.requires_grad = True
        x.zero_grad()

    out = f(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("gradcheck: function produced non-finite output")
    out.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy()
                for x in inputs]

    max_rel = 0.0
    max_abs = 0.0
    checked = 0
    worst = None
    per_input: dict[str, float] = {}
    for i, x in enumerate(inputs):
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if sample is not None and sample < flat.size:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(flat.size, size=sample, replace=False)
        worst_i = 0.0
        for j in coords:
            orig = flat[j]
            flat[j] = orig + eps
            hi = f(*inputs).item()
            flat[j] = orig - eps
            lo = f(*inputs).item()
            flat[j] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError("gradcheck: non-finite output during perturbation")
            numeric = (hi - lo) / (2.0 * eps)
            a = float(analytic[i].reshape(-1)[j])
            rel = _rel_err(a, numeric)
            max_abs = max(max_abs, abs(a - numeric))
            worst_i = max(worst_i, rel)
            if rel > max_rel:
                max_rel = rel
                worst = (f"input{i}", int(j))
            checked += 1
        per_input[f"input{i}"] = worst_i

    return GradcheckReport(passed=max_rel < tol, tol=tol, eps=eps,
                           max_rel_err=max_rel, max_abs_err=max_abs,
                           checked=checked, worst=worst, per_input=per_input)


def sampled_gradcheck(f: Callable[[], Tensor], params: Sequence[tuple[str, Tensor]],
                      n_samples: int = 20, eps: float = 1e-5, tol: float = 1e-3,
                      rng: np.random.Generator | None = None) -> GradcheckReport:
    """Whole-model check: sample coordinates across all parameters jointly.

    ``f`` is a zero-argument closure over the parameters returning the scalar
    loss.  Coordinates are drawn from the concatenated parameter space, so
    large models pay for ``2 * n_samples`` extra forward passes, not for a
    full sweep.
    """
    params = list(params)
    gen = rng if rng is not None else np.random.default_rng(0)
    for name, p in params:
        if p.dtype != np.float64:
            raise TypeError(f"sampled_gradcheck parameter {name} must be float64")
        p.zero_grad()
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("sampled_gradcheck: non-finite output")
    out.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params}

    sizes = np.array([p.size for _, p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = gen.choice(int(offsets[-1]), size=min(n_samples, int(offsets[-1])),
                       replace=False)
    max_rel = 0.0
    max_abs = 0.0
    worst = None
    for flat in sorted(int(c) for c in picks):
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        j = flat - int(offsets[i])
        name, p = params[i]
        buf = p.data.reshape(-1)
        orig = buf[j]
        buf[j] = orig + eps
        hi = f().item()
        buf[j] = orig - eps
        lo = f().item()
        buf[j] = orig
        numeric = (hi - lo) / (2.0 * eps)
        a = float(analytic[name].reshape(-1)[j])
        rel = _rel_err(a, numeric)
        max_abs = max(max_abs, abs(a - numeric))
        if rel > max_rel:
            max_rel = rel
            worst = (name, j)
    return GradcheckReport(passed=max_rel < tol, tol=tol, eps=eps,
                           max_rel_err=max_rel, max_abs_err=max_abs,
                           checked=len(picks), worst=worst)
