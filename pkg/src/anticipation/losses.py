"""Training objective: reconstruction, windowed SSIM, Gaussian KL, k-step sum.

All functions take NHWC tensors (an ``Ogm`` or a bare (h, w, c) array is
promoted to a batch of one) and return scalar tensors so they compose with
:func:`anticipation.diffcalc.backward`.  Reductions average over batch and
pixels; the horizon sum adds per-step totals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcalc as dc
from .diffcalc import Tensor

SSIM_WINDOW = 7
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
CE_EPS = 1e-7
LAMBDA_REAL = 0.05
LAMBDA_BINARY = 0.1


def _batch(x) -> Tensor:
    if isinstance(x, Tensor):
        t = x
    else:
        t = dc.as_tensor(np.asarray(getattr(x, "data", x), dtype=np.float64))
    if t.ndim == 3:
        t = dc.reshape(t, (1, *t.shape))
    if t.ndim != 4:
        raise dc.ShapeError(f"expected (h, w, c) or (n, h, w, c), got {t.shape}")
    return t


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise dc.ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


@dataclass
class GaussianCode:
    """Diagonal Gaussian stored as (mean, log-variance), each (n, d)."""

    mean: Tensor
    logvar: Tensor

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.logvar.data)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @classmethod
    def from_var(cls, mean, var) -> "GaussianCode":
        var = np.asarray(var, dtype=np.float64)
        if np.any(var <= 0) or not np.all(np.isfinite(var)):
            raise ValueError("GaussianCode variances must be positive and finite")
        mean = np.atleast_2d(np.asarray(mean, dtype=np.float64))
        return cls(dc.as_tensor(mean), dc.as_tensor(np.atleast_2d(np.log(var))))

    @classmethod
    def standard(cls, n: int, d: int, dtype=np.float64) -> "GaussianCode":
        z = np.zeros((n, d), dtype=dtype)
        return cls(dc.as_tensor(z), dc.as_tensor(z.copy()))


@dataclass
class LossBreakdown:
    rec: Tensor
    ssim: Tensor
    kl: Tensor
    total: Tensor
    lam: float

    @property
    def ssim_term(self) -> float:
        return self.lam * (1.0 - float(self.ssim.data))

    def as_floats(self) -> dict[str, float]:
        return {"rec": float(self.rec.data), "ssim": float(self.ssim.data),
                "kl": float(self.kl.data), "total": float(self.total.data)}


def recon_divergence(target, pred, mode: str = "mse") -> Tensor:
    t, p = _batch(target), _batch(pred)
    _same_shape("recon_divergence", t, p)
    if mode == "mse":
        return dc.mean(dc.square(p - t))
    if mode == "ce":
        pc = dc.clip(p, CE_EPS, 1.0 - CE_EPS)
        ll = t * dc.log(pc) + (1.0 - t) * dc.log(1.0 - pc)
        return -dc.mean(ll)
    raise ValueError(f"unknown divergence mode {mode!r}")


def ssim(a, b, window: int = SSIM_WINDOW) -> Tensor:
    """Mean local SSIM with a uniform window over valid positions and channels."""
    x, y = _batch(a), _batch(b)
    _same_shape("ssim", x, y)
    if x.shape[1] < window or x.shape[2] < window:
        raise dc.ShapeError(f"ssim: frame {x.shape[1:3]} smaller than {window}x{window} window")
    mx, my = dc.box_filter(x, window), dc.box_filter(y, window)
    sxx = dc.box_filter(x * x, window) - mx * mx
    syy = dc.box_filter(y * y, window) - my * my
    sxy = dc.box_filter(x * y, window) - mx * my
    num = (2.0 * (mx * my) + SSIM_C1) * (2.0 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return dc.mean(num / den)


def gaussian_kl(q: GaussianCode, p: GaussianCode) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over dims, averaged over the batch."""
    if q.mean.shape != p.mean.shape:
        raise dc.ShapeError(f"gaussian_kl: dims {q.mean.shape} vs {p.mean.shape}")
    diff = p.mean - q.mean
    dlv = q.logvar - p.logvar
    # grouped so that q == p gives exactly zero: exp(0) - 1 - 0
    terms = (dc.exp(dlv) - 1.0 - dlv) + dc.square(diff) * dc.exp(-p.logvar)
    return 0.5 * dc.sum_(terms) / float(q.mean.shape[0])


def step_loss(target, pred, q: GaussianCode | None, p: GaussianCode | None, lam: float,
              variant: str = "base", mode: str = "mse") -> LossBreakdown:
    """Per-step objective.

    base: D(target, pred) + lam * (1 - SSIM(target, pred)) + KL(q || p).
    dl:   ``pred`` is the unclipped composition; D sees it raw, SSIM sees it clipped.
    ``q``/``p`` may be None when there is no stochastic code.
    """
    t, pr = _batch(target), _batch(pred)
    if variant == "dl":
        rec = recon_divergence(t, pr, mode)
        sim = ssim(t, dc.clip(pr, 0.0, 1.0))
    elif variant == "base":
        rec = recon_divergence(t, pr, mode)
        sim = ssim(t, pr)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    kl = gaussian_kl(q, p) if q is not None and p is not None else dc.as_tensor(np.zeros((), dtype=rec.dtype))
    total = rec + lam * (1.0 - sim) + kl
    return LossBreakdown(rec, sim, kl, total, lam)


def horizon_loss(steps: list[LossBreakdown], k: int | None = None) -> Tensor:
    if not steps:
        raise ValueError("horizon_loss needs at least one step")
    if k is not None and len(steps) != k:
        raise ValueError(f"horizon_loss: expected {k} steps, got {len(steps)}")
    total = steps[0].total
    for s in steps[1:]:
        total = total + s.total
    return total


def default_lambda(value_mode: str) -> float:
    return LAMBDA_BINARY if value_mode == "binary" else LAMBDA_REAL
