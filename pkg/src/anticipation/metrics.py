"""Evaluation metrics: per-horizon MSE, occupancy TP/TN rates, KDE log-likelihood."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

KDE_SIGMA = 0.1


def mse_metric(pred, target) -> float:
    p = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    t = np.asarray(getattr(target, "data", target), dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"mse_metric: shape mismatch {p.shape} vs {t.shape}")
    return float(np.mean((p - t) ** 2))


def tp_tn(pred, target, threshold: float = 0.5) -> tuple[float | None, float | None]:
    """Percent of occupied target pixels predicted occupied, and of free ones predicted free.

    A rate whose class is absent from the target is returned as None.
    """
    p = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    t = np.asarray(getattr(target, "data", target), dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"tp_tn: shape mismatch {p.shape} vs {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("tp_tn: target must be binary")
    occ = t == 1
    hit = p >= threshold
    n_occ, n_free = int(occ.sum()), int((~occ).sum())
    tp = 100.0 * float((hit & occ).sum()) / n_occ if n_occ else None
    tn = 100.0 * float((~hit & ~occ).sum()) / n_free if n_free else None
    return tp, tn


@dataclass
class KdeModel:
    refs: np.ndarray            # (n, d)
    sigma: float = KDE_SIGMA

    def __post_init__(self):
        self.refs = np.asarray(self.refs, dtype=np.float64)
        if self.refs.ndim != 2 or self.refs.shape[0] < 1:
            raise ValueError("KdeModel needs at least one reference vector")
        if not self.sigma > 0:
            raise ValueError("KDE bandwidth must be positive")
        self._sq = np.einsum("ij,ij->i", self.refs, self.refs)

    @property
    def n(self) -> int:
        return self.refs.shape[0]

    @property
    def d(self) -> int:
        return self.refs.shape[1]


def kde_fit(frames, sigma: float = KDE_SIGMA, max_refs: int | None = None,
            rng: np.random.Generator | None = None) -> KdeModel:
    arr = np.asarray(frames, dtype=np.float64)
    if arr.ndim < 2:
        raise ValueError("kde_fit needs a stack of frames")
    flat = arr.reshape(arr.shape[0], -1)
    if max_refs is not None and flat.shape[0] > max_refs:
        rng = rng or np.random.default_rng(0)
        flat = flat[np.sort(rng.choice(flat.shape[0], max_refs, replace=False))]
    return KdeModel(flat, sigma)


def kde_logpdf(model: KdeModel, frame) -> float:
    """log of the mean Gaussian kernel density at ``frame``, via log-sum-exp."""
    x = np.asarray(getattr(frame, "data", frame), dtype=np.float64).reshape(-1)
    if x.size != model.d:
        raise ValueError(f"kde_logpdf: frame has {x.size} values, model expects {model.d}")
    s2 = model.sigma ** 2
    d2 = np.maximum(model._sq - 2.0 * (model.refs @ x) + x @ x, 0.0)
    return float(-0.5 * model.d * math.log(2 * math.pi * s2) - math.log(model.n) + logsumexp(-d2 / (2 * s2)))


def _stats(values: list[float]) -> tuple[float, float, int]:
    v = np.asarray([x for x in values if x is not None and np.isfinite(x)], dtype=np.float64)
    if v.size == 0:
        return (math.nan, math.nan, 0)
    err = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return (float(v.mean()), err, int(v.size))


@dataclass
class EvalReport:
    horizons: tuple[int, ...]
    rows: dict[tuple[int, str], tuple[float, float, int]] = field(default_factory=dict)

    def get(self, horizon: int, metric: str) -> float | None:
        """Mean of a metric at a horizon; None if absent."""
        row = self.rows.get((horizon, metric))
        if row is None or row[2] == 0:
            return None
        return row[0]

    def stderr(self, horizon: int, metric: str) -> float | None:
        row = self.rows.get((horizon, metric))
        return None if row is None or row[2] == 0 else row[1]

    @property
    def metrics(self) -> list[str]:
        seen = []
        for _, m in self.rows:
            if m not in seen:
                seen.append(m)
        return seen

    def to_csv(self) -> str:
        lines = ["horizon,metric,mean,spread"]
        for (h, m), (mean, err, n) in self.rows.items():
            if n == 0:
                lines.append(f"{h},{m},,")
            else:
                lines.append(f"{h},{m},{mean!r},{err!r}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        metrics = self.metrics
        head = f"{'metric':<8}" + "".join(f"{'k=' + str(h):>24}" for h in self.horizons)
        lines = [head]
        for m in metrics:
            cells = []
            for h in self.horizons:
                row = self.rows.get((h, m))
                cells.append(f"{'-':>24}" if row is None or row[2] == 0 else f"{row[0]:>13.5g} ± {row[1]:<8.3g}")
            lines.append(f"{m:<8}" + "".join(cells))
        return "\n".join(lines) + "\n"


def evaluate_frames(pred: np.ndarray, target: np.ndarray, horizons, kde: KdeModel | None = None,
                    binary: bool = False, env_channels: np.ndarray | None = None) -> EvalReport:
    """Metrics for rollouts ``pred``/``target`` of shape (N, k, H, W, C); horizon h is index h-1."""
    horizons = tuple(int(h) for h in horizons)
    if max(horizons) > pred.shape[1] or min(horizons) < 1:
        raise ValueError(f"horizons {horizons} outside rollout length {pred.shape[1]}")
    env = np.ones(pred.shape[-1], dtype=bool) if env_channels is None else np.asarray(env_channels, dtype=bool)
    report = EvalReport(horizons)
    for h in horizons:
        p, t = pred[:, h - 1], target[:, h - 1]
        report.rows[(h, "mse")] = _stats([mse_metric(p[i], t[i]) for i in range(len(p))])
        if binary:
            rates = [tp_tn(p[i][..., env], t[i][..., env]) for i in range(len(p))]
            report.rows[(h, "tp")] = _stats([r[0] for r in rates])
            report.rows[(h, "tn")] = _stats([r[1] for r in rates])
        if kde is not None:
            report.rows[(h, "all")] = _stats([kde_logpdf(kde, p[i]) for i in range(len(p))])
    return report
