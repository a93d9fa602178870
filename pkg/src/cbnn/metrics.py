"""Evaluation metrics: MSE, epistemic spread, CRPS, and violation stats.

All functions are deterministic in their inputs. Standard deviations use
the population convention (divide by N). CRPS uses the energy-form
ensemble estimator with an O(N log N) sorted pairwise sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, DimensionError
from .constraints import TOL_VIOLATION, point_scores


def mse(pred_mean, target) -> float:
    pred_mean = np.asarray(pred_mean, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred_mean.size == 0:
        raise ContractError("mse of empty input")
    if pred_mean.shape != target.shape:
        raise DimensionError(f"mse: {pred_mean.shape} vs {target.shape}")
    r = pred_mean - target
    return float(np.mean(r * r))


def epistemic_std(summary) -> float:
    """Mean over points of the per-point ensemble std (population ddof=0)."""
    if summary.samples.shape[0] < 2:
        raise ContractError("epistemic_std needs an ensemble of >= 2")
    return float(summary.samples.std(axis=0).mean())


def crps_ensemble(samples, target) -> float:
    """Energy-form CRPS averaged over points.

    Per point: (1/N) sum_i |x_i - y|  -  (1/(2 N^2)) sum_ij |x_i - x_j|,
    the pairwise sum computed from the sorted ensemble.
    """
    samples = np.asarray(samples, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if samples.ndim != 2:
        raise DimensionError("samples must be (n_samples, n_points)")
    n, p = samples.shape
    if n < 2:
        raise ContractError("crps needs an ensemble of >= 2")
    if target.size != p:
        raise DimensionError(f"crps: {p} points vs {target.size} targets")
    term1 = np.abs(samples - target[np.newaxis, :]).mean(axis=0)
    srt = np.sort(samples, axis=0)
    coeff = (2.0 * np.arange(n) + 1.0 - n)[:, np.newaxis]
    pair_sum = 2.0 * (coeff * srt).sum(axis=0)  # sum_ij |x_i - x_j|
    per_point = term1 - pair_sum / (2.0 * n * n)
    return float(per_point.mean())


def violation_stats(constraint_specs, summary, x_grid=None, tol=TOL_VIOLATION,
                    per_sample=False):
    """Per-constraint violation magnitude v_i and count n_i on a test grid.

    v_i is minus the mean per-point score over every ensemble member and
    grid point (0 when fully satisfied). n_i counts grid points whose
    posterior-mean prediction violates beyond `tol`; with per_sample=True
    a point counts when its fraction of violating ensemble members
    exceeds the constraint's epsilon instead.
    """
    x = summary.x[:, 0] if x_grid is None else np.asarray(x_grid, dtype=np.float64).reshape(-1)
    v = []
    n = []
    for spec in constraint_specs:
        rows = [point_scores(spec, x, row) for row in summary.samples]
        v.append(float(-np.mean(rows)) + 0.0)  # +0.0 clears negative zero
        if per_sample:
            viol = np.stack([r < -tol for r in rows])  # (ensemble, points)
            n.append(int(np.sum(viol.mean(axis=0) > spec.epsilon)))
        else:
            mean_scores = point_scores(spec, x, summary.mean)
            n.append(int(np.sum(mean_scores < -tol)))
    return np.array(v), np.array(n, dtype=int)


@dataclass
class MetricsRecord:
    mse: float
    std: float
    crps: float
    v: list
    n: list
    n_test: int
    config_hash: str = ""

    def __post_init__(self):
        self.v = [float(x) for x in np.asarray(self.v).reshape(-1)]
        self.n = [int(x) for x in np.asarray(self.n).reshape(-1)]
        if self.mse < 0 or self.std < 0 or self.crps < -1e-12:
            raise ContractError("metrics must be non-negative")
        if any(x < -1e-12 for x in self.v) or any(x < 0 for x in self.n):
            raise ContractError("violation stats must be non-negative")
        if any(x > self.n_test for x in self.n):
            raise ContractError("violation count exceeds test size")

    def to_dict(self):
        return {
            "mse": self.mse,
            "std": self.std,
            "crps": self.crps,
            "v": self.v,
            "n": self.n,
            "n_test": self.n_test,
            "config_hash": self.config_hash,
        }

    @classmethod
    def from_summary(cls, summary, target, constraint_specs, config_hash="",
                     per_sample=False):
        v, n = violation_stats(constraint_specs, summary, per_sample=per_sample)
        return cls(
            mse=mse(summary.mean, target),
            std=epistemic_std(summary),
            crps=crps_ensemble(summary.samples, target),
            v=v,
            n=n,
            n_test=int(summary.x.shape[0]),
            config_hash=config_hash,
        )

    def table_row(self, label="", floatfmt="{:.3e}"):
        """One report line: v_1..k  n_1..k  MSE  STD (CRPS appended)."""
        vs = " ".join(floatfmt.format(x) for x in self.v)
        ns = " ".join(str(x) for x in self.n)
        return (f"{label} v=[{vs}] n=[{ns}] mse={floatfmt.format(self.mse)} "
                f"std={self.std:.3f} crps={floatfmt.format(self.crps)}")
