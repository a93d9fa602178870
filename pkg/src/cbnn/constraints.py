"""Differentiable output-constraint catalog.

Every constraint is a score function f(x, y) <= 0 that equals 0 exactly
when the prediction satisfies the encoded rule (hinge / max-margin form).
Scores aggregate over an evaluation grid by the mean, so their magnitude
is comparable across grid resolutions. Under the tape's kink convention a
fully satisfied constraint contributes exactly zero gradient.

Kinds:
    lower_bound   min(0, y - a(x) + m)
    upper_bound   min(0, b(x) - y + m)
    band          min(0, (b-a)/2 + m - |y - (a+b)/2|), zero iff a <= y <= b at m=0
    conditional_value  min(0, m - |y - C|)
    monotone      min(0, sign * dy/dx + m), first differences on the grid
    curvature     min(0, sign * d2y/dx2 + m), second differences on the grid
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import ContractError, DimensionError, DomainError, Tensor

TOL_VIOLATION = 1e-6

KINDS = ("lower_bound", "upper_bound", "band", "conditional_value", "monotone", "curvature")


@dataclass(frozen=True)
class BoundExpr:
    """A bound curve a(x): constant, affine k*x+c, or scale*log(k*x+c)+shift."""

    kind: str
    value: float = 0.0   # constant
    k: float = 1.0       # affine / log_affine
    c: float = 0.0
    scale: float = 1.0   # log_affine
    shift: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "affine", "log_affine"):
            raise ContractError(f"unknown bound expression kind {self.kind!r}")

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "constant":
            return np.full_like(x, self.value)
        if self.kind == "affine":
            return self.k * x + self.c
        arg = self.k * x + self.c
        if np.any(arg <= 0.0):
            raise DomainError("log_affine bound: non-positive log argument on grid")
        return self.scale * np.log(arg) + self.shift

    def to_dict(self):
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value}
        if self.kind == "affine":
            return {"kind": "affine", "k": self.k, "c": self.c}
        return {"kind": "log_affine", "k": self.k, "c": self.c,
                "scale": self.scale, "shift": self.shift}

    @classmethod
    def from_dict(cls, d):
        if isinstance(d, (int, float)):
            return cls(kind="constant", value=float(d))
        kind = d["kind"]
        if kind == "constant":
            return cls(kind="constant", value=float(d["value"]))
        if kind == "affine":
            return cls(kind="affine", k=float(d["k"]), c=float(d["c"]))
        if kind == "log_affine":
            return cls(kind="log_affine", k=float(d["k"]), c=float(d["c"]),
                       scale=float(d.get("scale", 1.0)), shift=float(d.get("shift", 0.0)))
        raise ContractError(f"unknown bound expression kind {kind!r}")


@dataclass(frozen=True)
class ConstraintSpec:
    """One knowledge rule: kind, parameters, evaluation grid, and weights."""

    kind: str
    grid: np.ndarray
    lower: BoundExpr = None          # lower_bound / band
    upper: BoundExpr = None          # upper_bound / band
    value: float = 0.0               # conditional_value target C
    margin: float = 0.0
    sign: int = 1                    # monotone / curvature direction
    region: tuple = None             # optional (x_a, x_b) applicability window
    weight: float = 1.0              # composite weight (soft / COCP)
    epsilon: float = 0.05            # probabilistic-hard tolerance
    derivative_mode: str = "finite_diff"
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown constraint kind {self.kind!r}")
        grid = np.asarray(self.grid, dtype=np.float64).ravel()
        if grid.size == 0:
            raise ContractError("constraint grid is empty")
        object.__setattr__(self, "grid", grid)
        if self.margin < 0:
            raise ContractError("margin must be >= 0")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ContractError("epsilon must lie in [0, 1]")
        if self.weight < 0:
            raise ContractError("composite weight must be >= 0")
        if self.sign not in (1, -1):
            raise ContractError("sign must be +1 or -1")
        if self.region is not None:
            lo, hi = self.region
            if lo > hi:
                raise ContractError("region must be ordered (x_a <= x_b)")
            object.__setattr__(self, "region", (float(lo), float(hi)))
        if self.derivative_mode not in ("finite_diff", "input_grad"):
            raise ContractError(f"unknown derivative mode {self.derivative_mode!r}")
        if self.kind == "lower_bound" and self.lower is None:
            raise ContractError("lower_bound needs a lower expression")
        if self.kind == "upper_bound" and self.upper is None:
            raise ContractError("upper_bound needs an upper expression")
        if self.kind == "band" and (self.lower is None or self.upper is None):
            raise ContractError("band needs lower and upper expressions")
        if self.kind in ("monotone", "curvature"):
            pts = self.region_mask(grid).sum()
            need = 2 if self.kind == "monotone" else 3
            if pts < need:
                raise ContractError(f"{self.kind} needs >= {need} grid points")
            g = grid[self.region_mask(grid)]
            if np.any(np.diff(g) <= 0):
                raise ContractError(f"{self.kind} grid must be strictly increasing")

    def region_mask(self, x):
        x = np.asarray(x, dtype=np.float64).ravel()
        if self.region is None:
            return np.ones(x.shape, dtype=bool)
        lo, hi = self.region
        return (x >= lo) & (x <= hi)

    def to_dict(self):
        params = {"margin": self.margin}
        if self.kind in ("lower_bound", "band"):
            params["lower"] = self.lower.to_dict()
        if self.kind in ("upper_bound", "band"):
            params["upper"] = self.upper.to_dict()
        if self.kind == "conditional_value":
            params["value"] = self.value
        if self.kind in ("monotone", "curvature"):
            params["sign"] = self.sign
        if self.region is not None:
            params["region"] = list(self.region)
        if self.derivative_mode != "finite_diff":
            params["derivative_mode"] = self.derivative_mode
        return {
            "kind": self.kind,
            "params": params,
            "grid": self.grid.tolist(),
            "weight": self.weight,
            "epsilon": self.epsilon,
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d):
        params = d.get("params", {})
        grid = d["grid"]
        if isinstance(grid, dict):
            grid = np.linspace(float(grid["lo"]), float(grid["hi"]), int(grid["count"]))
        region = params.get("region")
        return cls(
            kind=d["kind"],
            grid=np.asarray(grid, dtype=np.float64),
            lower=BoundExpr.from_dict(params["lower"]) if "lower" in params else None,
            upper=BoundExpr.from_dict(params["upper"]) if "upper" in params else None,
            value=float(params.get("value", 0.0)),
            margin=float(params.get("margin", 0.0)),
            sign=int(params.get("sign", 1)),
            region=tuple(region) if region is not None else None,
            weight=float(d.get("weight", 1.0)),
            epsilon=float(d.get("epsilon", 0.05)),
            derivative_mode=params.get("derivative_mode", "finite_diff"),
            name=d.get("name", ""),
        )


def _diff_matrix(x, order):
    """First- or second-difference matrix over a strictly increasing grid."""
    x = np.asarray(x, dtype=np.float64).ravel()
    g = x.size
    if order == 1:
        D = np.zeros((g - 1, g))
        h = np.diff(x)
        rows = np.arange(g - 1)
        D[rows, rows] = -1.0 / h
        D[rows, rows + 1] = 1.0 / h
        return D
    D = np.zeros((g - 2, g))
    for j in range(g - 2):
        h1 = x[j + 1] - x[j]
        h2 = x[j + 2] - x[j + 1]
        # standard 3-point second derivative on a possibly nonuniform grid
        D[j, j] = 2.0 / (h1 * (h1 + h2))
        D[j, j + 1] = -2.0 / (h1 * h2)
        D[j, j + 2] = 2.0 / (h2 * (h1 + h2))
    return D


def _select_region(spec, x, y_is_tensor, y):
    """Restrict (x, y) to the constraint's region; tape path selects via matmul."""
    x = np.asarray(x, dtype=np.float64).ravel()
    mask = spec.region_mask(x)
    if not mask.any():
        raise ContractError("no grid points fall inside the constraint region")
    if mask.all():
        return x, y
    xs = x[mask]
    if y_is_tensor:
        S = np.zeros((xs.size, x.size))
        S[np.arange(xs.size), np.nonzero(mask)[0]] = 1.0
        return xs, ad.matmul(Tensor(S), y)
    return xs, y[mask]


def _as_column(y):
    if isinstance(y, Tensor):
        if y.value.ndim != 2 or y.shape[1] != 1:
            raise DimensionError(f"y_pred must be a column tensor (g, 1), got {y.shape}")
        return y
    return Tensor(np.asarray(y, dtype=np.float64).reshape(-1, 1))


def eval_constraint(spec: ConstraintSpec, x_grid, y_pred) -> Tensor:
    """Grid-mean score on the tape: scalar <= 0, differentiable in y_pred."""
    if spec.derivative_mode == "input_grad" and spec.kind in ("monotone", "curvature"):
        raise ContractError(
            "input_grad derivative mode is monitoring-only; see input_grad_scores")
    y = _as_column(y_pred)
    x = np.asarray(x_grid, dtype=np.float64).ravel()
    if y.shape[0] != x.size:
        raise DimensionError(f"grid size {x.size} vs predictions {y.shape}")
    x, y = _select_region(spec, x, True, y)
    m = spec.margin

    if spec.kind == "lower_bound":
        s = y - Tensor(spec.lower(x).reshape(-1, 1)) + m
    elif spec.kind == "upper_bound":
        s = Tensor(spec.upper(x).reshape(-1, 1)) - y + m
    elif spec.kind == "band":
        a = spec.lower(x).reshape(-1, 1)
        b = spec.upper(x).reshape(-1, 1)
        if np.any(b < a):
            raise ContractError("band: upper expression below lower on grid")
        s = Tensor((b - a) / 2.0 + m) - ad.tabs(y - Tensor((a + b) / 2.0))
    elif spec.kind == "conditional_value":
        s = -ad.tabs(y - spec.value) + m
    elif spec.kind == "monotone":
        D = _diff_matrix(x, 1)
        s = ad.matmul(Tensor(D * spec.sign), y) + m
    else:  # curvature
        D = _diff_matrix(x, 2)
        s = ad.matmul(Tensor(D * spec.sign), y) + m
    return ad.tmean(ad.min_const(s, 0.0))


def point_scores(spec: ConstraintSpec, x_grid, y_values) -> np.ndarray:
    """Per-point scores as a plain array (monitoring / metrics; no tape).

    For monotone/curvature the scores live on difference points (length
    g-1 / g-2 of the in-region grid).
    """
    x = np.asarray(x_grid, dtype=np.float64).ravel()
    y = np.asarray(y_values, dtype=np.float64).reshape(-1)
    if y.size != x.size:
        raise DimensionError(f"grid size {x.size} vs predictions {y.size}")
    x, y = _select_region(spec, x, False, y)
    m = spec.margin
    if spec.kind == "lower_bound":
        s = y - spec.lower(x) + m
    elif spec.kind == "upper_bound":
        s = spec.upper(x) - y + m
    elif spec.kind == "band":
        a, b = spec.lower(x), spec.upper(x)
        s = (b - a) / 2.0 + m - np.abs(y - (a + b) / 2.0)
    elif spec.kind == "conditional_value":
        s = m - np.abs(y - spec.value)
    elif spec.kind == "monotone":
        if x.size < 2:
            raise ContractError("monotone needs >= 2 in-region points")
        s = spec.sign * (np.diff(y) / np.diff(x)) + m
    else:
        if x.size < 3:
            raise ContractError("curvature needs >= 3 in-region points")
        s = spec.sign * (_diff_matrix(x, 2) @ y) + m
    return np.minimum(s, 0.0)


def input_grad_scores(spec: ConstraintSpec, net, weights, x_grid) -> np.ndarray:
    """Derivative-constraint scores using autodiff input gradients.

    Monitoring-only alternative to grid differences: training through it
    would need second derivatives, which the tape does not provide.
    """
    if spec.kind not in ("monotone", "curvature"):
        raise ContractError("input_grad scores apply to derivative constraints only")
    if spec.kind == "curvature":
        raise ContractError("curvature has no first-order input-gradient form")
    x = np.asarray(x_grid, dtype=np.float64).ravel()
    x = x[spec.region_mask(x)]
    xt = Tensor(x.reshape(-1, 1), requires_grad=True)
    out = nets.forward(net, weights, xt)
    grads = ad.backward(ad.tsum(out))
    dy_dx = grads[xt][:, 0]
    return np.minimum(spec.sign * dy_dx + spec.margin, 0.0)


def expected_constraint(spec: ConstraintSpec, net, params, mc_samples=1, rng=None,
                        weight_samples=None) -> Tensor:
    """MC estimate of E_q(w) f(x, y(w)) over the constraint grid, on the tape."""
    if weight_samples is None:
        if mc_samples < 1:
            raise ContractError("expected_constraint needs K >= 1")
        if rng is None:
            raise ContractError("expected_constraint needs an rng")
        weight_samples = [nets.sample_weights(params, rng) for _ in range(mc_samples)]
    xg = spec.grid.reshape(-1, 1)
    total = None
    for ws in weight_samples:
        val = eval_constraint(spec, spec.grid, nets.forward(net, ws, xg))
        total = val if total is None else total + val
    return total * (1.0 / len(weight_samples))


def composite(values, weights) -> Tensor:
    """Non-negative linear combination sum_i w_i * f_i of evaluated scores."""
    values = list(values)
    weights = list(weights)
    if len(values) != len(weights):
        raise DimensionError("composite: values and weights differ in length")
    if any(w < 0 for w in weights):
        raise ContractError("composite weights must be >= 0")
    total = Tensor(0.0)
    for v, w in zip(values, weights):
        if not isinstance(v, Tensor):
            v = Tensor(float(v))
        total = total + v * float(w)
    return total


def estimate_violation_probability(spec: ConstraintSpec, net, params, K=1000,
                                   rng=None, tol=TOL_VIOLATION) -> float:
    """Fraction of posterior samples whose prediction violates anywhere on
    the grid. Monitoring only; no gradients."""
    if K < 100:
        raise ContractError("violation probability needs K >= 100")
    if rng is None:
        raise ContractError("estimate_violation_probability needs an rng")
    xg = spec.grid.reshape(-1, 1)
    hits = 0
    for _ in range(K):
        arrays = nets.sample_weight_arrays(params, rng)
        y = nets.forward_arrays(net, arrays, xg)
        if np.any(point_scores(spec, spec.grid, y) < -tol):
            hits += 1
    return hits / K
