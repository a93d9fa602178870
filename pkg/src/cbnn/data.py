"""Datasets, min-max scaling, the two simulation generators, and CSV I/O.

Simulation 2 is a 1-D regression with sparse noisy training data on
[0.1, 0.65], a 200-point noiseless test grid on [0.08, 1], and three
constraints: predictions non-negative, below a log ceiling, and
non-decreasing. Simulation 1 trains on six points whose targets conflict
with a band rule y in [2.5, 3] over the center region [-0.3, 0.3].
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ContractError, DomainError
from .constraints import BoundExpr, ConstraintSpec


class ParseError(ValueError):
    """CSV file does not match the expected shape; message carries the line."""


# ---------------------------------------------------------------------------
# scaling

def minmax_scale(values, lo, hi):
    """Affine map sending [lo, hi] to [0, 1]."""
    if hi <= lo:
        raise DomainError("minmax_scale needs max > min")
    return (np.asarray(values, dtype=np.float64) - lo) / (hi - lo)


def minmax_unscale(values, lo, hi):
    if hi <= lo:
        raise DomainError("minmax_unscale needs max > min")
    return np.asarray(values, dtype=np.float64) * (hi - lo) + lo


@dataclass
class Dataset:
    x: np.ndarray                 # (n, d)
    y: np.ndarray                 # (n, 1)
    split: str = "train"
    scaler: dict = None           # {column: {"min": .., "max": ..}} when scaled

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim == 1:
            self.x = self.x[:, np.newaxis]
        if self.y.ndim == 1:
            self.y = self.y[:, np.newaxis]
        if self.x.shape[0] != self.y.shape[0]:
            raise ContractError("x and y row counts differ")

    @property
    def n(self):
        return self.x.shape[0]

    def columns(self):
        return [f"x{i}" for i in range(self.x.shape[1])] + ["y"]


def fit_scaler(ds: Dataset) -> dict:
    """Per-column min/max over a dataset; constant columns are rejected."""
    out = {}
    for i, name in enumerate(ds.columns()):
        col = ds.x[:, i] if name != "y" else ds.y[:, 0]
        lo, hi = float(col.min()), float(col.max())
        if hi <= lo:
            raise DomainError(f"column {name} is constant; cannot min-max scale")
        out[name] = {"min": lo, "max": hi}
    return out


def apply_scaler(ds: Dataset, scaler: dict) -> Dataset:
    x = ds.x.copy()
    for i in range(x.shape[1]):
        s = scaler[f"x{i}"]
        x[:, i] = minmax_scale(x[:, i], s["min"], s["max"])
    s = scaler["y"]
    y = minmax_scale(ds.y, s["min"], s["max"])
    return Dataset(x=x, y=y, split=ds.split, scaler=scaler)


def invert_scaler(ds: Dataset) -> Dataset:
    if not ds.scaler:
        raise ContractError("dataset carries no scaler to invert")
    x = ds.x.copy()
    for i in range(x.shape[1]):
        s = ds.scaler[f"x{i}"]
        x[:, i] = minmax_unscale(x[:, i], s["min"], s["max"])
    s = ds.scaler["y"]
    y = minmax_unscale(ds.y, s["min"], s["max"])
    return Dataset(x=x, y=y, split=ds.split, scaler=None)


# ---------------------------------------------------------------------------
# simulation targets

def sim2_truth(x):
    """Saturating ramp (arctan(20x - 10) - arctan(-10)) / 3."""
    x = np.asarray(x, dtype=np.float64)
    return (np.arctan(20.0 * x - 10.0) - math.atan(-10.0)) / 3.0


def sim2_upper_bound(x):
    """Ceiling curve log(25x + 1)/3 + 0.05 (natural log)."""
    x = np.asarray(x, dtype=np.float64)
    arg = 25.0 * x + 1.0
    if np.any(arg <= 0.0):
        raise DomainError("sim2_upper_bound needs 25x + 1 > 0")
    return np.log(arg) / 3.0 + 0.05


SIM1_X = (-1.0, -0.6, -0.2, 0.2, 0.6, 1.0)


def sim1_target(x, coeff=5.0):
    """Default six-point target y = coeff * x^2 (config-overridable)."""
    return coeff * np.asarray(x, dtype=np.float64) ** 2


# ---------------------------------------------------------------------------
# simulation specs

@dataclass(frozen=True)
class SimSpec:
    sim: str = "sim2"
    train_range: tuple = (0.1, 0.65)
    test_range: tuple = (0.08, 1.0)
    train_size: int = 40
    test_size: int = 200
    noise_std: float = 0.05
    seed: int = 0
    constraint_grid_size: int = 200
    sim1_x: tuple = SIM1_X
    sim1_y: tuple = None       # explicit targets override the default curve
    sim1_coeff: float = 5.0
    band_region: tuple = (-0.3, 0.3)
    band_lo: float = 2.5
    band_hi: float = 3.0

    def __post_init__(self):
        if self.sim not in ("sim1", "sim2"):
            raise ContractError(f"unknown simulation {self.sim!r}")
        for r in (self.train_range, self.test_range, self.band_region):
            if r[0] > r[1]:
                raise ContractError(f"range {r} is not ordered")
        if self.train_size < 1 or self.test_size < 1:
            raise ContractError("sizes must be >= 1")
        if self.noise_std < 0:
            raise ContractError("noise std must be >= 0")


def default_spec(sim: str, seed=0) -> SimSpec:
    if sim == "sim2":
        return SimSpec(sim="sim2", seed=seed)
    return SimSpec(sim="sim1", seed=seed, train_range=(-1.0, 1.0),
                   test_range=(-1.0, 1.0), noise_std=0.0,
                   constraint_grid_size=50)


def generate(spec: SimSpec, rng=None):
    """Build (train, test, constraints) for a simulation; pure given seed."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    if spec.sim == "sim2":
        lo, hi = spec.train_range
        x_tr = np.sort(rng.uniform(lo, hi, size=spec.train_size))
        y_tr = sim2_truth(x_tr) + rng.normal(0.0, spec.noise_std, size=spec.train_size)
        x_te = np.linspace(spec.test_range[0], spec.test_range[1], spec.test_size)
        y_te = sim2_truth(x_te)
        grid = np.linspace(spec.test_range[0], spec.test_range[1],
                           spec.constraint_grid_size)
        constraints = [
            ConstraintSpec(kind="lower_bound", grid=grid,
                           lower=BoundExpr(kind="constant", value=0.0),
                           name="floor"),
            ConstraintSpec(kind="upper_bound", grid=grid,
                           upper=BoundExpr(kind="log_affine", k=25.0, c=1.0,
                                           scale=1.0 / 3.0, shift=0.05),
                           name="ceiling"),
            ConstraintSpec(kind="monotone", grid=grid, sign=1, name="rising"),
        ]
    else:
        x_tr = np.asarray(spec.sim1_x, dtype=np.float64)
        if spec.sim1_y is not None:
            y_tr = np.asarray(spec.sim1_y, dtype=np.float64)
            if y_tr.size != x_tr.size:
                raise ContractError("sim1 explicit targets must match the x points")
        else:
            y_tr = sim1_target(x_tr, spec.sim1_coeff)
        if spec.noise_std > 0:
            y_tr = y_tr + rng.normal(0.0, spec.noise_std, size=y_tr.shape)
        x_te = np.linspace(spec.test_range[0], spec.test_range[1], spec.test_size)
        y_te = (sim1_target(x_te, spec.sim1_coeff) if spec.sim1_y is None
                else np.interp(x_te, x_tr, y_tr))
        grid = np.linspace(spec.band_region[0], spec.band_region[1],
                           spec.constraint_grid_size)
        constraints = [
            ConstraintSpec(kind="band", grid=grid,
                           lower=BoundExpr(kind="constant", value=spec.band_lo),
                           upper=BoundExpr(kind="constant", value=spec.band_hi),
                           region=spec.band_region,
                           name="center-band"),
        ]
    train = Dataset(x=x_tr, y=y_tr, split="train")
    test = Dataset(x=x_te, y=y_te, split="test")
    return train, test, constraints


# ---------------------------------------------------------------------------
# CSV I/O (17 significant digits => lossless float64 round-trip)

def save_csv(ds: Dataset, path):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ds.columns())
        for i in range(ds.n):
            row = [f"{v:.17g}" for v in ds.x[i]] + [f"{ds.y[i, 0]:.17g}"]
            w.writerow(row)
    if ds.scaler:
        with open(_sidecar(path), "w") as fh:
            json.dump(ds.scaler, fh, sort_keys=True)
            fh.write("\n")


def load_csv(path, expect_columns=None, split="train") -> Dataset:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if "y" not in header:
            raise ParseError(f"{path}:1: missing required column 'y'")
        if expect_columns is not None and header != list(expect_columns):
            raise ParseError(f"{path}:1: columns {header} != expected {list(expect_columns)}")
        x_cols = [i for i, h in enumerate(header) if h != "y"]
        y_col = header.index("y")
        xs, ys = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError as e:
                raise ParseError(f"{path}:{lineno}: non-numeric cell ({e})") from None
            xs.append([vals[i] for i in x_cols])
            ys.append(vals[y_col])
    if not xs:
        raise ParseError(f"{path}: no data rows")
    scaler = None
    side = _sidecar(path)
    if side.exists():
        with open(side) as fh:
            scaler = json.load(fh)
    return Dataset(x=np.array(xs), y=np.array(ys), split=split, scaler=scaler)


def _sidecar(path: Path) -> Path:
    return path.with_name(path.stem + ".scaler.json")


def save_constraints(specs, path):
    with open(path, "w") as fh:
        json.dump([s.to_dict() for s in specs], fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_constraints(path):
    with open(path) as fh:
        docs = json.load(fh)
    return [ConstraintSpec.from_dict(d) for d in docs]
