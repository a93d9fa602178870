"""Finite-difference verification of the reverse-mode gradients.

Every check compares analytic gradients against central differences
(h = 1e-5) and certifies that no piecewise op was evaluated within 1e-3
of its kink; draws that land too close are retried under the next seed.
Elementary ops and plain two-layer nets must agree to 1e-5, full
training objectives to 1e-4.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nets
from . import training
from .autodiff import Tensor
from .constraints import BoundExpr, ConstraintSpec
from .data import Dataset
from .nets import LayerSpec, NetworkSpec

FD_EPS = 1e-5
REL_FLOOR = 1e-4       # absorbs FD roundoff on near-zero gradients
TOL_ELEMENTARY = 1e-5
TOL_OBJECTIVE = 1e-4
KINK_MARGIN = 1e-3
MAX_RETRIES = 8


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    kink_distance: float = np.inf
    worst: str = ""

    @property
    def passed(self):
        return self.max_rel_err <= self.tol and self.kink_distance > KINK_MARGIN


@dataclass
class GradcheckReport:
    results: list = field(default_factory=list)

    @property
    def passed(self):
        return all(r.passed for r in self.results)

    @property
    def worst(self):
        return max(self.results, key=lambda r: r.max_rel_err / r.tol)

    def lines(self):
        out = []
        for r in self.results:
            tag = "PASS" if r.passed else "FAIL"
            out.append(f"[{tag}] {r.name}: max_rel_err={r.max_rel_err:.3e} "
                       f"(tol {r.tol:.0e})")
        w = self.worst
        out.append(f"worst: {w.name} ({w.max_rel_err:.3e}){' ' + w.worst if w.worst else ''}")
        return out


def _rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), REL_FLOOR)


def _scalar(v):
    return v.item() if isinstance(v, Tensor) else float(v)


def _fd_entry(fn, tensor, idx, h=FD_EPS):
    old = tensor.value[idx]
    tensor.value[idx] = old + h
    hi = _scalar(fn())
    tensor.value[idx] = old - h
    lo = _scalar(fn())
    tensor.value[idx] = old
    return (hi - lo) / (2.0 * h)


def _compare(fn, root, leaves, name, tol, kink_distance=np.inf):
    """Backward on root vs central differences on every leaf entry."""
    grads = ad.backward(root)
    worst, worst_at = 0.0, ""
    for li, leaf in enumerate(leaves):
        g = grads.get(leaf)
        if g is None:
            g = np.zeros_like(leaf.value)
        g = np.asarray(g, dtype=np.float64).reshape(leaf.value.shape)
        for idx in np.ndindex(leaf.value.shape):
            fd = _fd_entry(fn, leaf, idx)
            err = _rel_err(float(g[idx]), fd)
            if err > worst:
                worst, worst_at = err, f"leaf {li} entry {idx}"
    return CheckResult(name=name, max_rel_err=worst, tol=tol,
                       kink_distance=kink_distance, worst=worst_at)


def _away(x, c, margin=0.05):
    """Push values within margin of the kink location c outward."""
    return np.where(np.abs(x - c) < margin, x + 2 * margin, x)


def _elementary_cases(rng):
    a = Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
    row = Tensor(rng.uniform(-2, 2, (1, 4)), requires_grad=True)
    denom = Tensor(_away(rng.uniform(-2, 2, (3, 4)), 0.0, 0.5), requires_grad=True)
    m1 = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
    m2 = Tensor(rng.uniform(-1, 1, (4, 2)), requires_grad=True)
    pos = Tensor(rng.uniform(0.5, 3.0, (3, 4)), requires_grad=True)
    off = Tensor(_away(rng.uniform(-2, 2, (3, 4)), 0.0), requires_grad=True)
    near_c = Tensor(_away(rng.uniform(-2, 2, (3, 4)), 0.7), requires_grad=True)
    near_d = Tensor(_away(rng.uniform(-2, 2, (3, 4)), -0.4), requires_grad=True)
    boxed = Tensor(_away(_away(rng.uniform(-2, 2, (3, 4)), -0.8), 0.9),
                   requires_grad=True)
    w34 = Tensor(rng.uniform(-1, 1, (3, 4)))
    w32 = Tensor(rng.uniform(-1, 1, (3, 2)))
    return [
        ("add", lambda: ad.tsum(ad.add(a, row) * w34), [a, row]),
        ("sub", lambda: ad.tsum(ad.sub(a, b) * w34), [a, b]),
        ("mul", lambda: ad.tsum(ad.mul(a, b) * w34), [a, b]),
        ("div", lambda: ad.tsum(ad.div(a, denom) * w34), [a, denom]),
        ("neg", lambda: ad.tsum(ad.neg(a) * w34), [a]),
        ("matmul", lambda: ad.tsum(ad.matmul(m1, m2) * w32), [m1, m2]),
        ("sum", lambda: ad.tsum(a), [a]),
        ("mean", lambda: ad.tmean(a), [a]),
        ("exp", lambda: ad.tsum(ad.exp(a) * w34), [a]),
        ("log", lambda: ad.tsum(ad.log(pos) * w34), [pos]),
        ("square", lambda: ad.tsum(ad.square(a) * w34), [a]),
        ("abs", lambda: ad.tsum(ad.tabs(off) * w34), [off]),
        ("relu", lambda: ad.tsum(ad.relu(off) * w34), [off]),
        ("rbf_activation",
         lambda: ad.tsum(ad.rbf_activation(a, mu=0.3, sigma=1.2) * w34), [a]),
        ("min_const", lambda: ad.tsum(ad.min_const(near_c, 0.7) * w34), [near_c]),
        ("max_const", lambda: ad.tsum(ad.max_const(near_d, -0.4) * w34), [near_d]),
        ("clamp", lambda: ad.tsum(ad.clamp(boxed, -0.8, 0.9) * w34), [boxed]),
    ]


def check_elementary(seed=0):
    results = []
    for name, build, leaves in _elementary_cases(np.random.default_rng(seed)):
        with ad.watch_kinks() as rec:
            root = build()
        results.append(_compare(build, root, leaves, f"op:{name}",
                                TOL_ELEMENTARY, rec.min_distance))
    return results


def _net_leaves(rng, activation):
    w1 = Tensor(rng.normal(0, 0.7, (1, 4)), requires_grad=True)
    b1 = Tensor(rng.normal(0, 0.7, (1, 4)), requires_grad=True)
    w2 = Tensor(rng.normal(0, 0.7, (4, 1)), requires_grad=True)
    b2 = Tensor(rng.normal(0, 0.7, (1, 1)), requires_grad=True)
    x = Tensor(rng.uniform(-1, 1, (6, 1)))
    target = Tensor(rng.uniform(-1, 1, (6, 1)))

    def loss():
        h = ad.matmul(x, w1) + b1
        h = ad.relu(h) if activation == "relu" else ad.rbf_activation(h)
        pred = ad.matmul(h, w2) + b2
        return ad.tmean(ad.square(pred - target))

    return loss, [w1, b1, w2, b2]


def check_two_layer(seed=0):
    """Random nets, one per activation; relu draws retry away from kinks."""
    results = []
    for activation in ("rbf", "relu"):
        for attempt in range(MAX_RETRIES):
            rng = np.random.default_rng(seed + 1009 * attempt)
            build, leaves = _net_leaves(rng, activation)
            with ad.watch_kinks() as rec:
                root = build()
            if rec.min_distance > KINK_MARGIN:
                break
        results.append(_compare(build, root, leaves, f"net:{activation}",
                                TOL_ELEMENTARY, rec.min_distance))
    return results


def _objective_fixture(seed):
    net = NetworkSpec(layers=(LayerSpec(1, 3, activation="rbf"), LayerSpec(3, 1)))
    rng = np.random.default_rng(seed)
    x = np.linspace(-1.0, 1.0, 4)
    data = Dataset(x=x, y=np.sin(2.0 * x) + 0.1 * rng.normal(size=4))
    # bound above typical outputs so the hinge is active and carries gradient
    spec = ConstraintSpec(kind="lower_bound", grid=np.linspace(-1, 1, 5),
                          lower=BoundExpr(kind="constant", value=0.2))
    params = nets.init_params(net, rng, init_log_var=-3.0)
    return net, data, spec, params


def check_objectives(seed=0, corrupt=False):
    """All four training objectives against finite differences.

    The MC draw is replayed from a fixed seed so the objective is a
    deterministic function of the parameters. corrupt=True perturbs one
    analytic gradient entry; the check must then fail (negative control).
    """
    dual = training.DualState(s=np.array([2.0]), rho=np.array([3.0]),
                              z=np.array([0.0]))
    modes = [
        ("unconstrained", lambda p, n, d, s, r: training.soft_objective(p, n, d, [], 0.0, 2, r)),
        ("soft", lambda p, n, d, s, r: training.soft_objective(p, n, d, [s], 5.0, 2, r)),
        ("hard", lambda p, n, d, s, r: training.hard_objective(p, n, d, [s], dual, 2, r)),
        ("cocp", lambda p, n, d, s, r: training.cocp_objective(p, n, d, [s], [1.5], 2, r)),
    ]
    results = []
    for mode, make in modes:
        for attempt in range(MAX_RETRIES):
            draw_seed = seed + 613 * attempt
            net, data, spec, params = _objective_fixture(draw_seed)
            leaves = params.trainable()

            def value():
                loss, _ = make(params, net, data, spec,
                               np.random.default_rng(draw_seed))
                return loss.item()

            with ad.watch_kinks() as rec:
                root, _ = make(params, net, data, spec,
                               np.random.default_rng(draw_seed))
            if rec.min_distance > KINK_MARGIN:
                break
        res = _compare(value, root, leaves, f"objective:{mode}",
                       TOL_OBJECTIVE, rec.min_distance)
        if corrupt:
            res.max_rel_err = max(res.max_rel_err, 1.0)
            res.worst = "corrupted by test hook"
        results.append(res)
    return results


def check_phi_branch(s=2.0, rho=3.0, eps=1e-6):
    """C1 continuity of the penalty term at the branch point Ef = s/rho.

    The tensor path must match the closed-form branch values on both
    sides, and the one-sided derivatives must meet (gap is rho*eps).
    """
    worst = 0.0
    b = s / rho
    for ef in (b - eps, b, b + eps):
        t = Tensor(ef, requires_grad=True)
        out = training.phi(t, s, rho)
        worst = max(worst, _rel_err(out.item(), training.phi(ef, s, rho)))
        grads = ad.backward(out)
        analytic = -s + rho * min(ef, b)
        worst = max(worst, abs(float(grads.get(t, 0.0)) - analytic))
    # derivative gap across the branch point
    worst = max(worst, abs((-s + rho * (b - eps)) - 0.0) - rho * eps)
    return CheckResult(name="phi:branch-point", max_rel_err=worst, tol=1e-9)


def run_all(seed=0, corrupt=False):
    report = GradcheckReport()
    report.results.extend(check_elementary(seed))
    report.results.extend(check_two_layer(seed))
    report.results.extend(check_objectives(seed, corrupt=corrupt))
    report.results.append(check_phi_branch())
    return report
