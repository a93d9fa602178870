"""Training regimes for constrained variational networks.

Three objective modes over the variational (reparameterized-gradient)
backend, plus particle and dropout backends:

    unconstrained   KL(q||prior) + E_q NLL                        (-ELBO)
    soft            -ELBO - lambda * sum_i w_i E_q f_i            (penalty)
    hard            -ELBO + sum_i phi(E_q f_i, s_i, rho_i)        (augmented
                    Lagrangian with slack eliminated in closed form and
                    automatic dual updates)
    cocp            MC-KL against a constraint-reweighted prior
                    p(w) * exp(sum_i c_i f_i), normalizer dropped

The expectation constraint E_q f_i >= 0 is estimated with K shared
reparameterized samples per step; the same samples feed the NLL term, so
a lambda=0 soft run is bit-identical to an unconstrained run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import ContractError, Tensor
from .constraints import eval_constraint, point_scores
from .nets import GaussianPrior, NetworkSpec, VariationalParams, WeightSample


class NumericalError(RuntimeError):
    """Loss became non-finite; carries a diagnostic state snapshot."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


MODES = ("unconstrained", "soft", "hard", "cocp")
BACKENDS = ("bbb", "svgd", "dropout")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "unconstrained"
    backend: str = "bbb"
    lam: float = 0.0                  # soft penalty weight
    c_weights: tuple = None           # cocp per-constraint weights
    cocp_scale: float = 20.0          # prior-mass strength multiplying each c weight
    epochs: int = 1000
    lr: float = 1e-2
    lr_decay: float = 1.0             # per-epoch multiplicative factor
    mc_samples: int = 4               # K reparameterized samples per step
    seed: int = 0
    optimizer: str = "adam"
    dual_update_every: int = 1        # epochs between dual updates (hard)
    dual_growth: float = 1.005        # penalty growth factor c
    rho_init: float = 1.0
    s_init: float = 1.0
    k_dual: int = 32                  # fresh samples for dual-update Ef
    n_particles: int = 20             # svgd ensemble size
    weight_decay: float = 1e-4        # dropout L2
    init_log_var: float = -6.0
    obs_log_var_init: float = math.log(0.01)
    prior_variance: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown mode {self.mode!r}")
        if self.backend not in BACKENDS:
            raise ContractError(f"unknown backend {self.backend!r}")
        if self.lam < 0:
            raise ContractError("lambda must be >= 0")
        if self.cocp_scale <= 0:
            raise ContractError("cocp_scale must be > 0")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.mc_samples < 1:
            raise ContractError("mc_samples must be >= 1")
        if self.dual_growth < 1.0:
            raise ContractError("dual growth factor must be >= 1")
        if self.dual_update_every < 1:
            raise ContractError("dual_update_every must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.mode == "hard" and self.backend != "bbb":
            raise ContractError("hard mode is only available on the bbb backend")
        if self.mode == "cocp" and self.backend != "bbb":
            raise ContractError("cocp mode is only available on the bbb backend")
        if self.backend == "svgd" and self.n_particles < 2:
            raise ContractError("svgd needs >= 2 particles")


@dataclass(frozen=True)
class DualState:
    s: np.ndarray
    rho: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "s", np.asarray(self.s, dtype=np.float64))
        object.__setattr__(self, "rho", np.asarray(self.rho, dtype=np.float64))
        object.__setattr__(self, "z", np.asarray(self.z, dtype=np.float64))
        if np.any(self.s < 0):
            raise ContractError("dual variables s must be >= 0")
        if np.any(self.rho <= 0):
            raise ContractError("penalty strengths rho must be > 0")
        if np.any(self.z < 0):
            raise ContractError("slacks z must be >= 0")

    @classmethod
    def fresh(cls, n, s_init=1.0, rho_init=1.0):
        return cls(s=np.full(n, float(s_init)), rho=np.full(n, float(rho_init)),
                   z=np.zeros(n))


def compute_z(ef, s, rho):
    """Closed-form slack max(ef - s/rho, 0)."""
    if rho <= 0:
        raise ContractError("rho must be > 0")
    return max(ef - s / rho, 0.0)


def phi(ef, s, rho):
    """Augmented-Lagrangian penalty term for one expectation constraint.

    -s*ef + rho*ef^2/2 for ef <= s/rho, else the constant -s^2/(2 rho);
    C1 at the branch point. Accepts a float or a tape Tensor for ef (the
    Tensor path expresses the same piecewise form via a min with the
    branch point, so its subgradient convention matches).
    """
    if rho <= 0:
        raise ContractError("rho must be > 0")
    if isinstance(ef, Tensor):
        t = ad.min_const(ef, s / rho)
        return t * (-s) + ad.square(t) * (0.5 * rho)
    if ef <= s / rho:
        return -s * ef + 0.5 * rho * ef * ef
    return -0.5 * s * s / rho


def dual_update(dual: DualState, ef, growth=1.005) -> DualState:
    """s_i <- max(0, s_i - rho_i ef_i); rho_i <- c rho_i; z refreshed."""
    if growth < 1.0:
        raise ContractError("growth factor must be >= 1")
    ef = np.asarray(ef, dtype=np.float64)
    if ef.shape != dual.s.shape:
        raise ContractError("ef vector length mismatch with dual state")
    s_new = np.maximum(0.0, dual.s - dual.rho * ef)
    rho_new = growth * dual.rho
    z_new = np.array([compute_z(e, s, r) for e, s, r in zip(ef, s_new, rho_new)])
    return DualState(s=s_new, rho=rho_new, z=z_new)


# ---------------------------------------------------------------------------
# objective builders (bbb backend)
#
# Each returns (loss Tensor, info dict of plain floats for the history).


def _draw_samples(params, K, rng):
    return [nets.sample_weights(params, rng) for _ in range(K)]


def _mean_nll(params, net, data, samples):
    total = None
    for ws in samples:
        pred = nets.forward(net, ws, data.x)
        term = nets.nll_gaussian(pred, data.y, params.obs_log_var)
        total = term if total is None else total + term
    return total * (1.0 / len(samples))


def _mean_efs(net, specs, samples):
    """Per-constraint expected scores over shared weight samples, on tape."""
    efs = []
    for spec in specs:
        xg = spec.grid.reshape(-1, 1)
        total = None
        for ws in samples:
            val = eval_constraint(spec, spec.grid, nets.forward(net, ws, xg))
            total = val if total is None else total + val
        efs.append(total * (1.0 / len(samples)))
    return efs


def soft_objective(params, net, data, specs, lam, K, rng,
                   prior=GaussianPrior()):
    """KL + NLL - lambda * sum_i weight_i * E f_i (penalty form)."""
    samples = _draw_samples(params, K, rng)
    kl = nets.kl_divergence(params, prior)
    nll = _mean_nll(params, net, data, samples)
    loss = kl + nll
    info = {"kl": kl.item(), "nll": nll.item(), "ef": []}
    if lam > 0 and specs:
        efs = _mean_efs(net, specs, samples)
        info["ef"] = [e.item() for e in efs]
        penalty = None
        for spec, e in zip(specs, efs):
            term = e * (lam * spec.weight)
            penalty = term if penalty is None else penalty + term
        loss = loss - penalty
    elif specs:
        # monitoring only: cheap numpy evaluation, no tape growth
        info["ef"] = _ef_from_samples(net, specs, samples)
    info["loss"] = loss.item()
    return loss, info


def hard_objective(params, net, data, specs, dual: DualState, K, rng,
                   prior=GaussianPrior()):
    """KL + NLL + sum_i phi(E f_i, s_i, rho_i) (augmented Lagrangian)."""
    if len(specs) != dual.s.size:
        raise ContractError("dual state size mismatch with constraints")
    samples = _draw_samples(params, K, rng)
    kl = nets.kl_divergence(params, prior)
    nll = _mean_nll(params, net, data, samples)
    loss = kl + nll
    efs = _mean_efs(net, specs, samples)
    for i, e in enumerate(efs):
        loss = loss + phi(e, float(dual.s[i]), float(dual.rho[i]))
    return loss, {
        "kl": kl.item(),
        "nll": nll.item(),
        "ef": [e.item() for e in efs],
        "loss": loss.item(),
    }


def cocp_objective(params, net, data, specs, c_weights, K, rng,
                   prior=GaussianPrior(), scale=1.0):
    """MC-KL against the constraint-reweighted prior, plus NLL.

    (1/K) sum_k [ log q(w_k) - log p(w_k) - sum_i scale c_i f_i(y(w_k)) ] + NLL.
    The reweighted prior's normalizer is dropped (constant shift).
    """
    c_weights = list(c_weights if c_weights is not None else [])
    if len(c_weights) != len(specs):
        raise ContractError("cocp needs one c weight per constraint")
    samples = _draw_samples(params, K, rng)
    nll = _mean_nll(params, net, data, samples)
    kl_terms = None
    pen_terms = None
    for ws in samples:
        t = nets.log_q_density(params, ws) - nets.log_prior_density(prior, ws)
        kl_terms = t if kl_terms is None else kl_terms + t
        for spec, c in zip(specs, c_weights):
            xg = spec.grid.reshape(-1, 1)
            f = eval_constraint(spec, spec.grid, nets.forward(net, ws, xg))
            term = f * (float(c) * float(scale))
            pen_terms = term if pen_terms is None else pen_terms + term
    K = len(samples)
    kl = kl_terms * (1.0 / K)
    loss = kl + nll
    if pen_terms is not None:
        loss = loss - pen_terms * (1.0 / K)
    return loss, {
        "kl": kl.item(),
        "nll": nll.item(),
        "ef": _ef_from_samples(net, specs, samples),
        "loss": loss.item(),
    }


def _ef_from_samples(net, specs, samples):
    """numpy per-constraint mean scores of already-drawn samples."""
    out = []
    for spec in specs:
        xg = spec.grid.reshape(-1, 1)
        vals = []
        for ws in samples:
            y = nets.forward_arrays(net, ws.as_arrays(), xg)
            vals.append(point_scores(spec, spec.grid, y).mean())
        out.append(float(np.mean(vals)))
    return out


def estimate_ef(specs, net, params, K, rng):
    """Fresh MC estimate of each E f_i (no tape; used for dual updates)."""
    totals = np.zeros(len(specs))
    for _ in range(K):
        arrays = nets.sample_weight_arrays(params, rng)
        for i, spec in enumerate(specs):
            y = nets.forward_arrays(net, arrays, spec.grid.reshape(-1, 1))
            totals[i] += point_scores(spec, spec.grid, y).mean()
    return totals / K


# ---------------------------------------------------------------------------
# optimizers

class SGD:
    def __init__(self, tensors, lr):
        self.tensors = list(tensors)
        self.lr = lr

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for t in self.tensors:
            if t.grad is not None:
                t.value = t.value - lr * t.grad

    def zero_grad(self):
        for t in self.tensors:
            t.zero_grad()


class Adam:
    def __init__(self, tensors, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = list(tensors)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(t.value) for t in self.tensors]
        self.v = [np.zeros_like(t.value) for t in self.tensors]
        self.t = 0

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for i, t in enumerate(self.tensors):
            if t.grad is None:
                continue
            g = t.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            mhat = self.m[i] / b1t
            vhat = self.v[i] / b2t
            t.value = t.value - lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for t in self.tensors:
            t.zero_grad()


def make_optimizer(kind, tensors, lr):
    return Adam(tensors, lr) if kind == "adam" else SGD(tensors, lr)


# ---------------------------------------------------------------------------
# trainers

@dataclass
class TrainResult:
    net: NetworkSpec
    config: TrainConfig
    history: list
    state: object          # VariationalParams | list[WeightSample] | WeightSample
    dual: DualState = None


def _check_finite(loss_val, epoch, info, config):
    if not math.isfinite(loss_val):
        raise NumericalError(
            f"non-finite loss at epoch {epoch}",
            diagnostics={"epoch": epoch, "info": info, "config": str(config)},
        )


def train_bbb(config: TrainConfig, net: NetworkSpec, data, specs=None,
              prior=None, grad_hook=None) -> TrainResult:
    """Gradient-descent training of the variational parameters.

    One full-batch step per epoch. Hard mode re-estimates E f with
    k_dual fresh samples and updates the duals every dual_update_every
    epochs. grad_hook, if given, may mutate the gradient map after
    backward (negative-control hook for the gradient checker).
    """
    if config.backend != "bbb":
        raise ContractError("train_bbb requires backend=bbb")
    specs = list(specs or [])
    prior = prior or GaussianPrior(0.0, config.prior_variance)
    rng = np.random.default_rng(config.seed)
    params = nets.init_params(net, rng, init_log_var=config.init_log_var,
                              obs_log_var=config.obs_log_var_init)
    opt = make_optimizer(config.optimizer, params.trainable(), config.lr)
    dual = (DualState.fresh(len(specs), config.s_init, config.rho_init)
            if config.mode == "hard" else None)
    history = []
    lr = config.lr
    for epoch in range(config.epochs):
        opt.zero_grad()
        if config.mode == "hard":
            loss, info = hard_objective(params, net, data, specs, dual,
                                        config.mc_samples, rng, prior)
        elif config.mode == "soft":
            loss, info = soft_objective(params, net, data, specs, config.lam,
                                        config.mc_samples, rng, prior)
        elif config.mode == "cocp":
            loss, info = cocp_objective(params, net, data, specs, config.c_weights,
                                        config.mc_samples, rng, prior,
                                        scale=config.cocp_scale)
        else:
            loss, info = soft_objective(params, net, data, specs, 0.0,
                                        config.mc_samples, rng, prior)
        _check_finite(info["loss"], epoch, info, config)
        grads = ad.backward(loss)
        if grad_hook is not None:
            grad_hook(grads)
        opt.step(lr)
        lr *= config.lr_decay
        if config.mode == "hard" and (epoch + 1) % config.dual_update_every == 0:
            ef_fresh = estimate_ef(specs, net, params, config.k_dual, rng)
            dual = dual_update(dual, ef_fresh, config.dual_growth)
        row = {
            "epoch": epoch,
            "loss": info["loss"],
            "nll": info["nll"],
            "kl": info["kl"],
            "ef": info["ef"],
            "s": dual.s.tolist() if dual else [],
            "rho": dual.rho.tolist() if dual else [],
            "z": dual.z.tolist() if dual else [],
        }
        history.append(row)
    return TrainResult(net=net, config=config, history=history, state=params,
                       dual=dual)


# ---------------------------------------------------------------------------
# SVGD backend

def svgd_bandwidth(particles):
    """Median heuristic: median off-diagonal squared distance / log n."""
    n = particles.shape[0]
    d2 = np.sum((particles[:, None, :] - particles[None, :, :]) ** 2, axis=2)
    off = d2[~np.eye(n, dtype=bool)]
    h = float(np.median(off)) / max(math.log(n), 1e-12)
    return max(h, 1e-12), d2


def svgd_transport(particles, grads):
    """One Stein transport direction per particle.

    phi(w_i) = (1/n) sum_j [ k(w_j, w_i) grad_j + grad_{w_j} k(w_j, w_i) ]
    with a squared-exponential kernel whose bandwidth is recomputed from
    the current particle spread.
    """
    particles = np.asarray(particles, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    n = particles.shape[0]
    if n < 2:
        raise ContractError("svgd transport needs >= 2 particles")
    h, d2 = svgd_bandwidth(particles)
    K = np.exp(-d2 / h)
    # attraction: K^T @ grads; repulsion: sum_j K[j,i] (w_i - w_j) * 2/h
    attract = K.T @ grads
    repulse = (2.0 / h) * (particles * K.sum(axis=0)[:, None] - K.T @ particles)
    return (attract + repulse) / n


def _flatten_particle(ws: WeightSample):
    return np.concatenate([np.concatenate([w.value.ravel(), b.value.ravel()])
                           for w, b in ws.layers])


def train_svgd(config: TrainConfig, net: NetworkSpec, data, specs=None,
               prior=None) -> TrainResult:
    """Particle transport toward the (optionally penalty-tilted) posterior.

    Target density: log P(D|w) + log P(w) + lambda * sum_i weight_i f_i,
    so satisfied constraints leave the target untouched and violations
    lower it. Modes: unconstrained, soft.
    """
    if config.backend != "svgd":
        raise ContractError("train_svgd requires backend=svgd")
    if config.mode not in ("unconstrained", "soft"):
        raise ContractError("svgd supports unconstrained and soft modes only")
    specs = list(specs or [])
    prior = prior or GaussianPrior(0.0, config.prior_variance)
    rng = np.random.default_rng(config.seed)
    n = config.n_particles
    flats = np.stack([
        np.concatenate([
            np.concatenate([
                rng.normal(0.0, 1.0 / math.sqrt(l.fan_in), size=l.fan_in * l.fan_out),
                rng.normal(0.0, 1.0 / math.sqrt(l.fan_in), size=l.fan_out),
            ]) for l in net.layers
        ]) for _ in range(n)
    ])
    obs_log_var = config.obs_log_var_init
    lam = config.lam if config.mode == "soft" else 0.0
    history = []
    for epoch in range(config.epochs):
        grads = np.zeros_like(flats)
        log_posts = np.zeros(n)
        nlls = np.zeros(n)
        efs = np.zeros((n, len(specs)))
        for j in range(n):
            ws = nets._unflatten_ws(net, flats[j])
            pred = nets.forward(net, ws, data.x)
            nll = nets.nll_gaussian(pred, data.y, obs_log_var)
            log_p = nets.log_prior_density(prior, ws)
            target = log_p - nll
            for i, spec in enumerate(specs):
                f = eval_constraint(spec, spec.grid,
                                    nets.forward(net, ws, spec.grid.reshape(-1, 1)))
                efs[j, i] = f.item()
                if lam > 0:
                    target = target + f * (lam * spec.weight)
            gmap = ad.backward(target)
            grads[j] = np.concatenate([
                np.concatenate([gmap[w].ravel(), gmap[b].ravel()])
                for w, b in ws.layers
            ])
            log_posts[j] = target.item()
            nlls[j] = nll.item()
        _check_finite(float(log_posts.mean()), epoch,
                      {"loss": float(-log_posts.mean())}, config)
        flats = flats + config.lr * (config.lr_decay ** epoch) * svgd_transport(flats, grads)
        history.append({
            "epoch": epoch,
            "loss": float(-log_posts.mean()),
            "nll": float(nlls.mean()),
            "kl": None,
            "ef": efs.mean(axis=0).tolist(),
            "s": [], "rho": [], "z": [],
        })
    particles = [nets._unflatten_ws(net, f) for f in flats]
    return TrainResult(net=net, config=config, history=history, state=particles)


# ---------------------------------------------------------------------------
# dropout backend

def train_dropout(config: TrainConfig, net: NetworkSpec, data, specs=None,
                  prior=None) -> TrainResult:
    """Maximum likelihood + L2 with stochastic unit masks each step.

    Soft constraints enter as -lambda * sum_i w_i f_i evaluated through
    the same stochastic forwards; prediction later uses fresh masks.
    """
    if config.backend != "dropout":
        raise ContractError("train_dropout requires backend=dropout")
    if config.mode not in ("unconstrained", "soft"):
        raise ContractError("dropout supports unconstrained and soft modes only")
    if net.mode != "dropout":
        raise ContractError("network spec must be in dropout mode")
    specs = list(specs or [])
    rng = np.random.default_rng(config.seed)
    ws = nets.deterministic_weights(net, rng)
    obs_log_var = Tensor(config.obs_log_var_init, requires_grad=True)
    tensors = [t for pair in ws.layers for t in pair] + [obs_log_var]
    opt = make_optimizer(config.optimizer, tensors, config.lr)
    lam = config.lam if config.mode == "soft" else 0.0
    history = []
    lr = config.lr
    for epoch in range(config.epochs):
        opt.zero_grad()
        masks = nets.dropout_masks(net, rng)
        pred = nets.dropout_forward(net, ws, data.x, masks=masks)
        nll = nets.nll_gaussian(pred, data.y, obs_log_var)
        l2 = None
        for w, _ in ws.layers:
            term = ad.tsum(ad.square(w))
            l2 = term if l2 is None else l2 + term
        loss = nll + l2 * config.weight_decay
        efs = []
        for spec in specs:
            f = eval_constraint(spec, spec.grid,
                                nets.dropout_forward(net, ws, spec.grid.reshape(-1, 1),
                                                     masks=masks))
            efs.append(f.item())
            if lam > 0:
                loss = loss - f * (lam * spec.weight)
        info = {"loss": loss.item(), "nll": nll.item()}
        _check_finite(info["loss"], epoch, info, config)
        ad.backward(loss)
        opt.step(lr)
        lr *= config.lr_decay
        history.append({
            "epoch": epoch,
            "loss": info["loss"],
            "nll": info["nll"],
            "kl": None,
            "ef": efs,
            "s": [], "rho": [], "z": [],
        })
    return TrainResult(net=net, config=config, history=history, state=ws)


def train(config: TrainConfig, net: NetworkSpec, data, specs=None,
          prior=None) -> TrainResult:
    """Dispatch on the configured backend."""
    if config.backend == "bbb":
        return train_bbb(config, net, data, specs, prior)
    if config.backend == "svgd":
        return train_svgd(config, net, data, specs, prior)
    return train_dropout(config, net, data, specs, prior)
