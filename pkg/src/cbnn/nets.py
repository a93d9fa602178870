"""Mean-field Gaussian variational layers, priors, likelihoods, and KL terms.

A network is a chain of dense layers described by ``NetworkSpec``. In
variational mode every weight and bias carries a mean and a log-variance
(``VariationalParams``); concrete weights are drawn by the
reparameterization w = mu + exp(log_var/2) * eps so that gradients flow
back to both parameter halves. Dropout mode holds deterministic weights
and applies Bernoulli unit masks at every forward pass instead.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor

LOG_2PI = math.log(2.0 * math.pi)

ACTIVATIONS = ("identity", "relu", "rbf")


@dataclass(frozen=True)
class LayerSpec:
    """One dense layer: y = act(x @ W + b), W is (fan_in, fan_out)."""

    fan_in: int
    fan_out: int
    activation: str = "identity"
    rbf_mu: tuple = None     # per-unit centers, defaults to 0
    rbf_sigma: tuple = None  # per-unit widths, defaults to 1

    def __post_init__(self):
        if self.fan_in < 1 or self.fan_out < 1:
            raise ContractError("layer dims must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.rbf_mu is not None:
            object.__setattr__(self, "rbf_mu", tuple(float(v) for v in self.rbf_mu))
            if len(self.rbf_mu) != self.fan_out:
                raise DimensionError("rbf_mu length must equal fan_out")
        if self.rbf_sigma is not None:
            object.__setattr__(self, "rbf_sigma", tuple(float(v) for v in self.rbf_sigma))
            if len(self.rbf_sigma) != self.fan_out:
                raise DimensionError("rbf_sigma length must equal fan_out")
            if any(s <= 0 for s in self.rbf_sigma):
                raise ContractError("rbf_sigma must be positive")

    def act_params(self):
        mu = np.zeros(self.fan_out) if self.rbf_mu is None else np.asarray(self.rbf_mu)
        sigma = np.ones(self.fan_out) if self.rbf_sigma is None else np.asarray(self.rbf_sigma)
        return mu, sigma


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    mode: str = "variational"
    dropout_rate: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ContractError("network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.fan_out != b.fan_in:
                raise DimensionError(f"layer dims do not chain: {a.fan_out} -> {b.fan_in}")
        if self.mode not in ("variational", "dropout"):
            raise ContractError(f"unknown mode {self.mode!r}")
        if self.mode == "dropout" and not (0.0 < self.dropout_rate < 1.0):
            raise ContractError("dropout rate must lie in (0, 1)")

    @property
    def n_inputs(self):
        return self.layers[0].fan_in

    @property
    def n_outputs(self):
        return self.layers[-1].fan_out

    def n_weights(self):
        return sum(l.fan_in * l.fan_out + l.fan_out for l in self.layers)

    def to_dict(self):
        return {
            "layers": [
                {
                    "fan_in": l.fan_in,
                    "fan_out": l.fan_out,
                    "activation": l.activation,
                    "rbf_mu": list(l.rbf_mu) if l.rbf_mu is not None else None,
                    "rbf_sigma": list(l.rbf_sigma) if l.rbf_sigma is not None else None,
                }
                for l in self.layers
            ],
            "mode": self.mode,
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_dict(cls, d):
        layers = tuple(
            LayerSpec(
                fan_in=int(l["fan_in"]),
                fan_out=int(l["fan_out"]),
                activation=l.get("activation", "identity"),
                rbf_mu=l.get("rbf_mu"),
                rbf_sigma=l.get("rbf_sigma"),
            )
            for l in d["layers"]
        )
        return cls(layers=layers, mode=d.get("mode", "variational"),
                   dropout_rate=float(d.get("dropout_rate", 0.1)))


@dataclass(frozen=True)
class GaussianPrior:
    mean: float = 0.0
    variance: float = 1.0

    def __post_init__(self):
        if self.variance <= 0:
            raise ContractError("prior variance must be positive")


@dataclass
class VariationalParams:
    """Per-layer (W_mu, W_log_var, b_mu, b_log_var) plus shared obs_log_var."""

    layers: list  # list of dicts with Tensors: w_mu, w_log_var, b_mu, b_log_var
    obs_log_var: Tensor

    def trainable(self):
        out = []
        for lay in self.layers:
            out.extend([lay["w_mu"], lay["w_log_var"], lay["b_mu"], lay["b_log_var"]])
        out.append(self.obs_log_var)
        return out

    def flat_mu(self):
        return np.concatenate(
            [np.concatenate([lay["w_mu"].value.ravel(), lay["b_mu"].value.ravel()])
             for lay in self.layers])

    def flat_log_var(self):
        return np.concatenate(
            [np.concatenate([lay["w_log_var"].value.ravel(), lay["b_log_var"].value.ravel()])
             for lay in self.layers])


def init_params(net: NetworkSpec, rng, init_log_var=-6.0, obs_log_var=None):
    """Fresh variational parameters: mu ~ N(0, 1/fan_in), log_var constant."""
    layers = []
    for l in net.layers:
        std = 1.0 / math.sqrt(l.fan_in)
        layers.append({
            "w_mu": Tensor(rng.normal(0.0, std, size=(l.fan_in, l.fan_out)), requires_grad=True),
            "w_log_var": Tensor(np.full((l.fan_in, l.fan_out), init_log_var), requires_grad=True),
            "b_mu": Tensor(rng.normal(0.0, std, size=(1, l.fan_out)), requires_grad=True),
            "b_log_var": Tensor(np.full((1, l.fan_out), init_log_var), requires_grad=True),
        })
    if obs_log_var is None:
        obs_log_var = math.log(0.01)
    return VariationalParams(layers=layers, obs_log_var=Tensor(obs_log_var, requires_grad=True))


def set_flat_mu(params: VariationalParams, flat):
    """Load a flat mean vector back into the per-layer mu tensors."""
    flat = np.asarray(flat, dtype=np.float64)
    i = 0
    for lay in params.layers:
        for key in ("w_mu", "b_mu"):
            n = lay[key].value.size
            lay[key].value = flat[i:i + n].reshape(lay[key].shape).copy()
            i += n
    if i != flat.size:
        raise DimensionError("flat mu length mismatch")


def set_flat_log_var(params: VariationalParams, flat):
    flat = np.asarray(flat, dtype=np.float64)
    i = 0
    for lay in params.layers:
        for key in ("w_log_var", "b_log_var"):
            n = lay[key].value.size
            lay[key].value = flat[i:i + n].reshape(lay[key].shape).copy()
            i += n
    if i != flat.size:
        raise DimensionError("flat log_var length mismatch")


@dataclass
class WeightSample:
    """Concrete per-layer (W, b) Tensors plus the eps draws that made them."""

    layers: list   # list of (w Tensor, b Tensor)
    eps: list      # list of (eps_w array, eps_b array)

    def as_arrays(self):
        return [(w.value, b.value) for w, b in self.layers]


def sample_weights(params: VariationalParams, rng, eps=None) -> WeightSample:
    """Reparameterized draw w = mu + exp(log_var/2) * eps, eps ~ N(0,1)."""
    layers = []
    eps_out = []
    for i, lay in enumerate(params.layers):
        if eps is None:
            ew = rng.standard_normal(lay["w_mu"].shape)
            eb = rng.standard_normal(lay["b_mu"].shape)
        else:
            ew, eb = eps[i]
            ew = np.broadcast_to(np.asarray(ew, dtype=np.float64), lay["w_mu"].shape)
            eb = np.broadcast_to(np.asarray(eb, dtype=np.float64), lay["b_mu"].shape)
        w = lay["w_mu"] + ad.exp(lay["w_log_var"] * 0.5) * Tensor(ew)
        b = lay["b_mu"] + ad.exp(lay["b_log_var"] * 0.5) * Tensor(eb)
        layers.append((w, b))
        eps_out.append((np.array(ew), np.array(eb)))
    return WeightSample(layers=layers, eps=eps_out)


def sample_weight_arrays(params: VariationalParams, rng):
    """numpy-only reparameterized draw; same rng consumption order as
    sample_weights, so a shared seed yields the identical sample."""
    out = []
    for lay in params.layers:
        ew = rng.standard_normal(lay["w_mu"].shape)
        eb = rng.standard_normal(lay["b_mu"].shape)
        out.append((
            lay["w_mu"].value + np.exp(lay["w_log_var"].value * 0.5) * ew,
            lay["b_mu"].value + np.exp(lay["b_log_var"].value * 0.5) * eb,
        ))
    return out


def mean_weights(params: VariationalParams) -> WeightSample:
    """The zero-noise sample: w = mu exactly."""
    zeros = [(np.zeros(lay["w_mu"].shape), np.zeros(lay["b_mu"].shape))
             for lay in params.layers]
    return sample_weights(params, rng=None, eps=zeros)


def _apply_activation(spec: LayerSpec, h):
    if spec.activation == "identity":
        return h
    if spec.activation == "relu":
        return ad.relu(h)
    mu, sigma = spec.act_params()
    return ad.rbf_activation(h, mu=mu[np.newaxis, :], sigma=sigma[np.newaxis, :])


def forward(net: NetworkSpec, weights: WeightSample, x) -> Tensor:
    """Tape forward pass; differentiable w.r.t. weights and x."""
    h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if h.value.ndim != 2 or h.shape[1] != net.n_inputs:
        raise DimensionError(f"input shape {h.shape} incompatible with fan_in {net.n_inputs}")
    for spec, (w, b) in zip(net.layers, weights.layers):
        h = _apply_activation(spec, ad.matmul(h, w) + b)
    return h


def forward_arrays(net: NetworkSpec, weight_arrays, x):
    """numpy-only forward pass for prediction ensembles (no tape)."""
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != net.n_inputs:
        raise DimensionError(f"input shape {h.shape} incompatible with fan_in {net.n_inputs}")
    for spec, (w, b) in zip(net.layers, weight_arrays):
        h = h @ w + b
        if spec.activation == "relu":
            h = np.maximum(h, 0.0)
        elif spec.activation == "rbf":
            mu, sigma = spec.act_params()
            z = (h - mu[np.newaxis, :]) / sigma[np.newaxis, :]
            h = np.exp(-z * z)
    return h


def dropout_masks(net: NetworkSpec, rng):
    """Fresh Bernoulli(1-p) unit masks for every hidden layer (output exempt)."""
    keep = 1.0 - net.dropout_rate
    return [
        (rng.random(l.fan_out) < keep).astype(np.float64)
        for l in net.layers[:-1]
    ]


def dropout_forward(net: NetworkSpec, weights, x, rng=None, masks=None) -> Tensor:
    """Forward with unit dropout: w_i = M_i diag(z), i.e. (x@W)*z + b.

    Masks are fresh per call unless injected; no keep-rate rescaling.
    """
    if net.mode != "dropout":
        raise ContractError("dropout_forward requires a dropout-mode network")
    if masks is None:
        if rng is None:
            raise ContractError("dropout_forward needs rng or injected masks")
        masks = dropout_masks(net, rng)
    h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    layers = weights.layers if isinstance(weights, WeightSample) else weights
    n_hidden = len(net.layers) - 1
    for i, (spec, (w, b)) in enumerate(zip(net.layers, layers)):
        lin = ad.matmul(h, w)
        if i < n_hidden:
            lin = lin * Tensor(np.asarray(masks[i], dtype=np.float64)[np.newaxis, :])
        h = _apply_activation(spec, lin + b)
    return h


def kl_divergence(params: VariationalParams, prior: GaussianPrior,
                  method="closed_form", K=1, rng=None):
    """KL(q(w|theta) || prior) over all weights and biases, a scalar Tensor.

    closed_form uses the Gaussian identity per weight; mc(K) averages
    log q(w) - log p(w) over K reparameterized draws (needed when the
    prior is non-Gaussian, e.g. a constraint-reweighted prior).
    """
    if method == "closed_form":
        total = None
        log_pvar = math.log(prior.variance)
        for lay in params.layers:
            for mk, vk in (("w_mu", "w_log_var"), ("b_mu", "b_log_var")):
                mu, log_var = lay[mk], lay[vk]
                term = (ad.exp(log_var) + ad.square(mu - prior.mean)) / prior.variance
                term = term - 1.0 - log_var + log_pvar
                s = ad.tsum(term) * 0.5
                total = s if total is None else total + s
        return total
    if method == "mc":
        if K < 1:
            raise ContractError("mc KL needs K >= 1")
        if rng is None:
            raise ContractError("mc KL needs an rng")
        total = None
        for _ in range(K):
            ws = sample_weights(params, rng)
            term = log_q_density(params, ws) - log_prior_density(prior, ws)
            total = term if total is None else total + term
        return total * (1.0 / K)
    raise ContractError(f"unknown KL method {method!r}")


def log_q_density(params: VariationalParams, ws: WeightSample) -> Tensor:
    """log q(w | theta) for a reparameterized sample, on the tape."""
    total = None
    for lay, (w, b) in zip(params.layers, ws.layers):
        for mu, log_var, val in ((lay["w_mu"], lay["w_log_var"], w),
                                 (lay["b_mu"], lay["b_log_var"], b)):
            z2 = ad.square(val - mu) * ad.exp(-log_var)
            term = ad.tsum(log_var + z2) * (-0.5) - 0.5 * LOG_2PI * mu.size
            total = term if total is None else total + term
    return total


def log_prior_density(prior: GaussianPrior, ws: WeightSample) -> Tensor:
    """log p(w) under the isotropic Gaussian prior, on the tape."""
    total = None
    log_var = math.log(prior.variance)
    for w, b in ws.layers:
        for val in (w, b):
            z2 = ad.square(val - prior.mean) * (1.0 / prior.variance)
            term = ad.tsum(z2) * (-0.5) - 0.5 * (LOG_2PI + log_var) * val.size
            total = term if total is None else total + term
    return total


def nll_gaussian(pred: Tensor, target, obs_log_var) -> Tensor:
    """Gaussian negative log-likelihood, summed over points."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise DimensionError(f"pred {pred.shape} vs target {target.shape}")
    if not isinstance(obs_log_var, Tensor):
        obs_log_var = Tensor(float(obs_log_var))
    n = pred.size
    quad = ad.tsum(ad.square(pred - target)) * ad.exp(-obs_log_var) * 0.5
    return quad + (obs_log_var + LOG_2PI) * (0.5 * n)


@dataclass
class PredictiveSummary:
    """MC prediction ensemble at a set of input points."""

    x: np.ndarray        # (n_points, d)
    samples: np.ndarray  # (n_samples, n_points)
    mean: np.ndarray = field(default=None)
    std: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape[0] < 1:
            raise ContractError("samples must be (n_samples, n_points)")
        if self.mean is None:
            self.mean = self.samples.mean(axis=0)
        if self.std is None:
            self.std = self.samples.std(axis=0)  # population (ddof=0)


def predict(source, net: NetworkSpec, x, n_samples=100, rng=None) -> PredictiveSummary:
    """MC predictive ensemble from variational params, particles, or dropout weights.

    source: VariationalParams (reparameterized draws), a list of
    WeightSamples (particles; n_samples ignored), or a WeightSample with a
    dropout-mode net (fresh masks per draw).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, np.newaxis]
    if isinstance(source, VariationalParams):
        if n_samples < 2:
            raise ContractError("predict needs n_samples >= 2")
        if rng is None:
            raise ContractError("predict from variational params needs an rng")
        rows = []
        for _ in range(n_samples):
            arrays = sample_weight_arrays(source, rng)
            rows.append(forward_arrays(net, arrays, x)[:, 0])
        return PredictiveSummary(x=x, samples=np.stack(rows))
    if isinstance(source, WeightSample):
        if net.mode == "dropout":
            if rng is None:
                raise ContractError("dropout prediction needs an rng")
            rows = []
            for _ in range(n_samples):
                out = dropout_forward(net, source, x, rng=rng)
                rows.append(out.value[:, 0])
            return PredictiveSummary(x=x, samples=np.stack(rows))
        rows = [forward_arrays(net, source.as_arrays(), x)[:, 0]]
        return PredictiveSummary(x=x, samples=np.stack(rows))
    # particle set: list of WeightSamples
    rows = [forward_arrays(net, ws.as_arrays(), x)[:, 0] for ws in source]
    if len(rows) < 2:
        raise ContractError("particle prediction needs >= 2 particles")
    return PredictiveSummary(x=x, samples=np.stack(rows))


# ---------------------------------------------------------------------------
# checkpoint I/O

CHECKPOINT_FORMAT = "cbnn-checkpoint-v1"


def save_checkpoint(path, net: NetworkSpec, state, seed=None, config_hash=None, extra=None):
    """Write a JSON checkpoint. `state` is VariationalParams, a particle
    list, or a WeightSample (dropout)."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "net": net.to_dict(),
        "seed": seed,
        "config_hash": config_hash,
    }
    if isinstance(state, VariationalParams):
        doc["kind"] = "variational"
        doc["mu"] = state.flat_mu().tolist()
        doc["log_var"] = state.flat_log_var().tolist()
        doc["obs_log_var"] = float(state.obs_log_var.value)
    elif isinstance(state, WeightSample):
        doc["kind"] = "dropout"
        doc["weights"] = _flatten_ws(state).tolist()
    else:
        doc["kind"] = "particles"
        doc["particles"] = [_flatten_ws(ws).tolist() for ws in state]
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Read a checkpoint; returns (net, state, doc)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"not a recognized checkpoint: {path}")
    net = NetworkSpec.from_dict(doc["net"])
    kind = doc["kind"]
    if kind == "variational":
        params = init_params(net, np.random.default_rng(0))
        set_flat_mu(params, np.asarray(doc["mu"]))
        set_flat_log_var(params, np.asarray(doc["log_var"]))
        params.obs_log_var.value = np.asarray(float(doc["obs_log_var"]))
        return net, params, doc
    if kind == "dropout":
        return net, _unflatten_ws(net, np.asarray(doc["weights"])), doc
    if kind == "particles":
        return net, [_unflatten_ws(net, np.asarray(p)) for p in doc["particles"]], doc
    raise ContractError(f"unknown checkpoint kind {kind!r}")


def _flatten_ws(ws: WeightSample):
    return np.concatenate([np.concatenate([w.value.ravel(), b.value.ravel()])
                           for w, b in ws.layers])


def _unflatten_ws(net: NetworkSpec, flat):
    flat = np.asarray(flat, dtype=np.float64)
    layers = []
    eps = []
    i = 0
    for l in net.layers:
        nw = l.fan_in * l.fan_out
        w = flat[i:i + nw].reshape(l.fan_in, l.fan_out)
        i += nw
        b = flat[i:i + l.fan_out].reshape(1, l.fan_out)
        i += l.fan_out
        layers.append((Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)))
        eps.append((np.zeros_like(w), np.zeros_like(b)))
    if i != flat.size:
        raise DimensionError("flat weight length mismatch")
    return WeightSample(layers=layers, eps=eps)


def deterministic_weights(net: NetworkSpec, rng) -> WeightSample:
    """Point-estimate weights for dropout training, He-style init."""
    layers = []
    eps = []
    for l in net.layers:
        std = math.sqrt(2.0 / l.fan_in)
        w = rng.normal(0.0, std, size=(l.fan_in, l.fan_out))
        b = np.zeros((1, l.fan_out))
        layers.append((Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)))
        eps.append((np.zeros_like(w), np.zeros_like(b)))
    return WeightSample(layers=layers, eps=eps)
