"""Doubly-dual saddle-point training of (conditional) kernel exponential families.

The outer loop descends on the transport sampler ``g``; the inner loop ascends
on the RKHS functions ``f`` (natural parameter) and ``nu`` (dual of the KL term)
by stochastic functional gradients. Each outer iteration runs one inner refresh
of (f, nu), then ``sampler_updates_per_f`` sampler steps, each preceded by
``nu_updates_per_sampler`` extra nu steps. The returned f is the running mean
of the iterates over the last ``1 - average_from`` fraction of the outer loop;
the sampler always trains against the current iterate.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .data import Dataset, fit_normalization
from .errors import ContractError, DegenerateDataError, NumericError
from .kernel import KernelSpec, gram, median_bandwidth, sample_feature_map
from .rkhs import (EXPANSION, RANDOM_FEATURE, InnerLoopState, IterateAverage, RkhsFunction,
                   StepSchedule, run_inner_loop, truncate_state, update_nu)
from .sampler import ParamGradient, TransportSampler, apply_update, dual_gradient

log = logging.getLogger(__name__)

UNCONDITIONAL = "unconditional"
CONDITIONAL = "conditional"


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator derived from ``seed`` and a stream name."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def substream_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(0, 2**31 - 1))


@dataclass
class TrainConfig:
    lam: float = 20.0
    eta: float = 0.2
    inner_iters: int = 1
    outer_iters: int = 2000
    batch: int = 64
    tau0: float = 2.0
    k0: float = math.inf
    rho0: float = 0.05
    rho_decay: float = math.inf  # L0 in rho_l = rho0 / (1 + l / L0)
    rho_schedule: str = "decay"  # or "theory": rho_l = min(1/L, D'/(sigma sqrt L))
    theory_d: float = 1.0
    theory_sigma: float = 1.0
    sampler_updates_per_f: int = 5
    nu_updates_per_sampler: int = 3
    clip_norm: float = 5.0
    max_expansion_terms: int = 2000
    seed: int = 0
    backend: str = EXPANSION
    r: int = 4096
    hidden: int = 128
    depth: int = 3
    noise_dim: int = 128
    inflation: float = 2.0
    bandwidth_scale: float = 1.0  # multiplier on the median-heuristic bandwidth_sq
    standardize: bool = True
    warm_start: bool = True
    average_from: float = 0.5  # output f is the mean of the iterates after this fraction
    average_max_terms: int = 50000  # expansion backend: support cap of the averaged f
    log_every: int = 100
    log_n_mc: int = 500

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("lam", "eta", "tau0", "rho0", "clip_norm", "inflation", "k0", "rho_decay",
                     "bandwidth_scale"):
            v = getattr(self, name)
            if not v > 0:
                raise ContractError(f"{name} must be positive, got {v}")
        for name in ("inner_iters", "batch", "sampler_updates_per_f", "nu_updates_per_sampler",
                     "hidden", "depth", "noise_dim", "r", "max_expansion_terms",
                     "average_max_terms"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.outer_iters < 0:
            raise ContractError("outer_iters must be >= 0")
        if not 0.0 <= self.average_from <= 1.0:
            raise ContractError("average_from must lie in [0, 1]")
        if self.eta * self.tau0 >= 1:
            raise ContractError(f"eta * tau0 = {self.eta * self.tau0:g} must be < 1")
        if self.backend not in (EXPANSION, RANDOM_FEATURE):
            raise ContractError(f"unknown backend {self.backend!r}")
        if self.rho_schedule not in ("decay", "theory"):
            raise ContractError(f"unknown rho_schedule {self.rho_schedule!r}")

    def rho(self, l: int) -> float:
        if self.rho_schedule == "theory":
            L = max(self.outer_iters, 1)
            return min(1.0 / L, self.theory_d / (self.theory_sigma * math.sqrt(L)))
        return self.rho0 / (1.0 + l / self.rho_decay)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, float) and math.isinf(v):
                d[k] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ContractError(f"unknown config fields: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if v == "inf":
                v = math.inf
            kw[k] = v
        return cls(**kw)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return f"{zlib.crc32(blob):08x}"


@dataclass
class ReferenceMeasure:
    """Diagonal Gaussian base measure p0."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.var = np.atleast_1d(np.asarray(self.var, dtype=float))
        if np.any(self.var <= 0):
            raise DegenerateDataError("reference variance must be positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def log_density(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, self.dim)
        z = (X - self.mean) ** 2 / self.var
        return -0.5 * (z.sum(axis=1) + np.sum(np.log(2 * np.pi * self.var)))

    def grad_log_density(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, self.dim)
        return -(X - self.mean) / self.var

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + np.sqrt(self.var) * rng.standard_normal((n, self.dim))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "var": self.var.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ReferenceMeasure":
        return cls(np.asarray(d["mean"], float), np.asarray(d["var"], float))


def make_reference(data, inflation: float = 2.0) -> ReferenceMeasure:
    """Gaussian with the data mean and diagonal variance times ``inflation``."""
    X = data.samples if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.shape[0] == 0:
        raise ContractError("data is empty")
    var = X.var(axis=0)
    if np.any(var == 0):
        raise DegenerateDataError("zero-variance coordinate")
    return ReferenceMeasure(X.mean(axis=0), inflation * var)


# -- model -------------------------------------------------------------------------------

@dataclass
class TrainedModel:
    """Everything needed to evaluate f, sample from g and reload exactly.

    Model space is the standardized data space. In conditional mode the
    kernel acts on ``embed(x, y) = (x * w_x, y * w_y)``, a product RBF kernel
    with separate bandwidths per block; ``base`` is a measure on y only.
    """

    f: RkhsFunction
    nu: RkhsFunction
    sampler: TransportSampler
    base: ReferenceMeasure
    config: TrainConfig
    mode: str = UNCONDITIONAL
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None
    x_cols: tuple | None = None
    y_cols: tuple | None = None
    embed_scale: np.ndarray | None = None
    history: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)

    # -- coordinate maps ----------------------------------------------------------
    def _std(self, X, cols):
        X = np.asarray(X, dtype=float)
        if self.mean is None:
            return X
        return (X - self.mean[list(cols)]) / self.scale[list(cols)]

    def _unstd(self, Z, cols):
        if self.mean is None:
            return np.asarray(Z, dtype=float)
        return Z * self.scale[list(cols)] + self.mean[list(cols)]

    @property
    def dim(self) -> int:
        return self.f.kernel.input_dim

    def to_model(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self._std(X, range(X.shape[1]))

    def from_model(self, Z) -> np.ndarray:
        return self._unstd(Z, range(Z.shape[1]))

    def to_model_x(self, X) -> np.ndarray:
        return self._std(np.asarray(X, float).reshape(-1, len(self.x_cols)), self.x_cols)

    def to_model_y(self, Y) -> np.ndarray:
        return self._std(np.asarray(Y, float).reshape(-1, len(self.y_cols)), self.y_cols)

    def log_jacobian(self) -> float:
        return 0.0 if self.scale is None else float(np.sum(np.log(self.scale)))

    def log_jacobian_y(self) -> float:
        return 0.0 if self.scale is None else float(np.sum(np.log(self.scale[list(self.y_cols)])))

    def embed(self, X, Y) -> np.ndarray:
        return np.hstack([X, Y]) * self.embed_scale

    # -- evaluation ----------------------------------------------------------------
    def f_model(self, Z) -> np.ndarray:
        """f at model-space points (unconditional)."""
        return self.f(Z)

    def f_conditional(self, Xs, Ys) -> np.ndarray:
        return self.f(self.embed(Xs, Ys))

    def f_conditional_grid(self, Xs, Ygrid) -> np.ndarray:
        """``F[i, j] = f(x_i, y_j)`` for model-space ``x_i`` and ``y_j``."""
        Xs, Ygrid = np.atleast_2d(Xs), np.atleast_2d(Ygrid)
        dx = Xs.shape[1]
        wx, wy = self.embed_scale[:dx], self.embed_scale[dx:]
        f = self.f
        if f.backend == RANDOM_FEATURE:
            W, b = f.feature_map.frequencies, f.feature_map.phases
            # cos(a + c) = cos a cos c - sin a sin c with a from x, c from y
            a = (Xs * wx) @ W[:, :dx].T + b
            c = (Ygrid * wy) @ W[:, dx:].T
            s = f.feature_map.scale
            return s * ((np.cos(a) * f.beta) @ np.cos(c).T - (np.sin(a) * f.beta) @ np.sin(c).T)
        if f.n_terms == 0:
            return np.zeros((Xs.shape[0], Ygrid.shape[0]))
        P = f.support_points
        c = f.coefficients
        spec_x = KernelSpec(f.kernel.bandwidth_sq, dx)
        spec_y = KernelSpec(f.kernel.bandwidth_sq, Ygrid.shape[1])
        Kx = gram(spec_x, Xs * wx, P[:, :dx])
        Ky = gram(spec_y, Ygrid * wy, P[:, dx:])
        return (Kx * c) @ Ky.T

    def log_density_unnormalized(self, X) -> np.ndarray:
        """``lam f + log p0`` in data coordinates (unconditional), up to a constant."""
        Z = self.to_model(X)
        return self.config.lam * self.f(Z) + self.base.log_density(Z)

    def log_density_and_grad(self, x):
        """Unnormalized log density and its gradient at a single data-space point."""
        z = self.to_model(np.asarray(x, float).reshape(1, -1))
        val, grad = self.f.value_and_gradient(z)
        lam = self.config.lam
        lp = lam * val[0] + self.base.log_density(z)[0]
        g = lam * grad[0] + self.base.grad_log_density(z)[0]
        if self.scale is not None:
            g = g / self.scale
        return float(lp), g

    def sample(self, n: int, cond=None) -> np.ndarray:
        """Draws from the learned sampler in data coordinates."""
        if n == 0:
            return np.empty((0, len(self.y_cols) if self.mode == CONDITIONAL else self.dim))
        if self.mode == CONDITIONAL:
            Xs = self.to_model_x(cond)
            return self._unstd(self.sampler.sample(Xs.shape[0], Xs), self.y_cols)
        return self.from_model(self.sampler.sample(n))

    # -- serialization -------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": "kexp-model/1",
            "mode": self.mode,
            "config": self.config.to_dict(),
            "kernel": self.f.kernel.to_dict(),
            "f": self.f.to_dict(),
            "nu": self.nu.to_dict(),
            "sampler": self.sampler.to_dict(),
            "base": self.base.to_dict(),
            "normalization": None if self.mean is None else
            {"mean": self.mean.tolist(), "scale": self.scale.tolist()},
            "x_cols": None if self.x_cols is None else list(self.x_cols),
            "y_cols": None if self.y_cols is None else list(self.y_cols),
            "embed_scale": None if self.embed_scale is None else self.embed_scale.tolist(),
            "counts": self.counts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedModel":
        norm = d.get("normalization")
        es = d.get("embed_scale")
        return cls(
            f=RkhsFunction.from_dict(d["f"]),
            nu=RkhsFunction.from_dict(d["nu"]),
            sampler=TransportSampler.from_dict(d["sampler"]),
            base=ReferenceMeasure.from_dict(d["base"]),
            config=TrainConfig.from_dict(d["config"]),
            mode=d["mode"],
            mean=None if norm is None else np.asarray(norm["mean"], float),
            scale=None if norm is None else np.asarray(norm["scale"], float),
            x_cols=None if d.get("x_cols") is None else tuple(d["x_cols"]),
            y_cols=None if d.get("y_cols") is None else tuple(d["y_cols"]),
            embed_scale=None if es is None else np.asarray(es, float),
            counts=d.get("counts", {}),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "TrainedModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# -- problem adapters --------------------------------------------------------------------
# The inner loop only sees kernel-space point sets; these adapters produce them.

class _ModelDraws:
    """Sampler draws mapped to kernel space (``sample(n)``)."""

    def __init__(self, sampler, embed=None, cond_pool=None, rng=None):
        self.sampler, self.embed, self.cond_pool, self.rng = sampler, embed, cond_pool, rng

    def sample(self, n):
        if self.cond_pool is None:
            return self.sampler.sample(n)
        X = self.cond_pool[self.rng.integers(0, self.cond_pool.shape[0], size=n)]
        return self.embed(X, self.sampler.sample(n, X))


class _BaseDraws:
    """p0 draws in kernel space (``sample(n, rng)``); x paired from data when conditional."""

    def __init__(self, base, embed=None, cond_pool=None):
        self.base, self.embed, self.cond_pool = base, embed, cond_pool

    def sample(self, n, rng):
        Y = self.base.sample(n, rng)
        if self.cond_pool is None:
            return Y
        X = self.cond_pool[rng.integers(0, self.cond_pool.shape[0], size=n)]
        return self.embed(X, Y)


def _init_functions(kernel: KernelSpec, cfg: TrainConfig):
    fmap = None
    if cfg.backend == RANDOM_FEATURE:
        fmap = sample_feature_map(kernel, cfg.r, substream_seed(cfg.seed, "features"))
    return RkhsFunction(kernel, cfg.backend, fmap), RkhsFunction(kernel, cfg.backend, fmap)


def objective_estimate(model: TrainedModel, data, n_mc: int = 1000, seed: int = 0) -> float:
    """Monte-Carlo estimate of the doubly-dual objective, including the +1/lam constant.

    ``E_D[f] - E_q[f] - eta/2 ||f||^2 + (E_q[nu] - E_p0[exp nu] + 1) / lam``;
    ``data`` is a Dataset or array in data coordinates.
    """
    if n_mc < 1:
        raise ContractError("n_mc must be >= 1")
    cfg = model.config
    rng = np.random.default_rng(seed)
    sampler = model.sampler.copy()
    sampler.rng = substream(seed, "objective-noise")
    X = data.samples if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    if model.mode == CONDITIONAL:
        Xs = model.to_model_x(X[:, list(model.x_cols)])
        Ys = model.to_model_y(X[:, list(model.y_cols)])
        D = model.embed(Xs, Ys)
        idx = rng.integers(0, Xs.shape[0], size=n_mc)
        Q = model.embed(Xs[idx], sampler.sample(n_mc, Xs[idx]))
        idx = rng.integers(0, Xs.shape[0], size=n_mc)
        P0 = model.embed(Xs[idx], model.base.sample(n_mc, rng))
    else:
        D = model.to_model(X)
        Q = sampler.sample(n_mc)
        P0 = model.base.sample(n_mc, rng)
    with np.errstate(over="raise"):
        try:
            e_nu = np.exp(model.nu(P0))
        except FloatingPointError as exc:
            raise NumericError("exp(nu) overflow in objective estimate") from exc
    val = (model.f(D).mean() - model.f(Q).mean() - 0.5 * cfg.eta * model.f.norm_sq()
           + (model.nu(Q).mean() - e_nu.mean() + 1.0) / cfg.lam)
    return float(val)


def _mmd_quick(A, B):
    from .evaluation import mmd
    return mmd(A, B).mmd_unbiased


def _prepare(data: Dataset, cfg: TrainConfig, conditional: bool):
    X = data.samples
    if X.shape[0] == 0:
        raise ContractError("data is empty")
    mean = scale = None
    if cfg.standardize:
        mean, scale = fit_normalization(X)
        X = (X - mean) / scale
    return X, mean, scale


def _init_model(data: Dataset, cfg: TrainConfig, conditional: bool) -> tuple:
    X, mean, scale = _prepare(data, cfg, conditional)
    init_seed = substream_seed(cfg.seed, "init")
    noise_seed = substream_seed(cfg.seed, "sampler-noise")
    if conditional:
        if not data.conditional:
            raise ContractError("conditional training needs x_cols and y_cols")
        xc, yc = list(data.x_cols), list(data.y_cols)
        Xs, Ys = X[:, xc], X[:, yc]
        bw_x = cfg.bandwidth_scale * median_bandwidth(Xs, seed=init_seed)
        bw_y = cfg.bandwidth_scale * median_bandwidth(Ys, seed=init_seed)
        embed_scale = np.concatenate([np.full(len(xc), bw_x ** -0.5), np.full(len(yc), bw_y ** -0.5)])
        kernel = KernelSpec(1.0, len(xc) + len(yc))
        base = make_reference(Ys, cfg.inflation)
        sampler = TransportSampler.init(cfg.noise_dim, len(yc), cfg.hidden, cfg.depth,
                                        cond_dim=len(xc), seed=noise_seed, init_seed=init_seed)
        f, nu = _init_functions(kernel, cfg)
        model = TrainedModel(f, nu, sampler, base, cfg, CONDITIONAL, mean, scale,
                             tuple(data.x_cols), tuple(data.y_cols), embed_scale)
        return model, X
    kernel = KernelSpec(cfg.bandwidth_scale * median_bandwidth(X, seed=init_seed), X.shape[1])
    base = make_reference(X, cfg.inflation)
    sampler = TransportSampler.init(cfg.noise_dim, X.shape[1], cfg.hidden, cfg.depth,
                                    seed=noise_seed, init_seed=init_seed)
    f, nu = _init_functions(kernel, cfg)
    return TrainedModel(f, nu, sampler, base, cfg, UNCONDITIONAL, mean, scale), X


def _conditional_dual_gradient(model: TrainedModel, Xs: np.ndarray, batch: int,
                               rng) -> ParamGradient:
    s = model.sampler
    cond = Xs[rng.integers(0, Xs.shape[0], size=batch)]
    out, cache = s.forward(s.draw_noise(batch), cond, keep=True)
    Z = model.embed(cond, out)
    dx = cond.shape[1]
    v = -model.f.gradient(Z) + model.nu.gradient(Z) / model.config.lam
    v = v[:, dx:] * model.embed_scale[dx:]
    if not np.all(np.isfinite(v)):
        raise NumericError("non-finite input gradient of f or nu at sampler outputs")
    return s.backward(cache, v / batch)


def _run(data: Dataset, cfg: TrainConfig, conditional: bool, callback=None) -> TrainedModel:
    model, X = _init_model(data, cfg, conditional)
    if cfg.outer_iters == 0:
        return model
    rng = substream(cfg.seed, "training")
    state = InnerLoopState(model.f, model.nu, StepSchedule(cfg.tau0, cfg.k0))
    counts = {"inner_refreshes": 0, "dual_updates": 0, "extra_nu_steps": 0}
    if conditional:
        Xs = X[:, list(data.x_cols)]
        D = model.embed(Xs, X[:, list(data.y_cols)])
        draws = _ModelDraws(model.sampler, model.embed, Xs, rng)
        base_draws = _BaseDraws(model.base, model.embed, Xs)
    else:
        Xs = None
        D = X
        draws = _ModelDraws(model.sampler)
        base_draws = _BaseDraws(model.base)

    B = cfg.batch
    avg_start = int(math.floor(cfg.average_from * cfg.outer_iters))
    avg = IterateAverage(model.f) if avg_start < cfg.outer_iters else None
    for l in range(cfg.outer_iters):
        if not cfg.warm_start:
            state.f, state.nu = _init_functions(model.f.kernel, cfg)
            state.k = 0
        run_inner_loop(state.f, state.nu, D, draws, base_draws, cfg, rng=rng, state=state)
        counts["inner_refreshes"] += 1
        rho = cfg.rho(l)
        for _ in range(cfg.sampler_updates_per_f):
            for _ in range(cfg.nu_updates_per_sampler):
                # refinement steps reuse the current inner step size
                update_nu(state, draws.sample(B), base_draws.sample(B, rng), cfg.lam,
                          advance=False)
                counts["extra_nu_steps"] += 1
            model.f, model.nu = state.f, state.nu
            if conditional:
                grad = _conditional_dual_gradient(model, Xs, B, rng)
            else:
                grad = dual_gradient(model.sampler, state.f, state.nu, cfg.lam, B)
            apply_update(model.sampler, grad, rho, cfg.clip_norm)
            counts["dual_updates"] += 1
        truncate_state(state, cfg.max_expansion_terms)
        model.f, model.nu = state.f, state.nu
        if avg is not None and l >= avg_start:
            avg.add(state.f)
        if cfg.log_every and ((l + 1) % cfg.log_every == 0 or l == 0):
            row = _log_row(model, X, data, l + 1, cfg, conditional)
            model.history.append(row)
            log.info("iter %d objective %.5f mmd %.5f", l + 1, row["objective"], row["mmd_train"])
            if callback is not None:
                callback(model, row)
    model.f, model.nu = state.f, state.nu
    if avg is not None:
        model.f = avg.result(cfg.average_max_terms)
        counts["averaged_iterates"] = avg.count
    counts["inner_iters_total"] = counts["inner_refreshes"] * cfg.inner_iters
    model.counts = counts
    return model


def _log_row(model, X, data, it, cfg, conditional) -> dict:
    n = cfg.log_n_mc
    seed = substream_seed(cfg.seed, f"log-{it}")
    sub = X[np.random.default_rng(seed).integers(0, X.shape[0], size=min(n, X.shape[0]))]
    raw = data.samples if not cfg.standardize else model.from_model(X)
    obj = objective_estimate(model, raw, n_mc=n, seed=seed)
    s = model.sampler.copy()
    s.rng = np.random.default_rng(seed)
    if conditional:
        xc, yc = list(model.x_cols), list(model.y_cols)
        gen = sub.copy()
        gen[:, yc] = s.sample(sub.shape[0], sub[:, xc])
    else:
        gen = s.sample(sub.shape[0])
    return {"iteration": it, "objective": obj, "mmd_train": _mmd_quick(sub, gen),
            "f_terms": model.f.n_terms, "nu_terms": model.nu.n_terms}


def train(data: Dataset, cfg: TrainConfig, callback=None) -> TrainedModel:
    """Unconditional doubly-dual embedding SGD."""
    return _run(data, cfg, False, callback)


def train_conditional(data: Dataset, cfg: TrainConfig, callback=None) -> TrainedModel:
    """Conditional variant: g maps (x, xi) to y, p0 is a measure on y."""
    return _run(data, cfg, True, callback)
