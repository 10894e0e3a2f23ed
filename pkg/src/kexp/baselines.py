"""Score-matching kernel exponential family and Hamiltonian Monte Carlo.

The score-matching estimator minimizes

    J(f) = lam^2/2 <f, C f> + lam <f, delta> + eta/2 ||f||^2

with ``C = 1/n sum_ij d_j k(x_i, .) (x) d_j k(x_i, .)`` and
``delta = 1/n sum_ij [d_j k(x_i, .) d_j log p0(x_i) + d_j^2 k(x_i, .)]``.
The minimizer has the closed form

    f = -(lam/eta) delta + sum_ij beta_ij d_j k(x_i, .),
    (lam^2/n G + eta I) beta = lam^3/(n eta) h,

where ``G`` is the (nd x nd) Gram matrix of the derivative features and
``h = <d_b k(x_l, .), delta>``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import ContractError, NumericError, ResourceError
from .kernel import KernelSpec, partial_kernel

MAX_FEATURES = 8000


def _unit(d, j, k=1):
    e = np.zeros(d, dtype=int)
    e[j] = k
    return e


def _blocks(kernel, X, Y, ox, oy):
    """Stack ``partial_kernel`` over coordinates: returns (d, len(X), len(Y))."""
    d = kernel.input_dim
    return np.stack([partial_kernel(kernel, X, Y, ox(j), oy) for j in range(d)])


@dataclass
class ScoreMatchingModel:
    data: np.ndarray
    beta: np.ndarray  # (n*d,) index i*d + j
    kernel: KernelSpec
    eta: float
    lam: float
    base_grad: np.ndarray  # d_j log p0 at the data, (n, d)
    gram_nbytes: int = 0
    base: object = None

    @property
    def delta_coef(self) -> float:
        return -self.lam / self.eta

    def _features(self, x, oy):
        """Derivative-feature values at ``x`` differentiated ``oy`` times in x.

        Returns ``(first, second)`` with shapes ``(d, n, m)``: ``d_j k(x_i, x)``
        and ``d_j^2 k(x_i, x)`` (derivatives in the support argument).
        """
        d = self.kernel.input_dim
        first = _blocks(self.kernel, self.data, x, lambda j: _unit(d, j), oy)
        second = _blocks(self.kernel, self.data, x, lambda j: _unit(d, j, 2), oy)
        return first, second

    def _combine(self, first, second, a, beta):
        n, d = self.data.shape
        B = beta.reshape(n, d).T  # (d, n)
        G = self.base_grad.T       # (d, n)
        delta = (np.einsum("jn,jnm->m", G, first) + second.sum(axis=(0, 1))) / n
        return a * delta + np.einsum("jn,jnm->m", B, first)

    def evaluate(self, X, a=None, beta=None) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.kernel.input_dim:
            raise ContractError(f"expected dimension {self.kernel.input_dim}, got {X.shape[1]}")
        a = self.delta_coef if a is None else a
        beta = self.beta if beta is None else beta
        first, second = self._features(X, np.zeros(self.kernel.input_dim, dtype=int))
        return self._combine(first, second, a, beta)

    def gradient(self, X, a=None, beta=None) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        a = self.delta_coef if a is None else a
        beta = self.beta if beta is None else beta
        d = self.kernel.input_dim
        cols = []
        for b in range(d):
            first, second = self._features(X, _unit(d, b))
            cols.append(self._combine(first, second, a, beta))
        return np.column_stack(cols)

    def _laplacian_terms(self, X, a, beta):
        d = self.kernel.input_dim
        out = []
        for b in range(d):
            first, second = self._features(X, _unit(d, b, 2))
            out.append(self._combine(first, second, a, beta))
        return np.column_stack(out)

    def norm_sq(self, a=None, beta=None) -> float:
        a = self.delta_coef if a is None else a
        beta = self.beta if beta is None else beta
        G, h, dd = _gram_terms(self.kernel, self.data, self.base_grad, with_delta_norm=True)
        return float(a * a * dd + 2 * a * h @ beta + beta @ G @ beta)

    def objective(self, a=None, beta=None) -> float:
        """``J(f)`` for ``f = a delta + sum beta_ij d_j k(x_i, .)``."""
        a = self.delta_coef if a is None else a
        beta = self.beta if beta is None else beta
        X = self.data
        n = X.shape[0]
        grad = self.gradient(X, a, beta)
        lap = self._laplacian_terms(X, a, beta)
        lam = self.lam
        fit = (0.5 * lam**2 * np.sum(grad**2) + lam * np.sum(grad * self.base_grad + lap)) / n
        return float(fit + 0.5 * self.eta * self.norm_sq(a, beta))

    def heldout_loss(self, X, base_grad) -> float:
        """Score-matching fit term on new points; lower is better, up to a constant."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        grad = self.gradient(X)
        lap = self._laplacian_terms(X, self.delta_coef, self.beta)
        lam = self.lam
        return float(np.mean(np.sum(0.5 * lam**2 * grad**2 + lam * (grad * base_grad + lap), axis=1)))

    def log_density_and_grad(self, x):
        """Unnormalized ``lam f + log p0`` and gradient at one point."""
        x = np.asarray(x, dtype=float).reshape(1, -1)
        val = self.lam * self.evaluate(x)[0] + self.base.log_density(x)[0]
        grad = self.lam * self.gradient(x)[0] + self.base.grad_log_density(x)[0]
        return float(val), grad

    def to_dict(self) -> dict:
        return {
            "format": "kexp-score-matching/1",
            "kernel": self.kernel.to_dict(),
            "data": self.data.tolist(),
            "beta": self.beta.tolist(),
            "eta": self.eta,
            "lam": self.lam,
            "base_grad": self.base_grad.tolist(),
            "base": None if self.base is None else self.base.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreMatchingModel":
        from .trainer import ReferenceMeasure
        kernel = KernelSpec.from_dict(d["kernel"])
        base = None if d.get("base") is None else ReferenceMeasure.from_dict(d["base"])
        return cls(np.asarray(d["data"], float).reshape(-1, kernel.input_dim),
                   np.asarray(d["beta"], float), kernel, float(d["eta"]), float(d["lam"]),
                   np.asarray(d["base_grad"], float).reshape(-1, kernel.input_dim), base=base)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "ScoreMatchingModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _gram_terms(kernel, X, base_grad, with_delta_norm=False):
    """``G`` (nd x nd), ``h`` (nd,), and optionally ``<delta, delta>``."""
    n, d = X.shape
    G = np.empty((n, d, n, d))
    h = np.zeros((n, d))
    # second-order-in-support blocks summed over j, and first-order weighted by base_grad
    for b in range(d):
        eb = _unit(d, b)
        for j in range(d):
            Kjb = partial_kernel(kernel, X, X, _unit(d, j), eb)  # <d_j k(x_i,.), d_b k(x_l,.)>
            G[:, j, :, b] = Kjb
            h[:, b] += base_grad[:, j] @ Kjb
            h[:, b] += partial_kernel(kernel, X, X, _unit(d, j, 2), eb).sum(axis=0)
    h /= n
    G = G.reshape(n * d, n * d)
    if not with_delta_norm:
        return G, h.reshape(-1), None
    dd = 0.0
    for j in range(d):
        for b in range(d):
            e1, e2 = _unit(d, j), _unit(d, b)
            s1, s2 = _unit(d, j, 2), _unit(d, b, 2)
            dd += base_grad[:, j] @ partial_kernel(kernel, X, X, e1, e2) @ base_grad[:, b]
            dd += 2 * base_grad[:, j] @ partial_kernel(kernel, X, X, e1, s2).sum(axis=1)
            dd += partial_kernel(kernel, X, X, s1, s2).sum()
    return G, h.reshape(-1), dd / n**2


def fit_score_matching(data, kernel: KernelSpec, eta: float, base, lam: float = 1.0,
                       max_features: int = MAX_FEATURES) -> ScoreMatchingModel:
    """Closed-form minimizer of the penalized score-matching objective."""
    X = data.samples if hasattr(data, "samples") else np.asarray(data, dtype=float)
    X = np.atleast_2d(X)
    n, d = X.shape
    if d != kernel.input_dim:
        raise ContractError(f"data dimension {d} does not match kernel dimension {kernel.input_dim}")
    if eta <= 0:
        raise ContractError("eta must be positive")
    if n * d > max_features:
        raise ResourceError(f"n*d = {n * d} exceeds the dense-solve guard of {max_features}")
    base_grad = base.grad_log_density(X) if hasattr(base, "grad_log_density") else base(X)
    base_grad = np.asarray(base_grad, dtype=float).reshape(n, d)
    G, h, _ = _gram_terms(kernel, X, base_grad)
    A = (lam**2 / n) * G + eta * np.eye(n * d)
    try:
        cf = cho_factor(A)
    except LinAlgError as exc:
        raise NumericError("score-matching system is not positive definite") from exc
    beta = cho_solve(cf, (lam**3 / (n * eta)) * h)
    return ScoreMatchingModel(X.copy(), beta, kernel, float(eta), float(lam), base_grad,
                              gram_nbytes=int(G.nbytes),
                              base=base if hasattr(base, "log_density") else None)


def select_score_matching(X, base, bandwidths, etas, lam: float = 1.0, holdout: float = 0.2,
                          seed: int = 0, max_features: int = MAX_FEATURES):
    """Pick (bandwidth, eta) by held-out score-matching loss, then refit on all of X.

    Returns the refitted model and the list of ``(bandwidth, eta, loss)`` rows.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not 0 < holdout < 1:
        raise ContractError("holdout must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(X.shape[0])
    n_val = max(1, int(round(holdout * X.shape[0])))
    val, fit = X[perm[:n_val]], X[perm[n_val:]]
    val_grad = base.grad_log_density(val)
    rows = []
    for bw in bandwidths:
        for eta in etas:
            m = fit_score_matching(fit, KernelSpec(bw, X.shape[1]), eta, base, lam, max_features)
            rows.append((float(bw), float(eta), m.heldout_loss(val, val_grad)))
    bw, eta, _ = min(rows, key=lambda r: r[2])
    return fit_score_matching(X, KernelSpec(bw, X.shape[1]), eta, base, lam, max_features), rows


def eval_score_matching_f(model: ScoreMatchingModel, x) -> float:
    return float(model.evaluate(np.asarray(x, dtype=float).reshape(1, -1))[0])


# -- HMC --------------------------------------------------------------------------

@dataclass
class HmcConfig:
    step_size: float = 0.1
    leapfrog_steps: int = 10
    chain_length: int = 2000
    burn_in: int = 500
    seed: int = 0
    adapt: bool = True
    target_accept: float = 0.7

    def __post_init__(self):
        if not self.step_size > 0:
            raise ContractError("step_size must be positive")
        if self.leapfrog_steps < 1:
            raise ContractError("leapfrog_steps must be >= 1")
        if not 0 <= self.burn_in < self.chain_length:
            raise ContractError("need 0 <= burn_in < chain_length")


@dataclass
class HmcResult:
    draws: np.ndarray
    acceptance_rate: float
    step_size: float


def leapfrog(grad_fn, q, p, step, n_steps):
    """``n_steps`` leapfrog steps for H = -log pi(q) + |p|^2 / 2.

    ``grad_fn(q)`` returns ``(log pi(q), grad log pi(q))``. Returns
    ``(q, p, log pi(q), grad)`` at the end of the trajectory.
    """
    lp, g = grad_fn(q)
    p = p + 0.5 * step * g
    for i in range(n_steps):
        q = q + step * p
        lp, g = grad_fn(q)
        if i < n_steps - 1:
            p = p + step * g
    p = p + 0.5 * step * g
    return q, p, lp, g


def hmc_sample(log_density_grad, cfg: HmcConfig, init) -> HmcResult:
    """Leapfrog HMC with Metropolis correction.

    With ``cfg.adapt`` the step size is tuned during burn-in by dual
    averaging towards ``cfg.target_accept`` and then frozen.
    """
    rng = np.random.default_rng(cfg.seed)
    q = np.asarray(init, dtype=float).reshape(-1).copy()
    lp, _ = log_density_grad(q)
    if not np.isfinite(lp):
        raise NumericError("non-finite log density at the initial point")
    step = cfg.step_size
    # dual averaging state (Hoffman & Gelman)
    mu, hbar, log_avg, t0, gamma, kappa = np.log(10 * step), 0.0, 0.0, 10.0, 0.05, 0.75
    draws = np.empty((cfg.chain_length - cfg.burn_in, q.size))
    accepted = 0
    for it in range(cfg.chain_length):
        p0 = rng.standard_normal(q.size)
        with np.errstate(over="ignore", invalid="ignore"):
            q1, p1, lp1, _ = leapfrog(log_density_grad, q, p0, step, cfg.leapfrog_steps)
            log_ratio = (lp1 - 0.5 * p1 @ p1) - (lp - 0.5 * p0 @ p0)
        accept_prob = float(np.exp(min(0.0, log_ratio))) if np.isfinite(log_ratio) else 0.0
        if rng.uniform() < accept_prob:
            q, lp = q1, lp1
            if it >= cfg.burn_in:
                accepted += 1
        if it < cfg.burn_in and cfg.adapt:
            m = it + 1
            hbar = (1 - 1 / (m + t0)) * hbar + (cfg.target_accept - accept_prob) / (m + t0)
            log_step = mu - np.sqrt(m) / gamma * hbar
            w = m ** -kappa
            log_avg = w * log_step + (1 - w) * log_avg
            step = float(np.exp(log_step))
            if it == cfg.burn_in - 1:
                step = float(np.exp(log_avg))
        if it >= cfg.burn_in:
            draws[it - cfg.burn_in] = q
    n_kept = cfg.chain_length - cfg.burn_in
    return HmcResult(draws, accepted / n_kept, step)
