"""Evaluation metrics and brute-force duality oracles.

MMD between sample sets, log-partition estimates (quadrature and importance
sampling), negative log-likelihood of trained models, and small-instance
checks of the Fenchel-dual identities the estimator is built on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ContractError, NumericError, UnsupportedError
from .kernel import KernelSpec, gram, median_bandwidth

_CHUNK = 2048


@dataclass
class MmdReport:
    mmd_biased: float
    mmd_unbiased: float
    kernel: KernelSpec
    n_x: int
    n_y: int

    def to_dict(self) -> dict:
        return {"mmd_biased": self.mmd_biased, "mmd_unbiased": self.mmd_unbiased,
                "kernel": self.kernel.to_dict(), "n_x": self.n_x, "n_y": self.n_y}


def _kernel_sums(kernel, X, Y):
    """Sum of all entries of ``K(X, Y)``, accumulated over row blocks."""
    total = 0.0
    for i in range(0, X.shape[0], _CHUNK):
        total += float(gram(kernel, X[i:i + _CHUNK], Y).sum())
    return total


def mmd(X, Y, kernel: KernelSpec | None = None) -> MmdReport:
    """Biased (V) and unbiased (U) estimates of squared MMD."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[1] != Y.shape[1]:
        raise ContractError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    m, n = X.shape[0], Y.shape[0]
    if m < 2 or n < 2:
        raise ContractError("mmd needs at least two samples per set")
    if kernel is None:
        kernel = KernelSpec(median_bandwidth(np.vstack([X, Y])), X.shape[1])
    sxx = _kernel_sums(kernel, X, X)
    syy = _kernel_sums(kernel, Y, Y)
    sxy = _kernel_sums(kernel, X, Y)
    # k(x, x) = 1 on the diagonal
    biased = sxx / m**2 + syy / n**2 - 2 * sxy / (m * n)
    unbiased = (sxx - m) / (m * (m - 1)) + (syy - n) / (n * (n - 1)) - 2 * sxy / (m * n)
    return MmdReport(float(max(biased, 0.0)), float(unbiased), kernel, m, n)


def pooled_kernel(X, Y, seed: int = 0) -> KernelSpec:
    X, Y = np.atleast_2d(X), np.atleast_2d(Y)
    return KernelSpec(median_bandwidth(np.vstack([X, Y]), seed=seed), X.shape[1])


# -- log-partition --------------------------------------------------------------------

def _grid(box, grid_points):
    box = np.atleast_2d(np.asarray(box, dtype=float))
    if box.shape[0] > 2:
        raise UnsupportedError("quadrature supports dimension <= 2")
    axes = [np.linspace(lo, hi, grid_points) for lo, hi in box]
    # trapezoid weights per axis
    wts = []
    for a in axes:
        w = np.full(a.size, a[1] - a[0])
        w[0] = w[-1] = 0.5 * (a[1] - a[0])
        wts.append(w)
    if len(axes) == 1:
        return axes[0][:, None], np.log(wts[0])
    XX, YY = np.meshgrid(*axes, indexing="ij")
    W = np.outer(*wts)
    return np.column_stack([XX.ravel(), YY.ravel()]), np.log(W.ravel())


def default_box(base, width: float = 6.0):
    sd = np.sqrt(base.var)
    return np.column_stack([base.mean - width * sd, base.mean + width * sd])


def log_partition_quadrature(f, base, box=None, grid_points: int = 2001,
                             lam: float = 1.0) -> float:
    """Trapezoid-rule ``log int exp(lam f(x)) p0(x) dx`` for d <= 2."""
    if base.dim > 2:
        raise UnsupportedError("quadrature supports dimension <= 2")
    if box is None:
        box = default_box(base, 8.0 if base.dim == 1 else 6.0)
    P, logw = _grid(box, grid_points if base.dim == 1 else min(grid_points, 401))
    vals = lam * np.asarray(f(P), dtype=float).reshape(-1) + base.log_density(P)
    if not np.all(np.isfinite(vals)):
        raise NumericError("non-finite integrand in quadrature")
    return float(logsumexp(vals + logw))


def log_partition_importance(f, base, n_mc: int = 10_000, seed: int = 0,
                             lam: float = 1.0) -> tuple[float, float]:
    """``log E_p0[exp(lam f)]`` by Monte Carlo, with a delta-method std error."""
    if n_mc < 100:
        raise ContractError("n_mc must be >= 100")
    rng = np.random.default_rng(seed)
    X = base.sample(n_mc, rng)
    return _log_mean_exp(lam * np.asarray(f(X), dtype=float).reshape(-1))


def _log_mean_exp(a) -> tuple[float, float]:
    n = a.size
    amax = np.max(a)
    if not np.isfinite(amax):
        raise NumericError("non-finite log-weights")
    w = np.exp(a - amax)
    mean_w = w.mean()
    if mean_w == 0.0:
        raise NumericError("all importance weights underflow; use quadrature or larger n_mc")
    est = float(amax + np.log(mean_w))
    se = float(w.std(ddof=1) / np.sqrt(n) / mean_w) if n > 1 else 0.0
    return est, se


# -- negative log-likelihood -----------------------------------------------------------

@dataclass
class NllReport:
    mean_nll: float
    std_err: float
    partition_estimates: list = field(default_factory=list)
    partition_std_errs: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mean_nll": self.mean_nll, "std_err": self.std_err,
                "partition_estimates": self.partition_estimates,
                "partition_std_errs": self.partition_std_errs}


def nll_conditional(model, test, n_mc: int = 10_000, seed: int = 0,
                    method: str = "auto") -> NllReport:
    """Mean of ``-log p(y | x)`` over test pairs, in the units of ``test``.

    ``A_x`` is estimated per test condition by importance sampling from p0(y)
    (``method='importance'``) or trapezoid quadrature over y
    (``method='quadrature'``, dim(y) <= 2). ``auto`` picks quadrature when
    dim(y) <= 2.
    """
    if model.mode != "conditional":
        raise ContractError("nll_conditional needs a conditional model")
    X_raw, Y_raw = test.x, test.y
    Xs, Ys = model.to_model_x(X_raw), model.to_model_y(Y_raw)
    lam = model.config.lam
    dy = Ys.shape[1]
    if method == "auto":
        method = "quadrature" if dy <= 2 else "importance"
    base = model.base
    if method == "quadrature":
        if dy > 2:
            raise UnsupportedError("quadrature needs dim(y) <= 2")
        grid, logw = _grid(default_box(base, 8.0 if dy == 1 else 6.0), 801 if dy == 1 else 121)
        log_p0 = base.log_density(grid)
        F = model.f_conditional_grid(Xs, grid)  # n_test x n_grid
        A = logsumexp(lam * F + log_p0 + logw, axis=1)
        A_se = np.zeros_like(A)
    elif method == "importance":
        rng = np.random.default_rng(seed)
        grid = base.sample(n_mc, rng)
        F = model.f_conditional_grid(Xs, grid)
        amax = np.max(lam * F, axis=1, keepdims=True)
        W = np.exp(lam * F - amax)
        mw = W.mean(axis=1)
        if np.any(mw == 0):
            raise NumericError("importance weights underflow")
        A = amax[:, 0] + np.log(mw)
        A_se = W.std(axis=1, ddof=1) / np.sqrt(n_mc) / mw
    else:
        raise ContractError(f"unknown method {method!r}")
    fvals = model.f_conditional(Xs, Ys)
    log_lik = lam * fvals + base.log_density(Ys) - A - model.log_jacobian_y()
    nll = -log_lik
    if not np.all(np.isfinite(nll)):
        raise NumericError("non-finite log-likelihood")
    se = float(nll.std(ddof=1) / np.sqrt(nll.size)) if nll.size > 1 else 0.0
    return NllReport(float(nll.mean()), se, A.tolist(), np.asarray(A_se).tolist())


def nll_unconditional(model, X, box=None, grid_points: int = 401) -> NllReport:
    """Mean ``-log p_f(x)`` of an unconditional model (d <= 2, quadrature)."""
    Z = model.to_model(X)
    lam = model.config.lam
    A = log_partition_quadrature(model.f_model, model.base, box, grid_points, lam=lam)
    ll = lam * model.f_model(Z) + model.base.log_density(Z) - A - model.log_jacobian()
    nll = -ll
    se = float(nll.std(ddof=1) / np.sqrt(nll.size)) if nll.size > 1 else 0.0
    return NllReport(float(nll.mean()), se, [A], [0.0])


# -- duality oracles --------------------------------------------------------------------

def _grid_1d(grid):
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if grid.size < 200:
        raise ContractError("grid needs at least 200 points")
    w = np.full(grid.size, grid[1] - grid[0])
    w[0] = w[-1] = 0.5 * (grid[1] - grid[0])
    return grid, w


def oracle_fenchel_log_partition(f, base, grid, lam: float = 1.0, ascent_iters: int = 4000,
                                 return_ascent: bool = False):
    """Maximize ``lam <q, f> - KL(q || p0)`` over grid densities by brute force.

    Two routes: the closed-form maximizer ``q* = p0 exp(lam f - A)`` evaluated
    on the grid, and an independent mirror (exponentiated-gradient) ascent on
    the probability simplex of grid masses. Returns ``(A_value, q_density)``
    from the closed form; ``return_ascent`` also returns the ascent's
    ``(value, density)``.
    """
    if base.dim != 1:
        raise UnsupportedError("oracle is one-dimensional")
    x, w = _grid_1d(grid)
    fx = np.asarray(f(x[:, None]), dtype=float).reshape(-1)
    p0 = np.exp(base.log_density(x[:, None]))
    p0_mass = p0 * w / np.sum(p0 * w)

    def objective(mass):
        nz = mass > 0
        kl = np.sum(mass[nz] * np.log(mass[nz] / p0_mass[nz]))
        return lam * np.sum(mass * fx) - kl

    logits = lam * fx + np.log(p0_mass)
    mass_star = np.exp(logits - logsumexp(logits))
    value = objective(mass_star)
    density = mass_star / w
    if not return_ascent:
        return float(value), density

    # mirror ascent on the simplex: gradient of the objective is lam f - log(m / p0) - 1
    mass = p0_mass.copy()
    step = 0.5
    for _ in range(ascent_iters):
        g = lam * fx - np.log(mass / p0_mass) - 1.0
        logm = np.log(mass) + step * g
        mass = np.exp(logm - logsumexp(logm))
    return float(value), density, (float(objective(mass)), mass / w)


def oracle_kl_dual(q_density, base, grid, ascent_iters: int = 20000):
    """KL(q || p0) on a 1-d grid three ways.

    Returns ``(kl_quadrature, dual_at_closed_form, dual_by_ascent)`` where the
    dual value is ``E_q[nu] - E_p0[exp(nu)] + 1`` at ``nu* = log(q/p0)`` and at
    the result of free gradient ascent on the grid values of nu.
    """
    x, w = _grid_1d(grid)
    q = np.asarray(q_density, dtype=float).reshape(-1)
    p0 = np.exp(base.log_density(x[:, None]))
    for name, dens in (("q", q), ("p0", p0)):
        if abs(np.sum(dens * w) - 1.0) > 1e-8:
            raise ContractError(f"{name} is not normalized on the grid")
    qm, pm = q * w, p0 * w
    nz = qm > 0
    kl = float(np.sum(qm[nz] * np.log(q[nz] / p0[nz])))

    def dual(nu):
        return float(np.sum(qm * nu) - np.sum(pm * np.exp(nu)) + 1.0)

    with np.errstate(divide="ignore"):
        nu_star = np.where(nz, np.log(np.where(nz, q, 1.0) / p0), -np.inf)
    closed = float(np.sum(qm[nz] * nu_star[nz]) - np.sum(pm[nz] * np.exp(nu_star[nz])) + 1.0)

    # per-coordinate Newton-preconditioned ascent, starting from nu = 0
    nu = np.zeros_like(x)
    for _ in range(ascent_iters):
        g = qm - pm * np.exp(nu)
        h = pm * np.exp(nu)
        step = np.where(h > 1e-300, g / np.maximum(h, 1e-300), 0.0)
        nu = nu + np.clip(step, -1.0, 1.0)
        if np.max(np.abs(g)) < 1e-15:
            break
    return kl, closed, dual(nu)


def strong_duality_gap(n_basis: int = 20, n_bins: int = 200, eta: float = 0.5,
                       lam: float = 1.0, seed: int = 0):
    """Max-min and min-max values of a discretized saddle problem.

    ``f = sum_j a_j k(c_j, .)`` on ``n_basis`` centres (RKHS norm ``a' G a``),
    ``q`` a mass vector on ``n_bins`` bins, p0 standard normal, and D a fixed
    empirical set. Returns ``(max_min, min_max)``:

    * max over a of min over q: the inner min is closed form,
      ``-A(lam f)/lam``, so the outer problem is a smooth concave maximization.
    * min over q of max over a: the inner max is closed form,
      ``(1/(2 eta)) (m_D - m_q)' G^{-1} (m_D - m_q)`` projected on the span,
      so the outer problem is a convex minimization over the simplex.
    """
    from scipy.optimize import minimize

    rng = np.random.default_rng(seed)
    x = np.linspace(-5, 5, n_bins)
    dx = x[1] - x[0]
    logp0 = -0.5 * x**2 - 0.5 * np.log(2 * np.pi) + np.log(dx)
    logp0 -= logsumexp(logp0)
    data = np.concatenate([rng.normal(-1.5, 0.5, 30), rng.normal(1.0, 0.7, 30)])
    centres = np.linspace(-4, 4, n_basis)
    kern = KernelSpec(1.0, 1)
    G = gram(kern, centres[:, None]) + 1e-10 * np.eye(n_basis)
    Phi = gram(kern, x[:, None], centres[:, None])  # bins x basis
    m_D = gram(kern, data[:, None], centres[:, None]).mean(axis=0)

    # max_a min_q: min_q [-E_q f + KL/lam] = -(1/lam) log sum p0 exp(lam f)
    def neg_primal(a):
        z = lam * (Phi @ a) + logp0
        A = logsumexp(z)
        q = np.exp(z - A)
        val = m_D @ a - 0.5 * eta * a @ G @ a - A / lam
        grad = m_D - eta * G @ a - Phi.T @ q
        return -val, -grad

    res = minimize(neg_primal, np.zeros(n_basis), jac=True, method="L-BFGS-B",
                   options={"maxiter": 5000, "gtol": 1e-12, "ftol": 1e-15})
    max_min = -res.fun

    # min_q max_a: max_a gives a* = G^{-1}(m_D - m_q)/eta, value diff' G^{-1} diff / (2 eta)
    Ginv = np.linalg.inv(G)

    def dual_obj(theta):
        logq = theta - logsumexp(theta)
        q = np.exp(logq)
        diff = m_D - Phi.T @ q
        u = Ginv @ diff
        val = diff @ u / (2 * eta) + np.sum(q * (logq - logp0)) / lam
        # gradient w.r.t. q, then through softmax
        gq = -(Phi @ u) / eta + (logq - logp0 + 1.0) / lam
        gtheta = q * (gq - q @ gq)
        return val, gtheta

    res2 = minimize(dual_obj, logp0.copy(), jac=True, method="L-BFGS-B",
                    options={"maxiter": 20000, "gtol": 1e-12, "ftol": 1e-15})
    return float(max_min), float(res2.fun)
