"""RKHS functions and the stochastic functional-gradient inner loop.

Two backends share one interface:

* ``expansion``: ``f(x) = scale * sum_i c_i k(p_i, x)`` over a growing list of
  support points. ``scale`` is a lazy global multiplier so the shrink step of
  the f-update costs O(1).
* ``random_feature``: ``f(x) = beta . phi(x)`` for a fixed random feature map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NuDivergenceError, StepSizeError
from .kernel import KernelSpec, RandomFeatureMap, gram

EXPANSION = "expansion"
RANDOM_FEATURE = "random_feature"

_EXP_LIMIT = 700.0
_MIN_SCALE = 1e-100
_next_term_id = 0


def _take_ids(m: int) -> np.ndarray:
    # process-wide so that ids stay unique across re-initialized functions
    global _next_term_id
    ids = np.arange(_next_term_id, _next_term_id + m, dtype=np.int64)
    _next_term_id += m
    return ids


class RkhsFunction:
    def __init__(self, kernel: KernelSpec, backend: str = EXPANSION,
                 feature_map: RandomFeatureMap | None = None):
        if backend not in (EXPANSION, RANDOM_FEATURE):
            raise ContractError(f"unknown backend {backend!r}")
        self.kernel = kernel
        self.backend = backend
        d = kernel.input_dim
        if backend == RANDOM_FEATURE:
            if feature_map is None:
                raise ContractError("random_feature backend needs a feature map")
            if feature_map.input_dim != d:
                raise ContractError("feature map dimension does not match the kernel")
            self.feature_map = feature_map
            self.beta = np.zeros(feature_map.r)
        else:
            self.feature_map = None
            self._points = np.empty((16, d))
            self._coef = np.empty(16)
            self._ids = np.empty(16, dtype=np.int64)
            self._n = 0
            self._scale = 1.0

    # -- expansion bookkeeping -------------------------------------------------
    @property
    def n_terms(self) -> int:
        return self._n if self.backend == EXPANSION else 0

    @property
    def support_points(self) -> np.ndarray:
        return self._points[: self._n].copy()

    @property
    def coefficients(self) -> np.ndarray:
        return self._coef[: self._n] * self._scale

    @property
    def term_ids(self) -> np.ndarray:
        """Per-term ids, increasing in order of insertion and stable under truncation."""
        return self._ids[: self._n].copy()

    def scale_by(self, factor: float) -> None:
        if self.backend == RANDOM_FEATURE:
            self.beta *= factor
            return
        self._scale *= factor
        if abs(self._scale) < _MIN_SCALE:
            self._coef[: self._n] *= self._scale
            self._scale = 1.0

    def append(self, points, coefs) -> None:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        coefs = np.broadcast_to(np.asarray(coefs, dtype=float), (points.shape[0],))
        if points.shape[1] != self.kernel.input_dim:
            raise ContractError("support point dimension does not match the kernel")
        if self.backend == RANDOM_FEATURE:
            self.beta += coefs @ self.feature_map.features(points)
            return
        m = points.shape[0]
        need = self._n + m
        if need > self._coef.shape[0]:
            cap = max(need, 2 * self._coef.shape[0])
            P = np.empty((cap, self.kernel.input_dim))
            C = np.empty(cap)
            ids = np.empty(cap, dtype=np.int64)
            P[: self._n] = self._points[: self._n]
            C[: self._n] = self._coef[: self._n]
            ids[: self._n] = self._ids[: self._n]
            self._points, self._coef, self._ids = P, C, ids
        self._points[self._n:need] = points
        self._coef[self._n:need] = coefs / self._scale
        self._ids[self._n:need] = _take_ids(m)
        self._n = need

    def keep(self, idx) -> None:
        idx = np.asarray(idx, dtype=int)
        P = self._points[idx]
        C = self._coef[idx] * self._scale
        ids = self._ids[idx]
        cap = max(16, len(idx))
        self._points = np.empty((cap, self.kernel.input_dim))
        self._coef = np.empty(cap)
        self._ids = np.empty(cap, dtype=np.int64)
        self._n = len(idx)
        self._points[: self._n] = P
        self._coef[: self._n] = C
        self._ids[: self._n] = ids
        self._scale = 1.0

    # -- evaluation -------------------------------------------------------------
    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(1, -1) if self.kernel.input_dim > 1 else X.reshape(-1, 1)
        if X.shape[1] != self.kernel.input_dim:
            raise ContractError(
                f"expected points of dimension {self.kernel.input_dim}, got {X.shape[1]}")
        return X

    def __call__(self, X) -> np.ndarray:
        """Values at the rows of ``X``."""
        X = self._check(X)
        if self.backend == RANDOM_FEATURE:
            return self.feature_map.features(X) @ self.beta
        if self._n == 0:
            return np.zeros(X.shape[0])
        K = gram(self.kernel, X, self._points[: self._n])
        return (K @ self._coef[: self._n]) * self._scale

    def gradient(self, X) -> np.ndarray:
        X = self._check(X)
        if self.backend == RANDOM_FEATURE:
            return self.feature_map.grad_dot(X, self.beta)
        if self._n == 0:
            return np.zeros_like(X)
        P, c = self._points[: self._n], self._coef[: self._n] * self._scale
        K = gram(self.kernel, X, P)
        Kc = K @ c
        return (-2.0 / self.kernel.bandwidth_sq) * (X * Kc[:, None] - K @ (c[:, None] * P))

    def value_and_gradient(self, X):
        X = self._check(X)
        if self.backend == RANDOM_FEATURE:
            return self(X), self.gradient(X)
        if self._n == 0:
            return np.zeros(X.shape[0]), np.zeros_like(X)
        P, c = self._points[: self._n], self._coef[: self._n] * self._scale
        K = gram(self.kernel, X, P)
        Kc = K @ c
        grad = (-2.0 / self.kernel.bandwidth_sq) * (X * Kc[:, None] - K @ (c[:, None] * P))
        return Kc, grad

    def norm_sq(self) -> float:
        if self.backend == RANDOM_FEATURE:
            return float(self.beta @ self.beta)
        if self._n == 0:
            return 0.0
        c = self.coefficients
        v = float(c @ gram(self.kernel, self._points[: self._n]) @ c)
        return max(v, 0.0) if v >= -1e-9 else v

    def copy(self) -> "RkhsFunction":
        out = RkhsFunction.__new__(RkhsFunction)
        out.kernel, out.backend, out.feature_map = self.kernel, self.backend, self.feature_map
        if self.backend == RANDOM_FEATURE:
            out.beta = self.beta.copy()
        else:
            out._points = self._points[: max(self._n, 1)].copy()
            out._coef = self._coef[: max(self._n, 1)].copy()
            out._ids = self._ids[: max(self._n, 1)].copy()
            out._n, out._scale = self._n, self._scale
        return out

    def to_dict(self) -> dict:
        d = {"backend": self.backend, "kernel": self.kernel.to_dict()}
        if self.backend == RANDOM_FEATURE:
            d["feature_map"] = self.feature_map.to_dict()
            d["beta"] = self.beta.tolist()
        else:
            # raw coefficients plus the lazy multiplier reload bit-exactly
            d["support_points"] = self.support_points.tolist()
            d["coefficients"] = self._coef[: self._n].tolist()
            d["scale"] = float(self._scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RkhsFunction":
        kernel = KernelSpec.from_dict(d["kernel"])
        if d["backend"] == RANDOM_FEATURE:
            fn = cls(kernel, RANDOM_FEATURE, RandomFeatureMap.from_dict(d["feature_map"]))
            fn.beta = np.asarray(d["beta"], dtype=float)
            return fn
        fn = cls(kernel)
        pts = np.asarray(d["support_points"], dtype=float).reshape(-1, kernel.input_dim)
        if len(pts):
            fn.append(pts, np.asarray(d["coefficients"], dtype=float))
        fn._scale = float(d.get("scale", 1.0))
        return fn


class IterateAverage:
    """Running mean of a sequence of iterates of one RKHS function.

    For the expansion backend, terms are matched by ``term_ids`` so a support
    point shared by many iterates is stored once. Terms dropped from the
    iterate keep their accumulated weight in the average.
    """

    def __init__(self, like: RkhsFunction):
        self.kernel, self.backend, self.feature_map = like.kernel, like.backend, like.feature_map
        self.count = 0
        if self.backend == RANDOM_FEATURE:
            self._beta = np.zeros(like.feature_map.r)
        else:
            self._ids = np.empty(0, dtype=np.int64)
            self._points = np.empty((0, like.kernel.input_dim))
            self._coef = np.empty(0)

    def add(self, fn: RkhsFunction) -> None:
        self.count += 1
        if self.backend == RANDOM_FEATURE:
            self._beta += fn.beta
            return
        ids, c = fn.term_ids, fn.coefficients
        order = np.argsort(ids)
        ids, c, P = ids[order], c[order], fn.support_points[order]
        # ids are handed out increasingly, so anything unseen is newer than all stored ids
        fresh = ids > (self._ids[-1] if self._ids.size else -1)
        if np.any(fresh):
            self._ids = np.concatenate([self._ids, ids[fresh]])
            self._points = np.vstack([self._points, P[fresh]])
            self._coef = np.concatenate([self._coef, np.zeros(int(fresh.sum()))])
        self._coef[np.searchsorted(self._ids, ids)] += c

    def result(self, max_terms: int | None = None) -> RkhsFunction:
        """The mean as a new function, keeping the ``max_terms`` largest-|c| terms."""
        if self.count == 0:
            raise ContractError("no iterates were averaged")
        out = RkhsFunction(self.kernel, self.backend, self.feature_map)
        if self.backend == RANDOM_FEATURE:
            out.beta = self._beta / self.count
            return out
        c = self._coef / self.count
        idx = np.arange(c.size)
        if max_terms and c.size > max_terms:
            idx = np.sort(np.argsort(np.abs(c), kind="stable")[c.size - max_terms:])
        if idx.size:
            out.append(self._points[idx], c[idx])
        return out


def zero_function(kernel: KernelSpec, backend: str = EXPANSION,
                  feature_map: RandomFeatureMap | None = None) -> RkhsFunction:
    return RkhsFunction(kernel, backend, feature_map)


def eval_function(fn: RkhsFunction, x) -> float:
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return float(fn(x)[0])


def grad_function_x(fn: RkhsFunction, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return fn.gradient(x)[0]


def rkhs_norm_sq(fn: RkhsFunction) -> float:
    return fn.norm_sq()


def truncate_expansion(fn: RkhsFunction, max_terms: int) -> tuple[RkhsFunction, float]:
    """Drop the smallest-|coefficient| terms down to ``max_terms``.

    Works in place and returns ``(fn, dropped_norm)`` where ``dropped_norm`` is
    the RKHS norm of the removed part, an upper bound on the sup-norm change
    because ``k(x, x) = 1``.
    """
    if max_terms < 1:
        raise ContractError("max_terms must be >= 1")
    if fn.backend != EXPANSION or fn.n_terms <= max_terms:
        return fn, 0.0
    c = fn.coefficients
    order = np.argsort(np.abs(c), kind="stable")
    n_drop = fn.n_terms - max_terms
    drop, keep = np.sort(order[:n_drop]), np.sort(order[n_drop:])
    P = fn.support_points[drop]
    cd = c[drop]
    dropped = float(np.sqrt(max(cd @ gram(fn.kernel, P) @ cd, 0.0)))
    fn.keep(keep)
    return fn, dropped


@dataclass
class StepSchedule:
    """``tau_k = tau0 / (1 + k / k0)``; ``k0 = inf`` gives a constant step."""

    tau0: float
    k0: float = math.inf

    def __call__(self, k: int) -> float:
        return self.tau0 / (1.0 + k / self.k0)


@dataclass
class InnerLoopState:
    f: RkhsFunction
    nu: RkhsFunction
    schedule: StepSchedule
    k: int = 0
    dropped_mass: float = 0.0
    counts: dict = field(default_factory=lambda: {"f": 0, "nu": 0})

    @property
    def tau(self) -> float:
        return self.schedule(self.k)


def _rows(fn: RkhsFunction, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(1, -1)
    if pts.shape[1] != fn.kernel.input_dim:
        raise ContractError(f"expected points of dimension {fn.kernel.input_dim}, got {pts.shape[1]}")
    return pts


def update_f(state: InnerLoopState, data_point, sampler_point, eta: float,
             advance: bool = True) -> InnerLoopState:
    """One functional-gradient ascent step on f.

    ``f <- (1 - eta tau) f + tau (mean_b k(x_b, .) - mean_b k(g_b, .))``.
    Accepts single points or minibatches (rows).
    """
    tau = state.tau
    if eta * tau >= 1.0:
        raise StepSizeError(f"eta * tau = {eta * tau:g} must be < 1")
    X = _rows(state.f, data_point)
    G = _rows(state.f, sampler_point)
    state.f.scale_by(1.0 - eta * tau)
    state.f.append(X, tau / X.shape[0])
    state.f.append(G, -tau / G.shape[0])
    state.k += advance
    state.counts["f"] += 1
    return state


def update_nu(state: InnerLoopState, sampler_point, base_point, lam: float,
              advance: bool = True) -> InnerLoopState:
    """One functional-gradient ascent step on nu.

    ``nu <- nu + (tau / lam) (mean_b k(g_b, .) - mean_b exp(nu(x'_b)) k(x'_b, .))``.
    """
    tau = state.tau
    nu = state.nu
    G = _rows(nu, sampler_point)
    B = _rows(nu, base_point)
    if nu.backend == RANDOM_FEATURE:
        phi_b = nu.feature_map.features(B)  # shared by the evaluation and the update
        nu_b = phi_b @ nu.beta
    else:
        nu_b = nu(B)
    if not np.all(np.isfinite(nu_b)) or np.max(nu_b) > _EXP_LIMIT:
        raise NuDivergenceError(
            f"exp(nu) overflow at step {state.k}: max nu = {np.max(nu_b):g}")
    step = tau / lam
    nu.append(G, step / G.shape[0])
    if nu.backend == RANDOM_FEATURE:
        nu.beta -= (step * np.exp(nu_b) / B.shape[0]) @ phi_b
    else:
        nu.append(B, -step * np.exp(nu_b) / B.shape[0])
    state.k += advance
    state.counts["nu"] += 1
    return state


def truncate_state(state: InnerLoopState, max_terms: int | None) -> None:
    if not max_terms:
        return
    for fn in (state.f, state.nu):
        _, dropped = truncate_expansion(fn, max_terms)
        state.dropped_mass += dropped


def run_inner_loop(f_init: RkhsFunction, nu_init: RkhsFunction, data, sampler, base, cfg,
                   rng: np.random.Generator | None = None,
                   state: InnerLoopState | None = None):
    """K iterations of the joint (f, nu) stochastic functional-gradient loop.

    ``data`` is an ``n x d`` array of kernel-space points; ``sampler`` exposes
    ``sample(n)`` and ``base`` exposes ``sample(n, rng)``. Passing ``state``
    continues a warm-started loop (its f/nu take precedence over the inits).
    Returns ``(f, nu)``; with ``state`` given they are the state's objects.
    """
    K = int(cfg.inner_iters)
    if K < 1:
        raise ContractError("inner_iters must be >= 1")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if state is None:
        state = InnerLoopState(f_init.copy(), nu_init.copy(), StepSchedule(cfg.tau0, cfg.k0))
    data = np.asarray(data, dtype=float)
    B = int(cfg.batch)
    for _ in range(K):
        xg = sampler.sample(B)
        xb = base.sample(B, rng)
        xd = data[rng.integers(0, data.shape[0], size=B)]
        # one iteration: both functional gradients at the same (f_k, nu_k, tau_k)
        update_nu(state, xg, xb, cfg.lam, advance=False)
        update_f(state, xd, xg, cfg.eta)
        truncate_state(state, cfg.max_expansion_terms)
    return state.f, state.nu
