"""Synthetic datasets (ring, grid, two moons), CSV I/O and normalization."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, DegenerateDataError, NumericError

# Gaussian envelope for two-moons rejection sampling: exp(-U) <= M * N(0, s^2 I)
_MOONS_ENVELOPE_SD = 2.0


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: np.ndarray
    x_cols: tuple | None = None
    y_cols: tuple | None = None
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None
    seed: int | None = None
    columns: tuple | None = None

    def __post_init__(self):
        X = np.asarray(self.samples, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        object.__setattr__(self, "samples", X)
        if (self.x_cols is None) != (self.y_cols is None):
            raise ContractError("x_cols and y_cols must be given together")
        if self.x_cols is not None:
            cols = sorted(list(self.x_cols) + list(self.y_cols))
            if cols != list(range(X.shape[1])):
                raise ContractError("x_cols and y_cols must partition the columns")

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def d(self) -> int:
        return self.samples.shape[1]

    @property
    def conditional(self) -> bool:
        return self.x_cols is not None

    @property
    def x(self) -> np.ndarray:
        return self.samples[:, list(self.x_cols)]

    @property
    def y(self) -> np.ndarray:
        return self.samples[:, list(self.y_cols)]

    def with_split(self, x_cols, y_cols) -> "Dataset":
        return replace(self, x_cols=tuple(x_cols), y_cols=tuple(y_cols))

    def denormalize(self, X=None) -> np.ndarray:
        X = self.samples if X is None else np.asarray(X, dtype=float)
        if self.mean is None:
            return X.copy()
        return X * self.scale + self.mean


def fit_normalization(X) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    if np.any(scale == 0):
        raise DegenerateDataError(f"zero-variance columns: {np.flatnonzero(scale == 0).tolist()}")
    return mean, scale


def normalize(ds: Dataset, mean=None, scale=None) -> Dataset:
    """Centre and scale columns (statistics fitted on ``ds`` unless given)."""
    if mean is None:
        mean, scale = fit_normalization(ds.samples)
    Z = (ds.samples - mean) / scale
    return replace(ds, samples=Z, mean=np.asarray(mean, float), scale=np.asarray(scale, float))


# -- generators ------------------------------------------------------------------

def gen_ring(n: int, d: int = 2, noise_sd: float = 0.1, seed: int = 0) -> Dataset:
    if d < 2 or n < 3:
        raise ContractError("ring needs d >= 2 and n >= 3")
    rng = np.random.default_rng(seed)
    radius = rng.choice([1.0, 3.0, 5.0], size=n)
    angle = rng.uniform(0.0, 2 * np.pi, size=n)
    r = radius + noise_sd * rng.standard_normal(n)
    X = np.empty((n, d))
    X[:, 0] = r * np.cos(angle)
    X[:, 1] = r * np.sin(angle)
    X[:, 2:] = noise_sd * rng.standard_normal((n, d - 2))
    return Dataset(X, seed=seed)


GRID_SD = 0.1


def gen_grid(n: int, d: int = 2, seed: int = 0, sd: float = GRID_SD) -> Dataset:
    """Equal mixture of ``d`` isotropic Gaussians centred on the basis vectors."""
    if d < 1 or n < 1:
        raise ContractError("grid needs d >= 1 and n >= 1")
    rng = np.random.default_rng(seed)
    comp = rng.integers(0, d, size=n)
    X = sd * rng.standard_normal((n, d))
    X[np.arange(n), comp] += 1.0
    return Dataset(X, seed=seed)


def two_moons_potential(X) -> np.ndarray:
    """``U(x) = 0.5((|x| - 2)/0.4)^2 - log(exp(-0.5((x1-2)/0.6)^2) + exp(-0.5((x1+2)/0.6)^2))``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    r = np.linalg.norm(X, axis=1)
    x1 = X[:, 0]
    a = -0.5 * ((x1 - 2.0) / 0.6) ** 2
    b = -0.5 * ((x1 + 2.0) / 0.6) ** 2
    return 0.5 * ((r - 2.0) / 0.4) ** 2 - np.logaddexp(a, b)


def _moons_log_bound() -> float:
    # max over a fine grid of -U(x) - log N(x; 0, s^2 I), padded
    g = np.linspace(-5, 5, 801)
    XX, YY = np.meshgrid(g, g)
    P = np.column_stack([XX.ravel(), YY.ravel()])
    s2 = _MOONS_ENVELOPE_SD**2
    log_env = -0.5 * np.sum(P * P, axis=1) / s2 - np.log(2 * np.pi * s2)
    return float(np.max(-two_moons_potential(P) - log_env)) + 0.05


def gen_two_moons(n: int, seed: int = 0) -> Dataset:
    """Exact draws from the density proportional to ``exp(-U)`` by rejection."""
    if n < 1:
        raise ContractError("n must be >= 1")
    rng = np.random.default_rng(seed)
    log_m = _moons_log_bound()
    s2 = _MOONS_ENVELOPE_SD**2
    out, tried, kept = [], 0, 0
    while kept < n:
        m = max(4 * (n - kept), 256)
        P = _MOONS_ENVELOPE_SD * rng.standard_normal((m, 2))
        log_env = -0.5 * np.sum(P * P, axis=1) / s2 - np.log(2 * np.pi * s2)
        log_acc = -two_moons_potential(P) - log_env - log_m
        ok = np.log(rng.uniform(size=m)) < log_acc
        out.append(P[ok])
        tried += m
        kept += int(ok.sum())
        if tried > 10_000 and kept < 1e-3 * tried:
            raise NumericError("two-moons envelope rejects more than 99.9% of proposals")
    return Dataset(np.concatenate(out)[:n], seed=seed)


def gen_linear_gaussian(n: int, slope: float = 0.5, noise_var: float = 0.25,
                        seed: int = 0) -> Dataset:
    """Conditional benchmark ``y = slope * x + eps``, ``x ~ N(0, 1)``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    y = slope * x + np.sqrt(noise_var) * rng.standard_normal(n)
    return Dataset(np.column_stack([x, y]), x_cols=(0,), y_cols=(1,), seed=seed,
                   columns=("x", "y"))


def gen_independent(n: int, seed: int = 0) -> Dataset:
    """Conditional control where ``y`` does not depend on ``x``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    y = rng.standard_normal(n) * 0.5 + 0.3
    return Dataset(np.column_stack([x, y]), x_cols=(0,), y_cols=(1,), seed=seed,
                   columns=("x", "y"))


GENERATORS = {
    "ring": lambda n, d, seed: gen_ring(n, d, seed=seed),
    "grid": lambda n, d, seed: gen_grid(n, d, seed=seed),
    "two_moons": lambda n, d, seed: gen_two_moons(n, seed=seed),
    "linear_gaussian": lambda n, d, seed: gen_linear_gaussian(n, seed=seed),
}

DEFAULT_SIZES = {  # (train, test)
    "ring": (500, 5000),
    "grid": (500, 1500),
    "two_moons": (500, 5000),
}


def generate(name: str, n: int, d: int = 2, seed: int = 0) -> Dataset:
    try:
        gen = GENERATORS[name]
    except KeyError:
        raise ContractError(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}") from None
    return gen(n, d, seed)


# -- CSV ------------------------------------------------------------------------------

def write_csv(path, X, header=None) -> None:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if header is None:
        header = [f"x{i}" for i in range(X.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in X:
            w.writerow([repr(float(v)) for v in row])


def read_csv(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ContractError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    X = np.empty((len(body), len(header)))
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise ContractError(f"{path}: row {i + 2} has {len(row)} fields, expected {len(header)}")
        for j, cell in enumerate(row):
            try:
                X[i, j] = float(cell)
            except ValueError:
                raise ContractError(
                    f"{path}: non-numeric cell {cell!r} at row {i + 2}, column {j + 1}") from None
    return header, X


def _resolve(cols, header):
    out = []
    for c in cols:
        if isinstance(c, str) and not c.lstrip("-").isdigit():
            if c not in header:
                raise ContractError(f"unknown column {c!r}")
            out.append(header.index(c))
        else:
            out.append(int(c))
    return tuple(out)


def load_dataset(path, x_cols=None, y_cols=None) -> Dataset:
    header, X = read_csv(path)
    if X.shape[0] == 0:
        raise ContractError(f"{path}: no data rows")
    ds = Dataset(X, columns=tuple(header))
    if x_cols is not None:
        ds = ds.with_split(_resolve(x_cols, header), _resolve(y_cols, header))
    return ds


def load_csv(path, x_cols=None, y_cols=None, normalize_data: bool = True,
             split_seed: int = 0) -> tuple[Dataset, Dataset]:
    """50/50 seeded split; normalization is fitted on the train half only."""
    ds = load_dataset(path, x_cols, y_cols)
    perm = np.random.default_rng(split_seed).permutation(ds.n)
    half = (ds.n + 1) // 2
    train = replace(ds, samples=ds.samples[perm[:half]], seed=split_seed)
    test = replace(ds, samples=ds.samples[perm[half:]], seed=split_seed)
    if normalize_data:
        train = normalize(train)
        test = normalize(test, train.mean, train.scale)
    return train, test
