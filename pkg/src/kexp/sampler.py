"""Transport-map sampler: an MLP pushing Gaussian noise forward to samples.

Backpropagation is written out by hand; every activation is smooth so the
parameter gradients can be checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError

_ACTIVATIONS = ("tanh", "linear")


@dataclass
class Layer:
    W: np.ndarray  # fan_in x fan_out
    b: np.ndarray
    activation: str = "tanh"


class ParamGradient:
    """Per-layer ``(dW, db)`` pairs, shape-matched to a sampler."""

    def __init__(self, grads):
        self.grads = [(np.asarray(dW, float), np.asarray(db, float)) for dW, db in grads]

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(dW * dW) + np.sum(db * db) for dW, db in self.grads)))

    def scaled(self, a: float) -> "ParamGradient":
        return ParamGradient([(a * dW, a * db) for dW, db in self.grads])

    def __add__(self, other: "ParamGradient") -> "ParamGradient":
        return ParamGradient([(a + c, b + d) for (a, b), (c, d) in zip(self.grads, other.grads)])

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in self.grads])

    @classmethod
    def zeros_like(cls, sampler: "TransportSampler") -> "ParamGradient":
        return cls([(np.zeros_like(L.W), np.zeros_like(L.b)) for L in sampler.layers])


class TransportSampler:
    """``g(xi)`` (or ``g(cond, xi)`` in conditional mode) as a tanh MLP.

    The first layer consumes ``cond_dim + noise_dim`` inputs, the last emits
    ``output_dim`` values through a linear activation. ``rng`` is the noise
    stream; ``sample`` advances it.
    """

    def __init__(self, layers, noise_dim: int, output_dim: int, cond_dim: int = 0,
                 seed: int = 0):
        self.layers = list(layers)
        self.noise_dim = int(noise_dim)
        self.output_dim = int(output_dim)
        self.cond_dim = int(cond_dim)
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self._validate()

    def _validate(self):
        fan_in = self.cond_dim + self.noise_dim
        for i, L in enumerate(self.layers):
            if L.activation not in _ACTIVATIONS:
                raise ContractError(f"layer {i}: unknown activation {L.activation!r}")
            if L.W.shape[0] != fan_in or L.b.shape != (L.W.shape[1],):
                raise ContractError(f"layer {i}: shape {L.W.shape} does not chain from {fan_in}")
            fan_in = L.W.shape[1]
        if fan_in != self.output_dim:
            raise ContractError(f"last layer emits {fan_in}, expected {self.output_dim}")

    @classmethod
    def init(cls, noise_dim: int, output_dim: int, hidden: int = 128, depth: int = 3,
             cond_dim: int = 0, seed: int = 0, init_seed: int | None = None) -> "TransportSampler":
        """Glorot-uniform MLP with ``depth`` affine layers (``depth - 1`` hidden)."""
        if depth < 1:
            raise ContractError("depth must be >= 1")
        rng = np.random.default_rng(seed if init_seed is None else init_seed)
        widths = [cond_dim + noise_dim] + [hidden] * (depth - 1) + [output_dim]
        layers = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            lim = np.sqrt(6.0 / (a + b))
            act = "linear" if i == depth - 1 else "tanh"
            layers.append(Layer(rng.uniform(-lim, lim, size=(a, b)), np.zeros(b), act))
        return cls(layers, noise_dim, output_dim, cond_dim, seed)

    # -- forward / backward ---------------------------------------------------
    def _inputs(self, xi, cond=None) -> np.ndarray:
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        if xi.shape[1] != self.noise_dim:
            raise ContractError(f"noise has dimension {xi.shape[1]}, expected {self.noise_dim}")
        if self.cond_dim:
            if cond is None:
                raise ContractError("conditional sampler needs conditioning inputs")
            cond = np.atleast_2d(np.asarray(cond, dtype=float))
            if cond.shape != (xi.shape[0], self.cond_dim):
                raise ContractError(f"conditioning inputs have shape {cond.shape}")
            return np.hstack([cond, xi])
        return xi

    def forward(self, xi, cond=None, keep: bool = False):
        h = self._inputs(xi, cond)
        cache = [h]
        for L in self.layers:
            h = h @ L.W + L.b
            if L.activation == "tanh":
                h = np.tanh(h)
            cache.append(h)
        return (h, cache) if keep else h

    __call__ = forward

    def backward(self, cache, out_grad) -> ParamGradient:
        """Parameter gradient of ``sum_rows(out_grad * g(.))``."""
        delta = np.asarray(out_grad, dtype=float)
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            L = self.layers[i]
            if L.activation == "tanh":
                delta = delta * (1.0 - cache[i + 1] ** 2)
            if not np.all(np.isfinite(delta)):
                raise NumericError(f"non-finite gradient at layer {i}")
            grads[i] = (cache[i].T @ delta, delta.sum(axis=0))
            delta = delta @ L.W.T
        return ParamGradient(grads)

    def draw_noise(self, n: int) -> np.ndarray:
        return self.rng.standard_normal((n, self.noise_dim))

    def sample(self, n: int, cond=None) -> np.ndarray:
        if n < 1:
            raise ContractError("n must be >= 1")
        return self.forward(self.draw_noise(n), cond)

    # -- parameter access -------------------------------------------------------
    def copy(self) -> "TransportSampler":
        out = TransportSampler(
            [Layer(L.W.copy(), L.b.copy(), L.activation) for L in self.layers],
            self.noise_dim, self.output_dim, self.cond_dim, self.seed)
        out.rng.bit_generator.state = self.rng.bit_generator.state
        return out

    def to_dict(self) -> dict:
        return {
            "noise_dim": self.noise_dim,
            "output_dim": self.output_dim,
            "cond_dim": self.cond_dim,
            "seed": self.seed,
            "rng_state": self.rng.bit_generator.state,
            "layers": [{"W": L.W.tolist(), "b": L.b.tolist(), "activation": L.activation}
                       for L in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransportSampler":
        layers = []
        for spec in d["layers"]:
            b = np.asarray(spec["b"], dtype=float)
            W = np.asarray(spec["W"], dtype=float).reshape(-1, b.shape[0])
            layers.append(Layer(W, b, spec["activation"]))
        s = cls(layers, d["noise_dim"], d["output_dim"], d.get("cond_dim", 0), d.get("seed", 0))
        if "rng_state" in d:
            s.rng.bit_generator.state = d["rng_state"]
        return s


def sample(sampler: TransportSampler, n: int, cond=None) -> np.ndarray:
    return sampler.sample(n, cond)


def dual_gradient(sampler: TransportSampler, f, nu, lam: float, batch: int,
                  xi=None) -> ParamGradient:
    """Monte-Carlo estimate of ``grad_w E_xi[-f(g(xi)) + nu(g(xi)) / lam]``.

    The input gradients of f and nu are analytic; they are pulled back through
    the network. Pass ``xi`` to reuse noise (common random numbers).
    """
    if batch < 1:
        raise ContractError("batch must be >= 1")
    if xi is None:
        xi = sampler.draw_noise(batch)
    out, cache = sampler.forward(xi, keep=True)
    v = -f.gradient(out) + nu.gradient(out) / lam
    if not np.all(np.isfinite(v)):
        raise NumericError("non-finite input gradient of f or nu at sampler outputs")
    return sampler.backward(cache, v / out.shape[0])


def apply_update(sampler: TransportSampler, grad: ParamGradient, step: float,
                 clip_norm: float | None = None) -> TransportSampler:
    """Gradient descent step with global-norm clipping, in place."""
    if len(grad.grads) != len(sampler.layers):
        raise ContractError("gradient has a different number of layers than the sampler")
    for (dW, db), L in zip(grad.grads, sampler.layers):
        if dW.shape != L.W.shape or db.shape != L.b.shape:
            raise ContractError("gradient shape does not match sampler parameters")
    g = grad
    if clip_norm is not None:
        norm = grad.norm()
        if norm > clip_norm:
            g = grad.scaled(clip_norm / norm)
    for (dW, db), L in zip(g.grads, sampler.layers):
        L.W -= step * dW
        L.b -= step * db
    return sampler
