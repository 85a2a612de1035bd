"""Spectrally normalized MLP with a random-feature Gaussian-process head.

Pure numpy with hand-derived gradients. The shared trunk feeds one output
head per plan; each head is a linear map on random Fourier features whose
posterior covariance comes from a Laplace approximation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MEAN_FIELD_FACTOR = math.pi / 8.0


@dataclass(frozen=True)
class NetworkShape:
    numeric_dim: int
    vocab_sizes: tuple[int, ...]
    embed_dim: int
    hidden: int
    layers: int
    rff_dim: int
    heads: int

    @property
    def input_dim(self) -> int:
        return self.numeric_dim + self.embed_dim * len(self.vocab_sizes)


def init_params(
    shape: NetworkShape, rng: np.random.Generator, lengthscale: float, beta_scale: float = 0.01, embed_scale: float = 0.1
) -> dict[str, np.ndarray]:
    p: dict[str, np.ndarray] = {}
    for j, v in enumerate(shape.vocab_sizes):
        p[f"emb{j}"] = rng.normal(0.0, embed_scale, (v, shape.embed_dim))
    fan_in = max(shape.input_dim, 1)
    for layer in range(1, shape.layers + 1):
        p[f"W{layer}"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_in, shape.hidden))
        p[f"b{layer}"] = np.zeros(shape.hidden)
        fan_in = shape.hidden
    p["beta"] = rng.normal(0.0, beta_scale, (shape.rff_dim, shape.heads))
    # fixed isometric lift of the input into the hidden width, the skip path of layer 1
    g = rng.normal(size=(shape.hidden, max(shape.input_dim, 1)))
    q, r = np.linalg.qr(g)
    p["proj"] = (q * np.sign(np.diag(r)))[:, : shape.input_dim].T if shape.input_dim <= shape.hidden else g.T / math.sqrt(shape.hidden)
    # fixed random projection (never trained)
    p["omega"] = rng.normal(0.0, 1.0 / lengthscale, (shape.hidden, shape.rff_dim))
    p["phase"] = rng.uniform(0.0, 2.0 * math.pi, shape.rff_dim)
    return p


FIXED = ("omega", "phase", "proj")


def trainable(params: dict[str, np.ndarray]) -> list[str]:
    return [k for k in params if k not in FIXED]


def _inputs(params, x_num, idx):
    parts = [x_num] + [params[f"emb{j}"][ix] for j, ix in enumerate(idx)]
    return np.concatenate(parts, axis=1) if len(parts) > 1 else x_num


def forward(params, x_num, idx, layers: int, residual: bool = True):
    """Return (logits, random features, cache for backward)."""
    h = _inputs(params, x_num, idx)
    cache = {"x": h, "pre": [], "h": [h]}
    for layer in range(1, layers + 1):
        a = h @ params[f"W{layer}"] + params[f"b{layer}"]
        out = np.maximum(a, 0.0)
        if residual:
            out = out + (h @ params["proj"] if layer == 1 else h)
        cache["pre"].append(a)
        h = out
        cache["h"].append(h)
    rff = params["omega"].shape[1]
    u = h @ params["omega"] + params["phase"]
    phi = math.sqrt(2.0 / rff) * np.cos(u)
    cache["u"] = u
    return phi @ params["beta"], phi, cache


def weighted_bce(logits, labels, weights):
    """Per-example weighted binary cross-entropy, summed over heads and averaged over rows."""
    sp = np.logaddexp(0.0, logits)
    return float(np.sum(weights * (sp - labels * logits)) / logits.shape[0])


def loss_and_grads(params, x_num, idx, labels, weights, layers: int, residual: bool = True, l2: float = 0.0):
    logits, phi, cache = forward(params, x_num, idx, layers, residual)
    n = logits.shape[0]
    loss = weighted_bce(logits, labels, weights) + 0.5 * l2 * float(np.sum(params["beta"] ** 2))
    dz = weights * (_sigmoid(logits) - labels) / n
    g: dict[str, np.ndarray] = {"beta": phi.T @ dz + l2 * params["beta"]}
    rff = params["omega"].shape[1]
    du = (dz @ params["beta"].T) * (-math.sqrt(2.0 / rff) * np.sin(cache["u"]))
    dh = du @ params["omega"].T
    for layer in range(layers, 0, -1):
        h_in = cache["h"][layer - 1]
        da = dh * (cache["pre"][layer - 1] > 0)
        g[f"W{layer}"] = h_in.T @ da
        g[f"b{layer}"] = da.sum(axis=0)
        dh_in = da @ params[f"W{layer}"].T
        if residual:
            dh_in = dh_in + (dh @ params["proj"].T if layer == 1 else dh)
        dh = dh_in
    col = x_num.shape[1]
    for j, ix in enumerate(idx):
        emb = params[f"emb{j}"]
        ge = np.zeros_like(emb)
        np.add.at(ge, ix, dh[:, col : col + emb.shape[1]])
        g[f"emb{j}"] = ge
        col += emb.shape[1]
    return loss, g


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(params[k]) for k in trainable(params)}
        self.v = {k: np.zeros_like(params[k]) for k in trainable(params)}
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class SpectralNorm:
    """Persistent power iteration per dense layer; rescales weights above ``bound``."""

    def __init__(self, params, layers: int, bound: float, rng: np.random.Generator, iterations: int = 1, warmup: int = 50):
        self.bound, self.layers, self.iterations = bound, layers, iterations
        self.u = {}
        for layer in range(1, layers + 1):
            u = rng.normal(size=params[f"W{layer}"].shape[1])
            self.u[layer] = u / np.linalg.norm(u)
            # converge once so the cheap per-step iteration starts from the top singular vector
            for _ in range(warmup):
                self._iterate(params[f"W{layer}"], layer)

    def _iterate(self, w: np.ndarray, layer: int) -> np.ndarray:
        u = self.u[layer]
        v = w @ u
        v /= max(np.linalg.norm(v), 1e-12)
        u = w.T @ v
        u /= max(np.linalg.norm(u), 1e-12)
        self.u[layer] = u
        return v

    def estimate(self, w: np.ndarray, layer: int) -> float:
        for _ in range(self.iterations):
            v = self._iterate(w, layer)
        return float(v @ w @ self.u[layer])

    def apply(self, params) -> list[float]:
        """Normalize in place; returns each layer's estimate after rescaling."""
        after = []
        for layer in range(1, self.layers + 1):
            w = params[f"W{layer}"]
            sigma = self.estimate(w, layer)
            if sigma > self.bound:
                w *= self.bound / sigma
                sigma = self.bound
            after.append(sigma)
        return after


def laplace_precision(phi: np.ndarray, logits: np.ndarray, ridge: float = 1.0, likelihood: str = "logistic") -> np.ndarray:
    """Per-head posterior precision ``ridge*I + sum_i c_i phi_i phi_i^T`` (heads, D, D).

    ``c_i = p(1 - p)`` under the logistic likelihood, 1 under the Gaussian one.
    """
    n, d = phi.shape
    heads = logits.shape[1]
    out = np.empty((heads, d, d))
    for k in range(heads):
        if likelihood == "logistic":
            p = _sigmoid(logits[:, k])
            c = p * (1.0 - p)
        elif likelihood == "gaussian":
            c = np.ones(n)
        else:
            raise ValueError(f"unknown likelihood {likelihood!r}")
        out[k] = ridge * np.eye(d) + (phi * c[:, None]).T @ phi
    return out


def predictive(logits: np.ndarray, phi: np.ndarray, covariance: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(variance, confidence) per row and head using the mean-field logit adjustment."""
    var = np.einsum("nd,kde,ne->nk", phi, covariance, phi)
    var = np.maximum(var, 0.0)
    conf = _sigmoid(logits / np.sqrt(1.0 + MEAN_FIELD_FACTOR * var))
    return var, conf
