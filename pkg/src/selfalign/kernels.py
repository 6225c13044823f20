"""Distance functions between feature matrices used by the kernel preference loss.

Each distance is an aggregation (none, mean over rows, max over rows)
followed by either a squared Euclidean or a cosine distance.  All functions
broadcast over leading batch axes: inputs are ``(..., L, D)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core import average_rows, frobenius_sq_dist, max_rows


class Aggregation(str, enum.Enum):
    NONE = "None"
    AVG_POOL = "AvgPool"
    MAX_POOL = "MaxPool"


class Distance(str, enum.Enum):
    EUCLIDEAN = "Euclidean"
    COSINE = "Cosine"


@dataclass(frozen=True)
class KernelSpec:
    aggregation: Aggregation = Aggregation.AVG_POOL
    distance: Distance = Distance.COSINE
    gamma: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "aggregation", Aggregation(self.aggregation))
        object.__setattr__(self, "distance", Distance(self.distance))
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    @property
    def name(self) -> str:
        agg = "none" if self.aggregation is Aggregation.NONE else self.aggregation.value.lower()
        return f"{agg}-{self.distance.value.lower()}"

    def to_json(self) -> dict:
        return {"aggregation": self.aggregation.value, "distance": self.distance.value, "gamma": self.gamma}

    @classmethod
    def from_json(cls, d: dict) -> "KernelSpec":
        return cls(Aggregation(d["aggregation"]), Distance(d["distance"]), float(d["gamma"]))


ALL_KERNELS = tuple(
    KernelSpec(agg, dist) for agg in Aggregation for dist in Distance
)


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim < 2:
        raise ValueError("feature matrices need at least two axes")
    return a, b


def _aggregate(agg: Aggregation, h):
    if agg is Aggregation.AVG_POOL:
        return average_rows(h)
    return max_rows(h)


def _norms(u, v):
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    if np.any(nu == 0) or np.any(nv == 0):
        raise ValueError("cosine distance is undefined for zero-norm vectors")
    return nu, nv


def _cosine_distance(u, v):
    nu, nv = _norms(u, v)
    return 1.0 - np.sum(u * v, axis=-1) / (nu * nv)


def _cosine_distance_grad(u, v):
    """Gradients of 1 - cos(u, v) with respect to u and v (last axis is the vector)."""
    nu, nv = _norms(u, v)
    cos = np.sum(u * v, axis=-1) / (nu * nv)
    nu, nv, cos = nu[..., None], nv[..., None], cos[..., None]
    du = -(v / (nu * nv) - cos * u / nu**2)
    dv = -(u / (nu * nv) - cos * v / nv**2)
    return du, dv


def kernel_distance(spec: KernelSpec, a, b) -> np.ndarray:
    a, b = _check(a, b)
    if spec.aggregation is Aggregation.NONE:
        if spec.distance is Distance.EUCLIDEAN:
            return frobenius_sq_dist(a, b)
        return np.mean(_cosine_distance(a, b), axis=-1)
    u = _aggregate(spec.aggregation, a)
    v = _aggregate(spec.aggregation, b)
    if spec.distance is Distance.EUCLIDEAN:
        d = u - v
        return np.sum(d * d, axis=-1)
    return _cosine_distance(u, v)


def _scatter_max(h, g):
    """Route a pooled gradient back to the argmax row (lowest index on ties)."""
    idx = np.argmax(h, axis=-2)
    out = np.zeros_like(h)
    np.put_along_axis(out, idx[..., None, :], g[..., None, :], axis=-2)
    return out


def kernel_distance_grad(spec: KernelSpec, a, b) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(dk/da, dk/db)``.

    MaxPool uses the argmax subgradient.
    """
    a, b = _check(a, b)
    if spec.aggregation is Aggregation.NONE:
        if spec.distance is Distance.EUCLIDEAN:
            d = 2.0 * (a - b)
            return d, -d
        da, db = _cosine_distance_grad(a, b)
        L = a.shape[-2]
        return da / L, db / L

    u = _aggregate(spec.aggregation, a)
    v = _aggregate(spec.aggregation, b)
    if spec.distance is Distance.EUCLIDEAN:
        du = 2.0 * (u - v)
        dv = -du
    else:
        du, dv = _cosine_distance_grad(u, v)

    if spec.aggregation is Aggregation.AVG_POOL:
        L = a.shape[-2]
        da = np.broadcast_to(du[..., None, :] / L, a.shape).copy()
        db = np.broadcast_to(dv[..., None, :] / L, b.shape).copy()
        return da, db
    return _scatter_max(a, du), _scatter_max(b, dv)
