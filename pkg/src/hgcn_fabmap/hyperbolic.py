"""Hyperboloid (Lorentz) model of hyperbolic space with curvature -1/k.

Points live on the upper sheet ``<x, x>_L = -k``, ``x0 > 0``, of R^{d+1};
the origin is ``(sqrt(k), 0, ..., 0)``. The tensor functions below operate on
torch float64 tensors batched over leading dimensions and are differentiable;
``HPoint``/``HTangent`` and the lower-case wrappers give a numpy interface.

Distances and logarithms are computed from the Minkowski chord
``<x - y, x - y>_L`` rather than from ``arcosh(-<x, y>_L / k)``, which loses
about half the significant digits for nearby points.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
import torch

Curvature = Union[float, torch.Tensor]

MANIFOLD_TOL = 1e-9
_MIN_NORM = 1e-15
DTYPE = torch.float64


def _sqrt_k(k: Curvature) -> torch.Tensor:
    return torch.sqrt(torch.as_tensor(k, dtype=DTYPE))


def minkowski_dot(x: torch.Tensor, y: torch.Tensor, keepdim: bool = True) -> torch.Tensor:
    prod = x * y
    res = prod[..., 1:].sum(dim=-1, keepdim=keepdim) - prod[..., 0:1].sum(dim=-1, keepdim=keepdim)
    return res


def _spatial_norm(x: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(torch.clamp_min((x[..., 1:] ** 2).sum(dim=-1, keepdim=True), _MIN_NORM**2))


def proj(x: torch.Tensor, k: Curvature) -> torch.Tensor:
    """Snap onto the sheet by recomputing the time coordinate from the spatial part."""
    xs = x[..., 1:]
    x0 = torch.sqrt(k + (xs**2).sum(dim=-1, keepdim=True))
    return torch.cat([x0, xs], dim=-1)


def proj_tan(u: torch.Tensor, x: torch.Tensor, k: Curvature) -> torch.Tensor:
    """Make ``u`` Minkowski-orthogonal to ``x`` by adjusting its time coordinate."""
    us, xs = u[..., 1:], x[..., 1:]
    u0 = (xs * us).sum(dim=-1, keepdim=True) / x[..., 0:1]
    return torch.cat([u0, us], dim=-1)


def proj_tan0(u: torch.Tensor) -> torch.Tensor:
    return torch.cat([torch.zeros_like(u[..., 0:1]), u[..., 1:]], dim=-1)


def origin(dim: int, k: Curvature) -> torch.Tensor:
    o = torch.zeros(dim + 1, dtype=DTYPE)
    o[0] = _sqrt_k(k)
    return o


def expmap0(u: torch.Tensor, k: Curvature) -> torch.Tensor:
    """Exponential map at the origin; the time coordinate of ``u`` is ignored."""
    sk = _sqrt_k(k)
    us = u[..., 1:]
    n = _spatial_norm(u)
    xs = sk * torch.sinh(n / sk) / n * us
    return proj(torch.cat([torch.zeros_like(u[..., 0:1]), xs], dim=-1), k)


def logmap0(x: torch.Tensor, k: Curvature) -> torch.Tensor:
    sk = _sqrt_k(k)
    n = _spatial_norm(x)
    scale = sk * torch.asinh(n / sk) / n
    return torch.cat([torch.zeros_like(x[..., 0:1]), scale * x[..., 1:]], dim=-1)


def _chord_sq(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    d = x - y
    return torch.clamp_min(minkowski_dot(d, d), 0.0)


def dist(x: torch.Tensor, y: torch.Tensor, k: Curvature) -> torch.Tensor:
    """Geodesic distance sqrt(k) * arcosh(-<x,y>_L / k), via the chord form."""
    sk = _sqrt_k(k)
    c = torch.sqrt(torch.clamp_min(_chord_sq(x, y), _MIN_NORM**2))
    return (2.0 * sk * torch.asinh(c / (2.0 * sk))).squeeze(-1)


def expmap(u: torch.Tensor, x: torch.Tensor, k: Curvature) -> torch.Tensor:
    sk = _sqrt_k(k)
    n = torch.sqrt(torch.clamp_min(minkowski_dot(u, u), _MIN_NORM**2))
    t = n / sk
    y = torch.cosh(t) * x + sk * torch.sinh(t) / n * u
    return proj(y, k)


def logmap(y: torch.Tensor, x: torch.Tensor, k: Curvature) -> torch.Tensor:
    """Tangent vector at ``x`` pointing to ``y`` with Minkowski norm dist(x, y)."""
    sk = _sqrt_k(k)
    csq = _chord_sq(x, y)
    delta = csq / (2.0 * k)  # -<x,y>/k - 1
    w = (y - x) - delta * x  # y + <x,y>/k * x, without cancellation
    c = torch.sqrt(torch.clamp_min(csq, _MIN_NORM**2))
    d = 2.0 * sk * torch.asinh(c / (2.0 * sk))
    # <w,w>_L = k sinh^2(d / sqrt k)
    wnorm = sk * torch.sinh(torch.clamp_min(d, _MIN_NORM) / sk)
    return proj_tan(d / wnorm * w, x, k)


def to_poincare(x: torch.Tensor, k: Curvature) -> torch.Tensor:
    """Diagnostic conversion to the Poincare ball of radius sqrt(k)."""
    sk = _sqrt_k(k)
    return sk * x[..., 1:] / (x[..., 0:1] + sk)


def constraint_residual(x: torch.Tensor, k: Curvature) -> torch.Tensor:
    """|<x,x>_L + k| per point."""
    return (minkowski_dot(x, x) + k).abs().squeeze(-1)


# ---------------------------------------------------------------------------
# numpy-facing value types


def _t(a) -> torch.Tensor:
    return torch.tensor(np.asarray(a, dtype=np.float64))


@dataclass(frozen=True)
class HPoint:
    coords: np.ndarray
    k: float = 1.0

    def __post_init__(self) -> None:
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 1 or coords.size < 2:
            raise ValueError("a hyperboloid point needs at least 2 coordinates")
        if self.k <= 0:
            raise ValueError("curvature parameter k must be positive")
        resid = abs(float(minkowski_inner(coords, coords)) + self.k)
        if coords[0] <= 0 or resid > MANIFOLD_TOL * max(1.0, coords[0] ** 2):
            raise ValueError(f"point is off the hyperboloid (residual {resid:.3e}); use project_to_manifold")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @property
    def dim(self) -> int:
        return self.coords.size - 1

    @classmethod
    def origin(cls, dim: int, k: float = 1.0) -> "HPoint":
        return cls(origin(dim, k).numpy(), k)

    def to_poincare(self) -> np.ndarray:
        return to_poincare(_t(self.coords), self.k).numpy()


@dataclass(frozen=True)
class HTangent:
    base: HPoint
    vec: np.ndarray

    def __post_init__(self) -> None:
        vec = np.asarray(self.vec, dtype=np.float64)
        if vec.shape != self.base.coords.shape:
            raise ValueError("tangent vector and base point dimensions differ")
        resid = abs(float(minkowski_inner(self.base.coords, vec)))
        scale = max(1.0, float(np.abs(self.base.coords).max() * np.abs(vec).max()))
        if resid > MANIFOLD_TOL * scale:
            raise ValueError(f"vector is not tangent at base (residual {resid:.3e}); use project_to_tangent")
        vec.setflags(write=False)
        object.__setattr__(self, "vec", vec)

    @property
    def norm(self) -> float:
        return float(np.sqrt(max(minkowski_inner(self.vec, self.vec), 0.0)))


def minkowski_inner(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.shape[-1] < 2:
        raise ValueError("Minkowski vectors need at least 2 coordinates")
    return -x[..., 0] * y[..., 0] + (x[..., 1:] * y[..., 1:]).sum(axis=-1)


def _same_k(a: HPoint, b: HPoint) -> float:
    if a.k != b.k:
        raise ValueError(f"curvature mismatch: {a.k} vs {b.k}")
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return a.k


def hdistance(x: HPoint, y: HPoint) -> float:
    k = _same_k(x, y)
    if np.array_equal(x.coords, y.coords):
        return 0.0
    return float(dist(_t(x.coords), _t(y.coords), k))


def exp_map(t: HTangent) -> HPoint:
    base = t.base
    y = expmap(_t(t.vec), _t(base.coords), base.k)
    return HPoint(y.numpy(), base.k)


def log_map(base: HPoint, y: HPoint) -> HTangent:
    k = _same_k(base, y)
    slack = MANIFOLD_TOL * max(1.0, base.coords[0] * y.coords[0] / k)
    if -minkowski_inner(base.coords, y.coords) / k < 1.0 - slack:
        raise ValueError("log_map target is not a point of the same sheet")
    v = logmap(_t(y.coords), _t(base.coords), k)
    return HTangent(base, v.numpy())


def project_to_manifold(x, k: float = 1.0) -> HPoint:
    return HPoint(proj(_t(x), k).numpy(), k)


def project_to_tangent(base: HPoint, v) -> HTangent:
    return HTangent(base, proj_tan(_t(v), _t(base.coords), base.k).numpy())
