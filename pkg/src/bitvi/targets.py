"""Analytic target log-densities for the density-fitting experiments.

Each target reports whether it is normalized, carries an analytic gradient,
and recommends a fitting domain chosen so essentially all of its mass
(>= 99.9%) lies inside.  The 2D shapes are canonical stand-ins: mixture,
funnel, two-modal, ring and banana, parameterized to sit inside ``[-4, 4)``
on every axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

BOX = ((-4.0, 4.0), (-4.0, 4.0))


@dataclass(frozen=True)
class TargetDensity:
    """Unnormalized (or normalized) log-density over R^D."""

    name: str
    dims: int
    normalized: bool
    recommended_domain: tuple[tuple[float, float], ...]
    log_density: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray] | None = None
    value_and_grad: Callable | None = None
    params: dict = field(default_factory=dict)


def _batch(x: np.ndarray, dims: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != dims:
        raise ValueError(f"expected trailing dimension {dims}, got {x.shape}")
    return np.atleast_2d(x), x.ndim == 1


def _std_normal_cdf(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


class _GaussianMixture:
    """Diagonal-covariance Gaussian mixture with analytic gradient."""

    def __init__(self, weights, means, stds):
        self.w = np.asarray(weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(means, dtype=float))
        self.stds = np.atleast_2d(np.asarray(stds, dtype=float))
        if not math.isclose(self.w.sum(), 1.0, rel_tol=1e-12):
            raise ValueError("mixture weights must sum to 1")
        self.dims = self.means.shape[1]

    def _component_logs(self, x: np.ndarray) -> np.ndarray:
        # (n, K): log w_k + sum_d log N(x_d; m_kd, s_kd)
        z = (x[:, None, :] - self.means[None, :, :]) / self.stds[None, :, :]
        comp = -0.5 * (z * z + LOG_2PI).sum(axis=2) \
            - np.log(self.stds).sum(axis=1)[None, :]
        return comp + np.log(self.w)[None, :]

    def log_density(self, x):
        xb, single = _batch(x, self.dims)
        logs = self._component_logs(xb)
        m = logs.max(axis=1, keepdims=True)
        out = (m + np.log(np.exp(logs - m).sum(axis=1, keepdims=True)))[:, 0]
        return float(out[0]) if single else out

    def grad(self, x):
        xb, single = _batch(x, self.dims)
        logs = self._component_logs(xb)
        resp = np.exp(logs - logs.max(axis=1, keepdims=True))
        resp /= resp.sum(axis=1, keepdims=True)
        pull = -(xb[:, None, :] - self.means[None, :, :]) / \
            (self.stds[None, :, :] ** 2)
        out = (resp[:, :, None] * pull).sum(axis=1)
        return out[0] if single else out


def _mixture_target(name: str, weights, means, stds, domain,
                    params: dict) -> TargetDensity:
    mix = _GaussianMixture(weights, means, stds)
    return TargetDensity(name=name, dims=mix.dims, normalized=True,
                         recommended_domain=domain,
                         log_density=mix.log_density, grad=mix.grad,
                         params=params)


def _gmm1d(params: dict) -> TargetDensity:
    p = {"weights": (0.45, 0.55), "means": (-1.6, 1.4),
         "stds": (0.5, 0.8), **params}
    means = [[m] for m in p["means"]]
    stds = [[s] for s in p["stds"]]
    return _mixture_target("gmm1d", p["weights"], means, stds,
                           ((-4.0, 4.0),), p)


def _equidistant_gmm(params: dict) -> TargetDensity:
    p = {"n_components": 3, "sigma": 0.1, **params}
    k = p["n_components"]
    centers = [[(2 * i + 1) / (2 * k)] for i in range(k)]
    stds = [[p["sigma"]]] * k
    return _mixture_target("equidistant_gmm", [1.0 / k] * k, centers, stds,
                           ((0.0, 1.0),), p)


def _mixture2d(params: dict) -> TargetDensity:
    p = {"weights": (0.4, 0.3, 0.3),
         "means": ((-1.8, -1.2), (1.6, -1.8), (0.2, 1.6)),
         "stds": ((0.6, 0.6), (0.5, 0.5), (0.7, 0.7)), **params}
    return _mixture_target("mixture2d", p["weights"], p["means"], p["stds"],
                           BOX, p)


def _two_modal_gaussian(params: dict) -> TargetDensity:
    p = {"mode": (2.0, 2.0), "std": 0.5, **params}
    m = np.asarray(p["mode"], dtype=float)
    s = [[p["std"]] * 2] * 2
    return _mixture_target("two_modal_gaussian", (0.5, 0.5), (m, -m), s,
                           BOX, p)


def _ring(params: dict) -> TargetDensity:
    p = {"radius": 2.0, "radial_std": 0.3, **params}
    r0, sig = p["radius"], p["radial_std"]
    # Z = 2 pi * integral_0^inf r exp(-(r - r0)^2 / (2 sig^2)) dr, in closed
    # form via the Gaussian cdf.
    log_z = math.log(2.0 * math.pi * (
        sig * sig * math.exp(-r0 * r0 / (2.0 * sig * sig))
        + r0 * sig * math.sqrt(2.0 * math.pi) * _std_normal_cdf(r0 / sig)))

    def log_density(x):
        xb, single = _batch(x, 2)
        r = np.hypot(xb[:, 0], xb[:, 1])
        out = -((r - r0) ** 2) / (2.0 * sig * sig) - log_z
        return float(out[0]) if single else out

    def grad(x):
        xb, single = _batch(x, 2)
        r = np.hypot(xb[:, 0], xb[:, 1])
        safe = np.maximum(r, 1e-12)
        coef = -(r - r0) / (sig * sig * safe)
        out = coef[:, None] * xb
        return out[0] if single else out

    return TargetDensity("ring", 2, True, BOX, log_density, grad, params=p)


def _neals_funnel(params: dict) -> TargetDensity:
    # y is the funnel variable; the conditional scale of x grows as
    # exp(y / 2).  sv and sx squeeze the canonical funnel into the box.
    p = {"sv": 1.1, "sx": 0.35, **params}
    sv, sx = p["sv"], p["sx"]

    def log_density(x):
        xb, single = _batch(x, 2)
        xc, y = xb[:, 0], xb[:, 1]
        s2 = (sx * np.exp(y / 2.0)) ** 2
        out = (-0.5 * (y * y) / (sv * sv) - 0.5 * math.log(sv * sv)
               - 0.5 * LOG_2PI) + (-0.5 * xc * xc / s2 - 0.5 * np.log(s2)
                                   - 0.5 * LOG_2PI)
        return float(out[0]) if single else out

    def grad(x):
        xb, single = _batch(x, 2)
        xc, y = xb[:, 0], xb[:, 1]
        s2 = (sx * np.exp(y / 2.0)) ** 2
        gx = -xc / s2
        gy = -y / (sv * sv) + 0.5 * xc * xc / s2 - 0.5
        out = np.stack([gx, gy], axis=1)
        return out[0] if single else out

    return TargetDensity("neals_funnel", 2, True, BOX, log_density, grad,
                         params=p)


def _banana(params: dict) -> TargetDensity:
    # Rosenbrock-style warp: in base coordinates u = x/x_scale,
    # v = y/y_scale + y_shift, the density is N(u; 0, s1^2) *
    # N(v + b (u^2 - s1^2); 0, s2^2).  The affine map keeps it normalized.
    p = {"b": 0.3, "s1": 2.0, "s2": 1.0, "x_scale": 0.5, "y_scale": 0.3,
         "y_shift": -1.2, **params}
    b, s1, s2 = p["b"], p["s1"], p["s2"]
    xs, ys, shift = p["x_scale"], p["y_scale"], p["y_shift"]
    log_jac = -math.log(xs) - math.log(ys)

    def log_density(x):
        xb, single = _batch(x, 2)
        u = xb[:, 0] / xs
        v = xb[:, 1] / ys + shift
        t = v + b * (u * u - s1 * s1)
        out = (-0.5 * u * u / (s1 * s1) - 0.5 * t * t / (s2 * s2)
               - math.log(s1 * s2) - LOG_2PI + log_jac)
        return float(out[0]) if single else out

    def grad(x):
        xb, single = _batch(x, 2)
        u = xb[:, 0] / xs
        v = xb[:, 1] / ys + shift
        t = v + b * (u * u - s1 * s1)
        gu = -u / (s1 * s1) - (t / (s2 * s2)) * 2.0 * b * u
        gv = -t / (s2 * s2)
        out = np.stack([gu / xs, gv / ys], axis=1)
        return out[0] if single else out

    return TargetDensity("banana", 2, True, BOX, log_density, grad, params=p)


_FACTORIES = {
    "gmm1d": _gmm1d,
    "mixture2d": _mixture2d,
    "neals_funnel": _neals_funnel,
    "two_modal_gaussian": _two_modal_gaussian,
    "ring": _ring,
    "banana": _banana,
    "equidistant_gmm": _equidistant_gmm,
}


def target_names() -> tuple[str, ...]:
    return tuple(sorted(_FACTORIES))


def make_target(name: str, params: dict | None = None) -> TargetDensity:
    """Build a named target; ``params`` override the documented defaults."""
    if name not in _FACTORIES:
        raise ValueError(
            f"unknown target {name!r}; available: {', '.join(target_names())}")
    return _FACTORIES[name](dict(params or {}))


def grid_eval(target_log_density: Callable, dims: int, resolution: int,
              domain) -> np.ndarray:
    """Density values at cell midpoints of a regular grid.

    1D: returns ``(resolution,)``.  2D: returns ``(resolution, resolution)``
    in row-major order with axis 0 sweeping the first coordinate.
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2 per axis")
    if dims not in (1, 2):
        raise ValueError("grids are only defined for 1 or 2 dimensions")
    axes = []
    for lo, hi in domain:
        step = (hi - lo) / resolution
        axes.append(lo + step * (np.arange(resolution) + 0.5))
    if dims == 1:
        pts = axes[0][:, None]
        return np.exp(target_log_density(pts))
    gx, gy = np.meshgrid(axes[0], axes[1], indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return np.exp(target_log_density(pts)).reshape(resolution, resolution)


def target_grid(target: TargetDensity, resolution: int,
                domain=None) -> np.ndarray:
    return grid_eval(target.log_density, target.dims, resolution,
                     domain if domain is not None
                     else target.recommended_domain)


def box_mass(target: TargetDensity, resolution: int = 400,
             domain=None) -> float:
    """Riemann-sum mass of a (normalized) target over a box."""
    dom = domain if domain is not None else target.recommended_domain
    grid = target_grid(target, resolution, dom)
    volume = 1.0
    for lo, hi in dom:
        volume *= (hi - lo) / resolution
    return float(grid.sum() * volume)
