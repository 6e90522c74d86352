"""Media, eikonal phases, ray tracing and polar normal charts.

A :class:`Medium` bundles the refraction index ``r``, the potential
``q``, the fractional order ``s`` and the domain ``Omega``.  Rays are
the characteristics of ``|grad phi| = r``::

    x' = xi,   xi' = grad(r**2) / 2,   phi' = r**2

and a :class:`PolarChart` parametrises a neighbourhood of ``Omega`` by
``(rho, theta)``: ``rho`` is the phase (travel time) from a base point
and ``theta`` the launch angle.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import interpolate, spatial

from .errors import CoverageError, DomainError, FracGOError, TrappedRayError
from .spectral import Field, Grid, frac_laplacian

__all__ = [
    "Disk",
    "Rectangle",
    "omega_from_dict",
    "ConstantIndex",
    "ExpSlabIndex",
    "GaussianLensIndex",
    "SampledIndex",
    "ConstantPotential",
    "GaussianPotential",
    "SampledPotential",
    "Medium",
    "medium_from_dict",
    "PlanePhase",
    "RadialPhase",
    "ExpSlabPhase",
    "SampledPhase",
    "ChartPhase",
    "eikonal_plane",
    "eikonal_distance",
    "Ray",
    "RayFan",
    "trace_ray",
    "trace_fan",
    "PolarChart",
    "build_polar_chart",
    "medium_from_conductivity",
]


# ---------------------------------------------------------------- domains


@dataclass(frozen=True)
class Disk:
    """Closed ball ``|x - center| <= radius`` (an interval when n = 1)."""

    center: tuple = (0.0, 0.0)
    radius: float = 1.0

    def sdf(self, pts):
        return np.linalg.norm(pts - np.asarray(self.center), axis=-1) - self.radius

    def dilate(self, m):
        return Disk(self.center, self.radius + m)

    def mask(self, grid):
        return self.sdf(grid.points()) <= 0

    def extent(self):
        c = np.asarray(self.center)
        return c - self.radius, c + self.radius

    def to_dict(self):
        return {"kind": "disk", "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class Rectangle:
    """Axis-aligned box ``lo <= x <= hi``."""

    lo: tuple = (-1.0, -1.0)
    hi: tuple = (1.0, 1.0)

    def sdf(self, pts):
        c = 0.5 * (np.asarray(self.lo) + np.asarray(self.hi))
        h = 0.5 * (np.asarray(self.hi) - np.asarray(self.lo))
        d = np.abs(pts - c) - h
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        return outside + np.minimum(np.max(d, axis=-1), 0.0)

    def dilate(self, m):
        return Rectangle(tuple(a - m for a in self.lo), tuple(b + m for b in self.hi))

    def mask(self, grid):
        return self.sdf(grid.points()) <= 0

    def extent(self):
        return np.asarray(self.lo), np.asarray(self.hi)

    def to_dict(self):
        return {"kind": "rectangle", "lo": list(self.lo), "hi": list(self.hi)}


def omega_from_dict(d):
    if d["kind"] == "disk":
        return Disk(tuple(d.get("center", (0.0, 0.0))), float(d.get("radius", 1.0)))
    if d["kind"] == "rectangle":
        return Rectangle(tuple(d["lo"]), tuple(d["hi"]))
    raise DomainError(f"unknown domain kind {d['kind']!r}")


# ------------------------------------------------------- refraction index
#
# Each index exposes R = r**2 with its gradient and Hessian at points of
# shape (..., n); gradients come back as (..., n), Hessians as (..., n, n).


class ConstantIndex:
    def __init__(self, value=1.0):
        if not value > 0:
            raise DomainError("refraction index must be positive")
        self.value = float(value)

    def r(self, pts):
        return np.full(pts.shape[:-1], self.value)

    def R(self, pts):
        return np.full(pts.shape[:-1], self.value**2)

    def grad_R(self, pts):
        return np.zeros(pts.shape)

    def hess_R(self, pts):
        return np.zeros(pts.shape + (pts.shape[-1],))

    def to_dict(self):
        return {"kind": "const", "value": self.value}


class ExpSlabIndex:
    """``r = exp(rate * x1)``."""

    def __init__(self, rate=1.0):
        self.rate = float(rate)

    def r(self, pts):
        return np.exp(self.rate * pts[..., 0])

    def R(self, pts):
        return np.exp(2 * self.rate * pts[..., 0])

    def grad_R(self, pts):
        g = np.zeros(pts.shape)
        g[..., 0] = 2 * self.rate * self.R(pts)
        return g

    def hess_R(self, pts):
        h = np.zeros(pts.shape + (pts.shape[-1],))
        h[..., 0, 0] = 4 * self.rate**2 * self.R(pts)
        return h

    def to_dict(self):
        return {"kind": "exp_slab", "rate": self.rate}


class GaussianLensIndex:
    """Radial lens ``r = 1 + beta exp(-|x - c|**2 / sigma**2)``."""

    def __init__(self, beta=0.1, sigma=0.5, center=(0.0, 0.0)):
        if beta <= -1:
            raise DomainError("lens strength must exceed -1")
        self.beta, self.sigma = float(beta), float(sigma)
        self.center = tuple(float(c) for c in center)

    def _parts(self, pts):
        y = pts - np.asarray(self.center)
        e = self.beta * np.exp(-np.sum(y * y, axis=-1) / self.sigma**2)
        return y, e

    def r(self, pts):
        return 1.0 + self._parts(pts)[1]

    def R(self, pts):
        return self.r(pts) ** 2

    def grad_R(self, pts):
        y, e = self._parts(pts)
        gr = (-2.0 / self.sigma**2) * e[..., None] * y
        return 2.0 * (1.0 + e)[..., None] * gr

    def hess_R(self, pts):
        y, e = self._parts(pts)
        n = pts.shape[-1]
        s2 = self.sigma**2
        gr = (-2.0 / s2) * e[..., None] * y
        hr = e[..., None, None] * (-2.0 / s2 * np.eye(n) + 4.0 / s2**2 * y[..., :, None] * y[..., None, :])
        return 2.0 * (gr[..., :, None] * gr[..., None, :] + (1.0 + e)[..., None, None] * hr)

    def to_dict(self):
        return {"kind": "gaussian_lens", "beta": self.beta, "sigma": self.sigma, "center": list(self.center)}


class _Sampled2D:
    """Bicubic spline of a real 2-D field; constant extension off the grid."""

    def __init__(self, field_, outside):
        g = field_.grid
        if g.n != 2:
            raise DomainError("sampled media are two-dimensional")
        ax = g.axes()
        self.lo = np.array([a[0] for a in ax])
        self.hi = np.array([a[-1] for a in ax])
        self.spline = interpolate.RectBivariateSpline(ax[0], ax[1], field_.values.real, kx=3, ky=3)
        self.outside = outside

    def ev(self, pts, dx=0, dy=0):
        inside = np.all((pts >= self.lo) & (pts <= self.hi), axis=-1)
        c = np.clip(pts, self.lo, self.hi)
        v = self.spline.ev(c[..., 0], c[..., 1], dx=dx, dy=dy)
        fill = self.outside if (dx == 0 and dy == 0) else 0.0
        return np.where(inside, v, fill)


class SampledIndex:
    """Refraction index given on a grid; ``r**2`` is spline-interpolated."""

    def __init__(self, r_field):
        if np.min(r_field.values.real) <= 0:
            raise DomainError("sampled refraction index must be positive")
        self.field = r_field
        self._R = _Sampled2D(Field(r_field.grid, r_field.values.real**2), 1.0)

    def r(self, pts):
        return np.sqrt(self.R(pts))

    def R(self, pts):
        return self._R.ev(pts)

    def grad_R(self, pts):
        return np.stack([self._R.ev(pts, 1, 0), self._R.ev(pts, 0, 1)], axis=-1)

    def hess_R(self, pts):
        hxx, hxy, hyy = self._R.ev(pts, 2, 0), self._R.ev(pts, 1, 1), self._R.ev(pts, 0, 2)
        return np.stack([np.stack([hxx, hxy], -1), np.stack([hxy, hyy], -1)], -2)

    def to_dict(self):
        v = np.ascontiguousarray(self.field.values.real)
        return {"kind": "sampled", "grid": self.field.grid.to_dict(),
                "sha256": hashlib.sha256(v.tobytes()).hexdigest()}


# --------------------------------------------------------------- potential


class ConstantPotential:
    def __init__(self, value=0.0):
        self.value = float(value)

    def __call__(self, pts):
        return np.full(pts.shape[:-1], self.value)

    def to_dict(self):
        return {"kind": "const", "value": self.value}


class GaussianPotential:
    """``amplitude * exp(-|x - c|**2 / sigma**2)`` plus a constant."""

    def __init__(self, amplitude=1.0, sigma=0.3, center=(0.0, 0.0), offset=0.0):
        self.amplitude, self.sigma, self.offset = float(amplitude), float(sigma), float(offset)
        self.center = tuple(float(c) for c in center)

    def __call__(self, pts):
        y = pts - np.asarray(self.center)
        return self.offset + self.amplitude * np.exp(-np.sum(y * y, axis=-1) / self.sigma**2)

    def scaled(self, c):
        return GaussianPotential(c * self.amplitude, self.sigma, self.center, c * self.offset)

    def to_dict(self):
        return {"kind": "gaussian", "amplitude": self.amplitude, "sigma": self.sigma,
                "center": list(self.center), "offset": self.offset}


class SampledPotential:
    def __init__(self, q_field, outside=0.0):
        self.field = q_field
        self._q = _Sampled2D(q_field, outside) if q_field.grid.n == 2 else None

    def __call__(self, pts):
        if self._q is None:
            raise DomainError("sampled potentials are evaluated off-grid only in 2-D")
        return self._q.ev(pts)

    def to_dict(self):
        v = np.ascontiguousarray(self.field.values.real)
        return {"kind": "sampled", "grid": self.field.grid.to_dict(),
                "sha256": hashlib.sha256(v.tobytes()).hexdigest()}


# ------------------------------------------------------------------ medium


@dataclass(frozen=True, eq=False)
class Medium:
    """Refraction index, potential, order and domain.

    ``omega_prime`` is the larger domain whose boundary carries ray base
    points.  ``c0`` is the infimum of ``r`` sampled over ``omega_prime``.
    """

    index: object = field(default_factory=ConstantIndex)
    potential: object = field(default_factory=ConstantPotential)
    s: float = 0.5
    omega: object = field(default_factory=Disk)
    omega_prime: object = None
    c0: float = None

    def __post_init__(self):
        if not 0 < self.s < 1:
            raise DomainError(f"order s={self.s} outside (0, 1)")
        if self.omega_prime is None:
            object.__setattr__(self, "omega_prime", self.omega.dilate(0.25))
        if self.c0 is None:
            lo, hi = self.omega_prime.extent()
            axes = [np.linspace(a, b, 65) for a, b in zip(lo, hi)]
            pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1)
            pts = pts[self.omega_prime.sdf(pts) <= 0]
            c0 = float(np.min(self.index.r(pts)))
            if not c0 > 0:
                raise DomainError("refraction index is not bounded below by a positive constant")
            object.__setattr__(self, "c0", c0)

    def r(self, pts):
        return self.index.r(pts)

    def R(self, pts):
        return self.index.R(pts)

    def grad_R(self, pts):
        return self.index.grad_R(pts)

    def hess_R(self, pts):
        return self.index.hess_R(pts)

    def q(self, pts):
        return self.potential(pts)

    def r_on(self, grid):
        return self.r(grid.points())

    def q_on(self, grid):
        return self.q(grid.points())

    def with_potential(self, potential):
        return Medium(self.index, potential, self.s, self.omega, self.omega_prime, self.c0)

    def with_s(self, s):
        return Medium(self.index, self.potential, s, self.omega, self.omega_prime, self.c0)

    def to_dict(self):
        return {"index": self.index.to_dict(), "potential": self.potential.to_dict(), "s": self.s,
                "omega": self.omega.to_dict(), "omega_prime": self.omega_prime.to_dict()}

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def medium_from_dict(d):
    """Build a Medium from a descriptor ``{kind, parameters, s, omega}``.

    ``kind`` names the index (``const``, ``exp_slab``, ``gaussian_lens``);
    ``parameters`` holds its arguments plus an optional ``q`` entry that
    is a number or a dict ``{"kind": "gaussian", ...}``.  The output of
    :meth:`Medium.to_dict` is accepted as well.
    """
    if "index" in d:
        return _medium_from_full(d)
    params = dict(d.get("parameters", {}))
    q = params.pop("q", 0.0)
    kind = d.get("kind", "const")
    if kind == "const":
        index = ConstantIndex(params.get("r", 1.0))
    elif kind == "exp_slab":
        index = ExpSlabIndex(params.get("rate", 1.0))
    elif kind == "gaussian_lens":
        index = GaussianLensIndex(params.get("beta", 0.1), params.get("sigma", 0.5),
                                  tuple(params.get("center", (0.0, 0.0))))
    else:
        raise DomainError(f"unknown medium kind {kind!r}")
    if isinstance(q, dict):
        qd = dict(q)
        qk = qd.pop("kind")
        if qk != "gaussian":
            raise DomainError(f"unknown potential kind {qk!r}")
        potential = GaussianPotential(**qd)
    else:
        potential = ConstantPotential(float(q))
    omega = omega_from_dict(d.get("omega", {"kind": "disk"}))
    return Medium(index, potential, float(d["s"]), omega)


def _medium_from_full(d):
    idx = dict(d["index"])
    kind = idx.pop("kind")
    if kind == "const":
        index = ConstantIndex(idx["value"])
    elif kind == "exp_slab":
        index = ExpSlabIndex(idx["rate"])
    elif kind == "gaussian_lens":
        index = GaussianLensIndex(idx["beta"], idx["sigma"], tuple(idx["center"]))
    else:
        raise DomainError(f"index kind {kind!r} cannot be rebuilt from a dict")
    pot = dict(d["potential"])
    pk = pot.pop("kind")
    if pk == "const":
        potential = ConstantPotential(pot["value"])
    elif pk == "gaussian":
        potential = GaussianPotential(pot["amplitude"], pot["sigma"], tuple(pot["center"]), pot["offset"])
    else:
        raise DomainError(f"potential kind {pk!r} cannot be rebuilt from a dict")
    return Medium(index, potential, float(d["s"]), omega_from_dict(d["omega"]), omega_from_dict(d["omega_prime"]))


# ------------------------------------------------------------------ phases
#
# A phase evaluates value, gradient (..., n) and Hessian (..., n, n).


class PlanePhase:
    """``phi = speed * alpha . x``."""

    def __init__(self, direction, speed=1.0):
        a = np.asarray(direction, dtype=float)
        if abs(np.linalg.norm(a) - 1.0) > 1e-12:
            raise DomainError("plane-wave direction must be a unit vector")
        if not speed > 0:
            raise DomainError("speed must be positive")
        self.direction, self.speed = a, float(speed)

    def value(self, pts):
        return self.speed * pts @ self.direction

    def grad(self, pts):
        return np.broadcast_to(self.speed * self.direction, pts.shape).copy()

    def hess(self, pts):
        return np.zeros(pts.shape + (pts.shape[-1],))

    def field(self, grid):
        return Field(grid, self.value(grid.points()))


class RadialPhase:
    """``phi = speed * |x - x0|`` (distance phase of a constant medium)."""

    def __init__(self, center, speed=1.0):
        self.center, self.speed = np.asarray(center, dtype=float), float(speed)

    def value(self, pts):
        return self.speed * np.linalg.norm(pts - self.center, axis=-1)

    def grad(self, pts):
        y = pts - self.center
        return self.speed * y / np.linalg.norm(y, axis=-1)[..., None]

    def hess(self, pts):
        y = pts - self.center
        d = np.linalg.norm(y, axis=-1)[..., None, None]
        u = y[..., :, None] * y[..., None, :] / d**2
        return self.speed * (np.eye(pts.shape[-1]) - u) / d

    def field(self, grid):
        return Field(grid, self.value(grid.points()))


class ExpSlabPhase:
    """``phi = exp(rate x1) / rate`` so that ``|grad phi| = exp(rate x1)``."""

    def __init__(self, rate=1.0):
        self.rate = float(rate)

    def value(self, pts):
        return np.exp(self.rate * pts[..., 0]) / self.rate

    def grad(self, pts):
        g = np.zeros(pts.shape)
        g[..., 0] = np.exp(self.rate * pts[..., 0])
        return g

    def hess(self, pts):
        h = np.zeros(pts.shape + (pts.shape[-1],))
        h[..., 0, 0] = self.rate * np.exp(self.rate * pts[..., 0])
        return h

    def field(self, grid):
        return Field(grid, self.value(grid.points()))


class SampledPhase:
    """Phase known only on a grid (e.g. from fast marching).

    Derivatives come from spectral differentiation of the field mollified
    by a Gaussian of width ``mollify`` grid spacings; they are available
    only at the grid points.
    """

    def __init__(self, phi, mollify=2.0):
        self.phi = phi
        g = phi.grid
        width = mollify * max(g.spacing)
        k2 = g.k2()
        ph = np.fft.fftn(phi.values.real) * np.exp(-0.5 * width**2 * k2)
        ks = g.kmesh()
        self._grad = np.stack([np.fft.ifftn(1j * k * ph).real for k in ks], -1)
        self._hess = np.stack([np.stack([np.fft.ifftn(-ka * kb * ph).real for kb in ks], -1) for ka in ks], -2)

    def _check(self, pts):
        if pts.shape[:-1] != self.phi.grid.sizes:
            raise DomainError("sampled phases are evaluated on their own grid only")

    def value(self, pts):
        self._check(pts)
        return self.phi.values.real

    def grad(self, pts):
        self._check(pts)
        return self._grad

    def hess(self, pts):
        self._check(pts)
        return self._hess

    def field(self, grid):
        return self.phi


def eikonal_plane(direction, c=1.0):
    """Linear phase ``c alpha . x``; ``|grad phi| = c`` exactly."""
    return PlanePhase(direction, c)


def eikonal_distance(medium, x0, grid, source_radius=None, order=1, self_test=False):
    """Distance phase from ``x0`` for the metric ``r**2 delta``, by fast marching.

    Inside a small disk of radius ``source_radius`` (default 0.2, capped
    at 0.8 times the distance to ``Omega``) around ``x0`` the phase is initialised as ``r(x0)|x - x0|``;
    outside, the first-order travel time with speed ``1/r`` from that
    circle is added.  ``self_test`` turns on the heap consistency checks
    of the marcher; a failure there is reported as :class:`FracGOError`.
    """
    x0 = np.asarray(x0, dtype=float)
    if medium.omega.sdf(x0[None])[0] <= 0:
        raise DomainError("source point must lie outside the closed domain")
    pts = grid.points()
    if source_radius is None:
        rho_s = min(0.2, 0.8 * float(medium.omega.sdf(x0[None])[0]))
    else:
        rho_s = float(source_radius)
    d = np.linalg.norm(pts - x0, axis=-1)
    r = medium.r(pts)
    r0 = float(medium.r(x0[None])[0])
    import skfmm

    try:
        t = skfmm.travel_time(d - rho_s, 1.0 / r, dx=list(grid.spacing), order=order, self_test=self_test)
    except Exception as exc:  # the marcher raises plain exceptions on heap errors
        raise FracGOError(f"fast marching failed: {exc}") from exc
    t = np.ma.filled(t, np.nan)
    phi = np.where(d < rho_s, r0 * d, r0 * rho_s + t)
    if not np.all(np.isfinite(phi)):
        raise FracGOError("fast marching left unreached grid points")
    return SampledPhase(Field(grid, phi))


# -------------------------------------------------------------- ray tracing


def _rk4(rhs, y, dt):
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * dt * k1)
    k3 = rhs(y + 0.5 * dt * k2)
    k4 = rhs(y + dt * k3)
    return y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


@dataclass
class Ray:
    t: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    phi: np.ndarray
    exit_t: float

    def hamiltonian_drift(self, medium):
        """Max over the ray of ``| |xi|**2 - r**2 | / r**2``."""
        R = medium.R(self.x)
        return float(np.max(np.abs(np.sum(self.xi**2, -1) - R) / R))


def trace_ray(medium, x0, xi0, step=1e-2, budget=100.0, exit_domain=None):
    """Integrate the eikonal characteristics with classical RK4.

    Stops once the ray has left ``exit_domain`` (default ``Omega'``)
    after having been inside it, with the exit parameter located by
    linear interpolation of the signed distance.  A ray launched from
    outside that never enters is traced until it has moved away for a
    full unit of parameter.  Exceeding ``budget`` raises
    :class:`TrappedRayError`.
    """
    x0 = np.asarray(x0, dtype=float)
    xi0 = np.asarray(xi0, dtype=float)
    n = x0.size
    r0 = float(medium.r(x0[None])[0])
    if abs(np.linalg.norm(xi0) - r0) > 1e-10 * max(1.0, r0):
        raise DomainError("initial covector must satisfy |xi0| = r(x0)")
    dom = medium.omega_prime if exit_domain is None else exit_domain

    def rhs(y):
        x = y[:n][None]
        return np.concatenate([y[n:2 * n], 0.5 * medium.grad_R(x)[0], medium.R(x)])

    y = np.concatenate([x0, xi0, [0.0]])
    ts, ys = [0.0], [y]
    entered = dom.sdf(x0[None])[0] < 0
    t = 0.0
    exit_t = None
    while True:
        y_new = _rk4(rhs, y, step)
        t_new = t + step
        d_old = dom.sdf(y[None, :n])[0]
        d_new = dom.sdf(y_new[None, :n])[0]
        ts.append(t_new)
        ys.append(y_new)
        if d_new < 0:
            entered = True
        if entered and d_new > 0 and d_old <= 0:
            exit_t = t + step * (-d_old) / (d_new - d_old) if d_new != d_old else t_new
            break
        if not entered and t_new > 1.0 and d_new > d_old:
            exit_t = 0.0
            break
        if t_new > budget:
            raise TrappedRayError(f"ray from {x0} still inside after parameter {budget}")
        y, t = y_new, t_new
    ys = np.array(ys)
    return Ray(np.array(ts), ys[:, :n], ys[:, n:2 * n], ys[:, 2 * n], float(exit_t))


@dataclass
class RayFan:
    p: np.ndarray
    thetas: np.ndarray
    rays: list

    @property
    def exits(self):
        return np.array([ray.exit_t for ray in self.rays])

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("p_x,p_y,theta,t,x,y,xi_x,xi_y\n")
            for th, ray in zip(self.thetas, self.rays):
                for t, x, xi in zip(ray.t, ray.x, ray.xi):
                    fh.write(",".join(f"{v:.17g}" for v in (*self.p, th, t, *x, *xi)) + "\n")


def inward_angles(p, count, omega_prime=None):
    """``count`` launch angles spread uniformly over the open inward half-circle at ``p``."""
    p = np.asarray(p, dtype=float)
    c = np.zeros(2) if omega_prime is None else np.asarray(omega_prime.center)
    nu = math.atan2(*(c - p)[::-1])
    return nu + np.pi * ((np.arange(count) + 0.5) / count - 0.5)


def trace_fan(medium, p, thetas, step=1e-2, budget=100.0):
    p = np.asarray(p, dtype=float)
    r0 = float(medium.r(p[None])[0])
    rays = [trace_ray(medium, p, r0 * np.array([math.cos(t), math.sin(t)]), step, budget) for t in thetas]
    return RayFan(p, np.asarray(thetas, dtype=float), rays)


# ------------------------------------------------------------ polar chart


def _rho_system(medium, integrands):
    """Right-hand side in the phase parameter rho for the state

    ``[x(2), xi(2), dx(2), dxi(2), I_1 .. I_m]`` stacked along axis 0,
    where ``(dx, dxi)`` is the Jacobi field of the theta variation and
    ``I_k`` accumulates ``integrands[k](x) drho``.
    """

    def rhs(y):
        x, xi, dx, dxi = y[0:2], y[2:4], y[4:6], y[6:8]
        pts = np.moveaxis(x, 0, -1)
        R = medium.R(pts)
        gR = np.moveaxis(medium.grad_R(pts), -1, 0)
        HR = np.moveaxis(medium.hess_R(pts), (-2, -1), (0, 1))
        gdx = np.einsum("i...,i...->...", gR, dx)
        xdot = xi / R
        xidot = 0.5 * gR / R
        dxdot = dxi / R - xi * gdx / R**2
        Hdx = np.einsum("ij...,j...->i...", HR, dx)
        dxidot = 0.5 * Hdx / R - 0.5 * gR * gdx / R**2
        parts = [xdot, xidot, dxdot, dxidot]
        if integrands:
            parts.append(np.stack([f(pts) for f in integrands]))
        return np.concatenate(parts)

    return rhs


@dataclass
class ChartSample:
    """Ray quantities at points of a polar chart.

    ``j`` is the Euclidean transverse spreading ``|det(xi/|xi|, dx/dtheta)|``
    and ``det`` the chart Jacobian ``det(dx/drho, dx/dtheta) = j / r``.
    ``hess`` is the Hessian of ``rho`` (symmetric 2x2 per point) and
    ``integrals`` the accumulated ``int f(x) drho`` for each integrand.
    """

    rho: np.ndarray
    theta: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    j: np.ndarray
    det: np.ndarray
    hess: np.ndarray
    integrals: np.ndarray


@dataclass(eq=False)
class PolarChart:
    """Polar normal coordinates ``(rho, theta)`` around a base point.

    ``theta`` is the launch angle at ``p``; ``rho`` is the phase
    accumulated along the ray, so that ``rho`` solves the eikonal
    equation and equals the metric distance from ``p`` for a simple
    medium.  ``steps`` fixes the number of RK4 steps used for any
    integration from ``p``.
    """

    medium: Medium
    p: np.ndarray
    theta_range: tuple
    steps: int = 128
    fan_rays: int = 256
    _tree: object = field(default=None, repr=False)
    _fan: tuple = field(default=None, repr=False)

    def _initial_state(self, theta, m):
        r0 = float(self.medium.r(self.p[None])[0])
        c, s = np.cos(theta), np.sin(theta)
        y = np.zeros((8 + m,) + np.shape(theta))
        y[0] = self.p[0]
        y[1] = self.p[1]
        y[2], y[3] = r0 * c, r0 * s
        y[6], y[7] = -r0 * s, r0 * c
        return y

    def integrate(self, rho, theta, integrands=(), steps=None):
        """Integrate rays from ``p`` to parameter ``rho`` (vectorised)."""
        rho = np.asarray(rho, dtype=float)
        theta = np.asarray(theta, dtype=float)
        rho, theta = np.broadcast_arrays(rho, theta)
        steps = self.steps if steps is None else steps
        rhs = _rho_system(self.medium, list(integrands))
        y = self._initial_state(theta, len(integrands))
        dt = rho / steps
        for _ in range(steps):
            y = _rk4(rhs, y, dt)
        return y

    def forward(self, rho, theta):
        """Point reached at phase ``rho`` along the ray with angle ``theta``."""
        y = self.integrate(rho, theta)
        return np.moveaxis(y[0:2], 0, -1)

    def _build_fan(self):
        lo, hi = self.theta_range
        thetas = np.linspace(lo, hi, self.fan_rays)
        lo_b, hi_b = self.medium.omega_prime.extent()
        span = 2.0 * float(np.max(hi_b - lo_b)) * max(1.0, float(self.medium.r(self.p[None])[0]))
        nr = 400
        rhs = _rho_system(self.medium, [])
        y = self._initial_state(thetas, 0)
        drho = span / nr
        xs, rhos = [], []
        for i in range(1, nr + 1):
            y = _rk4(rhs, y, drho)
            xs.append(y[0:2].T.copy())
            rhos.append(np.full(len(thetas), i * drho))
        xs = np.concatenate(xs)
        self._fan = (np.concatenate(rhos), np.tile(thetas, nr))
        self._tree = spatial.cKDTree(xs)

    def inverse(self, points, tol=1e-11, max_iter=30):
        """Chart coordinates of ``points`` (shape ``(m, 2)``) by Newton shooting.

        The initial guess comes from the nearest sample of a pre-traced
        fan.  Points that do not converge raise :class:`CoverageError`.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self._tree is None:
            self._build_fan()
        _, idx = self._tree.query(pts)
        rho = self._fan[0][idx].copy()
        theta = self._fan[1][idx].copy()
        lo, hi = self.theta_range
        err = np.full(len(pts), np.inf)
        for _ in range(max_iter):
            y = self.integrate(rho, theta)
            R = self.medium.R(np.moveaxis(y[0:2], 0, -1))
            F = y[0:2] - pts.T
            err = np.sqrt(np.sum(F * F, axis=0))
            if np.all(err < tol):
                break
            a, b = y[2] / R, y[4]
            c, d = y[3] / R, y[5]
            det = a * d - b * c
            det = np.where(det == 0, np.finfo(float).tiny, det)
            drho = (d * F[0] - b * F[1]) / det
            dth = (-c * F[0] + a * F[1]) / det
            # damp steps that would leave the valid parameter range
            drho = np.clip(drho, -0.5 * rho, None)
            rho = rho - drho
            theta = np.clip(theta - dth, lo, hi)
        bad = ~(err < 1e3 * tol)
        if np.any(bad):
            raise CoverageError(f"{int(bad.sum())} point(s) not reached by the chart, e.g. {pts[bad][0]}",
                                pts[bad])
        return rho, theta

    def sample(self, points, integrands=()):
        """Invert the chart at ``points`` and collect ray quantities there."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rho, theta = self.inverse(pts)
        y = self.integrate(rho, theta, integrands)
        x = np.moveaxis(y[0:2], 0, -1)
        xi = np.moveaxis(y[2:4], 0, -1)
        dx = np.moveaxis(y[4:6], 0, -1)
        dxi = np.moveaxis(y[6:8], 0, -1)
        R = self.medium.R(x)
        xr = xi / R[:, None]
        det = xr[:, 0] * dx[:, 1] - xr[:, 1] * dx[:, 0]
        j = det * np.sqrt(R)
        # Hessian of rho: d(xi)/d(rho,theta) times inverse of d(x)/d(rho,theta)
        dxi_drho = 0.5 * self.medium.grad_R(x) / R[:, None]
        A = np.stack([xr, dx], axis=-1)
        B = np.stack([dxi_drho, dxi], axis=-1)
        hess = B @ np.linalg.inv(A)
        hess = 0.5 * (hess + np.swapaxes(hess, -1, -2))
        return ChartSample(rho, theta, x, xi, j, det, hess, y[8:].T if len(integrands) else np.zeros((len(pts), 0)))

    def round_trip_error(self, points):
        rho, theta = self.inverse(points)
        return np.linalg.norm(self.forward(rho, theta) - points, axis=-1)


def build_polar_chart(medium, p, steps=128, fan_rays=256, check_points=None):
    """Polar chart based at ``p`` covering ``Omega'`` seen from ``p``.

    Launch angles span the open inward half-circle at ``p``.  If
    ``check_points`` is given the chart is inverted there and the
    Jacobian is checked to be positive (no ray crossings); a failure
    raises :class:`CoverageError`.
    """
    p = np.asarray(p, dtype=float)
    if medium.omega.sdf(p[None])[0] <= 0:
        raise DomainError("chart base point must lie outside the closed domain")
    th = inward_angles(p, 2, medium.omega_prime)
    half = 0.5 * np.pi * (1 - 1e-9)
    mid = 0.5 * (th[0] + th[1])
    chart = PolarChart(medium, p, (mid - half, mid + half), steps, fan_rays)
    if check_points is not None:
        smp = chart.sample(check_points)
        if np.any(smp.det <= 0):
            bad = np.atleast_2d(check_points)[smp.det <= 0]
            raise CoverageError(f"chart Jacobian is not positive at {len(bad)} point(s)", bad)
    return chart


class ChartPhase:
    """The distance phase ``rho`` of a polar chart on a grid region.

    Values are sampled at the grid points selected by ``region`` (a
    boolean mask, e.g. a dilated domain) and set to zero elsewhere;
    the phase is only meaningful where a cutoff is nonzero.
    """

    def __init__(self, chart, grid, region, integrands=()):
        self.chart, self.grid = chart, grid
        self.region = np.asarray(region, dtype=bool)
        self.sample = chart.sample(grid.points()[self.region], integrands)

    def scatter(self, vals, fill=0.0):
        """Place per-sample values (shape ``(m, ...)``) into grid-shaped arrays."""
        vals = np.asarray(vals)
        out = np.full(self.grid.sizes + vals.shape[1:], fill, dtype=vals.dtype)
        out[self.region] = vals
        return out

    def _check(self, pts):
        if pts.shape[:-1] != self.grid.sizes:
            raise DomainError("chart phases are evaluated on their own grid only")

    def value(self, pts):
        self._check(pts)
        return self.scatter(self.sample.rho)

    def grad(self, pts):
        self._check(pts)
        return self.scatter(self.sample.xi)

    def hess(self, pts):
        self._check(pts)
        return self.scatter(self.sample.hess)

    def field(self, grid):
        return Field(grid, self.value(grid.points()))


# ----------------------------------------------------- conductivity media


def medium_from_conductivity(gamma, s, omega=None):
    """Medium of the fractional conductivity equation after the Liouville reduction.

    ``r = gamma**(-1/(2s))`` and ``q = -gamma**(-1/2) (-Delta)**s gamma**(1/2)``.
    """
    g = gamma.values.real
    if np.min(g) <= 0 or np.any(np.abs(gamma.values.imag) > 0):
        raise DomainError("conductivity must be real and positive")
    if not 0 < s < 1:
        raise DomainError(f"order s={s} outside (0, 1)")
    grid = gamma.grid
    sq = np.sqrt(g)
    q = -frac_laplacian(Field(grid, sq), s).values.real / sq
    r = g ** (-1.0 / (2 * s))
    if grid.n == 2:
        index = SampledIndex(Field(grid, r))
        potential = SampledPotential(Field(grid, q))
    else:
        index = _GridOnly(Field(grid, r))
        potential = _GridOnlyPotential(Field(grid, q))
    return Medium(index, potential, s, omega if omega is not None else Disk(center=(0.0,) * grid.n), c0=float(np.min(r)))


class _GridOnly:
    def __init__(self, r_field):
        self.field = r_field

    def r(self, pts):
        if pts.shape[:-1] != self.field.grid.sizes:
            raise DomainError("1-D sampled media are evaluated on their grid only")
        return self.field.values.real

    def R(self, pts):
        return self.r(pts) ** 2

    def to_dict(self):
        return {"kind": "sampled", "grid": self.field.grid.to_dict()}


class _GridOnlyPotential(_GridOnly):
    def __call__(self, pts):
        return self.r(pts)
