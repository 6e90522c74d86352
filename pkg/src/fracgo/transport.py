"""Transport equations for the fractional geometrical-optics ansatz.

For a phase with ``|grad phi| = r`` the first-order operator produced by
``(-Delta)**s`` acting on ``exp(i tau phi) a`` is

    L10 a = -i s |grad phi|**(2s-2) (2 grad phi . grad a + b_s a),
    b_s   = Delta phi + (2s - 2) (Hess(phi) grad phi . grad phi) / |grad phi|**2.

Along rays ``x' = grad phi`` the homogeneous transport equation gives the
closed form ``a0 = b(theta) r**(1/2 - s) j**(-1/2)``, with ``j`` the
transverse spreading of the ray fan from the chart base point.

The constant-coefficient part builds the symbols ``psi_{nu,l}`` of the
plane-wave expansion and solves the recursive amplitude equations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import integrate, interpolate

from .errors import DegeneratePhaseError, DomainError, RegimeError, SupportError
from .media import ChartPhase, PlanePhase
from .spectral import Field, MultiplierSpec, apply_multiplier, spectral_gradient

__all__ = [
    "ray_integrals",
    "TransportCoefficients",
    "transport_coefficients",
    "apply_L10",
    "l10_polar",
    "Reflected",
    "binom_ext",
    "ConstCoefSymbolTable",
    "const_coef_symbol",
    "axis_window",
    "const_coef_amplitudes",
    "BoundaryAmplitude",
    "solve_transport_along_rays",
    "polar_amplitude_closed_form",
    "principal_amplitude",
    "log_weight",
    "literal_log_weight",
    "phase_correction_phi1",
]


@dataclass
class TransportCoefficients:
    """Phase-derived coefficients of the transport equation on a grid.

    ``grad_phi`` has shape ``sizes + (n,)``; the scalar entries are Fields.
    """

    b_s: Field
    grad_phi: np.ndarray
    norm_grad_phi: Field
    hessian_term: Field
    laplacian: Field


class Reflected:
    """The opposite branch ``-phi`` of a phase."""

    def __init__(self, phase):
        self.phase = phase

    def value(self, pts):
        return -self.phase.value(pts)

    def grad(self, pts):
        return -self.phase.grad(pts)

    def hess(self, pts):
        return -self.phase.hess(pts)


def _coefficients(phase, grid, s):
    pts = grid.points()
    g = phase.grad(pts)
    H = phase.hess(pts)
    n2 = np.sum(g * g, axis=-1)
    lap = np.trace(H, axis1=-2, axis2=-1)
    Hgg = np.einsum("...i,...ij,...j->...", g, H, g)
    safe = np.where(n2 > 0, n2, 1.0)
    hterm = np.where(n2 > 0, Hgg / safe, 0.0)
    return g, np.sqrt(n2), lap, hterm


def _check_degenerate(norm, mask, c0, rtol):
    if mask is None or c0 is None:
        return
    low = norm[mask] < c0 * (1.0 - rtol)
    if np.any(low):
        raise DegeneratePhaseError(
            f"|grad phi| drops to {float(np.min(norm[mask])):.3g} < c0={c0:.3g} on {int(low.sum())} cell(s)")


def transport_coefficients(phase, medium, grid, mask=None, rtol=0.05):
    """Evaluate ``b_s`` and friends for ``phase`` on ``grid``.

    The degeneracy guard compares ``|grad phi|`` with ``medium.c0`` on
    ``mask`` (default: the domain) with relative slack ``rtol``.
    """
    if mask is None:
        mask = medium.omega.mask(grid)
    s = medium.s
    g, norm, lap, hterm = _coefficients(phase, grid, s)
    _check_degenerate(norm, mask, medium.c0, rtol)
    b = lap + (2 * s - 2) * hterm
    return TransportCoefficients(Field(grid, b), g, Field(grid, norm), Field(grid, hterm), Field(grid, lap))


def apply_L10(phase, s, a, mask=None, c0=None, rtol=0.05):
    """First-order operator ``L10 a = -i s |grad phi|**(2s-2) (2 grad phi . grad a + b_s a)``.

    ``grad a`` is spectral, so ``a`` should be smooth and periodic on the
    grid (in practice windowed by a cutoff).  Cells where the phase
    gradient vanishes (outside a chart region) return zero.
    """
    grid = a.grid
    g, norm, lap, hterm = _coefficients(phase, grid, s)
    _check_degenerate(norm, mask, c0, rtol)
    b = lap + (2 * s - 2) * hterm
    da = np.stack([d.values for d in spectral_gradient(a)], axis=-1)
    gdota = np.sum(g * da, axis=-1)
    pref = np.where(norm > 0, np.where(norm > 0, norm, 1.0) ** (2 * s - 2), 0.0)
    return Field(grid, -1j * s * pref * (2 * gdota + b * a.values))


def l10_polar(r, dr_drho, lap_phi, a, da_drho, s):
    """``L10`` in ray coordinates: ``-2is r**(2s) (da/drho + lap_phi a / (2 r**2) - (1-s) dr/drho a / r)``.

    Inputs are arrays of matching shape; ``d/drho = r**-2 grad phi . grad``.
    """
    return -2j * s * r ** (2 * s) * (da_drho + 0.5 * lap_phi * a / r**2 - (1 - s) * dr_drho * a / r)


# -------------------------------------------------- constant coefficients


def binom_ext(s, j):
    """Generalised binomial coefficient by the product recurrence."""
    out = 1.0
    for i in range(j):
        out *= (s - i) / (i + 1)
    return out


class ConstCoefSymbolTable:
    """Coefficients ``c'_{s,j,k} = binom(s,j) binom(j,k) 2**(j-k)`` and symbols ``psi_{nu,l}``.

    With ``D = -i grad``,

        (-Delta)**s (exp(i tau alpha.x) a) - tau**(2s) exp(i tau alpha.x) a
            = exp(i tau alpha.x) sum_nu tau**(2s-nu) sum_l Psi_{nu,l} a_l

    for ``a = sum_l tau**-l a_l``, where ``psi_{nu,l}`` collects the terms
    ``c' |xi|**(2k) (alpha.xi)**(j-k)`` with ``j >= 1``, ``0 <= k <= j``
    and ``j + k = nu - l``.
    """

    def __init__(self, s, alpha, nu_max=12):
        if not 0 < s <= 1:
            raise DomainError(f"order s={s} outside (0, 1]")
        a = np.asarray(alpha, dtype=float)
        if abs(np.linalg.norm(a) - 1.0) > 1e-12:
            raise DomainError("direction must be a unit vector")
        self.s, self.alpha, self.nu_max = float(s), a, int(nu_max)
        self.coef = {}
        for j in range(1, nu_max + 1):
            bj = binom_ext(s, j)
            for k in range(j + 1):
                if j + k <= nu_max:
                    self.coef[(j, k)] = bj * math.comb(j, k) * 2.0 ** (j - k)

    def c(self, j, k):
        return self.coef[(j, k)]

    def terms(self, nu, l):
        """``(j, k, c')`` triples of ``psi_{nu,l}``."""
        if not (1 <= nu <= self.nu_max and 0 <= l <= nu - 1):
            raise DomainError(f"symbol index (nu={nu}, l={l}) out of range")
        m = nu - l
        return [(j, m - j, self.coef[(j, m - j)]) for j in range(max(1, (m + 1) // 2), m + 1)]

    def symbol_value(self, nu, l, xi):
        """Evaluate ``psi_{nu,l}`` at covectors ``xi`` of shape ``(..., n)``."""
        xi = np.asarray(xi, dtype=float)
        k2 = np.sum(xi * xi, axis=-1)
        ax = xi @ self.alpha
        return sum(c * k2**k * ax ** (j - k) for j, k, c in self.terms(nu, l))

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("nu,l,j,k,c\n")
            for nu in range(1, self.nu_max + 1):
                for l in range(nu):
                    for j, k, c in self.terms(nu, l):
                        fh.write(f"{nu},{l},{j},{k},{c:.17g}\n")


def const_coef_symbol(table, nu, l):
    """``psi_{nu,l}`` as a polynomial :class:`MultiplierSpec`."""
    return MultiplierSpec.polynomial([(k, j - k, c) for j, k, c in table.terms(nu, l)], table.alpha)


def _axis_of(alpha):
    a = np.asarray(alpha)
    hits = np.flatnonzero(np.abs(np.abs(a) - 1.0) < 1e-12)
    if len(hits) != 1 or np.count_nonzero(np.abs(a) > 1e-12) != 1:
        raise DomainError("constant-coefficient amplitudes need an axis-aligned direction")
    ax = int(hits[0])
    return ax, float(np.sign(a[ax]))


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    f = lambda u: np.where(u > 0, np.exp(-1.0 / np.where(u > 0, u, 1.0)), 0.0)
    return f(t) / (f(t) + f(1.0 - t))


def axis_window(grid, axis, plateau=0.75, edge=0.95):
    """Smooth window along ``axis``: 1 for ``|x| <= plateau L/2``, 0 for ``|x| >= edge L/2``."""
    x = grid.mesh()[axis] - (grid.origin[axis] + 0.5 * grid.periods[axis])
    half = 0.5 * grid.periods[axis]
    t = (np.abs(x) - plateau * half) / ((edge - plateau) * half)
    return 1.0 - _smoothstep(t)


def _antiderivative(S, axis, spacing, period):
    """``F(x) = int_{x_lo}^{x} S dx`` along ``axis`` for periodic samples ``S``."""
    m = S.shape[axis]
    mean = np.mean(S, axis=axis, keepdims=True)
    k = 2 * np.pi * np.fft.fftfreq(m, d=spacing)
    shape = [1] * S.ndim
    shape[axis] = m
    k = k.reshape(shape)
    Sh = np.fft.fft(S - mean, axis=axis)
    with np.errstate(divide="ignore", invalid="ignore"):
        Gh = np.where(k != 0, Sh / (1j * np.where(k != 0, k, 1.0)), 0.0)
    G = np.fft.ifft(Gh, axis=axis)
    x = (np.arange(m) * spacing).reshape(shape)
    G0 = np.take(G, [0], axis=axis)
    return mean * x + (G - G0)


def const_coef_amplitudes(table, a0, M, window=None, tol=1e-10, source_tol=1e-8):
    """Amplitudes ``a_1 .. a_M`` of the plane-wave ansatz ``exp(i tau alpha.x) sum tau**-l a_l``.

    Solves ``alpha . grad a_{nu+1} = -(i / 2s) sum_{l <= nu} Psi_{nu+2,l} a_l``
    with the symbols applied spectrally to windowed amplitudes and the
    integral along ``alpha`` started at the upstream edge of the box.
    Every returned amplitude (and ``a0`` itself, when reused as a source)
    is multiplied by ``window`` (default :func:`axis_window`), so the
    results satisfy the recursion exactly where the window is one.

    Raises
    ------
    DomainError
        ``alpha`` is not a coordinate direction, or ``a0`` varies along it.
    SupportError
        ``a0`` does not decay at the box edges across ``alpha``, or a
        source is not decayed at the upstream edge.
    """
    if M < 0:
        raise DomainError("order M must be nonnegative")
    if M == 0:
        return []
    grid = a0.grid
    axis, sgn = _axis_of(table.alpha)
    v = a0.values
    scale = float(np.max(np.abs(v))) or 1.0
    da = spectral_gradient(a0)[axis].values
    if np.max(np.abs(da)) > tol * scale * max(1.0, max(grid.periods)):
        raise DomainError("a0 must be constant along the propagation direction")
    for ax in range(grid.n):
        if ax == axis:
            continue
        edge = np.take(v, [0], axis=ax)
        if np.max(np.abs(edge)) > tol * scale:
            raise SupportError(f"a0 is not decayed at the box edge across axis {ax}")
    w = axis_window(grid, axis) if window is None else np.asarray(window)
    amps = [v * w]
    h = grid.spacing[axis]
    for nu in range(M):
        S = np.zeros(grid.sizes, dtype=np.complex128)
        for l in range(nu + 1):
            S = S + apply_multiplier(Field(grid, amps[l]), const_coef_symbol(table, nu + 2, l)).values
        S = -0.5j / table.s * S
        up = np.take(S, [0], axis=axis)
        if np.max(np.abs(up)) > source_tol * max(float(np.max(np.abs(S))), scale):
            raise SupportError(f"source for a_{nu + 1} is not decayed at the upstream edge")
        F = _antiderivative(S, axis, h, grid.periods[axis])
        if sgn < 0:
            # integrate from the right edge (periodic image of the left one)
            F = np.mean(S, axis=axis, keepdims=True) * grid.periods[axis] - F
        amps.append(F * w)
    return [Field(grid, a) for a in amps[1:]]


# ---------------------------------------------------------- ray transport


class BoundaryAmplitude:
    """Boundary profile ``b`` on the launch-angle circle (or a transverse line).

    Kinds
    -----
    ``bump``      ``scale exp(1 - 1/(1 - (d/width)**2))`` for ``|d| < width``,
                  ``d`` the wrapped angle distance to ``center``; smooth and
                  compactly supported.
    ``gaussian``  ``scale exp(-((x - center)/width)**2)`` (transverse use).
    ``constant``  ``scale``.
    ``tabulated`` periodic cubic spline through ``(nodes, values)``.
    """

    def __init__(self, kind="bump", center=0.0, width=0.5, scale=1.0, nodes=None, values=None, periodic=True):
        if kind not in ("bump", "gaussian", "constant", "tabulated"):
            raise DomainError(f"unknown boundary amplitude kind {kind!r}")
        self.kind, self.center, self.width, self.scale = kind, float(center), float(width), float(scale)
        self.periodic = periodic
        self._spline = None
        if kind == "tabulated":
            nodes = np.asarray(nodes, dtype=float)
            values = np.asarray(values, dtype=float)
            if np.any(values < 0):
                raise DomainError("boundary amplitude must be nonnegative")
            self._spline = interpolate.CubicSpline(np.append(nodes, nodes[0] + 2 * np.pi),
                                                   np.append(values, values[0]), bc_type="periodic")
        if kind in ("bump", "gaussian") and not self.width > 0:
            raise DomainError("width must be positive")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "constant":
            return np.full(x.shape, self.scale)
        if self.kind == "tabulated":
            return self.scale * self._spline(np.mod(x - self._spline.x[0], 2 * np.pi) + self._spline.x[0])
        d = x - self.center
        if self.periodic and self.kind == "bump":
            d = np.mod(d + np.pi, 2 * np.pi) - np.pi
        if self.kind == "gaussian":
            return self.scale * np.exp(-(d / self.width) ** 2)
        t2 = (d / self.width) ** 2
        inside = t2 < 1
        return np.where(inside, self.scale * np.exp(1.0 - 1.0 / np.where(inside, 1.0 - t2, 1.0)), 0.0)

    def scaled(self, c):
        out = BoundaryAmplitude.__new__(BoundaryAmplitude)
        out.__dict__.update(self.__dict__)
        out.scale = self.scale * c
        return out

    def to_dict(self):
        return {"kind": self.kind, "center": self.center, "width": self.width, "scale": self.scale}


def log_weight(r, j, s):
    """``f = (s - 1/2) log r + (1/2) log j`` so that ``a0 = b exp(-f + iJ)``."""
    return (s - 0.5) * np.log(r) + 0.5 * np.log(j)


def literal_log_weight(r, n, s):
    """The alternative weight ``(2 - n/2 - s) log r - (n/8) r**-4`` (kept for comparison)."""
    return (2 - 0.5 * n - s) * np.log(r) - 0.125 * n * r ** (-4.0)


def _q_over_r(medium):
    return lambda pts: medium.q(pts) / medium.r(pts)


def principal_amplitude(chart, medium, s, boundary, points, with_J=None, extra=()):
    """``a0 = b(theta) r**(1/2-s) j**(-1/2) exp(iJ)`` at ``points`` through the chart.

    ``J = -int_0^rho q / r drho`` is included when ``with_J`` (default:
    ``s == 1/2``).  ``extra`` integrands are accumulated alongside and
    returned as the second value (shape ``(m, len(extra))``), with the
    :class:`ChartSample` as the third.
    """
    if with_J is None:
        with_J = abs(s - 0.5) < 1e-14
    integrands = ([_q_over_r(medium)] if with_J else []) + list(extra)
    smp = chart.sample(points, integrands)
    r = medium.r(smp.x)
    f = log_weight(r, smp.j, s)
    J = -smp.integrals[:, 0] if with_J else 0.0
    a0 = boundary(smp.theta) * np.exp(-f + 1j * J)
    rest = smp.integrals[:, 1:] if with_J else smp.integrals
    return a0, rest, smp


def polar_amplitude_closed_form(chart, medium, s, boundary, points):
    """Closed-form principal amplitude for ``s`` in ``[1/2, 1)``; see :func:`principal_amplitude`."""
    if not 0.5 <= s < 1:
        raise RegimeError(f"closed-form polar amplitude needs s in [1/2, 1), got {s}")
    return principal_amplitude(chart, medium, s, boundary, points)[0]


def solve_transport_along_rays(medium, chart, s, boundary, points, rhs=None, q_in_transport=None,
                               rho0=1e-7, rtol=1e-11, atol=1e-13):
    """Integrate ``2 da/dt + b_s a = rhs`` along chart rays to ``points``.

    Independent of the chart's Jacobi fields: the state ``(x, xi, H, a)``
    is advanced in ``rho`` by an adaptive Runge-Kutta method, with the
    Hessian ``H`` of the phase following the Riccati equation
    ``dH/dt = Hess(r**2)/2 - H**2`` and ``b_s = tr H + (2s-2) xi.H.xi / r**2``.
    The start at ``rho0`` uses the point-source asymptotics
    ``a = b(theta) r(p)**(1/2-s) d**(-1/2)``, ``H = r(p)(I - e e^T)/d``
    corrected so that ``H xi = grad(r**2)/2`` holds exactly.

    ``rhs`` is an optional callable of points.  With ``q_in_transport``
    (default ``s == 1/2``) the potential term ``-2i r q a`` is added.
    """
    if q_in_transport is None:
        q_in_transport = abs(s - 0.5) < 1e-14
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    rho_t, theta_t = chart.inverse(pts)
    p = chart.p
    rp = float(medium.r(p[None])[0])
    out = np.empty(len(pts), dtype=np.complex128)

    def f(rho, y):
        x = y[0:2]
        xi = y[2:4]
        H = np.array([[y[4], y[5]], [y[5], y[6]]])
        a = y[7] + 1j * y[8]
        X = x[None]
        R = float(medium.R(X)[0])
        gR = medium.grad_R(X)[0]
        HR = medium.hess_R(X)[0]
        b = np.trace(H) + (2 * s - 2) * (xi @ H @ xi) / R
        src = 0.0 if rhs is None else complex(rhs(X)[0])
        if q_in_transport:
            src = src - 2j * math.sqrt(R) * float(medium.q(X)[0]) * a
        dH = (0.5 * HR - H @ H) / R
        da = (-b * a + src) / (2 * R)
        return np.concatenate([xi / R, 0.5 * gR / R, [dH[0, 0], dH[0, 1], dH[1, 1], da.real, da.imag]])

    for i, (rho, th) in enumerate(zip(rho_t, theta_t)):
        e = np.array([math.cos(th), math.sin(th)])
        d0 = rho0 / rp
        # transverse part from the point source; the longitudinal part is
        # pinned by differentiating the eikonal: H xi = grad(r**2) / 2
        v = 0.5 * medium.grad_R(p[None])[0] / rp
        H0 = rp * (np.eye(2) - np.outer(e, e)) / d0 + np.outer(v, e) + np.outer(e, v) - (v @ e) * np.outer(e, e)
        a0 = float(boundary(th)) * rp ** (0.5 - s) * d0**-0.5
        y0 = np.concatenate([p + d0 * e, rp * e, [H0[0, 0], H0[0, 1], H0[1, 1], a0, 0.0]])
        sol = integrate.solve_ivp(f, (rho0, rho), y0, method="DOP853", rtol=rtol, atol=atol)
        if not sol.success:
            raise DomainError(f"ray ODE failed: {sol.message}")
        out[i] = sol.y[7, -1] + 1j * sol.y[8, -1]
    return out


# ---------------------------------------------------------- phase correction


def phase_correction_phi1(medium, phase, s, grid, region=None, entry=None, steps=64):
    """Lower-order phase ``phi1`` solving ``2s |grad phi0|**(2s-2) grad phi0 . grad phi1 = -q``.

    Along the flow of ``grad phi0 / |grad phi0|**2`` (unit speed in
    ``phi0``) this reads ``d phi1 / d phi0 = -q / (2s r**(2s))`` with
    ``|grad phi0| = r``; ``phi1`` vanishes on the entry level set
    ``phi0 = entry`` (default: the smallest ``phi0`` on ``Omega'``).

    For a :class:`ChartPhase` the integral runs along chart rays from the
    base point, where ``phi0 = rho = 0``.  Otherwise the phase must be
    evaluable off-grid and the flow is traced backwards from each grid
    point in ``region`` (default: all points) with ``steps`` RK4 steps.
    """
    if not 0 < s < 0.5:
        raise RegimeError(f"phase correction is part of the s < 1/2 construction, got s={s}")
    if isinstance(phase, ChartPhase):
        smp = phase.chart.sample(grid.points()[phase.region],
                                 [lambda x: medium.q(x) * medium.R(x) ** (-s)])
        return Field(grid, phase.scatter(-smp.integrals[:, 0] / (2 * s)))
    if region is None:
        region = np.ones(grid.sizes, dtype=bool)
    q_w = lambda x: medium.q(x) * np.sum(phase.grad(x) ** 2, axis=-1) ** (-s)
    ints, _ = ray_integrals(phase, medium, grid, region, [q_w], entry=entry, steps=steps)
    out = np.zeros(grid.sizes)
    out[region] = -ints[:, 0] / (2 * s)
    return Field(grid, out)


def _entry_level(phase, medium):
    lo, hi = medium.omega_prime.extent()
    axes = [np.linspace(a, b, 129) for a, b in zip(lo, hi)]
    cand = np.stack(np.meshgrid(*axes, indexing="ij"), -1)
    cand = cand[medium.omega_prime.sdf(cand) <= 0]
    return float(np.min(phase.value(cand)))


def ray_integrals(phase, medium, grid, region, integrands, entry=None, steps=64):
    """Integrate ``f(x) dphi`` along the flow of ``grad phi / |grad phi|**2``.

    The flow has unit speed in ``phi``.  Each grid point in ``region``
    (all points when ``None``) is traced backwards to the entry level set
    ``phi = entry`` (default: the smallest phase on ``Omega'``) with
    ``steps`` RK4 steps.

    Returns
    -------
    integrals : ndarray, shape (m, len(integrands))
        ``int_entry^phi(x) f dphi`` for each point.
    entry_points : ndarray, shape (m, n)
        Where the traced ray meets the entry level set.
    """
    pts = grid.points()
    x = pts.reshape(-1, pts.shape[-1]) if region is None else pts[region]
    if entry is None:
        entry = _entry_level(phase, medium)
    d = (-(phase.value(x) - entry) / steps)[:, None]
    n = x.shape[1]

    def rhs(y):
        xx = y[:, :n]
        g = phase.grad(xx)
        n2 = np.sum(g * g, axis=-1)
        return np.concatenate([g / n2[:, None]] + [np.asarray(f(xx))[:, None] for f in integrands], axis=1)

    y = np.concatenate([x, np.zeros((len(x), len(integrands)))], axis=1)
    for _ in range(steps):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * d * k1)
        k3 = rhs(y + 0.5 * d * k2)
        k4 = rhs(y + d * k3)
        y = y + d / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    # accumulated from x back to the entry, so flip the sign
    return -y[:, n:], y[:, :n]
