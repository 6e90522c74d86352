"""Assembly and evaluation of geometrical-optics ansatze.

An ansatz is

    u(x) = chi(x) exp(i sum_j tau**(1 - 2 s j) phi_j(x)) sum_l tau**(-alpha_l) a_l(x)

with a smooth cutoff ``chi``.  Three builders cover the constant
coefficient plane wave, the single-phase construction for ``s >= 1/2``
and the two-phase construction for ``s < 1/2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import interpolate, ndimage

from .errors import CoverageError, DomainError, RegimeError, ResolutionError
from .media import ChartPhase, ConstantIndex, ConstantPotential, Disk, Medium, PlanePhase, PolarChart
from .spectral import Field, Grid
from .transport import (
    BoundaryAmplitude,
    ConstCoefSymbolTable,
    _smoothstep,
    axis_window,
    const_coef_amplitudes,
    principal_amplitude,
    ray_integrals,
)

__all__ = [
    "ExponentLattice",
    "exponent_lattice",
    "bump_cutoff",
    "GOAnsatz",
    "ray_integrals",
    "build_const_coef",
    "build_high_s",
    "build_low_s",
    "evaluate",
    "required_sizes",
]


@dataclass(frozen=True)
class ExponentLattice:
    s: float
    entries: tuple
    tol: float = 1e-12

    @property
    def alpha1(self):
        return self.entries[1] if len(self.entries) > 1 else None

    def contains(self, x):
        return any(abs(x - e) <= self.tol for e in self.entries)


def exponent_lattice(s, cutoff, tol=1e-12):
    """Sorted entries of ``N + (2s - floor(2s)) N`` up to ``cutoff``.

    For ``s = 1/2`` the fractional generator vanishes and the lattice is
    the natural numbers.
    """
    if not 0 < s < 1:
        raise DomainError(f"order s={s} outside (0, 1)")
    if not cutoff > 0:
        raise DomainError("cutoff must be positive")
    frac = 2 * s - math.floor(2 * s)
    vals = []
    for m in range(int(math.floor(cutoff + tol)) + 1):
        if frac <= tol:
            vals.append(float(m))
            continue
        k = 0
        while m + k * frac <= cutoff + tol:
            vals.append(m + k * frac)
            k += 1
    vals.sort()
    out = []
    for v in vals:
        if not out or v - out[-1] > tol:
            out.append(v)
    return ExponentLattice(float(s), tuple(out), tol)


def bump_cutoff(grid, omega, margin):
    """Smooth cutoff: 1 on ``Omega`` dilated by ``margin``, 0 beyond ``2 margin``.

    The transition is the C-infinity step ``f(1-t) / (f(1-t) + f(t))``
    with ``f(t) = exp(-1/t)`` in the normalised distance ``t``.
    """
    if not margin > 0:
        raise DomainError("margin must be positive")
    lo, hi = omega.dilate(2 * margin).extent()
    glo = np.asarray(grid.origin)
    ghi = glo + np.asarray(grid.periods) - np.asarray(grid.spacing)
    if np.any(lo <= glo) or np.any(hi >= ghi):
        raise DomainError(f"domain dilated by 2*margin={2 * margin} does not fit in the box")
    t = (omega.sdf(grid.points()) - margin) / margin
    return Field(grid, 1.0 - _smoothstep(t))


@dataclass(eq=False)
class GOAnsatz:
    """Phases, amplitudes and cutoff of a geometrical-optics ansatz.

    ``phases`` holds ``(exponent, Field)`` pairs with the phase entering
    as ``tau**exponent * phi`` (exponent ``1 - 2 s j`` for ``phi_j``);
    ``amplitudes`` holds ``(alpha_l, Field)`` pairs.  ``grad_max`` is the
    per-axis maximum of ``|d phi_j / d x_i|`` over the cutoff support,
    used by the resolution policy.
    """

    regime: str
    grid: Grid
    phases: list
    amplitudes: list
    chi: Field
    medium: Medium = None
    meta: dict = field(default_factory=dict)
    grad_max: list = None

    def __post_init__(self):
        if self.grad_max is None:
            supp = self.chi.values.real > 0
            gm = []
            for _, ph in self.phases:
                v = ph.values.real
                row = []
                for i, h in enumerate(self.grid.spacing):
                    # one-sided differences between neighbouring support cells
                    d = np.abs(np.diff(v, axis=i)) / h
                    both = np.logical_and(np.delete(supp, -1, axis=i), np.delete(supp, 0, axis=i))
                    row.append(float(np.max(d[both])) if both.any() else 0.0)
                gm.append(row)
            self.grad_max = gm

    def manifest(self):
        return {
            "regime": self.regime,
            "phase_exponents": [e for e, _ in self.phases],
            "amplitude_exponents": [a for a, _ in self.amplitudes],
            "grid": self.grid.to_dict(),
            "medium": None if self.medium is None else self.medium.to_dict(),
            "medium_sha256": None if self.medium is None else self.medium.digest(),
            **self.meta,
        }


def required_sizes(ansatz, tau, ppw=8):
    """Smallest power-of-two sizes giving ``ppw`` points per local wavelength per axis."""
    sizes = []
    for i, (m, L) in enumerate(zip(ansatz.grid.sizes, ansatz.grid.periods)):
        k = sum(tau**e * g[i] for (e, _), g in zip(ansatz.phases, ansatz.grad_max))
        need = ppw * L * k / (2 * np.pi)
        sizes.append(max(8, 1 << int(math.ceil(math.log2(max(need, 1.0))))))
    return tuple(sizes)


def evaluate(ansatz, tau, check_resolution=True):
    """``chi exp(i sum tau**e_j phi_j) sum tau**(-alpha_l) a_l`` on the grid.

    Raises :class:`ResolutionError` (carrying the required sizes) if the
    grid has fewer than 8 points per local wavelength on some axis.
    """
    if not tau >= 1:
        raise DomainError("frequency tau must be at least 1")
    if check_resolution:
        need = required_sizes(ansatz, tau)
        if any(n < m for n, m in zip(ansatz.grid.sizes, need)):
            raise ResolutionError(f"tau={tau} needs grid sizes {need}, have {ansatz.grid.sizes}", need)
    lt = math.log(tau)
    phase = np.zeros(ansatz.grid.sizes)
    for e, ph in ansatz.phases:
        phase = phase + math.exp(e * lt) * ph.values.real
    amp = np.zeros(ansatz.grid.sizes, dtype=np.complex128)
    for a, al in ansatz.amplitudes:
        amp = amp + math.exp(-a * lt) * al.values
    return Field(ansatz.grid, ansatz.chi.values * np.exp(1j * phase) * amp)


# --------------------------------------------------------------- builders


def _region(chi):
    return chi.values.real > 0


def _transverse(direction):
    a = np.asarray(direction, dtype=float)
    return np.array([-a[1], a[0]]) if a.size == 2 else np.zeros(1)


def _b_s_over_2R(phase, s):
    def f(x):
        g = phase.grad(x)
        H = phase.hess(x)
        n2 = np.sum(g * g, axis=-1)
        lap = np.trace(H, axis1=-2, axis2=-1)
        return (lap + (2 * s - 2) * np.einsum("...i,...ij,...j->...", g, H, g) / n2) / (2 * n2)

    return f


def _coarse_eval(grid, region, compute, valid=None, min_size=256, stride=4, pad=4):
    """Evaluate smooth ``compute(points) -> (m, k)`` on ``region`` via a coarser grid.

    Axes longer than ``min_size`` are subsampled by ``stride`` (keeping at
    least ``min_size`` points); values on the coarse cells near
    ``region`` are extended by nearest neighbours and interpolated back
    with bicubic splines.  Coarse cells outside ``valid(points)`` (e.g.
    beyond a chart) are filled by neighbours instead of computed.
    Without subsampling ``compute`` runs directly.
    """
    sizes_c = tuple(m if m <= min_size else max(min_size, m // stride) for m in grid.sizes)
    if sizes_c == tuple(grid.sizes) or grid.n > 2:
        return np.atleast_2d(np.asarray(compute(grid.points()[region])).T).T
    steps = [m // c for m, c in zip(grid.sizes, sizes_c)]
    cg = replace(grid, sizes=sizes_c)
    shape = []
    for c, st in zip(sizes_c, steps):
        shape += [c, st]
    near = region.reshape(shape).any(axis=tuple(range(1, 2 * grid.n, 2)))
    creg = ndimage.binary_dilation(near, iterations=pad)
    if valid is not None:
        cpts = cg.points()
        creg &= valid(cpts) | near
    vals = np.atleast_2d(np.asarray(compute(cg.points()[creg])).T).T
    idx = ndimage.distance_transform_edt(~creg, return_distances=False, return_indices=True)
    cax, fax = cg.axes(), grid.axes()
    out = np.empty((int(region.sum()), vals.shape[1]), dtype=np.complex128)
    for k in range(vals.shape[1]):
        full = np.zeros(sizes_c, dtype=np.complex128)
        full[creg] = vals[:, k]
        full = full[tuple(idx)]
        parts = []
        for part in (full.real, full.imag):
            if grid.n == 1:
                parts.append(interpolate.CubicSpline(cax[0], part)(fax[0]))
            else:
                parts.append(interpolate.RectBivariateSpline(cax[0], cax[1], part)(fax[0], fax[1]))
        out[:, k] = (parts[0] + 1j * parts[1])[region]
    return out


def _ray_quantities(medium, phase, boundary, grid, region, s, with_J, extras, coarse):
    """Phase, ``a0`` and extra ray integrals on ``region``.

    ``phase`` is a :class:`PolarChart` (amplitude from the closed form)
    or an analytic phase (amplitude from integrating the transport
    equation backwards to the entry level set).  ``extras`` are
    ``(f_chart, f_phase)`` integrand pairs, the second for analytic
    phases where ``|grad phi|`` replaces ``r``.  Returns an array of
    columns ``[phi, a0, int extra_1, ...]``.
    """
    if isinstance(phase, ChartPhase):
        phase = phase.chart
    valid = None
    if isinstance(phase, PolarChart):
        chart = phase
        valid = lambda pts: medium.omega_prime.sdf(pts) < 0

        def compute(pts):
            # past a caustic j < 0 and the log is NaN; the check below reports it
            with np.errstate(invalid="ignore"):
                a0, rest, smp = principal_amplitude(chart, medium, s, boundary, pts, with_J=with_J,
                                                    extra=[e[0] for e in extras])
            if np.any(smp.det <= 0):
                raise CoverageError(f"rays cross (caustic) at {int(np.sum(smp.det <= 0))} point(s)",
                                    pts[smp.det <= 0])
            return np.column_stack([smp.rho, a0] + [rest[:, k] for k in range(rest.shape[1])])
    else:
        n2 = lambda x: np.sum(phase.grad(x) ** 2, axis=-1)
        q_r = lambda x: medium.q(x) / np.sqrt(n2(x))
        integrands = [_b_s_over_2R(phase, s)] + ([q_r] if with_J else []) + [e[1] for e in extras]
        direction = getattr(phase, "direction", np.eye(grid.n)[0])

        def compute(pts):
            ints, x_entry = ray_integrals(phase, medium, _PointSet(pts), None, integrands)
            perp = x_entry @ _transverse(direction) if grid.n == 2 else np.zeros(len(x_entry))
            a0 = boundary(perp) * np.exp(-ints[:, 0])
            col = 1
            if with_J:
                a0 = a0 * np.exp(-1j * ints[:, 1])
                col = 2
            return np.column_stack([phase.value(pts), a0] + [ints[:, k] for k in range(col, ints.shape[1])])

    return _coarse_eval(grid, region, compute, valid, **coarse)


class _PointSet:
    """Minimal grid stand-in exposing a fixed point list to :func:`ray_integrals`."""

    def __init__(self, pts):
        self._pts = pts
        self.sizes = (len(pts),)

    def points(self):
        return self._pts


def _scatter(grid, region, vals, dtype=np.complex128):
    out = np.zeros(grid.sizes, dtype=dtype)
    out[region] = vals
    return Field(grid, out)


def build_const_coef(s, direction, grid, profile, M, omega=None, margin=0.5, window=None):
    """Plane-wave ansatz ``exp(i tau alpha.x) sum_{l<=M} tau**-l a_l`` for ``r = 1, q = 0``.

    ``profile`` gives ``a0`` as a function of the transverse coordinate
    (the coordinate itself in 1-D).  Amplitudes come from
    :func:`const_coef_amplitudes`.
    """
    omega = Disk(center=(0.0,) * grid.n) if omega is None else omega
    table = ConstCoefSymbolTable(s, direction)
    pts = grid.points()
    if grid.n == 1:
        a0v = np.full(grid.sizes, profile(np.zeros(1))[0], dtype=np.complex128)
    else:
        a0v = profile(pts @ _transverse(direction)).astype(np.complex128)
    a0 = Field(grid, a0v)
    axis = int(np.flatnonzero(np.abs(table.alpha) > 0.5)[0])
    w = axis_window(grid, axis) if window is None else window
    rest = const_coef_amplitudes(table, a0, M, window=w)
    chi = bump_cutoff(grid, omega, margin)
    phase = PlanePhase(direction).field(grid)
    medium = Medium(ConstantIndex(1.0), ConstantPotential(0.0), s, omega)
    amps = [(0.0, a0 * w)] + [(float(l + 1), a) for l, a in enumerate(rest)]
    meta = {"s": s, "M": M, "direction": list(map(float, direction)), "margin": margin,
            "profile": getattr(profile, "to_dict", lambda: None)(),
            "lattice": list(range(M + 1))}
    return GOAnsatz("const_coef", grid, [(1.0, phase)], amps, chi, medium, meta)


def build_high_s(medium, phase, boundary, M, grid, margin=0.1, coarse=None):
    """Single-phase ansatz for ``s`` in ``[1/2, 1)``.

    ``phase`` is a :class:`PolarChart` (distance phase from its base
    point) or an analytic phase such as :class:`PlanePhase`.  ``a0``
    solves the homogeneous transport equation, with the potential
    absorbed as ``exp(iJ)``, ``J = -int q/r drho``, when ``s = 1/2``.
    For ``M = 2`` and ``s > 1/2`` the second amplitude, at exponent
    ``2s - 1``, solves the transport equation with source ``q a0``:
    ``a1 = a0 W`` with ``W = -(i/2s) int q r**(-2s) drho``.  For
    ``s = 1/2`` that source is already in ``a0`` and ``a1 = 0``.

    ``coarse`` holds keyword options for the coarse evaluation of the
    smooth ray quantities (``min_size``, ``stride``, ``pad``).
    """
    s = medium.s
    if not 0.5 <= s < 1:
        raise RegimeError(f"single-phase construction needs s in [1/2, 1), got {s}; "
                          "below 1/2 a single phase cannot absorb the potential")
    if M not in (1, 2):
        raise DomainError("high-s builds support M = 1 or 2")
    chi = bump_cutoff(grid, medium.omega, margin)
    region = _region(chi)
    half = abs(s - 0.5) < 1e-14
    with_W = M == 2 and not half
    extras = []
    if with_W:
        extras = [(lambda x: medium.q(x) * medium.R(x) ** (-s),
                   lambda x: medium.q(x) * np.sum(phase.grad(x) ** 2, axis=-1) ** (-s))]
    cols = _ray_quantities(medium, phase, boundary, grid, region, s, half, extras, coarse or {})
    a0 = cols[:, 1]
    amps = [(0.0, _scatter(grid, region, a0))]
    if M == 2:
        a1 = a0 * (-0.5j / s) * cols[:, 2] if with_W else np.zeros_like(a0)
        amps.append((1.0 if half else 2 * s - 1, _scatter(grid, region, a1)))
    phi = _scatter(grid, region, cols[:, 0].real, dtype=float)
    lat = exponent_lattice(s, 1.0)
    meta = {"s": s, "M": M, "margin": margin, "boundary": boundary.to_dict(), "phase": type(phase).__name__,
            "lattice": list(lat.entries)}
    return GOAnsatz("high_s", grid, [(1.0, phi)], amps, chi, medium, meta)


def build_low_s(medium, phase, boundary, with_phi1, grid, margin=0.1, coarse=None):
    """Two-phase ansatz for ``s`` in ``(0, 1/2)``.

    The phase stack is ``phi0`` (weight ``tau``) and, when ``with_phi1``,
    ``phi1 = -(1/2s) int q r**(-2s) drho`` (weight ``tau**(1-2s)``), the
    solution of ``2s |grad phi0|**(2s-2) grad phi0 . grad phi1 = -q``
    vanishing at the entry; ``a0`` solves the homogeneous transport
    equation.
    """
    s = medium.s
    if not 0 < s < 0.5:
        raise RegimeError(f"two-phase construction is for s in (0, 1/2), got {s}")
    chi = bump_cutoff(grid, medium.omega, margin)
    region = _region(chi)
    extras = []
    if with_phi1:
        extras = [(lambda x: medium.q(x) * medium.R(x) ** (-s),
                   lambda x: medium.q(x) * np.sum(phase.grad(x) ** 2, axis=-1) ** (-s))]
    cols = _ray_quantities(medium, phase, boundary, grid, region, s, False, extras, coarse or {})
    phases = [(1.0, _scatter(grid, region, cols[:, 0].real, dtype=float))]
    if with_phi1:
        phases.append((1.0 - 2 * s, _scatter(grid, region, -cols[:, 2].real / (2 * s), dtype=float)))
    meta = {"s": s, "M": 1, "with_phi1": bool(with_phi1), "margin": margin,
            "boundary": boundary.to_dict(), "phase": type(phase).__name__,
            "lattice": list(exponent_lattice(s, 1.0).entries)}
    return GOAnsatz("low_s", grid, phases, [(0.0, _scatter(grid, region, cols[:, 1]))], chi, medium, meta)
