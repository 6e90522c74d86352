"""Residual measurements, tau sweeps and slope fits.

Residuals are ``||((-Delta)**s - tau**(2s) r**(2s) + q) u||`` in
semiclassical Sobolev norms of order 0 and 1 over the domain mask.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .errors import DomainError, FracGOError
from .go import build_low_s, evaluate
from .spectral import Field, frac_laplacian, sobolev_norm_scl, solve_const_helmholtz
from .transport import apply_L10

__all__ = [
    "SweepAborted",
    "SweepReport",
    "apply_operator",
    "residual",
    "fit_slope",
    "tau_sweep",
    "ExpansionReport",
    "expansion_order_check",
    "AblationReport",
    "phase_correction_ablation",
    "upgrade_const",
]


class SweepAborted(FracGOError):
    """A tau point failed; ``partial`` holds the residuals measured so far."""

    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


def apply_operator(medium, u, tau, s=None):
    """``((-Delta)**s - tau**(2s) r**(2s) + q) u`` on the grid of ``u``."""
    s = medium.s if s is None else s
    grid = u.grid
    r2s = medium.r_on(grid) ** (2 * s)
    q = medium.q_on(grid)
    lu = frac_laplacian(u, s).values - tau ** (2 * s) * r2s * u.values + q * u.values
    return Field(grid, lu)


def residual(medium, u, tau, s=None, beta=0, mask=None):
    """Semiclassical ``H**beta`` norm of the operator applied to ``u`` over ``mask``.

    ``mask`` defaults to the domain of ``medium``.  The norm uses the
    restriction approximation of :func:`sobolev_norm_scl`.
    """
    if not np.all(np.isfinite(u.values)):
        raise DomainError("residual of a non-finite field")
    if mask is None:
        mask = medium.omega.mask(u.grid)
    return sobolev_norm_scl(apply_operator(medium, u, tau, s), beta, 1.0 / tau, mask)


def fit_slope(taus, values):
    """Least-squares slope of ``log2 values`` against ``log2 taus`` and its standard error."""
    taus = np.asarray(taus, dtype=float)
    values = np.asarray(values, dtype=float)
    if np.any(values <= 0):
        raise DomainError("slopes need positive values")
    fit = stats.linregress(np.log2(taus), np.log2(values))
    return float(fit.slope), float(fit.stderr)


@dataclass
class SweepReport:
    """Residuals over a tau list with the fitted and predicted slopes.

    ``slope`` is fitted on the order-0 residuals, ``slope_b1`` on the
    order-1 ones.  ``refinement`` records the same sweep on a grid with
    doubled sizes; the report is citable only if that slope moved by
    less than 0.1.
    """

    taus: list
    residual_b0: list
    residual_b1: list
    slope: float
    stderr: float
    slope_b1: float
    predicted: float = None
    note: str = ""
    refinement: dict = None
    manifest: dict = field(default_factory=dict)

    @property
    def citable(self):
        return bool(self.refinement and self.refinement["passed"])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "residual_b0", "residual_b1"])
            for row in zip(self.taus, self.residual_b0, self.residual_b1):
                w.writerow([repr(float(v)) for v in row])

    def to_dict(self):
        d = asdict(self)
        d["citable"] = self.citable
        return d

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, default=float)


def _measure(ansatz, taus, jobs):
    medium = ansatz.medium
    mask = medium.omega.mask(ansatz.grid)

    def one(tau):
        u = evaluate(ansatz, tau)
        lu = apply_operator(medium, u, tau)
        return (sobolev_norm_scl(lu, 0, 1.0 / tau, mask), sobolev_norm_scl(lu, 1, 1.0 / tau, mask))

    out = []
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            futures = [ex.submit(one, t) for t in taus]
            for t, f in zip(taus, futures):
                try:
                    out.append(f.result())
                except FracGOError as exc:
                    raise SweepAborted(f"tau={t}: {exc}", out) from exc
    else:
        for t in taus:
            try:
                out.append(one(t))
            except FracGOError as exc:
                raise SweepAborted(f"tau={t}: {exc}", out) from exc
    return [o[0] for o in out], [o[1] for o in out]


def tau_sweep(build, grid, taus, predicted=None, note="", refine=True, jobs=1):
    """Build an ansatz with ``build(grid)`` and measure residuals over ``taus``.

    With ``refine`` the sweep is repeated on ``grid.refined(2)`` and the
    refinement gate (slope change below 0.1) is recorded.

    Raises
    ------
    SweepAborted
        A tau point failed; measured residuals are attached.
    """
    taus = [float(t) for t in taus]
    if len(taus) < 4 or any(b <= a for a, b in zip(taus, taus[1:])):
        raise DomainError("tau list must be strictly increasing with at least 4 entries")
    ansatz = build(grid)
    r0, r1 = _measure(ansatz, taus, jobs)
    slope, err = fit_slope(taus, r0)
    slope_b1, _ = fit_slope(taus, r1)
    ref = None
    if refine:
        fine = build(grid.refined(2))
        f0, _ = _measure(fine, taus, jobs)
        fs, _ = fit_slope(taus, f0)
        change = max(abs(a - b) / b for a, b in zip(r0, f0))
        ref = {"grid": fine.grid.to_dict(), "slope": fs, "slope_change": abs(fs - slope),
               "max_residual_change": change, "passed": abs(fs - slope) < 0.1}
    return SweepReport(taus, r0, r1, slope, err, slope_b1, predicted, note, ref, ansatz.manifest())


# ------------------------------------------------------------ expansion


@dataclass
class ExpansionReport:
    taus: list
    D0: list
    D1: list
    slope_D0: float
    slope_D1: float
    expected_D0: float
    expected_D1: float

    def to_dict(self):
        return asdict(self)


def expansion_order_check(phase, a, s, taus, mask=None):
    """Measure the first two terms of the fractional Laplacian of ``exp(i tau phi) a``.

    ``D0 = ||exp(-i tau phi) (-Delta)**s (exp(i tau phi) a) - tau**(2s) |grad phi|**(2s) a||``
    and ``D1`` additionally subtracts ``tau**(2s-1) L10 a``.  The norms
    are L2 over ``mask`` (default: where ``|a|`` exceeds 1e-8 of its
    maximum).  Expected slopes are ``2s - 1`` and ``2s - 2``.
    """
    grid = a.grid
    pts = grid.points()
    phi = phase.value(pts)
    g = phase.grad(pts)
    norm2s = np.sum(g * g, axis=-1) ** s
    if mask is None:
        mask = np.abs(a.values) > 1e-8 * np.max(np.abs(a.values))
    l10 = apply_L10(phase, s, a).values
    d0, d1 = [], []
    for tau in taus:
        e = np.exp(1j * tau * phi)
        w = np.conj(e) * frac_laplacian(Field(grid, e * a.values), s).values - tau ** (2 * s) * norm2s * a.values
        d0.append(Field(grid, w).l2_norm(mask))
        d1.append(Field(grid, w - tau ** (2 * s - 1) * l10).l2_norm(mask))
    return ExpansionReport(list(map(float, taus)), d0, d1, fit_slope(taus, d0)[0], fit_slope(taus, d1)[0],
                           2 * s - 1, 2 * s - 2)


# ------------------------------------------------------------- ablation


@dataclass
class AblationReport:
    off: SweepReport
    on: SweepReport

    @property
    def slope_off(self):
        return self.off.slope

    @property
    def slope_on(self):
        return self.on.slope

    def to_dict(self):
        return {"off": self.off.to_dict(), "on": self.on.to_dict(),
                "slope_off": self.slope_off, "slope_on": self.slope_on}


def phase_correction_ablation(medium, phase, boundary, grid, taus, margin=0.5, refine=True, jobs=1):
    """Two low-s sweeps, without and with the phase correction ``phi1``.

    Predicted slopes: 0 without (the ``q a0`` term is left over) and
    ``-2s`` with the correction.
    """
    s = medium.s
    off = tau_sweep(lambda g: build_low_s(medium, phase, boundary, False, g, margin), grid, taus,
                    predicted=0.0, note="q a0 leftover", refine=refine, jobs=jobs)
    on = tau_sweep(lambda g: build_low_s(medium, phase, boundary, True, g, margin), grid, taus,
                   predicted=-2 * s, note="tau**(-2s) leftover after phi1", refine=refine, jobs=jobs)
    return AblationReport(off, on)


# -------------------------------------------------------------- upgrade


def upgrade_const(ansatz, tau, source_mask=None, guard=None):
    """Correct a constant-coefficient ansatz to an exact torus solution.

    Solves ``L v = -f`` with ``f = L u_M`` (times ``source_mask`` when
    given, e.g. a cutoff equal to one on the domain, in which case
    ``u_M + v`` is exact where the mask is one).

    Returns
    -------
    u : Field
        ``u_M + v``.
    correction : float
        ``||v||`` in the semiclassical ``H**s`` norm.
    ratio : float
        ``||v|| / ||u_M||`` in L2 over the domain.
    """
    medium = ansatz.medium
    s = medium.s
    r = medium.r_on(ansatz.grid)
    if np.ptp(r) > 0 or np.any(medium.q_on(ansatz.grid) != 0):
        raise DomainError("the upgrade needs constant r and q = 0")
    c = float(r.flat[0])
    u = evaluate(ansatz, tau)
    f = apply_operator(medium, u, tau)
    if source_mask is not None:
        f = f * source_mask
    # (-Delta)**s - (c tau)**(2s) is the constant-coefficient operator
    v = solve_const_helmholtz(-f, c * tau, s, guard=guard)
    mask = medium.omega.mask(ansatz.grid)
    corr = sobolev_norm_scl(v, s, 1.0 / tau)
    ratio = v.l2_norm(mask) / u.l2_norm(mask)
    return u + v, corr, ratio
