"""Geodesic ray transform, pairing and the stability experiment.

Rays start at base points on the boundary of ``Omega'`` and run inward;
line integrals use the metric arclength ``drho = r |dx|``.  The
transform of grid fields is a sparse matrix built from bilinear
interpolation, so its adjoint is exact.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse, stats

from .errors import BreakdownError, DomainError, RegimeError, TrappedRayError
from .media import ConstantIndex, ConstantPotential, Disk, GaussianPotential, Medium, SampledPotential, inward_angles
from .spectral import Field, Grid

__all__ = [
    "RayGeometry",
    "fan_geometry",
    "RaySamples",
    "trace_samples",
    "XRayData",
    "XRayOperator",
    "build_operator",
    "ray_transform",
    "CGResult",
    "invert_cg",
    "WeightedPotential",
    "weighted_potential",
    "unweight",
    "alessandrini_pairing",
    "alpha1",
    "optimal_tau",
    "predicted_gamma",
    "StabilityConfig",
    "StabilityReport",
    "stability_experiment",
]

_REGIME = "the inverse method needs s in [1/2, 1); below 1/2 the phases cannot be paired to expose the transform"


def _gate(s):
    if not 0.5 <= s < 1:
        raise RegimeError(f"{_REGIME} (got s={s})")


# ------------------------------------------------------------- geometry


@dataclass(frozen=True)
class RayGeometry:
    """Base points ``p`` (shape ``(m, 2)``) and launch angles ``theta`` (shape ``(m,)``)."""

    p: np.ndarray
    theta: np.ndarray
    n_base: int = 0
    n_dir: int = 0

    @property
    def size(self):
        return len(self.theta)

    @property
    def directions(self):
        return np.stack([np.cos(self.theta), np.sin(self.theta)], axis=-1)


def fan_geometry(omega_prime=None, n_base=64, n_dir=128):
    """Uniform base points on the boundary circle times uniform inward directions."""
    omega_prime = Disk(radius=1.25) if omega_prime is None else omega_prime
    if not isinstance(omega_prime, Disk):
        raise DomainError("fan geometry needs a disk-shaped Omega'")
    if n_base < 1 or n_dir < 1:
        raise DomainError("need at least one base point and one direction")
    c = np.asarray(omega_prime.center, dtype=float)
    psi = 2 * np.pi * np.arange(n_base) / n_base
    base = c + omega_prime.radius * np.stack([np.cos(psi), np.sin(psi)], axis=-1)
    ps, ths = [], []
    for b in base:
        th = inward_angles(b, n_dir, omega_prime)
        ps.append(np.repeat(b[None], n_dir, axis=0))
        ths.append(th)
    return RayGeometry(np.concatenate(ps), np.concatenate(ths), n_base, n_dir)


@dataclass(frozen=True, eq=False)
class RaySamples:
    """Points along every ray and their weights for ``int f drho``.

    ``x`` has shape ``(m, K, 2)``; ``w`` has shape ``(m, K)`` and is zero
    past each ray's exit.  ``rho`` is the accumulated metric arclength.
    """

    geometry: RayGeometry
    x: np.ndarray
    w: np.ndarray
    rho: np.ndarray

    def integrate(self, values):
        return np.sum(self.w * values, axis=1)

    def cumulative(self, values):
        """``int_0^rho f drho`` at every sample (trapezoid in the ray parameter)."""
        dr = np.diff(self.rho, axis=1)
        inc = 0.5 * (values[:, 1:] + values[:, :-1]) * dr
        out = np.zeros(values.shape, dtype=np.result_type(values, float))
        out[:, 1:] = np.cumsum(inc, axis=1)
        return out


def trace_samples(medium, geometry, step=5e-3, budget=20.0):
    """Trace all rays at once with RK4 in the Hamiltonian parameter ``t``.

    ``dx/dt = xi``, ``dxi/dt = grad(r**2)/2`` with ``|xi| = r``, so
    ``drho = r**2 dt``.  Weights are trapezoidal in ``t``; integrands
    must vanish near the boundary of ``Omega'`` (true for anything
    supported in ``Omega``).
    """
    dom = medium.omega_prime
    x = np.asarray(geometry.p, dtype=float).copy()
    r0 = medium.r(x)
    xi = r0[:, None] * geometry.directions
    m = len(x)

    def rhs(x, xi):
        return xi, 0.5 * medium.grad_R(x)

    xs, ws = [x.copy()], [0.5 * step * r0**2]
    active = np.ones(m, dtype=bool)
    t = 0.0
    while active.any():
        if t > budget:
            raise TrappedRayError(f"{int(active.sum())} ray(s) still inside Omega' after parameter {budget}")
        k1x, k1p = rhs(x, xi)
        k2x, k2p = rhs(x + 0.5 * step * k1x, xi + 0.5 * step * k1p)
        k3x, k3p = rhs(x + 0.5 * step * k2x, xi + 0.5 * step * k2p)
        k4x, k4p = rhs(x + step * k3x, xi + step * k3p)
        x = x + step / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
        xi = xi + step / 6 * (k1p + 2 * k2p + 2 * k3p + k4p)
        t += step
        active &= dom.sdf(x) <= 0
        xs.append(x.copy())
        ws.append(np.where(active, step * medium.R(x), 0.0))
    X = np.stack(xs, axis=1)
    W = np.stack(ws, axis=1)
    rho = np.concatenate([np.zeros((m, 1)), np.cumsum(0.5 * (W[:, 1:] + W[:, :-1]), axis=1)], axis=1)
    return RaySamples(geometry, X, W, rho)


# ------------------------------------------------------------- transform


@dataclass(eq=False)
class XRayData:
    """Line integrals per ray with the injected noise level and seed."""

    geometry: RayGeometry
    values: np.ndarray
    delta: float = 0.0
    seed: int = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.shape != (self.geometry.size,):
            raise DomainError("one value per ray is required")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("X-ray data must be finite")

    def scaled(self, c):
        return XRayData(self.geometry, c * self.values, self.delta, self.seed)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["p_x", "p_y", "theta", "value_re", "value_im"])
            for p, th, v in zip(self.geometry.p, self.geometry.theta, self.values):
                w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(th)),
                            repr(float(v.real)), repr(float(v.imag))])


@dataclass(eq=False)
class XRayOperator:
    """Sparse ray transform from the ``mask`` cells of ``grid`` to ray values."""

    grid: Grid
    mask: np.ndarray
    matrix: sparse.csr_matrix
    samples: RaySamples

    def apply(self, x):
        return self.matrix @ x

    def adjoint(self, y):
        return self.matrix.conj().T @ y

    def to_field(self, x):
        v = np.zeros(self.grid.sizes, dtype=np.complex128)
        v[self.mask] = x
        return Field(self.grid, v)

    def from_field(self, u):
        return u.values[self.mask]


def _bilinear(grid, pts):
    """Cell indices (flat) and weights of bilinear interpolation on the periodic grid."""
    h = np.asarray(grid.spacing)
    o = np.asarray(grid.origin)
    N = np.asarray(grid.sizes)
    u = (pts - o) / h
    i0 = np.floor(u).astype(int)
    f = u - i0
    idx, wts = [], []
    for dx in (0, 1):
        for dy in (0, 1):
            ix = np.mod(i0[:, 0] + dx, N[0])
            iy = np.mod(i0[:, 1] + dy, N[1])
            idx.append(ix * N[1] + iy)
            wts.append((f[:, 0] if dx else 1 - f[:, 0]) * (f[:, 1] if dy else 1 - f[:, 1]))
    return np.stack(idx, 1), np.stack(wts, 1)


def build_operator(medium, grid, geometry=None, mask=None, step=None, samples=None):
    """Assemble the ray transform restricted to ``mask`` cells (default: ``Omega``).

    Samples farther than two cells from ``Omega`` are dropped, as the
    unknowns vanish there; this also keeps periodic wrap-around out of
    the interpolation.
    """
    if grid.n != 2:
        raise DomainError("ray transforms are implemented in 2-D")
    geometry = fan_geometry(medium.omega_prime) if geometry is None else geometry
    step = 0.25 * min(grid.spacing) if step is None else step
    samples = trace_samples(medium, geometry, step) if samples is None else samples
    mask = medium.omega.mask(grid) if mask is None else np.asarray(mask, dtype=bool)
    m, K = samples.w.shape
    pts = samples.x.reshape(-1, 2)
    w = samples.w.reshape(-1)
    keep = (w > 0) & (medium.omega.sdf(pts) <= 2 * max(grid.spacing))
    rows = np.repeat(np.arange(m), K)[keep]
    idx, wts = _bilinear(grid, pts[keep])
    A = sparse.csr_matrix((np.ravel(wts * w[keep][:, None]), (np.repeat(rows, 4), np.ravel(idx))),
                          shape=(m, grid.sizes[0] * grid.sizes[1]))
    A.sum_duplicates()
    cols = np.flatnonzero(mask.ravel())
    return XRayOperator(grid, mask, A[:, cols].tocsr(), samples)


def ray_transform(medium, Q, geometry=None, step=5e-3, samples=None):
    """Line integrals ``int Q drho`` over every ray of ``geometry``.

    ``Q`` is a callable evaluated at the ray samples or a grid Field
    (bilinearly interpolated).  A Field is taken to vanish outside ``Omega``,
    as every weighted potential does.
    """
    geometry = fan_geometry(medium.omega_prime) if geometry is None else geometry
    samples = trace_samples(medium, geometry, step) if samples is None else samples
    if isinstance(Q, Field):
        op = build_operator(medium, Q.grid, geometry, mask=np.ones(Q.grid.sizes, dtype=bool), samples=samples)
        vals = op.apply(Q.values.ravel())
    else:
        vals = samples.integrate(np.asarray(Q(samples.x), dtype=np.complex128))
    return XRayData(geometry, vals)


# ------------------------------------------------------------- inversion


@dataclass
class CGResult:
    field: Field
    iterations: int
    residuals: list
    stopped_by: str


def invert_cg(data, operator, iterations=200, lam=1e-6, discrepancy=None, tol=1e-12):
    """Conjugate gradients on ``(A*A + lam) x = A* y``.

    Stops after ``iterations`` steps, when the normal-equation residual
    drops below ``tol`` relative to ``|A* y|``, or (if ``discrepancy`` is
    given) as soon as ``|A x - y| <= discrepancy``.

    Raises
    ------
    BreakdownError
        A search direction has non-positive curvature.
    """
    if data.geometry.size != operator.matrix.shape[0]:
        raise DomainError("data and operator have different ray counts")
    y = data.values
    x = np.zeros(operator.matrix.shape[1], dtype=np.complex128)
    r = operator.adjoint(y)
    p = r.copy()
    rr = np.vdot(r, r).real
    b = math.sqrt(rr)
    hist = [float(np.linalg.norm(y))]
    stopped = "iterations"
    k = 0
    if b == 0:
        return CGResult(operator.to_field(x), 0, hist, "zero data")
    for k in range(1, iterations + 1):
        # curvature through the adjoint, so an inconsistent pair is detected
        Np = operator.adjoint(operator.apply(p)) + lam * p
        curv = np.vdot(p, Np).real
        if not curv > 0:
            raise BreakdownError(f"non-positive curvature {curv:g} at iteration {k}")
        a = rr / curv
        x = x + a * p
        r = r - a * Np
        res = float(np.linalg.norm(operator.apply(x) - y))
        hist.append(res)
        if discrepancy is not None and res <= discrepancy:
            stopped = "discrepancy"
            break
        rr_new = np.vdot(r, r).real
        if math.sqrt(rr_new) <= tol * b:
            stopped = "tolerance"
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return CGResult(operator.to_field(x), k, hist, stopped)


# ------------------------------------------------------- weighted potential


@dataclass(eq=False)
class WeightedPotential:
    """``Q = (q1 - q2) weight exp(iJ)`` on a grid with its constituents."""

    Q: Field
    dq: Field
    weight: Field
    J: Field
    convention: str


def _as_field(q, grid):
    if isinstance(q, Field):
        return q
    return Field(grid, q(grid.points()))


def weighted_potential(medium, q1, q2, grid, chart=None, convention="geometric"):
    """Weighted potential whose ray transform the pairing exposes.

    ``geometric``: ``Q = (q1 - q2) r**(-2s) exp(iJ)``.  ``literal``:
    ``Q = (q1 - q2) exp(-2f + iJ) r**(-n)`` with ``f`` from
    :func:`~fracgo.transport.literal_log_weight`.  ``J = -int (q1-q2)/r drho``
    along rays of ``chart`` for ``s = 1/2`` and zero otherwise.
    """
    from .transport import literal_log_weight

    s = medium.s
    _gate(s)
    q1, q2 = _as_field(q1, grid), _as_field(q2, grid)
    dq = q1 - q2
    om = medium.omega.mask(grid)
    scale = float(np.max(np.abs(dq.values))) or 1.0
    if np.max(np.abs(dq.values[~om]), initial=0.0) > 1e-10 * scale:
        raise DomainError("q1 and q2 must agree outside Omega")
    r = medium.r_on(grid)
    if convention == "geometric":
        w = r ** (-2 * s)
    elif convention == "literal":
        w = np.exp(-2 * literal_log_weight(r, grid.n, s)) * r ** (-float(grid.n))
    else:
        raise DomainError(f"unknown convention {convention!r}")
    J = np.zeros(grid.sizes)
    if abs(s - 0.5) < 1e-14:
        if chart is None:
            raise DomainError("s = 1/2 needs a chart for the phase factor J")
        dqs = SampledPotential(Field(grid, dq.values.real))
        pts = grid.points()[om]
        smp = chart.sample(pts, [lambda x: dqs(x) / medium.r(x)])
        J[om] = -smp.integrals[:, 0]
    Q = dq.values * w * np.exp(1j * J)
    Q = np.where(om, Q, 0.0)
    return WeightedPotential(Field(grid, Q), dq, Field(grid, w), Field(grid, J), convention)


def unweight(wp, Qhat):
    """Map a recovered weighted potential back to ``q1 - q2``."""
    return Field(Qhat.grid, Qhat.values * np.exp(-1j * wp.J.values) / wp.weight.values)


def alessandrini_pairing(medium, q1, q2, u1, u2):
    """``int_Omega (q1 - q2) u1 conj(u2) dx`` by grid quadrature."""
    grid = u1.grid
    dq = _as_field(q1, grid).values - _as_field(q2, grid).values
    om = medium.omega.mask(grid)
    return complex(np.sum((dq * u1.values * np.conj(u2.values))[om]) * grid.cell_volume)


# --------------------------------------------------------------- stability


def alpha1(s):
    """First nonzero amplitude exponent: ``2s - 1`` for ``s > 1/2`` and 1 at ``s = 1/2``."""
    _gate(s)
    return 1.0 if abs(s - 0.5) < 1e-14 else 2 * s - 1


def optimal_tau(delta, s):
    """Frequency balancing data noise against the truncation bias: ``delta**(-1/(2s + alpha1))``."""
    if not 0 < delta < 1:
        raise DomainError("noise level must lie in (0, 1)")
    return delta ** (-1.0 / (2 * s + alpha1(s)))


def predicted_gamma(s, t_M=math.inf):
    """Hoelder exponent ``alpha1 / (4s + 2 alpha1) * t_M / (t_M + 1)``."""
    a = alpha1(s)
    if not t_M >= 1:
        raise DomainError("Sobolev order t_M must be at least 1")
    frac = 1.0 if math.isinf(t_M) else t_M / (t_M + 1)
    return a / (4 * s + 2 * a) * frac


@dataclass
class StabilityConfig:
    """Settings of the stability experiment (defaults fixed before any run)."""

    s: float = 0.75
    deltas: tuple = (1e-2, 1e-3, 1e-4, 1e-5)
    seeds: tuple = (0, 1, 2)
    t_M: float = math.inf
    grid_size: int = 64
    n_base: int = 64
    n_dir: int = 128
    lam: float = 1e-6
    iterations: int = 200
    discrepancy: float = 1.1
    step: float = 5e-3
    index: object = field(default_factory=ConstantIndex)
    q1: object = field(default_factory=lambda: GaussianPotential(1.0, 0.3, (0.15, -0.1)))
    q2: object = field(default_factory=ConstantPotential)
    jobs: int = 1


@dataclass
class StabilityReport:
    deltas: list
    taus: list
    errors: dict
    median_errors: list
    noiseless_error: float
    fitted_exponent: float
    fitted_stderr: float
    gamma_pred: float
    window: tuple
    within_window: bool
    iterations: dict
    note: str = ("noise is injected into ray data at level delta tau**(2s); "
                 "the Cauchy-data distance itself is not computed")

    def to_dict(self):
        return asdict(self)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, default=float)


def _ray_data(cfg, medium, samples, tau):
    """Pairing data per ray at frequency ``tau`` (``tau = inf``: leading order only)."""
    s = medium.s
    x = samples.x
    r = medium.r(x.reshape(-1, 2)).reshape(x.shape[:2])
    q1 = cfg.q1(x.reshape(-1, 2)).reshape(r.shape)
    q2 = cfg.q2(x.reshape(-1, 2)).reshape(r.shape)
    dq = q1 - q2
    if abs(s - 0.5) < 1e-14:
        # the J factors of both solutions combine to exp(-i int dq / r)
        K = samples.cumulative(dq / r)
        return samples.integrate(dq / r * np.exp(-1j * K))
    base = dq * r ** (-2 * s)
    if math.isinf(tau):
        return samples.integrate(base)
    W1 = -0.5j / s * samples.cumulative(q1 * r ** (-2 * s))
    W2 = -0.5j / s * samples.cumulative(q2 * r ** (-2 * s))
    e = tau ** (-alpha1(s))
    return samples.integrate(base * (1 + e * W1) * (1 + e * np.conj(W2)))


def _linearise(medium, y):
    """At ``s = 1/2`` recover ``int dq / r`` from ``i (exp(-iK) - 1)``."""
    if abs(medium.s - 0.5) < 1e-14:
        return 1j * np.log(1 - 1j * y)
    return y


def stability_experiment(cfg=None):
    """Recovery error of ``q1 - q2`` against the noise level ``delta``.

    For each ``delta`` the frequency is ``optimal_tau(delta, s)``; ray
    data carry the order ``tau**(-alpha1)`` amplitude corrections of
    both solutions plus complex Gaussian noise of standard deviation
    ``delta tau**(2s) rms(data)``.  The weighted potential is recovered
    by CG with the discrepancy stop at ``cfg.discrepancy`` times the
    expected noise norm and unweighted on ``Omega``.
    """
    cfg = StabilityConfig() if cfg is None else cfg
    s = cfg.s
    _gate(s)
    medium = Medium(cfg.index, ConstantPotential(0.0), s)
    L = 2 * medium.omega_prime.radius
    grid = Grid((cfg.grid_size, cfg.grid_size), (L, L))
    geometry = fan_geometry(medium.omega_prime, cfg.n_base, cfg.n_dir)
    samples = trace_samples(medium, geometry, cfg.step)
    op = build_operator(medium, grid, geometry, samples=samples)
    om = op.mask
    pts = grid.points()
    dq_true = (cfg.q1(pts) - cfg.q2(pts))[om]
    r2s = medium.r(pts[om]) ** (2 * s)
    norm_true = np.linalg.norm(dq_true)

    def recover(y, disc):
        y = _linearise(medium, y)
        res = invert_cg(XRayData(geometry, y), op, cfg.iterations, cfg.lam, disc)
        est = res.field.values[om] * (r2s if abs(s - 0.5) > 1e-14 else medium.r(pts[om]))
        return float(np.linalg.norm(est - dq_true) / norm_true), res.iterations

    noiseless, _ = recover(_ray_data(cfg, medium, samples, math.inf), None)

    def cell(delta):
        tau = optimal_tau(delta, s)
        d = _ray_data(cfg, medium, samples, tau)
        sigma = delta * tau ** (2 * s) * math.sqrt(np.mean(np.abs(d) ** 2))
        errs, its = [], []
        for seed in cfg.seeds:
            rng = np.random.default_rng(seed)
            noise = sigma / math.sqrt(2) * (rng.standard_normal(d.size) + 1j * rng.standard_normal(d.size))
            e, k = recover(d + noise, cfg.discrepancy * sigma * math.sqrt(d.size))
            errs.append(e)
            its.append(k)
        return tau, errs, its

    deltas = [float(d) for d in cfg.deltas]
    if cfg.jobs > 1:
        with ThreadPoolExecutor(cfg.jobs) as ex:
            cells = list(ex.map(cell, deltas))
    else:
        cells = [cell(d) for d in deltas]
    med = [float(np.median(c[1])) for c in cells]
    fit = stats.linregress(np.log10(deltas), np.log10(med))
    g = predicted_gamma(s, cfg.t_M)
    window = (0.5 * g, 1.5 * g)
    return StabilityReport(
        deltas, [c[0] for c in cells], {str(d): c[1] for d, c in zip(deltas, cells)}, med, noiseless,
        float(fit.slope), float(fit.stderr), g, window, bool(window[0] <= fit.slope <= window[1]),
        {str(d): c[2] for d, c in zip(deltas, cells)})
