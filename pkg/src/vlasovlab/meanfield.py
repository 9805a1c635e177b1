"""Regularized Vlasov-Poisson solver on a weighted quadrature-particle
representation, via the method of characteristics.

The distribution is carried by M weighted phase-space points whose weights
never change (measure pushforward); the self-consistent field is either the
exact pairwise sum of the doubly smeared kernel over the quadrature atoms
(`direct` mode, O(M^2), bit-compatible with the microscopic dynamics module
for equal weights) or a deposit-convolve-gather lattice path (`grid` mode):
atoms are deposited through one factor of chi^N onto the lattice and the
second factor rides in the tabulated single-smeared kernel chi^N * k, per
the identity k~ * rho~ = chi^N * k * chi^N * rho.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

try:
    from numba import njit, prange
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

from .dynamics import ParticleEnsemble
from .gridops import lattice_convolve, offset_lattice
from .kernels import smeared_eval
from .measures import DensityField, DiscreteMeasure, WeightedDensity

__all__ = [
    "GridSpec",
    "MeanfieldTrajectory",
    "SupportDiagnostics",
    "SupportOverflowError",
    "discretize",
    "deposit",
    "field_force",
    "evolve",
    "support_diagnostics",
    "density_bound_monitor",
    "from_ensemble",
    "to_ensemble",
]


class SupportOverflowError(RuntimeError):
    def __init__(self, point):
        self.point = np.asarray(point)
        super().__init__(
            f"smeared support of point {self.point.tolist()} overflows the grid")


@dataclass(frozen=True)
class GridSpec:
    """Regular lattice: cell (i, ...) has center origin + (i + 1/2) h."""

    origin: np.ndarray
    shape: tuple
    h: float

    def __post_init__(self):
        object.__setattr__(self, "origin",
                           np.asarray(self.origin, dtype=float).ravel())
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))

    @classmethod
    def centered(cls, half_extent, n, d):
        h = 2.0 * half_extent / n
        return cls(origin=np.full(d, -half_extent), shape=(n,) * d, h=h)

    @property
    def d(self):
        return len(self.shape)

    def enlarged(self, factor=1.5):
        """Same cell size, extents grown symmetrically by the factor."""
        center = self.origin + 0.5 * self.h * np.asarray(self.shape)
        new_shape = tuple(int(math.ceil(n * factor)) for n in self.shape)
        new_origin = center - 0.5 * self.h * np.asarray(new_shape)
        return GridSpec(origin=new_origin, shape=new_shape, h=self.h)


def from_ensemble(ensemble):
    """Empirical measure of a microscopic state: N equal-weight atoms."""
    return WeightedDensity(points=ensemble.phase_points(),
                           weights=np.full(ensemble.n, 1.0 / ensemble.n),
                           d=ensemble.d)


def to_ensemble(density):
    if not np.allclose(density.weights, density.weights[0], rtol=1e-12):
        raise ValueError("only equal-weight densities convert to an ensemble")
    return ParticleEnsemble(density.q, density.p)


# ---------------------------------------------------------------------------
# discretization of an analytic initial condition

def discretize(profile, m, mode="grid-quadrature", seed=0, box_pad=1.0):
    """Quadrature representation of f0 with ~m points.

    grid-quadrature: midpoint lattice over the support box, weights
    proportional to f0 and renormalized; zero-weight nodes are dropped, so
    the returned count is at most m.  iid-sample: m equal-weight draws from
    the profile sampler under a seeded counter-based generator.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    d = profile.d
    if mode == "iid-sample":
        rng = np.random.Generator(np.random.Philox(key=seed))
        q, p = profile.sample(rng, m)
        pts = np.concatenate([q, p], axis=1)
        return WeightedDensity(points=pts, weights=np.full(m, 1.0 / m), d=d)
    if mode != "grid-quadrature":
        raise ValueError(f"unknown discretization mode {mode!r}")
    per_axis = max(2, int(round(m ** (1.0 / (2 * d)))))
    axes = []
    for extent in [profile.q_support * box_pad] * d + [profile.p_support * box_pad] * d:
        h = 2.0 * extent / per_axis
        axes.append(-extent + (np.arange(per_axis) + 0.5) * h)
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    vals = profile.pdf(pts[:, :d], pts[:, d:])
    keep = vals > 0.0
    if not np.any(keep):
        raise ValueError("support box carries no mass; mis-specified profile?")
    pts, vals = pts[keep], vals[keep]
    return WeightedDensity(points=pts, weights=vals / vals.sum(), d=d)


# ---------------------------------------------------------------------------
# charge deposition through chi^N

if HAVE_NUMBA:

    @njit(cache=True)
    def _deposit_2d(qs, weights, grid, x0, y0, h, nx, ny, hw, sub,
                    r, plateau, edge, scale):
        # serial accumulation: deterministic regardless of thread count
        inv_r = 1.0 / r
        nsub = sub * sub
        cell = np.empty((2 * hw + 1, 2 * hw + 1))
        for ipt in range(qs.shape[0]):
            qx = qs[ipt, 0]
            qy = qs[ipt, 1]
            ix0 = int(np.floor((qx - x0) / h))
            iy0 = int(np.floor((qy - y0) / h))
            total = 0.0
            for a in range(2 * hw + 1):
                ix = ix0 - hw + a
                for b in range(2 * hw + 1):
                    iy = iy0 - hw + b
                    acc = 0.0
                    for sa in range(sub):
                        px = x0 + (ix + (sa + 0.5) / sub) * h - qx
                        for sb in range(sub):
                            py = y0 + (iy + (sb + 0.5) / sub) * h - qy
                            s = np.sqrt(px * px + py * py) * inv_r
                            if s <= plateau:
                                acc += 1.0
                            elif s < edge:
                                t = (s - plateau) / (edge - plateau)
                                acc += np.exp(1.0 - 1.0 / (1.0 - t * t))
                    cell[a, b] = acc / nsub
                    total += acc / nsub
            if total <= 0.0:
                return ipt
            norm = weights[ipt] / (total * h * h) * scale
            for a in range(2 * hw + 1):
                ix = ix0 - hw + a
                for b in range(2 * hw + 1):
                    iy = iy0 - hw + b
                    v = cell[a, b]
                    if v != 0.0:
                        if ix < 0 or ix >= nx or iy < 0 or iy >= ny:
                            return ipt
                        grid[ix, iy] += v * norm
        return -1


def _deposit_numpy(points, weights, grid, spec, ff, supersample, scale):
    d = spec.d
    h = spec.h
    a = ff.support_radius
    hw = int(math.ceil(a / h)) + 1
    offs = np.arange(-hw, hw + 1)
    stencil = np.stack(np.meshgrid(*([offs] * d), indexing="ij"),
                       axis=-1).reshape(-1, d)
    subs = (np.stack(np.meshgrid(
        *([np.arange(supersample)] * d), indexing="ij"),
        axis=-1).reshape(-1, d) + 0.5) / supersample
    base = np.floor((points - spec.origin) / h).astype(np.int64)
    chunk = max(1, int(2e6) // (len(stencil) * len(subs)))
    for lo in range(0, len(points), chunk):
        pts = points[lo:lo + chunk]
        idx = base[lo:lo + chunk][:, None, :] + stencil[None, :, :]
        centers = spec.origin + (idx[:, :, None, :] + subs[None, None, :, :]) * h
        dist = np.linalg.norm(centers - pts[:, None, None, :], axis=-1)
        avg = ff(dist.ravel()).reshape(dist.shape).mean(axis=2)
        total = avg.sum(axis=1)
        if np.any(total <= 0.0):
            raise SupportOverflowError(pts[np.argmax(total <= 0.0)])
        out_of_bounds = ((idx < 0) | (idx >= np.array(spec.shape))).any(axis=2)
        if np.any(out_of_bounds & (avg > 0.0)):
            bad = np.argmax((out_of_bounds & (avg > 0.0)).any(axis=1))
            raise SupportOverflowError(pts[bad])
        norm = weights[lo:lo + chunk] / (total * spec.h ** d) * scale
        vals = avg * norm[:, None]
        flat = np.ravel_multi_index(
            np.clip(idx, 0, np.array(spec.shape) - 1).reshape(-1, d).T,
            spec.shape)
        np.add.at(grid.ravel(), flat, vals.ravel())


def deposit(density, ff, spec, supersample=4):
    """Deposit each atom's weight through chi^N onto the lattice.

    density: WeightedDensity (spatial part used) or DiscreteMeasure of
    spatial points; ff=None bins raw atoms to their cells instead (used by
    the alternative kernel factoring).  Cell averages use supersample^d
    midpoints per cell and each stencil is renormalized, so the field
    integrates to the total weight exactly.
    """
    if isinstance(density, WeightedDensity):
        points, weights = density.q, density.weights
    elif isinstance(density, DiscreteMeasure):
        points, weights = density.points, density.weights
    else:
        points, weights = density
        points = np.atleast_2d(np.asarray(points, dtype=float))
        weights = np.asarray(weights, dtype=float).ravel()
    d = spec.d
    if points.shape[1] != d:
        raise ValueError("spatial dimension mismatch with grid")
    grid = np.zeros(spec.shape)
    if ff is None:
        idx = np.floor((points - spec.origin) / spec.h).astype(np.int64)
        if np.any(idx < 0) or np.any(idx >= np.array(spec.shape)):
            bad = ((idx < 0) | (idx >= np.array(spec.shape))).any(axis=1)
            raise SupportOverflowError(points[np.argmax(bad)])
        np.add.at(grid.ravel(),
                  np.ravel_multi_index(idx.T, spec.shape),
                  weights / spec.h ** d)
        return DensityField(values=grid, origin=spec.origin, h=spec.h)
    if HAVE_NUMBA and d == 2 and supersample >= 1:
        hw = int(math.ceil(ff.support_radius / spec.h)) + 1
        bad = _deposit_2d(
            np.ascontiguousarray(points), np.ascontiguousarray(weights),
            grid, spec.origin[0], spec.origin[1], spec.h,
            spec.shape[0], spec.shape[1], hw, int(supersample),
            ff.r, ff.base.plateau, ff.base.edge, 1.0)
        if bad >= 0:
            raise SupportOverflowError(points[bad])
    else:
        _deposit_numpy(points, weights, grid, spec, ff, supersample, 1.0)
    return DensityField(values=grid, origin=spec.origin, h=spec.h)


# ---------------------------------------------------------------------------
# field evaluation

def _kernel_slab(kern, spec):
    offsets = offset_lattice(spec.shape, spec.h)
    s = np.sqrt((offsets * offsets).sum(axis=-1))
    g = np.zeros_like(s)
    pos = s > 0.0
    g[pos] = kern.g(s[pos])
    unit = np.zeros_like(offsets)
    unit[pos] = offsets[pos] / s[pos][..., None]
    return kern.sigma * g[..., None] * unit


def field_force(field, kern, query_points=None, path="fft"):
    """Force field of the deposited density under the tabulated kernel.

    path='fft': lattice convolution, bilinearly interpolated to the query
    points (or returned on the lattice when query_points is None).
    path='direct': per-query sum of the tabulated kernel against all cell
    masses (near field from the table, far field exact Coulomb); identical
    discretization, so the two paths agree to FFT roundoff.
    """
    spec = GridSpec(origin=field.origin, shape=field.values.shape, h=field.h)
    masses = field.values * field.cell_volume
    if path == "direct":
        if query_points is None:
            query_points = spec.origin + 0.5 * spec.h \
                + np.stack(np.meshgrid(
                    *[np.arange(n) for n in spec.shape], indexing="ij"),
                    axis=-1).reshape(-1, spec.d) * spec.h
        centers = spec.origin + 0.5 * spec.h + np.stack(np.meshgrid(
            *[np.arange(n) for n in spec.shape], indexing="ij"),
            axis=-1).reshape(-1, spec.d) * spec.h
        m = masses.ravel()
        live = m != 0.0
        centers, m = centers[live], m[live]
        out = np.zeros((len(query_points), spec.d))
        chunk = max(1, int(4e6) // max(len(centers), 1))
        for lo in range(0, len(query_points), chunk):
            dq = query_points[lo:lo + chunk][:, None, :] - centers[None, :, :]
            vals = smeared_eval(kern, dq.reshape(-1, spec.d)).reshape(dq.shape)
            out[lo:lo + chunk] = (vals * m[None, :, None]).sum(axis=1)
        return out
    if path != "fft":
        raise ValueError(f"unknown field path {path!r}")
    slab = _kernel_slab(kern, spec)
    force = lattice_convolve(slab, masses)
    if query_points is None:
        return force
    return _gather(force, spec, np.atleast_2d(query_points))


def _gather(force, spec, points):
    """Bilinear interpolation of a lattice vector field to points."""
    d = spec.d
    x = (points - spec.origin) / spec.h - 0.5
    i0 = np.floor(x).astype(np.int64)
    frac = x - i0
    out = np.zeros((len(points), force.shape[-1]))
    for corner in np.ndindex(*([2] * d)):
        idx = i0 + np.array(corner)
        np.clip(idx, 0, np.array(spec.shape) - 1, out=idx)
        w = np.ones(len(points))
        for k in range(d):
            w = w * (frac[:, k] if corner[k] else 1.0 - frac[:, k])
        out += w[:, None] * force[tuple(idx.T)]
    return out


# ---------------------------------------------------------------------------
# characteristic-flow evolution

@dataclass(frozen=True)
class MeanfieldTrajectory:
    times: list
    states: list           # WeightedDensity per recorded time
    tracers: list          # equal-weight passive sample arrays, or None
    mode: str
    dt: float
    grid: GridSpec = None

    def state_at(self, t):
        idx = int(np.argmin(np.abs(np.asarray(self.times) - t)))
        return self.states[idx]

    def tracers_at(self, t):
        idx = int(np.argmin(np.abs(np.asarray(self.times) - t)))
        return self.tracers[idx]


def _direct_weighted_forces(q_src, w_src, kern, q_eval):
    out = np.zeros_like(q_eval)
    d = q_eval.shape[1]
    chunk = max(1, int(4e6) // max(len(q_src), 1))
    for lo in range(0, len(q_eval), chunk):
        dq = q_eval[lo:lo + chunk][:, None, :] - q_src[None, :, :]
        vals = smeared_eval(kern, dq.reshape(-1, d)).reshape(dq.shape)
        out[lo:lo + chunk] = (vals * w_src[None, :, None]).sum(axis=1)
    return out


if HAVE_NUMBA:

    @njit(parallel=True, cache=True)
    def _weighted_forces_jit(q_src, w_src, q_eval, d, sigma, r, cut2,
                             coeffs, h_unit, n_nodes, out):
        n_eval = q_eval.shape[0]
        n_src = q_src.shape[0]
        inv_h = 1.0 / h_unit
        scale = r ** (1 - d)
        for i in prange(n_eval):
            acc0 = 0.0
            acc1 = 0.0
            acc2 = 0.0
            for j in range(n_src):
                dx0 = q_eval[i, 0] - q_src[j, 0]
                dx1 = q_eval[i, 1] - q_src[j, 1]
                dx2 = q_eval[i, 2] - q_src[j, 2] if d == 3 else 0.0
                s2 = dx0 * dx0 + dx1 * dx1 + dx2 * dx2
                if s2 == 0.0:
                    continue
                if s2 >= cut2:
                    if d == 2:
                        w = sigma / s2
                    else:
                        w = sigma / (s2 * np.sqrt(s2))
                else:
                    s = np.sqrt(s2)
                    x = s / r
                    idx = int(x * inv_h)
                    if idx > n_nodes - 2:
                        idx = n_nodes - 2
                    t = x - idx * h_unit
                    g = ((coeffs[0, idx] * t + coeffs[1, idx]) * t
                         + coeffs[2, idx]) * t + coeffs[3, idx]
                    w = sigma * g * scale / s
                wj = w * w_src[j]
                acc0 += wj * dx0
                acc1 += wj * dx1
                acc2 += wj * dx2
            out[i, 0] = acc0
            out[i, 1] = acc1
            if d == 3:
                out[i, 2] = acc2


def _weighted_forces(q_src, w_src, kern, q_eval):
    d = q_eval.shape[1]
    if HAVE_NUMBA:
        pad = lambda a: np.ascontiguousarray(a) if d == 3 else \
            np.ascontiguousarray(np.concatenate(
                [a, np.zeros((len(a), 1))], axis=1))
        coeffs, _, n_nodes = kern.spline_coefficients()
        h_unit = float(kern.s_nodes[1] - kern.s_nodes[0])
        out = np.empty((len(q_eval), 3))
        _weighted_forces_jit(pad(q_src), np.ascontiguousarray(w_src),
                             pad(q_eval), d, float(kern.sigma),
                             float(kern.r), float(kern.cut) ** 2,
                             coeffs, h_unit, n_nodes, out)
        return np.ascontiguousarray(out[:, :d])
    return _direct_weighted_forces(q_src, w_src, kern, q_eval)


class _FieldSolver:
    """Per-step self-consistent field evaluation for both force modes."""

    def __init__(self, kern_double, kern_single, ff, mode, grid,
                 supersample=4):
        self.kern_double = kern_double
        self.kern_single = kern_single
        self.ff = ff
        self.mode = mode
        self.grid = grid
        self.supersample = supersample

    def forces(self, q_src, w_src, q_eval):
        if self.mode == "direct":
            return _weighted_forces(q_src, w_src, self.kern_double, q_eval)
        for attempt in range(4):
            try:
                field = deposit((q_src, w_src), self.ff, self.grid,
                                supersample=self.supersample)
            except SupportOverflowError:
                if attempt == 3:
                    raise
                self.grid = self.grid.enlarged()
                continue
            break
        slab_force = field_force(field, self.kern_single, path="fft")
        spec = self.grid
        return _gather(slab_force, spec, q_eval)


def evolve(density, ff, kern, cfg, mode="direct", grid=None, kern_single=None,
           tracers=None, supersample=4):
    """Advance the quadrature representation along the characteristic flow.

    kern is the doubly smeared kernel (used verbatim in direct mode); grid
    mode needs kern_single = chi^N * k so that exactly two smearing factors
    act in total.  Weights are constant in time.  tracers, if given, are
    passive phase-space points advanced in the same field (zero weight).
    """
    d = density.d
    if mode not in ("direct", "grid"):
        raise ValueError(f"unknown force mode {mode!r}")
    if mode == "grid":
        if kern_single is None:
            raise ValueError("grid mode needs the single-smeared kernel")
        if grid is None:
            half = 3.0 * float(np.abs(density.q).max() + ff.r)
            grid = GridSpec.centered(half, 128, d)
    solver = _FieldSolver(kern, kern_single, ff, mode, grid,
                          supersample=supersample)
    q = density.q.copy()
    p = density.p.copy()
    w = density.weights
    trc_q = trc_p = None
    if tracers is not None:
        trc_q = np.array(tracers[:, :d], dtype=float)
        trc_p = np.array(tracers[:, d:], dtype=float)

    def all_eval():
        return q if trc_q is None else np.concatenate([q, trc_q])

    times = [0.0]
    states = [WeightedDensity(np.concatenate([q, p], axis=1), w, d=d)]
    tr_hist = [None if trc_q is None else np.concatenate([trc_q, trc_p], axis=1)]
    forces = solver.forces(q, w, all_eval())
    n_steps = cfg.n_steps
    for k in range(1, n_steps + 1):
        f_src = forces[:len(q)]
        p_half = p + 0.5 * cfg.dt * f_src
        if trc_q is not None:
            tp_half = trc_p + 0.5 * cfg.dt * forces[len(q):]
            trc_q = trc_q + cfg.dt * tp_half
        q = q + cfg.dt * p_half
        forces = solver.forces(q, w, all_eval())
        p = p_half + 0.5 * cfg.dt * forces[:len(q)]
        if trc_q is not None:
            trc_p = tp_half + 0.5 * cfg.dt * forces[len(q):]
        if k % cfg.record_stride == 0 or k == n_steps:
            times.append(k * cfg.dt)
            states.append(WeightedDensity(np.concatenate([q, p], axis=1), w, d=d))
            tr_hist.append(None if trc_q is None
                           else np.concatenate([trc_q, trc_p], axis=1))
    return MeanfieldTrajectory(times=times, states=states,
                               tracers=None if trc_q is None else tr_hist,
                               mode=mode, dt=cfg.dt, grid=solver.grid)


# ---------------------------------------------------------------------------
# diagnostics

@dataclass(frozen=True)
class SupportDiagnostics:
    times: np.ndarray
    d_series: np.ndarray     # max position norm per snapshot
    r_series: np.ndarray     # max momentum norm per snapshot

    def position_inequality_slack(self):
        """D(t) - [D(0) + int_0^t R] per snapshot (trapezoid in time);
        nonpositive where the transport estimate holds."""
        integral = np.concatenate([
            [0.0], np.cumsum(0.5 * (self.r_series[1:] + self.r_series[:-1])
                             * np.diff(self.times))])
        return self.d_series - (self.d_series[0] + integral)

    def fitted_momentum_constant(self, f_inf, f_1, d):
        """Least C with R(t) <= R(0) + C ||f0||_inf ||f0||_1^(1/d)
        int_0^t R^(d-1) for all recorded t."""
        integrand = self.r_series ** (d - 1)
        integral = np.concatenate([
            [0.0], np.cumsum(0.5 * (integrand[1:] + integrand[:-1])
                             * np.diff(self.times))])
        scale = f_inf * f_1 ** (1.0 / d)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = (self.r_series - self.r_series[0]) / (scale * integral)
        ratio = ratio[np.isfinite(ratio) & (integral > 0)]
        return float(max(ratio.max(), 0.0)) if len(ratio) else 0.0


def support_diagnostics(trajectory, profile=None):
    """Support diameters D(t), R(t) and the transport-inequality report."""
    if not trajectory.states:
        raise ValueError("empty trajectory")
    times = np.asarray(trajectory.times)
    d_series = np.array([np.linalg.norm(st.q, axis=1).max()
                         for st in trajectory.states])
    r_series = np.array([np.linalg.norm(st.p, axis=1).max()
                         for st in trajectory.states])
    diag = SupportDiagnostics(times=times, d_series=d_series, r_series=r_series)
    report = {
        "position_slack_max": float(diag.position_inequality_slack().max()),
        "momentum_nondecreasing": bool(np.all(np.diff(r_series) >= -1e-12)),
    }
    if profile is not None:
        report["fitted_C"] = diag.fitted_momentum_constant(
            profile.f_inf, profile.f_1, trajectory.states[0].d)
    return diag, report


def density_bound_monitor(trajectory, ff, grid=None, c0=None, supersample=4):
    """Time series of ||rho~[f^N_t]||_inf over the recorded snapshots."""
    series = []
    for st in trajectory.states:
        spec = grid
        if spec is None:
            half = float(np.abs(st.q).max() + ff.r) * 1.05
            spec = GridSpec.centered(half, 96, st.d)
        for attempt in range(4):
            try:
                field = deposit(st, ff, spec, supersample=supersample)
                break
            except SupportOverflowError:
                if attempt == 3:
                    raise
                spec = spec.enlarged()
        series.append(field.max_value)
    out = {"times": list(trajectory.times), "rho_inf": series}
    if c0 is not None:
        out["c0"] = float(c0)
        out["violations"] = [t for t, v in zip(trajectory.times, series)
                             if v > c0]
    return out
