"""Reproducible experiments: convergence sweeps over N with r_N = N^-delta,
Gronwall-envelope fitting, the regularization limit, and concentration tails.

Estimator conventions (recorded in every output):

* Sweep distances W_2(mu^N_t, f^N_t) are measured by exact assignment
  between the N-particle empirical measure and an N-point i.i.d. subsample
  of the reference tracer cloud, divided by sqrt(2).  The two-sample
  distance concentrates at sqrt(2) times the one-sample distance (the two
  independent empirical errors add in quadrature), so the correction makes
  the estimator comparable to W_2(mu, f) while keeping the solver exact;
  the raw value and method tag ride along in the record.

* Concentration tails use the entropic bracket midpoint against one fixed
  fine quadrature of f0 (debias off; epsilon recorded).

Each (N, replica) cell owns a counter-based Philox stream keyed by
(seed, replica), so results are bit-reproducible for a fixed spec
regardless of scheduling.
"""

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import (IntegratorConfig, MemorySink, ParticleEnsemble,
                       run as run_dynamics, total_energy)
from .formfactor import RescalingRule, build_form_factor
from .kernels import CoulombKernel, build_smeared_kernel
from .measures import DiscreteMeasure, WeightedDensity
from .meanfield import (GridSpec, deposit, discretize, evolve, from_ensemble)
from .profiles import make_profile
from .transport import (GroundMetric, RenormalizedDistance,
                        wasserstein_entropic, wasserstein_exact)

__all__ = [
    "SweepSpec",
    "RunRecord",
    "ConcentrationRecord",
    "sample_initial",
    "convergence_sweep",
    "gronwall_fit",
    "regularization_limit",
    "concentration_experiment",
    "typicality_endtoend",
    "pava_nonincreasing",
    "pava_nondecreasing",
    "records_to_csv",
    "reference_cache_dir",
]

SUBSAMPLE_CORRECTION = np.sqrt(2.0)


@dataclass(frozen=True)
class SweepSpec:
    n_values: tuple
    eps: float = 0.1
    d: int = 2
    sigma: int = 1
    profile: str = "uniform_ball"
    profile_params: dict = field(default_factory=dict)
    t_end: float = 1.0
    dt: float = None              # None: guard dt = 0.1 r / p_support
    replicas: int = 20
    seed: int = 0
    quadrature_ratio: int = 16    # reference quadrature points per N_max
    tracer_count: int = 16384
    record_times: int = 3
    t_star_guard: float = 8.0
    delta: float = None           # None: theorem formula from (d, eps)

    def __post_init__(self):
        n = tuple(int(v) for v in self.n_values)
        if any(b <= a for a, b in zip(n, n[1:])):
            raise ValueError("N values must be strictly increasing")
        if self.replicas < 1:
            raise ValueError("replicas must be >= 1")
        if not self.t_end < self.t_star_guard:
            raise ValueError("t_end must stay below the T* guard")
        object.__setattr__(self, "n_values", n)

    @property
    def rule(self):
        if self.delta is not None:
            return RescalingRule(delta=self.delta, eps=self.eps)
        return RescalingRule.from_theorem(self.d, self.eps)

    def radius(self, n):
        return float(self.rule.radius(n))

    def build_profile(self):
        return make_profile(self.profile, d=self.d, **self.profile_params)

    def key(self):
        payload = asdict(self)
        return json.dumps(payload, sort_keys=True)


@dataclass
class RunRecord:
    n: int
    replica: int
    r: float
    times: list
    w2: list                  # corrected subsample estimates of W2(mu_t, f_t)
    w2_raw: list              # uncorrected two-sample assignment values
    wn2: list
    wstar: list
    rho_inf: list
    energy_drift: list
    wall_time: float
    initial_event: bool
    initial_threshold: float
    status: str = "ok"
    method: str = "two_sample_assignment_sqrt2"

    def to_row(self):
        return {
            "n": self.n, "replica": self.replica, "r": self.r,
            "times": self.times, "w2": self.w2, "wn2": self.wn2,
            "wstar": self.wstar, "rho_inf": self.rho_inf,
            "energy_drift": self.energy_drift,
            "initial_event": self.initial_event,
            "initial_threshold": self.initial_threshold,
            "status": self.status, "wall_time": self.wall_time,
        }


@dataclass
class ConcentrationRecord:
    n: int
    xi: float
    tail_probability: float
    exceedances: int
    replicas: int
    reliable: bool
    envelope: float = None

    def to_row(self):
        return {"n": self.n, "xi": self.xi,
                "tail_probability": self.tail_probability,
                "exceedances": self.exceedances, "replicas": self.replicas,
                "reliable": self.reliable, "envelope": self.envelope}


# ---------------------------------------------------------------------------
# sampling and shared infrastructure

def _stream(seed, replica):
    return np.random.Generator(np.random.Philox(key=(int(seed) << 64)
                                                + int(replica)))


def sample_initial(profile, n, seed, replica=0):
    """n i.i.d. phase-space draws under the counter-based stream (seed, replica)."""
    return profile.sample_ensemble(_stream(seed, replica), n)


def pava_nonincreasing(values):
    """Pool-adjacent-violators projection onto non-increasing sequences."""
    return -pava_nondecreasing([-v for v in values])


def pava_nondecreasing(values):
    vals = [float(v) for v in values]
    weights = [1.0] * len(vals)
    blocks = []
    for v, w in zip(vals, weights):
        blocks.append([v, w])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            v2, w2 = blocks.pop()
            v1, w1 = blocks.pop()
            blocks.append([(v1 * w1 + v2 * w2) / (w1 + w2), w1 + w2])
    out = []
    for v, w in blocks:
        out.extend([v] * int(round(w)))
    return np.array(out)


def reference_cache_dir(explicit=None):
    path = explicit or os.environ.get("MEANFIELD_CACHE_DIR")
    if path:
        os.makedirs(path, exist_ok=True)
    return path


def _discretize_at_least(profile, target, seed=0):
    """Grid quadrature keeping at least `target` points (zeros are dropped,
    so the lattice is refined until enough survive)."""
    per_axis = max(2, int(round((1.2 * target) ** (1.0 / (2 * profile.d)))))
    while True:
        wd = discretize(profile, per_axis ** (2 * profile.d),
                        mode="grid-quadrature")
        if wd.m >= target:
            return wd
        per_axis += 1


def _round_config(t_end, dt_guard, record_times):
    """Integer-step configuration hitting `record_times` uniformly spaced
    snapshots (including endpoints) exactly."""
    segments = max(record_times - 1, 1)
    per_segment = max(1, math.ceil(t_end / (segments * dt_guard)))
    n_steps = segments * per_segment
    return IntegratorConfig(dt=t_end / n_steps, t_end=t_end,
                            record_stride=per_segment)


class ReferenceSolution:
    """Evolved mean-field reference at one cut-off radius: quadrature atoms
    drive the field, an i.i.d. tracer cloud rides along for distance
    measurements."""

    def __init__(self, times, tracer_states, quad_states, r, meta):
        self.times = list(times)
        self.tracer_states = tracer_states
        self.quad_states = quad_states
        self.r = r
        self.meta = meta

    def tracers_at(self, t):
        idx = int(np.argmin(np.abs(np.asarray(self.times) - t)))
        return self.tracer_states[idx]

    def save(self, path):
        np.savez_compressed(
            path, times=np.asarray(self.times),
            tracers=np.asarray(self.tracer_states),
            r=self.r, meta=json.dumps(self.meta))

    @classmethod
    def load(cls, path):
        data = np.load(path, allow_pickle=False)
        return cls(times=data["times"].tolist(),
                   tracer_states=list(data["tracers"]),
                   quad_states=None, r=float(data["r"]),
                   meta=json.loads(str(data["meta"])))


def build_reference(spec, r, cache_dir=None, force_mode=None):
    """Mean-field reference run at cut-off r (cached on disk when a cache
    directory is available)."""
    profile = spec.build_profile()
    m_quad = spec.quadrature_ratio * max(spec.n_values)
    meta = {"spec": spec.key(), "r": round(r, 12), "m_quad": m_quad}
    cache = reference_cache_dir(cache_dir)
    fname = None
    if cache:
        import hashlib
        digest = hashlib.sha256(json.dumps(meta, sort_keys=True).encode())
        fname = os.path.join(cache, f"ref_{digest.hexdigest()[:20]}.npz")
        if os.path.exists(fname):
            return ReferenceSolution.load(fname)
    ff_base = build_form_factor(spec.d)
    ff = ff_base.rescale(r)
    cfg_k = CoulombKernel(d=spec.d, sigma=spec.sigma)
    kern2 = build_smeared_kernel(cfg_k, ff, smear=2)
    kern1 = build_smeared_kernel(cfg_k, ff, smear=1)
    quad = _discretize_at_least(profile, m_quad)
    tracers = np.concatenate(profile.sample(
        _stream(spec.seed, 0xFFFFFFFF), spec.tracer_count), axis=1)
    dt_guard = spec.dt or 0.1 * r / max(profile.p_support, 1e-2)
    cfg = _round_config(spec.t_end, dt_guard, spec.record_times)
    mode = force_mode or ("direct" if quad.m <= 4096 else "grid")
    grid = None
    if mode == "grid":
        half = 3.0 * (profile.q_support + r)
        grid = GridSpec.centered(half, 128, spec.d)
    traj = evolve(quad, ff, kern2, cfg, mode=mode, grid=grid,
                  kern_single=kern1, tracers=tracers)
    ref = ReferenceSolution(times=traj.times,
                            tracer_states=[t.copy() for t in traj.tracers],
                            quad_states=traj.states, r=r, meta=meta)
    if fname:
        ref.save(fname)
    return ref


# ---------------------------------------------------------------------------
# convergence sweep

def _distance_bundle(ensemble, tracer_state, n, d, r):
    """Corrected subsample distances (W2, WN2, W*) between the empirical
    measure and the reference tracers."""
    mu = DiscreteMeasure.uniform(ensemble.phase_points())
    ref = DiscreteMeasure.uniform(tracer_state[:n])
    w2_raw, _ = wasserstein_exact(mu, ref, p=2)
    w2 = w2_raw / SUBSAMPLE_CORRECTION
    metric = GroundMetric.for_cutoff(r, d)
    if metric.w_q == 1.0:
        wn2 = w2
    else:
        wn2_raw, _ = wasserstein_exact(mu, ref, p=2, metric=metric)
        wn2 = wn2_raw / SUBSAMPLE_CORRECTION
    wstar = min(1.0, r ** -(1.0 + d / 2.0) * wn2)
    return w2_raw, w2, wn2, wstar


def _run_cell(spec, profile, kern2, ff, reference, n, replica):
    t0 = time.perf_counter()
    r = reference.r
    ens = sample_initial(profile, n, spec.seed, replica)
    dt_guard = spec.dt or 0.1 * r / max(profile.p_support, 1e-2)
    cfg = _round_config(spec.t_end, dt_guard, spec.record_times)
    sink = run_dynamics(ens, kern2, cfg)
    times, w2s, w2_raws, wn2s, wstars = [], [], [], [], []
    rho_series, drift_series = [], []
    e0 = None
    for t, (q, p) in zip(sink.times, sink.snapshots):
        state = ParticleEnsemble(q, p)
        w2_raw, w2, wn2, wstar = _distance_bundle(
            state, reference.tracers_at(t), n, spec.d, r)
        times.append(float(t))
        w2_raws.append(w2_raw)
        w2s.append(w2)
        wn2s.append(wn2)
        wstars.append(wstar)
        half = float(np.abs(q).max()) + r * 1.1
        field = deposit((q, np.full(n, 1.0 / n)), ff,
                        GridSpec.centered(half, 64, spec.d))
        rho_series.append(field.max_value)
        rep = total_energy(state, kern2)
        if e0 is None:
            e0 = rep.total
        drift_series.append(abs(rep.total - e0) / max(abs(e0), 1e-300))
    threshold = r ** (1.0 + spec.d / 2.0 + spec.eps)
    return RunRecord(
        n=n, replica=replica, r=r, times=times, w2=w2s, w2_raw=w2_raws,
        wn2=wn2s, wstar=wstars, rho_inf=rho_series,
        energy_drift=drift_series, wall_time=time.perf_counter() - t0,
        initial_event=bool(w2s[0] <= threshold),
        initial_threshold=threshold)


_SWEEP_CTX = {}


def _sweep_cell_task(args):
    n, rep = args
    spec = _SWEEP_CTX["spec"]
    r = spec.radius(n)
    kern2, ff = _SWEEP_CTX["kernels"][r]
    try:
        return _run_cell(spec, _SWEEP_CTX["profile"], kern2, ff,
                         _SWEEP_CTX["references"][r], n, rep)
    except Exception as exc:  # cell-level failure: record and continue
        return RunRecord(
            n=n, replica=rep, r=r, times=[], w2=[], w2_raw=[], wn2=[],
            wstar=[], rho_inf=[], energy_drift=[], wall_time=0.0,
            initial_event=False, initial_threshold=float("nan"),
            status=f"failed: {exc}")


def convergence_sweep(spec, cache_dir=None, threads=1, progress=None):
    """Run the full (N x replica) sweep; failures are recorded per cell and
    the sweep continues.  threads > 1 forks workers over the cells (each
    cell owns its RNG stream, so results are scheduling-independent)."""
    profile = spec.build_profile()
    ff_base = build_form_factor(spec.d)
    references = {}
    kernels = {}
    for n in spec.n_values:
        r = spec.radius(n)
        if r not in references:
            references[r] = build_reference(spec, r, cache_dir=cache_dir)
            ff = ff_base.rescale(r)
            kernels[r] = (build_smeared_kernel(
                CoulombKernel(d=spec.d, sigma=spec.sigma), ff, smear=2), ff)
    _SWEEP_CTX.update(spec=spec, profile=profile, references=references,
                      kernels=kernels)
    cells = [(n, rep) for n in spec.n_values for rep in range(spec.replicas)]
    if threads > 1:
        import multiprocessing as mp
        with mp.get_context("fork").Pool(threads) as pool:
            records = []
            for rec in pool.imap(_sweep_cell_task, cells):
                records.append(rec)
                if progress:
                    progress(len(records), len(cells))
    else:
        records = []
        for cell in cells:
            records.append(_sweep_cell_task(cell))
            if progress:
                progress(len(records), len(cells))
    records.sort(key=lambda rec: (rec.n, rec.replica))
    return records


def sweep_summary(records):
    """Per-N medians of sup_t W2 and the trend/typicality statistics."""
    by_n = {}
    for rec in records:
        if rec.status == "ok":
            by_n.setdefault(rec.n, []).append(rec)
    ns = sorted(by_n)
    med_sup = [float(np.median([max(r.w2) for r in by_n[n]])) for n in ns]
    event_fraction = [float(np.mean([r.initial_event for r in by_n[n]]))
                      for n in ns]
    return {
        "n_values": ns,
        "median_sup_w2": med_sup,
        "strictly_decreasing": bool(all(a > b for a, b
                                        in zip(med_sup, med_sup[1:]))),
        "initial_event_fraction": event_fraction,
        "event_fraction_net_increase":
            bool(event_fraction[-1] >= event_fraction[0]) if ns else True,
    }


# ---------------------------------------------------------------------------
# Gronwall envelope fit

def gronwall_fit(records):
    """Per-run minimal C1 with W*(t) <= W*(0) exp(t C1 (sqrt|log r| + 1)),
    plus per-N medians and the cross-N stability ratio."""
    fits = []
    skipped = 0
    for rec in records:
        if rec.status != "ok" or not rec.wstar:
            continue
        w0 = rec.wstar[0]
        if w0 <= 0.0:
            skipped += 1
            continue
        scale = np.sqrt(abs(np.log(rec.r))) + 1.0
        c1 = 0.0
        for t, w in zip(rec.times[1:], rec.wstar[1:]):
            if w > 0 and t > 0:
                c1 = max(c1, np.log(w / w0) / (t * scale))
        fits.append({"n": rec.n, "replica": rec.replica, "c1": max(c1, 0.0)})
    by_n = {}
    for f in fits:
        by_n.setdefault(f["n"], []).append(f["c1"])
    ns = sorted(by_n)
    medians = [float(np.median(by_n[n])) for n in ns]
    stable = True
    if len(medians) >= 2:
        stable = medians[-1] <= 2.0 * medians[0] + 1e-12
    return {
        "fits": fits,
        "n_values": ns,
        "median_c1": medians,
        "skipped_degenerate": skipped,
        "stable_within_2x": bool(stable),
    }


# ---------------------------------------------------------------------------
# regularization limit (Cauchy surrogate)

def regularization_limit(profile, r_values, t_end, m=2048, seed=0,
                         sigma=1, record_times=3):
    """Evolve identical f0 discretizations at each cut-off; report W2 between
    consecutive-r solutions at the shared record times."""
    r_values = [float(r) for r in r_values]
    if len(r_values) < 3:
        raise ValueError("need at least 3 halving cut-off values")
    for a, b in zip(r_values, r_values[1:]):
        if not np.isclose(b, a / 2.0):
            raise ValueError("cut-off values must halve")
    d = profile.d
    wd = discretize(profile, m, mode="iid-sample", seed=seed)
    ff_base = build_form_factor(d)
    cfg_k = CoulombKernel(d=d, sigma=sigma)
    trajs = {}
    for r in r_values:
        ff = ff_base.rescale(r)
        kern = build_smeared_kernel(cfg_k, ff, smear=2)
        dt_guard = 0.1 * r / max(profile.p_support, 1e-2)
        cfg = _round_config(t_end, dt_guard, record_times)
        trajs[r] = evolve(wd, ff, kern, cfg, mode="direct")
    times = np.linspace(0.0, t_end, record_times)
    table = []
    for r_hi, r_lo in zip(r_values, r_values[1:]):
        for t in times:
            a = trajs[r_hi].state_at(t)
            b = trajs[r_lo].state_at(t)
            val, _ = wasserstein_exact(a.as_measure(), b.as_measure(), p=2)
            table.append({"r": r_hi, "r_next": r_lo, "t": float(t),
                          "w2": float(val)})
    ratios = []
    for t in times[1:]:
        vals = [row["w2"] for row in table if row["t"] == t]
        ratios.extend([b / a for a, b in zip(vals, vals[1:]) if a > 0])
    return {
        "table": table,
        "contraction_ratios": ratios,
        "max_ratio": float(max(ratios)) if ratios else 0.0,
        "cauchy": bool(all(rr <= 0.75 for rr in ratios)),
    }


# ---------------------------------------------------------------------------
# concentration experiment

def envelope_a(n, xi, c, d, k=8):
    """Sharp-tail branch of the concentration bound for p = 2 in
    2d-dimensional phase space: the p = n/2 branch in d=2 (log-corrected
    gaussian), the p < n/2 branch exp(-c N xi^(k/2)) in d=3."""
    if d == 2:
        return np.exp(-c * n * (xi / np.log(2.0 + 1.0 / xi)) ** 2)
    return np.exp(-c * n * xi ** (k / 2.0))


_CONC_CTX = {}


def _concentration_cell(args):
    n, rep = args
    profile = _CONC_CTX["profile"]
    res = wasserstein_entropic(
        DiscreteMeasure.uniform(
            sample_initial(profile, n, _CONC_CTX["seed"], rep).phase_points()),
        _CONC_CTX["quad"], p=2, eps_rel=_CONC_CTX["eps_rel"], debias=False)
    return n, rep, res.value ** 2


def concentration_experiment(profile, n_values, replicas=200, seed=0,
                             xi_grid=None, m_quad=8192, eps_rel=0.015,
                             k=8, eps_theorem=0.1, threads=1, progress=None):
    """Monte-Carlo tails of W2^2(mu^N_0, f0) against one fixed quadrature,
    with the two-branch envelope fitted on half the (N, xi) grid."""
    d = profile.d
    quad = _discretize_at_least(profile, m_quad)
    quad_measure = quad.as_measure()
    _CONC_CTX.update(profile=profile, quad=quad_measure, seed=seed,
                     eps_rel=eps_rel)
    cells = [(n, rep) for n in n_values for rep in range(replicas)]
    results = {}
    if threads > 1:
        import multiprocessing as mp
        with mp.get_context("fork").Pool(threads) as pool:
            done = 0
            for n, rep, val in pool.imap_unordered(_concentration_cell, cells):
                results[(n, rep)] = val
                done += 1
                if progress:
                    progress(done, len(cells))
    else:
        for done, cell in enumerate(cells, 1):
            n, rep, val = _concentration_cell(cell)
            results[(n, rep)] = val
            if progress:
                progress(done, len(cells))
    samples = {n: np.array([results[(n, rep)] for rep in range(replicas)])
               for n in n_values}
    pooled = np.concatenate(list(samples.values()))
    if xi_grid is None:
        lo, hi = np.quantile(pooled, [0.25, 0.995])
        xi_grid = np.geomspace(lo, hi, 10)
    records = []
    for n in n_values:
        for xi in xi_grid:
            exceed = int((samples[n] > xi).sum())
            records.append(ConcentrationRecord(
                n=n, xi=float(xi), tail_probability=exceed / replicas,
                exceedances=exceed, replicas=replicas,
                reliable=bool(exceed >= 5 or exceed == 0)))
    fit = _fit_envelope(records, d=d, k=k, eps_theorem=eps_theorem)
    return {
        "samples": {int(n): samples[n].tolist() for n in n_values},
        "records": records,
        "xi_grid": [float(x) for x in xi_grid],
        "fit": fit,
        "monotone_in_n": _tail_monotonicity(records, n_values, xi_grid),
    }


def _tail_monotonicity(records, n_values, xi_grid):
    """After isotonic smoothing in N, bulk-xi tails must strictly decrease
    as N doubles."""
    mid = xi_grid[len(xi_grid) // 3]
    probs = []
    for n in n_values:
        rows = [r for r in records if r.n == n and np.isclose(r.xi, mid)]
        probs.append(rows[0].tail_probability)
    smoothed = pava_nonincreasing(probs)
    strict = all(a > b for a, b in zip(smoothed, smoothed[1:]))
    return {"xi": float(mid), "raw": probs,
            "smoothed": smoothed.tolist(), "strictly_decreasing": bool(strict)}


def _fit_envelope(records, d, k, eps_theorem):
    """Fit (c, C) of P <= C N (N xi)^(-(k-eps)/2) + C 1_{xi<=1} a(N, xi) on
    even-indexed grid cells, verify on the odd ones."""
    reliable = [r for r in records if r.reliable]
    train = reliable[0::2]
    holdout = reliable[1::2]

    def envelope(n, xi, c, big_c):
        poly = n * (n * xi) ** (-(k - eps_theorem) / 2.0)
        sharp = envelope_a(n, xi, c, d, k) if xi <= 1.0 else 0.0
        return big_c * (poly + sharp)

    best = None
    for c in np.geomspace(0.01, 100.0, 25):
        need = 1e-12
        for r in train:
            base = envelope(r.n, r.xi, c, 1.0)
            if base > 0:
                need = max(need, r.tail_probability / base)
        tightness = sum(min(envelope(r.n, r.xi, c, need), 1.0) for r in train)
        if best is None or tightness < best[0]:
            best = (tightness, c, need)
    _, c_fit, big_c = best
    holdout_ok = all(
        r.tail_probability <= envelope(r.n, r.xi, c_fit, big_c) + 1e-12
        for r in holdout)
    for r in records:
        r.envelope = float(min(envelope(r.n, r.xi, c_fit, big_c), 1.0))
    return {"c": float(c_fit), "C": float(big_c), "k": k,
            "eps": eps_theorem, "holdout_cells": len(holdout),
            "holdout_ok": bool(holdout_ok)}


# ---------------------------------------------------------------------------
# typicality end-to-end

def typicality_endtoend(spec, cache_dir=None, surrogate_factor=0.5):
    """P0[sup_t W2(mu^N_t, f_t) > r_N^(1-eps)] with f_t approximated by the
    reference run at the smallest feasible cut-off (surrogate, labelled)."""
    profile = spec.build_profile()
    r_surrogate = surrogate_factor * spec.radius(max(spec.n_values))
    reference = build_reference(spec, r_surrogate, cache_dir=cache_dir)
    ff_base = build_form_factor(spec.d)
    cfg_k = CoulombKernel(d=spec.d, sigma=spec.sigma)
    rows = []
    for n in spec.n_values:
        r_n = spec.radius(n)
        ff = ff_base.rescale(r_n)
        kern2 = build_smeared_kernel(cfg_k, ff, smear=2)
        threshold = r_n ** (1.0 - spec.eps)
        hits = 0
        for rep in range(spec.replicas):
            ens = sample_initial(profile, n, spec.seed, rep)
            dt_guard = spec.dt or 0.1 * r_n / max(profile.p_support, 1e-2)
            cfg = _round_config(spec.t_end, dt_guard, spec.record_times)
            sink = run_dynamics(ens, kern2, cfg)
            sup_w2 = 0.0
            for t, (q, p) in zip(sink.times, sink.snapshots):
                _, w2, _, _ = _distance_bundle(
                    ParticleEnsemble(q, p), reference.tracers_at(t),
                    n, spec.d, r_n)
                sup_w2 = max(sup_w2, w2)
            hits += int(sup_w2 > threshold)
        rows.append({"n": n, "r": r_n, "threshold": threshold,
                     "probability": hits / spec.replicas})
    probs = [row["probability"] for row in rows]
    smoothed = pava_nonincreasing(probs)
    return {
        "surrogate_r": r_surrogate,
        "surrogate_label": "smallest-r reference stands in for the "
                           "unregularized solution",
        "rows": rows,
        "smoothed": smoothed.tolist(),
        "nonincreasing": bool(all(a >= b for a, b
                                  in zip(smoothed, smoothed[1:]))),
    }


# ---------------------------------------------------------------------------
# serialization

def records_to_csv(records, path):
    rows = [rec.to_row() for rec in records]
    if not rows:
        raise ValueError("no records to write")
    list_cols = [k for k, v in rows[0].items() if isinstance(v, list)]
    with open(path, "w") as fh:
        header = []
        for key in rows[0]:
            if key in list_cols:
                width = max(len(r[key]) for r in rows)
                header.extend(f"{key}_{i}" for i in range(width))
            else:
                header.append(key)
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = []
            for key in rows[0]:
                if key in list_cols:
                    width = max(len(r[key]) for r in rows)
                    vals = list(row[key]) + [""] * (width - len(row[key]))
                    cells.extend(str(v) for v in vals)
                else:
                    cells.append(str(row[key]))
            fh.write(",".join(cells) + "\n")
