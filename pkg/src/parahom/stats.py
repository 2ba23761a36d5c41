"""Monte Carlo statistics: growth weights, minimal radii, fluctuation
moments, and the homogenization-commutator scaling.

The minimal radius chi* of a corrector/flux-corrector pair is the smallest
dyadic scale l such that for every tested R >= l

    1/R   * avg_{Q_R}( |(phibar, sigbar, grad sigtilde_(d+1))|^2 )^{1/2}
  + 1/R^2 * avg_{Q_R}( |sigtilde_(d+1)|^2 )^{1/2}            <=  theta,

clamped below by 1, where Q_R is the parabolic box of spatial half-width R
and temporal half-width R^2 (lattice units), phibar is phi recentered by its
Q_R average, sigbar recenters the spatial sigma block per time slice, and
sigtilde_(d+1) removes both the Q_R average and the linear drift of the
distinguished time-slot components.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import corrector as co
from . import ensemble as en
from . import fluxcor as fx
from . import solver as sv
from . import twoscale as ts
from .corrector import CorrectorSet
from .ensemble import EnsembleSpec
from .fluxcor import FluxCorrector
from .lattice import (CompatibilityError, ConfigurationError, Lattice,
                      grad_f)


def mu_d(r: float, d: int) -> float:
    """Growth weight entering the corrector bounds: sqrt(2+r) in d=2,
    ln^(1/2)(2+r) in d=3, and 1 above."""
    if r < 0:
        raise ConfigurationError(f"r must be nonnegative, got {r}")
    if d == 2:
        return float(np.sqrt(2.0 + r))
    if d == 3:
        return float(np.sqrt(np.log(2.0 + r)))
    if d > 3:
        return 1.0
    raise ConfigurationError(f"mu_d defined for d >= 2, got d={d}")


# ---------------------------------------------------------------------------
# Bootstrap helpers

def bootstrap_half_width(values: np.ndarray, n_boot: int = 200,
                         seed: int = 0) -> float:
    """1.96-sigma half-width of the sample mean from a bootstrap resample."""
    values = np.asarray(values, dtype=float)
    rng = np.random.default_rng(seed)
    boots = np.empty(n_boot)
    for b in range(n_boot):
        boots[b] = np.mean(rng.choice(values, size=len(values)))
    return float(1.96 * np.std(boots))


@dataclass
class MomentEstimate:
    label: str
    p: int
    n_samples: int
    estimate: float
    half_width: float


# ---------------------------------------------------------------------------
# Minimal radius

@dataclass
class MinimalRadiusSample:
    theta: float
    chi_star: float
    censored: bool
    r_grid: list[int]
    functionals: list[dict]   # per R: {"r", "decay", "drift"}


def dyadic_r_grid(lat: Lattice) -> list[int]:
    """Dyadic radii 1, 2, 4, ... fitting both the spatial box (2R+1 <= n)
    and the parabolic time depth (2R^2+1 <= n_t)."""
    grid = []
    r = 1
    while 2 * r + 1 <= lat.n and 2 * r * r + 1 <= lat.n_t:
        grid.append(r)
        r *= 2
    if not grid:
        raise ConfigurationError("lattice too small for any parabolic box")
    return grid


def _window(lat: Lattice, field: np.ndarray, center: tuple, r: int
            ) -> np.ndarray:
    """Modular parabolic window of half-widths (r^2 in time, r in space)."""
    idx = [np.mod(center[0] + np.arange(-r * r, r * r + 1), lat.n_t)]
    for i in range(lat.d):
        idx.append(np.mod(center[1 + i] + np.arange(-r, r + 1), lat.n))
    return field[np.ix_(*idx)]


def minimal_radius(correctors: CorrectorSet, fc: FluxCorrector, theta: float,
                   r_grid: list[int] | None = None,
                   center: tuple | None = None) -> MinimalRadiusSample:
    if theta <= 0:
        raise ConfigurationError("theta must be positive")
    lat = correctors.lat
    if fc.lat != lat:
        raise CompatibilityError("corrector and flux-corrector lattices differ")
    d = lat.d
    if r_grid is None:
        r_grid = dyadic_r_grid(lat)
    if center is None:
        center = (0,) * (d + 1)
    grad_sig = np.empty((d, d, d) + lat.shape)   # [l, i, j] = d_l sigma_(d+1)ij
    for i in range(d):
        for j in range(d):
            g = grad_f(lat, fc.sigma[d, i, j])
            for l in range(d):
                grad_sig[l, i, j] = g[l]
    rows = []
    for r in r_grid:
        sq_decay = 0.0
        for j in range(d):
            sub = _window(lat, correctors.phi[j], center, r)
            sq_decay += np.mean((sub - np.mean(sub)) ** 2)
            for k in range(d):
                for i in range(d):
                    sub = _window(lat, fc.sigma[k, i, j], center, r)
                    slice_mean = np.mean(sub, axis=tuple(range(1, d + 1)),
                                         keepdims=True)
                    sq_decay += np.mean((sub - slice_mean) ** 2)
                    sub = _window(lat, grad_sig[k, i, j], center, r)
                    sq_decay += np.mean((sub - np.mean(sub)) ** 2)
        sq_drift = 0.0
        coords = np.meshgrid(*([np.arange(-r, r + 1) * lat.h] * d),
                             indexing="ij")
        for i in range(d):
            for j in range(d):
                sub = _window(lat, fc.sigma[d, i, j], center, r)
                tilted = sub - np.mean(sub)
                for l in range(d):
                    gbar = np.mean(_window(lat, grad_sig[l, i, j], center, r))
                    tilted = tilted - coords[l][None] * gbar
                sq_drift += np.mean(tilted**2)
        rows.append({"r": r,
                     "decay": float(np.sqrt(sq_decay)) / r,
                     "drift": float(np.sqrt(sq_drift)) / r**2})
    ok = [row["decay"] + row["drift"] <= theta for row in rows]
    if not ok[-1]:
        return MinimalRadiusSample(theta=theta, chi_star=float("nan"),
                                   censored=True, r_grid=list(r_grid),
                                   functionals=rows)
    last_fail = -1
    for idx, good in enumerate(ok):
        if not good:
            last_fail = idx
    chi = float(r_grid[last_fail + 1]) if last_fail >= 0 else 1.0
    return MinimalRadiusSample(theta=theta, chi_star=max(chi, 1.0),
                               censored=False, r_grid=list(r_grid),
                               functionals=rows)


def minrad_ensemble(spec: EnsembleSpec, lat: Lattice, n_samples: int,
                    theta: float = 0.1, seed: int = 0, tol: float = 1e-9,
                    centers: list[tuple] | None = None) -> dict:
    """chi* over an ensemble, at one or several window centers (the extra
    centers provide the stationarity diagnostic).  Censored samples are
    counted, never averaged."""
    if centers is None:
        centers = [(0,) * (lat.d + 1)]
    per_center = [[] for _ in centers]
    censored = [0 for _ in centers]
    failures = 0
    for s in range(n_samples):
        try:
            a = en.sample(spec, lat, seed=seed, index=s)
            cs = co.solve_cell(a, tol=tol)
            fc = fx.solve_sigma(co.flux(a, cs, co.effective(a, cs)))
        except sv.SolverError:
            failures += 1
            continue
        for ci, ctr in enumerate(centers):
            samp = minimal_radius(cs, fc, theta, center=ctr)
            if samp.censored:
                censored[ci] += 1
            else:
                per_center[ci].append(samp.chi_star)
    out = {"theta": theta, "n_samples": n_samples, "failures": failures,
           "centers": []}
    for ci, ctr in enumerate(centers):
        vals = np.asarray(per_center[ci])
        entry = {"center": tuple(int(c) for c in ctr),
                 "chi_values": vals.tolist(),
                 "censored": censored[ci],
                 "censored_fraction": censored[ci] / max(n_samples - failures, 1)}
        if len(vals):
            entry["mean_chi_sq"] = float(np.mean(vals**2))
            entry["half_width"] = bootstrap_half_width(vals**2, seed=seed)
        out["centers"].append(entry)
    return out


# ---------------------------------------------------------------------------
# Fluctuation moments

def _q1_average(lat: Lattice, field: np.ndarray, center: tuple) -> float:
    return float(np.mean(_window(lat, field, center, 1)))


def fluct_suite(spec: EnsembleSpec, lat: Lattice, n_samples: int,
                p_list: list[int], seed: int = 0, tol: float = 1e-9,
                center: tuple | None = None, max_p: int = 4) -> dict:
    """Monte Carlo moments of unit-box corrector observables:
    'grad_sq' is the Q_1 average of |(grad phi, grad sigma)|^2 and
    'phi_avg' / 'sigma_avg' are Q_1 averages of phi_0 and sigma_(d+1)00."""
    if n_samples < 8:
        raise ConfigurationError("fluct_suite needs n_samples >= 8")
    for p in p_list:
        if not 1 <= p <= max_p:
            raise ConfigurationError(
                f"moment order {p} outside [1, {max_p}]")
    d = lat.d
    if center is None:
        center = (0,) * (d + 1)
    obs = {"grad_sq": [], "phi_avg": [], "sigma_avg": []}
    failures = 0
    for s in range(n_samples):
        try:
            a = en.sample(spec, lat, seed=seed, index=s)
            cs = co.solve_cell(a, tol=tol)
            fc = fx.solve_sigma(co.flux(a, cs, co.effective(a, cs)))
        except sv.SolverError:
            failures += 1
            continue
        dens = np.zeros(lat.shape)
        for j in range(d):
            dens += np.sum(cs.grad_phi[j] ** 2, axis=0)
            for kp in range(d + 1):
                for ip in range(d + 1):
                    dens += np.sum(grad_f(lat, fc.sigma[kp, ip, j]) ** 2,
                                   axis=0)
        obs["grad_sq"].append(_q1_average(lat, dens, center))
        obs["phi_avg"].append(_q1_average(lat, cs.phi[0], center))
        obs["sigma_avg"].append(_q1_average(lat, fc.sigma[d, 0, 0], center))
    estimates = []
    for label, vals in obs.items():
        arr = np.abs(np.asarray(vals, dtype=float))
        for p in p_list:
            powered = arr**p
            estimates.append(MomentEstimate(
                label=label, p=p, n_samples=len(arr),
                estimate=float(np.mean(powered)),
                half_width=bootstrap_half_width(powered, seed=seed)))
    return {"estimates": estimates, "failures": failures,
            "center": tuple(int(c) for c in center)}


# ---------------------------------------------------------------------------
# Homogenization commutator

def commutator(h: np.ndarray, u_eps: np.ndarray, u0: np.ndarray,
               correctors: CorrectorSet, eps: float,
               prob: "ts.CylinderProblem", a_cell: en.CoefficientField,
               abar: np.ndarray) -> float:
    """H^eps = space-time integral of h . (a^eps - abar)(grad u_eps -
    grad u_0 - grad phi_j^eps * testfn_j), with the same smoothed test
    functions as the two-scale expansion and face-consistent coefficients."""
    d = prob.d
    if h.shape != (d,) + u0.shape:
        raise CompatibilityError("h must be a vector space-time test field")
    if not prob.periodic:
        edge = np.concatenate([np.take(h, [0, -1], axis=2 + ax).ravel()
                               for ax in range(d)])
        if np.max(np.abs(edge)) > 1e-14:
            raise ConfigurationError("h must vanish on the lateral boundary")
    if np.max(np.abs(h[:, 0])) > 1e-14:
        raise ConfigurationError("h must vanish at the initial time")
    abar = np.asarray(abar, dtype=float)
    tiles = ts.TiledCoefficient(a_cell, prob)
    testfn = ts.test_functions(prob, u0, eps)
    total = 0.0
    for m in range(1, prob.n_steps + 1):
        am = tiles.scalar_at_step(m)
        g = ts.sgrad(prob, u_eps[m]) - ts.sgrad(prob, u0[m])
        for j in range(d):
            for i in range(d):
                g[i] -= (tiles.slice_scalar(correctors.grad_phi[j][i], m)
                         * testfn[j][m])
        flux = ts.sflux(prob, am, g)
        for i in range(d):
            flux[i] -= sum(abar[i, k] * g[k] for k in range(d))
        total += float(np.sum(h[:, m] * flux))
    return total * prob.tau * prob.h**d


def default_test_field(prob: "ts.CylinderProblem") -> np.ndarray:
    """Smooth vector test function vanishing at t=0, t=T and (for the
    Dirichlet box) on the lateral boundary."""
    cs = prob.coords()
    tm = np.arange(prob.n_steps + 1) * prob.tau
    bump_t = np.sin(np.pi * tm / prob.T) ** 2
    space = np.sin(2 * np.pi * cs[0] / prob.R0) * np.sin(2 * np.pi * cs[1] / prob.R0)
    base = bump_t.reshape([-1] + [1] * prob.d) * space[None]
    h = np.stack([base, -base])
    h[:, 0] = 0.0
    if not prob.periodic:
        for ax in range(prob.d):
            sl = [slice(None)] * h.ndim
            sl[2 + ax] = 0
            h[tuple(sl)] = 0.0
            sl[2 + ax] = -1
            h[tuple(sl)] = 0.0
    return h


def commutator_fresh(spec: EnsembleSpec, prob: "ts.CylinderProblem",
                     u0: np.ndarray, h: np.ndarray, abar: np.ndarray,
                     seed: int, index: int, tol: float = 1e-9) -> float:
    """One fresh-field commutator sample: the coefficient is drawn directly
    on the macro torus at scale eps, and its corrector is solved there, so
    the realization self-averages across independent eps-cells."""
    eps = prob.eps
    d = prob.d
    mlat = Lattice(d=d, n=prob.n, n_t=prob.n_steps + 1, L=1.0, tau=prob.tau)
    a = en.sample(en.with_lattice(spec, eps), mlat, seed=seed, index=index)
    cs = co.solve_cell(a, tol=max(tol, 1e-8))

    def slice_at(m):
        return a.values[m] if a.is_scalar else a.values[:, :, m]

    u_eps = ts.solve_parabolic(prob, slice_at, tol=tol)
    testfn = ts.test_functions(prob, u0, eps)
    abar = np.asarray(abar, dtype=float)
    total = 0.0
    for m in range(1, prob.n_steps + 1):
        am = slice_at(m)
        g = ts.sgrad(prob, u_eps[m]) - ts.sgrad(prob, u0[m])
        for j in range(d):
            for i in range(d):
                g[i] -= cs.grad_phi[j][i][m] * testfn[j][m]
        flux = ts.sflux(prob, am, g)
        for i in range(d):
            flux[i] -= sum(abar[i, k] * g[k] for k in range(d))
        total += float(np.sum(h[:, m] * flux))
    return total * prob.tau * prob.h**d


def variance_scaling(spec: EnsembleSpec, eps_list: list[float],
                     n_samples: int, seed: int = 0, T: float = 0.3,
                     sites_per_eps: int = 8, tol: float = 1e-9) -> dict:
    """CLT scaling table: sd(H^eps) * eps^{-(d+2)/2} across eps, in
    fresh-field mode (independent randomness per eps-cell)."""
    abar = ts.effective_from_spec(spec, seed)
    rows = []
    table = []
    for eps in eps_list:
        n = int(round(sites_per_eps / eps))
        tau = eps**2 / 4
        n_steps = int(round(T / tau))
        prob = ts.CylinderProblem(
            d=2, R0=1.0, T=n_steps * tau, eps=eps, n=n, n_steps=n_steps,
            periodic=True,
            source=lambda c, t: np.sin(2 * np.pi * c[0]) * np.sin(2 * np.pi * c[1]))
        h = default_test_field(prob)
        u0 = ts.solve_hom(abar, prob, tol=tol)
        vals = []
        for s in range(n_samples):
            try:
                vals.append(commutator_fresh(
                    spec, prob, u0, h, abar, seed,
                    index=10_000 * int(round(1 / eps)) + s, tol=tol))
            except sv.SolverError as exc:
                rows.append({"eps": eps, "sample": s, "failed": True,
                             "error": str(exc)})
        for s, v in enumerate(vals):
            rows.append({"eps": eps, "sample": s, "failed": False, "H": v})
        vals = np.asarray(vals)
        scale = eps ** (-(prob.d + 2) / 2)
        table.append({"eps": eps, "n_samples": len(vals),
                      "sd": float(np.std(vals, ddof=1)),
                      "rescaled_sd": float(np.std(vals, ddof=1) * scale),
                      "mean": float(np.mean(vals))})
    return {"rows": rows, "table": table}
