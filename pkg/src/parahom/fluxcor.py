"""Extended flux correctors by (d+1)-dimensional Poisson inversion.

For each direction j the construction is

    psi_i'      = inverse (d+1)-Laplacian of q_i'j        (spectral, exact)
    b_k'i'      = forward difference_k' of psi_i'
    sigma_k'i'j = b_k'i'j - b_i'k'j,

which is skew-symmetric in (k', i') by construction, and satisfies the
divergence identities up to the (exactly zero-mean) residual carried by q.
All sigma components are mean-zero scalar fields on the torus.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import solver as sv
from .corrector import CorrectorSet, FluxField, rms
from .lattice import (CompatibilityError, ConfigurationError, Lattice,
                      box_average, dt_b, dt_f, lap_st, project_mean_zero)


@dataclass
class FluxCorrector:
    """sigma indexed (k', i', j), k', i' in 0..d (slot d = time), j in 0..d-1.
    The diagonal (k' = i') is identically zero."""
    lat: Lattice
    sigma: np.ndarray  # shape (d+1, d+1, d) + lattice shape


def _st_forward(lat: Lattice, u: np.ndarray, axis: int) -> np.ndarray:
    """Forward difference along space-time axis (0..d-1 spatial, d = time)."""
    if axis < lat.d:
        return (np.roll(u, -1, axis=1 + axis) - u) / lat.h
    return dt_f(lat, u)


def _st_backward(lat: Lattice, u: np.ndarray, axis: int) -> np.ndarray:
    if axis < lat.d:
        return (u - np.roll(u, 1, axis=1 + axis)) / lat.h
    return dt_b(lat, u)


def solve_sigma(fl: FluxField, mean_tol: float = 1e-8) -> FluxCorrector:
    lat = fl.lat
    dp1 = lat.d + 1
    sigma = np.zeros((dp1, dp1, lat.d) + lat.shape)
    for j in range(lat.d):
        qnorm = max(rms(fl.q[:, j]), 1e-300)
        psi = []
        for ip in range(dp1):
            qm = float(np.mean(fl.q[ip, j]))
            if abs(qm) > mean_tol * qnorm:
                raise CompatibilityError(
                    f"flux component ({ip},{j}) has nonzero mean {qm:.3e}")
            psi.append(sv.spectral_poisson(lat, project_mean_zero(fl.q[ip, j])))
        b = np.empty((dp1, dp1) + lat.shape)
        for kp in range(dp1):
            for ip in range(dp1):
                b[kp, ip] = _st_forward(lat, psi[ip], kp)
        for kp in range(dp1):
            for ip in range(dp1):
                sigma[kp, ip, j] = b[kp, ip] - b[ip, kp]
    return FluxCorrector(lat=lat, sigma=sigma)


def verify_identities(fc: FluxCorrector, fl: FluxField,
                      correctors: CorrectorSet) -> dict:
    """Relative residuals of the three structural identities:
    'poisson'    : lap sigma_k'ij - (d_k' q_ij - d_i q_k'j)
    'divergence' : sum_k' d_k' sigma_k'ij - q_ij          (i spatial)
    'time_slice' : sum_i d_i sigma_(d+1)ij - (<phi_j> - phi_j)
    """
    lat = fc.lat
    if fl.lat != lat or correctors.lat != lat:
        raise CompatibilityError("inconsistent lattices")
    dp1 = lat.d + 1
    num_a = den_a = 0.0
    num_b = den_b = 0.0
    num_c = den_c = 0.0
    for j in range(lat.d):
        for i in range(lat.d):
            for kp in range(dp1):
                rhs = (_st_forward(lat, fl.q[i, j], kp)
                       - _st_forward(lat, fl.q[kp, j], i))
                num_a += np.mean((lap_st(lat, fc.sigma[kp, i, j]) - rhs) ** 2)
                den_a += np.mean(rhs**2)
            dv = sum(_st_backward(lat, fc.sigma[kp, i, j], kp)
                     for kp in range(dp1))
            num_b += np.mean((dv - fl.q[i, j]) ** 2)
            den_b += np.mean(fl.q[i, j] ** 2)
        phi_j = correctors.phi[j]
        rhs_c = np.mean(phi_j) - phi_j
        dv_c = sum(_st_backward(lat, fc.sigma[lat.d, i, j], i)
                   for i in range(lat.d))
        num_c += np.mean((dv_c - rhs_c) ** 2)
        den_c += np.mean(rhs_c**2)

    def rel(num, den):
        return float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))

    return {"poisson": rel(num_a, den_a),
            "divergence": rel(num_b, den_b),
            "time_slice": rel(num_c, den_c)}


def skew_defect(fc: FluxCorrector) -> float:
    """Max |sigma_k'i'j + sigma_i'k'j|; zero by construction."""
    dp1 = fc.lat.d + 1
    worst = 0.0
    for kp in range(dp1):
        for ip in range(dp1):
            worst = max(worst, float(np.max(np.abs(
                fc.sigma[kp, ip] + fc.sigma[ip, kp]))))
    return worst


def growth_profile(fc: FluxCorrector, radii: list[float],
                   unit_radius: float | None = None) -> list[dict]:
    """RMS of box-averaged increments of the distinguished slice
    sigma_(d+1)ij between offset parabolic cubes and the origin cube.

    For each radius r the probe offsets are +-r along every spatial axis and
    +-r^2 along time (parabolic distance r).  unit_radius is the averaging
    radius of the unit cube (defaults to one spacing)."""
    lat = fc.lat
    r1 = unit_radius if unit_radius is not None else lat.h
    half_x = lat.L / 2
    half_t = lat.n_t * lat.tau / 2
    rows = []
    for r in radii:
        if r > half_x or r * r > half_t:
            raise ConfigurationError(
                f"radius {r} exceeds the torus half-width")
        kx = int(round(r / lat.h))
        kt = int(round(r * r / lat.tau))
        offsets = []
        for i in range(lat.d):
            for sgn in (+1, -1):
                z = [0] * (lat.d + 1)
                z[1 + i] = sgn * kx
                offsets.append(tuple(z))
        offsets.append((kt,) + (0,) * lat.d)
        offsets.append((-kt,) + (0,) * lat.d)
        sq = 0.0
        cnt = 0
        for i in range(lat.d):
            for j in range(lat.d):
                u = fc.sigma[lat.d, i, j]
                base = box_average(lat, u, (0,) * (lat.d + 1), r1)
                for z in offsets:
                    inc = box_average(lat, u, z, r1) - base
                    sq += inc * inc
                    cnt += 1
        rows.append({"r": r, "rms": float(np.sqrt(sq / cnt)),
                     "n_offsets": len(offsets)})
    return rows
