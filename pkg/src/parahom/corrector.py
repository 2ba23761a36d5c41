"""Corrector cell problems on the periodized space-time torus.

Solves, for each direction j, the discrete equation

    beta * phi_j + dt_b(phi_j) - div_b( a_face (grad_f(phi_j) + e_j) ) = 0,

computes the flux q and the effective tensor abar, and exposes the exact
discrete conservation structure: with forward gradients inside the
coefficient and backward divergence/time difference outside, the space-time
divergence of the extended flux equals the corrector residual identically.

Coefficients are sampled at cell centers; the face value seen by flux
component i is the arithmetic average of the two adjacent centers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import solver as sv
from .ensemble import CoefficientField
from .lattice import (CompatibilityError, Lattice, div_b, dt_b, grad_f,
                      project_mean_zero)


def rms(u: np.ndarray) -> float:
    """Torus-averaged L2 norm (resolution-independent)."""
    return float(np.sqrt(np.mean(np.square(u))))


def face_flux(a: CoefficientField, g: np.ndarray) -> np.ndarray:
    """Discrete flux F_i(z) = sum_k a_face_i(z)_{ik} g_k(z) with
    a_face_i = (a(z) + a(z + h e_i)) / 2."""
    lat = a.lat
    out = np.empty_like(g)
    if a.is_scalar:
        for i in range(lat.d):
            out[i] = 0.5 * (a.values + np.roll(a.values, -1, axis=1 + i)) * g[i]
        return out
    for i in range(lat.d):
        acc = np.zeros(lat.shape)
        for k in range(lat.d):
            aik = a.values[i, k]
            acc += 0.5 * (aik + np.roll(aik, -1, axis=1 + i)) * g[k]
        out[i] = acc
    return out


def unit_vector_field(lat: Lattice, j: int) -> np.ndarray:
    e = np.zeros((lat.d,) + lat.shape)
    e[j] = 1.0
    return e


def cell_operator(a: CoefficientField, beta: float) -> sv.LinearOperator:
    lat = a.lat

    def apply(u: np.ndarray) -> np.ndarray:
        return beta * u + dt_b(lat, u) - div_b(lat, face_flux(a, grad_f(lat, u)))

    return sv.LinearOperator(apply=apply, symmetric=False,
                             constant_nullspace=(beta == 0.0))


def mean_diffusivity(a: CoefficientField) -> float:
    if a.is_scalar:
        return float(np.mean(a.values))
    return float(np.mean([np.mean(a.values[i, i]) for i in range(a.lat.d)]))


@dataclass
class CorrectorSet:
    lat: Lattice
    beta: float
    phi: np.ndarray          # shape (d,) + lattice shape
    grad_phi: np.ndarray     # shape (d, d) + lattice shape; [j][i] = d_i phi_j
    reports: list

    def residuals(self, a: CoefficientField) -> np.ndarray:
        """Per-direction discrete corrector residual field."""
        lat = self.lat
        res = np.empty_like(self.phi)
        for j in range(lat.d):
            g = self.grad_phi[j] + unit_vector_field(lat, j)
            res[j] = (self.beta * self.phi[j] + dt_b(lat, self.phi[j])
                      - div_b(lat, face_flux(a, g)))
        return res


@dataclass
class FluxField:
    lat: Lattice
    q: np.ndarray            # shape (d+1, d) + lattice shape; slot d = time


@dataclass
class EffectiveTensor:
    abar: np.ndarray         # (d, d)


def solve_cell(a: CoefficientField, beta: float = 0.0, tol: float = 1e-10,
               max_iter: int | None = None, method: str = "krylov",
               ) -> CorrectorSet:
    """Solve the d corrector cell problems on the torus carrying ``a``.

    method='krylov' solves the full space-time system with preconditioned
    BiCGStab; method='march' time-steps implicit Euler to the time-periodic
    fixed point (fallback, slower)."""
    lat = a.lat
    if max_iter is None:
        max_iter = sv.default_max_iter(lat)
    A = cell_operator(a, beta)
    M = sv.parabolic_preconditioner(lat, beta, mean_diffusivity(a))
    phi = np.empty((lat.d,) + lat.shape)
    reports = []
    for j in range(lat.d):
        b = div_b(lat, face_flux(a, unit_vector_field(lat, j)))
        if beta == 0.0:
            b = project_mean_zero(b)
        if method == "krylov":
            x, rep = sv.bicgstab(A, b, tol=tol, max_iter=max_iter,
                                 preconditioner=M)
        elif method == "march":
            x, rep = _march_periodic(a, beta, b, tol, max_iter)
        else:
            raise CompatibilityError(f"unknown solve method {method!r}")
        if not rep.converged:
            raise sv.SolverError(
                f"corrector solve for direction {j} did not converge "
                f"(residual {rep.relative_residual:.3e} after {rep.iterations} "
                "iterations)", rep)
        if beta == 0.0:
            x = project_mean_zero(x)
        phi[j] = x
        reports.append(rep)
    grad_phi = np.stack([grad_f(lat, phi[j]) for j in range(lat.d)])
    return CorrectorSet(lat=lat, beta=beta, phi=phi, grad_phi=grad_phi,
                        reports=reports)


def _march_periodic(a: CoefficientField, beta: float, b: np.ndarray,
                    tol: float, max_iter: int,
                    max_sweeps: int = 200) -> tuple[np.ndarray, sv.SolveReport]:
    """Implicit-Euler sweeps over the time period until the periodic fixed
    point is reached."""
    lat = a.lat
    tau = lat.tau
    u = np.zeros(lat.shape)
    A = cell_operator(a, beta)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return u, sv.SolveReport(0, 0.0, True)
    a0 = mean_diffusivity(a)
    it_total = 0
    for sweep in range(max_sweeps):
        prev_slice = u[-1].copy()
        for m in range(lat.n_t):
            am = _slice_field(a, m)
            rhs = prev_slice / tau + b[m]
            step_op, step_pre = _spatial_step(am, lat, beta + 1.0 / tau, a0)
            x0, rep = sv.bicgstab(step_op, rhs, tol=1e-12, max_iter=max_iter,
                                  preconditioner=step_pre)
            u[m] = x0
            prev_slice = u[m]
            it_total += rep.iterations
        res = np.linalg.norm(A.apply(u) - b) / bnorm
        if res <= tol:
            if beta == 0.0:
                u = project_mean_zero(u)
                res = np.linalg.norm(A.apply(u) - b) / bnorm
            return u, sv.SolveReport(it_total, res, res <= tol)
    return u, sv.SolveReport(it_total, res, False)


def _slice_field(a: CoefficientField, m: int) -> CoefficientField:
    """Single-time-slice coefficient viewed on a 1-step lattice."""
    lat = a.lat
    sub = Lattice(d=lat.d, n=lat.n, n_t=1, L=lat.L, tau=lat.tau)
    if a.is_scalar:
        vals = a.values[m][None]
    else:
        vals = a.values[:, :, m][:, :, None]
    return CoefficientField(sub, vals, a.mu)


def _spatial_step(am: CoefficientField, lat: Lattice, shift: float,
                  a0: float) -> tuple[sv.LinearOperator, sv.LinearOperator]:
    """Operator (shift - div a grad) on one time slice plus its
    constant-coefficient spectral preconditioner."""
    import scipy.fft as sfft
    sub = am.lat

    def apply(u2):
        u3 = u2[None]
        g = grad_f(sub, u3)
        return (shift * u3 - div_b(sub, face_flux(am, g)))[0]

    k_syms = []
    for i in range(lat.d):
        npts = lat.n
        nk = npts // 2 + 1 if i == lat.d - 1 else npts
        k = np.arange(nk) if i == lat.d - 1 else sfft.fftfreq(npts) * npts
        s = (4.0 / lat.h**2) * np.sin(np.pi * k / npts) ** 2
        sh = [1] * lat.d
        sh[i] = nk
        k_syms.append(s.reshape(sh))
    sym = shift + a0 * sum(k_syms)

    def pre(u2):
        return sfft.irfftn(sfft.rfftn(u2) / sym, s=(lat.n,) * lat.d)

    return (sv.LinearOperator(apply=apply),
            sv.LinearOperator(apply=pre))


def effective(a: CoefficientField, correctors: CorrectorSet) -> EffectiveTensor:
    """abar_ij = torus average of component i of the scheme flux
    a_face (grad phi_j + e_j)."""
    lat = a.lat
    if correctors.lat != lat:
        raise CompatibilityError("correctors were solved on a different lattice")
    abar = np.empty((lat.d, lat.d))
    for j in range(lat.d):
        F = face_flux(a, correctors.grad_phi[j] + unit_vector_field(lat, j))
        for i in range(lat.d):
            abar[i, j] = np.mean(F[i])
    return EffectiveTensor(abar=abar)


def flux(a: CoefficientField, correctors: CorrectorSet,
         abar: EffectiveTensor) -> FluxField:
    """Extended flux q: spatial slots abar e_j - a_face (grad phi_j + e_j),
    time slot phi_j - <phi_j>."""
    lat = a.lat
    if correctors.lat != lat:
        raise CompatibilityError("correctors were solved on a different lattice")
    q = np.empty((lat.d + 1, lat.d) + lat.shape)
    for j in range(lat.d):
        F = face_flux(a, correctors.grad_phi[j] + unit_vector_field(lat, j))
        for i in range(lat.d):
            q[i, j] = abar.abar[i, j] - F[i]
        q[lat.d, j] = correctors.phi[j] - np.mean(correctors.phi[j])
    return FluxField(lat=lat, q=q)


def flux_divergence(fl: FluxField) -> np.ndarray:
    """Discrete space-time divergence of q per direction j; equals the
    corrector residual identically for beta = 0."""
    lat = fl.lat
    out = np.empty((lat.d,) + lat.shape)
    for j in range(lat.d):
        out[j] = div_b(lat, fl.q[:lat.d, j]) + dt_b(lat, fl.q[lat.d, j])
    return out


def beta_sweep(a: CoefficientField, betas: list[float], tol: float = 1e-10,
               include_zero: bool = False) -> list[dict]:
    """Massive-approximation study: one row per beta, descending; failures
    are recorded and the sweep continues."""
    rows = []
    blist = list(betas) + ([0.0] if include_zero else [])
    for beta in blist:
        if beta < 0:
            raise CompatibilityError("beta must be nonnegative")
        try:
            cs = solve_cell(a, beta=beta, tol=tol)
        except sv.SolverError as exc:
            rows.append({"beta": beta, "failed": True, "error": str(exc)})
            continue
        ab = effective(a, cs)
        rows.append({
            "beta": beta,
            "failed": False,
            "abar": ab.abar.copy(),
            "grad_norm": rms(cs.grad_phi),
            "phi_norm": rms(cs.phi),
        })
    return rows
