"""Self-contained linear solvers for fields on a space-time torus.

Krylov methods (CG for symmetric, BiCGStab for the nonsymmetric parabolic
systems) operate matrix-free on lattice fields, plus discrete-Fourier exact
inverses for constant-coefficient operators and the (d+1)-Laplacian.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.fft as sfft

from .lattice import CompatibilityError, Lattice, lap_st


@dataclass
class LinearOperator:
    """Matrix-free operator on scalar fields."""
    apply: Callable[[np.ndarray], np.ndarray]
    symmetric: bool = False
    constant_nullspace: bool = False


@dataclass
class SolveReport:
    iterations: int
    relative_residual: float
    converged: bool


class SolverError(RuntimeError):
    def __init__(self, message: str, report: SolveReport | None = None):
        super().__init__(message)
        self.report = report


def default_max_iter(lat: Lattice) -> int:
    return max(50, int(10 * np.sqrt(lat.n_sites)))


def _dot(u, v) -> float:
    return float(np.vdot(u, v).real)


def _check_compat(A: LinearOperator, b: np.ndarray) -> None:
    if A.constant_nullspace:
        bnorm = np.linalg.norm(b)
        if bnorm > 0 and abs(np.sum(b)) / np.sqrt(b.size) > 1e-10 * bnorm:
            raise CompatibilityError(
                "rhs must be mean-zero when the operator annihilates constants")


def cg(A: LinearOperator, b: np.ndarray, tol: float = 1e-10,
       max_iter: int = 1000) -> tuple[np.ndarray, SolveReport]:
    """Conjugate gradients for symmetric positive (semi)definite A."""
    _check_compat(A, b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), SolveReport(0, 0.0, True)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = _dot(r, r)
    it = 0
    while it < max_iter:
        Ap = A.apply(p)
        alpha = rr / _dot(p, Ap)
        x += alpha * p
        r -= alpha * Ap
        it += 1
        rr_new = _dot(r, r)
        if np.sqrt(rr_new) <= tol * bnorm:
            rr = rr_new
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    if A.constant_nullspace:
        x -= np.mean(x)
    res = np.sqrt(rr) / bnorm
    return x, SolveReport(it, res, res <= tol)


def bicgstab(A: LinearOperator, b: np.ndarray, tol: float = 1e-10,
             max_iter: int = 1000,
             preconditioner: LinearOperator | None = None
             ) -> tuple[np.ndarray, SolveReport]:
    """Preconditioned BiCGStab (van der Vorst); preconditioner approximates
    the inverse of A and is applied as M(v)."""
    _check_compat(A, b)
    M = preconditioner.apply if preconditioner is not None else (lambda v: v)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), SolveReport(0, 0.0, True)
    x = np.zeros_like(b)
    r = b.copy()
    r0 = r.copy()
    rho = alpha = omega = 1.0
    v = np.zeros_like(b)
    p = np.zeros_like(b)
    it = 0
    resid = 1.0
    while it < max_iter:
        rho_new = _dot(r0, r)
        if rho_new == 0.0:
            break
        beta = (rho_new / rho) * (alpha / omega) if it > 0 else 0.0
        p = r + beta * (p - omega * v)
        phat = M(p)
        v = A.apply(phat)
        denom = _dot(r0, v)
        if denom == 0.0:
            break
        alpha = rho_new / denom
        s = r - alpha * v
        if np.linalg.norm(s) <= tol * bnorm:
            x += alpha * phat
            it += 1
            resid = np.linalg.norm(s) / bnorm
            break
        shat = M(s)
        t = A.apply(shat)
        tt = _dot(t, t)
        if tt == 0.0:
            break
        omega = _dot(t, s) / tt
        x += alpha * phat + omega * shat
        r = s - omega * t
        rho = rho_new
        it += 1
        resid = np.linalg.norm(r) / bnorm
        if resid <= tol:
            break
        if omega == 0.0:
            break
    if A.constant_nullspace:
        x -= np.mean(x)
    # report the true residual, not the recursively updated one
    resid = float(np.linalg.norm(A.apply(x) - b) / bnorm)
    return x, SolveReport(it, resid, resid <= tol)


# ---------------------------------------------------------------------------
# Discrete-Fourier machinery

def _spatial_symbols(lat: Lattice, rfft_last: bool = True) -> list[np.ndarray]:
    """Per-axis symbols of the 1-D second difference, -(4/h^2) sin^2(pi k/n),
    broadcastable to the (r)fft output shape."""
    syms = []
    for i in range(lat.d):
        nk = lat.n // 2 + 1 if (rfft_last and i == lat.d - 1) else lat.n
        k = np.arange(nk) if (rfft_last and i == lat.d - 1) else sfft.fftfreq(lat.n) * lat.n
        s = -(4.0 / lat.h**2) * np.sin(np.pi * k / lat.n) ** 2
        shape = [1] * (lat.d + 1)
        shape[1 + i] = nk
        syms.append(s.reshape(shape))
    return syms


def _time_freq(lat: Lattice) -> np.ndarray:
    m = sfft.fftfreq(lat.n_t) * lat.n_t
    shape = [1] * (lat.d + 1)
    shape[0] = lat.n_t
    return m.reshape(shape)


def lap_st_symbol(lat: Lattice, rfft_last: bool = True) -> np.ndarray:
    """Fourier symbol of lap_st on the (r)fftn frequency grid."""
    m = _time_freq(lat)
    sym = -(4.0 / lat.tau**2) * np.sin(np.pi * m / lat.n_t) ** 2
    sym = sym + np.zeros([lat.n_t] + [1] * lat.d)
    for s in _spatial_symbols(lat, rfft_last):
        sym = sym + s
    return sym


def spectral_poisson(lat: Lattice, rhs: np.ndarray) -> np.ndarray:
    """Unique mean-zero solution of lap_st(u) = rhs on the torus, by discrete
    Fourier inversion.  rhs must be mean-zero."""
    rnorm = np.linalg.norm(rhs)
    if rnorm > 0 and abs(np.sum(rhs)) / np.sqrt(rhs.size) > 1e-12 * rnorm:
        raise CompatibilityError("spectral_poisson needs a mean-zero rhs")
    sym = lap_st_symbol(lat, rfft_last=True)
    uh = sfft.rfftn(rhs)
    with np.errstate(divide="ignore", invalid="ignore"):
        uh = np.where(sym != 0.0, uh / sym, 0.0)
    return sfft.irfftn(uh, s=lat.shape)


def parabolic_symbol(lat: Lattice, beta: float, a0: float) -> np.ndarray:
    """Fourier symbol of beta + dt_b - a0 * (spatial Laplacian), on the rfftn
    grid (last spatial axis halved)."""
    m = _time_freq(lat)
    dt_sym = (1.0 - np.exp(-2j * np.pi * m / lat.n_t)) / lat.tau
    sym = beta + dt_sym + np.zeros([lat.n_t] + [1] * lat.d)
    for s in _spatial_symbols(lat, rfft_last=True):
        sym = sym - a0 * s
    return sym


def parabolic_preconditioner(lat: Lattice, beta: float, a0: float) -> LinearOperator:
    """Exact inverse of the constant-coefficient operator
    beta + dt_b - a0 * Delta_x via discrete Fourier; for beta = 0 the constant
    mode is projected out (mean-zero subspace)."""
    if beta < 0 or a0 <= 0:
        raise CompatibilityError("need beta >= 0 and a0 > 0")
    sym = parabolic_symbol(lat, beta, a0)

    def apply(u: np.ndarray) -> np.ndarray:
        uh = sfft.rfftn(u)
        with np.errstate(divide="ignore", invalid="ignore"):
            uh = np.where(sym != 0.0, uh / sym, 0.0)
        return sfft.irfftn(uh, s=lat.shape)

    return LinearOperator(apply=apply, symmetric=False,
                          constant_nullspace=(beta == 0.0))


def parabolic_constant_apply(lat: Lattice, beta: float, a0: float) -> LinearOperator:
    """The forward constant-coefficient operator beta + dt_b - a0 * Delta_x
    (companion of parabolic_preconditioner, mainly for tests)."""
    from .lattice import div_b, dt_b as _dt_b, grad_f

    def apply(u: np.ndarray) -> np.ndarray:
        return beta * u + _dt_b(lat, u) - a0 * div_b(lat, grad_f(lat, u))

    return LinearOperator(apply=apply, symmetric=False,
                          constant_nullspace=(beta == 0.0))
