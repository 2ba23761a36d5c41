"""Stationary, uniformly elliptic random coefficient fields on the lattice.

Every generator is reproducible: a counter-based Philox stream keyed by
(seed, sample index) makes batches splittable and platform-stable.  All
generated fields satisfy the ellipticity bound eig(sym a) in [mu, 1/mu]
site by site, by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.fft as sfft

from .lattice import CompatibilityError, ConfigurationError, Lattice

KINDS = ("constant", "laminate_space", "laminate_time", "checkerboard", "gaussian")


@dataclass(frozen=True)
class EnsembleSpec:
    kind: str
    mu: float = 0.5
    ell: float = 0.0            # correlation length (gaussian / checkerboard)
    ell_t: float | None = None  # time correlation; default ell**2 (parabolic)
    phases: tuple = ()          # two phase values (laminates / checkerboard)
    value: float = 1.0          # constant kind
    isotropic: bool = True
    axis: int = 0               # laminate_space layer normal
    static: bool = False        # freeze the field in time

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown ensemble kind {self.kind!r}")
        if not 0.0 < self.mu < 1.0:
            raise ConfigurationError(f"ellipticity mu must be in (0,1), got {self.mu}")
        lo, hi = self.mu, 1.0 / self.mu
        for p in self.phases:
            if not lo <= p <= hi:
                raise ConfigurationError(
                    f"phase value {p} outside ellipticity range [{lo}, {hi}]")
        if self.kind == "constant" and not lo <= self.value <= hi:
            raise ConfigurationError(
                f"constant value {self.value} outside [{lo}, {hi}]")
        if self.kind in ("checkerboard", "gaussian") and self.ell <= 0:
            raise ConfigurationError(f"{self.kind} ensemble needs ell > 0")
        if self.kind in ("laminate_space", "laminate_time", "checkerboard") \
                and len(self.phases) != 2:
            raise ConfigurationError(f"{self.kind} ensemble needs two phase values")


@dataclass
class CoefficientField:
    """Per-site coefficient.  Scalar storage (shape = lattice shape) means
    a(z) * Identity; matrix storage has shape (d, d) + lattice shape."""
    lat: Lattice
    values: np.ndarray
    mu: float

    @property
    def is_scalar(self) -> bool:
        return self.values.ndim == self.lat.d + 1

    def entry(self, i: int, j: int) -> np.ndarray:
        """Site field of the (i, j) matrix entry."""
        if self.is_scalar:
            if i == j:
                return self.values
            return np.zeros(self.lat.shape)
        return self.values[i, j]


def _rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array(
        [seed & 0xFFFFFFFFFFFFFFFF, index & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)))


def _ell_t(spec: EnsembleSpec) -> float:
    return spec.ell**2 if spec.ell_t is None else spec.ell_t


def _bounded_map(g: np.ndarray, mu: float) -> np.ndarray:
    """Smooth bounded map from the real line into [mu, 1/mu]."""
    return mu + (1.0 / mu - mu) * 0.5 * (1.0 + np.tanh(g))


def _gaussian_unit_field(lat: Lattice, spec: EnsembleSpec,
                         rng: np.random.Generator) -> np.ndarray:
    """Stationary Gaussian field with unit variance and squared-exponential
    covariance, spectral synthesis on the torus."""
    ell, ellt = spec.ell, _ell_t(spec)
    shape = (1,) + lat.shape[1:] if spec.static else lat.shape
    white = rng.standard_normal(shape)
    # squared-exponential spectral filter, per-axis separable, full spectrum
    filt = np.ones(shape)
    for ax, npts in enumerate(shape):
        spacing, corr = (lat.tau, ellt) if ax == 0 else (lat.h, ell)
        k = sfft.fftfreq(npts) * npts
        period = npts * spacing
        f = np.exp(-0.5 * (2 * np.pi * k / period) ** 2 * corr**2)
        sh = [1] * len(shape)
        sh[ax] = npts
        filt = filt * f.reshape(sh)
    # normalize so the filtered field has unit pointwise variance
    power = np.sqrt(np.sum(filt**2) / np.prod(shape))
    half = filt[..., : shape[-1] // 2 + 1]
    g = sfft.irfftn(sfft.rfftn(white) * half, s=shape) / max(power, 1e-300)
    if spec.static:
        g = np.broadcast_to(g, lat.shape).copy()
    return g


def sample(spec: EnsembleSpec, lat: Lattice, seed: int,
           index: int = 0) -> CoefficientField:
    """Draw one coefficient field; identical (spec, lattice, seed, index)
    give bit-identical output."""
    rng = _rng(seed, index)
    d = lat.d
    if spec.kind == "constant":
        vals = np.full(lat.shape, float(spec.value))
        return CoefficientField(lat, vals, spec.mu)

    if spec.kind == "laminate_space":
        lo, hi = spec.phases
        coord = np.arange(lat.n)
        layer = np.where(coord < lat.n // 2, lo, hi)
        sh = [1] * (d + 1)
        sh[1 + spec.axis] = lat.n
        vals = np.broadcast_to(layer.reshape(sh), lat.shape).copy()
        return CoefficientField(lat, vals, spec.mu)

    if spec.kind == "laminate_time":
        lo, hi = spec.phases
        coord = np.arange(lat.n_t)
        layer = np.where(coord < lat.n_t // 2, lo, hi)
        sh = [lat.n_t] + [1] * d
        vals = np.broadcast_to(layer.reshape(sh), lat.shape).copy()
        return CoefficientField(lat, vals, spec.mu)

    if spec.kind == "checkerboard":
        lo, hi = spec.phases
        bx = max(1, int(round(spec.ell / lat.h)))
        bt = lat.n_t if spec.static else max(1, int(round(_ell_t(spec) / lat.tau)))
        nblocks = [int(np.ceil(lat.n_t / bt))] + [int(np.ceil(lat.n / bx))] * d
        picks = rng.random(nblocks) < 0.5
        vals = np.where(picks, lo, hi).astype(float)
        vals = np.repeat(vals, bt, axis=0)
        for ax in range(1, d + 1):
            vals = np.repeat(vals, bx, axis=ax)
        sl = tuple(slice(0, s) for s in lat.shape)
        return CoefficientField(lat, np.ascontiguousarray(vals[sl]), spec.mu)

    # gaussian
    if spec.isotropic:
        g = _gaussian_unit_field(lat, spec, rng)
        vals = _bounded_map(g, spec.mu)
        return CoefficientField(lat, vals, spec.mu)
    if d != 2:
        raise ConfigurationError("anisotropic gaussian fields require d = 2")
    g1 = _gaussian_unit_field(lat, spec, rng)
    g2 = _gaussian_unit_field(lat, spec, rng)
    g3 = _gaussian_unit_field(lat, spec, rng)
    lam1 = _bounded_map(g1, spec.mu)
    lam2 = _bounded_map(g2, spec.mu)
    theta = 0.25 * np.pi * (1.0 + np.tanh(g3))
    c, s = np.cos(theta), np.sin(theta)
    # R diag(lam1, lam2) R^T: symmetric with eigenvalues lam1, lam2
    a11 = c * c * lam1 + s * s * lam2
    a22 = s * s * lam1 + c * c * lam2
    a12 = c * s * (lam1 - lam2)
    vals = np.empty((d, d) + lat.shape)
    vals[0, 0], vals[0, 1] = a11, a12
    vals[1, 0], vals[1, 1] = a12, a22
    return CoefficientField(lat, vals, spec.mu)


def ellipticity_report(a: CoefficientField) -> tuple[float, float]:
    """Extreme eigenvalues of the symmetric part over all sites."""
    if a.is_scalar:
        return float(np.min(a.values)), float(np.max(a.values))
    d = a.lat.d
    sym = 0.5 * (a.values + np.swapaxes(a.values, 0, 1))
    # move matrix axes last for batched eigvalsh
    mats = np.moveaxis(sym, (0, 1), (-2, -1)).reshape(-1, d, d)
    eigs = np.linalg.eigvalsh(mats)
    return float(eigs.min()), float(eigs.max())


def shift_field(a: CoefficientField, z: tuple) -> CoefficientField:
    """Periodic index shift by z = (t, x_1, ..., x_d)."""
    if len(z) != a.lat.d + 1:
        raise CompatibilityError(f"shift offset needs {a.lat.d + 1} entries")
    off = a.values.ndim - (a.lat.d + 1)
    vals = a.values
    for ax, s in enumerate(z):
        vals = np.roll(vals, -int(s), axis=off + ax)
    return CoefficientField(a.lat, vals, a.mu)


def with_lattice(spec: EnsembleSpec, scale: float) -> EnsembleSpec:
    """Spec with all correlation lengths multiplied by scale (used to realize
    a(x/eps, t/eps^2) by direct sampling on a macroscopic grid)."""
    return replace(spec, ell=spec.ell * scale,
                   ell_t=None if spec.ell_t is None else spec.ell_t * scale**2)
