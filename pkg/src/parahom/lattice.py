"""Periodized space-time lattices and the discrete calculus on them.

A field lives on a (d+1)-dimensional torus: ``d`` spatial axes with ``n``
points and spacing ``h = L/n`` each, plus one time axis with ``n_t`` points
and spacing ``tau`` (default ``h**2``, the parabolic scaling).

Arrays are laid out time-major: a scalar field has shape ``(n_t, n, ..., n)``
with axis 0 the time axis and axes ``1..d`` the spatial axes.  Flattening in
C order therefore gives all spatial sites of the first time slice, then the
second, and so on; the PHOM binary dump uses exactly this order.

Vector fields stack ``d`` scalar fields along a leading axis; space-time
fields stack ``d+1``, with component ``d`` (the last one) the time slot.

Staggering convention, fixed globally: gradients are forward differences,
divergences and the time derivative are backward differences.  ``grad_f``
and ``-div_b`` are then exact adjoints, which is what makes the discrete
flux-divergence identity downstream exact.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


class ConfigurationError(ValueError):
    """Invalid lattice or experiment configuration."""


class CompatibilityError(ValueError):
    """Operands violate a compatibility requirement (mean, lattice, ...)."""


@dataclass(frozen=True)
class Lattice:
    d: int
    n: int
    n_t: int
    L: float
    tau: float

    @property
    def h(self) -> float:
        return self.L / self.n

    @property
    def shape(self) -> tuple:
        return (self.n_t,) + (self.n,) * self.d

    @property
    def n_sites(self) -> int:
        return self.n_t * self.n**self.d

    @property
    def T(self) -> float:
        """Temporal period."""
        return self.n_t * self.tau

    def spatial_axis(self, i: int) -> int:
        """Array axis of spatial direction i (0-based)."""
        return 1 + i


def make_lattice(d: int, n: int, n_t: int, L: float,
                 tau_override: float | None = None) -> Lattice:
    if d not in (1, 2, 3):
        raise ConfigurationError(f"spatial dimension must be 1, 2 or 3, got {d}")
    if n < 2 or n_t < 2:
        raise ConfigurationError(f"need n >= 2 and n_t >= 2, got n={n}, n_t={n_t}")
    if L <= 0:
        raise ConfigurationError(f"spatial period must be positive, got {L}")
    h = L / n
    tau = h * h if tau_override is None else float(tau_override)
    if tau <= 0:
        raise ConfigurationError(f"time spacing must be positive, got {tau}")
    return Lattice(d=d, n=n, n_t=n_t, L=L, tau=tau)


def zeros(lat: Lattice) -> np.ndarray:
    return np.zeros(lat.shape)


def grad_f(lat: Lattice, u: np.ndarray) -> np.ndarray:
    """Forward spatial differences, periodic: component i is
    (u(z + h e_i) - u(z)) / h."""
    h = lat.h
    return np.stack([(np.roll(u, -1, axis=1 + i) - u) / h for i in range(lat.d)])


def div_b(lat: Lattice, v: np.ndarray) -> np.ndarray:
    """Backward spatial divergence, periodic; exact negative adjoint of grad_f."""
    h = lat.h
    out = np.zeros(lat.shape)
    for i in range(lat.d):
        out += (v[i] - np.roll(v[i], 1, axis=1 + i)) / h
    return out


def dt_b(lat: Lattice, u: np.ndarray) -> np.ndarray:
    """Backward time difference, periodic in t."""
    return (u - np.roll(u, 1, axis=0)) / lat.tau


def dt_f(lat: Lattice, u: np.ndarray) -> np.ndarray:
    """Forward time difference, periodic in t."""
    return (np.roll(u, -1, axis=0) - u) / lat.tau


def grad_st_f(lat: Lattice, u: np.ndarray) -> np.ndarray:
    """(d+1)-component forward gradient (spatial parts, then time part)."""
    return np.concatenate([grad_f(lat, u), dt_f(lat, u)[None]], axis=0)


def div_st_b(lat: Lattice, v: np.ndarray) -> np.ndarray:
    """(d+1)-dimensional backward divergence, adjoint of grad_st_f."""
    return div_b(lat, v[:lat.d]) + dt_b(lat, v[lat.d])


def lap_st(lat: Lattice, u: np.ndarray) -> np.ndarray:
    """Discrete (d+1)-Laplacian with physical spacings h and tau: second
    differences along every spatial axis and the time axis.  Identical to
    div_st_b(grad_st_f(u))."""
    out = np.zeros(lat.shape)
    h2 = lat.h * lat.h
    for i in range(lat.d):
        ax = 1 + i
        out += (np.roll(u, -1, axis=ax) + np.roll(u, 1, axis=ax) - 2.0 * u) / h2
    out += (np.roll(u, -1, axis=0) + np.roll(u, 1, axis=0) - 2.0 * u) / (lat.tau**2)
    return out


def mean(u: np.ndarray) -> float:
    return float(np.mean(u))


def project_mean_zero(u: np.ndarray) -> np.ndarray:
    return u - np.mean(u)


def box_offsets(lat: Lattice, r: float) -> tuple[np.ndarray, np.ndarray]:
    """Index offsets of the discrete parabolic cube Q_r: spatial half-width
    floor(r/h) sites, temporal half-width floor(r^2/tau) steps."""
    kx = int(np.floor(r / lat.h + 1e-12))
    kt = int(np.floor(r * r / lat.tau + 1e-12))
    if kx < 1 or kt < 1:
        raise ConfigurationError(
            f"box radius {r} spans less than one site (h={lat.h}, tau={lat.tau})")
    return np.arange(-kx, kx + 1), np.arange(-kt, kt + 1)


def box_average(lat: Lattice, u: np.ndarray, center: tuple, r: float) -> float:
    """Arithmetic mean of u over the discrete parabolic cube Q_r(center),
    periodic wraparound.  center is a (d+1)-index tuple (t, x_1, ..., x_d)."""
    if len(center) != lat.d + 1:
        raise ConfigurationError(f"center must have {lat.d + 1} indices")
    off_x, off_t = box_offsets(lat, r)
    idx = [np.mod(center[0] + off_t, lat.n_t)]
    for i in range(lat.d):
        idx.append(np.mod(center[1 + i] + off_x, lat.n))
    return float(np.mean(u[np.ix_(*idx)]))


def shift(u: np.ndarray, lat: Lattice, z: tuple) -> np.ndarray:
    """Periodic lattice shift by index offsets z = (t, x_1, ..., x_d):
    the result at site w equals u at site w + z."""
    out = u
    for ax, s in enumerate(z):
        out = np.roll(out, -int(s), axis=ax + (u.ndim - lat.d - 1))
    return out


# ---------------------------------------------------------------------------
# PHOM binary field dump

PHOM_MAGIC = b"PHOM"
PHOM_VERSION = 1


def write_field(path, lat: Lattice, u: np.ndarray) -> None:
    """Dump a scalar field: magic 'PHOM', then version, d, n, n_t as
    little-endian u32, then float64 values in time-major C order."""
    if u.shape != lat.shape:
        raise CompatibilityError(f"field shape {u.shape} != lattice {lat.shape}")
    with open(path, "wb") as f:
        f.write(PHOM_MAGIC)
        f.write(struct.pack("<4I", PHOM_VERSION, lat.d, lat.n, lat.n_t))
        f.write(np.ascontiguousarray(u, dtype="<f8").tobytes())


def read_field(path) -> tuple[int, int, int, np.ndarray]:
    """Read a PHOM dump; returns (d, n, n_t, values)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != PHOM_MAGIC:
            raise ConfigurationError(f"not a PHOM file: magic {magic!r}")
        version, d, n, n_t = struct.unpack("<4I", f.read(16))
        if version != PHOM_VERSION:
            raise ConfigurationError(f"unsupported PHOM version {version}")
        count = n_t * n**d
        u = np.frombuffer(f.read(8 * count), dtype="<f8", count=count)
    return d, n, n_t, u.reshape((n_t,) + (n,) * d).copy()
