"""Periodic spectral substrate: grid, real fields stored as Fourier coefficients,
multiplier operators, Littlewood-Paley blocks, Sobolev and Zygmund norms.

Conventions
-----------
A real field u on the box [-L/2, L/2) is stored through its Fourier series
coefficients c_k with u(x) = sum_k c_k exp(i xi_k x), xi_k = 2 pi k / L and
k = -N/2 .. N/2-1 in FFT order.  The unpaired Nyquist mode k = -N/2 is kept
identically zero, so the retained band is |k| <= N/2 - 1 and Hermitian
symmetry c_{-k} = conj(c_k) holds for every retained mode of a real field.

Norm convention: ||u||_{H^s}^2 = L * sum <xi>^{2s} |c_k|^2, which equals
int |u|^2 dx at s = 0 (Plancherel).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

__all__ = [
    "Grid",
    "FourierField",
    "NormIndex",
    "NormKind",
    "apply_multiplier",
    "lp_block",
    "lp_Phi",
    "lp_phi",
    "lp_block_count",
    "norm",
    "sobolev_norm",
    "zygmund_norm",
    "l2_inner",
    "hs_inner",
    "mul",
    "dx",
    "abs_d",
    "hilbert",
    "smooth_step",
    "smooth_step_derivative",
]


class SingularMultiplierError(ValueError):
    """A multiplier singular at xi = 0 was applied to a nonzero-mean field."""


def _check_even_size(n):
    if n % 2 != 0 or n < 16:
        raise ValueError(f"n_modes must be even and >= 16, got {n}")


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid with N collocation points on a box of length L."""

    n_modes: int
    box_length: float

    def __post_init__(self):
        _check_even_size(self.n_modes)
        if not self.box_length > 0:
            raise ValueError("box_length must be positive")

    @property
    def k_indices(self):
        return _k_indices(self.n_modes)

    @property
    def wavenumbers(self):
        return _wavenumbers(self.n_modes, self.box_length)

    @property
    def x(self):
        """Collocation nodes in [-L/2, L/2)."""
        return _x_nodes(self.n_modes, self.box_length)

    @property
    def band_mask(self):
        """True on retained modes |k| <= N/2 - 1 (Nyquist excluded)."""
        return _band_mask(self.n_modes)

    @property
    def nyquist_index(self):
        return self.n_modes // 2

    @property
    def xi_max(self):
        return 2.0 * np.pi * (self.n_modes // 2 - 1) / self.box_length

    def _phase(self):
        return _phase(self.n_modes)


@lru_cache(maxsize=64)
def _k_indices(n):
    return np.fft.fftfreq(n, d=1.0 / n).astype(np.int64)


@lru_cache(maxsize=64)
def _wavenumbers(n, length):
    return 2.0 * np.pi * _k_indices(n) / length


@lru_cache(maxsize=64)
def _x_nodes(n, length):
    return -0.5 * length + length * np.arange(n) / n


@lru_cache(maxsize=64)
def _band_mask(n):
    mask = np.abs(_k_indices(n)) <= n // 2 - 1
    return mask


@lru_cache(maxsize=64)
def _phase(n):
    # exp(i pi k) for x-origin at -L/2
    return (-1.0) ** np.abs(_k_indices(n))


def coeffs_from_values(grid, vals):
    c = _phase(grid.n_modes) * np.fft.fft(vals) / grid.n_modes
    c[grid.nyquist_index] = 0.0
    return c


def values_from_coeffs(grid, coeffs):
    return np.fft.ifft(coeffs * _phase(grid.n_modes)) * grid.n_modes


@dataclass(frozen=True)
class FourierField:
    """Real periodic field stored as spectral coefficients on a Grid."""

    grid: Grid
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.complex128)
        if c.shape != (self.grid.n_modes,):
            raise ValueError("coefficient array does not match grid")
        if not np.all(np.isfinite(c.view(np.float64))):
            raise ValueError("non-finite spectral coefficient")
        object.__setattr__(self, "coeffs", c)

    # -- constructors -------------------------------------------------------
    @classmethod
    def from_values(cls, grid, vals):
        return cls(grid, coeffs_from_values(grid, np.asarray(vals, dtype=float)))

    @classmethod
    def from_function(cls, grid, fn):
        return cls.from_values(grid, fn(grid.x))

    @classmethod
    def zero(cls, grid):
        return cls(grid, np.zeros(grid.n_modes, dtype=np.complex128))

    # -- accessors ----------------------------------------------------------
    def values(self):
        """Samples on the collocation grid (real part; imag is roundoff)."""
        return values_from_coeffs(self.grid, self.coeffs).real

    def values_oversampled(self, factor=2):
        """Samples on a factor-times finer grid via zero padding."""
        n2 = factor * self.grid.n_modes
        fine = Grid(n2, self.grid.box_length)
        c2 = pad_coeffs(self.grid, self.coeffs, n2)
        return values_from_coeffs(fine, c2).real

    def mean(self):
        return float(self.coeffs[0].real)

    def is_real_valued(self, tol=1e-12):
        n = self.grid.n_modes
        c = self.coeffs
        sym = c[1:] - np.conj(c[1:][::-1])
        scale = max(np.max(np.abs(c)), 1e-300)
        return (
            np.max(np.abs(sym)) <= tol * scale
            and abs(c[0].imag) <= tol * scale
            and abs(c[n // 2]) <= tol * scale
        )

    # -- arithmetic ---------------------------------------------------------
    def _like(self, coeffs):
        return FourierField(self.grid, coeffs)

    def __add__(self, other):
        self._same_grid(other)
        return self._like(self.coeffs + other.coeffs)

    def __sub__(self, other):
        self._same_grid(other)
        return self._like(self.coeffs - other.coeffs)

    def __neg__(self):
        return self._like(-self.coeffs)

    def __mul__(self, scalar):
        return self._like(self.coeffs * float(scalar))

    __rmul__ = __mul__

    def _same_grid(self, other):
        if other.grid != self.grid:
            raise ValueError("grid mismatch")


def pad_coeffs(grid, coeffs, n2):
    """Embed band-limited coefficients into a larger mode array (same L)."""
    n = grid.n_modes
    half = n // 2
    c2 = np.zeros(n2, dtype=np.complex128)
    c2[: half] = coeffs[: half]
    c2[n2 - half + 1 :] = coeffs[n - half + 1 :]
    return c2


def truncate_coeffs(grid, c_fine, n_fine):
    """Restrict coefficients on a finer mode array back to the grid band."""
    n = grid.n_modes
    half = n // 2
    c = np.zeros(n, dtype=np.complex128)
    c[: half] = c_fine[: half]
    c[n - half + 1 :] = c_fine[n_fine - half + 1 :]
    return c


def apply_multiplier(u, m):
    """Apply a Fourier multiplier m(xi) to a field.

    m may be a callable evaluated on the grid wavenumbers or a precomputed
    array in FFT order.  Entries where m is non-finite are allowed only on
    modes carrying (numerically) zero coefficients; otherwise the operation
    is rejected.  The Nyquist mode is zeroed afterwards.
    """
    grid = u.grid
    mv = np.asarray(m(grid.wavenumbers) if callable(m) else m, dtype=np.complex128)
    if mv.shape != (grid.n_modes,):
        raise ValueError("multiplier array does not match grid")
    bad = ~np.isfinite(mv)
    if np.any(bad):
        scale = max(np.max(np.abs(u.coeffs)), 1e-300)
        if np.any(np.abs(u.coeffs[bad]) > 1e-13 * scale):
            raise SingularMultiplierError(
                "singular multiplier applied to a field with nonzero content "
                "on the singular modes"
            )
        mv = np.where(bad, 0.0, mv)
    c = mv * u.coeffs
    c[grid.nyquist_index] = 0.0
    return FourierField(grid, c)


def dx(u, order=1):
    return apply_multiplier(u, lambda xi: (1j * xi) ** order)


def abs_d(u, power=1.0):
    """|D_x|^power; negative powers require a zero-mean field."""
    def m(xi):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.abs(xi) ** power
    return apply_multiplier(u, m)


def hilbert(u):
    """Multiplier h(xi) = i xi / |xi|  (zero on the mean mode)."""
    def m(xi):
        out = np.zeros_like(xi, dtype=np.complex128)
        nz = xi != 0
        out[nz] = 1j * np.sign(xi[nz])
        return out
    return apply_multiplier(u, m)


def mul(a, b):
    """Dealiased pointwise product: zero-pad to 2N, multiply, truncate."""
    a._same_grid(b)
    grid = a.grid
    n2 = 2 * grid.n_modes
    fine = Grid(n2, grid.box_length)
    va = values_from_coeffs(fine, pad_coeffs(grid, a.coeffs, n2)).real
    vb = values_from_coeffs(fine, pad_coeffs(grid, b.coeffs, n2)).real
    c_fine = coeffs_from_values(fine, va * vb)
    c = truncate_coeffs(grid, c_fine, n2)
    c[grid.nyquist_index] = 0.0
    return FourierField(grid, c)


# ---------------------------------------------------------------------------
# Littlewood-Paley decomposition
# ---------------------------------------------------------------------------

def smooth_step(t):
    """C^infinity step: 0 for t <= 0, 1 for t >= 1, built from exp(-1/t)."""
    t = np.asarray(t, dtype=float)
    lo = t <= 0.0
    hi = t >= 1.0
    mid = ~(lo | hi)
    out = np.zeros_like(t)
    out[hi] = 1.0
    tm = t[mid]
    a = np.exp(-1.0 / tm)
    b = np.exp(-1.0 / (1.0 - tm))
    out[mid] = a / (a + b)
    return out


def smooth_step_derivative(t):
    """Analytic derivative of smooth_step (zero outside (0, 1))."""
    t = np.asarray(t, dtype=float)
    mid = (t > 0.0) & (t < 1.0)
    out = np.zeros_like(t)
    tm = t[mid]
    a = np.exp(-1.0 / tm)
    b = np.exp(-1.0 / (1.0 - tm))
    da = a / tm**2
    db = -b / (1.0 - tm) ** 2
    out[mid] = (da * b - a * db) / (a + b) ** 2
    return out


def lp_Phi(xi):
    """Low-frequency profile: 1 on |xi| <= 1/2, 0 on |xi| >= 1, smooth even."""
    return 1.0 - smooth_step(2.0 * np.abs(np.asarray(xi, dtype=float)) - 1.0)


def lp_phi(xi):
    """Annulus profile phi(xi) = Phi(xi/2) - Phi(xi), supported in 1/2<=|xi|<=2."""
    xi = np.asarray(xi, dtype=float)
    return lp_Phi(xi / 2.0) - lp_Phi(xi)


def lp_block_count(grid):
    """Smallest j0 with 2^(j0-1) > xi_max; blocks j >= j0 vanish identically."""
    return int(np.ceil(np.log2(grid.xi_max))) + 2


def lp_block(u, j):
    """Dyadic block Delta_j u; j = -1 denotes the low block S_0 u = Phi(D_x)u."""
    if j < -1:
        raise ValueError("block index must be >= -1")
    if j == -1:
        return apply_multiplier(u, lambda xi: lp_Phi(xi).astype(complex))
    return apply_multiplier(u, lambda xi: lp_phi(2.0 ** (-j) * xi).astype(complex))


# ---------------------------------------------------------------------------
# Norms
# ---------------------------------------------------------------------------

class NormKind(str, Enum):
    sobolev = "sobolev"
    zygmund = "zygmund"


@dataclass(frozen=True)
class NormIndex:
    kind: NormKind
    order: float

    def __post_init__(self):
        if not np.isfinite(self.order):
            raise ValueError("norm order must be finite")
        object.__setattr__(self, "kind", NormKind(self.kind))


def sobolev_norm(u, s):
    w = (1.0 + u.grid.wavenumbers**2) ** s
    return float(np.sqrt(u.grid.box_length * np.sum(w * np.abs(u.coeffs) ** 2)))


def _sup_norm(u):
    # max over a 2x oversampled collocation grid, controlling interpolation
    return float(np.max(np.abs(u.values_oversampled(2))))


def zygmund_norm(u, s):
    total = _sup_norm(lp_block(u, -1))
    best = 0.0
    for j in range(0, lp_block_count(u.grid)):
        best = max(best, 2.0 ** (j * s) * _sup_norm(lp_block(u, j)))
    return total + best


def norm(u, idx):
    if idx.kind == NormKind.sobolev:
        return sobolev_norm(u, idx.order)
    return zygmund_norm(u, idx.order)


def l2_inner(u, v):
    u._same_grid(v)
    return float(np.real(u.grid.box_length * np.sum(u.coeffs * np.conj(v.coeffs))))


def hs_inner(u, v, s):
    u._same_grid(v)
    w = (1.0 + u.grid.wavenumbers**2) ** s
    return float(np.real(u.grid.box_length * np.sum(w * u.coeffs * np.conj(v.coeffs))))
