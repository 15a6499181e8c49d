"""Paradifferential toolkit: admissible cutoff, paraproducts, (x, xi)-symbol
operators, the high-high remainder, and bilinear Fourier operators.

All bilinear operations are evaluated as explicit double sums over retained
mode pairs, accumulated in a fixed order, so the exact cancellation
identities hold to roundoff and runs are bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spectral import (
    FourierField,
    Grid,
    mul,
    smooth_step,
    smooth_step_derivative,
)

__all__ = [
    "CutoffTheta",
    "BilinearSymbol",
    "paraproduct",
    "paradifferential",
    "remainder",
    "s_bilinear",
    "op_bilinear",
    "op_bilinear_scalar",
    "bilinear_tables",
    "reflect_matrix_symbol",
    "symbol_on_lattice",
]


@dataclass(frozen=True)
class CutoffTheta:
    """Admissible paraproduct cutoff theta(xi1, xi2) = (1 - f0(xi2)) f(xi1/xi2).

    f is a smooth even profile with f = 1 on |t| <= 2*eps1 and f = 0 on
    |t| >= eps2; f0 is the fixed unit-scale profile with f0 = 1 on |t| <= 1
    and f0 = 0 on |t| >= 2, which enforces theta = 0 for |xi2| <= 1 and
    theta = 1 for |xi1| <= eps1 |xi2|, |xi2| >= 2.
    """

    eps1: float = 0.1
    eps2: float = 0.4

    def __post_init__(self):
        if not (0.0 < 2.0 * self.eps1 < self.eps2 < 0.5):
            raise ValueError("cutoff requires 0 < 2*eps1 < eps2 < 1/2")

    # ratio-scale profile and its derivative
    def _f(self, t):
        t = np.abs(np.asarray(t, dtype=float))
        return 1.0 - smooth_step((t - 2.0 * self.eps1) / (self.eps2 - 2.0 * self.eps1))

    def _f_prime(self, t):
        t = np.asarray(t, dtype=float)
        width = self.eps2 - 2.0 * self.eps1
        arg = (np.abs(t) - 2.0 * self.eps1) / width
        return -smooth_step_derivative(arg) * np.sign(t) / width

    # unit-scale profile and its derivative
    @staticmethod
    def _f0(t):
        t = np.asarray(t, dtype=float)
        return 1.0 - smooth_step(np.abs(t) - 1.0)

    @staticmethod
    def _f0_prime(t):
        t = np.asarray(t, dtype=float)
        return -smooth_step_derivative(np.abs(t) - 1.0) * np.sign(t)

    @staticmethod
    def _broadcast(xi1, xi2):
        x1, x2 = np.broadcast_arrays(np.asarray(xi1, dtype=float),
                                     np.asarray(xi2, dtype=float))
        return np.atleast_1d(x1).copy(), np.atleast_1d(x2).copy()

    def theta(self, xi1, xi2):
        x1, x2 = self._broadcast(xi1, xi2)
        nz = x2 != 0.0
        r = np.zeros_like(x1)
        np.divide(x1, x2, out=r, where=nz)
        out = (1.0 - self._f0(x2)) * self._f(r)
        out[~nz] = 0.0
        return out.reshape(np.broadcast(np.asarray(xi1), np.asarray(xi2)).shape)

    def zeta(self, xi1, xi2):
        """Remainder symbol 1 - theta(xi1, xi2) - theta(xi2, xi1)."""
        return 1.0 - self.theta(xi1, xi2) - self.theta(xi2, xi1)

    def theta_grad(self, xi1, xi2):
        """Analytic (d/dxi1, d/dxi2) of theta, zero where xi2 = 0."""
        x1, x2 = self._broadcast(xi1, xi2)
        nz = x2 != 0.0
        r = np.zeros_like(x1)
        np.divide(x1, x2, out=r, where=nz)
        one_m_f0 = 1.0 - self._f0(x2)
        fp = self._f_prime(r)
        g1 = np.zeros_like(x1)
        g2 = np.zeros_like(x1)
        np.divide(one_m_f0 * fp, x2, out=g1, where=nz)
        ratio = np.zeros_like(x1)
        np.divide(x1, x2**2, out=ratio, where=nz)
        g2 = -self._f0_prime(x2) * self._f(r) - one_m_f0 * fp * ratio
        g2[~nz] = 0.0
        shape = np.broadcast(np.asarray(xi1), np.asarray(xi2)).shape
        return g1.reshape(shape), g2.reshape(shape)

    def s_symbol(self, xi1, xi2):
        """Scalar symbol of S_B: -(xi1 d1 + xi2 d2) theta."""
        g1, g2 = self.theta_grad(xi1, xi2)
        return -(np.asarray(xi1, dtype=float) * g1 + np.asarray(xi2, dtype=float) * g2)


# ---------------------------------------------------------------------------
# Lattice tables and convolution kernel
# ---------------------------------------------------------------------------

_TABLE_CACHE = {}


class _Tables:
    """Per-(grid, cutoff) lattice tables used by the double-sum kernel."""

    def __init__(self, grid, cutoff):
        n = grid.n_modes
        k = grid.k_indices
        xi = grid.wavenumbers
        self.xi1 = xi[:, None] + np.zeros((1, n))
        self.xi2 = np.zeros((n, 1)) + xi[None, :]
        ksum = k[:, None] + k[None, :]
        band = np.abs(ksum) <= n // 2 - 1
        in_band = grid.band_mask
        band &= in_band[:, None] & in_band[None, :]
        # flat target bin (mod n maps negative k to FFT position)
        self.target = np.where(band, ksum % n, n)  # bin n collects dropped pairs
        self.band = band
        self.n = n
        self.theta = cutoff.theta(self.xi1, self.xi2) if cutoff is not None else None
        self.zeta = cutoff.zeta(self.xi1, self.xi2) if cutoff is not None else None
        self.s_sym = cutoff.s_symbol(self.xi1, self.xi2) if cutoff is not None else None


def bilinear_tables(grid, cutoff=None):
    key = (grid.n_modes, grid.box_length, None if cutoff is None
           else (cutoff.eps1, cutoff.eps2))
    tab = _TABLE_CACHE.get(key)
    if tab is None:
        tab = _Tables(grid, cutoff)
        _TABLE_CACHE[key] = tab
    return tab


def _accumulate(grid, weighted):
    """Sum an (N, N) weighted pair array into output modes k1 + k2."""
    tab = bilinear_tables(grid)
    flat = weighted.ravel()
    tgt = tab.target.ravel()
    re = np.bincount(tgt, weights=flat.real, minlength=grid.n_modes + 1)
    im = np.bincount(tgt, weights=flat.imag, minlength=grid.n_modes + 1)
    out = re[: grid.n_modes] + 1j * im[: grid.n_modes]
    out[grid.nyquist_index] = 0.0
    return out


def _pair_weight(symbol2d, ahat, bhat):
    return (ahat[:, None] * symbol2d) * bhat[None, :]


def paraproduct(a, b, cutoff):
    """T_a b: low frequencies of a against high frequencies of b."""
    a._same_grid(b)
    tab = bilinear_tables(a.grid, cutoff)
    w = _pair_weight(tab.theta, a.coeffs, b.coeffs)
    return FourierField(a.grid, _accumulate(a.grid, w))


def remainder(a, b, cutoff):
    """R_B(a, b) = ab - T_a b - T_b a, evaluated as the zeta bilinear multiplier."""
    a._same_grid(b)
    tab = bilinear_tables(a.grid, cutoff)
    w = _pair_weight(tab.zeta, a.coeffs, b.coeffs)
    return FourierField(a.grid, _accumulate(a.grid, w))


def remainder_difference_form(a, b, cutoff):
    """R_B via its definition; equals the multiplier form to roundoff."""
    return mul(a, b) - paraproduct(a, b, cutoff) - paraproduct(b, a, cutoff)


def s_bilinear(a, b, cutoff):
    """S_B(a, b): bilinear operator with scalar symbol -xi . grad theta."""
    a._same_grid(b)
    tab = bilinear_tables(a.grid, cutoff)
    w = _pair_weight(tab.s_sym, a.coeffs, b.coeffs)
    return FourierField(a.grid, _accumulate(a.grid, w))


def paradifferential(symbol_columns, u, cutoff):
    """Operator with (x, xi) symbol a(x, xi).

    symbol_columns[m, j] holds the m-th x-Fourier coefficient of
    x -> a(x, xi_j); columns for modes with |xi_j| < 1/2 may hold anything
    finite since the cutoff annihilates them.
    """
    grid = u.grid
    cols = np.asarray(symbol_columns, dtype=np.complex128)
    if cols.shape != (grid.n_modes, grid.n_modes):
        raise ValueError("symbol table does not match grid")
    if not np.all(np.isfinite(cols.view(np.float64))):
        raise ValueError("non-finite symbol value on a retained mode")
    tab = bilinear_tables(grid, cutoff)
    w = (tab.theta * cols) * u.coeffs[None, :]
    return FourierField(grid, _accumulate(grid, w))


def symbol_columns_from_function(grid, sym_xy):
    """Tabulate a(x, xi): sym_xy(x_array, xi_scalar) -> values of a(., xi)."""
    cols = np.empty((grid.n_modes, grid.n_modes), dtype=np.complex128)
    x = grid.x
    n = grid.n_modes
    phase = grid._phase()
    for j, xi in enumerate(grid.wavenumbers):
        vals = np.asarray(sym_xy(x, xi), dtype=np.complex128)
        cols[:, j] = phase * np.fft.fft(vals) / n
    return cols


# ---------------------------------------------------------------------------
# Matrix-valued bilinear symbols and Op^B
# ---------------------------------------------------------------------------

_SUPPORT_TAGS = ("lowhigh", "highhigh", "general")


@dataclass(frozen=True)
class BilinearSymbol:
    """2x2 matrix symbol sampled on the retained mode lattice.

    values has shape (2, 2, N, N) indexed by (i, j, k1, k2).  The support
    tag records the structural class; `validate_support` checks it.
    """

    grid: Grid
    values: np.ndarray
    support_tag: str = "general"
    lowhigh_c: float = 0.5
    highhigh_C: float = 2.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.complex128)
        n = self.grid.n_modes
        if v.shape != (2, 2, n, n):
            raise ValueError("symbol values must have shape (2, 2, N, N)")
        if not np.all(np.isfinite(v.view(np.float64))):
            raise ValueError("NaN/inf in symbol values")
        if self.support_tag not in _SUPPORT_TAGS:
            raise ValueError(f"unknown support tag {self.support_tag!r}")
        object.__setattr__(self, "values", v)

    def validate_support(self, tol=0.0):
        tab = bilinear_tables(self.grid)
        a1, a2 = np.abs(tab.xi1), np.abs(tab.xi2)
        if self.support_tag == "lowhigh":
            outside = ~((a2 >= 1.0) & (a1 <= self.lowhigh_c * a2))
        elif self.support_tag == "highhigh":
            outside = ~(np.abs(tab.xi1 + tab.xi2)
                        <= self.highhigh_C * (1.0 + np.minimum(a1, a2)))
        else:
            return True
        mx = np.max(np.abs(self.values[:, :, outside])) if np.any(outside) else 0.0
        return mx <= tol


def symbol_on_lattice(grid, fn, support_tag="general", **kw):
    """Build a BilinearSymbol by evaluating fn(xi1, xi2) -> (2,2,...) arrays."""
    tab = bilinear_tables(grid)
    vals = np.asarray(fn(tab.xi1, tab.xi2), dtype=np.complex128)
    return BilinearSymbol(grid, vals, support_tag, **kw)


def reflect_matrix_symbol(grid, fn):
    """Adjoint-reflected symbol function: conj(fn(-xi1, xi1+xi2))^T."""
    def refl(xi1, xi2):
        v = np.conj(np.asarray(fn(-xi1, xi1 + xi2)))
        return np.swapaxes(v, 0, 1)
    return refl


def op_bilinear_scalar(vhat, symbol2d, fhat, grid):
    """Scalar Op^B: out(k) = sum over k1+k2=k of v(k1) S(k1,k2) f(k2)."""
    w = _pair_weight(symbol2d, vhat, fhat)
    return _accumulate(grid, w)


def op_bilinear(v, A, f_pair):
    """Op^B[v, A]f for a scalar field v, matrix symbol A, pair f = (f1, f2)."""
    f1, f2 = f_pair
    grid = v.grid
    f1._same_grid(v)
    f2._same_grid(v)
    if A.grid != grid:
        raise ValueError("symbol grid mismatch")
    out = []
    for i in range(2):
        acc = op_bilinear_scalar(v.coeffs, A.values[i, 0], f1.coeffs, grid)
        acc = acc + op_bilinear_scalar(v.coeffs, A.values[i, 1], f2.coeffs, grid)
        out.append(FourierField(grid, acc))
    return out[0], out[1]
