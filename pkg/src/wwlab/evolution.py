"""Time evolution of the free-surface system, its Hamiltonian, the exact
kinematic and dynamic identities, and the symmetrized paradifferential system.

State convention: eta carries zero mean (mass gauge) and the zero mode of psi
is fixed to 0 (the potential trace is defined modulo constants).  Both gauges
are re-fixed after every integrator stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dirichlet_neumann import (
    DNParams,
    SurfaceDiagnostics,
    bv_from_g,
    dn_apply,
    dn_apply_with_strip,
    traces,
)
from .paradiff import (
    CutoffTheta,
    paradifferential,
    paraproduct,
    remainder,
)
from .spectral import (
    FourierField,
    abs_d,
    dx,
    l2_inner,
    mul,
)

__all__ = [
    "SurfaceState",
    "SymmetrizedState",
    "make_state",
    "rhs",
    "rhs_reduced",
    "step_rk4",
    "hamiltonian",
    "dt_dn",
    "identity_residuals",
    "symmetrize",
    "qsc_apply",
    "time_derivatives",
]


class BlowUpError(RuntimeError):
    pass


def _gauge(field, zero_mean=True):
    c = field.coeffs.copy()
    if zero_mean:
        c[0] = 0.0
    c[field.grid.nyquist_index] = 0.0
    return FourierField(field.grid, c)


@dataclass(frozen=True)
class SurfaceState:
    """Snapshot (t, eta, psi) of the free surface."""

    t: float
    eta: FourierField
    psi: FourierField

    @property
    def grid(self):
        return self.eta.grid


def make_state(t, eta, psi):
    eta._same_grid(psi)
    return SurfaceState(float(t), _gauge(eta), _gauge(psi))


@dataclass(frozen=True)
class SymmetrizedState:
    """(u, U) of the paradifferential normal-form analysis:
    u = (eta, |D|^(1/2) psi), U = (eta + T_alpha eta, |D|^(1/2) omega)."""

    u1: FourierField
    u2: FourierField
    U1: FourierField
    U2: FourierField


# ---------------------------------------------------------------------------
# Right-hand side and integrator
# ---------------------------------------------------------------------------

def _dpsi_primary(eta, psi, G):
    """d_t psi from the surface Bernoulli equation (primary form)."""
    etapv = dx(eta).values()
    psipv = dx(psi).values()
    quad = (G.values() + etapv * psipv) ** 2 / (2.0 * (1.0 + etapv**2))
    vals = -eta.values() - 0.5 * psipv**2 + quad
    return FourierField.from_values(eta.grid, vals)


def _dpsi_reduced(eta, psi, G):
    """Equivalent reduced form -eta - V^2/2 - B V eta_x + B^2/2."""
    B, V = bv_from_g(eta, psi, G)
    bv, vv = B.values(), V.values()
    vals = -eta.values() - 0.5 * vv**2 - bv * vv * dx(eta).values() + 0.5 * bv**2
    return FourierField.from_values(eta.grid, vals)


def rhs(state, params=DNParams(), warm=None, reduced=False, with_strip=False):
    """(d_t eta, d_t psi) of the water-wave system at the given state."""
    G, strip = dn_apply_with_strip(state.eta, state.psi, params=params, warm=warm)
    form = _dpsi_reduced if reduced else _dpsi_primary
    dpsi = _gauge(form(state.eta, state.psi, G))
    deta = _gauge(G)
    if with_strip:
        return deta, dpsi, strip
    return deta, dpsi


def rhs_reduced(state, params=DNParams(), warm=None):
    return rhs(state, params=params, warm=warm, reduced=True)


def step_rk4(state, dt, params=DNParams(), warm=None, return_strip=False):
    """Classical four-stage explicit step; gauges re-fixed after each stage."""
    if dt == 0.0:
        return (state, warm) if return_strip else state
    t, eta, psi = state.t, state.eta, state.psi
    k1e, k1p, strip = rhs(state, params=params, warm=warm, with_strip=True)
    s2 = SurfaceState(t + 0.5 * dt, _gauge(eta + 0.5 * dt * k1e),
                      _gauge(psi + 0.5 * dt * k1p))
    k2e, k2p, strip = rhs(s2, params=params, warm=strip, with_strip=True)
    s3 = SurfaceState(t + 0.5 * dt, _gauge(eta + 0.5 * dt * k2e),
                      _gauge(psi + 0.5 * dt * k2p))
    k3e, k3p, strip = rhs(s3, params=params, warm=strip, with_strip=True)
    s4 = SurfaceState(t + dt, _gauge(eta + dt * k3e), _gauge(psi + dt * k3p))
    k4e, k4p, strip = rhs(s4, params=params, warm=strip, with_strip=True)
    w = dt / 6.0
    new_eta = _gauge(eta + w * (k1e + 2.0 * k2e + 2.0 * k3e + k4e))
    new_psi = _gauge(psi + w * (k1p + 2.0 * k2p + 2.0 * k3p + k4p))
    if not (np.all(np.isfinite(new_eta.coeffs.view(np.float64)))
            and np.all(np.isfinite(new_psi.coeffs.view(np.float64)))):
        raise BlowUpError(f"non-finite state after step at t = {t:.6g}")
    out = SurfaceState(t + dt, new_eta, new_psi)
    return (out, strip) if return_strip else out


def hamiltonian(state, params=DNParams(), G=None):
    """Energy (1/2) int eta^2 + (1/2) int psi G(eta) psi dx."""
    if G is None:
        G = dn_apply(state.eta, state.psi, params=params)
    return 0.5 * l2_inner(state.eta, state.eta) + 0.5 * l2_inner(state.psi, G)


# ---------------------------------------------------------------------------
# Shape derivative in time and exact identities
# ---------------------------------------------------------------------------

def dt_dn(state, params=DNParams(), pieces=None):
    """d_t[G(eta)psi] by the shape-derivative formula
    G(eta)(d_t psi - B d_t eta) - d_x(V d_t eta)."""
    if pieces is None:
        deta, dpsi, strip = rhs(state, params=params, with_strip=True)
        G = deta
        B, V = bv_from_g(state.eta, state.psi, G)
    else:
        G, B, V, deta, dpsi, strip = pieces
    inner = FourierField.from_values(
        state.grid, dpsi.values() - B.values() * deta.values())
    G_inner = dn_apply(state.eta, inner, params=params, warm=strip)
    transport = FourierField.from_values(
        state.grid, V.values() * deta.values())
    return G_inner - dx(transport)


def time_derivatives(state, params=DNParams(), cutoff=None, diag=None):
    """Analytic time derivatives of the trace quantities.

    Returns a dict with deta, dpsi, dG, dB, dV, and the diagnostics used;
    everything is assembled by the chain rule through the shape-derivative
    formula, never by time differencing.
    """
    cutoff = cutoff or CutoffTheta()
    if diag is None:
        diag = traces(state.eta, state.psi, cutoff=cutoff, params=params)
    G, B, V = diag.G, diag.B, diag.V
    deta, dpsi, strip = rhs(state, params=params, with_strip=True)
    dG = dt_dn(state, params=params,
               pieces=(G, B, V, deta, dpsi, strip))
    etapv = dx(state.eta).values()
    detapv = dx(deta).values()
    dpsipv = dx(dpsi).values()
    bv = B.values()
    dBv = (dG.values() + detapv * dx(state.psi).values() + etapv * dpsipv
           - 2.0 * bv * etapv * detapv) / (1.0 + etapv**2)
    dB = FourierField.from_values(state.grid, dBv)
    dVv = dpsipv - dBv * etapv - bv * detapv
    dV = FourierField.from_values(state.grid, dVv)
    return {
        "deta": deta, "dpsi": dpsi, "dG": dG, "dB": dB, "dV": dV,
        "diag": diag,
    }


def _rel_l2(num, den_scale):
    return num / max(den_scale, 1e-300)


def identity_residuals(state, params=DNParams(), cutoff=None):
    """Relative L^2 residuals of the exact surface identities.

    The kinematic residuals are algebraic in the computed traces and sit at
    roundoff; the dynamic one (transport of V) and the cross-check of the two
    Taylor-coefficient formulas converge under refinement.
    """
    cutoff = cutoff or CutoffTheta()
    grid = state.grid
    der = time_derivatives(state, params=params, cutoff=cutoff)
    diag = der["diag"]
    deta, dpsi, dB, dV = der["deta"], der["dpsi"], der["dB"], der["dV"]
    B, V, a = diag.B, diag.V, diag.a
    ev, pv = state.eta.values(), state.psi.values()
    bv, vv, av = B.values(), V.values(), a.values()
    etapv = dx(state.eta).values()
    scale = max(np.sqrt(np.mean(deta.values() ** 2)), 1e-300)

    def rms(vals):
        return float(np.sqrt(np.mean(vals**2)))

    # kinematic identity: d_t eta = B - V eta_x
    r_kin = rms(deta.values() - (bv - vv * etapv)) / scale
    # the two Bernoulli forms agree identically
    prim = _dpsi_primary(state.eta, state.psi, diag.G)
    red = _dpsi_reduced(state.eta, state.psi, diag.G)
    r_bern = rms(prim.values() - red.values()) / max(rms(prim.values()), 1e-300)
    # transport form: d_t psi + V psi_x = -eta + V^2/2 + B^2/2
    lhs = dpsi.values() + vv * dx(state.psi).values()
    rhs_v = -ev + 0.5 * vv**2 + 0.5 * bv**2
    r_transport = rms(lhs - rhs_v) / max(rms(rhs_v), scale * 1e-6, 1e-300)
    # dynamic identity: d_t V + V V_x + a eta_x = 0
    dyn = dV.values() + vv * dx(V).values() + av * etapv
    r_dyn = rms(dyn) / max(rms(av * etapv), 1e-300)
    # Taylor coefficient: 1 + d_t B + V B_x against the trace formula
    a_dynamic = 1.0 + dB.values() + vv * dx(B).values()
    r_a = rms(a_dynamic - av) / max(rms(av), 1e-300)
    return {
        "kinematic": r_kin,
        "bernoulli_forms": r_bern,
        "transport": r_transport,
        "dynamic": r_dyn,
        "taylor_coefficient": r_a,
    }


# ---------------------------------------------------------------------------
# Symmetrized system and its quadratic/cubic operators
# ---------------------------------------------------------------------------

def symmetrize(state, params=DNParams(), cutoff=None, diag=None):
    """(u, U) with U1 = eta + T_alpha eta and U2 = |D|^(1/2) omega."""
    cutoff = cutoff or CutoffTheta()
    if diag is None:
        diag = traces(state.eta, state.psi, cutoff=cutoff, params=params)
    u1 = state.eta
    u2 = abs_d(state.psi, 0.5)
    U1 = state.eta + paraproduct(diag.alpha, state.eta, cutoff)
    U2 = abs_d(diag.omega, 0.5)
    return SymmetrizedState(u1, u2, U1, U2)


def _d_pair(f1, f2):
    """Linear part D = (0, -|D|^(1/2); |D|^(1/2), 0) applied to a pair."""
    return -abs_d(f2, 0.5), abs_d(f1, 0.5)


def _symbol_columns(grid, coeff_vals, power):
    """Columns of the (x, xi) symbol coeff(x) |xi|^power (0 for |xi| < 1/2)."""
    n = grid.n_modes
    phase = grid._phase()
    base = phase * np.fft.fft(coeff_vals) / n
    cols = np.zeros((n, n), dtype=np.complex128)
    for j, xi in enumerate(grid.wavenumbers):
        if abs(xi) >= 0.5:
            cols[:, j] = base * abs(xi) ** power
    return cols


def qsc_apply(sym, which, cutoff=None, diag=None):
    """Apply D, Q(u), S(u) or C(u) to the pair U = (U1, U2).

    C requires the trace diagnostics (V and alpha).
    """
    cutoff = cutoff or CutoffTheta()
    U1, U2 = sym.U1, sym.U2
    grid = U1.grid
    if which == "D":
        out = _d_pair(U1, U2)
        return out
    if which == "Q":
        w = dx(abs_d(sym.u2, -0.5))  # d_x |D|^(-1/2) u2
        half_eta = -0.5 * abs_d(sym.u1)  # symbol -(1/2)|D| u1
        row1 = (
            paraproduct(w, dx(U1), cutoff)
            - 0.5 * paraproduct(abs_d(sym.u2, 1.5), U1, cutoff)
            - paraproduct(half_eta, abs_d(U2, 0.5), cutoff)
        )
        cols = _symbol_columns(grid, w.values(), -0.5)
        row2 = abs_d(paradifferential(cols, dx(U2), cutoff), 0.5) + abs_d(
            paraproduct(half_eta, U1, cutoff), 0.5
        )
        return row1, row2
    if which == "S":
        g_hi = abs_d(sym.u2, 0.5)  # |D|^(1/2) u2 = |D| psi
        g_lo = dx(abs_d(sym.u2, -0.5))  # d_x |D|^(-1/2) u2 = psi_x
        row1 = abs_d(remainder(g_hi, U1, cutoff)) + dx(remainder(g_lo, U1, cutoff))
        row2 = 0.5 * abs_d(
            remainder(g_lo, dx(abs_d(U2, -0.5)), cutoff)
            - remainder(g_hi, abs_d(U2, 0.5), cutoff),
            0.5,
        )
        return row1, row2
    if which == "C":
        if diag is None:
            raise ValueError("C(u) needs the trace diagnostics")
        v_minus = FourierField.from_values(
            grid, diag.V.values() - dx(abs_d(sym.u2, -0.5)).values())
        coeff = FourierField.from_values(
            grid, diag.alpha.values() + 0.5 * abs_d(sym.u1).values())
        row1 = paraproduct(v_minus, dx(U1), cutoff) - paraproduct(
            coeff, abs_d(U2, 0.5), cutoff
        )
        cols = _symbol_columns(grid, v_minus.values(), -0.5)
        row2 = abs_d(paradifferential(cols, dx(U2), cutoff), 0.5) + abs_d(
            paraproduct(coeff, U1, cutoff), 0.5
        )
        return row1, row2
    raise ValueError(f"unknown operator {which!r}")
