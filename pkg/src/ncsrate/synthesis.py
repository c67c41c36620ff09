"""SNR-constrained coder synthesis.

The controller is an observer-based stabilizer plus an FIR Youla parameter,
so every closed-loop map from d is affine in the parameter. The auxiliary
noise q' reaches the control through a monic map M_u A_s (M_u carries the
unstable plant modes, A_s is a free monic FIR), and the coder output filter
is F = 1/W with W a monic FIR that whitens the channel input.

For fixed noise variance s2 the Lagrangian

    |E|^2 + s2 |P12 G|^2 + lam (|W G|^2 - 1 + |W U|^2 / s2)

is a convex quadratic in each of the blocks Q, A_s and W, and has the form
a + b s2 + c / s2 in s2. Block-coordinate descent over these four blocks is
used to trace the trade-off between distortion and SNR.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as la
from scipy.optimize import minimize, minimize_scalar
from scipy.signal import lfilter

from .lti import (STABILITY_MARGIN, ClosedLoopMaps, RationalTF, StateSpace, freq_grid, h2_norm_sq,
                  pbh_hidden_modes)

SIGMA_MIN = 1e-12
SIGMA_MAX = 1e12
# gap between the upper and lower rate bounds, in nats
RATE_GAP_NATS = 0.5 * math.log(2.0 * math.pi * math.e / 12.0) + math.log(2.0)


class ConvergenceError(RuntimeError):
    """Alternation hit its iteration cap; ``point`` holds the best iterate."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class DegenerateProblemError(ValueError):
    """The noise has no path to the performance output (or d none to y)."""


@dataclass(frozen=True)
class SolverOptions:
    youla_order: int = 32
    whitening_order: int = None     # None: same as youla_order; 0: F = 1
    restarts: int = 5
    max_iter: int = 500
    tol: float = 1e-9
    seed: int = 0
    strict: bool = True             # raise on non-convergence

    @property
    def n_w(self):
        return self.youla_order if self.whitening_order is None else self.whitening_order

    def to_dict(self):
        return {"youla_order": self.youla_order, "whitening_order": self.n_w, "restarts": self.restarts,
                "max_iter": self.max_iter, "tol": self.tol, "seed": self.seed, "strict": self.strict}


@dataclass(frozen=True)
class CoderDesign:
    """Linear source coding scheme u' = F w', w' = v' + q',
    v' = L_y y' + L_w z^-1 w', with white q' of variance sigma_q_sq."""
    F: RationalTF
    L_w: RationalTF
    L_y: RationalTF
    sigma_q_sq: float

    def __post_init__(self):
        if not (np.isfinite(self.sigma_q_sq) and self.sigma_q_sq > 0):
            raise ValueError("sigma_q_sq must be finite and positive, got %r" % self.sigma_q_sq)
        for name in ("F", "L_y"):
            if not getattr(self, name).is_proper:
                raise ValueError("%s must be proper" % name)
        if not (self.L_w * RationalTF.delay(1)).is_proper:
            raise ValueError("L_w z^-1 must be proper")

    @property
    def delta(self):
        """Quantizer step whose uniform noise has variance sigma_q_sq."""
        return math.sqrt(12.0 * self.sigma_q_sq)

    def to_dict(self):
        return {"F": self.F.to_dict(), "L_w": self.L_w.to_dict(), "L_y": self.L_y.to_dict(),
                "sigma_q_sq": float(self.sigma_q_sq)}

    @classmethod
    def from_dict(cls, doc):
        return cls(RationalTF.from_dict(doc["F"]), RationalTF.from_dict(doc["L_w"]),
                   RationalTF.from_dict(doc["L_y"]), float(doc["sigma_q_sq"]))


@dataclass
class FrontierPoint:
    D: float
    gamma: float
    sigma_v_sq: float
    design: CoderDesign
    lower_rate_nats: float
    upper_rate_nats: float
    lam: float = float("nan")
    cost: float = float("nan")
    converged: bool = True
    iterations: int = 0
    residual: float = 0.0

    @classmethod
    def make(cls, D, gamma, design, **extra):
        gamma = max(float(gamma), 0.0)
        lo, hi = rate_bounds(gamma)
        return cls(D=float(D), gamma=gamma, sigma_v_sq=gamma * design.sigma_q_sq, design=design,
                   lower_rate_nats=lo, upper_rate_nats=hi, **extra)

    @property
    def lower_bits(self):
        return nats_to_bits(self.lower_rate_nats)

    @property
    def upper_bits(self):
        return nats_to_bits(self.upper_rate_nats)

    def summary(self):
        return {"D": self.D, "gamma": self.gamma, "sigma_v_sq": self.sigma_v_sq,
                "sigma_q_sq": self.design.sigma_q_sq, "lower_bits": self.lower_bits,
                "upper_bits": self.upper_bits, "lambda": self.lam, "cost": self.cost,
                "converged": self.converged, "iterations": self.iterations, "residual": self.residual}


@dataclass
class SnrFrontier:
    points: list
    fingerprint: str
    metadata: dict = field(default_factory=dict)

    @property
    def D(self):
        return np.array([p.D for p in self.points])

    @property
    def gamma(self):
        return np.array([p.gamma for p in self.points])


# ---------------------------------------------------------------- rate helpers

def nats_to_bits(x):
    return x / math.log(2.0)


def rate_bounds(gamma):
    """(lower, upper) bounds on the average data rate in nats per sample."""
    if not gamma >= 0:
        raise ValueError("gamma must be nonnegative, got %r" % gamma)
    lower = 0.5 * math.log1p(gamma)
    return lower, lower + RATE_GAP_NATS


# ---------------------------------------------------------------- Riccati layer

def _dare(A, B, Q, R, S):
    """Stabilizing DARE solution; singular R is regularized if scipy refuses it."""
    n, m = B.shape
    scale = max(1.0, np.linalg.norm(Q), np.linalg.norm(B) ** 2)
    for eps in (0.0, 1e-12, 1e-10, 1e-8):
        Rr = R + eps * scale * np.eye(m)
        try:
            X = la.solve_discrete_are(A, B, Q, Rr, s=S)
        except (np.linalg.LinAlgError, ValueError):
            continue
        H = B.T @ X @ B + Rr
        if np.all(np.isfinite(X)) and np.min(np.linalg.eigvalsh(0.5 * (H + H.T))) > 1e-13 * scale:
            K = -la.solve(H, B.T @ X @ A + S.T)
            if np.all(np.abs(la.eigvals(A + B @ K)) < 1.0 - STABILITY_MARGIN):
                return X, Rr
    raise ValueError("Riccati equation has no stabilizing solution")


@dataclass
class ObserverController:
    """Riccati-based stabilizer: state feedback F, observer gain L and the
    optimal direct terms F0, L0."""
    F: np.ndarray
    F0: np.ndarray
    L: np.ndarray
    L0: np.ndarray


def _check_feasible(plant):
    unc, uno = pbh_hidden_modes(plant.A, plant.B2, plant.C2)
    if unc:
        raise ValueError("(A, B2) is not stabilizable: PBH rank test fails at %s" % np.round(unc, 6).tolist())
    if uno:
        raise ValueError("(C2, A) is not detectable: PBH rank test fails at %s" % np.round(uno, 6).tolist())


def observer_controller(plant):
    _check_feasible(plant)
    A, B1, B2, C1, C2 = plant.A, plant.B1, plant.B2, plant.C1, plant.C2
    D11, D12, D21 = plant.D11, plant.D12, plant.D21
    X, R = _dare(A, B2, C1.T @ C1, D12.T @ D12, C1.T @ D12)
    H = B2.T @ X @ B2 + R
    F = -la.solve(H, B2.T @ X @ A + D12.T @ C1)
    F0 = -la.solve(H, B2.T @ X @ B1 + D12.T @ D11)
    Y, Rf = _dare(A.T, C2.T, B1 @ B1.T, D21 @ D21.T, B1 @ D21.T)
    Sig = C2 @ Y @ C2.T + Rf
    L = (A @ Y @ C2.T + B1 @ D21.T) @ np.linalg.inv(Sig)
    L0 = (F @ Y @ C2.T + F0 @ D21.T) @ np.linalg.inv(Sig)
    return ObserverController(F, F0, L, L0)


def _youla_system(plant, ctrl):
    """Closed loop of the base controller with Youla input eta and innovation nu.

    State [xhat; xtilde]. Returns A and the (B, C, D) pieces for inputs d, eta
    and outputs e, u, nu.
    """
    n = plant.n_states
    A, B1, B2, C1, C2 = plant.A, plant.B1, plant.B2, plant.C1, plant.C2
    D11, D12, D21 = plant.D11, plant.D12, plant.D21
    F, L = ctrl.F, ctrl.L
    Acl = np.block([[A + B2 @ F, L @ C2], [np.zeros((n, n)), A - L @ C2]])
    Bd = np.vstack([L @ D21, B1 - L @ D21])
    Beta = np.vstack([B2, np.zeros((n, 1))])
    Ce = np.hstack([C1 + D12 @ F, C1])
    Cu = np.hstack([F, np.zeros((1, n))])
    Cnu = np.hstack([np.zeros((1, n)), C2])
    return dict(A=Acl, Bd=Bd, Beta=Beta, Ce=Ce, Cu=Cu, Cnu=Cnu, D11=D11, D12=D12, D21=D21)


def compute_Dinf(plant):
    """Infimal steady-state variance of e over all stabilizing controllers (LQG cost)."""
    ctrl = observer_controller(plant)
    y = _youla_system(plant, ctrl)
    L0 = ctrl.L0
    A = y["A"] + y["Beta"] @ L0 @ y["Cnu"]
    B = y["Bd"] + y["Beta"] @ L0 @ y["D21"]
    C = y["Ce"] + y["D12"] @ L0 @ y["Cnu"]
    D = y["D11"] + y["D12"] @ L0 @ y["D21"]
    return h2_norm_sq(StateSpace(A, B, C, D))


# ---------------------------------------------------------------- Youla model

def _impulse(A, B, C, D, length):
    h = np.zeros((length, C.shape[0], B.shape[1]))
    h[0] = D
    X = B.copy()
    for k in range(1, length):
        h[k] = C @ X
        X = A @ X
    return h


def _conv_time(a, b, length):
    """Matrix-valued convolution along axis 0, truncated: (T,p,r)*(T,r,m)."""
    out = np.zeros((length, a.shape[1], b.shape[2]))
    for i in range(a.shape[1]):
        for j in range(b.shape[2]):
            for r in range(a.shape[2]):
                out[:, i, j] += np.convolve(a[:, i, r], b[:, r, j])[:length]
    return out


def _shift_basis(h, first, last):
    """Columns z^-k h for k = first..last, each flattened over channels.
    ``h`` has shape (T, channels)."""
    T, c = h.shape
    M = np.zeros((T, c, last - first + 1))
    for j, k in enumerate(range(first, last + 1)):
        if k < T:
            M[k:, :, j] = h[:T - k]
    return M.reshape(T * c, -1)


def _fir(coeffs, h):
    """Apply FIR (ascending z^-1 coefficients) along axis 0, truncated."""
    return lfilter(coeffs, [1.0], h, axis=0)


def _lstsq_shift(base, basis):
    """argmin_c |base + basis c|."""
    c, *_ = np.linalg.lstsq(basis, -base, rcond=None)
    return c


def _char_poly(M):
    return np.real(np.poly(la.eigvals(M))) if M.size else np.ones(1)


def _shared_numerators(A, B, C, D):
    """Numerators of C (zI - A)^-1 B + D over the common denominator det(zI - A).

    Returns (den, nums) with nums[i][j] of length n + 1 (descending z, which is
    also ascending z^-1 for a proper system of order n).
    """
    n = A.shape[0]
    poles = la.eigvals(A)
    den = np.real(np.poly(poles))
    npts = n + 1
    for shift in (0.37, 0.61, 0.13, 0.89):
        zs = np.exp(2j * np.pi * (np.arange(npts) + shift) / npts)
        if np.min(np.abs(zs[:, None] - poles[None, :])) > 1e-6:
            break
    V = zs[:, None] ** np.arange(n, -1, -1)[None, :]
    resp = np.array([C @ la.solve(z * np.eye(n) - A, B) for z in zs])
    resp = resp * np.polyval(den, zs)[:, None, None]
    nums = np.real(np.linalg.solve(V, resp.reshape(npts, -1))).reshape(npts, *D.shape)
    nums = nums + den[:, None, None] * D[None]
    return den, nums


class RealizationError(RuntimeError):
    """The optimized parameters do not yield admissible coder filters."""


def _negligible(x, ref, rtol=1e-12):
    """True when ``x`` is rounding residue relative to ``ref`` (or to 1)."""
    return float(np.max(np.abs(x))) <= rtol * max(1.0, float(np.max(np.abs(ref))))


class _YoulaModel:
    """Impulse-response data of the Youla-parametrized closed loop."""

    def __init__(self, plant, youla_order, whitening_order):
        self.plant = plant
        self.n_q = int(youla_order)
        self.n_w = int(whitening_order)
        if self.n_q < 0 or self.n_w < 0:
            raise ValueError("filter orders must be nonnegative")
        self.ctrl = observer_controller(plant)
        self.sys = _youla_system(plant, self.ctrl)
        A = plant.A
        eig = la.eigvals(A) if plant.n_states else np.zeros(0)
        unstable = np.abs(eig) >= 1.0 - STABILITY_MARGIN
        self.unstable_poles = eig[unstable]
        self.n_u = int(np.sum(unstable))
        self.m_u = np.real(np.poly(eig[unstable])) if self.n_u else np.ones(1)
        self.a_s = np.real(np.poly(eig[~unstable])) if np.any(~unstable) else np.ones(1)
        self.c_poly = _char_poly(A + plant.B2 @ self.ctrl.F)

        rho = max([np.max(np.abs(la.eigvals(self.sys["A"])))] + [0.0])
        rho = max(rho, np.max(np.abs(eig[~unstable])) if np.any(~unstable) else 0.0)
        decay = 40 if rho < 1e-3 else int(math.ceil(math.log(1e-17) / math.log(rho)))
        self.length = int(min(2 * decay + 2 * self.n_q + self.n_w + 64, 40000))
        T = self.length
        s = self.sys
        zero_eu = np.zeros((1, plant.n_d))
        self.h_ed = _impulse(s["A"], s["Bd"], s["Ce"], s["D11"], T)
        h_eeta = _impulse(s["A"], s["Beta"], s["Ce"], s["D12"], T)
        self.h_ud = _impulse(s["A"], s["Bd"], s["Cu"], zero_eu, T)
        h_ueta = _impulse(s["A"], s["Beta"], s["Cu"], np.eye(1), T)
        h_nud = _impulse(s["A"], s["Bd"], s["Cnu"], s["D21"], T)
        if _negligible(h_nud, self.h_ed):
            raise DegenerateProblemError("P21 = 0: measurement carries no information about d")
        self.He = _conv_time(h_eeta, h_nud, T)
        self.Hu = _conv_time(h_ueta, h_nud, T)
        # noise-to-control shaping: Psi = c(z) / (z^n_u a_s(z))
        psi_den = np.r_[self.a_s, np.zeros(self.n_u)]
        imp = np.zeros(T)
        imp[0] = 1.0
        self.psi = lfilter(self.c_poly, psi_den, imp)
        self.Ge = _conv_time(h_eeta, self.psi.reshape(T, 1, 1), T)[:, :, 0]   # (T, n_e)
        if _negligible(self.Ge, self.psi):
            raise DegenerateProblemError("P12 = 0: the coding noise has no path to e")
        self.Gu = np.zeros((T, 1))
        self.Gu[:len(self.m_u), 0] = self.m_u

        n_e, n_d = plant.n_e, plant.n_d
        self.E_basis = _shift_basis(self.He.reshape(T, n_e * n_d), 0, self.n_q)
        self.Pe_basis = _shift_basis(self.Ge, 1, self.n_q)
        ed = self.h_ed.reshape(-1)
        ge = self.Ge.reshape(-1)
        self._E_form = (self.E_basis.T @ self.E_basis, self.E_basis.T @ ed, float(ed @ ed))
        self._P_form = (self.Pe_basis.T @ self.Pe_basis, self.Pe_basis.T @ ge, float(ge @ ge))
        self.ed_flat = self.h_ed.reshape(-1)
        self.ud = self.h_ud.reshape(T, n_d)
        self.Hu2 = self.Hu.reshape(T, n_d)

    # maps for given parameters
    def u_map(self, q):
        """d-to-u impulse response for Youla coefficients q, shape (T, n_d)."""
        return self.ud + (_shift_basis(self.Hu2, 0, self.n_q) @ q).reshape(self.length, -1)

    def e_map(self, q):
        return self.ed_flat + self.E_basis @ q

    def g_map(self, a):
        """q'-to-u response M_u A_s (FIR), shape (T, 1)."""
        g = np.zeros((self.length, 1))
        full = np.convolve(self.m_u, np.r_[1.0, a])
        g[:len(full), 0] = full
        return g

    def pe_map(self, a):
        return self.Ge.reshape(-1) + self.Pe_basis @ a

    # block updates
    def _grams(self, W):
        """Quadratic forms of the Youla and shaping blocks for a fixed W.

        Each entry is (H, g, c0) with |base + basis x|^2 = c0 + 2 g.x + x'Hx.
        """
        WU0 = _fir(W, self.ud).reshape(-1)
        WUb = _shift_basis(_fir(W, self.Hu2), 0, self.n_q)
        WG = _fir(W, self.Gu)
        WGb = _shift_basis(WG, 1, self.n_q)
        WG0 = WG.reshape(-1)

        def form(base, basis):
            return basis.T @ basis, basis.T @ base, float(base @ base)

        return {"E": self._E_form, "U": form(WU0, WUb), "P": self._P_form, "G": form(WG0, WGb)}

    @staticmethod
    def _minimize_pair(f1, w1, f2, w2):
        H = w1 * f1[0] + w2 * f2[0]
        g = w1 * f1[1] + w2 * f2[1]
        if H.size == 0:
            return np.zeros(0), w1 * f1[2] + w2 * f2[2]
        x = -la.solve(H, g, assume_a="pos")
        return x, w1 * f1[2] + w2 * f2[2] + float(g @ x)

    def joint_step(self, W, lam, s2):
        """Exact minimization over (Q, A_s, s2) for fixed W.

        For fixed s2 the Youla and shaping blocks decouple into two
        least-squares problems, leaving a scalar search over log s2.
        """
        fm = self._grams(W)

        def profile(log_s2):
            s = math.exp(log_s2)
            q, vq = self._minimize_pair(fm["E"], 1.0, fm["U"], lam / s)
            a, va = self._minimize_pair(fm["P"], s, fm["G"], lam)
            return vq + va - lam, q, a

        if lam == 0.0:
            s2 = SIGMA_MIN
        else:
            lo, hi = math.log(SIGMA_MIN), math.log(SIGMA_MAX)
            x0 = min(max(math.log(s2), lo + 1.0), hi - 1.0)
            res = minimize_scalar(lambda x: profile(x)[0], bracket=(x0 - 0.5, x0 + 0.5), tol=1e-10)
            s2 = math.exp(min(max(res.x, lo), hi))
        _, q, a = profile(math.log(s2))
        return q, a, s2

    def whitening_step(self, a, q, s2):
        if self.n_w == 0:
            return np.ones(1)
        G = self.g_map(a)
        U = self.u_map(q) / math.sqrt(s2)
        base = np.r_[G.reshape(-1), U.reshape(-1)]
        basis = np.vstack([_shift_basis(G, 1, self.n_w), _shift_basis(U, 1, self.n_w)])
        return np.r_[1.0, _lstsq_shift(base, basis)]

    def terms(self, q, a, W):
        E = self.e_map(q)
        U = self.u_map(q)
        WU = _fir(W, U)
        WG = _fir(W, self.g_map(a))
        Pe = self.pe_map(a)
        return {"E2": float(E @ E), "WU2": float(np.sum(WU ** 2)), "WG2": float(np.sum(WG ** 2)),
                "Pe2": float(Pe @ Pe)}

    # joint least-squares form: cost + lam = |residual|^2
    def pack(self, q, a, W, s2):
        return np.r_[q, a, W[1:], math.log(s2)]

    def unpack(self, theta):
        nq, nw = self.n_q, self.n_w
        return (theta[:nq + 1], theta[nq + 1:2 * nq + 1], np.r_[1.0, theta[2 * nq + 1:2 * nq + 1 + nw]],
                math.exp(theta[-1]))

    def residual(self, theta, lam):
        q, a, W, s2 = self.unpack(theta)
        return np.r_[self.e_map(q), math.sqrt(s2) * self.pe_map(a),
                     math.sqrt(lam) * _fir(W, self.g_map(a)).reshape(-1),
                     math.sqrt(lam / s2) * _fir(W, self.u_map(q)).reshape(-1)]

    def jacobian(self, theta, lam):
        q, a, W, s2 = self.unpack(theta)
        nq, nw = self.n_q, self.n_w
        U = self.u_map(q)
        G = self.g_map(a)
        ne, npe, ng, nu = self.E_basis.shape[0], self.Pe_basis.shape[0], G.size, U.size
        su = math.sqrt(lam / s2)
        J = np.zeros((ne + npe + ng + nu, 2 * nq + 1 + nw + 1))
        rows = np.cumsum([0, ne, npe, ng, nu])
        J[rows[0]:rows[1], :nq + 1] = self.E_basis
        J[rows[3]:rows[4], :nq + 1] = su * _shift_basis(_fir(W, self.Hu2), 0, nq)
        J[rows[1]:rows[2], nq + 1:2 * nq + 1] = math.sqrt(s2) * self.Pe_basis
        J[rows[2]:rows[3], nq + 1:2 * nq + 1] = math.sqrt(lam) * _shift_basis(_fir(W, self.Gu), 1, nq)
        J[rows[2]:rows[3], 2 * nq + 1:-1] = math.sqrt(lam) * _shift_basis(G, 1, nw)
        J[rows[3]:rows[4], 2 * nq + 1:-1] = su * _shift_basis(U, 1, nw)
        J[rows[1]:rows[2], -1] = 0.5 * math.sqrt(s2) * self.pe_map(a)
        J[rows[3]:rows[4], -1] = -0.5 * su * _fir(W, U).reshape(-1)
        return J

    # realization
    def design(self, q, a, W, s2):
        """Coder filters (F, L_w, L_y) realizing the parametrized closed loop."""
        plant, ctrl = self.plant, self.ctrl
        n = plant.n_states
        Ao = plant.A - ctrl.L @ plant.C2
        if n:
            Bo = np.hstack([ctrl.L, plant.B2])
            Co = np.vstack([ctrl.F, -plant.C2])
            o, nums = _shared_numerators(Ao, Bo, Co, np.array([[0.0, 0.0], [1.0, 0.0]]))
            kxy, kxu, ny, nu = nums[:, 0, 0], nums[:, 0, 1], nums[:, 1, 0], nums[:, 1, 1]
        else:
            o = np.ones(1)
            kxy = kxu = nu = np.zeros(1)
            ny = np.ones(1)
        qpoly = np.asarray(q, dtype=float)
        As = np.r_[1.0, a]
        as0 = np.r_[self.a_s, np.zeros(self.n_u)]
        phi_zeros = np.convolve(self.c_poly, As)        # Phi = c As / as0
        # all polynomials below are in ascending powers of z^-1
        by = _padd(kxy, np.convolve(qpoly, ny))
        one_minus_bu = _padd(o, -_padd(kxu, np.convolve(qpoly, nu)))
        Ly_num = np.convolve(by, as0)
        Ly_den = np.convolve(o, phi_zeros)
        WOcA = np.convolve(W, Ly_den)
        Lwz_num = _padd(WOcA, -np.convolve(one_minus_bu, as0))
        if abs(Lwz_num[0]) > 1e-8 * max(1.0, np.max(np.abs(Lwz_num))):
            raise RealizationError("recovered L_w z^-1 is not strictly proper (%.3g)" % Lwz_num[0])
        L_w = RationalTF.from_causal(Lwz_num[1:], WOcA)
        L_y = RationalTF.from_causal(Ly_num, Ly_den)
        F = RationalTF.from_causal([1.0], W)
        return CoderDesign(F=F, L_w=L_w, L_y=L_y, sigma_q_sq=float(s2))


def _padd(a, b):
    """Add ascending-power polynomials of different lengths."""
    n = max(len(a), len(b))
    return np.r_[a, np.zeros(n - len(a))] + np.r_[b, np.zeros(n - len(b))]


# ---------------------------------------------------------------- solver

@dataclass
class _Iterate:
    q: np.ndarray
    a: np.ndarray
    W: np.ndarray
    s2: float
    cost: float = float("inf")
    terms: dict = None
    iterations: int = 0
    converged: bool = False
    residual: float = float("inf")


def _model_for(plant, opts):
    return _YoulaModel(plant, opts.youla_order, opts.n_w)


def _initial(model, rng=None, s2=1.0):
    q = np.zeros(model.n_q + 1)
    q[0] = model.ctrl.L0[0, 0]
    a = np.zeros(model.n_q)
    W = np.r_[1.0, np.zeros(model.n_w)]
    if rng is not None:
        s2 = s2 * 10.0 ** rng.uniform(-3, 3)
        W[1:] = 0.3 * rng.standard_normal(model.n_w) * 0.5 ** np.arange(model.n_w)
    return _Iterate(q, a, W, s2)


def _sigma_and_cost(t, lam):
    b, c = t["Pe2"], lam * t["WU2"]
    if b <= 1e-300:
        raise DegenerateProblemError("coding noise does not reach e (zero noise-to-e gain)")
    s2 = min(max(math.sqrt(c / b), SIGMA_MIN), SIGMA_MAX) if c > 0 else SIGMA_MIN
    return s2, t["E2"] + s2 * b + lam * (t["WG2"] - 1.0 + t["WU2"] / s2)


def _levenberg_marquardt(fun, jac, x, max_eval, tol=1e-15):
    """Minimize |fun(x)|^2 by damped Gauss-Newton steps on the normal equations."""
    r = fun(x)
    f = float(r @ r)
    mu = None
    nu = 2.0
    evals = 1
    while evals < max_eval:
        J = jac(x)
        H = J.T @ J
        g = J.T @ r
        if mu is None:
            mu = 1e-6 * float(np.max(np.diag(H)))
        if np.max(np.abs(g)) <= tol * max(f, 1e-300):
            break
        accepted = False
        while evals < max_eval:
            try:
                step = -la.solve(H + mu * np.diag(np.maximum(np.diag(H), 1e-300)), g, assume_a="pos")
            except (la.LinAlgError, ValueError):
                mu *= nu
                nu *= 2.0
                continue
            xn = x + step
            rn = fun(xn)
            evals += 1
            fn = float(rn @ rn)
            predicted = -(step @ g) - 0.5 * float(step @ (H @ step))
            if fn < f:
                ratio = (f - fn) / max(predicted, 1e-300)
                mu *= max(1.0 / 3.0, 1.0 - (2.0 * ratio - 1.0) ** 3)
                nu = 2.0
                small = (f - fn) <= tol * f
                x, r, f = xn, rn, fn
                accepted = True
                break
            mu *= nu
            nu *= 2.0
            if np.linalg.norm(step) <= tol * (np.linalg.norm(x) + tol):
                break
        if not accepted or small:
            break
    return x, evals


WARM_SWEEPS = 20


def _sweep(model, lam, W, s2):
    q, a, s2 = model.joint_step(W, lam, s2)
    W = model.whitening_step(a, q, s2)
    t = model.terms(q, a, W)
    s2, cost = _sigma_and_cost(t, lam)
    return q, a, W, s2, t, cost


def _alternate(model, lam, it, opts):
    """Block-coordinate descent, polished by a joint Levenberg-Marquardt solve.

    Blocks: the whitening filter W, and the triple (Q, A_s, s2) which is
    minimized exactly for fixed W. Convergence is declared when a further
    sweep lowers the cost by less than ``opts.tol`` relative.
    """
    W, s2 = it.W, it.s2
    prev = float("inf")
    sweeps = 0
    residual = float("inf")
    converged = False
    for sweeps in range(1, min(WARM_SWEEPS, opts.max_iter) + 1):
        q, a, W, s2, t, cost = _sweep(model, lam, W, s2)
        residual = (prev - cost) / max(abs(cost), 1e-300)
        converged = np.isfinite(prev) and residual < opts.tol
        prev = cost
        if converged:
            break
    evals = 0
    if not converged and lam > 0 and (model.n_q or model.n_w):
        theta, evals = _levenberg_marquardt(lambda th: model.residual(th, lam),
                                            lambda th: model.jacobian(th, lam),
                                            model.pack(q, a, W, s2), max(opts.max_iter - sweeps, 1))
        fit_x = theta
        q2, a2, W2, _ = model.unpack(fit_x)
        t2 = model.terms(q2, a2, W2)
        s2b, cost2 = _sigma_and_cost(t2, lam)
        if cost2 < cost:
            q, a, W, s2, t, cost = q2, a2, W2, s2b, t2, cost2
        # a final sweep certifies the fixed point
        q2, a2, W2, s2b, t2, cost2 = _sweep(model, lam, W, s2)
        residual = (cost - cost2) / max(abs(cost2), 1e-300)
        sweeps += 1
        if cost2 < cost:
            q, a, W, s2, t, cost = q2, a2, W2, s2b, t2, cost2
        converged = residual < opts.tol
    return _Iterate(q, a, W, s2, cost, t, sweeps + evals, bool(converged), abs(residual))


def _point_from(model, lam, it):
    t = it.terms
    D = t["E2"] + it.s2 * t["Pe2"]
    gamma = t["WG2"] - 1.0 + t["WU2"] / it.s2
    design = model.design(it.q, it.a, it.W, it.s2)
    return FrontierPoint.make(D, gamma, design, lam=float(lam), cost=float(it.cost), converged=it.converged,
                              iterations=it.iterations, residual=float(it.residual))


def _solve(model, lam, opts, warm=None):
    rng = np.random.default_rng([opts.seed, int(np.float64(lam).view(np.uint64))])
    starts = [warm] if warm is not None else [_initial(model)]
    starts += [_initial(model, rng, starts[0].s2) for _ in range(max(opts.restarts, 1) - 1)]
    best = None
    for st in starts:
        res = _alternate(model, lam, st, opts)
        if best is None or res.cost < best.cost:
            best = res
    return best


def solve_weighted(plant, lam, opts=None, warm=None, _model=None):
    """Minimize distortion + lam * SNR over coder designs.

    Returns the FrontierPoint of the best restart. Raises ConvergenceError
    when the best restart did not converge within ``opts.max_iter`` sweeps
    (unless ``opts.strict`` is false).
    """
    opts = opts or SolverOptions()
    if not lam >= 0:
        raise ValueError("lambda must be nonnegative, got %r" % lam)
    model = _model or _model_for(plant, opts)
    best = _solve(model, float(lam), opts, warm)
    point = _point_from(model, lam, best)
    if not best.converged and opts.strict:
        raise ConvergenceError("alternation did not converge at lambda=%g after %d sweeps (relative cost "
                               "change %.3g, tolerance %.1g)" % (lam, best.iterations, best.residual, opts.tol),
                               point)
    return point


def compute_Gamma_inf(plant, opts=None):
    """Infimal SNR compatible with stabilization.

    Obtained from the same parametrization with all weight on the SNR and the
    noise variance sent to infinity: minimizes |W M_u A_s|^2 - 1 over the
    monic FIR factors A_s and W by alternating exact least-squares steps.
    """
    opts = opts or SolverOptions()
    _check_feasible(plant)
    if plant.stable:
        return 0.0
    model = _model_for(plant, opts)
    a = np.zeros(model.n_q)
    W = np.r_[1.0, np.zeros(model.n_w)]
    prev = float("inf")
    for _ in range(opts.max_iter):
        if model.n_q:
            WG = _fir(W, model.Gu)
            a = _lstsq_shift(WG.reshape(-1), _shift_basis(WG, 1, model.n_q))
        G = model.g_map(a)
        if model.n_w:
            W = np.r_[1.0, _lstsq_shift(G.reshape(-1), _shift_basis(G, 1, model.n_w))]
        val = float(np.sum(_fir(W, G) ** 2)) - 1.0
        if prev - val < opts.tol * max(val, 1e-300):
            break
        prev = val
    return val


def open_loop_point(plant):
    """gamma = 0 end point of a stable plant: no feedback, vanishing noise."""
    if not plant.stable:
        raise ValueError("open loop is only admissible for a stable plant")
    s2 = SIGMA_MIN
    D = h2_norm_sq(plant.block("P11")) + s2 * h2_norm_sq(plant.block("P12"))
    design = CoderDesign(F=RationalTF.constant(1.0), L_w=RationalTF.constant(0.0),
                         L_y=RationalTF.constant(0.0), sigma_q_sq=s2)
    return FrontierPoint.make(D, 0.0, design, lam=float("inf"), cost=D, converged=True)


def default_lambda_grid(points=40, lo=1e-4, hi=1e4):
    return np.logspace(math.log10(lo), math.log10(hi), points)


def _prune(points):
    points = sorted(points, key=lambda p: (p.D, p.gamma))
    kept = []
    for p in points:
        if kept and (p.gamma >= kept[-1].gamma or abs(p.D - kept[-1].D) <= 1e-12 * p.D):
            continue
        kept.append(p)
    return kept


def _solve_task(args):
    plant, lam, opts = args
    return solve_weighted(plant, lam, opts)


def trace_frontier(plant, lambda_grid=None, opts=None, workers=1):
    """Sample the (D, gamma) trade-off over a log-spaced multiplier grid."""
    opts = opts or SolverOptions()
    grid = default_lambda_grid() if lambda_grid is None else np.asarray(lambda_grid, dtype=float)
    if np.any(grid < 0):
        raise ValueError("lambda grid must be nonnegative")
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            points = list(ex.map(_solve_task, [(plant, lam, opts) for lam in grid]))
    else:
        model = _model_for(plant, opts)
        points = [solve_weighted(plant, lam, opts, _model=model) for lam in grid]
    if plant.stable:
        points.append(open_loop_point(plant))
    kept = _prune(points)
    meta = {"solver": opts.to_dict(), "lambda_grid": [float(x) for x in grid],
            "points_solved": len(points), "points_kept": len(kept),
            "max_residual": max(p.residual for p in kept),
            "all_converged": all(p.converged for p in kept)}
    return SnrFrontier(kept, plant.fingerprint(), meta)


# ---------------------------------------------------------------- interpolation

def _interp_coords(frontier):
    D = frontier.D
    g = frontier.gamma
    return D, g


def gamma_of_D(frontier, D):
    """Minimal SNR compatible with distortion D, interpolated linearly in
    (log gamma, D) between frontier samples."""
    Ds, gs = _interp_coords(frontier)
    if not Ds[0] <= D <= Ds[-1]:
        if gs[-1] == 0.0 and D >= Ds[-1]:
            return 0.0
        raise ValueError("D=%g outside the sampled range [%g, %g]; widen the lambda sweep" % (D, Ds[0], Ds[-1]))
    i = min(np.searchsorted(Ds, D, side="right") - 1, len(Ds) - 2)
    i = max(i, 0)
    if len(Ds) == 1:
        return float(gs[0])
    t = (D - Ds[i]) / (Ds[i + 1] - Ds[i])
    if gs[i + 1] == 0.0:
        return float((1 - t) * gs[i])
    return float(math.exp((1 - t) * math.log(gs[i]) + t * math.log(gs[i + 1])))


def J_of_Gamma(frontier, Gamma):
    """Minimal distortion compatible with SNR Gamma (inverse of gamma_of_D)."""
    Ds, gs = _interp_coords(frontier)
    if not gs[-1] <= Gamma <= gs[0]:
        if Gamma > gs[0]:
            raise ValueError("Gamma=%g above the sampled range (max %g); widen the lambda sweep toward 0"
                             % (Gamma, gs[0]))
        raise ValueError("Gamma=%g below the sampled range (min %g); widen the lambda sweep" % (Gamma, gs[-1]))
    if len(Ds) == 1:
        return float(Ds[0])
    # gs is decreasing
    i = int(np.searchsorted(-gs, -Gamma, side="right") - 1)
    i = min(max(i, 0), len(Ds) - 2)
    if gs[i + 1] == 0.0:
        t = 1.0 - Gamma / gs[i]
    else:
        t = (math.log(Gamma) - math.log(gs[i])) / (math.log(gs[i + 1]) - math.log(gs[i]))
    return float(Ds[i] + t * (Ds[i + 1] - Ds[i]))


# ---------------------------------------------------------------- targeted designs

def min_distortion_at_snr(plant, Gamma, opts=None, starts=3):
    """Smallest distortion with SNR <= Gamma, by direct constrained minimization.

    Solves the primal problem with SLSQP over the full parameter vector
    (Youla taps, noise-shaping taps, whitening taps, log coding-noise
    variance). Independent of the multiplier sweep, so it serves as a
    cross-check of the frontier. Returns (D, gamma) of the best start.
    """
    opts = opts or SolverOptions()
    model = _model_for(plant, opts)
    n_dist = model.E_basis.shape[0] + model.Pe_basis.shape[0]

    def parts(theta):
        r, J = model.residual(theta, 1.0), model.jacobian(theta, 1.0)
        return r[:n_dist], J[:n_dist], r[n_dist:], J[n_dist:]

    def distortion(theta):
        r, J, _, _ = parts(theta)
        return r @ r, 2.0 * J.T @ r

    def slack(theta):
        _, _, r, _ = parts(theta)
        return Gamma - (r @ r - 1.0)

    def slack_grad(theta):
        _, _, r, J = parts(theta)
        return -2.0 * J.T @ r

    rng = np.random.default_rng(opts.seed)
    best = None
    for k in range(starts):
        it = _initial(model, rng if k else None)
        res = minimize(distortion, model.pack(it.q, it.a, it.W, it.s2), jac=True, method="SLSQP",
                       constraints=[{"type": "ineq", "fun": slack, "jac": slack_grad}],
                       options={"maxiter": 2000, "ftol": 1e-14})
        if res.success and slack(res.x) > -1e-9 and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise ConvergenceError("constrained minimization failed at Gamma = %g" % Gamma)
    return float(best.fun), float(Gamma - slack(best.x))


def design_for_D(plant, D, opts=None, frontier=None, rel_tol=1e-4, max_steps=60):
    """Frontier point whose analytic distortion equals D.

    Bisects the multiplier on a log scale (warm-starting each solve), then
    rescales the noise variance of the final solve so the distortion
    constraint is met with equality.
    """
    opts = opts or SolverOptions()
    model = _model_for(plant, opts)
    Dinf = compute_Dinf(plant)
    if D <= Dinf:
        raise ValueError("D=%g is not above D_inf=%g" % (D, Dinf))
    lo, hi = 1e-8, 1e8
    if frontier is not None and len(frontier.points) > 1:
        lams = np.array([p.lam for p in frontier.points])
        Ds = frontier.D
        below = np.isfinite(lams) & (Ds <= D)
        above = np.isfinite(lams) & (Ds >= D)
        if np.any(below):
            lo = float(np.max(lams[below]))
        if np.any(above):
            hi = float(np.min(lams[above]))
    warm = None
    best = None
    for _ in range(max_steps):
        lam = math.sqrt(lo * hi)
        it = _solve(model, lam, replace(opts, restarts=1), warm)
        warm = _Iterate(it.q, it.a, it.W, it.s2)
        t = it.terms
        Dlam = t["E2"] + it.s2 * t["Pe2"]
        if Dlam <= D:
            best = (lam, it)
            lo = lam
        else:
            hi = lam
        if best is not None and (D - Dlam) / D >= 0 and (D - Dlam) / D < rel_tol or hi / lo < 1 + 1e-10:
            break
    if best is None:
        raise ValueError("could not reach D=%g (lambda bracket exhausted); is it attainable?" % D)
    lam, it = best
    t = it.terms
    if t["E2"] >= D:
        raise ValueError("distortion target %g too close to D_inf for Youla order %d" % (D, model.n_q))
    s2 = (D - t["E2"]) / t["Pe2"]
    it = _Iterate(it.q, it.a, it.W, s2, it.cost, t, it.iterations, it.converged, it.residual)
    return _point_from(model, lam, it)


# ---------------------------------------------------------------- diagnostics

def directed_info_rate(maps, sigma_q_sq, n_grid=4096):
    """Gaussian directed-information rate (nats/sample) of a solved loop:
    (1/4 pi) integral of log(S_u / sigma_q_sq) over the unit circle."""
    if not isinstance(maps, ClosedLoopMaps):
        raise TypeError("expected ClosedLoopMaps")
    if not maps.stable:
        raise ValueError("closed loop is unstable")
    if not sigma_q_sq > 0:
        raise ValueError("sigma_q_sq must be positive")
    if abs(maps.F.feedthrough() - 1.0) > 1e-12:
        raise ValueError("output filter F must be monic (F(inf) = 1)")
    _, Huq = freq_grid(maps.T_uq, n_grid)
    _, Hud = freq_grid(maps.T_ud, n_grid)
    Su = sigma_q_sq * np.abs(Huq[:, 0, 0]) ** 2 + np.sum(np.abs(Hud[:, 0, :]) ** 2, axis=1)
    return float(0.5 * np.mean(np.log(Su / sigma_q_sq)))
