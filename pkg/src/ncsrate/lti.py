"""Discrete-time LTI algebra: rational transfer functions, state-space models,
H2 norms, frequency grids, the partitioned plant and the closed-loop maps of a
linear source coding scheme wrapped around it.

Transfer-function coefficients are stored in descending powers of z.
"""

import hashlib
import json

import numpy as np
import scipy.linalg as la

STABILITY_MARGIN = 1e-9
COEFF_LIMIT = 1e12
DEFAULT_GRID = 4096


class IllPosedLoopError(ValueError):
    """Raised when an interconnection has a singular delay-free loop."""


def _strip_leading(c, rtol=1e-14):
    c = np.atleast_1d(np.asarray(c, dtype=float))
    if c.size == 0:
        return np.zeros(1)
    scale = np.max(np.abs(c))
    if scale == 0.0:
        return np.zeros(1)
    nz = np.nonzero(np.abs(c) > rtol * scale)[0]
    return c[nz[0]:].copy()


class RationalTF:
    """Scalar rational transfer function num(z)/den(z).

    Construction normalizes the denominator to be monic, strips negligible
    leading coefficients and cancels common powers of z. Improper functions
    are representable (needed for intermediate algebra) but flagged by
    ``is_proper``.
    """

    __slots__ = ("num", "den")

    def __init__(self, num, den=(1.0,)):
        num = np.atleast_1d(np.asarray(num, dtype=float))
        den = np.atleast_1d(np.asarray(den, dtype=float))
        if not (np.all(np.isfinite(num)) and np.all(np.isfinite(den))):
            raise ValueError("transfer function coefficients must be finite")
        den = _strip_leading(den)
        if den[0] == 0.0:
            raise ValueError("denominator is identically zero")
        num = _strip_leading(num)
        lead = den[0]
        num = num / lead
        den = den / lead
        if np.all(num == 0.0):
            num, den = np.zeros(1), np.ones(1)
        else:
            # cancel common factors of z (trailing zeros on both sides)
            tol = 1e-14
            while (len(num) > 1 and len(den) > 1 and abs(num[-1]) <= tol * np.max(np.abs(num))
                   and abs(den[-1]) <= tol * np.max(np.abs(den))):
                num, den = num[:-1], den[:-1]
        if max(np.max(np.abs(num)), np.max(np.abs(den))) > COEFF_LIMIT:
            raise ValueError("coefficient magnitude exceeds %.0e; system is ill-conditioned" % COEFF_LIMIT)
        self.num = num
        self.den = den

    # construction helpers
    @classmethod
    def constant(cls, k):
        return cls([float(k)], [1.0])

    @classmethod
    def delay(cls, k=1):
        """z^-k."""
        return cls([1.0], np.r_[1.0, np.zeros(k)])

    @classmethod
    def from_causal(cls, num_inv, den_inv=(1.0,)):
        """Build from polynomials in z^-1 given in ascending powers."""
        num_inv = np.atleast_1d(np.asarray(num_inv, dtype=float))
        den_inv = np.atleast_1d(np.asarray(den_inv, dtype=float))
        n = max(len(num_inv), len(den_inv))
        return cls(np.r_[num_inv, np.zeros(n - len(num_inv))],
                   np.r_[den_inv, np.zeros(n - len(den_inv))])

    # structure
    @property
    def relative_degree(self):
        return (len(self.den) - 1) - (len(self.num) - 1) if np.any(self.num) else len(self.den)

    @property
    def order(self):
        return len(self.den) - 1

    @property
    def is_proper(self):
        return len(self.num) <= len(self.den)

    @property
    def is_strictly_proper(self):
        return not np.any(self.num) or len(self.num) < len(self.den)

    def causal_coeffs(self):
        """(num, den) as polynomials in z^-1, ascending powers; requires properness."""
        if not self.is_proper:
            raise ValueError("improper transfer function has no causal form")
        n = len(self.den)
        return np.r_[np.zeros(n - len(self.num)), self.num], self.den.copy()

    def feedthrough(self):
        """Value at z = infinity."""
        if not self.is_proper:
            raise ValueError("improper transfer function is unbounded at infinity")
        return self.num[0] if len(self.num) == len(self.den) else 0.0

    def poles(self):
        return np.roots(self.den) if len(self.den) > 1 else np.zeros(0, dtype=complex)

    def zeros(self):
        return np.roots(self.num) if len(self.num) > 1 else np.zeros(0, dtype=complex)

    def is_stable(self):
        p = self.poles()
        return bool(np.all(np.abs(p) < 1.0 - STABILITY_MARGIN))

    def __call__(self, z):
        z = np.asarray(z, dtype=complex)
        return np.polyval(self.num, z) / np.polyval(self.den, z)

    def impulse(self, length):
        """First ``length`` impulse-response samples (proper systems only)."""
        from scipy.signal import lfilter
        b, a = self.causal_coeffs()
        x = np.zeros(length)
        x[0] = 1.0
        return lfilter(b, a, x)

    # algebra
    @staticmethod
    def _coerce(other):
        if isinstance(other, RationalTF):
            return other
        if np.isscalar(other):
            return RationalTF.constant(other)
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        if np.array_equal(self.den, other.den):
            return RationalTF(np.polyadd(self.num, other.num), self.den)
        return RationalTF(np.polyadd(np.polymul(self.num, other.den), np.polymul(other.num, self.den)),
                          np.polymul(self.den, other.den))

    __radd__ = __add__

    def __neg__(self):
        return RationalTF(-self.num, self.den)

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return RationalTF(np.polymul(self.num, other.num), np.polymul(self.den, other.den))

    __rmul__ = __mul__

    def inv(self):
        if not np.any(self.num):
            raise ZeroDivisionError("inverse of the zero transfer function")
        return RationalTF(self.den, self.num)

    def __truediv__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return self * other.inv()

    def __rtruediv__(self, other):
        return self.inv() * other

    def almost_equal(self, other, tol=1e-9):
        """Coefficient-wise comparison after padding to a common length."""
        other = self._coerce(other)

        def pad(a, n):
            return np.r_[np.zeros(n - len(a)), a]

        n = max(len(self.den), len(other.den))
        m = max(len(self.num), len(other.num))
        return (np.allclose(pad(self.den, n), pad(other.den, n), atol=tol, rtol=0)
                and np.allclose(pad(self.num, m), pad(other.num, m), atol=tol, rtol=0))

    def to_dict(self):
        return {"num": [float(c) for c in self.num], "den": [float(c) for c in self.den]}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["num"], doc["den"])

    def __repr__(self):
        return "RationalTF(num=%s, den=%s)" % (np.array2string(self.num, precision=6),
                                               np.array2string(self.den, precision=6))


class StateSpace:
    """x(k+1) = A x(k) + B u(k),  y(k) = C x(k) + D u(k)."""

    __slots__ = ("A", "B", "C", "D")

    def __init__(self, A, B, C, D):
        D = np.atleast_2d(np.asarray(D, dtype=float))
        p, m = D.shape
        A = np.asarray(A, dtype=float)
        n = A.shape[0] if A.size else 0
        A = A.reshape(n, n)
        B = np.asarray(B, dtype=float).reshape(n, m)
        C = np.asarray(C, dtype=float).reshape(p, n)
        for M in (A, B, C, D):
            if not np.all(np.isfinite(M)):
                raise ValueError("state-space matrices must be finite")
            M.setflags(write=False)
        self.A, self.B, self.C, self.D = A, B, C, D

    @property
    def n_states(self):
        return self.A.shape[0]

    @property
    def n_inputs(self):
        return self.D.shape[1]

    @property
    def n_outputs(self):
        return self.D.shape[0]

    def poles(self):
        return la.eigvals(self.A) if self.n_states else np.zeros(0, dtype=complex)

    @property
    def stable(self):
        return bool(np.all(np.abs(self.poles()) < 1.0 - STABILITY_MARGIN))

    def subsystem(self, rows, cols):
        rows = np.atleast_1d(np.arange(self.n_outputs)[rows])
        cols = np.atleast_1d(np.arange(self.n_inputs)[cols])
        return StateSpace(self.A, self.B[:, cols], self.C[rows, :], self.D[np.ix_(rows, cols)])

    def impulse(self, length):
        """Markov parameters h[0..length-1], shape (length, p, m)."""
        h = np.zeros((length, self.n_outputs, self.n_inputs))
        h[0] = self.D
        X = np.array(self.B)
        for k in range(1, length):
            h[k] = self.C @ X
            X = self.A @ X
        return h

    def __call__(self, z):
        n = self.n_states
        if n == 0:
            return self.D.astype(complex)
        return self.C @ la.solve(z * np.eye(n) - self.A, self.B) + self.D

    def __repr__(self):
        return "StateSpace(n=%d, inputs=%d, outputs=%d)" % (self.n_states, self.n_inputs, self.n_outputs)


def _orth_krylov(A, B, tol):
    """Orthonormal basis of the reachable subspace of (A, B)."""
    n = A.shape[0]
    scale = max(1.0, np.linalg.norm(A, 2) if n else 0.0, np.linalg.norm(B, 2) if B.size else 0.0)
    V = np.zeros((n, 0))
    block = np.array(B, dtype=float)
    while V.shape[1] < n and block.size:
        for _ in range(2):
            block = block - V @ (V.T @ block)
        U, s, _ = np.linalg.svd(block, full_matrices=False)
        r = int(np.sum(s > tol * scale))
        if r == 0:
            break
        fresh = U[:, :r]
        V = np.hstack([V, fresh])
        block = A @ fresh
    return V


def minreal(sys, tol=1e-9):
    """Remove unreachable, then unobservable, modes by orthogonal projection."""
    if sys.n_states == 0:
        return sys
    V = _orth_krylov(sys.A, sys.B, tol)
    A, B, C = V.T @ sys.A @ V, V.T @ sys.B, sys.C @ V
    W = _orth_krylov(A.T, C.T, tol)
    return StateSpace(W.T @ A @ W, W.T @ B, C @ W, sys.D)


def _observable_rank(A, C, tol=1e-9):
    return _orth_krylov(A.T, C.T, tol).shape[1]


def tf_to_ss(tf, reduce=True):
    """Controllable companion realization, pruned of unobservable modes."""
    if not tf.is_proper:
        raise ValueError("cannot realize improper transfer function (numerator degree %d > denominator "
                         "degree %d)" % (len(tf.num) - 1, len(tf.den) - 1))
    num, den = tf.causal_coeffs()
    n = len(den) - 1
    d0 = num[0]
    if n == 0:
        return StateSpace(np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((1, 0)), [[d0]])
    rest = num[1:] - d0 * den[1:]
    A = np.zeros((n, n))
    A[0, :] = -den[1:]
    A[1:, :-1] = np.eye(n - 1)
    B = np.zeros((n, 1))
    B[0, 0] = 1.0
    C = rest.reshape(1, n)
    sys = StateSpace(A, B, C, [[d0]])
    if reduce and _observable_rank(A, C) < n:
        sys = minreal(sys)
    return sys


def _siso_tf(sys):
    """Transfer function of a SISO realization via characteristic polynomial
    and unit-circle interpolation of the numerator."""
    n = sys.n_states
    d0 = float(sys.D[0, 0])
    if n == 0:
        return RationalTF([d0], [1.0])
    poles = la.eigvals(sys.A)
    den = np.real(np.poly(poles))
    npts = n + 1
    # rotate the sample circle off any pole
    for shift in (0.37, 0.61, 0.13, 0.89):
        zs = np.exp(2j * np.pi * (np.arange(npts) + shift) / npts)
        if np.min(np.abs(zs[:, None] - poles[None, :])) > 1e-6:
            break
    vals = np.array([(sys.C @ la.solve(z * np.eye(n) - sys.A, sys.B))[0, 0] for z in zs])
    vals = vals * np.polyval(den, zs)
    # vals(z) = sum_i c_i z^(n-i);  solve the (well-conditioned, unitary up to scaling) system
    V = zs[:, None] ** np.arange(n, -1, -1)[None, :]
    c = np.linalg.solve(V, vals)
    num = np.real(c) + d0 * den
    return RationalTF(num, den)


def ss_to_tf(sys, reduce=True):
    """Transfer function of a state-space system.

    Returns a RationalTF for SISO systems, otherwise a list of rows of RationalTF.
    Each entry is computed from a minimal realization of that entry when
    ``reduce`` is set.
    """
    rows = []
    for i in range(sys.n_outputs):
        row = []
        for j in range(sys.n_inputs):
            sub = sys.subsystem(i, j)
            if reduce:
                sub = minreal(sub)
            row.append(_siso_tf(sub))
        rows.append(row)
    if sys.n_outputs == 1 and sys.n_inputs == 1:
        return rows[0][0]
    return rows


def _as_ss(sys):
    if isinstance(sys, StateSpace):
        return sys
    if isinstance(sys, RationalTF):
        return tf_to_ss(sys, reduce=False)
    raise TypeError("expected StateSpace or RationalTF, got %r" % type(sys))


def h2_norm_sq(sys):
    """Squared H2 norm via the discrete Lyapunov equation."""
    sys = _as_ss(sys)
    if not sys.stable:
        raise ValueError("H2 norm undefined for an unstable system")
    total = float(np.sum(sys.D ** 2))
    if sys.n_states:
        P = la.solve_discrete_lyapunov(sys.A, sys.B @ sys.B.T)
        total += float(np.trace(sys.C @ P @ sys.C.T))
    return total


def freq_grid(sys, n_grid=DEFAULT_GRID):
    """Frequency response on w_k = 2 pi k / n_grid, k = 0..n_grid-1.

    Returns (omega, response); response has shape (n_grid,) for a RationalTF
    and (n_grid, p, m) for a StateSpace.
    """
    n_grid = int(n_grid)
    if n_grid < 256 or n_grid & (n_grid - 1):
        raise ValueError("n_grid must be a power of two >= 256")
    omega = 2.0 * np.pi * np.arange(n_grid) / n_grid
    z = np.exp(1j * omega)
    if isinstance(sys, RationalTF):
        return omega, sys(z)
    sys = _as_ss(sys)
    n = sys.n_states
    resp = np.broadcast_to(sys.D.astype(complex), (n_grid,) + sys.D.shape).copy()
    if n == 0:
        return omega, resp
    lam, V = la.eig(sys.A)
    if np.linalg.cond(V) < 1e8:
        CV = sys.C @ V
        VB = la.solve(V, sys.B)
        resp += np.einsum("pi,ki,im->kpm", CV, 1.0 / (z[:, None] - lam[None, :]), VB)
    else:
        eye = np.eye(n)
        for k in range(n_grid):
            resp[k] += sys.C @ la.solve(z[k] * eye - sys.A, sys.B)
    return omega, resp


def _block_diag_ss(systems):
    A = la.block_diag(*[s.A for s in systems]) if systems else np.zeros((0, 0))
    B = la.block_diag(*[s.B for s in systems])
    C = la.block_diag(*[s.C for s in systems])
    D = la.block_diag(*[s.D for s in systems])
    n = sum(s.n_states for s in systems)
    return StateSpace(A.reshape(n, n), B.reshape(n, -1), C.reshape(-1, n), D)


def interconnect(blocks, feedback, ext_in, ext_out):
    """Close a loop around a block-diagonal system.

    The stacked subsystem inputs obey  inputs = feedback @ outputs + ext_in @ r
    and the external outputs are  ext_out @ [outputs; r].
    Raises IllPosedLoopError when the delay-free part of the loop is singular.
    """
    G = _block_diag_ss(blocks)
    M = np.asarray(feedback, dtype=float)
    N = np.asarray(ext_in, dtype=float)
    E = np.asarray(ext_out, dtype=float)
    ny = G.n_outputs
    loop = np.eye(ny) - G.D @ M
    det = np.linalg.det(loop)
    if abs(det) < 1e-12:
        raise IllPosedLoopError("ill-posed interconnection: delay-free loop determinant %.3g" % det)
    Linv = np.linalg.inv(loop)
    # outputs = Linv (C x + D N r)
    Cy = Linv @ G.C
    Dy = Linv @ G.D @ N
    A = G.A + G.B @ M @ Cy
    B = G.B @ (M @ Dy + N)
    Ey, Er = E[:, :ny], E[:, ny:]
    C = Ey @ Cy
    D = Ey @ Dy + Er
    return StateSpace(A, B, C, D), det


def tf_matrix(blocks):
    """Normalize scalar / nested-list input into a list of rows of RationalTF."""
    if isinstance(blocks, RationalTF):
        return [[blocks]]
    rows = []
    for row in blocks:
        if isinstance(row, RationalTF):
            rows.append([row])
        else:
            rows.append([b if isinstance(b, RationalTF) else RationalTF.constant(b) for b in row])
    return rows


def tfm_to_ss(blocks):
    """Minimal realization of a transfer matrix given entry-wise."""
    rows = tf_matrix(blocks)
    p, m = len(rows), len(rows[0])
    parts = [tf_to_ss(rows[i][j]) for i in range(p) for j in range(m)]
    G = _block_diag_ss(parts)
    # entry (i, j) block sits at position i*m + j
    Sel_out = np.zeros((p, p * m))
    Sel_in = np.zeros((p * m, m))
    for i in range(p):
        for j in range(m):
            Sel_out[i, i * m + j] = 1.0
            Sel_in[i * m + j, j] = 1.0
    full = StateSpace(G.A, G.B @ Sel_in, Sel_out @ G.C, Sel_out @ G.D @ Sel_in)
    return minreal(full)


def pbh_hidden_modes(A, B, C, tol=1e-8):
    """Eigenvalues on or outside the unit circle that fail the PBH rank test.

    Returns (uncontrollable, unobservable) lists of eigenvalues.
    """
    n = A.shape[0]
    unc, uno = [], []
    for lam in la.eigvals(A) if n else []:
        if abs(lam) < 1.0 - STABILITY_MARGIN:
            continue
        M = np.hstack([lam * np.eye(n) - A, B])
        if np.linalg.matrix_rank(M, tol=tol * max(1.0, np.linalg.norm(M))) < n:
            unc.append(lam)
        M = np.vstack([lam * np.eye(n) - A, C])
        if np.linalg.matrix_rank(M, tol=tol * max(1.0, np.linalg.norm(M))) < n:
            uno.append(lam)
    return unc, uno


class PartitionedPlant:
    """Generalized plant with exogenous input d, control u (scalar), performance
    output e and measurement y (scalar), sharing one realization:

        x+ = A x + B1 d + B2 u
        e  = C1 x + D11 d + D12 u
        y  = C2 x + D21 d
    """

    def __init__(self, sys, n_d, n_e):
        if sys.n_inputs != n_d + 1 or sys.n_outputs != n_e + 1:
            raise ValueError("realization has %d inputs / %d outputs, expected %d / %d"
                             % (sys.n_inputs, sys.n_outputs, n_d + 1, n_e + 1))
        if abs(sys.D[n_e, n_d]) > 0.0:
            raise ValueError("P22 must be strictly proper (nonzero u-to-y feedthrough %g)" % sys.D[n_e, n_d])
        self.ss = sys
        self.n_d = int(n_d)
        self.n_e = int(n_e)
        unc, uno = pbh_hidden_modes(sys.A, self.B2, self.C2)
        if unc or uno:
            raise ValueError("realization has unstable hidden modes: uncontrollable from u %s, "
                             "unobservable from y %s" % (np.round(unc, 6).tolist(), np.round(uno, 6).tolist()))

    @classmethod
    def from_blocks(cls, P11, P12, P21, P22):
        P11, P12, P21, P22 = (tf_matrix(b) for b in (P11, P12, P21, P22))
        n_e, n_d = len(P11), len(P11[0])
        if len(P12) != n_e or len(P12[0]) != 1 or len(P21) != 1 or len(P21[0]) != n_d:
            raise ValueError("inconsistent block dimensions")
        if len(P22) != 1 or len(P22[0]) != 1:
            raise ValueError("P22 must be scalar")
        if not P22[0][0].is_strictly_proper:
            raise ValueError("P22 must be strictly proper")
        rows = [P11[i] + P12[i] for i in range(n_e)] + [P21[0] + P22[0]]
        sys = tfm_to_ss(rows)
        D = np.array(sys.D)
        D[n_e, n_d] = 0.0
        sys = StateSpace(sys.A, sys.B, sys.C, D)
        return cls(sys, n_d, n_e)

    @classmethod
    def from_state_space(cls, A, B, C, D, n_d, n_e):
        return cls(StateSpace(A, B, C, D), n_d, n_e)

    @property
    def A(self):
        return self.ss.A

    @property
    def B1(self):
        return self.ss.B[:, :self.n_d]

    @property
    def B2(self):
        return self.ss.B[:, self.n_d:]

    @property
    def C1(self):
        return self.ss.C[:self.n_e, :]

    @property
    def C2(self):
        return self.ss.C[self.n_e:, :]

    @property
    def D11(self):
        return self.ss.D[:self.n_e, :self.n_d]

    @property
    def D12(self):
        return self.ss.D[:self.n_e, self.n_d:]

    @property
    def D21(self):
        return self.ss.D[self.n_e:, :self.n_d]

    @property
    def n_states(self):
        return self.ss.n_states

    def block(self, name):
        """State-space model of one of 'P11', 'P12', 'P21', 'P22'."""
        rows = slice(0, self.n_e) if name[1] == "1" else slice(self.n_e, self.n_e + 1)
        cols = slice(0, self.n_d) if name[2] == "1" else slice(self.n_d, self.n_d + 1)
        return self.ss.subsystem(rows, cols)

    def tf(self, name):
        return ss_to_tf(self.block(name))

    @property
    def stable(self):
        return self.ss.stable

    def unstable_poles(self):
        p = self.ss.poles()
        return p[np.abs(p) >= 1.0 - STABILITY_MARGIN]

    def fingerprint(self):
        """Hash of the block transfer-function coefficients (realization independent)."""
        doc = []
        for name in ("P11", "P12", "P21", "P22"):
            for row in tf_matrix(ss_to_tf(self.block(name))):
                for e in row:
                    doc.append([["%.9e" % c for c in e.num], ["%.9e" % c for c in e.den]])
        text = json.dumps(doc)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def to_dict(self):
        return {"A": self.ss.A.tolist(), "B": self.ss.B.tolist(), "C": self.ss.C.tolist(),
                "D": self.ss.D.tolist(), "n_d": self.n_d, "n_e": self.n_e}

    @classmethod
    def from_dict(cls, doc):
        return cls.from_state_space(doc["A"], doc["B"], doc["C"], doc["D"], doc["n_d"], doc["n_e"])

    def __repr__(self):
        return "PartitionedPlant(n=%d, n_d=%d, n_e=%d)" % (self.n_states, self.n_d, self.n_e)


class ClosedLoopMaps:
    """Closed loop of a partitioned plant with a linear coder (F, L_w, L_y).

    Loop equations:  y' = P21 d + P22 u',  v' = L_y (y' + n2) + L_w z^-1 w',
    w' = v' + q',  u' = F w' + n1,  e' = P11 d + P12 u'.
    Inputs are ordered [q', d, n1, n2], outputs [e', y', w', u'].
    """

    def __init__(self, plant, F, L_w, L_y):
        self.plant = plant
        self.F, self.L_w, self.L_y = F, L_w, L_y
        Lw_delayed = L_w * RationalTF.delay(1)
        for name, f in (("F", F), ("L_w z^-1", Lw_delayed), ("L_y", L_y)):
            if not f.is_proper:
                raise ValueError("%s must be proper" % name)
        loop_tf = 1 - Lw_delayed - plant_tf22(plant) * F * L_y
        if abs(loop_tf.feedthrough()) < 1e-12:
            raise IllPosedLoopError("ill-posed loop: 1 - L_w z^-1 - P22 F L_y vanishes at infinity")
        self.S = loop_tf.inv()
        self.K = F * L_y / (1 - Lw_delayed)
        n_d, n_e = plant.n_d, plant.n_e
        sysF, sysLw, sysLy = (tf_to_ss(f, reduce=False) for f in (F, Lw_delayed, L_y))
        # stacked subsystem outputs: [e (n_e), y, F-out, Lw-out, Ly-out]
        # stacked subsystem inputs:  [d (n_d), u, F-in, Lw-in, Ly-in]
        ny = n_e + 4
        nu = n_d + 4
        iy, iF, iLw, iLy = n_e, n_e + 1, n_e + 2, n_e + 3
        ju, jF, jLw, jLy = n_d, n_d + 1, n_d + 2, n_d + 3
        # external r = [q, d, n1, n2]
        nr = 1 + n_d + 2
        rq, rd, rn1, rn2 = 0, 1, 1 + n_d, 2 + n_d
        M = np.zeros((nu, ny))
        N = np.zeros((nu, nr))
        # w = Lw-out + Ly-out + q
        M[ju, iF] = 1.0
        N[ju, rn1] = 1.0                        # u = F w + n1
        M[jF, [iLw, iLy]] = 1.0
        N[jF, rq] = 1.0                         # F-in = w
        M[jLw, [iLw, iLy]] = 1.0
        N[jLw, rq] = 1.0                        # Lw-in = w
        M[jLy, iy] = 1.0
        N[jLy, rn2] = 1.0                       # Ly-in = y + n2
        N[:n_d, rd:rd + n_d] = np.eye(n_d)      # plant d
        # external outputs [e, y, w, u]
        E = np.zeros((n_e + 3, ny + nr))
        E[:n_e, :n_e] = np.eye(n_e)
        E[n_e, iy] = 1.0
        E[n_e + 1, [iLw, iLy]] = 1.0
        E[n_e + 1, ny + rq] = 1.0
        E[n_e + 2, iF] = 1.0
        E[n_e + 2, ny + rn1] = 1.0
        self.ss, self.loop_determinant = interconnect([plant.ss, sysF, sysLw, sysLy], M, N, E)
        self.inputs = {"q": [rq], "d": list(range(rd, rd + n_d)), "n1": [rn1], "n2": [rn2]}
        self.outputs = {"e": list(range(n_e)), "y": [n_e], "w": [n_e + 1], "u": [n_e + 2]}
        self.well_posed = True
        self.stable = self.ss.stable

    def block(self, out, inp):
        """State-space map from input group ``inp`` to output group ``out``."""
        return self.ss.subsystem(self.outputs[out], self.inputs[inp])

    def transfer(self, out, inp):
        """Entries of a block as rows of RationalTF."""
        return tf_matrix(ss_to_tf(self.block(out, inp)))

    @property
    def T_eq(self):
        return self.block("e", "q")

    @property
    def T_ed(self):
        return self.block("e", "d")

    @property
    def T_uq(self):
        return self.block("u", "q")

    @property
    def T_ud(self):
        return self.block("u", "d")

    def _v_map(self, inp):
        # v' = w' - q'
        w = self.block("w", inp)
        D = np.array(w.D)
        if inp == "q":
            D = D - 1.0
        return StateSpace(w.A, w.B, w.C, D)

    @property
    def T_vq(self):
        return self._v_map("q")

    @property
    def T_vd(self):
        return self._v_map("d")

    def sigma_e_sq(self, sigma_q_sq):
        """Steady-state variance of e' with unit-variance white d and white q' of
        variance sigma_q_sq."""
        self._require_stable()
        return h2_norm_sq(self.T_ed) + sigma_q_sq * h2_norm_sq(self.T_eq)

    def sigma_v_sq(self, sigma_q_sq):
        self._require_stable()
        return h2_norm_sq(self.T_vd) + sigma_q_sq * h2_norm_sq(self.T_vq)

    def snr(self, sigma_q_sq):
        return self.sigma_v_sq(sigma_q_sq) / sigma_q_sq

    def _require_stable(self):
        if not self.stable:
            raise ValueError("closed loop is not internally stable")


def plant_tf22(plant):
    return ss_to_tf(plant.block("P22"))


def closed_loop(plant, design):
    """Closed-loop maps of ``plant`` under a coder design carrying F, L_w, L_y."""
    return ClosedLoopMaps(plant, design.F, design.L_w, design.L_y)
