"""Generalized Gibbs ensemble with the charges H, C, K and Pi.

The density is ``rho = exp(-R) / Z`` with ``R = beta H + lc C + lk K + lp Pi``.
It is kept in factored form (eigenvalues and eigenvectors of ``R``) so that
expectation values never need the dense ``rho`` of a large sector.

When ``H`` conserves parity and ``C``, ``K`` are the structured off-diagonal
charges, ``R`` is unitarily equivalent to a real symmetric matrix:
``R = D R' D^H`` with ``D = diag(1, exp(i theta))`` on (even, odd) indices,
``R' = [[beta H_e + lp, r Q], [r Q^T, beta H_o - lp]]``,
``r = |lc - i lk|`` and ``theta = arg(lc + i lk)``.  Only ``R'`` is diagonalised.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.optimize as opt
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .operators import HermitianOperator, NonHermitianError, ParityOffDiagonal, _diagonal_of, eigh_inplace, to_dense

DEFAULT_DELTA = 2.6e-6
FEASIBILITY_TOL = 1e-9
WEIGHT_CUTOFF = 1e-18
_CHUNK = 512


class InfeasibleTargetsError(ValueError):
    pass


class BracketError(RuntimeError):
    pass


@dataclass(frozen=True)
class GgeParameters:
    beta: float = 0.0
    lambda_c: float = 0.0
    lambda_k: float = 0.0
    lambda_pi: float = 0.0
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not math.isfinite(self.beta):
            raise ValueError(f"beta must be finite, got {self.beta}")

    def replace(self, **kw) -> "GgeParameters":
        d = dict(beta=self.beta, lambda_c=self.lambda_c, lambda_k=self.lambda_k,
                 lambda_pi=self.lambda_pi, delta=self.delta)
        d.update(kw)
        return GgeParameters(**d)


@dataclass(frozen=True)
class ChargeTargets:
    pi_target: float
    c_target: float
    k_target: float
    energy_target: float

    def __post_init__(self):
        for name in ("pi_target", "c_target", "k_target"):
            v = getattr(self, name)
            if not -1 - FEASIBILITY_TOL <= v <= 1 + FEASIBILITY_TOL:
                raise InfeasibleTargetsError(f"{name}={v} outside [-1, 1]")
        if np.linalg.norm(self.vector) > 1 + FEASIBILITY_TOL:
            raise InfeasibleTargetsError(f"|(pi, c, k)| = {np.linalg.norm(self.vector):.12g} exceeds 1")

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.pi_target, self.c_target, self.k_target], dtype=float)


# ---------------------------------------------------------------- multipliers


def forward_map(lambdas) -> np.ndarray:
    """(<Pi>, <C>, <K>) of exp(-l.sigma)/Z on one doublet, i.e. -l tanh|l| / |l|."""
    lam = np.asarray(lambdas, dtype=float)
    r = np.linalg.norm(lam)
    if r == 0:
        return np.zeros(3)
    return -lam * math.tanh(r) / r


def solve_multipliers(targets, delta: float = DEFAULT_DELTA, method: str = "closed") -> tuple[float, float, float]:
    """(lambda_pi, lambda_c, lambda_k) reproducing ``targets`` on a doublet.

    The norm of the target vector is capped at ``1 - delta``; a pure doublet
    state has norm one and no finite solution otherwise.  ``method="numeric"``
    solves the same capped system with a nonlinear root finder.
    """
    v = targets.vector if isinstance(targets, ChargeTargets) else np.asarray(targets, dtype=float)
    norm = float(np.linalg.norm(v))
    if norm > 1 + FEASIBILITY_TOL:
        raise InfeasibleTargetsError(f"|v| = {norm:.12g} exceeds 1")
    if norm == 0:
        return 0.0, 0.0, 0.0
    capped = min(norm, 1 - delta)
    if method == "closed":
        r = math.atanh(capped)
        lam = -(r / norm) * v
    elif method == "numeric":
        goal = v * (capped / norm)
        x0 = -goal * math.atanh(capped) / capped
        lam, info, ier, msg = opt.fsolve(lambda x: forward_map(x) - goal, x0, xtol=1e-14, full_output=True)
        if ier != 1:
            raise RuntimeError(f"multiplier solve failed: {msg}")
    else:
        raise ValueError(f"unknown method {method!r}")
    return float(lam[0]) + 0.0, float(lam[1]) + 0.0, float(lam[2]) + 0.0


# ---------------------------------------------------------------- density


@dataclass(frozen=True, eq=False)
class GgeDensity:
    """exp(-R)/Z as ``sum_k weights[k] |w_k><w_k|``.

    ``vectors`` may be real with a per-row ``phases`` factor, in which case
    the actual eigenvectors are ``phases[:, None] * vectors``.
    """

    r_values: np.ndarray
    weights: np.ndarray
    vectors: np.ndarray
    basis_tag: str
    params: GgeParameters
    phases: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.vectors.shape[0]

    def _active(self):
        return np.flatnonzero(self.weights > WEIGHT_CUTOFF * self.weights.max())

    def _columns(self, cols):
        x = self.vectors[:, cols]
        if self.phases is not None:
            x = self.phases[:, None] * x
        return x

    def _chunks(self):
        act = self._active()
        for start in range(0, len(act), _CHUNK):
            cols = act[start:start + _CHUNK]
            yield cols, self._columns(cols)

    def expectation(self, op) -> float:
        if isinstance(op, HermitianOperator) and op.basis_tag != self.basis_tag:
            raise ValueError(f"basis mismatch: {op.basis_tag!r} vs {self.basis_tag!r}")
        mat = getattr(op, "matrix", op)
        total = 0.0
        for cols, x in self._chunks():
            diag = np.einsum("ij,ij->j", x.conj(), mat @ x)
            total += float(np.dot(self.weights[cols], diag.real))
        return total

    def moments(self, op) -> tuple[float, float]:
        """Mean and variance of ``op`` in the ensemble."""
        mat = getattr(op, "matrix", op)
        m1 = m2 = 0.0
        for cols, x in self._chunks():
            ox = mat @ x
            w = self.weights[cols]
            m1 += float(np.dot(w, np.einsum("ij,ij->j", x.conj(), ox).real))
            m2 += float(np.dot(w, np.einsum("ij,ij->j", ox.conj(), ox).real))
        return m1, max(m2 - m1 * m1, 0.0)

    def toarray(self) -> np.ndarray:
        x = self._columns(np.arange(self.vectors.shape[1]))
        rho = (x * self.weights) @ x.conj().T
        return 0.5 * (rho + rho.conj().T)


def _structured_split(h, c, k, pi):
    """(even, odd, Q) when the real-symmetric reduction applies, else None."""
    if h.sectors is None or len(h.sectors) != 2 or not isinstance(c.matrix, ParityOffDiagonal):
        return None
    cm = c.matrix
    if cm.phase != 1 or not np.isrealobj(cm.block):
        return None
    if k is not None:
        km = k.matrix
        if not (isinstance(km, ParityOffDiagonal) and km.block is cm.block and km.phase == -1j):
            return None
    (_, even), (_, odd) = h.sectors
    if not (np.array_equal(even, cm.even_idx) and np.array_equal(odd, cm.odd_idx)):
        return None
    if pi is not None:
        d = _diagonal_of(pi.matrix)
        if d is None or np.any(d[even] != 1) or np.any(d[odd] != -1):
            return None
    if np.iscomplexobj(h.matrix.data if sp.issparse(h.matrix) else h.matrix):
        return None
    return even, odd, cm.block


def _is_complex(mat) -> bool:
    if isinstance(mat, ParityOffDiagonal):
        return mat.phase.imag != 0 or np.iscomplexobj(mat.block)
    if sp.issparse(mat):
        return np.iscomplexobj(mat.data)
    return np.issubdtype(mat.dtype, np.complexfloating)


def _as_slice(idx):
    idx = np.asarray(idx)
    if idx.size and np.array_equal(idx, np.arange(idx[0], idx[0] + idx.size)):
        return slice(int(idx[0]), int(idx[0]) + idx.size)
    return idx


def _add_scaled(out, mat, lam):
    """out += lam * mat without forming a dense temporary of ``mat`` where avoidable."""
    if isinstance(mat, ParityOffDiagonal):
        z = lam * mat.phase
        z = z.real if z.imag == 0 else z
        e, o = _as_slice(mat.even_idx), _as_slice(mat.odd_idx)
        if isinstance(e, slice) and isinstance(o, slice):
            out[e, o] += z * mat.block
            out[o, e] += np.conj(z) * mat.block.conj().T
        else:
            out[np.ix_(mat.even_idx, mat.odd_idx)] += z * mat.block
            out[np.ix_(mat.odd_idx, mat.even_idx)] += np.conj(z) * mat.block.conj().T
    elif sp.issparse(mat):
        coo = mat.tocoo()
        np.add.at(out, (coo.row, coo.col), lam * coo.data)
    else:
        out += lam * to_dense(mat)


def _hermitian_defect(a, rows: int = 1024) -> float:
    worst = 0.0
    for i in range(0, a.shape[0], rows):
        blk = a[i:i + rows]
        worst = max(worst, float(np.abs(blk - a[:, i:i + rows].conj().T).max()))
    return worst


def _weights(values):
    x = -(values - values.min())
    p = np.exp(x)
    return p / p.sum()


def _eigh(a):
    return eigh_inplace(a)


def gge_density(h: HermitianOperator, c: HermitianOperator | None, k: HermitianOperator | None,
                pi: HermitianOperator | None, params: GgeParameters) -> GgeDensity:
    """Diagonalise R and return the normalised ensemble."""
    for op in (c, k, pi):
        if op is not None:
            h.check_same_basis(op)
    beta, lc, lk, lp = params.beta, params.lambda_c, params.lambda_k, params.lambda_pi
    if (lk != 0 and k is None) or (lp != 0 and pi is None) or (lc != 0 and c is None):
        raise ValueError("a nonzero multiplier needs its charge operator")
    split = _structured_split(h, c, k, pi) if c is not None else None
    if split is not None:
        even, odd, q = split
        z = complex(lc, lk)
        r, theta = abs(z), (math.atan2(lk, lc) if z != 0 else 0.0)
        n = h.dim
        ne = len(even)
        perm = np.concatenate([even, odd])
        a = np.empty((n, n))
        hm = h.matrix
        a[:ne, :ne] = beta * (hm[even][:, even].toarray() if sp.issparse(hm) else hm[np.ix_(even, even)])
        a[ne:, ne:] = beta * (hm[odd][:, odd].toarray() if sp.issparse(hm) else hm[np.ix_(odd, odd)])
        a[:ne, ne:] = r * q
        a[ne:, :ne] = r * q.T
        a[np.arange(ne), np.arange(ne)] += lp
        a[np.arange(ne, n), np.arange(ne, n)] -= lp
        vals, out = _eigh(a)
        del a
        if not np.array_equal(perm, np.arange(n)):
            vecs, out = out, np.empty_like(out)
            out[perm] = vecs
            del vecs
        phases = np.ones(n, dtype=complex)
        phases[odd] = np.exp(1j * theta)
        return GgeDensity(vals, _weights(vals), out, h.basis_tag, params, None if theta == 0 else phases)
    terms = [(lam, op) for lam, op in ((lc, c), (lk, k), (lp, pi)) if lam != 0]
    complex_r = any(_is_complex(op.matrix) for _, op in terms) or _is_complex(h.matrix)
    r_mat = np.zeros(h.matrix.shape, dtype=complex if complex_r else float)
    for lam, op in [(beta, h)] + terms:
        _add_scaled(r_mat, op.matrix, lam)
    dev = _hermitian_defect(r_mat)
    if dev > 1e-10 * max(1.0, np.abs(r_mat).max()):
        raise NonHermitianError(f"R is not Hermitian (max deviation {dev:.3e})")
    vals, vecs = _eigh(r_mat)
    return GgeDensity(vals, _weights(vals), vecs, h.basis_tag, params)


def gge_expectation(rho, op) -> float:
    """Tr[rho O] for a GgeDensity or a dense density matrix."""
    if isinstance(rho, GgeDensity):
        return rho.expectation(op)
    if isinstance(op, HermitianOperator):
        od = op.toarray()
    else:
        od = to_dense(op)
    val = np.trace(np.asarray(rho) @ od)
    return float(val.real)


def commutator_ratio(h: HermitianOperator, rho: GgeDensity) -> float:
    """||[H, rho]||_F / ||rho||_F."""
    r = rho.toarray()
    hd = h.toarray()
    return float(np.linalg.norm(hd @ r - r @ hd) / np.linalg.norm(r))


# ---------------------------------------------------------------- beta fits


def spectral_norm(op) -> float:
    mat = getattr(op, "matrix", op)
    if isinstance(mat, np.ndarray):
        return float(np.linalg.norm(mat, 2)) if mat.size else 0.0
    if mat.shape[0] <= 64:
        return float(np.linalg.norm(to_dense(mat), 2))
    v0 = np.ones(mat.shape[0]) / math.sqrt(mat.shape[0])
    w = spla.eigsh(mat, k=1, which="LM", v0=v0, return_eigenvectors=False, tol=1e-6)
    return float(abs(w[0]))


def doublet_block_energy(values_plus, values_minus, beta, lambdas) -> float:
    """<H> of the ensemble restricted to paired doublets (n-th even with n-th odd level).

    Each pair is treated as a two-level block with C, K, Pi acting as Pauli
    matrices.  Used as a cheap model of the full ensemble.
    """
    lp, lc, lk = lambdas
    n = min(len(values_plus), len(values_minus))
    ep, em = np.asarray(values_plus)[:n], np.asarray(values_minus)[:n]
    ebar, gap = 0.5 * (ep + em), ep - em
    bz = 0.5 * beta * gap + lp
    g = np.sqrt(lc * lc + lk * lk + bz * bz)
    nz = np.divide(bz, g, out=np.zeros_like(g), where=g > 0)
    shift = np.min(beta * ebar - g)
    # cosh g e^{-beta ebar} written with the largest exponent factored out
    ep_w = np.exp(-(beta * ebar - g) + shift)
    em_w = np.exp(-(beta * ebar + g) + shift)
    z = ep_w + em_w
    num = ebar * z - 0.5 * gap * (ep_w - em_w) * nz
    return float(num.sum() / z.sum())


def doublet_block_beta(values_plus, values_minus, lambdas, energy_target, bracket=(-50.0, 50.0)) -> float:
    f = lambda b: doublet_block_energy(values_plus, values_minus, b, lambdas) - energy_target
    lo, hi = bracket
    if f(lo) * f(hi) > 0:
        raise BracketError("doublet model cannot reach the target energy")
    return float(opt.brentq(f, lo, hi, xtol=1e-12))


@dataclass(frozen=True)
class BetaFit:
    beta: float
    residual: float
    evaluations: int
    density: GgeDensity


def fit_beta(h: HermitianOperator, c, k, pi, lambdas, energy_target: float, delta: float = DEFAULT_DELTA,
             beta_guess: float | None = None, bracket=(0.0, 50.0), rtol: float = 1e-8,
             max_evals: int = 60, beta_limit: float = 1e4, log=None) -> BetaFit:
    """Root of <H>(beta) - E for fixed (lambda_pi, lambda_c, lambda_k).

    Newton steps with the exact slope ``-Var(H)`` inside a maintained bracket,
    falling back to bisection; the bracket is expanded geometrically when the
    root lies outside it.  Stops when ``|f| < rtol * ||H||``.
    """
    lp, lc, lk = lambdas
    base = GgeParameters(0.0, lc, lk, lp, delta)
    tol = rtol * spectral_norm(h)
    cache = {}  # beta -> (f, Var H); densities are not kept, each one is a full eigenbasis

    def evaluate(b):
        rho = gge_density(h, c, k, pi, base.replace(beta=float(b)))
        mean, var = rho.moments(h)
        cache[b] = (mean - energy_target, var)
        if log:
            log(f"beta={b:.12g} f={mean - energy_target:.6e}")
        for b1, b2 in _pairs(sorted(cache)):
            if cache[b1][0] < cache[b2][0] - 10 * tol:
                raise RuntimeError(f"<H> is not decreasing in beta between {b1} and {b2}")
        return mean - energy_target, var, rho

    lo, hi = None, None  # f(lo) > 0 > f(hi)
    width = max(bracket[1] - bracket[0], 1.0)
    b = float(beta_guess) if beta_guess is not None else float(bracket[0])
    for _ in range(max_evals):
        rho = None  # release the previous ensemble before building the next
        f, var, rho = evaluate(b)
        if abs(f) < tol:
            return BetaFit(b, f, len(cache), rho)
        if f > 0:
            lo = b if lo is None else max(lo, b)
        else:
            hi = b if hi is None else min(hi, b)
        newton = b + f / var if var > 0 else math.nan
        if lo is not None and hi is not None:
            nxt = newton if lo < newton < hi else 0.5 * (lo + hi)
        elif hi is None:
            nxt = min(newton, b + width) if newton > b else b + width
        else:
            nxt = max(newton, b - width) if newton < b else b - width
        if abs(nxt) > beta_limit:
            raise BracketError(f"energy {energy_target} not reachable with |beta| <= {beta_limit}")
        if nxt == b:
            return BetaFit(b, f, len(cache), rho)
        b = float(nxt)
    best = min(cache, key=lambda x: abs(cache[x][0]))
    raise BracketError(f"no convergence after {max_evals} evaluations (best |f|={abs(cache[best][0]):.3e})")


def _pairs(xs):
    return zip(xs[:-1], xs[1:])


def invert_single_charge(c_measured: float) -> float:
    """lambda_c with <C> = -tanh(lambda_c)."""
    if not abs(c_measured) < 1:
        raise InfeasibleTargetsError(f"|c_measured| must be < 1, got {c_measured}")
    return -math.atanh(c_measured)


def fit_perturbed(h_eps: HermitianOperator, c: HermitianOperator, c_measured: float, energy_target: float,
                  **kw) -> tuple[float, float, BetaFit]:
    """Single-charge ensemble exp(-beta H_eps - lambda_c C): lambda_c from tanh, then beta."""
    lc = invert_single_charge(c_measured)
    fit = fit_beta(h_eps, c, None, None, (0.0, lc, 0.0), energy_target, **kw)
    return fit.beta, lc, fit


__all__ = [
    "BetaFit", "BracketError", "ChargeTargets", "DEFAULT_DELTA", "GgeDensity", "GgeParameters",
    "InfeasibleTargetsError", "commutator_ratio", "doublet_block_beta",
    "doublet_block_energy", "fit_beta", "fit_perturbed", "forward_map", "gge_density",
    "gge_expectation", "invert_single_charge", "solve_multipliers", "spectral_norm",
]
