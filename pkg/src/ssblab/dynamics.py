"""Spectral decomposition, unitary propagation and long-time averages.

Propagation is done in the energy eigenbasis.  For very long times the phase
``E t`` is reduced modulo ``2 pi`` with error-free products (Dekker splitting)
and a double-double ``1/(2 pi)``, so a phase stays accurate to ~1e-15 rad for
``t`` up to ~1e17 given the stored eigenvalue.  The eigenvalues themselves are
only accurate to ~``eps * ||H||``, which limits how far physical dephasing can
be trusted; see the README.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .basis import StateVector
from .operators import (HermitianOperator, ParityOffDiagonal, _offdiagonal_block, eigh_inplace, real_matmul,
                        thin_svd, to_dense)

CLUSTER_RTOL = 1e-8
DENSE_LIMIT = 1500

_INV_2PI_HI = 0.15915494309189535
_INV_2PI_LO = -9.839338337591243e-18
_SPLITTER = 134217729.0  # 2**27 + 1


class RampConvergenceError(RuntimeError):
    def __init__(self, achieved, n_steps):
        super().__init__(f"ramp did not converge: change {achieved:.3e} after {n_steps} steps")
        self.achieved = achieved
        self.n_steps = n_steps


class MissingParityBlockError(ValueError):
    pass


# ---------------------------------------------------------------- phases


def _split(a):
    c = _SPLITTER * a
    hi = c - (c - a)
    return hi, a - hi


def _two_prod(a, b):
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


def phase_cycles(energies, t) -> np.ndarray:
    """Fractional part of ``E t / (2 pi)`` in [-1/2, 1/2), computed compensated."""
    e = np.asarray(energies, dtype=float)
    t = float(t)
    p, err = _two_prod(e, _INV_2PI_HI)
    err = err + e * _INV_2PI_LO
    x_hi = p + err
    x_lo = err - (x_hi - p)
    q, qerr = _two_prod(x_hi, t)
    qerr = qerr + x_lo * t
    frac = q - np.round(q)
    total = frac + qerr
    return total - np.round(total)


def phase_factors(energies, t) -> np.ndarray:
    """exp(-i E t) for every energy, safe for t up to ~1e17."""
    return np.exp(-2j * np.pi * phase_cycles(energies, t))


# ---------------------------------------------------------------- spectra


@dataclass(frozen=True)
class EigenBlock:
    rows: np.ndarray
    cols: np.ndarray
    vectors: np.ndarray


@dataclass(frozen=True, eq=False)
class EigenSystem:
    """Ascending eigenvalues with eigenvectors stored per parity block."""

    values: np.ndarray
    blocks: tuple[EigenBlock, ...]
    basis_tag: str
    parities: np.ndarray | None = None
    cluster_rtol: float = CLUSTER_RTOL
    clusters: tuple[np.ndarray, ...] = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "clusters", degeneracy_clusters(self.values, self.cluster_rtol))

    @property
    def dim(self) -> int:
        return len(self.values)

    def to_eigenbasis(self, psi):
        psi = getattr(psi, "amplitudes", psi)
        out = np.zeros((self.dim,) + np.shape(psi)[1:], dtype=complex)
        for b in self.blocks:
            out[b.cols] = real_matmul(b.vectors.conj().T, psi[b.rows])
        return out

    def from_eigenbasis(self, coeffs):
        out = np.zeros((self.dim,) + np.shape(coeffs)[1:], dtype=complex)
        for b in self.blocks:
            out[b.rows] = real_matmul(b.vectors, coeffs[b.cols])
        return out

    def columns(self, cols) -> np.ndarray:
        """Eigenvectors ``cols`` (sorted-order indices) written in the basis."""
        cols = np.asarray(cols)
        out = np.zeros((self.dim, len(cols)), dtype=np.result_type(*[b.vectors for b in self.blocks]))
        for b in self.blocks:
            pos = np.searchsorted(b.cols, cols) if len(b.cols) else np.zeros(len(cols), int)
            pos = np.minimum(pos, len(b.cols) - 1)
            hit = b.cols[pos] == cols
            if np.any(hit):
                out[np.ix_(b.rows, np.flatnonzero(hit))] = b.vectors[:, pos[hit]]
        return out

    @property
    def vectors(self) -> np.ndarray:
        return self.columns(np.arange(self.dim))


def degeneracy_clusters(values, rtol: float = CLUSTER_RTOL) -> tuple[np.ndarray, ...]:
    """Split sorted ``values`` where consecutive gaps exceed ``rtol * span``."""
    values = np.asarray(values)
    if values.size == 0:
        return ()
    span = values[-1] - values[0]
    tol = rtol * (span if span > 0 else 1.0)
    cuts = np.flatnonzero(np.diff(values) > tol) + 1
    return tuple(np.split(np.arange(values.size), cuts))


def _dense_block(matrix, rows):
    if sp.issparse(matrix):
        return matrix[rows][:, rows].toarray()
    return to_dense(matrix)[np.ix_(rows, rows)]


def _eigh(a):
    return eigh_inplace(a, DENSE_LIMIT)


def diagonalize(h, cluster_rtol: float = CLUSTER_RTOL) -> EigenSystem:
    """Full spectrum; parity-conserving operators are diagonalised per sector."""
    if not isinstance(h, HermitianOperator):
        h = HermitianOperator(np.asarray(h), "raw")
    sectors = h.sectors or ((0, np.arange(h.dim)),)
    vals, vecs, labels = [], [], []
    for parity, rows in sectors:
        w, v = _eigh(_dense_block(h.matrix, rows))
        vals.append(w)
        vecs.append((rows, v))
        labels.append(np.full(len(w), parity))
    allvals = np.concatenate(vals)
    order = np.argsort(allvals, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    blocks, start = [], 0
    for rows, v in vecs:
        cols = rank[start:start + v.shape[1]]
        srt = np.argsort(cols)
        blocks.append(EigenBlock(rows, cols[srt], v[:, srt]))
        start += v.shape[1]
    parities = np.concatenate(labels)[order] if h.sectors else None
    return EigenSystem(allvals[order], tuple(blocks), h.basis_tag, parities, cluster_rtol)


# ---------------------------------------------------------------- doublets


@dataclass(frozen=True)
class Doublet:
    plus: StateVector
    minus: StateVector
    e_plus: float
    e_minus: float

    @property
    def gap(self) -> float:
        return abs(self.e_plus - self.e_minus)


def _ground(matrix, rows):
    if len(rows) <= DENSE_LIMIT:
        w, v = np.linalg.eigh(_dense_block(matrix, rows))
        return w[0], v[:, 0]
    sub = matrix[rows][:, rows] if sp.issparse(matrix) else to_dense(matrix)[np.ix_(rows, rows)]
    v0 = np.ones(len(rows)) / math.sqrt(len(rows))
    w, v = spla.eigsh(sub, k=1, which="SA", v0=v0, tol=0)
    return w[0], v[:, 0]


def lowest_doublet(h: HermitianOperator, reference: HermitianOperator | None = None) -> Doublet:
    """Lowest eigenstate of each parity sector.

    With ``reference`` (typically C or M) the relative sign is fixed so that
    ``<E0+|reference|E0->`` is real and non-negative.
    """
    if not h.sectors or len(h.sectors) != 2:
        raise MissingParityBlockError("lowest_doublet needs an operator holding both parity sectors")
    states = {}
    for parity, rows in h.sectors:
        e, v = _ground(h.matrix, rows)
        full = np.zeros(h.dim, dtype=complex)
        full[rows] = v
        states[parity] = (float(e), full)
    (ep, vp), (em, vm) = states[1], states[-1]
    if reference is not None:
        z = np.vdot(vp, reference.matrix @ vm)
        if abs(z) > 0:
            vm = vm * (np.conj(z) / abs(z))
    return Doublet(StateVector.normalized(vp, h.basis_tag), StateVector.normalized(vm, h.basis_tag), ep, em)


def prepare_superposition(doublet: Doublet, p: float, phi: float) -> StateVector:
    """sqrt(p)|E0+> + exp(i phi) sqrt(1-p)|E0->."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    amps = math.sqrt(p) * doublet.plus.amplitudes + np.exp(1j * phi) * math.sqrt(1 - p) * doublet.minus.amplitudes
    return StateVector.normalized(amps, doublet.plus.basis_tag)


# ---------------------------------------------------------------- propagation


def evolve(es: EigenSystem, psi: StateVector, t: float) -> StateVector:
    """exp(-i H t) psi."""
    if psi.basis_tag != es.basis_tag:
        raise ValueError(f"basis mismatch: {psi.basis_tag!r} vs {es.basis_tag!r}")
    c = es.to_eigenbasis(psi.amplitudes) * phase_factors(es.values, t)
    return StateVector.normalized(es.from_eigenbasis(c), psi.basis_tag)


def evolve_many(es: EigenSystem, psi, times, chunk: int = 256):
    """Yield ``(times_chunk, states)`` with states shaped ``(dim, len(chunk))``."""
    c0 = es.to_eigenbasis(getattr(psi, "amplitudes", psi))
    times = np.asarray(times, dtype=float)
    for start in range(0, len(times), chunk):
        tc = times[start:start + chunk]
        phases = np.stack([phase_factors(es.values, t) for t in tc], axis=1)
        yield tc, es.from_eigenbasis(c0[:, None] * phases)


@dataclass(frozen=True)
class TimeSeries:
    times: np.ndarray
    values: dict

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if np.any(np.diff(times) < 0):
            raise ValueError("times must be monotone")
        for k, v in self.values.items():
            if len(v) != len(times):
                raise ValueError(f"series {k!r} has {len(v)} points, expected {len(times)}")
        object.__setattr__(self, "times", times)

    @property
    def labels(self):
        return list(self.values)


def batch_expectations(op, states) -> np.ndarray:
    """Re <psi|op|psi> for each column of ``states``."""
    mat = getattr(op, "matrix", op)
    prod = mat @ states
    return np.einsum("ij,ij->j", states.conj(), prod).real


def observable_series(es: EigenSystem, psi, times, observables: dict, chunk: int = 256) -> TimeSeries:
    times = np.asarray(times, dtype=float)
    out = {k: np.empty(len(times)) for k in observables}
    pos = 0
    for tc, states in evolve_many(es, psi, times, chunk):
        for k, op in observables.items():
            out[k][pos:pos + len(tc)] = batch_expectations(op, states)
        pos += len(tc)
    return TimeSeries(times, out)


@dataclass(frozen=True)
class RampSchedule:
    """Linear field sweep ``h(t) = h_start + sign(h_end - h_start) t / tau_q``."""

    h_start: float
    h_end: float
    tau_q: float

    def __post_init__(self):
        if not (self.tau_q > 0 and math.isfinite(self.tau_q)):
            raise ValueError(f"tau_q must be positive and finite, got {self.tau_q}")

    @property
    def duration(self) -> float:
        return abs(self.h_end - self.h_start) * self.tau_q

    def field(self, t):
        return self.h_start + math.copysign(1.0, self.h_end - self.h_start) * t / self.tau_q


@dataclass(frozen=True)
class RampResult:
    state: np.ndarray
    n_steps: int
    achieved: float


_GAUSS = (0.5 - math.sqrt(3) / 6, 0.5 + math.sqrt(3) / 6)


def _magnus_apply(hamiltonian, schedule: RampSchedule, n_steps: int, x):
    """Fourth-order Magnus steps (two Gauss points, one exponential each)."""
    dt = schedule.duration / n_steps
    x = np.array(x, dtype=complex)
    coef = math.sqrt(3) * dt / 12
    for k in range(n_steps):
        t0 = k * dt
        h1 = hamiltonian(schedule.field(t0 + _GAUSS[0] * dt))
        h2 = hamiltonian(schedule.field(t0 + _GAUSS[1] * dt))
        heff = 0.5 * (h1 + h2) - 1j * coef * (h2 @ h1 - h1 @ h2)
        w, v = np.linalg.eigh(heff)
        x = v @ (np.exp(-1j * w * dt)[:, None] * (v.conj().T @ x)) if x.ndim == 2 else \
            v @ (np.exp(-1j * w * dt) * (v.conj().T @ x))
    return x


def ramp_evolve(hamiltonian, schedule: RampSchedule, psi0, observables=(), tol: float = 1e-8,
                dt0: float = 0.05, max_steps: int = 1 << 20) -> RampResult:
    """Integrate i d/dt psi = H(h(t)) psi along ``schedule``.

    ``hamiltonian(h)`` returns a dense Hermitian array.  ``psi0`` may be a
    vector or a matrix of column states (a unit matrix gives the propagator).
    Step counts double until every observable, or the state itself when no
    observable is given, changes by less than ``tol``.
    """
    psi0 = np.asarray(getattr(psi0, "amplitudes", psi0), dtype=complex)
    if schedule.duration == 0:
        return RampResult(psi0.copy(), 0, 0.0)
    obs = [to_dense(getattr(o, "matrix", o)) for o in observables]

    def measure(x):
        if not obs:
            return x
        return np.array([np.vdot(x, o @ x).real for o in obs])

    n = max(4, math.ceil(schedule.duration / dt0))
    prev = measure(_magnus_apply(hamiltonian, schedule, n, psi0))
    change = np.inf
    while n < max_steps:
        n *= 2
        x = _magnus_apply(hamiltonian, schedule, n, psi0)
        cur = measure(x)
        change = float(np.max(np.abs(cur - prev)))
        if change < tol:
            return RampResult(x, n, change)
        prev = cur
    raise RampConvergenceError(change, n)


# ---------------------------------------------------------------- averages


def diagonal_average(psi, op, es: EigenSystem, chunk: int = 512) -> float:
    """Infinite-time average of <op>: sum over degenerate clusters of <P psi|op|P psi>."""
    psi = getattr(psi, "amplitudes", psi)
    c = es.to_eigenbasis(psi)
    mat = getattr(op, "matrix", op)
    total = 0.0
    clusters = es.clusters
    i = 0
    while i < len(clusters):
        group = [clusters[i]]
        size = len(clusters[i])
        i += 1
        while i < len(clusters) and size + len(clusters[i]) <= chunk:
            group.append(clusters[i])
            size += len(clusters[i])
            i += 1
        cols = np.concatenate(group)
        vecs = es.columns(cols)
        ov = mat @ vecs
        offset = 0
        for cl in group:
            sl = slice(offset, offset + len(cl))
            sub = vecs[:, sl].conj().T @ ov[:, sl]
            cc = c[cl]
            total += np.vdot(cc, sub @ cc).real
            offset += len(cl)
    return float(total)


@dataclass(frozen=True)
class MagnetizationHistogram:
    m_values: np.ndarray
    mean_probabilities: np.ndarray
    std_probabilities: np.ndarray

    def __post_init__(self):
        if abs(np.sum(self.mean_probabilities) - 1.0) > 1e-10:
            raise ValueError("mean probabilities do not sum to one")


class MagnetizationSpectrum:
    """Eigen-decomposition of M grouped by eigenvalue, for measurement statistics."""

    def __init__(self, n_sites: int, values, projector):
        self.n_sites = n_sites
        self.values = np.asarray(values)
        self._projector = projector

    @classmethod
    def from_operator(cls, m: HermitianOperator, n_sites: int, svd=None) -> "MagnetizationSpectrum":
        mat = m.matrix
        if svd is not None or isinstance(mat, ParityOffDiagonal) or (m.sectors is None and m.dim > DENSE_LIMIT):
            if svd is None:
                svd = offdiagonal_svd(m)
            return cls._from_svd(n_sites, *svd)
        w, v = np.linalg.eigh(to_dense(mat))
        keys = np.round(w).astype(int)
        values = np.unique(keys)
        groups = [v[:, keys == val] for val in values]

        def projector(states):
            return np.stack([np.sum(np.abs(real_matmul(g.conj().T, states)) ** 2, axis=0) for g in groups])

        return cls(n_sites, values, projector)

    @classmethod
    def _from_svd(cls, n_sites, even, odd, u, s, vh):
        keys = np.round(s).astype(int)
        pos = np.unique(keys[keys > 0])
        has_zero = 2 * len(s) < len(even) + len(odd)
        values = np.concatenate([-pos[::-1], [0] if has_zero else [], pos]).astype(int)
        v = vh.conj().T

        def projector(states):
            a = real_matmul(u.conj().T, states[even])
            b = real_matmul(v.conj().T, states[odd])
            plus = np.abs(a + b) ** 2 / 2
            minus = np.abs(a - b) ** 2 / 2
            rows = []
            for val in values:
                if val > 0:
                    rows.append(plus[keys == val].sum(axis=0))
                elif val < 0:
                    rows.append(minus[keys == -val].sum(axis=0))
                else:
                    rows.append(None)
            norm = np.sum(np.abs(states) ** 2, axis=0)
            if has_zero:
                iz = int(np.flatnonzero(values == 0)[0])
                rows[iz] = norm - sum(r for r in rows if r is not None)
            return np.stack(rows)

        return cls(n_sites, values, projector)

    def probabilities(self, states) -> np.ndarray:
        """P(M = value) for each column of ``states``; shape (n_values, n_states)."""
        states = np.asarray(states)
        if states.ndim == 1:
            return self._projector(states[:, None])[:, 0]
        return self._projector(states)


def offdiagonal_svd(m: HermitianOperator):
    """(even, odd, U, s, Vh) with the even-odd block of ``m`` equal to U diag(s) Vh."""
    off = _offdiagonal_block(m)
    if off is None:
        raise ValueError(f"{m.label} does not connect only opposite parities")
    even, odd, block = off
    u, s, v = thin_svd(block)
    return even, odd, u, s, v.conj().T


def magnetization_distribution(es: EigenSystem, mspec: MagnetizationSpectrum, psi0, times,
                               chunk: int = 256) -> MagnetizationHistogram:
    """Mean and standard deviation over ``times`` of P(m) for m = M/N."""
    probs = []
    for _, states in evolve_many(es, psi0, times, chunk):
        probs.append(mspec.probabilities(states))
    p = np.concatenate(probs, axis=1)
    mean = p.mean(axis=1)
    return MagnetizationHistogram(mspec.values / mspec.n_sites, mean, p.std(axis=1))
