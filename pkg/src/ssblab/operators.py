"""Hamiltonians, order parameter, parity and the conserved charges C, K, W.

Operators on the ring sector are assembled from the orbit representatives;
for a representative ``b`` and a configuration ``s`` reached from it,
``<rep(s)|O|b> += <s|O|b> * sqrt(orbit(b) / orbit(rep(s)))``.

Large sectors keep charges in structured form: ``sign*(M)`` and ``K`` only
connect the two parity sectors and share one real block, and ``W`` has rank
two.  Every structured matrix supports ``@`` and ``toarray()``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .basis import DickeBasis, ReducedBasis, x_polarized_amplitudes

HERMITICITY_TOL = 1e-13
SIGN_ZERO_RTOL = 1e-9
GRAM_RESOLUTION = 1e-6


class SectorIncompatibilityError(ValueError):
    pass


class NonHermitianError(ValueError):
    pass


@dataclass(frozen=True)
class ModelParameters:
    """Long-range transverse-field Ising ring; energies in units with hbar = 1.

    ``h_c`` and ``t_c`` are reference values supplied by the user; nothing
    here computes them.
    """

    n: int
    alpha: float = 1.1
    j: float = 2.0
    h: float = 0.0
    epsilon: float = 0.0
    h_c: float | None = None
    t_c: float | None = None

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"N must be >= 2, got {self.n}")
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")


def eigh_inplace(a, evr_above: int = 1500):
    """Eigen-decomposition of a dense Hermitian ``a``, overwriting it without a layout copy.

    LAPACK wants Fortran order, so a C-ordered ``a`` would be copied even with
    ``overwrite_a``.  Its transpose is the conjugate matrix in Fortran order,
    which has the same eigenvalues and conjugated eigenvectors.
    """
    driver = "evr" if a.shape[0] > evr_above else None
    transposed = a.flags.c_contiguous and not a.flags.f_contiguous
    w, v = sla.eigh(a.T if transposed else a, overwrite_a=True, check_finite=False, driver=driver)
    if transposed and np.iscomplexobj(v):
        np.conjugate(v, out=v)
    return w, v


def real_matmul(a, x):
    """a @ x without promoting a real ``a`` to complex."""
    if np.isrealobj(a) and np.iscomplexobj(x):
        # .real/.imag are strided views that numpy cannot pass to BLAS; pack them contiguously
        k = x.shape[1] if x.ndim == 2 else 1
        y = a @ np.hstack([x.real.reshape(len(x), k), x.imag.reshape(len(x), k)])
        out = y[:, :k] + 1j * y[:, k:]
        return out if x.ndim == 2 else out[:, 0]
    return a @ x


class ParityOffDiagonal:
    """Hermitian ``[[0, z B], [conj(z) B^H, 0]]`` between two index sets."""

    def __init__(self, block, even_idx, odd_idx, phase=1.0, dim=None):
        self.block = block
        self.even_idx = np.asarray(even_idx)
        self.odd_idx = np.asarray(odd_idx)
        self.phase = complex(phase)
        self.shape = (dim or len(self.even_idx) + len(self.odd_idx),) * 2

    @property
    def dtype(self):
        return np.result_type(self.block, complex if self.phase.imag else float)

    def with_phase(self, phase) -> "ParityOffDiagonal":
        return ParityOffDiagonal(self.block, self.even_idx, self.odd_idx, phase, self.shape[0])

    def _coef(self, z):
        return z.real if z.imag == 0 else z

    def __matmul__(self, x):
        x = np.asarray(x)
        out = np.zeros(x.shape, dtype=np.result_type(x, self.dtype))
        out[self.even_idx] = self._coef(self.phase) * real_matmul(self.block, x[self.odd_idx])
        out[self.odd_idx] = self._coef(self.phase.conjugate()) * real_matmul(self.block.conj().T, x[self.even_idx])
        return out

    def toarray(self):
        out = np.zeros(self.shape, dtype=self.dtype)
        out[np.ix_(self.even_idx, self.odd_idx)] = self._coef(self.phase) * self.block
        out[np.ix_(self.odd_idx, self.even_idx)] = self._coef(self.phase.conjugate()) * self.block.conj().T
        return out


class LowRankHermitian:
    """``U S U^H`` with a thin ``U`` and a small Hermitian core ``S``."""

    def __init__(self, vectors, core):
        self.vectors = np.asarray(vectors)
        self.core = np.asarray(core)
        n = self.vectors.shape[0]
        self.shape = (n, n)
        self.dtype = np.result_type(self.vectors, self.core)

    def __matmul__(self, x):
        return self.vectors @ (self.core @ (self.vectors.conj().T @ x))

    def toarray(self):
        return self.vectors @ self.core @ self.vectors.conj().T


def to_dense(matrix) -> np.ndarray:
    if isinstance(matrix, np.ndarray):
        return matrix
    return matrix.toarray()


@dataclass(frozen=True, eq=False)
class HermitianOperator:
    """Hermitian matrix tagged with its basis.

    ``sectors`` lists ``(parity, indices)`` when the operator conserves
    parity; it is ``None`` otherwise.  ``parities`` optionally records the
    parity of every basis index, which lets parity-flipping operators be
    handled blockwise.
    """

    matrix: object
    basis_tag: str
    label: str = ""
    sectors: tuple | None = field(default=None, repr=False)
    parities: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        m = self.matrix
        if isinstance(m, np.ndarray) or sp.issparse(m):
            dev = abs(m - m.conj().T)
            worst = dev.max() if dev.size else 0.0
            if worst >= HERMITICITY_TOL:
                raise NonHermitianError(f"{self.label or 'operator'}: max |A - A^H| = {worst:.3e}")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def toarray(self) -> np.ndarray:
        return to_dense(self.matrix)

    def __matmul__(self, x):
        return self.matrix @ x

    def expectation(self, psi) -> float:
        psi = getattr(psi, "amplitudes", psi)
        val = np.vdot(psi, self.matrix @ psi)
        return float(val.real)

    def check_same_basis(self, other: "HermitianOperator") -> None:
        if other.basis_tag != self.basis_tag:
            raise ValueError(f"basis mismatch: {self.basis_tag!r} vs {other.basis_tag!r}")


def ring_distance(n: int) -> np.ndarray:
    i = np.arange(n)
    d = np.abs(i[:, None] - i[None, :])
    return np.minimum(d, n - d)


def kac_factor(n: int, alpha: float) -> float:
    """(1/(N-1)) * sum over ordered pairs i != j of d_ij**(-alpha)."""
    if n < 2:
        raise ValueError(f"N must be >= 2, got {n}")
    d = ring_distance(n)[~np.eye(n, dtype=bool)].astype(float)
    return float(np.sum(d ** (-float(alpha))) / (n - 1))


def couplings(n: int, alpha: float, j: float) -> np.ndarray:
    """V_ij = (J / Kac) * d_ij**(-alpha), zero on the diagonal."""
    d = ring_distance(n).astype(float)
    with np.errstate(divide="ignore"):
        v = (j / kac_factor(n, alpha)) * d ** (-float(alpha))
    np.fill_diagonal(v, 0.0)
    return v


def _flip_operator(basis: ReducedBasis, masks, amps) -> sp.csr_matrix:
    """Sum over ``k`` of ``amps[k]`` times the bit-flip ``s -> s ^ masks[k]``."""
    reps = basis.representatives
    idx = basis.index_of_config
    orbit = basis.orbit_sizes.astype(float)
    cols = np.arange(basis.dimension)
    rows_all, cols_all, vals_all = [], [], []
    for mask, amp in zip(masks, amps):
        rows = idx[reps ^ mask]
        if np.any(rows < 0):
            raise SectorIncompatibilityError("operator leaves the stored parity sector")
        rows_all.append(rows)
        cols_all.append(cols)
        vals_all.append(amp * np.sqrt(orbit / orbit[rows]))
    n = basis.dimension
    mat = sp.coo_matrix(
        (np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
        shape=(n, n),
    ).tocsr()
    mat.sum_duplicates()
    return ((mat + mat.T) * 0.5).tocsr()


def _check_n(basis, params: ModelParameters) -> None:
    if basis.n_sites != params.n:
        raise ValueError(f"basis has N={basis.n_sites} but parameters have N={params.n}")


def build_tfim(basis: ReducedBasis, params: ModelParameters) -> HermitianOperator:
    """H = -sum_{i<j} V_ij sx_i sx_j + h sum_i sz_i on the ring sector."""
    _check_n(basis, params)
    n = params.n
    v = couplings(n, params.alpha, params.j)
    pairs = list(combinations(range(n), 2))
    masks = [(1 << i) | (1 << k) for i, k in pairs]
    amps = [-v[i, k] for i, k in pairs]
    hop = _flip_operator(basis, masks, amps)
    sz_total = 2.0 * np.bitwise_count(basis.representatives.astype(np.uint64)) - n
    mat = (hop + sp.diags(params.h * sz_total)).tocsr()
    return HermitianOperator(mat, basis.tag, f"tfim(N={n},alpha={params.alpha},J={params.j},h={params.h})",
                             basis.parity_sectors)


def build_magnetization(basis) -> HermitianOperator:
    """Order parameter M = sum_i sx_i."""
    if isinstance(basis, DickeBasis):
        return HermitianOperator(_dicke_sx_total(basis.n_sites), basis.tag, "M", parities=basis.parities)
    if len(basis.parities_kept) != 2:
        raise SectorIncompatibilityError("M flips parity; it needs a basis holding both sectors")
    n = basis.n_sites
    mat = _flip_operator(basis, [1 << i for i in range(n)], [1.0] * n)
    return HermitianOperator(mat, basis.tag, "M", parities=basis.parities)


def build_scaled_m(basis) -> HermitianOperator:
    m = build_magnetization(basis)
    return HermitianOperator(m.matrix / basis.n_sites, m.basis_tag, "m", parities=basis.parities)


def build_perturbed(basis: ReducedBasis, params: ModelParameters) -> HermitianOperator:
    """H_eps = H_TFIM + (eps/2) sum_i sx_i; identical to build_tfim when eps == 0."""
    if params.epsilon == 0:
        return build_tfim(basis, params)
    if len(basis.parities_kept) != 2:
        raise SectorIncompatibilityError("a symmetry-breaking field needs both parity sectors")
    h0 = build_tfim(basis, params)
    m = build_magnetization(basis)
    mat = (h0.matrix + (0.5 * params.epsilon) * m.matrix).tocsr()
    return HermitianOperator(mat, basis.tag, h0.label.replace("tfim", "tfim_eps") + f"[eps={params.epsilon}]")


def build_parity(basis) -> HermitianOperator:
    """Pi = prod_j sz_j, diagonal with entries (-1)**(#down)."""
    return HermitianOperator(sp.diags(basis.parities.astype(float)).tocsr(), basis.tag, "Pi",
                             basis.parity_sectors)


def _diagonal_of(matrix):
    """Return the diagonal if ``matrix`` is diagonal, else None."""
    if sp.issparse(matrix):
        coo = matrix.tocoo()
        if np.all(coo.row == coo.col):
            return matrix.diagonal()
    elif isinstance(matrix, np.ndarray):
        d = np.diag(matrix)
        if np.count_nonzero(matrix - np.diag(d)) == 0:
            return d
    return None


def _offdiagonal_block(op: HermitianOperator):
    """The even-odd block if ``op`` only connects the two parity sectors."""
    m = op.matrix
    if isinstance(m, ParityOffDiagonal):
        return m.even_idx, m.odd_idx, m.block * (m.phase.real if m.phase.imag == 0 else m.phase)
    sectors = op.sectors
    if sectors is None and op.parities is not None:
        sectors = ((1, np.flatnonzero(op.parities == 1)), (-1, np.flatnonzero(op.parities == -1)))
    if sectors is None or len(sectors) != 2:
        return None
    (_, even), (_, odd) = sectors
    if sp.issparse(m):
        m = m.tocsr()
        if m[even][:, even].count_nonzero() or m[odd][:, odd].count_nonzero():
            return None
        return even, odd, m[even][:, odd].toarray()
    if isinstance(m, np.ndarray):
        if np.any(m[np.ix_(even, even)]) or np.any(m[np.ix_(odd, odd)]):
            return None
        return even, odd, m[np.ix_(even, odd)]
    return None


def thin_svd(block, zero_rtol: float = SIGN_ZERO_RTOL):
    """``block = U diag(s) V^H`` keeping only singular values above ``zero_rtol * s_max``.

    Uses the Hermitian eigenproblem of ``B^H B``, which is cheaper than a
    general SVD.  That route only resolves singular values down to about
    ``sqrt(eps) * s_max``; if any retained value falls below
    ``GRAM_RESOLUTION * s_max`` a full LAPACK SVD is used instead.
    """
    block = np.asarray(block)
    if block.size == 0:
        return block[:, :0], np.zeros(0), block[:0].T
    w, v = sla.eigh(block.conj().T @ block, driver="evr" if block.shape[1] > 1500 else None)
    s = np.sqrt(np.clip(w, 0.0, None))
    smax = s.max()
    keep = s >= zero_rtol * smax
    ambiguous = keep & (s < GRAM_RESOLUTION * smax)
    if np.any(ambiguous) or (np.any(~keep) and zero_rtol > GRAM_RESOLUTION):
        u, s, vh = sla.svd(block, full_matrices=False, lapack_driver="gesdd")
        keep = s >= zero_rtol * s[0]
        return u[:, keep], s[keep], vh[keep].conj().T
    # descending order; copy so the factors stay BLAS-compatible (no negative strides)
    s, v = s[keep][::-1].copy(), np.ascontiguousarray(v[:, keep][:, ::-1])
    u = (block @ v) / s
    return u, s, v


def sign_star(a: HermitianOperator, zero_rtol: float = SIGN_ZERO_RTOL) -> HermitianOperator:
    """Spectral sign of ``a`` with eigenvalues below ``zero_rtol * ||a||`` sent to 0."""
    label = f"sign*({a.label})"
    diag = _diagonal_of(a.matrix)
    if diag is not None:
        scale = np.max(np.abs(diag)) if diag.size else 0.0
        s = np.where(np.abs(diag) < zero_rtol * scale, 0.0, np.sign(diag))
        return HermitianOperator(sp.diags(s).tocsr(), a.basis_tag, label, a.sectors)
    off = _offdiagonal_block(a)
    if off is not None:
        even, odd, block = off
        # Eigenpairs of [[0,B],[B^H,0]] are (u, +-v)/sqrt2 with eigenvalues +-s.
        u, s, v = thin_svd(block, zero_rtol)
        q = u @ v.conj().T
        return HermitianOperator(ParityOffDiagonal(q, even, odd, 1.0, a.dim), a.basis_tag, label,
                                 parities=a.parities)
    vals, vecs = np.linalg.eigh(a.toarray())
    scale = np.max(np.abs(vals)) if vals.size else 0.0
    s = np.where(np.abs(vals) < zero_rtol * scale, 0.0, np.sign(vals))
    mat = (vecs * s) @ vecs.conj().T
    mat = 0.5 * (mat + mat.conj().T)
    if np.isrealobj(a.toarray()):
        mat = mat.real
    return HermitianOperator(mat, a.basis_tag, label)


def build_K(c: HermitianOperator, pi: HermitianOperator) -> HermitianOperator:
    """K = (i/2)[C, Pi]."""
    c.check_same_basis(pi)
    pdiag = _diagonal_of(pi.matrix)
    cm = c.matrix
    if isinstance(cm, ParityOffDiagonal) and pdiag is not None:
        if np.all(pdiag[cm.even_idx] == 1) and np.all(pdiag[cm.odd_idx] == -1):
            return HermitianOperator(cm.with_phase(-1j * cm.phase), c.basis_tag, "K", parities=c.parities)
    cd, pd = c.toarray(), pi.toarray()
    k = 0.5j * (cd @ pd - pd @ cd)
    return HermitianOperator(0.5 * (k + k.conj().T), c.basis_tag, "K")


def polarized_states(basis) -> tuple[np.ndarray, np.ndarray]:
    """Amplitudes of the x-polarised product states with M = +N and M = -N."""
    if isinstance(basis, DickeBasis):
        n = basis.n_sites
        k = np.arange(n + 1)
        from scipy.special import comb

        plus = np.sqrt(comb(n, k)) * 2.0 ** (-n / 2)
        return plus, plus * basis.parities
    return x_polarized_amplitudes(basis, 1), x_polarized_amplitudes(basis, -1)


def build_W(basis) -> HermitianOperator:
    """W = i|N><-N| - i|-N><N|, stored with rank two."""
    plus, minus = polarized_states(basis)
    core = np.array([[0, 1j], [-1j, 0]])
    return HermitianOperator(LowRankHermitian(np.column_stack([plus, minus]), core), basis.tag, "W")


def _dicke_sx_total(n: int) -> np.ndarray:
    """sum_i sx_i = 2 J_x in the Dicke basis ordered by number of down spins."""
    k = np.arange(1, n + 1)
    off = np.sqrt(k * (n - k + 1.0))
    return np.diag(off, 1) + np.diag(off, -1)


def build_fully_connected(n: int, h: float) -> HermitianOperator:
    """H = -(1/N) (sum_i sx_i)**2 + h sum_i sz_i on the j = N/2 multiplet.

    The i == j terms of the square are kept, so H equals -(1/N) M**2 + 2 h J_z
    literally.
    """
    basis = DickeBasis(n)
    mx = _dicke_sx_total(n)
    sz_total = n - 2.0 * np.arange(n + 1)
    mat = -(mx @ mx) / n + np.diag(h * sz_total)
    return HermitianOperator(mat, basis.tag, f"fully_connected(N={n},h={h})", basis.parity_sectors)


def commutator_norm(a, b) -> float:
    """Frobenius norm of [a, b] for dense-convertible operators."""
    ad = to_dense(getattr(a, "matrix", a))
    bd = to_dense(getattr(b, "matrix", b))
    return float(np.linalg.norm(ad @ bd - bd @ ad))
