"""Spin-1/2 ring configurations and the zero-momentum, inversion-even sector.

Configurations are integers: bit ``i`` set means site ``i`` points up along z.
A symmetric basis state is the uniform superposition over one orbit of the
dihedral group generated by ring translations and the reflection
``i -> N - 1 - i``; the orbit minimum is the stored representative.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

N_MAX = 24
"""Largest ring handled; the lookup tables hold ``2**N`` int64 entries."""


class InvalidSizeError(ValueError):
    pass


class BasisMismatchError(ValueError):
    pass


def parity_of(bits, n_sites: int):
    """(-1)**(number of down spins), vectorised over ``bits``."""
    ups = np.bitwise_count(np.asarray(bits, dtype=np.uint64)).astype(np.int64)
    return np.where((n_sites - ups) % 2 == 0, 1, -1)


@dataclass(frozen=True)
class SpinConfiguration:
    bits: int
    n_sites: int

    def __post_init__(self):
        if self.n_sites < 2:
            raise InvalidSizeError(f"n_sites must be >= 2, got {self.n_sites}")
        if not 0 <= self.bits < (1 << self.n_sites):
            raise ValueError(f"bits={self.bits} out of range for N={self.n_sites}")

    @property
    def parity(self) -> int:
        n_down = self.n_sites - bin(self.bits).count("1")
        return 1 if n_down % 2 == 0 else -1


def _reverse_bits(states: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros_like(states)
    for i in range(n):
        out |= ((states >> i) & 1) << (n - 1 - i)
    return out


def _rotate(states: np.ndarray, n: int) -> np.ndarray:
    mask = (1 << n) - 1
    return ((states << 1) | (states >> (n - 1))) & mask


def _orbit_min_and_stabilizer(states: np.ndarray, n: int):
    """Orbit minimum and stabilizer order for every entry of ``states``."""
    rep = states.copy()
    stab = np.zeros(states.shape, dtype=np.int64)
    for start in (states, _reverse_bits(states, n)):
        t = start
        for _ in range(n):
            np.minimum(rep, t, out=rep)
            stab += t == states
            t = _rotate(t, n)
    return rep, stab


def orbit_representative(config: SpinConfiguration) -> tuple[SpinConfiguration, int]:
    """Return the dihedral-orbit minimum of ``config`` and the orbit size."""
    n = config.n_sites
    rep, stab = _orbit_min_and_stabilizer(np.array([config.bits], dtype=np.int64), n)
    return SpinConfiguration(int(rep[0]), n), (2 * n) // int(stab[0])


def _parse_parity(parity) -> tuple[int, ...]:
    if parity in (None, "both", 0):
        return (1, -1)
    if parity in (1, "+", "+1"):
        return (1,)
    if parity in (-1, "-", "-1"):
        return (-1,)
    raise ValueError(f"parity must be +1, -1 or 'both', got {parity!r}")


@dataclass(frozen=True, eq=False)
class ReducedBasis:
    """Zero-momentum, inversion-even sector of an ``n_sites`` ring.

    ``representatives`` is sorted ascending inside each parity block and the
    even block precedes the odd block.  ``normalizations`` holds the norm of
    the group sum ``sum_g g|rep>``, which equals ``2N / sqrt(orbit_size)``.
    """

    n_sites: int
    parities_kept: tuple[int, ...]
    representatives: np.ndarray
    orbit_sizes: np.ndarray
    parities: np.ndarray
    _rep_of: np.ndarray = field(repr=False)

    @property
    def dimension(self) -> int:
        return len(self.representatives)

    @property
    def normalizations(self) -> np.ndarray:
        return 2 * self.n_sites / np.sqrt(self.orbit_sizes)

    @property
    def tag(self) -> str:
        p = {(1, -1): "both", (1,): "+", (-1,): "-"}[self.parities_kept]
        return f"ring{self.n_sites}-k0-inv+-parity{p}"

    @property
    def parity_blocks(self) -> tuple[tuple[int, int, int], ...]:
        """``(parity, start, stop)`` for each block, in storage order."""
        blocks, start = [], 0
        for p in self.parities_kept:
            stop = start + int(np.count_nonzero(self.parities == p))
            blocks.append((p, start, stop))
            start = stop
        return tuple(blocks)

    @property
    def parity_sectors(self) -> tuple[tuple[int, np.ndarray], ...]:
        return tuple((p, np.arange(a, b)) for p, a, b in self.parity_blocks)

    @cached_property
    def index_of_config(self) -> np.ndarray:
        """Map every configuration to the index of its representative, or -1."""
        lookup = np.full(1 << self.n_sites, -1, dtype=np.int64)
        lookup[self.representatives] = np.arange(self.dimension)
        return lookup[self._rep_of]

    def representative_of(self, bits):
        return self._rep_of[bits]

    def check_compatible(self, tag: str) -> None:
        if tag != self.tag:
            raise BasisMismatchError(f"state lives in {tag!r}, basis is {self.tag!r}")

    def __repr__(self):
        return f"ReducedBasis(n_sites={self.n_sites}, tag={self.tag!r}, dimension={self.dimension})"


def enumerate_sector(n_sites: int, parity=None) -> ReducedBasis:
    """Build the k=0, inversion-even basis, optionally restricted to one parity."""
    if n_sites < 2:
        raise InvalidSizeError(f"N must be >= 2, got {n_sites}")
    if n_sites > N_MAX:
        raise InvalidSizeError(f"N={n_sites} exceeds the supported cap N_MAX={N_MAX}")
    kept = _parse_parity(parity)
    states = np.arange(1 << n_sites, dtype=np.int64)
    rep_of, stab = _orbit_min_and_stabilizer(states, n_sites)
    is_rep = rep_of == states
    reps = states[is_rep]
    orbit = (2 * n_sites) // stab[is_rep]
    # All characters are +1 in this sector, so no orbit can cancel.
    assert np.all(orbit > 0)
    par = parity_of(reps, n_sites)
    order = np.concatenate([np.flatnonzero(par == p) for p in kept])
    return ReducedBasis(
        n_sites=n_sites,
        parities_kept=kept,
        representatives=reps[order],
        orbit_sizes=orbit[order],
        parities=par[order],
        _rep_of=rep_of,
    )


@dataclass(frozen=True)
class StateVector:
    """Normalised amplitude vector tagged with the basis it is expressed in."""

    amplitudes: np.ndarray
    basis_tag: str

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex)
        object.__setattr__(self, "amplitudes", amps)
        norm = np.linalg.norm(amps)
        if abs(norm - 1.0) > 1e-12:
            raise ValueError(f"state is not normalised (norm={norm!r})")

    @classmethod
    def normalized(cls, amplitudes, basis_tag: str) -> "StateVector":
        amps = np.asarray(amplitudes, dtype=complex)
        return cls(amps / np.linalg.norm(amps), basis_tag)


def full_tag(n_sites: int) -> str:
    return f"full{n_sites}"


def expand_to_full(state: StateVector, basis: ReducedBasis) -> StateVector:
    """Write a sector state in the ``2**N`` configuration basis."""
    basis.check_compatible(state.basis_tag)
    idx = basis.index_of_config
    out = np.zeros(1 << basis.n_sites, dtype=complex)
    inside = idx >= 0
    out[inside] = state.amplitudes[idx[inside]] / np.sqrt(basis.orbit_sizes[idx[inside]])
    return StateVector(out, full_tag(basis.n_sites))


def project_to_sector(full: StateVector, basis: ReducedBasis) -> np.ndarray:
    """Sector amplitudes ``<rep_sym|full>`` (not renormalised)."""
    if full.basis_tag != full_tag(basis.n_sites):
        raise BasisMismatchError(f"expected a {full_tag(basis.n_sites)} state, got {full.basis_tag!r}")
    idx = basis.index_of_config
    inside = idx >= 0
    out = np.zeros(basis.dimension, dtype=complex)
    np.add.at(out, idx[inside], full.amplitudes[inside])
    return out / np.sqrt(basis.orbit_sizes)


def x_polarized_amplitudes(basis: ReducedBasis, sign: int = 1) -> np.ndarray:
    """Sector amplitudes of the product state with every spin along ``sign * x``."""
    n = basis.n_sites
    amp = np.sqrt(basis.orbit_sizes) * 2.0 ** (-n / 2)
    if sign < 0:
        amp = amp * basis.parities
    return amp


@dataclass(frozen=True)
class DickeBasis:
    """Fully symmetric spin-N/2 multiplet; index ``k`` counts down spins."""

    n_sites: int

    def __post_init__(self):
        if self.n_sites < 2:
            raise InvalidSizeError(f"N must be >= 2, got {self.n_sites}")

    @property
    def dimension(self) -> int:
        return self.n_sites + 1

    @property
    def tag(self) -> str:
        return f"dicke{self.n_sites}"

    @property
    def parities(self) -> np.ndarray:
        return np.where(np.arange(self.n_sites + 1) % 2 == 0, 1, -1)

    @property
    def parity_sectors(self) -> tuple[tuple[int, np.ndarray], ...]:
        k = np.arange(self.n_sites + 1)
        return ((1, k[k % 2 == 0]), (-1, k[k % 2 == 1]))

    def check_compatible(self, tag: str) -> None:
        if tag != self.tag:
            raise BasisMismatchError(f"state lives in {tag!r}, basis is {self.tag!r}")
