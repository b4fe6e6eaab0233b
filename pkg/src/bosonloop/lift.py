"""Lift an M-mode transfer matrix to its block-diagonal Fock-space representation.

Convention
----------
The lifted operator acts on creation operators as

    L(U) a_dag[a] L(U)^dag = sum_b U[b, a] a_dag[b],

i.e. the column index of U is the input mode.  With photon-number sectors
ordered as in FockBasis, every sector block has entries

    block_n[i, j] = perm(U selected rows~i, cols~j) / sqrt(i! j!),

where i (output) and j (input) are occupation vectors of total n.  For a
unitary source each block is unitary; for a contraction (lossy transfer
matrix) each block has operator norm <= 1.  The single-photon block equals U
up to the permutation induced by the lexicographic ordering of one-photon
states.

Two interchangeable evaluation paths are provided: a creation-operator
substitution recurrence (default, fast) and the direct permanent formula.
They agree to machine precision and tests pin both.
"""

from functools import lru_cache
from math import factorial, prod, sqrt

import numpy as np

from .fock import FockBasis, enumerate_sector, sector_size
from .matrixkit import permanent, submatrix_by_multiplicity


@lru_cache(maxsize=None)
def _raising_maps(modes: int, total: int):
    """Index/weight tables for adding one photon: sector total-1 -> sector total.

    For each mode b, target[b][r] is the rank in sector `total` of the state
    obtained by adding a photon in mode b to the r-th state of sector
    total-1, and weight[b][r] = sqrt(occ_b + 1).
    """
    lower = enumerate_sector(modes, total - 1)
    rank = {occ: i for i, occ in enumerate(enumerate_sector(modes, total))}
    target = np.zeros((modes, len(lower)), dtype=int)
    weight = np.zeros((modes, len(lower)))
    for b in range(modes):
        for r, occ in enumerate(lower):
            raised = occ[:b] + (occ[b] + 1,) + occ[b + 1:]
            target[b, r] = rank[raised]
            weight[b, r] = sqrt(occ[b] + 1)
    return target, weight


class LiftedUnitary:
    """Per-sector Fock-space blocks of a transfer matrix, computed lazily."""

    def __init__(self, matrix: np.ndarray, basis: FockBasis, method: str = "recurrence"):
        matrix = np.asarray(matrix, dtype=complex)
        if matrix.shape != (basis.modes, basis.modes):
            raise ValueError(
                f"matrix shape {matrix.shape} does not match basis with {basis.modes} modes"
            )
        if method not in ("recurrence", "permanent"):
            raise ValueError(f"unknown lift method {method!r}")
        self.matrix = matrix
        self.basis = basis
        self.method = method
        self._blocks = {0: np.ones((1, 1), dtype=complex)}

    def block(self, total: int) -> np.ndarray:
        """Sector block for a fixed total photon number (memoized)."""
        if not 0 <= total <= self.basis.n_max:
            raise ValueError(f"sector {total} outside 0..{self.basis.n_max}")
        if total not in self._blocks:
            if self.method == "recurrence":
                for n in range(1, total + 1):
                    if n not in self._blocks:
                        self._blocks[n] = self._block_recurrence(n)
            else:
                self._blocks[total] = self._block_permanent(total)
        return self._blocks[total]

    def _block_recurrence(self, n: int) -> np.ndarray:
        m = self.basis.modes
        sec = enumerate_sector(m, n)
        prev_rank = {occ: i for i, occ in enumerate(enumerate_sector(m, n - 1))}
        target, weight = _raising_maps(m, n)
        prev = self._blocks[n - 1]
        blk = np.zeros((len(sec), len(sec)), dtype=complex)
        for j, occ in enumerate(sec):
            a = next(i for i, x in enumerate(occ) if x > 0)
            parent = occ[:a] + (occ[a] - 1,) + occ[a + 1:]
            pcol = prev[:, prev_rank[parent]]
            acc = np.zeros(len(sec), dtype=complex)
            for b in range(m):
                acc[target[b]] += self.matrix[b, a] * (weight[b] * pcol)
            blk[:, j] = acc / sqrt(occ[a])
        return blk

    def _block_permanent(self, n: int) -> np.ndarray:
        sec = enumerate_sector(self.basis.modes, n)
        blk = np.zeros((len(sec), len(sec)), dtype=complex)
        norms = [sqrt(prod(factorial(x) for x in occ)) for occ in sec]
        for i, iocc in enumerate(sec):
            for j, jocc in enumerate(sec):
                sub = submatrix_by_multiplicity(self.matrix, iocc, jocc)
                blk[i, j] = permanent(sub) / (norms[i] * norms[j])
        return blk

    def full(self) -> np.ndarray:
        """Dense block-diagonal matrix over the whole truncated basis."""
        out = np.zeros((self.basis.size, self.basis.size), dtype=complex)
        for n in range(self.basis.n_max + 1):
            sl = self.basis.sector_slice(n)
            out[sl, sl] = self.block(n)
        return out

    def apply_pure(self, amplitudes: np.ndarray) -> np.ndarray:
        """Blockwise matrix-vector product on a state-amplitude vector."""
        amplitudes = np.asarray(amplitudes, dtype=complex)
        if amplitudes.shape != (self.basis.size,):
            raise ValueError(
                f"amplitude vector has length {amplitudes.size}, basis needs {self.basis.size}"
            )
        out = np.empty_like(amplitudes)
        for n in range(self.basis.n_max + 1):
            sl = self.basis.sector_slice(n)
            out[sl] = self.block(n) @ amplitudes[sl]
        return out

    def conjugate(self, rho: np.ndarray) -> np.ndarray:
        """Blockwise L(U) rho L(U)^dag on a raw density-matrix array."""
        rho = np.asarray(rho, dtype=complex)
        if rho.shape != (self.basis.size, self.basis.size):
            raise ValueError("density matrix shape does not match the basis")
        out = np.empty_like(rho)
        blocks = [self.block(n) for n in range(self.basis.n_max + 1)]
        slices = [self.basis.sector_slice(n) for n in range(self.basis.n_max + 1)]
        for na, ba in enumerate(blocks):
            for nb, bb in enumerate(blocks):
                out[slices[na], slices[nb]] = ba @ rho[slices[na], slices[nb]] @ bb.conj().T
        return out


def lift(matrix: np.ndarray, basis: FockBasis, method: str = "recurrence") -> LiftedUnitary:
    """Lift a transfer matrix onto the truncated Fock basis."""
    return LiftedUnitary(matrix, basis, method=method)


def lift_apply_fock(matrix: np.ndarray, occupation) -> np.ndarray:
    """Amplitudes of L(U)|occupation> over that photon-number sector only.

    Avoids building any block: applies one substituted creation operator per
    photon, so the cost is sum over partial sectors of (modes x sector size).
    Used by the unfolding engine, where only a single column of a very large
    sector block is ever needed.
    """
    matrix = np.asarray(matrix, dtype=complex)
    occupation = tuple(occupation)
    m = matrix.shape[0]
    if len(occupation) != m:
        raise ValueError("occupation length does not match the matrix dimension")
    amps = np.ones(1, dtype=complex)
    n = 0
    for mode, count in enumerate(occupation):
        for _ in range(count):
            n += 1
            target, weight = _raising_maps(m, n)
            nxt = np.zeros(sector_size(m, n), dtype=complex)
            for b in range(m):
                nxt[target[b]] += matrix[b, mode] * (weight[b] * amps)
            amps = nxt
    norm = sqrt(prod(factorial(x) for x in occupation))
    return amps / norm
