"""Quantum channels on the looped modes: Kraus sets, superoperators, fixed points.

Truncation bookkeeping is explicit: every channel carries
`valid_max_photons`, the largest total photon number of input states for
which the Kraus set is complete (sum K^dag K = identity) on the truncated
space.  Applying a channel to states populated beyond that bound is a hard
error rather than a silent leak.
"""

from dataclasses import dataclass
from math import comb, sqrt

import numpy as np
import scipy.linalg

from .errors import DegenerateFixedPointError, TruncationError
from .fock import FockBasis, tensor_index_map
from .lift import LiftedUnitary
from .matrixkit import unvec, vec
from .qstate import POPULATED_CUTOFF, DensityMatrix

_EIG_CUTOFF = 1e-12       # eigenvalues of rho_ext below this are dropped
_PRUNE_NORM = 1e-14       # Kraus operators with max |entry| below this are pruned
SUPEROP_DIM_CAP = 256     # largest loop-space dimension for superoperator assembly
_DENSE_EIG_CAP = 4096


class QuantumChannel:
    """A finite Kraus set acting on a truncated Fock space of the looped modes."""

    def __init__(self, basis: FockBasis, kraus, valid_max_photons: int,
                 max_photon_gain: int = 0):
        kraus = [np.asarray(k, dtype=complex) for k in kraus]
        d = basis.size
        for k in kraus:
            if k.shape != (d, d):
                raise ValueError(f"Kraus operator shape {k.shape} does not match basis size {d}")
        if not kraus:
            raise ValueError("channel needs at least one Kraus operator")
        self.basis = basis
        self.kraus = kraus
        self.valid_max_photons = int(valid_max_photons)
        self.max_photon_gain = int(max_photon_gain)

    def completeness_operator(self) -> np.ndarray:
        """sum K^dag K, identity on the valid subspace."""
        out = np.zeros((self.basis.size, self.basis.size), dtype=complex)
        for k in self.kraus:
            out += k.conj().T @ k
        return out

    def apply_matrix(self, mat: np.ndarray) -> np.ndarray:
        """Raw Kraus sum on an array, deterministic summation order."""
        out = np.zeros_like(mat, dtype=complex)
        for k in self.kraus:
            out += k @ mat @ k.conj().T
        return out

    def apply(self, rho: DensityMatrix, leak_tolerance: float = 0.0) -> DensityMatrix:
        """Apply the channel to a state within the valid subspace.

        Population above `valid_max_photons` exceeding
        max(leak_tolerance, POPULATED_CUTOFF) raises TruncationError; smaller
        amounts are allowed to leak and the output trace is renormalized.
        """
        if rho.basis != self.basis:
            raise ValueError("state basis does not match the channel basis")
        weights = rho.sector_weights()
        excess = float(weights[self.valid_max_photons + 1:].sum())
        if excess > max(leak_tolerance, POPULATED_CUTOFF):
            raise TruncationError(
                f"state populates sectors above the channel validity bound "
                f"{self.valid_max_photons} with weight {excess:.3e}"
            )
        out = self.apply_matrix(rho.mat)
        if excess > 0.0:
            tr = np.trace(out).real
            if tr <= 0:
                raise TruncationError("channel output lost all weight to truncation")
            out /= tr
        return DensityMatrix(self.basis, out, check=False)

    def __repr__(self):
        return (
            f"QuantumChannel(basis={self.basis!r}, n_kraus={len(self.kraus)}, "
            f"valid_max_photons={self.valid_max_photons})"
        )


def loop_channel(lifted: LiftedUnitary, rho_ext: DensityMatrix) -> QuantumChannel:
    """One-iteration channel on the looped modes: inject rho_ext, evolve, trace out.

    rho_ext lives on the external modes (the leading M-L ones); the looped
    modes are the trailing L.  Spectrally decomposes rho_ext (eigenvalues
    below 1e-12 dropped) and emits K = sqrt(lambda_j) <m| L(U) |psi_j> for
    every external output basis state m, pruning Kraus operators that vanish
    by photon-number bookkeeping.
    """
    joint = lifted.basis
    ext_basis = rho_ext.basis
    n_looped = joint.modes - ext_basis.modes
    if n_looped < 1:
        raise ValueError("lifted matrix must cover at least one looped mode beyond rho_ext")
    loop_basis = FockBasis(n_looped, joint.n_max)
    n_env = rho_ext.max_populated_sector()
    if n_env > joint.n_max:
        raise TruncationError("rho_ext populates sectors beyond the joint truncation")

    evals, evecs = np.linalg.eigh(rho_ext.mat)
    # the injected state may live on a smaller truncation than the joint
    # space, but the output projectors <m| span the full external basis
    ext_out = FockBasis(ext_basis.modes, joint.n_max)
    jmap_in = tensor_index_map(ext_basis, loop_basis, joint)
    jmap_out = tensor_index_map(ext_out, loop_basis, joint)
    u_pad = np.zeros((joint.size + 1, joint.size + 1), dtype=complex)
    u_pad[:joint.size, :joint.size] = lifted.full()

    kraus = []
    for lam, psi in zip(evals, evecs.T):
        if lam < _EIG_CUTOFF:
            continue
        # columns of L(U) applied to |psi> tensor each loop basis state
        w = np.zeros((joint.size + 1, loop_basis.size), dtype=complex)
        for alpha, c in enumerate(psi):
            if abs(c) < 1e-16:
                continue
            w += c * u_pad[:, jmap_in[alpha, :]]
        root = sqrt(lam)
        for m in range(ext_out.size):
            k = root * w[jmap_out[m, :], :]
            if np.abs(k).max() > _PRUNE_NORM:
                kraus.append(k)
    return QuantumChannel(
        loop_basis, kraus,
        valid_max_photons=joint.n_max - n_env,
        max_photon_gain=n_env,
    )


def loss_channel(transmission, modes: int, n_max: int) -> QuantumChannel:
    """Photon-loss channel with per-mode power transmission.

    Single-mode Kraus operators indexed by the number of photons lost,
    K_k = sum_n sqrt(binom(n,k) T^(n-k) (1-T)^k) |n-k><n|, extended to
    several modes by the tensor product with Fock renumbering.  Complete on
    the whole truncated space: losing photons never leaves the basis.
    """
    t = np.broadcast_to(np.asarray(transmission, dtype=float), (modes,))
    if np.any((t < 0) | (t > 1)):
        raise ValueError(f"transmissions must lie in [0, 1], got {t}")
    basis = FockBasis(modes, n_max)
    kraus = []
    for lost in basis.states:  # every loss pattern with total <= n_max
        amp = np.ones(basis.size)
        target = np.full(basis.size, -1, dtype=int)
        for i, n_occ in enumerate(basis.states):
            if any(n_occ[m] < lost[m] for m in range(modes)):
                continue
            a = 1.0
            for m in range(modes):
                n, k = n_occ[m], lost[m]
                a *= comb(n, k) * t[m] ** (n - k) * (1.0 - t[m]) ** k
            if a == 0.0:
                continue
            target[i] = basis.index_of(tuple(n - k for n, k in zip(n_occ, lost)))
            amp[i] = sqrt(a)
        cols = np.nonzero(target >= 0)[0]
        if cols.size == 0:
            continue
        k_mat = np.zeros((basis.size, basis.size), dtype=complex)
        k_mat[target[cols], cols] = amp[cols]
        kraus.append(k_mat)
    return QuantumChannel(basis, kraus, valid_max_photons=n_max, max_photon_gain=0)


def identity_channel(basis: FockBasis) -> QuantumChannel:
    return QuantumChannel(basis, [np.eye(basis.size, dtype=complex)],
                          valid_max_photons=basis.n_max, max_photon_gain=0)


def compose(outer: QuantumChannel, inner: QuantumChannel) -> QuantumChannel:
    """Channel applying `inner` first: Kraus set {K_out K_in}.

    The validity bound accounts for the photon-number growth of the inner
    channel: valid = min(inner.valid, outer.valid - inner.gain).
    """
    if outer.basis != inner.basis:
        raise ValueError("channel bases do not match")
    kraus = []
    for ko in outer.kraus:
        for ki in inner.kraus:
            k = ko @ ki
            if np.abs(k).max() > _PRUNE_NORM:
                kraus.append(k)
    return QuantumChannel(
        outer.basis, kraus,
        valid_max_photons=min(inner.valid_max_photons,
                              outer.valid_max_photons - inner.max_photon_gain),
        max_photon_gain=inner.max_photon_gain + outer.max_photon_gain,
    )


@dataclass
class Superoperator:
    """Matrix acting on column-stacked density matrices: vec(E(rho)) = G vec(rho)."""

    basis: FockBasis
    matrix: np.ndarray

    def apply(self, rho_mat: np.ndarray) -> np.ndarray:
        d = self.basis.size
        return unvec(self.matrix @ vec(rho_mat), d, d)


def to_superoperator(channel: QuantumChannel) -> Superoperator:
    """G = sum conj(K) kron K under column stacking."""
    d = channel.basis.size
    if d > SUPEROP_DIM_CAP:
        raise ValueError(
            f"loop dimension {d} exceeds the superoperator guard {SUPEROP_DIM_CAP}"
        )
    g = np.zeros((d * d, d * d), dtype=complex)
    for k in channel.kraus:
        g += np.kron(k.conj(), k)
    return Superoperator(channel.basis, g)


@dataclass
class StationaryResult:
    """Fixed point of a loop channel plus spectral diagnostics of G."""

    rho: DensityMatrix
    eigenvalue: complex
    second_modulus: float
    unit_eigenvalue_count: int


def fixed_point(channel, residual_tol: float = 1e-10) -> DensityMatrix | None:
    """Fast trace-normalized fixed point of G, without spectral diagnostics.

    Solves the bordered system (I - G + t vec(I)^H) x = t, which is
    nonsingular exactly when the unit eigenvalue is simple; returns None on
    any sign of trouble (singular system, large residual, non-state output)
    so callers can fall back to the dense spectral route.
    """
    superop = channel if isinstance(channel, Superoperator) else to_superoperator(channel)
    g = superop.matrix
    d = superop.basis.size
    tr_vec = vec(np.eye(d, dtype=complex))
    t = tr_vec / d
    a = np.eye(d * d, dtype=complex) - g + np.outer(t, tr_vec.conj())
    try:
        lu, piv = scipy.linalg.lu_factor(a)
        x = scipy.linalg.lu_solve((lu, piv), t)
        # a degenerate fixed space makes the bordered matrix singular; any
        # trace-1 fixed point still solves A x = t exactly, so probe the
        # factorization with a generic right-hand side to expose rank loss
        rng = np.random.default_rng(0)
        z = rng.standard_normal(d * d) + 1j * rng.standard_normal(d * d)
        probe = scipy.linalg.lu_solve((lu, piv), z)
    except (scipy.linalg.LinAlgError, ValueError):
        return None
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(probe))):
        return None
    if np.linalg.norm(a @ probe - z) > 1e-8 * np.linalg.norm(z):
        return None
    if np.linalg.norm(g @ x - x) > residual_tol * max(1.0, np.linalg.norm(x)):
        return None
    rho = unvec(x, d, d)
    rho = (rho + rho.conj().T) / 2
    tr = np.trace(rho).real
    if abs(tr - 1.0) > 1e-8:
        return None
    rho /= tr
    if np.linalg.eigvalsh(rho)[0] < -1e-8:
        return None
    return DensityMatrix(superop.basis, rho, check=False)


def stationary_state(channel, degeneracy_gap: float = 1e-8,
                     eigenvalue_tol: float = 1e-6) -> StationaryResult:
    """Unique fixed point of the channel via the eigenvalue-1 eigenvector of G.

    Raises DegenerateFixedPointError when the eigenvalue-1 eigenspace has
    numerical dimension above one (more than one eigenvalue within
    `degeneracy_gap` of 1), in which case the stationary state is not unique.
    The principal eigenvalue must sit within `eigenvalue_tol` of 1: a larger
    drift means the truncation leaks the stationary state itself.  Loosening
    the tolerance computes the truncated model's own fixed point, which is
    exact for the channel as built regardless of the leak.
    """
    superop = channel if isinstance(channel, Superoperator) else to_superoperator(channel)
    g = superop.matrix
    if g.shape[0] > _DENSE_EIG_CAP:
        raise ValueError(
            f"superoperator dimension {g.shape[0]} too large for dense diagnostics"
        )
    evals, evecs = np.linalg.eig(g)
    dist = np.abs(evals - 1.0)
    order = np.argsort(dist)
    lam = evals[order[0]]
    if abs(lam - 1.0) > eigenvalue_tol:
        raise TruncationError(
            f"no superoperator eigenvalue within {eigenvalue_tol:.1e} of 1 "
            f"(closest {lam!r}); the truncated channel leaks too much, "
            "increase n_max"
        )
    n_unit = int(np.count_nonzero(np.abs(evals - lam) < degeneracy_gap))
    if n_unit > 1:
        raise DegenerateFixedPointError(
            f"non-unique stationary state: {n_unit} eigenvalues within "
            f"{degeneracy_gap:.1e} of the unit eigenvalue"
        )
    moduli = np.abs(evals)
    moduli[order[0]] = -np.inf
    second = float(moduli.max())

    d = superop.basis.size
    rho = unvec(evecs[:, order[0]], d, d)
    tr = np.trace(rho)
    if abs(tr) < 1e-12:
        raise DegenerateFixedPointError(
            "stationary eigenvector is traceless; fixed point not unique"
        )
    rho = rho / tr
    rho = (rho + rho.conj().T) / 2
    return StationaryResult(
        rho=DensityMatrix(superop.basis, rho),
        eigenvalue=complex(lam),
        second_modulus=second,
        unit_eigenvalue_count=n_unit,
    )
