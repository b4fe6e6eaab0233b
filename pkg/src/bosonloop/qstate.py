"""Density matrices and probability distributions over truncated Fock bases."""

import json

import numpy as np

from .errors import TruncationError
from .fock import FockBasis, tensor_index_map

HERMITICITY_ATOL = 1e-10
TRACE_ATOL = 1e-10
PSD_EIG_FLOOR = -1e-8
# below this diagonal mass a photon-number sector counts as unpopulated
POPULATED_CUTOFF = 1e-12


class DensityMatrix:
    """Hermitian, PSD, unit-trace matrix over a truncated Fock basis.

    Immutable by convention: operations return new instances.  Validation can
    be skipped (check=False) by internal hot loops that construct states from
    already-validated arithmetic.
    """

    def __init__(self, basis: FockBasis, mat: np.ndarray, check: bool = True):
        mat = np.asarray(mat, dtype=complex)
        if mat.shape != (basis.size, basis.size):
            raise ValueError(
                f"matrix shape {mat.shape} does not match basis size {basis.size}"
            )
        if check:
            herm = np.abs(mat - mat.conj().T).max()
            if herm > HERMITICITY_ATOL:
                raise ValueError(f"matrix is not Hermitian (defect {herm:.3e})")
            tr = np.trace(mat).real
            if abs(tr - 1.0) > TRACE_ATOL:
                raise ValueError(f"trace is {tr!r}, expected 1")
            lo = float(np.linalg.eigvalsh(mat)[0])
            if lo < PSD_EIG_FLOOR:
                raise ValueError(f"matrix is not PSD (min eigenvalue {lo:.3e})")
        self.basis = basis
        self.mat = mat

    def sector_weights(self) -> np.ndarray:
        """Diagonal probability mass per photon-number sector."""
        diag = np.real(np.diag(self.mat))
        return np.array([
            diag[self.basis.sector_slice(n)].sum()
            for n in range(self.basis.n_max + 1)
        ])

    def max_populated_sector(self, cutoff: float = POPULATED_CUTOFF) -> int:
        """Largest photon number whose sector carries mass above `cutoff`."""
        weights = self.sector_weights()
        populated = np.nonzero(weights > cutoff)[0]
        return int(populated[-1]) if populated.size else 0

    def purity(self) -> float:
        return float(np.trace(self.mat @ self.mat).real)

    def diagonal_distribution(self) -> "ProbabilityDistribution":
        return diagonal_distribution(self)

    def to_payload(self) -> dict:
        return {
            "modes": self.basis.modes,
            "n_max": self.basis.n_max,
            "re": self.mat.real.tolist(),
            "im": self.mat.imag.tolist(),
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_payload(), fh)

    @classmethod
    def from_json(cls, path) -> "DensityMatrix":
        with open(path) as fh:
            payload = json.load(fh)
        basis = FockBasis(int(payload["modes"]), int(payload["n_max"]))
        mat = np.array(payload["re"], dtype=float) + 1j * np.array(payload["im"], dtype=float)
        return cls(basis, mat)

    def __repr__(self):
        return f"DensityMatrix(basis={self.basis!r})"


def fock_state_dm(basis: FockBasis, occupation) -> DensityMatrix:
    """Rank-1 projector onto one occupation basis state."""
    mat = np.zeros((basis.size, basis.size), dtype=complex)
    i = basis.index_of(occupation)
    mat[i, i] = 1.0
    return DensityMatrix(basis, mat, check=False)


def random_density_matrix(basis: FockBasis, seed: int) -> DensityMatrix:
    """Hilbert-Schmidt-distributed random state: G G^dag / Tr with Ginibre G."""
    rng = np.random.default_rng(seed)
    d = basis.size
    g = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    mat = g @ g.conj().T
    mat /= np.trace(mat).real
    return DensityMatrix(basis, mat, check=False)


def tensor_product(rho_a: DensityMatrix, rho_b: DensityMatrix, joint: FockBasis,
                   max_dropped: float = 0.0) -> DensityMatrix:
    """Tensor product with Fock renumbering, A's modes leading.

    Joint sectors beyond joint.n_max are a hard error when they carry weight:
    the diagonal mass that would land past the truncation must not exceed
    max(max_dropped, POPULATED_CUTOFF).  Anything below that threshold is
    dropped and the trace renormalized.
    """
    if joint.modes != rho_a.basis.modes + rho_b.basis.modes:
        raise ValueError("joint basis mode count does not match the factors")
    wa = rho_a.sector_weights()
    wb = rho_b.sector_weights()
    dropped = sum(
        float(wa[na] * wb[nb])
        for na in range(len(wa))
        for nb in range(len(wb))
        if na + nb > joint.n_max
    )
    if dropped > max(max_dropped, POPULATED_CUTOFF):
        raise TruncationError(
            f"tensor product would push weight {dropped:.3e} past n_max={joint.n_max}",
        )
    idx = tensor_index_map(rho_a.basis, rho_b.basis, joint)
    kron = np.kron(rho_a.mat, rho_b.mat)
    flat = idx.reshape(-1)
    keep = np.nonzero(flat >= 0)[0]
    mat = np.zeros((joint.size, joint.size), dtype=complex)
    mat[np.ix_(flat[keep], flat[keep])] = kron[np.ix_(keep, keep)]
    if dropped > 0.0:
        tr = np.trace(mat).real
        if tr <= 0:
            raise TruncationError("tensor product lost all weight to truncation")
        mat /= tr
    return DensityMatrix(joint, mat, check=False)


def _split_keep(basis: FockBasis, keep) -> tuple:
    """Normalize `keep` (range or (start, stop)) to a contiguous leading or trailing block."""
    if isinstance(keep, range):
        start, stop, step = keep.start, keep.stop, keep.step
        if step != 1:
            raise ValueError("keep range must have step 1")
    else:
        start, stop = keep
    if not 0 <= start <= stop <= basis.modes:
        raise ValueError(f"keep range ({start}, {stop}) outside 0..{basis.modes}")
    if start != 0 and stop != basis.modes:
        raise ValueError(
            "partial trace supports only contiguous leading or trailing mode blocks"
        )
    return start, stop


def partial_trace(rho: DensityMatrix, keep) -> DensityMatrix:
    """Trace out all modes outside `keep` (a contiguous leading or trailing range).

    Trace, Hermiticity and positivity are preserved.  Keeping zero modes
    returns the trivial 1x1 state.
    """
    start, stop = _split_keep(rho.basis, keep)
    basis = rho.basis
    n_keep = stop - start
    keep_basis = FockBasis(n_keep, basis.n_max)
    out = np.zeros((keep_basis.size, keep_basis.size), dtype=complex)
    if n_keep == 0:
        out[0, 0] = np.trace(rho.mat)
        return DensityMatrix(keep_basis, out, check=False)
    # bucket joint indices by the traced-out part; vectorized add per bucket
    buckets = {}
    for i, occ in enumerate(basis.states):
        kept = occ[start:stop]
        traced = occ[:start] + occ[stop:]
        buckets.setdefault(traced, []).append((keep_basis.index_of(kept), i))
    for pairs in buckets.values():
        kidx = np.array([p[0] for p in pairs])
        jidx = np.array([p[1] for p in pairs])
        out[np.ix_(kidx, kidx)] += rho.mat[np.ix_(jidx, jidx)]
    return DensityMatrix(keep_basis, out, check=False)


def trace_distance(rho: DensityMatrix, sigma: DensityMatrix) -> float:
    """D(rho, sigma) = 0.5 ||rho - sigma||_1."""
    if rho.basis != sigma.basis:
        raise ValueError("trace distance needs matching bases")
    diff = rho.mat - sigma.mat
    return float(0.5 * np.abs(np.linalg.eigvalsh(diff)).sum())


def uhlmann_fidelity(rho: DensityMatrix, sigma: DensityMatrix) -> float:
    """F(rho, sigma) = (Tr sqrt(sqrt(rho) sigma sqrt(rho)))^2, clipped into [0, 1]."""
    if rho.basis != sigma.basis:
        raise ValueError("fidelity needs matching bases")
    evals, evecs = np.linalg.eigh(rho.mat)
    sqrt_rho = (evecs * np.sqrt(np.clip(evals, 0.0, None))) @ evecs.conj().T
    inner = sqrt_rho @ sigma.mat @ sqrt_rho
    lam = np.linalg.eigvalsh((inner + inner.conj().T) / 2)
    f = float(np.sqrt(np.clip(lam, 0.0, None)).sum() ** 2)
    return min(max(f, 0.0), 1.0)


def classical_fidelity(p, q) -> float:
    """Bhattacharyya overlap sum_i sqrt(p_i q_i) of two distributions."""
    pv = p.probabilities if isinstance(p, ProbabilityDistribution) else np.asarray(p, dtype=float)
    qv = q.probabilities if isinstance(q, ProbabilityDistribution) else np.asarray(q, dtype=float)
    if isinstance(p, ProbabilityDistribution) and isinstance(q, ProbabilityDistribution):
        if p.basis != q.basis:
            pv, qv = _align_distributions(p, q)
    if pv.shape != qv.shape:
        raise ValueError("distributions have different sizes")
    return float(np.sqrt(pv * qv).sum())


def _align_distributions(p, q):
    """Zero-pad two distributions over same-mode bases onto the larger basis."""
    if p.basis.modes != q.basis.modes:
        raise ValueError("distributions live on different mode counts")
    big = p.basis if p.basis.n_max >= q.basis.n_max else q.basis
    out = []
    for dist in (p, q):
        v = np.zeros(big.size)
        for occ, prob in zip(dist.basis.states, dist.probabilities):
            v[big.index_of(occ)] = prob
        out.append(v)
    return out


class ProbabilityDistribution:
    """Non-negative weights over a Fock basis, summing to 1 within 1e-9."""

    def __init__(self, basis: FockBasis, probabilities: np.ndarray, check: bool = True):
        probabilities = np.asarray(probabilities, dtype=float)
        if probabilities.shape != (basis.size,):
            raise ValueError("probability vector length does not match the basis")
        if check:
            if probabilities.min() < 0:
                raise ValueError(f"negative probability {probabilities.min():.3e}")
            s = probabilities.sum()
            if abs(s - 1.0) > 1e-9:
                raise ValueError(f"probabilities sum to {s!r}, expected 1")
        self.basis = basis
        self.probabilities = probabilities

    def probability_of(self, occupation) -> float:
        return float(self.probabilities[self.basis.index_of(occupation)])

    def sample(self, shots: int, seed: int) -> dict:
        """Inverse-CDF sampling; returns occupation -> count, deterministic per seed."""
        if shots < 1:
            raise ValueError("shots must be >= 1")
        rng = np.random.default_rng(seed)
        cdf = np.cumsum(self.probabilities)
        cdf[-1] = 1.0
        draws = np.searchsorted(cdf, rng.random(shots), side="right")
        counts = np.bincount(draws, minlength=self.basis.size)
        return {
            self.basis.state(i): int(c)
            for i, c in enumerate(counts)
            if c > 0
        }

    def to_csv_text(self, fmt: str = "%.12e") -> str:
        return "".join(
            ",".join(str(x) for x in occ) + ";" + fmt % prob + "\n"
            for occ, prob in zip(self.basis.states, self.probabilities)
        )

    def to_csv(self, path, fmt: str = "%.12e") -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv_text(fmt))

    @classmethod
    def from_csv(cls, path, check: bool = True) -> "ProbabilityDistribution":
        occs, probs = [], []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                occ_str, prob_str = line.split(";")
                occs.append(tuple(int(x) for x in occ_str.split(",")))
                probs.append(float(prob_str))
        modes = len(occs[0])
        n_max = max(sum(o) for o in occs)
        basis = FockBasis(modes, n_max)
        v = np.zeros(basis.size)
        for occ, prob in zip(occs, probs):
            v[basis.index_of(occ)] = prob
        return cls(basis, v, check=check)


def diagonal_distribution(rho: DensityMatrix) -> ProbabilityDistribution:
    """Distribution read off the density-matrix diagonal.

    Entries below -1e-8 signal a corrupted state and raise; small negative
    noise is clipped to 0 and drift up to 1e-9 in the total is renormalized
    away.
    """
    diag = np.real(np.diag(rho.mat))
    if diag.min() < -1e-8:
        raise ValueError(f"diagonal entry {diag.min():.3e} below -1e-8; state is corrupted")
    diag = np.clip(diag, 0.0, None)
    s = diag.sum()
    if abs(s - 1.0) > 1e-9:
        raise ValueError(f"diagonal sums to {s!r}; state is corrupted")
    return ProbabilityDistribution(rho.basis, diag / s, check=False)
