"""Normally ordered correlation tensors and their stationary fixed points.

A rank-(k, l) tensor holds the moments

    C[i1..ik, j1..jl] = < a_dag[i1] .. a_dag[ik]  a[j1] .. a[jl] >,

stored dense with shape (modes,)**(k+l), creation indices first.  Under a
transfer matrix U the tensor transforms as V^(x k) C (V^dag)^(x l) with
V = conj(U), where C is read as an M^k-by-M^l matrix; losses enter by
replacing U with T_out U T_in at no extra cost.

For the feedback loop the modes split into external (E, leading) and looped
(L, trailing) blocks.  Because the joint input of an iteration is a product
state, any moment whose indices straddle the split factorizes into a pure-E
moment (known from the injected state) times a pure-L moment of lower total
order, which is what makes the order-by-order stationary solve closed.
"""

import json
from dataclasses import dataclass
from itertools import combinations_with_replacement
from math import ceil, sqrt

import numpy as np

from .errors import BosonLoopError, SpectralRadiusError
from .fock import FockBasis
from .matrixkit import spectral_radius
from .qstate import DensityMatrix

_SOLVE_RESIDUAL = 1e-9
SPECTRAL_RADIUS_MARGIN = 1e-10
# the Kronecker system has dimension L^(k+l) and its assembly walks all
# M^(k+l) entries of the full-mode input tensor; both are capped explicitly
SYSTEM_DIM_CAP = 4096
ASSEMBLY_SIZE_CAP = 1 << 20


@dataclass
class CorrelationTensor:
    """Dense rank-(k, l) array of normally ordered moments over `modes` modes."""

    k: int
    l: int
    modes: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != (self.modes,) * (self.k + self.l):
            raise ValueError(
                f"values shape {self.values.shape} does not match "
                f"rank ({self.k},{self.l}) over {self.modes} modes"
            )

    def as_matrix(self) -> np.ndarray:
        return self.values.reshape(self.modes ** self.k, self.modes ** self.l)

    def conjugate_transpose(self) -> "CorrelationTensor":
        """The rank-(l, k) tensor with C'[j, i] = conj(C[i, j])."""
        perm = tuple(range(self.k, self.k + self.l)) + tuple(range(self.k))
        return CorrelationTensor(self.l, self.k, self.modes,
                                 np.conjugate(self.values.transpose(perm)))

    def to_payload(self) -> dict:
        """JSON form with flat row-major entries, index order (i1..ik, j1..jl)."""
        flat = self.values.reshape(-1)
        return {"k": self.k, "l": self.l, "modes": self.modes,
                "re": flat.real.tolist(), "im": flat.imag.tolist()}

    @classmethod
    def from_payload(cls, payload: dict) -> "CorrelationTensor":
        k, l, modes = int(payload["k"]), int(payload["l"]), int(payload["modes"])
        flat = np.array(payload["re"], dtype=float) + 1j * np.array(payload["im"], dtype=float)
        return cls(k, l, modes, flat.reshape((modes,) * (k + l)))


def _annihilation_ops(basis: FockBasis):
    ops = []
    for mode in range(basis.modes):
        a = np.zeros((basis.size, basis.size), dtype=complex)
        for i, occ in enumerate(basis.states):
            if occ[mode] > 0:
                lowered = occ[:mode] + (occ[mode] - 1,) + occ[mode + 1:]
                a[basis.index_of(lowered), i] = sqrt(occ[mode])
        ops.append(a)
    return ops


class _MomentCache:
    """Memoized normally ordered moments of one density matrix."""

    def __init__(self, rho: DensityMatrix):
        self.rho = rho
        self.basis = rho.basis
        self._ann = _annihilation_ops(rho.basis)
        self._strings = {(): np.eye(rho.basis.size, dtype=complex)}
        self._tensors = {}

    def _string(self, modes_sorted):
        if modes_sorted not in self._strings:
            head = self._string(modes_sorted[:-1])
            self._strings[modes_sorted] = head @ self._ann[modes_sorted[-1]]
        return self._strings[modes_sorted]

    def value(self, cre, ann) -> complex:
        """<a_dag[cre...] a[ann...]>, computed per sorted multiset."""
        d_cre = self._string(tuple(sorted(cre)))
        d_ann = self._string(tuple(sorted(ann)))
        return complex(np.trace(self.rho.mat @ d_cre.conj().T @ d_ann))

    def tensor(self, k: int, l: int) -> np.ndarray:
        if (k, l) not in self._tensors:
            m = self.basis.modes
            out = np.zeros((m,) * (k + l), dtype=complex)
            cache = {}
            for idx in np.ndindex(*(m,) * (k + l)):
                key = (tuple(sorted(idx[:k])), tuple(sorted(idx[k:])))
                if key not in cache:
                    cache[key] = self.value(*key)
                out[idx] = cache[key]
            self._tensors[(k, l)] = out
        return self._tensors[(k, l)]


def expectations_from_dm(rho: DensityMatrix, k: int, l: int) -> CorrelationTensor:
    """Moments by direct ladder-operator action in the truncated basis.

    Exact for states supported on at most n_max photons: the annihilation
    strings act first (never leaving the basis) and the creation strings
    raise back to at most the original sector.
    """
    if k > rho.basis.n_max or l > rho.basis.n_max:
        raise ValueError(
            f"rank ({k},{l}) exceeds the basis truncation n_max={rho.basis.n_max}"
        )
    return CorrelationTensor(k, l, rho.basis.modes, _MomentCache(rho).tensor(k, l))


def moment(rho: DensityMatrix, s_vec, r_vec) -> complex:
    """Single moment in per-mode rank form: s_vec creation / r_vec annihilation counts."""
    cre = tuple(i for i, s in enumerate(s_vec) for _ in range(s))
    ann = tuple(i for i, r in enumerate(r_vec) for _ in range(r))
    return _MomentCache(rho).value(cre, ann)


def _kron_power(a: np.ndarray, n: int) -> np.ndarray:
    out = np.eye(1, dtype=complex)
    for _ in range(n):
        out = np.kron(out, a)
    return out


def transform(tensor: CorrelationTensor, matrix: np.ndarray) -> CorrelationTensor:
    """Tensor after one pass through a (possibly lossy) transfer matrix."""
    matrix = np.asarray(matrix, dtype=complex)
    if matrix.shape != (tensor.modes, tensor.modes):
        raise ValueError(
            f"matrix shape {matrix.shape} does not match {tensor.modes} modes"
        )
    v = matrix.conj()
    out = _kron_power(v, tensor.k) @ tensor.as_matrix() @ _kron_power(v, tensor.l).conj().T
    return CorrelationTensor(tensor.k, tensor.l, tensor.modes,
                             out.reshape(tensor.values.shape))


class TensorSet:
    """Stationary loop tensors indexed by (k, l), with conjugate-symmetry access."""

    def __init__(self, modes: int):
        self.modes = modes
        self._tensors = {}

    def put(self, tensor: CorrelationTensor) -> None:
        if tensor.modes != self.modes:
            raise ValueError("tensor mode count does not match the set")
        self._tensors[(tensor.k, tensor.l)] = tensor

    def has(self, k: int, l: int) -> bool:
        return (k, l) in self._tensors or (l, k) in self._tensors

    def get(self, k: int, l: int) -> CorrelationTensor:
        if (k, l) in self._tensors:
            return self._tensors[(k, l)]
        if (l, k) in self._tensors:
            return self._tensors[(l, k)].conjugate_transpose()
        raise KeyError(f"tensor ({k},{l}) not in the set")

    def keys(self):
        return sorted(self._tensors)

    @property
    def max_rank(self) -> int:
        return max((k for k, _ in self._tensors), default=0)

    def to_json(self, path) -> None:
        payload = {"modes": self.modes,
                   "tensors": [self._tensors[key].to_payload() for key in self.keys()]}
        with open(path, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def from_json(cls, path) -> "TensorSet":
        with open(path) as fh:
            payload = json.load(fh)
        out = cls(int(payload["modes"]))
        for entry in payload["tensors"]:
            out.put(CorrelationTensor.from_payload(entry))
        return out


def _blocks(matrix: np.ndarray, n_looped: int):
    m_ext = matrix.shape[0] - n_looped
    return matrix[m_ext:, :m_ext], matrix[m_ext:, m_ext:]


def stationary_first_order(matrix: np.ndarray, n_looped: int, c_ext) -> np.ndarray:
    """Stationary <a> over the looped modes: (I - U_LL)^-1 U_LE <a>_E."""
    u_le, u_ll = _blocks(np.asarray(matrix, dtype=complex), n_looped)
    c_ext = np.asarray(c_ext, dtype=complex)
    a = np.eye(n_looped) - u_ll
    if np.linalg.cond(a) > 1e14:
        raise SpectralRadiusError(
            "I - U_LL is numerically singular; no unique stationary first-order tensor"
        )
    c_loop = np.linalg.solve(a, u_le @ c_ext)
    residual = np.linalg.norm(u_le @ c_ext + u_ll @ c_loop - c_loop)
    if residual > 1e-10 * max(1.0, np.linalg.norm(c_loop)):
        raise BosonLoopError(f"first-order stationarity residual {residual:.3e}")
    return c_loop


def _check_spectral_radius(matrix: np.ndarray, n_looped: int) -> float:
    _, u_ll = _blocks(matrix, n_looped)
    radius = spectral_radius(u_ll)
    if radius >= 1.0 - SPECTRAL_RADIUS_MARGIN:
        raise SpectralRadiusError(
            f"spectral radius of the loop block is {radius:.12f} >= 1 - 1e-10; "
            "the stationary tensor systems are not solvable"
        )
    return radius


def _input_tensor(k: int, l: int, modes: int, m_ext: int, ext: _MomentCache,
                  loop_set: TensorSet, include_loop: bool) -> np.ndarray:
    """Full-M tensor of the product state rho_ext (x) rho_loop.

    Entries factorize across the E/L split; the all-loop block is zeroed when
    it is the unknown of the current stationary solve.
    """
    out = np.zeros((modes,) * (k + l), dtype=complex)
    ext_cache = {}
    for idx in np.ndindex(*(modes,) * (k + l)):
        cre, ann = idx[:k], idx[k:]
        cre_e = tuple(i for i in cre if i < m_ext)
        cre_l = tuple(i - m_ext for i in cre if i >= m_ext)
        ann_e = tuple(j for j in ann if j < m_ext)
        ann_l = tuple(j - m_ext for j in ann if j >= m_ext)
        k_l, l_l = len(cre_l), len(ann_l)
        if not include_loop and k_l == k and l_l == l:
            continue
        ext_key = (len(cre_e), len(ann_e))
        if ext_key == (0, 0):
            ext_val = 1.0 + 0j
        else:
            if ext_key not in ext_cache:
                ext_cache[ext_key] = ext.tensor(*ext_key)
            ext_val = ext_cache[ext_key][cre_e + ann_e]
        if ext_val == 0.0:
            continue
        if (k_l, l_l) == (0, 0):
            loop_val = 1.0 + 0j
        else:
            loop_val = loop_set.get(k_l, l_l).values[cre_l + ann_l]
        out[idx] = ext_val * loop_val
    return out


def stationary_order(k: int, l: int, matrix: np.ndarray, rho_ext: DensityMatrix,
                     loop_set: TensorSet,
                     ext_moments: _MomentCache | None = None) -> CorrelationTensor:
    """Solve the rank-(k, l) stationarity system given all lower orders.

    Assembles the source term S from the transformed known blocks and solves
    (I - conj(V_LL)^(x l) kron V_LL^(x k)) vec(C) = vec(S) by dense LU.
    """
    matrix = np.asarray(matrix, dtype=complex)
    modes = matrix.shape[0]
    m_ext = rho_ext.basis.modes
    n_looped = modes - m_ext
    if n_looped ** (k + l) > SYSTEM_DIM_CAP:
        raise ValueError(
            f"stationary system for order ({k},{l}) has dimension "
            f"{n_looped ** (k + l)}, above the cap {SYSTEM_DIM_CAP}"
        )
    if modes ** (k + l) > ASSEMBLY_SIZE_CAP:
        raise ValueError(
            f"order ({k},{l}) needs a full-mode tensor with {modes ** (k + l)} "
            f"entries, above the cap {ASSEMBLY_SIZE_CAP}"
        )
    _check_spectral_radius(matrix, n_looped)
    ext = ext_moments if ext_moments is not None else _MomentCache(rho_ext)
    v = matrix.conj()
    v_ll = v[m_ext:, m_ext:]

    c_in = _input_tensor(k, l, modes, m_ext, ext, loop_set, include_loop=False)
    full = transform(CorrelationTensor(k, l, modes, c_in), matrix).values
    source = full[(slice(m_ext, modes),) * (k + l)]

    dim = n_looped ** (k + l)
    a = np.eye(dim, dtype=complex) - np.kron(
        _kron_power(v_ll, l).conj(), _kron_power(v_ll, k)
    )
    rhs = source.reshape(n_looped ** k, n_looped ** l).flatten(order="F")
    sol = np.linalg.solve(a, rhs)
    residual = np.linalg.norm(a @ sol - rhs)
    if residual > _SOLVE_RESIDUAL * max(1.0, np.linalg.norm(rhs)):
        raise BosonLoopError(
            f"stationary solve for order ({k},{l}) left residual {residual:.3e}"
        )
    values = sol.reshape((n_looped ** k, n_looped ** l), order="F")
    return CorrelationTensor(k, l, n_looped,
                             values.reshape((n_looped,) * (k + l)))


def recursive_stationary(matrix: np.ndarray, rho_ext: DensityMatrix,
                         rank_cap: int) -> TensorSet:
    """All stationary loop tensors C^(n,m), 1 <= n <= rank_cap, 0 <= m <= n.

    Orders are processed so every mixed term only needs strictly lower total
    order (available directly or by conjugate symmetry).  The complementary
    tensors (m, n) follow from conjugate symmetry via TensorSet.get.
    """
    if rank_cap < 1:
        raise ValueError("rank_cap must be >= 1")
    matrix = np.asarray(matrix, dtype=complex)
    n_looped = matrix.shape[0] - rho_ext.basis.modes
    if n_looped < 1:
        raise ValueError("need at least one looped mode")
    _check_spectral_radius(matrix, n_looped)
    ext = _MomentCache(rho_ext)
    out = TensorSet(n_looped)
    for n in range(1, rank_cap + 1):
        for m in range(n + 1):
            out.put(stationary_order(n, m, matrix, rho_ext, out, ext_moments=ext))
    return out


def stationary_output_tensor(k: int, l: int, matrix: np.ndarray,
                             rho_ext: DensityMatrix, loop_set: TensorSet,
                             block: str = "detect") -> CorrelationTensor:
    """Moments of one iteration's output, restricted to a mode block.

    With the stationary loop tensors known, the full input tensor of the
    product state is transformed through the transfer matrix once;
    block="detect" returns the external-mode moments (what the detectors
    see), block="loop" the looped-mode moments (a stationarity check).
    """
    matrix = np.asarray(matrix, dtype=complex)
    modes = matrix.shape[0]
    m_ext = rho_ext.basis.modes
    ext = _MomentCache(rho_ext)
    c_in = _input_tensor(k, l, modes, m_ext, ext, loop_set, include_loop=True)
    full = transform(CorrelationTensor(k, l, modes, c_in), matrix).values
    if block == "detect":
        sl = (slice(0, m_ext),) * (k + l)
        return CorrelationTensor(k, l, m_ext, full[sl])
    if block == "loop":
        sl = (slice(m_ext, modes),) * (k + l)
        return CorrelationTensor(k, l, modes - m_ext, full[sl])
    raise ValueError(f"unknown block {block!r}")


def estimate_n_max(c11: CorrelationTensor, c22: CorrelationTensor) -> int:
    """Three-sigma truncation bound from per-mode means and variances.

    Uses n_i = C^(1,1)[i,i] and var_i = C^(2,2)[i,i,i,i] + n_i - n_i^2;
    variances below -1e-8 signal inconsistent tensors.
    """
    if c11.modes != c22.modes or (c11.k, c11.l) != (1, 1) or (c22.k, c22.l) != (2, 2):
        raise ValueError("estimate_n_max needs matching rank-(1,1) and (2,2) tensors")
    total = 0.0
    for i in range(c11.modes):
        mean = c11.values[i, i].real
        var = c22.values[i, i, i, i].real + mean - mean ** 2
        if var < -1e-8:
            raise ValueError(f"mode {i} has variance {var:.3e} < -1e-8")
        total += mean + 3.0 * sqrt(max(var, 0.0))
    return ceil(total - 1e-12)


def moments_from_tensor_set(tensor_set: TensorSet, include_conjugates: bool = True) -> dict:
    """Flatten a tensor set into {(s_vec, r_vec): moment} per-mode rank form."""
    out = {}
    modes = tensor_set.modes
    zero = (0,) * modes
    out[(zero, zero)] = 1.0 + 0j
    pairs = set(tensor_set.keys())
    if include_conjugates:
        pairs |= {(l, k) for k, l in tensor_set.keys()}
    for k, l in sorted(pairs):
        tensor = tensor_set.get(k, l)
        for cre in combinations_with_replacement(range(modes), k):
            for ann in combinations_with_replacement(range(modes), l):
                s_vec = tuple(np.bincount(cre, minlength=modes)) if k else zero
                r_vec = tuple(np.bincount(ann, minlength=modes)) if l else zero
                out[(s_vec, r_vec)] = complex(tensor.values[cre + ann])
    return out


def tensor_set_from_dm(rho: DensityMatrix, rank_cap: int) -> TensorSet:
    """Exact moments of a known state, packaged like a stationary solve result."""
    cache = _MomentCache(rho)
    out = TensorSet(rho.basis.modes)
    for n in range(1, rank_cap + 1):
        for m in range(n + 1):
            out.put(CorrelationTensor(n, m, rho.basis.modes, cache.tensor(n, m)))
    return out
