"""Evolution engines for the interferometer with optical feedback.

Three mutually verifying routes compute the photon state in the detectable
modes at iteration k:

* `unfold`        -- exact spatiotemporal unrolling (ground truth, lossless);
* `evolve_pdm`    -- partial-density-matrix iteration on the looped modes;
* `evolve_kraus`  -- quantum-channel iteration with Kraus operators.

Mode convention: the first M-L modes are external (injected and detected
each iteration), the trailing L modes are looped.  The loop state is tracked
at the feedback line, i.e. before the per-iteration input losses.

One iteration is: input losses on all modes (the looped columns also carry
the feedback-line transmission), the lifted interferometer, output losses;
the external part of the result is detected while the looped part becomes
the next line state.  Detection at iteration k therefore shares its joint
pass with the k-th loop update.
"""

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .channels import (QuantumChannel, StationaryResult, compose, fixed_point,
                       loop_channel, stationary_state)
from .channels import loss_channel as _loss_channel
from .errors import ConvergenceError, DegenerateFixedPointError, TruncationError
from .fock import FockBasis, enumerate_sector, sector_size, total_size
from .lift import lift, lift_apply_fock
from .matrixkit import Interferometer, haar_random_unitary
from .qstate import (DensityMatrix, ProbabilityDistribution, fock_state_dm,
                     partial_trace, tensor_product, trace_distance,
                     uhlmann_fidelity)

LEAK_TOLERANCE = 1e-9          # per-iteration truncation leak allowed past n_max
UNFOLD_SECTOR_CAP = 100_000
_RETRY_DIM_CAP = 64            # loop-space dimension beyond which retries stop


def _grow_n_max(n_max: int, looped: int) -> int:
    """Next truncation rung for heavy-tailed samples; None when infeasible."""
    nxt = int(np.ceil(n_max * 1.5))
    if total_size(looped, nxt) > _RETRY_DIM_CAP:
        return None
    return nxt


@dataclass
class LossSpec:
    """Amplitude transmissions per mode plus the feedback-line power transmission."""

    t_in: np.ndarray | None = None
    t_out: np.ndarray | None = None
    loop_transmission: float = 1.0

    def resolve(self, modes: int) -> "LossSpec":
        t_in = np.ones(modes) if self.t_in is None else np.asarray(self.t_in, dtype=float)
        t_out = np.ones(modes) if self.t_out is None else np.asarray(self.t_out, dtype=float)
        if t_in.shape != (modes,) or t_out.shape != (modes,):
            raise ValueError(f"loss arrays must have one amplitude per mode ({modes})")
        if np.any((t_in < 0) | (t_in > 1)) or np.any((t_out < 0) | (t_out > 1)):
            raise ValueError("amplitude transmissions must lie in [0, 1]")
        if not 0.0 <= self.loop_transmission <= 1.0:
            raise ValueError("loop transmission must lie in [0, 1]")
        return LossSpec(t_in, t_out, float(self.loop_transmission))

    @property
    def trivial(self) -> bool:
        return (
            (self.t_in is None or np.all(np.asarray(self.t_in) == 1.0))
            and (self.t_out is None or np.all(np.asarray(self.t_out) == 1.0))
            and self.loop_transmission == 1.0
        )


@dataclass
class ExperimentConfig:
    """A feedback-loop experiment: geometry, transfer matrix, input, truncation."""

    modes: int
    looped: int
    iterations: int
    unitary: np.ndarray | None = None
    haar_seed: int | None = None
    input_occupation: tuple | None = None
    input_state: DensityMatrix | None = None
    n_max: int | None = None
    losses: LossSpec = field(default_factory=LossSpec)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.looped < self.modes:
            raise ValueError(f"need 0 <= L < M, got L={self.looped}, M={self.modes}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if (self.unitary is None) == (self.haar_seed is None):
            raise ValueError("provide exactly one of `unitary` or `haar_seed`")
        if (self.input_occupation is None) == (self.input_state is None):
            raise ValueError("provide exactly one of `input_occupation` or `input_state`")
        if self.input_occupation is not None:
            occ = tuple(int(x) for x in self.input_occupation)
            if len(occ) != self.n_external or any(x < 0 for x in occ):
                raise ValueError(
                    f"input occupation must be {self.n_external} non-negative counts"
                )
            self.input_occupation = occ
        elif self.input_state.basis.modes != self.n_external:
            raise ValueError("input density matrix must live on the external modes")

    @property
    def n_external(self) -> int:
        return self.modes - self.looped

    @property
    def n_env(self) -> int:
        """Largest photon number injected per iteration."""
        if self.input_occupation is not None:
            return sum(self.input_occupation)
        return self.input_state.max_populated_sector()

    def resolve_n_max(self) -> int:
        """Configured truncation, defaulting to the sound bound k * N_env."""
        if self.n_max is not None:
            return self.n_max
        return max(self.iterations * self.n_env, 1)

    def transfer_matrix(self) -> np.ndarray:
        if self.unitary is not None:
            return np.asarray(self.unitary, dtype=complex)
        return haar_random_unitary(self.modes, self.haar_seed)

    def interferometer(self) -> Interferometer:
        return Interferometer(self.transfer_matrix(), self.looped)

    def with_unitary(self, u: np.ndarray) -> "ExperimentConfig":
        return ExperimentConfig(
            modes=self.modes, looped=self.looped, iterations=self.iterations,
            unitary=u, haar_seed=None,
            input_occupation=self.input_occupation, input_state=self.input_state,
            n_max=self.n_max, losses=self.losses, seed=self.seed,
        )


def effective_transfer_matrix(u: np.ndarray, losses: LossSpec, n_looped: int) -> np.ndarray:
    """Lossy single-photon transfer matrix T_out U T_in.

    The looped columns of T_in absorb the feedback-line amplitude
    sqrt(loop_transmission), so the same matrix describes one full iteration
    line-to-line and line-to-detector.
    """
    u = np.asarray(u, dtype=complex)
    modes = u.shape[0]
    spec = losses.resolve(modes)
    t_in = spec.t_in.astype(complex).copy()
    if n_looped:
        t_in[modes - n_looped:] *= np.sqrt(spec.loop_transmission)
    return (spec.t_out[:, None] * u) * t_in[None, :]


@dataclass
class EvolutionTrace:
    """Outputs of one evolution run."""

    rho_det: DensityMatrix
    distribution: ProbabilityDistribution
    iteration_distributions: list
    final_loop_state: DensityMatrix | None
    loop_states: list | None
    max_leaked_weight: float
    n_max: int


class _LoopSetup:
    """Bases, lifted matrix, input state and loss channels resolved from a config."""

    def __init__(self, config: ExperimentConfig, n_max: int | None = None):
        self.config = config
        self.modes = config.modes
        self.looped = config.looped
        self.n_ext = config.n_external
        self.n_env = config.n_env
        self.n_max = config.resolve_n_max() if n_max is None else n_max
        if self.n_max < self.n_env:
            raise TruncationError(
                f"n_max={self.n_max} cannot hold the {self.n_env}-photon input; "
                f"the sound bound is iterations * N_env = "
                f"{config.iterations * self.n_env}",
                required_n_max=config.iterations * self.n_env,
            )
        self.joint = FockBasis(self.modes, self.n_max)
        self.ext = FockBasis(self.n_ext, self.n_max)
        self.loop = FockBasis(self.looped, self.n_max) if self.looped else None
        self.u = config.transfer_matrix()
        Interferometer(self.u, self.looped)  # validates unitarity and the split
        self.lifted = lift(self.u, self.joint)

        spec = config.losses.resolve(self.modes)
        self.losses = spec
        rho_ext = (
            fock_state_dm(self.ext, config.input_occupation)
            if config.input_occupation is not None
            else _embed(config.input_state, self.ext)
        )
        self.rho_ext_raw = rho_ext
        self.in_ext = _maybe_loss(spec.t_in[: self.n_ext] ** 2, self.ext)
        self.rho_ext_in = self.in_ext.apply(rho_ext) if self.in_ext else rho_ext
        if self.looped:
            t_line = spec.t_in[self.n_ext:] ** 2 * spec.loop_transmission
            self.in_loop = _maybe_loss(t_line, self.loop)
            self.out_loop = _maybe_loss(spec.t_out[self.n_ext:] ** 2, self.loop)
        else:
            self.in_loop = self.out_loop = None
        self.out_ext = _maybe_loss(spec.t_out[: self.n_ext] ** 2, self.ext)

    def vacuum_line(self) -> DensityMatrix:
        return fock_state_dm(self.loop, (0,) * self.looped)

    def step(self, rho_line: DensityMatrix):
        """One iteration: returns (rho_det, next line state, leaked weight)."""
        rho_loop_in = self.in_loop.apply(rho_line) if self.in_loop else rho_line
        leaked = _joint_overflow(self.rho_ext_in, rho_loop_in, self.n_max)
        if leaked > LEAK_TOLERANCE:
            raise TruncationError(
                f"iteration would leak weight {leaked:.3e} past n_max={self.n_max}; "
                f"required n_max is iterations * N_env = "
                f"{self.config.iterations * self.n_env}",
                required_n_max=self.config.iterations * self.n_env,
            )
        rho_joint = tensor_product(self.rho_ext_in, rho_loop_in, self.joint,
                                   max_dropped=LEAK_TOLERANCE)
        rho_out = DensityMatrix(self.joint, self.lifted.conjugate(rho_joint.mat),
                                check=False)
        rho_det = partial_trace(rho_out, (0, self.n_ext))
        if self.out_ext:
            rho_det = self.out_ext.apply(rho_det)
        rho_line_next = partial_trace(rho_out, (self.n_ext, self.modes))
        if self.out_loop:
            rho_line_next = self.out_loop.apply(rho_line_next)
        return rho_det, rho_line_next, leaked

    def loop_update_channel(self) -> QuantumChannel:
        """The line-to-line channel of one iteration, losses included."""
        core = loop_channel(self.lifted, self.rho_ext_in)
        chan = core
        if self.in_loop:
            chan = compose(chan, self.in_loop)
        if self.out_loop:
            chan = compose(self.out_loop, chan)
        return chan


def _maybe_loss(power_transmissions, basis) -> QuantumChannel | None:
    if np.all(power_transmissions == 1.0):
        return None
    return _loss_channel(power_transmissions, basis.modes, basis.n_max)


def _embed(rho: DensityMatrix, basis: FockBasis) -> DensityMatrix:
    """Embed a state into a basis with the same modes and n_max at least as large."""
    if rho.basis == basis:
        return rho
    if rho.basis.modes != basis.modes or rho.basis.n_max > basis.n_max:
        raise ValueError(f"cannot embed {rho.basis!r} into {basis!r}")
    idx = np.array([basis.index_of(occ) for occ in rho.basis.states])
    mat = np.zeros((basis.size, basis.size), dtype=complex)
    mat[np.ix_(idx, idx)] = rho.mat
    return DensityMatrix(basis, mat, check=False)


def _joint_overflow(rho_a: DensityMatrix, rho_b: DensityMatrix, n_max: int) -> float:
    wa = rho_a.sector_weights()
    wb = rho_b.sector_weights()
    return float(sum(
        wa[na] * wb[nb]
        for na in range(len(wa))
        for nb in range(len(wb))
        if na + nb > n_max
    ))


def _singlepass_trace(config: ExperimentConfig) -> EvolutionTrace:
    """L = 0: every iteration is an independent single-pass run."""
    n_max = config.n_max if config.n_max is not None else max(config.n_env, 1)
    setup = _LoopSetup(config, n_max=n_max)
    rho_out = DensityMatrix(setup.joint, setup.lifted.conjugate(setup.rho_ext_in.mat),
                            check=False)
    if setup.out_ext:
        rho_out = setup.out_ext.apply(rho_out)
    dist = rho_out.diagonal_distribution()
    dists = [dist] * config.iterations
    return EvolutionTrace(
        rho_det=rho_out, distribution=dist, iteration_distributions=dists,
        final_loop_state=None, loop_states=None, max_leaked_weight=0.0,
        n_max=setup.n_max,
    )


def evolve_pdm(config: ExperimentConfig, record_loop: bool = False) -> EvolutionTrace:
    """Partial-density-matrix evolution: k joint passes with per-iteration traces."""
    if config.looped == 0:
        return _singlepass_trace(config)
    setup = _LoopSetup(config)
    rho_line = setup.vacuum_line()
    loop_states = [rho_line] if record_loop else None
    dists = []
    rho_det = None
    max_leak = 0.0
    for _ in range(config.iterations):
        rho_det, rho_line, leaked = setup.step(rho_line)
        max_leak = max(max_leak, leaked)
        dists.append(rho_det.diagonal_distribution())
        if record_loop:
            loop_states.append(rho_line)
    return EvolutionTrace(
        rho_det=rho_det, distribution=dists[-1], iteration_distributions=dists,
        final_loop_state=rho_line, loop_states=loop_states,
        max_leaked_weight=max_leak, n_max=setup.n_max,
    )


def evolve_kraus(config: ExperimentConfig, record_loop: bool = False) -> EvolutionTrace:
    """Channel-iteration evolution with the same contract as `evolve_pdm`.

    The line state advances through the one-iteration Kraus channel; the
    detection at iteration i reuses the joint pass on the channel's input
    state, so iteration counts line up with the PDM route exactly.
    """
    if config.looped == 0:
        return _singlepass_trace(config)
    setup = _LoopSetup(config)
    channel = setup.loop_update_channel()
    rho_line = setup.vacuum_line()
    loop_states = [rho_line] if record_loop else None
    dists = []
    rho_det = None
    max_leak = 0.0
    for _ in range(config.iterations):
        rho_det, _, leaked = setup.step(rho_line)
        rho_line = channel.apply(rho_line, leak_tolerance=LEAK_TOLERANCE)
        max_leak = max(max_leak, leaked)
        dists.append(rho_det.diagonal_distribution())
        if record_loop:
            loop_states.append(rho_line)
    return EvolutionTrace(
        rho_det=rho_det, distribution=dists[-1], iteration_distributions=dists,
        final_loop_state=rho_line, loop_states=loop_states,
        max_leaked_weight=max_leak, n_max=setup.n_max,
    )


@dataclass
class UnfoldResult:
    """Spatiotemporal unrolling of the loop into one big interferometer."""

    u_total: np.ndarray
    input_occupation: tuple
    detect_modes: int
    joint_distribution: ProbabilityDistribution
    iteration_distributions: list
    rho_det: DensityMatrix


def unfold(config: ExperimentConfig):
    """Time-unrolled transfer matrix and its input occupation.

    Iteration t's external modes become the dedicated detector block t; the
    looped modes thread through all iterations and sit last.  Supports pure
    Fock inputs without losses only (this engine is the exact ground truth).
    """
    if config.input_occupation is None:
        raise ValueError("unfolding supports pure Fock inputs only")
    if not config.losses.trivial:
        raise ValueError("unfolding does not model losses")
    u = config.transfer_matrix()
    m_ext, loop, k = config.n_external, config.looped, config.iterations
    m_tot = m_ext * k + loop
    u_total = np.eye(m_tot, dtype=complex)
    loop_idx = list(range(m_ext * k, m_tot))
    for t in range(k):
        idx = list(range(t * m_ext, (t + 1) * m_ext)) + loop_idx
        step = np.eye(m_tot, dtype=complex)
        step[np.ix_(idx, idx)] = u
        u_total = step @ u_total
    input_occ = config.input_occupation * k + (0,) * loop
    return u_total, input_occ


def unfolded_distribution(config: ExperimentConfig) -> UnfoldResult:
    """Exact joint distribution over all detectable spatiotemporal modes."""
    u_total, input_occ = unfold(config)
    k = config.iterations
    m_ext = config.n_external
    n_tot = sum(input_occ)
    m_tot = len(input_occ)
    if sector_size(m_tot, n_tot) > UNFOLD_SECTOR_CAP:
        raise ValueError(
            f"unfolded sector has {sector_size(m_tot, n_tot)} states, "
            f"above the cap {UNFOLD_SECTOR_CAP}"
        )
    amps = lift_apply_fock(u_total, input_occ)
    probs = np.abs(amps) ** 2
    sector = enumerate_sector(m_tot, n_tot)

    n_detect_modes = m_ext * k
    detect_basis = FockBasis(n_detect_modes, n_tot)
    joint = np.zeros(detect_basis.size)
    block_bases = FockBasis(m_ext, n_tot)
    blocks = [np.zeros(block_bases.size) for _ in range(k)]
    rho_parts = {}
    for occ, p, amp in zip(sector, probs, amps):
        det = occ[:n_detect_modes]
        joint[detect_basis.index_of(det)] += p
        for t in range(k):
            blocks[t][block_bases.index_of(occ[t * m_ext:(t + 1) * m_ext])] += p
        # reduced state of the last detector block
        rest = occ[: (k - 1) * m_ext] + occ[n_detect_modes:]
        last = occ[(k - 1) * m_ext: n_detect_modes]
        rho_parts.setdefault(rest, []).append((block_bases.index_of(last), amp))
    rho = np.zeros((block_bases.size, block_bases.size), dtype=complex)
    for entries in rho_parts.values():
        idx = np.array([e[0] for e in entries])
        a = np.array([e[1] for e in entries])
        rho[np.ix_(idx, idx)] += np.outer(a, a.conj())
    return UnfoldResult(
        u_total=u_total,
        input_occupation=input_occ,
        detect_modes=n_detect_modes,
        joint_distribution=ProbabilityDistribution(detect_basis, joint, check=False),
        iteration_distributions=[
            ProbabilityDistribution(block_bases, b, check=False) for b in blocks
        ],
        rho_det=DensityMatrix(block_bases, rho, check=False),
    )


def stationary_loop_state(config: ExperimentConfig, n_max: int | None = None) -> StationaryResult:
    """Fixed point of the one-iteration loop channel via the superoperator."""
    if config.looped == 0:
        raise ValueError("a stationary loop state needs at least one looped mode")
    setup = _LoopSetup(config, n_max=n_max)
    return stationary_state(setup.loop_update_channel())


def stationary_loop_iterate(config: ExperimentConfig, tol: float = 1e-12,
                            max_iterations: int = 1_000_000) -> DensityMatrix:
    """Fixed point by literal channel iteration from the vacuum."""
    setup = _LoopSetup(config)
    channel = setup.loop_update_channel()
    rho = setup.vacuum_line()
    for _ in range(max_iterations):
        nxt = channel.apply(rho, leak_tolerance=LEAK_TOLERANCE)
        if trace_distance(nxt, rho) < tol:
            return nxt
        rho = nxt
    raise ConvergenceError(
        f"channel iteration did not settle below {tol:.1e} in {max_iterations} steps"
    )


def detection_pass(config: ExperimentConfig, rho_line: DensityMatrix,
                   n_max: int | None = None):
    """Interfere a loop state with the injected input once; detect the externals.

    Returns (rho_det, next line state).
    """
    setup = _LoopSetup(config, n_max=n_max)
    line = _embed(rho_line, setup.loop)
    rho_det, rho_next, _ = setup.step(line)
    return rho_det, rho_next


def stabilization_time(config: ExperimentConfig, tolerance: float = 1e-6,
                       max_iterations: int = 100_000) -> int:
    """Iterations until the loop state's infidelity to the fixed point drops below
    `tolerance`, starting from the vacuum."""
    if config.looped == 0:
        raise ValueError("stabilization time needs at least one looped mode")
    setup = _LoopSetup(config)
    channel = setup.loop_update_channel()
    # bordered-solve fast path; fall back to the spectral route, which also
    # diagnoses degenerate fixed points properly
    rho_stat = fixed_point(channel)
    if rho_stat is None:
        rho_stat = stationary_state(channel).rho
    rho = setup.vacuum_line()
    for i in range(max_iterations + 1):
        if 1.0 - uhlmann_fidelity(rho, rho_stat) < tolerance:
            return i
        rho = channel.apply(rho, leak_tolerance=LEAK_TOLERANCE)
    raise ConvergenceError(
        f"loop state did not stabilize within {max_iterations} iterations"
    )


@dataclass
class StabilizationStudy:
    times: list
    skipped: int


def stabilization_samples(config: ExperimentConfig, samples: int, seed: int,
                          tolerance: float = 1e-6, threads: int = 1,
                          max_iterations: int = 100_000,
                          truncation_retries: int = 3) -> StabilizationStudy:
    """Stabilization times over Haar-random transfer matrices.

    Per-sample seeds are spawned from the master seed, so the result is
    deterministic regardless of thread count.  Samples with a degenerate
    fixed point (or that fail to converge) are skipped and counted.  A sample
    whose loop state is too heavy-tailed for the configured n_max is retried
    at a 1.5x larger truncation up to `truncation_retries` times: the
    required bound is state-dependent, and near-decoupled matrices produce
    nearly thermal loop states far wider than the typical Haar draw.
    """
    children = np.random.SeedSequence(seed).spawn(samples)

    def one(child):
        u = haar_random_unitary(config.modes, child)
        sample = config.with_unitary(u)
        n_max = sample.resolve_n_max()
        for attempt in range(truncation_retries + 1):
            try:
                cfg = ExperimentConfig(
                    modes=sample.modes, looped=sample.looped,
                    iterations=sample.iterations, unitary=u,
                    input_occupation=sample.input_occupation,
                    input_state=sample.input_state, n_max=n_max,
                    losses=sample.losses, seed=sample.seed,
                )
                return stabilization_time(cfg, tolerance, max_iterations)
            except TruncationError:
                n_max = _grow_n_max(n_max, sample.looped)
                if attempt == truncation_retries or n_max is None:
                    raise
            except (DegenerateFixedPointError, ConvergenceError):
                return None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, children))
    else:
        results = [one(c) for c in children]
    times = [t for t in results if t is not None]
    return StabilizationStudy(times=times, skipped=len(results) - len(times))


@dataclass
class AverageStationaryResult:
    rho: DensityMatrix
    samples_used: int
    skipped: int


def average_stationary(config: ExperimentConfig, samples: int, seed: int,
                       allow_multimode: bool = False, threads: int = 1,
                       truncation_retries: int = 3) -> AverageStationaryResult:
    """Mean stationary state over Haar-random transfer matrices.

    Raw element-wise averaging is only physically meaningful when the
    per-sample states share a basis structure without coherences, which holds
    for a single looped mode and Fock inputs; multimode averaging requires
    opting in.  Heavy-tailed samples are retried at growing truncations (as
    in `stabilization_samples`) and everything is averaged on the largest
    basis encountered, zero-padding the rest.
    """
    if config.looped > 1 and not allow_multimode:
        raise ValueError(
            "raw averaging over matrices is only meaningful for one looped mode; "
            "pass allow_multimode=True to average anyway"
        )
    children = np.random.SeedSequence(seed).spawn(samples)

    def one(child):
        u = haar_random_unitary(config.modes, child)
        n_max = config.resolve_n_max()
        for attempt in range(truncation_retries + 1):
            try:
                return stationary_loop_state(config.with_unitary(u), n_max=n_max).rho
            except TruncationError:
                n_max = _grow_n_max(n_max, config.looped)
                if attempt == truncation_retries or n_max is None:
                    raise
            except DegenerateFixedPointError:
                return None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, children))
    else:
        results = [one(c) for c in children]
    states = [r for r in results if r is not None]
    skipped = len(results) - len(states)
    if not states:
        raise DegenerateFixedPointError("every sample had a degenerate fixed point")
    if skipped:
        warnings.warn(f"skipped {skipped} samples with degenerate fixed points")
    basis = max((s.basis for s in states), key=lambda b: b.n_max)
    mean = np.zeros((basis.size, basis.size), dtype=complex)
    for s in states:
        mean += _embed(s, basis).mat
    mean /= len(states)
    return AverageStationaryResult(
        rho=DensityMatrix(basis, mean),
        samples_used=len(states),
        skipped=skipped,
    )
