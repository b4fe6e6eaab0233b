"""Command-line front end.

Every run stages its output files in memory, writes them atomically
(temp file + rename) only on success, and finishes with a manifest carrying
the config hash and per-file content hashes, so identical (config, seed)
pairs are byte-reproducible.

Exit codes: 0 ok, 2 config, 3 truncation, 4 degenerate fixed point,
5 reconstruction failure.
"""

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time

import numpy as np

from . import __version__
from .errors import (BosonLoopError, ConfigError, DegenerateFixedPointError,
                     ReconstructionError, TruncationError)
from .evolve import (ExperimentConfig, LossSpec, detection_pass,
                     effective_transfer_matrix, evolve_kraus, evolve_pdm,
                     stabilization_samples, stationary_loop_iterate,
                     stationary_loop_state, unfolded_distribution)
from .fock import FockBasis
from .matrixkit import load_matrix, spectral_radius
from .qstate import DensityMatrix, fock_state_dm, uhlmann_fidelity
from .reconstruct import (build_moment_system, reconstruct_analytic,
                          reconstruct_convex)
from .tensors import recursive_stationary

FLOAT_FMT = "%.12e"
SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRUNCATION = 3
EXIT_DEGENERATE = 4
EXIT_RECONSTRUCTION = 5

_TOP_KEYS = {"schema", "M", "L", "n_max", "iterations", "input", "unitary",
             "losses", "seed"}
_INPUT_KEYS = {"fock": {"type", "occupation"}, "dm": {"type", "path"}}
_UNITARY_KEYS = {"file": {"type", "path"}, "haar": {"type", "seed"}}
_LOSS_KEYS = {"t_in", "t_out", "loop_T"}


def _reject_unknown(d: dict, allowed: set, where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in {where}")


def load_config(path) -> tuple:
    """Parse and validate a config file; returns (ExperimentConfig, raw dict)."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown(raw, _TOP_KEYS, "config")
    if raw.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"config schema must be {SCHEMA_VERSION}")
    base = os.path.dirname(os.path.abspath(path))
    try:
        modes = int(raw["M"])
        looped = int(raw["L"])
        iterations = int(raw.get("iterations", 1))
        n_max = raw.get("n_max")
        n_max = None if n_max is None else int(n_max)

        inp = raw["input"]
        _reject_unknown(inp, _INPUT_KEYS.get(inp.get("type"), {"type"}), "input")
        occupation = input_state = None
        if inp.get("type") == "fock":
            occupation = tuple(int(x) for x in inp["occupation"])
        elif inp.get("type") == "dm":
            input_state = DensityMatrix.from_json(os.path.join(base, inp["path"]))
        else:
            raise ConfigError(f"input.type must be 'fock' or 'dm', got {inp.get('type')!r}")

        uni = raw["unitary"]
        _reject_unknown(uni, _UNITARY_KEYS.get(uni.get("type"), {"type"}), "unitary")
        unitary = haar_seed = None
        if uni.get("type") == "file":
            unitary = load_matrix(os.path.join(base, uni["path"]))
        elif uni.get("type") == "haar":
            haar_seed = int(uni["seed"])
        else:
            raise ConfigError(f"unitary.type must be 'file' or 'haar', got {uni.get('type')!r}")

        losses = LossSpec()
        if "losses" in raw:
            _reject_unknown(raw["losses"], _LOSS_KEYS, "losses")
            losses = LossSpec(
                t_in=np.asarray(raw["losses"].get("t_in", np.ones(modes)), dtype=float),
                t_out=np.asarray(raw["losses"].get("t_out", np.ones(modes)), dtype=float),
                loop_transmission=float(raw["losses"].get("loop_T", 1.0)),
            )
        config = ExperimentConfig(
            modes=modes, looped=looped, iterations=iterations,
            unitary=unitary, haar_seed=haar_seed,
            input_occupation=occupation, input_state=input_state,
            n_max=n_max, losses=losses, seed=int(raw.get("seed", 0)),
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    return config, raw


class _Stager:
    """Collects output files in memory; flushes atomically on success only."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.files = {}

    def add_text(self, name: str, text: str) -> None:
        self.files[name] = text

    def add_json(self, name: str, payload) -> None:
        self.files[name] = json.dumps(payload, indent=1, sort_keys=True) + "\n"

    def flush(self) -> list:
        os.makedirs(self.out_dir, exist_ok=True)
        entries = []
        for name in sorted(self.files):
            data = self.files[name].encode()
            fd, tmp = tempfile.mkstemp(dir=self.out_dir, prefix=f".{name}.")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                os.replace(tmp, os.path.join(self.out_dir, name))
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise
            entries.append({"path": name,
                            "sha256": hashlib.sha256(data).hexdigest()})
        return entries


def _write_manifest(stager: _Stager, raw_config: dict, subcommand: str,
                    seed, started: float) -> None:
    canon = json.dumps(raw_config, sort_keys=True, separators=(",", ":")).encode()
    outputs = stager.flush()
    manifest = {
        "subcommand": subcommand,
        "artifact_version": __version__,
        "config_hash": hashlib.sha256(canon).hexdigest(),
        "seed": seed,
        "outputs": outputs,
        "wall_time_s": round(time.monotonic() - started, 6),
    }
    os.makedirs(stager.out_dir, exist_ok=True)
    data = (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode()
    fd, tmp = tempfile.mkstemp(dir=stager.out_dir, prefix=".manifest.")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, os.path.join(stager.out_dir, "manifest.json"))


def _counts_csv(counts: dict) -> str:
    return "".join(
        ",".join(str(x) for x in occ) + ";" + str(n) + "\n"
        for occ, n in sorted(counts.items())
    )


def cmd_evolve(args) -> int:
    config, raw = load_config(args.config)
    started = time.monotonic()
    stager = _Stager(args.out)
    if args.method == "unfold":
        result = unfolded_distribution(config)
        dists, rho_det = result.iteration_distributions, result.rho_det
        leak = 0.0
        n_max = sum(result.input_occupation)
    else:
        engine = evolve_pdm if args.method == "pdm" else evolve_kraus
        trace = engine(config)
        dists, rho_det = trace.iteration_distributions, trace.rho_det
        leak = trace.max_leaked_weight
        n_max = trace.n_max
    for i, dist in enumerate(dists, start=1):
        stager.add_text(f"distribution_iter_{i:03d}.csv", dist.to_csv_text(FLOAT_FMT))
    stager.add_json("rho_det.json", rho_det.to_payload())
    stager.add_json("run_info.json", {
        "method": args.method, "iterations": config.iterations,
        "n_max": n_max, "max_leaked_weight": leak,
    })
    _write_manifest(stager, raw, "evolve", config.seed, started)
    return EXIT_OK


def cmd_stationary(args) -> int:
    config, raw = load_config(args.config)
    started = time.monotonic()
    stager = _Stager(args.out)
    diagnostics = {}
    if args.method == "superop":
        result = stationary_loop_state(config)
        rho_stat = result.rho
        diagnostics["stationary_eigenvalue"] = [result.eigenvalue.real,
                                                result.eigenvalue.imag]
        diagnostics["second_largest_eigenvalue_modulus"] = result.second_modulus
    elif args.method == "iterate":
        rho_stat = stationary_loop_iterate(config)
    else:  # tensors
        m_eff = effective_transfer_matrix(config.transfer_matrix(), config.losses,
                                          config.looped)
        rank_cap = args.rank_cap
        tensor_set = recursive_stationary(m_eff, _raw_external_state(config), rank_cap)
        system = build_moment_system(FockBasis(config.looped, rank_cap), tensor_set)
        rho_stat, _ = reconstruct_analytic(system)
    if args.method != "superop":
        # diagnostics still come from the superoperator spectrum when feasible
        try:
            result = stationary_loop_state(config)
            diagnostics["stationary_eigenvalue"] = [result.eigenvalue.real,
                                                    result.eigenvalue.imag]
            diagnostics["second_largest_eigenvalue_modulus"] = result.second_modulus
        except BosonLoopError:
            pass
    diagnostics["spectral_radius_u_ll"] = spectral_radius(
        config.interferometer().u_ll
    )
    rho_det, _ = detection_pass(config, rho_stat)
    stager.add_json("rho_stat.json", rho_stat.to_payload())
    stager.add_text("stationary_distribution.csv",
                    rho_det.diagonal_distribution().to_csv_text(FLOAT_FMT))
    stager.add_json("diagnostics.json", {"method": args.method, **diagnostics})
    _write_manifest(stager, raw, "stationary", config.seed, started)
    return EXIT_OK


def cmd_stabilization(args) -> int:
    config, raw = load_config(args.config)
    started = time.monotonic()
    stager = _Stager(args.out)
    seed = args.seed if args.seed is not None else config.seed
    study = stabilization_samples(config, args.samples, seed,
                                  tolerance=args.tolerance, threads=args.threads)
    times = np.array(sorted(study.times))
    hist = "".join(
        f"{tau};{int((times == tau).sum())}\n" for tau in np.unique(times)
    )
    stager.add_text("stabilization_histogram.csv", hist)
    stager.add_json("summary.json", {
        "samples": args.samples,
        "skipped_degenerate": study.skipped,
        "median": float(np.median(times)) if times.size else None,
        "mean": float(times.mean()) if times.size else None,
        "iqr": [float(np.percentile(times, 25)),
                float(np.percentile(times, 75))] if times.size else None,
        "tolerance": args.tolerance,
    })
    _write_manifest(stager, raw, "stabilization", seed, started)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    config, raw = load_config(args.config)
    started = time.monotonic()
    stager = _Stager(args.out)
    truth = stationary_loop_state(config).rho
    m_eff = effective_transfer_matrix(config.transfer_matrix(), config.losses,
                                      config.looped)
    tensor_set = recursive_stationary(m_eff, _raw_external_state(config), args.rank_cap)
    method = reconstruct_analytic if args.method == "analytic" else reconstruct_convex

    rows = []
    final = None
    for rank in range(1, args.rank_cap + 1):
        system = build_moment_system(FockBasis(config.looped, rank), tensor_set)
        rho_rec, info = method(system)
        fidelity = _padded_fidelity(rho_rec, truth)
        rows.append((rank, fidelity))
        final = (rho_rec, info, fidelity)
    stager.add_text("fidelity_vs_rank.csv",
                    "".join(f"{r};{FLOAT_FMT % f}\n" for r, f in rows))
    rho_rec, info, fidelity = final
    stager.add_json("reconstructed_rho.json", rho_rec.to_payload())
    stager.add_json("reconstruction_report.json", {
        "method": args.method,
        "rank_cap": args.rank_cap,
        "fidelity_vs_reference": fidelity,
        "residuals": info.residual,
        "negativity_before_projection": info.negativity_before_projection,
        "converged": info.converged,
    })
    _write_manifest(stager, raw, "reconstruct", config.seed, started)
    return EXIT_OK


def _raw_external_state(config: ExperimentConfig) -> DensityMatrix:
    """The injected state on its minimal basis (pre-loss; losses sit in M_eff)."""
    if config.input_occupation is not None:
        basis = FockBasis(config.n_external, max(config.n_env, 1))
        return fock_state_dm(basis, config.input_occupation)
    return config.input_state


def _embed_to(rho: DensityMatrix, basis: FockBasis) -> DensityMatrix:
    if rho.basis == basis:
        return rho
    if rho.basis.n_max > basis.n_max:
        raise ValueError("cannot embed into a smaller basis")
    mat = np.zeros((basis.size, basis.size), dtype=complex)
    idx = np.array([basis.index_of(occ) for occ in rho.basis.states])
    mat[np.ix_(idx, idx)] = rho.mat
    return DensityMatrix(basis, mat, check=False)


def _padded_fidelity(a: DensityMatrix, b: DensityMatrix) -> float:
    """Uhlmann fidelity after zero-padding the smaller-truncation state."""
    big = a.basis if a.basis.n_max >= b.basis.n_max else b.basis
    return uhlmann_fidelity(_embed_to(a, big), _embed_to(b, big))


def cmd_sample(args) -> int:
    config, raw = load_config(args.config)
    started = time.monotonic()
    stager = _Stager(args.out)
    seed = args.seed if args.seed is not None else config.seed
    if args.target == "stationary":
        rho_stat = stationary_loop_state(config).rho
        rho_det, _ = detection_pass(config, rho_stat)
        dist = rho_det.diagonal_distribution()
    else:
        dist = evolve_pdm(config).distribution
    counts = dist.sample(args.shots, seed)
    stager.add_text("counts.csv", _counts_csv(counts))
    stager.add_json("sample_info.json", {
        "target": args.target, "shots": args.shots, "seed": seed,
    })
    _write_manifest(stager, raw, "sample", seed, started)
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bosonloop",
        description="Simulate boson sampling interferometers with optical feedback",
    )
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap for Monte Carlo layers")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evolve", help="run one evolution engine for k iterations")
    p.add_argument("config")
    p.add_argument("--method", choices=["unfold", "pdm", "kraus"], default="pdm")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("stationary", help="compute the stationary loop state")
    p.add_argument("config")
    p.add_argument("--method", choices=["superop", "iterate", "tensors"],
                   default="superop")
    p.add_argument("--rank-cap", type=int, default=6, dest="rank_cap")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stationary)

    p = sub.add_parser("stabilization", help="histogram stabilization times over Haar samples")
    p.add_argument("config")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stabilization)

    p = sub.add_parser("reconstruct", help="reconstruct the stationary state from tensors")
    p.add_argument("config")
    p.add_argument("--method", choices=["analytic", "convex"], default="analytic")
    p.add_argument("--rank-cap", type=int, default=4, dest="rank_cap")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("sample", help="draw counts from an output distribution")
    p.add_argument("config")
    p.add_argument("--shots", type=int, default=1000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--target", choices=["stationary", "final"], default="stationary")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)
    return parser


def _error_payload(code: int, exc: Exception) -> str:
    return json.dumps({
        "error": {"code": code, "type": type(exc).__name__, "message": str(exc)}
    })


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(_error_payload(EXIT_CONFIG, exc))
        return EXIT_CONFIG
    except TruncationError as exc:
        print(_error_payload(EXIT_TRUNCATION, exc))
        return EXIT_TRUNCATION
    except DegenerateFixedPointError as exc:
        print(_error_payload(EXIT_DEGENERATE, exc))
        return EXIT_DEGENERATE
    except ReconstructionError as exc:
        print(_error_payload(EXIT_RECONSTRUCTION, exc))
        return EXIT_RECONSTRUCTION
    except BosonLoopError as exc:
        print(_error_payload(1, exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
