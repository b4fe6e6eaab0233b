import json

import numpy as np
import pytest

from bosonloop.cli import main
from bosonloop.matrixkit import save_matrix_json
from bosonloop.qstate import DensityMatrix, ProbabilityDistribution

BASE = {
    "schema": 1,
    "M": 2,
    "L": 1,
    "n_max": 6,
    "iterations": 3,
    "input": {"type": "fock", "occupation": [1]},
    "unitary": {"type": "haar", "seed": 20},
    "seed": 3,
}


def write_config(tmp_path, name="config.json", **overrides):
    cfg = {**BASE, **overrides}
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def read_dist(path):
    return ProbabilityDistribution.from_csv(path, check=False)


def test_missing_config_exits_2(tmp_path, capsys):
    code = main(["evolve", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")])
    assert code == 2
    err = json.loads(capsys.readouterr().out)
    assert err["error"]["code"] == 2


def test_unknown_key_rejected(tmp_path, capsys):
    path = write_config(tmp_path, typo_key=1)
    assert main(["evolve", path, "--out", str(tmp_path / "o")]) == 2
    assert "typo_key" in json.loads(capsys.readouterr().out)["error"]["message"]


def test_wrong_schema_rejected(tmp_path, capsys):
    path = write_config(tmp_path, schema=2)
    assert main(["evolve", path, "--out", str(tmp_path / "o")]) == 2
    capsys.readouterr()


def test_truncation_exit_3(tmp_path, capsys):
    path = write_config(tmp_path, n_max=1, iterations=5)
    assert main(["evolve", path, "--out", str(tmp_path / "o")]) == 3
    capsys.readouterr()


def test_error_paths_leave_no_partial_files(tmp_path, capsys):
    path = write_config(tmp_path, n_max=1, iterations=5)
    out = tmp_path / "o"
    assert main(["evolve", path, "--out", str(out)]) == 3
    capsys.readouterr()
    assert not out.exists() or not list(out.iterdir())


def test_evolve_pdm_and_kraus_byte_identical(tmp_path):
    path = write_config(tmp_path)
    out_pdm, out_kr = tmp_path / "pdm", tmp_path / "kraus"
    assert main(["evolve", path, "--method", "pdm", "--out", str(out_pdm)]) == 0
    assert main(["evolve", path, "--method", "kraus", "--out", str(out_kr)]) == 0
    for i in (1, 2, 3):
        name = f"distribution_iter_{i:03d}.csv"
        assert (out_pdm / name).read_bytes() == (out_kr / name).read_bytes()


def test_evolve_unfold_agrees(tmp_path):
    path = write_config(tmp_path, n_max=3)
    out_u, out_p = tmp_path / "unf", tmp_path / "pdm"
    assert main(["evolve", path, "--method", "unfold", "--out", str(out_u)]) == 0
    assert main(["evolve", path, "--method", "pdm", "--out", str(out_p)]) == 0
    for i in (1, 2, 3):
        name = f"distribution_iter_{i:03d}.csv"
        a = read_dist(out_u / name)
        b = read_dist(out_p / name)
        assert 0.5 * np.abs(a.probabilities - b.probabilities).sum() < 1e-10


def test_evolve_without_loop_matches_single_pass(tmp_path):
    path = write_config(tmp_path, L=0, n_max=1, iterations=2,
                        input={"type": "fock", "occupation": [1, 0]})
    out = tmp_path / "o"
    assert main(["evolve", path, "--out", str(out)]) == 0
    a = read_dist(out / "distribution_iter_001.csv")
    b = read_dist(out / "distribution_iter_002.csv")
    np.testing.assert_array_equal(a.probabilities, b.probabilities)
    # single-pass reference: |U[0,0]|^2 on (1,0), |U[1,0]|^2 on (0,1)
    from bosonloop.matrixkit import haar_random_unitary
    u = haar_random_unitary(2, 20)
    assert a.probability_of((1, 0)) == pytest.approx(abs(u[0, 0]) ** 2, abs=1e-12)
    assert a.probability_of((0, 1)) == pytest.approx(abs(u[1, 0]) ** 2, abs=1e-12)


def test_stationary_methods_agree(tmp_path):
    # moderate losses keep the stationary state narrow so a rank-6 tensor
    # reconstruction reaches the 1e-7 agreement band
    losses = {"t_in": [0.8, 0.8], "t_out": [1.0, 1.0], "loop_T": 0.8}
    path = write_config(tmp_path, n_max=10, iterations=1, losses=losses)
    rhos = {}
    for method in ("superop", "iterate", "tensors"):
        out = tmp_path / method
        code = main(["stationary", path, "--method", method,
                     "--rank-cap", "6", "--out", str(out)])
        assert code == 0
        rhos[method] = DensityMatrix.from_json(out / "rho_stat.json")
        diag = json.loads((out / "diagnostics.json").read_text())
        assert diag["spectral_radius_u_ll"] < 1.0
    from bosonloop.qstate import trace_distance
    a, b, c = rhos["superop"], rhos["iterate"], rhos["tensors"]
    assert trace_distance(a, b) < 1e-7
    d = min(a.basis.size, c.basis.size)
    top = np.zeros((a.basis.size,) * 2, dtype=complex)
    top[:d, :d] = c.mat[:d, :d]
    assert 0.5 * np.abs(np.linalg.eigvalsh(a.mat - top)).sum() < 1e-7


def test_stationary_decoupled_exits_4(tmp_path, capsys):
    u = np.diag([1.0, np.exp(0.4j)])
    save_matrix_json(u, tmp_path / "u.json")
    path = write_config(tmp_path, unitary={"type": "file", "path": "u.json"},
                        n_max=4, iterations=1)
    for method in ("superop", "tensors"):
        out = tmp_path / f"dec_{method}"
        code = main(["stationary", path, "--method", method, "--out", str(out)])
        assert code == 4
        err = json.loads(capsys.readouterr().out)
        assert err["error"]["code"] == 4
        assert not out.exists() or not list(out.iterdir())


def test_sample_counts_and_determinism(tmp_path):
    path = write_config(tmp_path, n_max=10, iterations=1)
    out1, out2 = tmp_path / "s1", tmp_path / "s2"
    assert main(["sample", path, "--shots", "500", "--seed", "9",
                 "--out", str(out1)]) == 0
    assert main(["sample", path, "--shots", "500", "--seed", "9",
                 "--out", str(out2)]) == 0
    counts1 = (out1 / "counts.csv").read_bytes()
    assert counts1 == (out2 / "counts.csv").read_bytes()
    total = sum(int(line.split(";")[1]) for line in counts1.decode().splitlines())
    assert total == 500
    m1 = json.loads((out1 / "manifest.json").read_text())
    m2 = json.loads((out2 / "manifest.json").read_text())
    assert m1["config_hash"] == m2["config_hash"]
    assert m1["outputs"] == m2["outputs"]


def test_sample_final_iteration_target(tmp_path):
    path = write_config(tmp_path)
    out = tmp_path / "fin"
    assert main(["sample", path, "--shots", "50", "--seed", "1",
                 "--target", "final", "--out", str(out)]) == 0
    counts = (out / "counts.csv").read_text().splitlines()
    assert sum(int(line.split(";")[1]) for line in counts) == 50


def test_stabilization_outputs(tmp_path):
    path = write_config(tmp_path, n_max=14, iterations=1)
    out = tmp_path / "st"
    assert main(["stabilization", path, "--samples", "10", "--seed", "4",
                 "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["samples"] == 10
    hist = (out / "stabilization_histogram.csv").read_text().splitlines()
    total = sum(int(line.split(";")[1]) for line in hist)
    assert total + summary["skipped_degenerate"] == 10
    assert summary["median"] is not None


def test_reconstruct_report(tmp_path):
    losses = {"t_in": [0.5, 0.5], "t_out": [1.0, 1.0], "loop_T": 0.5}
    path = write_config(tmp_path, n_max=8, iterations=1, losses=losses)
    out = tmp_path / "rec"
    assert main(["reconstruct", path, "--method", "analytic",
                 "--rank-cap", "4", "--out", str(out)]) == 0
    report = json.loads((out / "reconstruction_report.json").read_text())
    assert report["fidelity_vs_reference"] > 0.999
    rows = (out / "fidelity_vs_rank.csv").read_text().splitlines()
    assert len(rows) == 4
    fids = [float(r.split(";")[1]) for r in rows]
    assert fids[-1] > 0.999
    # high-loss fixtures give a monotone non-decreasing rank sweep
    assert all(b >= a - 1e-9 for a, b in zip(fids, fids[1:]))


def test_manifest_lists_all_outputs(tmp_path):
    path = write_config(tmp_path)
    out = tmp_path / "m"
    assert main(["evolve", path, "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    listed = {entry["path"] for entry in manifest["outputs"]}
    on_disk = {p.name for p in out.iterdir()} - {"manifest.json"}
    assert listed == on_disk
    assert manifest["subcommand"] == "evolve"
    assert manifest["wall_time_s"] >= 0
