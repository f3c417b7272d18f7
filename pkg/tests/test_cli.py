import json

import numpy as np
import pytest

from deconv.cli import main
from deconv.simulation import Scenario, truth_density


def write_config(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def simulate_small(tmp_path, n=10, m=3, seed=1, **extra):
    tmp_path.mkdir(parents=True, exist_ok=True)
    cfg = write_config(
        tmp_path / "sim.json",
        {"scenario": {"n": n, "m": m, **extra}, "seed": seed},
    )
    out = tmp_path / "sim_out"
    code = main(["simulate", "--config", cfg, "--out", str(out)])
    assert code == 0
    return out


class TestSimulateCommand:
    def test_row_count_and_header(self, tmp_path):
        out = simulate_small(tmp_path, n=10, m=3)
        lines = (out / "dataset.csv").read_text().splitlines()
        assert lines[0] == "subject,rep,x1,x2,x3,x4"
        assert len(lines) == 31  # header + 30 replicate rows

    def test_rerun_byte_identical(self, tmp_path):
        out1 = simulate_small(tmp_path / "a", n=8, m=2, seed=5)
        out2 = simulate_small(tmp_path / "b", n=8, m=2, seed=5)
        assert (out1 / "dataset.csv").read_bytes() == (out2 / "dataset.csv").read_bytes()
        assert (out1 / "truth.json").read_bytes() == (out2 / "truth.json").read_bytes()

    def test_invalid_structure_exits_2(self, tmp_path, capsys):
        cfg = write_config(
            tmp_path / "bad.json",
            {"scenario": {"n": 5, "m": 2, "structure": "BOGUS"}},
        )
        code = main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")])
        assert code == 2
        assert "structure" in capsys.readouterr().err

    def test_unknown_key_exits_2(self, tmp_path, capsys):
        cfg = write_config(
            tmp_path / "bad2.json",
            {"scenario": {"n": 5, "m": 2, "wibble": 1}},
        )
        code = main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")])
        assert code == 2
        assert "wibble" in capsys.readouterr().err

    def test_truth_file_evaluates_density(self, tmp_path):
        out = simulate_small(tmp_path, n=6, m=2, seed=9)
        doc = json.loads((out / "truth.json").read_text())
        from deconv.simulation import TruthDensity

        truth = TruthDensity.from_dict(doc)
        ref = truth_density(Scenario(n=6, m=2))
        pts = np.random.default_rng(0).standard_normal((10, 4)) + 3
        assert np.allclose(truth.pdf(pts), ref.pdf(pts))


class TestFitCommand:
    def fit_small(self, tmp_path, model="miw", **extra):
        sim_out = simulate_small(tmp_path, n=20, m=3, seed=2)
        cfg = write_config(
            tmp_path / "fit.json",
            {
                "data": str(sim_out / "dataset.csv"),
                "model": model,
                "iterations": 50,
                "burn_in": 25,
                "thin": 5,
                "seed": 3,
                **extra,
            },
        )
        out = tmp_path / f"fit_{model}"
        code = main(["fit", "--config", cfg, "--out", str(out)])
        assert code == 0
        return out

    def test_smoke_grid_shape(self, tmp_path):
        out = self.fit_small(tmp_path)
        lines = (out / "marginal_x1.csv").read_text().splitlines()
        assert len(lines) == 65  # header + 64 grid rows
        lines2 = (out / "marginal2d_x1_x2.csv").read_text().splitlines()
        assert len(lines2) == 64 * 64 + 1
        assert (out / "posterior.npz").exists()

    def test_naive_model_documented(self, tmp_path):
        out = self.fit_small(tmp_path, model="naive")
        summary = json.loads((out / "summary.json").read_text())
        assert summary["model"] == "naive"

    def test_unknown_model_exits_2(self, tmp_path, capsys):
        sim_out = simulate_small(tmp_path, n=5, m=2)
        cfg = write_config(
            tmp_path / "fit.json",
            {"data": str(sim_out / "dataset.csv"), "model": "flfa"},
        )
        assert main(["fit", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "model" in capsys.readouterr().err

    def test_bad_data_row_exits_3(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("subject,rep,x1\n1,0,1.0\n1,1,nope\n")
        cfg = write_config(
            tmp_path / "fit.json",
            {"data": str(bad), "iterations": 20, "burn_in": 10},
        )
        assert main(["fit", "--config", cfg, "--out", str(tmp_path / "o")]) == 3
        assert "row 3" in capsys.readouterr().err

    def test_missing_data_file_exits_3(self, tmp_path):
        cfg = write_config(
            tmp_path / "fit.json", {"data": str(tmp_path / "none.csv")}
        )
        assert main(["fit", "--config", cfg, "--out", str(tmp_path / "o")]) == 3

    def test_ragged_replicates_accepted(self, tmp_path):
        csv = tmp_path / "ragged.csv"
        rng = np.random.default_rng(1)
        lines = ["subject,rep,x1,x2"]
        for i in range(15):
            for j in range(2 + i % 2):
                vals = rng.standard_normal(2) + (0.0 if i < 8 else 4.0)
                lines.append(f"{i},{j},{vals[0]},{vals[1]}")
        csv.write_text("\n".join(lines) + "\n")
        cfg = write_config(
            tmp_path / "fit.json",
            {"data": str(csv), "iterations": 30, "burn_in": 15, "seed": 4},
        )
        assert main(["fit", "--config", cfg, "--out", str(tmp_path / "o")]) == 0


class TestEvaluateCommand:
    def test_truth_against_itself_is_zero(self, tmp_path):
        out = simulate_small(tmp_path, n=6, m=2, seed=11)
        truth = json.loads((out / "truth.json").read_text())
        # craft a single-state posterior equal to the truth mixture
        fit_dir = tmp_path / "selffit"
        fit_dir.mkdir()
        np.savez_compressed(
            fit_dir / "posterior.npz",
            weights=np.asarray(truth["weights"])[None, :],
            means=np.asarray(truth["means"])[None, :, :],
            covs=np.asarray(truth["covs"])[None, :, :, :],
            axes=np.zeros(1),
        )
        cfg = write_config(
            tmp_path / "eval.json",
            {
                "truth": str(out / "truth.json"),
                "fits": [str(fit_dir)],
                "m_points": 5000,
                "p0": "both",
                "seed": 12,
            },
        )
        eval_out = tmp_path / "eval_out"
        assert main(["evaluate", "--config", cfg, "--out", str(eval_out)]) == 0
        report = json.loads((eval_out / "mise.json").read_text())
        assert report["p0_truth"]["mise"] < 1e-25
        assert report["p0_uniform"]["mise"] < 1e-25

    def test_two_replications_reported(self, tmp_path):
        out = simulate_small(tmp_path, n=6, m=2, seed=13)
        truth = json.loads((out / "truth.json").read_text())
        dirs = []
        for b in range(2):
            d = tmp_path / f"fit{b}"
            d.mkdir()
            means = np.asarray(truth["means"]) + 0.1 * (b + 1)
            np.savez_compressed(
                d / "posterior.npz",
                weights=np.asarray(truth["weights"])[None, :],
                means=means[None, :, :],
                covs=np.asarray(truth["covs"])[None, :, :, :],
                axes=np.zeros(1),
            )
            dirs.append(str(d))
        cfg = write_config(
            tmp_path / "eval.json",
            {
                "truth": str(out / "truth.json"),
                "fits": dirs,
                "m_points": 4000,
                "p0": "truth",
                "seed": 14,
            },
        )
        eval_out = tmp_path / "eval_out2"
        assert main(["evaluate", "--config", cfg, "--out", str(eval_out)]) == 0
        report = json.loads((eval_out / "mise.json").read_text())
        assert len(report["p0_truth"]["ise"]) == 2
        assert report["p0_truth"]["mise"] == pytest.approx(
            float(np.mean(report["p0_truth"]["ise"]))
        )

    def test_dimension_mismatch_exits_3(self, tmp_path):
        out = simulate_small(tmp_path, n=6, m=2, seed=15)
        d = tmp_path / "fitdim"
        d.mkdir()
        np.savez_compressed(
            d / "posterior.npz",
            weights=np.ones((1, 1)),
            means=np.zeros((1, 1, 2)),
            covs=np.eye(2)[None, None],
            axes=np.zeros(1),
        )
        cfg = write_config(
            tmp_path / "eval.json",
            {"truth": str(out / "truth.json"), "fits": [str(d)]},
        )
        assert main(["evaluate", "--config", cfg, "--out", str(tmp_path / "o")]) == 3


class TestPipelineDeterminism:
    def test_fit_outputs_byte_identical(self, tmp_path):
        sim_out = simulate_small(tmp_path, n=15, m=2, seed=21)
        outs = []
        for tag in ("r1", "r2"):
            cfg = write_config(
                tmp_path / f"fit_{tag}.json",
                {
                    "data": str(sim_out / "dataset.csv"),
                    "model": "mlfa",
                    "iterations": 40,
                    "burn_in": 20,
                    "thin": 4,
                    "seed": 33,
                },
            )
            out = tmp_path / f"out_{tag}"
            assert main(["fit", "--config", cfg, "--out", str(out)]) == 0
            outs.append(out)
        for name in ("marginal_x1.csv", "marginal2d_x1_x2.csv", "summary.json"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
