import shutil
import subprocess
import sys

import numpy as np
import pytest

from genresub.cli import main
from genresub.core import Dataset, ExperimentScenario, generate_synthetic
from genresub.estimators import resubstitution
from genresub.kernels import KernelSet, closed_form_kernels
from genresub.regression import fit_least_squares


@pytest.fixture
def toy(tmp_path):
    ds = generate_synthetic(ExperimentScenario(1, 2, 2, 0.25, 20), 3)
    path = tmp_path / "toy.csv"
    path.write_text(ds.to_csv())
    return ds, str(path)


def _values(out):
    return {line.split()[0]: float(line.split()[1]) for line in out.splitlines() if line and not line.startswith("#")}


def _kernel_body(out):
    return "".join(line + "\n" for line in out.splitlines() if not line.startswith("#"))


class TestEstimate:
    def test_resubstitution_passthrough(self, toy, capsys):
        ds, path = toy
        assert main(["estimate", "--data", path, "--degree", "1", "--estimators", "resub"]) == 0
        got = _values(capsys.readouterr().out)
        assert got == {"resub": pytest.approx(resubstitution(fit_least_squares(ds, 1), ds).value, rel=1e-9)}

    def test_byte_identical_reruns(self, toy, capsys):
        _, path = toy
        argv = ["estimate", "--data", path, "--degree", "2", "--mc-samples", "100", "--seed", "4",
                "--estimators", "resub,x-gauss-mpe,xy-gauss-mpe,posterior,mpe-posterior,x-gauss-mm-chi"]
        main(argv)
        first = capsys.readouterr().out
        main(argv)
        assert capsys.readouterr().out == first
        assert first.startswith("# data: ")

    def test_csv_output(self, toy, tmp_path, capsys):
        _, path = toy
        out = tmp_path / "est.csv"
        main(["estimate", "--data", path, "--degree", "1", "--estimators", "resub,x-gauss-mpe",
              "--mc-samples", "50", "--csv", str(out)])
        printed = _values(capsys.readouterr().out)
        rows = out.read_text().splitlines()
        assert rows[0] == "estimator,value,standard_error,mc_samples"
        assert float(rows[1].split(",")[1]) == pytest.approx(printed["resub"], rel=1e-9)
        assert rows[2].split(",")[3] == str(50 * 20)

    def test_single_row_rejected(self, tmp_path, capsys):
        path = tmp_path / "one.csv"
        path.write_text(Dataset([0.5], [1.0]).to_csv())
        code = main(["estimate", "--data", str(path), "--degree", "0", "--estimators", "x-gauss-mm-exact"])
        assert code == 2
        assert "need at least 2 points" in capsys.readouterr().err

    def test_unknown_estimator_is_usage_error(self, toy, capsys):
        assert main(["estimate", "--data", toy[1], "--degree", "1", "--estimators", "loo"]) == 1

    def test_missing_file_is_data_error(self, tmp_path, capsys):
        assert main(["estimate", "--data", str(tmp_path / "nope.csv"), "--degree", "1"]) == 2
        assert "reading" in capsys.readouterr().err

    def test_rank_deficient_fit(self, tmp_path, capsys):
        path = tmp_path / "flat.csv"
        path.write_text(Dataset([0.5, 0.5, 0.5], [1.0, 2.0, 3.0]).to_csv())
        assert main(["estimate", "--data", str(path), "--degree", "1", "--estimators", "resub"]) == 3
        assert "rank deficient" in capsys.readouterr().err

    def test_bad_flag_exits_one(self):
        with pytest.raises(SystemExit) as exc:
            main(["estimate", "--degree", "x"])
        assert exc.value.code == 1


class TestKernel:
    def test_mm_chi_two_points(self, tmp_path, capsys):
        path = tmp_path / "two.csv"
        path.write_text(Dataset([0.0, 1.0], [0.0, 0.0]).to_csv())
        assert main(["kernel", "--data", str(path), "--method", "mm-chi"]) == 0
        out = capsys.readouterr().out
        ks = KernelSet.from_text(_kernel_body(out))
        assert ks.scales[0] == pytest.approx(1.2533141373155, rel=1e-12)
        assert "# scale[0]: 1.253314137315" in out

    def test_mm_chi_per_class(self, tmp_path, capsys):
        path = tmp_path / "cls.csv"
        path.write_text("x1,y,label\n0,0,0\n1,0,0\n10,0,1\n13,0,1\n")
        assert main(["kernel", "--data", str(path), "--method", "mm-chi", "--label-column", "label"]) == 0
        ks = KernelSet.from_text(_kernel_body(capsys.readouterr().out))
        c = np.sqrt(2 / np.pi)
        assert ks.scales == pytest.approx({0: 1 / c, 1: 3 / c}, rel=1e-12)

    def test_mpe_large_lambda(self, toy, capsys):
        ds, path = toy
        assert main(["kernel", "--data", path, "--method", "mpe", "--lambda", "1e12"]) == 0
        ks = KernelSet.from_text(_kernel_body(capsys.readouterr().out))
        np.testing.assert_allclose(ks.matrices, closed_form_kernels(ds.features), atol=1e-8)

    def test_max_iter_one(self, toy, capsys):
        assert main(["kernel", "--data", toy[1], "--method", "mpe", "--max-iter", "1"]) == 0
        out = capsys.readouterr().out
        assert "# converged: false" in out and "# iterations: 1" in out

    def test_mpe_xy_and_out_file(self, toy, tmp_path, capsys):
        out = tmp_path / "k.txt"
        assert main(["kernel", "--data", toy[1], "--method", "mpe-xy", "--out", str(out)]) == 0
        assert KernelSet.from_text(out.read_text()).matrices.shape == (20, 2, 2)
        assert "# trace_min" in capsys.readouterr().out

    def test_mm_exact_reports_bracket(self, toy, capsys):
        assert main(["kernel", "--data", toy[1], "--method", "mm-exact", "--mm-mc-samples", "500"]) == 0
        out = capsys.readouterr().out
        assert "# bracket:" in out and "# bisections:" in out

    def test_label_column_only_for_chi(self, toy):
        with pytest.raises(SystemExit) as exc:
            main(["kernel", "--data", toy[1], "--method", "mpe", "--label-column", "y"])
        assert exc.value.code == 1


class TestDatagen:
    def test_matches_library(self, tmp_path):
        out = tmp_path / "g.csv"
        assert main(["datagen", "--d", "2", "--pg", "2", "--sigma", "0.5", "--n", "30", "--seed", "8",
                     "--out", str(out)]) == 0
        assert out.read_text() == generate_synthetic(ExperimentScenario(2, 2, 1, 0.5, 30), 8).to_csv()


class TestExperiment:
    def test_study_d1_table_schema(self, repo_root, tmp_path, capsys):
        # full d = 1 table layout, with one replicate per scenario
        cfg = (repo_root / "configs" / "study_d1.yaml").read_text()
        cfg = cfg.replace("replicates: 100", "replicates: 1").replace("mc_samples: 1000 ", "mc_samples: 50 ")
        cfg = cfg.replace("mm_mc_samples: 2000", "mm_mc_samples: 200")
        path = tmp_path / "d1.yaml"
        path.write_text(cfg)
        md = tmp_path / "d1.md"
        assert main(["experiment", "--config", str(path), "--csv", str(tmp_path / "d1.csv"),
                     "--markdown", str(md)]) == 0
        bias = md.read_text().split("### RMSE")[0]
        lines = [line for line in bias.splitlines() if line.startswith("|")]
        assert lines[0] == "| d | σ | n | p_g | p_f | Resub | Post | X - MPE | XY - MPE | X - MM | MPE - Post |"
        rows = [tuple(c.strip() for c in line.split("|")[1:6]) for line in lines[2:]]
        expected = [("1", s, str(n), str(pg), str(pf)) for s in ("0.25", "0.50") for n in (20, 50, 100)
                    for pg in (1, 2, 3) for pf in (1, 2)]
        assert rows == expected

    def test_smoke_config_rerun_identical(self, repo_root, tmp_path, capsys):
        cfg = str(repo_root / "configs" / "smoke.yaml")
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert main(["experiment", "--config", cfg, "--csv", str(a), "--markdown", str(tmp_path / "a.md")]) == 0
        assert main(["experiment", "--config", cfg, "--csv", str(b), "--markdown", str(tmp_path / "b.md"),
                     "--threads", "2"]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert "# seed: 7" in capsys.readouterr().out

    def test_missing_config(self, tmp_path, capsys):
        assert main(["experiment", "--config", str(tmp_path / "none.yaml")]) == 2


@pytest.mark.skipif(shutil.which("genresub") is None, reason="console script not installed")
def test_console_script(toy):
    proc = subprocess.run(["genresub", "estimate", "--data", toy[1], "--degree", "1", "--estimators", "resub"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "resub" in proc.stdout


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "genresub.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "experiment" in proc.stdout
