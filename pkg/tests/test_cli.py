import csv
import json

import numpy as np
import pytest

from cc2dv2.cli import main
from cc2dv2.metrics import MetricsReport

TINY = ["--set", "synthetic_count=6", "--set", "synthetic_test=2", "--set", "image_size=[96, 96]",
        "--set", "patch_size=[48, 48]", "--set", "levels=3", "--set", "widths=[4, 8, 8]",
        "--set", "embed_dim=8", "--set", "matrix_size=[7, 7]", "--set", "ssl_epochs=2",
        "--set", "tpl_epochs=2", "--set", "tpl_base_width=4", "--set", "tpl_depth=3",
        "--set", "synthetic_max_displacement=4"]


def run(*args, out):
    return main([*args, "--out", str(out), "--seed", "3", *TINY])


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    for cmd in ("gen-data", "train-ssl", "pseudo-label", "train-tpl", "eval", "viz"):
        assert run(cmd, out=out) == 0, cmd
    return out


class TestChain:
    def test_artifacts(self, chain):
        assert (chain / "data" / "meta.json").exists()
        assert (chain / "ssl" / "encoders.pt").exists() and (chain / "ssl" / "loss.csv").exists()
        assert len(list((chain / "pseudo" / "pseudo_labels").glob("*.txt"))) == 5
        assert (chain / "tpl" / "detector.pt").exists()
        rep = MetricsReport.load(chain / "eval" / "report.json")
        assert rep.n_images == 2 and rep.n_landmarks == 5 and rep.mre_mm >= 0
        assert len(list((chain / "viz").glob("*.png"))) == 5 * 4

    def test_manifests(self, chain):
        for d in ("data", "ssl", "pseudo", "tpl", "eval", "viz"):
            m = json.loads((chain / d / "manifest.json").read_text())
            assert m["seed"] == 3 and len(m["config_sha256"]) == 64
            assert m["outputs"] and all(len(v) == 64 for v in m["outputs"].values())
            assert m["config"]["ssl_epochs"] == 2

    def test_identical_rerun(self, chain, tmp_path):
        for cmd in ("gen-data", "train-ssl", "pseudo-label", "train-tpl", "eval"):
            assert run(cmd, out=tmp_path) == 0
        for d in ("data", "ssl", "pseudo", "tpl", "eval"):
            assert (chain / d / "manifest.json").read_bytes() == (tmp_path / d / "manifest.json").read_bytes()
        assert (chain / "ssl" / "loss.csv").read_bytes() == (tmp_path / "ssl" / "loss.csv").read_bytes()

    def test_eval_ground_truth_gives_zero(self, chain, tmp_path, capsys):
        code = main(["eval", "--out", str(chain), "--seed", "3", *TINY, "--set", "eval_source=labels",
                     "--set", f"eval_predictions={chain / 'data' / 'annotations'}"])
        assert code == 0
        rep = MetricsReport.from_json(capsys.readouterr().out)
        assert rep.mre_mm == pytest.approx(0.0, abs=1e-9)
        assert all(v == 100.0 for v in rep.sdr.values())

    def test_ssl_eval_source(self, chain, capsys):
        assert main(["eval", "--out", str(chain), "--seed", "3", *TINY, "--set", "eval_source=ssl"]) == 0
        assert MetricsReport.from_json(capsys.readouterr().out).n_images == 2


class TestErrors:
    def test_missing_dataset(self, tmp_path, capsys):
        assert run("train-ssl", out=tmp_path) == 3
        err = capsys.readouterr().err.strip()
        assert err.startswith("error: missing-artifact:") and "gen-data" in err
        assert len(err.splitlines()) == 1

    @pytest.mark.parametrize("cmd,producer", [("pseudo-label", "train-ssl"), ("train-tpl", "pseudo-label"),
                                              ("eval", "train-tpl"), ("viz", "train-ssl")])
    def test_names_producer(self, chain, tmp_path, capsys, cmd, producer):
        (tmp_path / "data").symlink_to(chain / "data")
        assert run(cmd, out=tmp_path) == 3
        assert f"`{producer}`" in capsys.readouterr().err

    def test_config_error(self, tmp_path, capsys):
        assert main(["gen-data", "--out", str(tmp_path), "--set", "alpha=-1"]) == 2
        assert capsys.readouterr().err.startswith("error: config:")

    def test_corrupt_checkpoint(self, chain, tmp_path, capsys):
        (tmp_path / "data").symlink_to(chain / "data")
        (tmp_path / "ssl").mkdir()
        (tmp_path / "ssl" / "encoders.pt").write_bytes(b"junk")
        assert run("pseudo-label", out=tmp_path) == 5
        assert capsys.readouterr().err.startswith("error: checkpoint:")

    def test_bad_dataset(self, tmp_path, capsys):
        (tmp_path / "data").mkdir()
        (tmp_path / "data" / "meta.json").write_text("{not json")
        assert run("train-ssl", out=tmp_path) == 4
        assert capsys.readouterr().err.startswith("error: dataset:")

    def test_show_config(self, capsys):
        assert main(["show-config", "--set", "alpha=0.13"]) == 0
        assert "alpha: 0.13" in capsys.readouterr().out


class TestSweep:
    def test_empty_grid(self, chain, capsys):
        assert main(["sweep", "--out", str(chain), *TINY, "--set", "sweep_alphas=[]"]) == 2
        assert "empty" in capsys.readouterr().err

    def test_single_cell_equals_standalone(self, chain, tmp_path, capsys):
        (tmp_path / "data").symlink_to(chain / "data")
        cell = ["--set", "sweep_alphas=[0.07]", "--set", "sweep_betas=[0.6]"]
        assert run("sweep", *cell, out=tmp_path) == 0
        rows = list(csv.DictReader(open(tmp_path / "sweep" / "sweep.csv")))
        assert len(rows) == 1 and rows[0]["status"] == "ok"
        capsys.readouterr()
        solo = ["--set", "alpha=0.07", "--set", "beta=0.6", "--set", "eval_source=ssl"]
        assert run("train-ssl", *solo, out=tmp_path) == 0
        assert run("eval", *solo, out=tmp_path) == 0
        rep = MetricsReport.load(tmp_path / "eval" / "report.json")
        assert float(rows[0]["mre_mm"]) == rep.mre_mm
        assert float(rows[0]["sdr_2.0"]) == rep.sdr[2.0]

    def test_failed_cell_recorded(self, chain, tmp_path):
        (tmp_path / "data").symlink_to(chain / "data")
        # beta=0 violates the loss precondition: that cell fails, the other runs
        assert run("sweep", "--set", "sweep_alphas=[0.1]", "--set", "sweep_betas=[0.0, 0.7]", out=tmp_path) == 0
        rows = list(csv.DictReader(open(tmp_path / "sweep" / "sweep.csv")))
        assert [r["status"] for r in rows] == ["failed", "ok"]
        assert "beta" in rows[0]["error"] and rows[0]["mre_mm"] == ""

    def test_table_mode_shape(self, chain, tmp_path):
        from cc2dv2.cli import sweep_cells
        from cc2dv2.config import RunConfig

        cells = sweep_cells(RunConfig(sweep_mode="table"))
        assert [c[1:] for c in cells if c[0] == "alpha"] == [(a, 0.7) for a in (0.04, 0.07, 0.10, 0.13, 0.16)]
        assert [c[1:] for c in cells if c[0] == "beta"] == [(0.1, b) for b in (0.5, 0.6, 0.7, 0.8, 0.9)]
        assert len(sweep_cells(RunConfig())) == 25
