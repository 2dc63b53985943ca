import hashlib
import json

import numpy as np
import pytest

from airtkit.cli import main
from airtkit.io import read_pgm, read_tsq


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Small end-to-end pipeline artifacts shared across CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    tsq = root / "panel.tsq"
    assert run(
        "synth", "--out", tsq, "--ny", 16, "--nx", 16, "--nt", 32, "--seed", 3
    ) == 0
    ckpt = root / "model.ckpt"
    assert run(
        "train", "--tsq", tsq, "--out", ckpt,
        "--subset", 60, "--epochs", 2, "--batch", 32, "--lr", "1e-3", "--seed", 3,
    ) == 0
    return root


class TestSynth:
    def test_outputs_exist(self, workspace):
        assert (workspace / "panel.tsq").exists()
        assert (workspace / "panel.mask.pgm").exists()
        assert (workspace / "panel.spec.json").exists()
        assert (workspace / "panel.tsq.manifest.json").exists()

    def test_same_seed_same_hash(self, tmp_path):
        a, b = tmp_path / "a.tsq", tmp_path / "b.tsq"
        for out in (a, b):
            assert run("synth", "--out", out, "--ny", 12, "--nx", 12,
                       "--nt", 16, "--seed", 11) == 0
        assert sha(a) == sha(b)

    def test_different_seed_different_hash(self, tmp_path):
        a, b = tmp_path / "a.tsq", tmp_path / "b.tsq"
        assert run("synth", "--out", a, "--ny", 12, "--nx", 12, "--nt", 16,
                   "--seed", 1) == 0
        assert run("synth", "--out", b, "--ny", 12, "--nx", 12, "--nt", 16,
                   "--seed", 2) == 0
        assert sha(a) != sha(b)

    def test_manifest_records_outputs(self, workspace):
        manifest = json.loads((workspace / "panel.tsq.manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert str(workspace / "panel.tsq") in manifest["outputs"]
        assert manifest["wall_seconds"] >= 0
        assert manifest["outputs"][str(workspace / "panel.tsq")] == sha(
            workspace / "panel.tsq"
        )


class TestTrain:
    def test_history_csv_schema(self, workspace):
        lines = (workspace / "model.history.csv").read_text().strip().splitlines()
        assert lines[0] == "epoch,total,rec,kd,wall_seconds"
        assert len(lines) == 3  # header + 2 epochs

    def test_checkpoint_loadable(self, workspace):
        from airtkit.model import ModelState

        state = ModelState.load(workspace / "model.ckpt")
        assert state.config.n_t == 32

    def test_divergence_exit_code(self, workspace, capsys):
        with np.errstate(over="ignore", invalid="ignore"):
            code = run(
                "train", "--tsq", workspace / "panel.tsq",
                "--out", workspace / "diverged.ckpt",
                "--subset", 60, "--epochs", 2, "--batch", 32, "--lr", "1e14",
            )
        assert code == 4
        err = capsys.readouterr().err
        assert "error code=4" in err


class TestEncodeAndEval:
    def test_encode_eval_roundtrip(self, workspace):
        latents = workspace / "latents.tsq"
        assert run("encode", "--tsq", workspace / "panel.tsq",
                   "--model", workspace / "model.ckpt", "--out", latents) == 0
        stack = read_tsq(latents)
        assert stack.n_t == 32  # latent_dim default
        sidecar = json.loads((workspace / "latents.provenance.json").read_text())
        assert sidecar["count"] == 32

        report_csv = workspace / "report.csv"
        assert run("eval", "--stack", latents,
                   "--classes", workspace / "panel.spec.json",
                   "--method", "ae", "--out", report_csv) == 0
        lines = report_csv.read_text().strip().splitlines()
        assert lines[0] == "method,class_mm,contrast,snr_db,image_index"
        assert any(row.startswith("ae,all,") for row in lines[1:])

    def test_eval_iou_of_mask_with_itself(self, workspace, capsys):
        out = workspace / "iou.json"
        assert run("eval", "--mask", workspace / "panel.mask.pgm",
                   "--pred-mask", workspace / "panel.mask.pgm", "--out", out) == 0
        assert json.loads(out.read_text())["iou"] == 1.0
        assert "iou 1.0000" in capsys.readouterr().out

    def test_reconstruct_and_denoise_eval(self, workspace):
        recon = workspace / "recon.tsq"
        assert run("reconstruct", "--tsq", workspace / "panel.tsq",
                   "--model", workspace / "model.ckpt", "--out", recon) == 0
        assert read_tsq(recon).frames.shape == (32, 16, 16)

        curves = workspace / "curves.csv"
        assert run("denoise-eval", "--tsq", workspace / "panel.tsq",
                   "--model", workspace / "model.ckpt",
                   "--classes", workspace / "panel.spec.json",
                   "-k", 5, "--out", curves) == 0
        lines = curves.read_text().strip().splitlines()
        assert lines[0] == "pc_index,contrast,snr_db"
        assert len(lines) == 6


class TestBaselineCommands:
    def test_pca_command(self, workspace):
        out = workspace / "scores.tsq"
        assert run("pca", "--tsq", workspace / "panel.tsq", "-k", 8,
                   "--out", out) == 0
        assert read_tsq(out).frames.shape == (8, 16, 16)
        summary = json.loads((workspace / "scores.summary.json").read_text())
        assert summary["k"] == 8
        assert len(summary["explained_variance"]) == 8

    def test_tsr_command(self, workspace):
        out = workspace / "tsr.tsq"
        assert run("tsr", "--tsq", workspace / "panel.tsq", "--degree", 4,
                   "--out", out) == 0
        assert read_tsq(out).frames.shape == (7, 16, 16)  # 5 coeffs + 2 derivs

    def test_ppt_command(self, workspace):
        out = workspace / "phases.tsq"
        assert run("ppt", "--tsq", workspace / "panel.tsq", "--out", out) == 0
        assert read_tsq(out).frames.shape == (17, 16, 16)

    def test_export_command(self, workspace, tmp_path):
        outdir = tmp_path / "pgms"
        assert run("export", "--stack", workspace / "scores.tsq",
                   "--outdir", outdir) == 0
        pgms = sorted(outdir.glob("*.pgm"))
        assert len(pgms) == 8
        img = read_pgm(pgms[0])
        assert img.shape == (16, 16)
        norms = json.loads((outdir / "scores_normalization.json").read_text())
        assert len(norms) == 8


class TestErrors:
    def test_missing_input_is_exit_3(self, tmp_path, capsys):
        code = run("pca", "--tsq", tmp_path / "nope.tsq", "--out", tmp_path / "x.tsq")
        assert code == 3
        assert "error code=3" in capsys.readouterr().err

    def test_corrupt_input_is_exit_3(self, tmp_path, capsys):
        bad = tmp_path / "bad.tsq"
        bad.write_bytes(b"not a container at all")
        code = run("ppt", "--tsq", bad, "--out", tmp_path / "y.tsq")
        assert code == 3
        assert "error code=3" in capsys.readouterr().err

    def test_bad_flags_exit_2(self):
        with pytest.raises(SystemExit) as excinfo:
            run("synth")  # --out is required
        assert excinfo.value.code == 2

    def test_unknown_command_exit_2(self):
        with pytest.raises(SystemExit) as excinfo:
            run("frobnicate")
        assert excinfo.value.code == 2

    def test_eval_requires_region_source(self, tmp_path):
        with pytest.raises(SystemExit) as excinfo:
            run("eval", "--stack", tmp_path / "s.tsq", "--out", tmp_path / "r.csv")
        assert excinfo.value.code == 2


class TestDeterminism:
    def test_commands_do_not_mutate_inputs(self, workspace):
        tsq = workspace / "panel.tsq"
        before = sha(tsq)
        assert run("pca", "--tsq", tsq, "-k", 4, "--out", workspace / "tmp.tsq") == 0
        assert run("encode", "--tsq", tsq, "--model", workspace / "model.ckpt",
                   "--out", workspace / "tmp2.tsq") == 0
        assert sha(tsq) == before

    def test_pipeline_repeats_bit_identically(self, tmp_path):
        """Same seeds, same data outputs (manifests carry timings, so they
        are exempt; the history CSV is compared without its wall column)."""
        hashes = []
        histories = []
        for tag in ("r1", "r2"):
            d = tmp_path / tag
            d.mkdir()
            tsq, ckpt, lat = d / "p.tsq", d / "m.ckpt", d / "l.tsq"
            assert run("synth", "--out", tsq, "--ny", 12, "--nx", 12,
                       "--nt", 32, "--seed", 9) == 0
            assert run("train", "--tsq", tsq, "--out", ckpt, "--subset", 40,
                       "--epochs", 2, "--batch", 32, "--lr", "1e-3",
                       "--seed", 9) == 0
            assert run("encode", "--tsq", tsq, "--model", ckpt, "--out", lat) == 0
            assert run("pca", "--tsq", tsq, "-k", 4, "--out", d / "s.tsq") == 0
            hashes.append([sha(tsq), sha(ckpt), sha(lat), sha(d / "s.tsq")])
            rows = (d / "m.history.csv").read_text().strip().splitlines()
            histories.append([",".join(r.split(",")[:4]) for r in rows])
        assert hashes[0] == hashes[1]
        assert histories[0] == histories[1]
