import logging
from pathlib import Path

import numpy as np
import pytest

from g2g.cli import main, run_lock
from g2g.config import OUTPUT_ROOT_ENV, SYNTHETIC_GRID, RunConfig
from g2g.dataset import DatasetManifest, ManifestTriples
from g2g.errors import RunLockedError
from g2g.evaluation import evaluate_split, triptych
from g2g.metrics import read_metrics_csv
from g2g.raster import FULL_SCALE_GRID, Raster, read_png
from g2g.training import PhasePlan

ROOT = Path(__file__).resolve().parents[1]
SMALL = ["--ngf", "8", "--ndf", "8"]


@pytest.fixture(scope="session")
def prepared(tmp_path_factory):
    root = tmp_path_factory.mktemp("prepared")
    assert main(["prepare", "--synthetic", "4", "--data-root", str(root / "data")]) == 0
    return root / "data"


def test_prepare_synthetic_counts(prepared):
    counts = {s: DatasetManifest.load(prepared / f"manifest_{s}.json").count for s in ("train", "val", "test")}
    assert sum(counts.values()) == 4 * 36
    assert counts == {"train": 108, "val": 0, "test": 36}
    t = ManifestTriples(DatasetManifest.load(prepared / "manifest_train.json"), prepared)[0]
    assert t.satellite.data.shape == (256, 256, 3)
    cfg = RunConfig.load(prepared / "effective_config.cfg")
    assert cfg.grid == SYNTHETIC_GRID


def test_prepare_without_sources(tmp_path, capsys):
    (tmp_path / "src").mkdir()
    code = main(["prepare", "--sources", str(tmp_path / "src"), "--data-root", str(tmp_path / "data")])
    assert code == 0
    out = capsys.readouterr().out
    assert "16,361,273" in out and "390,089" in out
    for split in ("train", "val", "test"):
        assert DatasetManifest.load(tmp_path / "data" / f"manifest_{split}.json").count == 0


def test_train_smoke_writes_checkpoints(tmp_path, caplog):
    args = ["--data-root", str(tmp_path / "data"), "--output-root", str(tmp_path / "runs"), *SMALL]
    with caplog.at_level(logging.INFO, logger="g2g"):
        assert main(["train", "--synthetic-smoke", "--epochs-per-phase", "1", *args]) == 0
    run = tmp_path / "runs" / "g2g"
    assert sorted(p.name for p in run.glob("ckpt_*.bin")) == ["ckpt_phase1_epoch1.bin", "ckpt_phase2_epoch1.bin"]
    log = (run / "loss_log.csv").read_text().splitlines()
    assert len(log) == 1 + 8
    assert "D1 discriminator output 12x12x1" in caplog.text
    assert "142x142" in (run / "model_report.txt").read_text()

    caplog.clear()
    with caplog.at_level(logging.INFO, logger="g2g"):
        assert main(["train", "--synthetic-smoke", "--epochs-per-phase", "1", "--model", "pix2pix", *args]) == 0
    assert "P2P_D discriminator output 30x30x1" in caplog.text
    assert (tmp_path / "runs" / "pix2pix" / "ckpt_phase1_epoch1.bin").is_file()

    # resume from the phase-1 checkpoint finishes phase 2 only
    assert main(["train", "--resume", str(run / "ckpt_phase1_epoch1.bin"), "--epochs-per-phase", "1",
                 "--max-steps-per-epoch", "4", *args]) == 0
    assert len((run / "loss_log.csv").read_text().splitlines()) == 1 + 8 + 4


def test_evaluate_and_predict(tmp_path, prepared, capsys):
    args = ["--data-root", str(prepared), "--output-root", str(tmp_path / "runs"), *SMALL]
    assert main(["train", "--epochs-per-phase", "1", "--max-steps-per-epoch", "2", *args]) == 0
    assert main(["evaluate", "--split", "test", *args]) == 0
    eval_dir = tmp_path / "runs" / "g2g" / "eval_test"
    model, reps = read_metrics_csv(eval_dir / "metrics.csv")
    assert model == "g2g" and set(reps) == {"macro", "micro"}
    assert reps["micro"].n_images == 36
    panels = sorted((eval_dir / "triptychs").glob("*.png"))
    assert len(panels) == 36
    assert read_png(panels[0]).data.shape == (256, 3 * 256 + 8, 3)

    tile = next((prepared / "test" / "sat").glob("*.png"))
    out = tmp_path / "pred"
    assert main(["predict", "--out", str(out), "--data-root", str(prepared),
                 "--output-root", str(tmp_path / "runs"), str(tile)]) == 0
    mask = read_png(out / f"{tile.stem}_mask.png")
    assert mask.data.shape == (256, 256, 1)
    assert set(np.unique(mask.to_uint8())) <= {0, 255}


def test_evaluate_with_perfect_stub(tmp_path, prepared):
    triples = list(ManifestTriples(DatasetManifest.load(prepared / "manifest_test.json"), prepared))
    macro, micro = evaluate_split(lambda sat: next(t.gt_mask for t in triples if t.satellite is sat),
                                  triples, tmp_path, "stub", write_triptychs=False)
    for rep in (macro, micro):
        assert rep.pa == rep.miou == rep.fwiou == 1.0
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert [l.split(",")[1] for l in lines[1:]] == ["macro", "micro"]


def test_triptych_geometry():
    panels = [Raster(np.zeros((256, 256, 3), dtype=np.float32)), Raster(np.ones((256, 256, 1), dtype=np.float32))]
    t = triptych(panels + panels[:1])
    assert (t.height, t.width, t.channels) == (256, 776, 3)
    assert np.all(t.data[:, 256:260] == 0.5)


def test_compare_reproduces_stored_table(tmp_path, capsys):
    reports = [str(ROOT / "reports" / "published" / f"{m}_metrics.csv") for m in ("pix2pix", "g2g")]
    assert main(["compare", *reports, "--out", str(tmp_path)]) == 0
    golden = (ROOT / "reports" / "published" / "comparison.txt").read_text()
    assert (tmp_path / "comparison.txt").read_text() == golden
    assert capsys.readouterr().out == golden
    assert (tmp_path / "comparison.csv").read_bytes() == (ROOT / "reports" / "published" / "comparison.csv").read_bytes()


def test_compare_errors(tmp_path):
    one = str(ROOT / "reports" / "published" / "g2g_metrics.csv")
    assert main(["compare", one]) == 5
    (tmp_path / "bad.csv").write_text("garbage\n")
    assert main(["compare", one, str(tmp_path / "bad.csv")]) == 9


def test_missing_manifest_exit_code(tmp_path):
    assert main(["train", "--data-root", str(tmp_path / "none"), "--output-root", str(tmp_path)]) == 5


def test_missing_checkpoint_exit_code(tmp_path, prepared):
    assert main(["evaluate", "--data-root", str(prepared), "--output-root", str(tmp_path),
                 "--checkpoint", str(tmp_path / "nope.bin")]) == 7


def test_locked_run_directory(tmp_path):
    with run_lock(tmp_path / "d"):
        with pytest.raises(RunLockedError):
            with run_lock(tmp_path / "d"):
                pass
        assert main(["prepare", "--sources", str(tmp_path / "s"), "--data-root", str(tmp_path / "d")]) == 11


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "env_runs"))
    assert main(["train", "--synthetic-smoke", "--epochs-per-phase", "1", "--data-root", str(tmp_path / "data"),
                 "--model", "pix2pix", *SMALL]) == 0
    assert (tmp_path / "env_runs" / "pix2pix" / "ckpt_phase1_epoch1.bin").is_file()


def test_config_round_trip(tmp_path):
    cfg = RunConfig(seed=7, ngf=16, phases=[PhasePlan(1, 3, 1e-3, frozenset({"G1", "D1", "G2", "D2"}))])
    cfg.save(tmp_path / "c.cfg")
    assert RunConfig.load(tmp_path / "c.cfg") == cfg


def test_shipped_configs_load():
    assert RunConfig.load(ROOT / "configs" / "paper.cfg") == RunConfig()
    assert RunConfig.load(ROOT / "configs" / "paper.cfg").grid == FULL_SCALE_GRID
    smoke = RunConfig.load(ROOT / "configs" / "smoke.cfg")
    assert smoke.ngf == 8 and smoke.grid == SYNTHETIC_GRID


def test_bad_config_exit_code(tmp_path):
    (tmp_path / "bad.cfg").write_text("[run]\nngf = many\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg")]) == 5
