"""``g2g`` command line: prepare, train, evaluate, predict, compare, pipeline."""

from __future__ import annotations

import argparse
import logging
import re
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

from filelock import FileLock, Timeout

from . import dataset as ds
from .config import SYNTHETIC_GRID, RunConfig
from .errors import ConfigurationError, G2GError, RunLockedError
from .evaluation import evaluate_split, triptych
from .metrics import LITERATURE_MULTITASK, compare_models, read_metrics_csv
from .model import model_report
from .raster import pixel_loss_report, read_png, write_png
from .training import init_state, load_state, predict, run_plan

logger = logging.getLogger("g2g")


@contextmanager
def run_lock(directory: Path):
    """One run owns its output directory."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(directory / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise RunLockedError(f"{directory} is in use by another run") from None
    try:
        yield
    finally:
        lock.release()


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {
        "data_root": getattr(args, "data_root", None),
        "output_root": getattr(args, "output_root", None),
        "sources": getattr(args, "sources", None),
        "seed": getattr(args, "seed", None),
        "model": getattr(args, "model", None),
        "ngf": getattr(args, "ngf", None),
        "ndf": getattr(args, "ndf", None),
        "max_steps_per_epoch": getattr(args, "max_steps_per_epoch", None),
    }
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    epochs = getattr(args, "epochs_per_phase", None)
    if epochs is not None:
        cfg.phases = [replace(p, epochs=epochs) for p in cfg.phases]
        cfg.pix2pix_phase = replace(cfg.pix2pix_phase, epochs=epochs)
    return cfg


def _echo_config(cfg: RunConfig, directory: Path) -> None:
    cfg.save(directory / "effective_config.cfg")


# --- prepare --------------------------------------------------------------------

def cmd_prepare(cfg: RunConfig, synthetic: int | None = None) -> dict[str, ds.DatasetManifest]:
    data_root = Path(cfg.data_root)
    if synthetic is not None:
        cfg.grid = SYNTHETIC_GRID
        cfg.split_counts = ds.proportional_split_counts(synthetic)
    print(pixel_loss_report(cfg.grid).format())
    with run_lock(data_root):
        if synthetic is not None:
            pairs = ds.synthesize_fixture(synthetic, cfg.grid.source_side, cfg.seed)
            sources = ds.write_sources(pairs, data_root / "sources")
        else:
            src = Path(cfg.sources)
            sources = ds.discover_sources(src) if (src / "sat").is_dir() else []
        split_counts = cfg.split_counts
        if not sources:
            logger.warning("no source images found; writing empty manifests")
            split_counts = (0, 0, 0)
        elif sum(split_counts) > len(sources):
            split_counts = ds.proportional_split_counts(len(sources))
            logger.warning("only %d sources; splitting %s", len(sources), split_counts)
        cfg.split_counts = tuple(split_counts)
        manifests = ds.build_manifest(sources, cfg.grid, split_counts, cfg.seed, data_root,
                                      contour_width=cfg.contour_width, workers=cfg.workers)
        _echo_config(cfg, data_root)
    for split, m in manifests.items():
        print(f"{split}: {m.count} tiles")
    return manifests


# --- train ----------------------------------------------------------------------

def _manifest(cfg: RunConfig, split: str) -> ds.DatasetManifest:
    path = Path(cfg.data_root) / f"manifest_{split}.json"
    if not path.is_file():
        raise ConfigurationError(f"missing manifest {path}; run `g2g prepare` first")
    return ds.DatasetManifest.load(path)


def run_dir(cfg: RunConfig) -> Path:
    return cfg.resolved_output_root() / cfg.model


def latest_checkpoint(directory: Path) -> Path:
    found = []
    for p in directory.glob("ckpt_phase*_epoch*.bin"):
        m = re.fullmatch(r"ckpt_phase(\d+)_epoch(\d+)\.bin", p.name)
        if m:
            found.append((int(m.group(1)), int(m.group(2)), p))
    if not found:
        raise ConfigurationError(f"no checkpoints in {directory}")
    return max(found)[2]


def cmd_train(cfg: RunConfig, synthetic_smoke: bool = False, resume: str | None = None):
    if synthetic_smoke:
        if not (Path(cfg.data_root) / "manifest_train.json").is_file():
            smoke = replace(cfg, split_counts=(1, 0, 0))
            cmd_prepare(smoke, synthetic=1)
        if not cfg.max_steps_per_epoch:
            cfg.max_steps_per_epoch = 4
    data = ds.ManifestTriples(_manifest(cfg, "train"), cfg.data_root)
    if len(data) == 0:
        raise ConfigurationError("training manifest is empty")
    out = run_dir(cfg)
    with run_lock(out):
        if resume:
            state = load_state(resume, cfg.model, {"ngf": cfg.ngf, "ndf": cfg.ndf, "g2_skips": cfg.g2_skips})
        else:
            state = init_state(cfg.model, cfg.seed, cfg.ngf, cfg.ndf, cfg.g2_skips)
            (out / "loss_log.csv").unlink(missing_ok=True)
        _echo_config(cfg, out)
        (out / "model_report.txt").write_text(model_report(list(state.specs.values())))
        for name, spec in state.specs.items():
            if spec.is_discriminator:
                h, w, c = spec.output_shape.as_tuple()
                logger.info("%s discriminator output %dx%dx%d", name, h, w, c)
        state = run_plan(state, cfg.plan(), data, cfg.objective, out,
                         checkpoint_every=cfg.checkpoint_every,
                         max_steps_per_epoch=cfg.max_steps_per_epoch or None)
    print(f"trained {cfg.model}: {state.step} steps; checkpoints in {out}")
    return state


# --- evaluate / predict -----------------------------------------------------------

def _checkpoint_path(cfg: RunConfig, checkpoint: str | None) -> Path:
    if checkpoint or cfg.checkpoint:
        return Path(checkpoint or cfg.checkpoint)
    return latest_checkpoint(run_dir(cfg))


def cmd_evaluate(cfg: RunConfig, checkpoint: str | None = None, split: str = "test", triptychs: bool = True):
    ckpt = _checkpoint_path(cfg, checkpoint)
    state = load_state(ckpt, cfg.model, {"ngf": cfg.ngf, "ndf": cfg.ndf, "g2_skips": cfg.g2_skips})
    triples = ds.ManifestTriples(_manifest(cfg, split), cfg.data_root)
    if len(triples) == 0:
        raise ConfigurationError(f"split {split!r} is empty")
    out = run_dir(cfg) / f"eval_{split}"
    with run_lock(out):
        macro, micro = evaluate_split(lambda sat: predict(state, sat).final_mask, triples, out,
                                      cfg.model, write_triptychs=triptychs)
        _echo_config(cfg, out)
    for rep in (macro, micro):
        print(f"{cfg.model} {rep.averaging}: PA {rep.pa:.4f}  MA {rep.ma:.4f}  "
              f"MIoU {rep.miou:.4f}  FWIoU {rep.fwiou:.4f}")
    return out / "metrics.csv"


def cmd_predict(cfg: RunConfig, inputs: list[str], out_dir: str, checkpoint: str | None = None) -> list[Path]:
    state = load_state(_checkpoint_path(cfg, checkpoint))
    out = Path(out_dir)
    written = []
    for path in inputs:
        sat = read_png(path)
        pred = predict(state, sat)
        stem = Path(path).stem
        panels = [sat, pred.g1_out] + ([pred.g2_out] if pred.g2_out is not None else [])
        write_png(triptych(panels), out / f"{stem}_triptych.png")
        write_png(ds.mask_image(pred.final_mask), out / f"{stem}_mask.png")
        written.append(out / f"{stem}_mask.png")
    return written


# --- compare --------------------------------------------------------------------

def cmd_compare(reports: list[str], out_dir: str | None = None, averaging: str = "macro",
                literature: bool = True) -> str:
    if len(reports) < 2:
        raise ConfigurationError("compare needs at least two report files")
    table = {}
    for path in reports:
        model, reps = read_metrics_csv(path)
        if averaging not in reps:
            raise ConfigurationError(f"{path}: no {averaging!r} row")
        table[model] = reps[averaging]
    csv_text, aligned = compare_models(table, LITERATURE_MULTITASK if literature else None)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.csv").write_text(csv_text)
        (out / "comparison.txt").write_text(aligned)
    print(aligned, end="")
    return aligned


def cmd_pipeline(cfg: RunConfig, synthetic: int = 4) -> str:
    """prepare -> train (G2G and Pix2Pix) -> evaluate -> compare on synthetic data."""
    cmd_prepare(cfg, synthetic=synthetic)
    reports = []
    for model in ("g2g", "pix2pix"):
        mcfg = replace(cfg, model=model)
        cmd_train(mcfg)
        split = "test" if _manifest(mcfg, "test").count else "train"
        reports.append(str(cmd_evaluate(mcfg, split=split)))
    return cmd_compare(reports, out_dir=str(cfg.resolved_output_root() / "comparison"))


# --- argument parsing ---------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--data-root")
    p.add_argument("--output-root", help="also settable through $G2G_OUTPUT_ROOT")
    p.add_argument("--seed", type=int)


def _model_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", choices=("g2g", "pix2pix"))
    p.add_argument("--ngf", type=int, help="generator base width")
    p.add_argument("--ndf", type=int, help="discriminator base width")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="g2g", description="G2G building-footprint segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="tile source pairs into train/val/test triples")
    _common(p)
    p.add_argument("--sources", help="directory with sat/ and gt/ PNG pairs")
    p.add_argument("--synthetic", type=int, metavar="N", help="generate N synthetic source scenes instead")

    p = sub.add_parser("train", help="run the phase plan")
    _common(p)
    _model_opts(p)
    p.add_argument("--epochs-per-phase", type=int)
    p.add_argument("--max-steps-per-epoch", type=int)
    p.add_argument("--synthetic-smoke", action="store_true",
                   help="create a 1-source synthetic dataset if needed and cap epochs at 4 steps")
    p.add_argument("--resume", metavar="CHECKPOINT")

    p = sub.add_parser("evaluate", help="score a checkpoint on a split")
    _common(p)
    _model_opts(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test", choices=ds.SPLITS)
    p.add_argument("--no-triptychs", action="store_true")

    p = sub.add_parser("predict", help="segment 256x256 satellite tiles")
    _common(p)
    _model_opts(p)
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("inputs", nargs="+")

    p = sub.add_parser("compare", help="comparison table from metrics.csv files")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")
    p.add_argument("--averaging", default="macro", choices=("macro", "micro"))
    p.add_argument("--no-literature", action="store_true")

    p = sub.add_parser("pipeline", help="prepare, train, evaluate and compare on synthetic data")
    _common(p)
    p.add_argument("--synthetic", type=int, default=4, metavar="N")
    p.add_argument("--epochs-per-phase", type=int, default=1)
    p.add_argument("--max-steps-per-epoch", type=int)
    p.add_argument("--ngf", type=int)
    p.add_argument("--ndf", type=int)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            cmd_compare(args.reports, args.out, args.averaging, not args.no_literature)
            return 0
        cfg = load_config(args)
        if args.command == "prepare":
            cmd_prepare(cfg, synthetic=args.synthetic)
        elif args.command == "train":
            cmd_train(cfg, synthetic_smoke=args.synthetic_smoke, resume=args.resume)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.checkpoint, args.split, triptychs=not args.no_triptychs)
        elif args.command == "predict":
            cmd_predict(cfg, args.inputs, args.out, args.checkpoint)
        elif args.command == "pipeline":
            cmd_pipeline(cfg, synthetic=args.synthetic)
    except G2GError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
