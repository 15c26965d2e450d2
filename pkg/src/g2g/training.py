"""cGAN + lambda*L1 objective, the two-discriminator update cycle, phased
training with checkpoints, and inference."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import MaskEncoding, SampleTriple
from .errors import CheckpointError, ConfigurationError, ContractViolationError, NonFiniteLossError
from .metrics import binarize_prediction
from .model import (
    NetworkSpec,
    SpecNet,
    build_d1,
    build_d2,
    build_g1,
    build_g2,
    build_pix2pix_baseline,
    init_weights,
    load_checkpoint,
    save_checkpoint,
)
from .raster import Raster

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.5, 0.999)
LOG_COLUMNS = ("phase", "epoch", "step", "d1", "g1_adv", "g1_l1", "d2", "g2_adv", "g2_l1", "g1_total", "g2_total")
G2G_NETS = ("G1", "D1", "G2", "D2")
P2P_NETS = ("P2P_G", "P2P_D")


@dataclass
class ObjectiveConfig:
    lambda_l1: float = 100.0
    real_label: float = 1.0
    fake_label: float = 0.0
    detach_g1: bool = False

    def __post_init__(self):
        if self.lambda_l1 < 0:
            raise ConfigurationError("lambda_l1 must be >= 0")


@dataclass(frozen=True)
class PhasePlan:
    phase: int
    epochs: int
    learning_rate: float
    trainable: frozenset[str]


def g2g_plan(epochs_per_phase: int = 200) -> list[PhasePlan]:
    """Phase 1: everything at 1e-3; phase 2: only G2/D2 at 1e-6."""
    return [
        PhasePlan(1, epochs_per_phase, 1e-3, frozenset(G2G_NETS)),
        PhasePlan(2, epochs_per_phase, 1e-6, frozenset({"G2", "D2"})),
    ]


def pix2pix_plan(epochs: int = 200, learning_rate: float = 1e-3) -> list[PhasePlan]:
    return [PhasePlan(1, epochs, learning_rate, frozenset(P2P_NETS))]


def l1_loss(output: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if output.shape != target.shape:
        raise ContractViolationError(f"l1_loss shapes differ: {tuple(output.shape)} vs {tuple(target.shape)}")
    return (output - target).abs().mean()


def _bce(logits: torch.Tensor, label: float) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, label))


def gan_losses(d_real_logits: torch.Tensor, d_fake_logits: torch.Tensor, cfg: ObjectiveConfig | None = None):
    """(discriminator loss, generator loss), each averaged over the patch grid.

    The discriminator loss is the sum of its real-vs-1 and fake-vs-0 cross
    entropies; the generator loss scores the fakes against the real label.
    """
    cfg = cfg or ObjectiveConfig()
    if d_real_logits.shape != d_fake_logits.shape:
        raise ContractViolationError("real and fake logit grids differ in shape")
    d_loss = _bce(d_real_logits, cfg.real_label) + _bce(d_fake_logits, cfg.fake_label)
    g_loss = _bce(d_fake_logits, cfg.real_label)
    return d_loss, g_loss


# --- networks and state -------------------------------------------------------

def build_specs(model: str = "g2g", ngf: int = 64, ndf: int = 64, g2_skips: bool = True) -> dict[str, NetworkSpec]:
    if model == "g2g":
        return {"G1": build_g1(ngf), "D1": build_d1(ndf), "G2": build_g2(ngf, skips=g2_skips), "D2": build_d2(ndf)}
    if model == "pix2pix":
        g, d = build_pix2pix_baseline(ngf, ndf)
        return {"P2P_G": g, "P2P_D": d}
    raise ConfigurationError(f"unknown model {model!r} (expected g2g or pix2pix)")


@dataclass
class TrainState:
    model: str
    specs: dict[str, NetworkSpec]
    nets: nn.ModuleDict
    optimizers: dict[str, torch.optim.Optimizer]
    seed: int = 0
    phase: int = 0
    epoch: int = 0
    step: int = 0
    history: list[dict] = field(default_factory=list)
    widths: dict = field(default_factory=dict)

    @property
    def generator_names(self) -> tuple[str, ...]:
        return ("G1", "G2") if self.model == "g2g" else ("P2P_G",)


def init_state(model: str = "g2g", seed: int = 0, ngf: int = 64, ndf: int = 64, g2_skips: bool = True,
               learning_rate: float = 1e-3) -> TrainState:
    specs = build_specs(model, ngf, ndf, g2_skips)
    gen = torch.Generator().manual_seed(seed)
    nets = nn.ModuleDict()
    for name, spec in specs.items():
        net = SpecNet(spec)
        init_weights(net, gen)
        nets[name] = net
    optimizers = {name: torch.optim.Adam(net.parameters(), lr=learning_rate, betas=ADAM_BETAS)
                  for name, net in nets.items()}
    widths = {"ngf": ngf, "ndf": ndf, "g2_skips": g2_skips}
    return TrainState(model, specs, nets, optimizers, seed=seed, widths=widths)


def _set_lr(state: TrainState, lr: float) -> None:
    for opt in state.optimizers.values():
        for group in opt.param_groups:
            group["lr"] = lr


def triple_tensors(triples: Sequence[SampleTriple], encoding: MaskEncoding = MaskEncoding()) -> dict[str, torch.Tensor]:
    """Stack triples into NCHW float tensors scaled to [-1, 1]."""
    def nchw(rasters):
        arr = np.stack([r.data for r in rasters]).astype(np.float32)
        return torch.from_numpy(arr * 2.0 - 1.0).permute(0, 3, 1, 2).contiguous()

    return {
        "sat": nchw([t.satellite for t in triples]),
        "gt": nchw([encoding.render(t.gt_mask) for t in triples]),
        "overlay": nchw([encoding.render(t.overlay_mask) for t in triples]),
    }


def _check_finite(losses: dict[str, float], state: TrainState) -> None:
    for name, value in losses.items():
        if value is not None and not math.isfinite(value):
            raise NonFiniteLossError(
                f"non-finite {name} at phase {state.phase} epoch {state.epoch} step {state.step}: {losses}"
            )


def _d_update(d: nn.Module, opt, trainable: bool, cond, real, fake, cfg):
    def run():
        return gan_losses(d(torch.cat([cond, real], 1)), d(torch.cat([cond, fake], 1)), cfg)[0]

    if not trainable:
        with torch.no_grad():
            return run()
    opt.zero_grad(set_to_none=True)
    loss = run()
    loss.backward()
    opt.step()
    return loss.detach()


def train_step(state: TrainState, batch: dict[str, torch.Tensor], cfg: ObjectiveConfig,
               trainable: frozenset[str]) -> dict[str, float]:
    """One update cycle; returns the logged loss terms.

    G2G: D1 on (sat, gt) vs (sat, G1(sat)); G2 on concat(G1 out, sat);
    D2 on (combined, overlay) vs (combined, G2 out); then both generators
    on adversarial + lambda * L1 against their own targets. Networks
    outside ``trainable`` are evaluated but never updated.
    """
    for net in state.nets.values():
        net.train()
    if state.model == "pix2pix":
        return _pix2pix_step(state, batch, cfg, trainable)
    nets, opts = state.nets, state.optimizers
    x, y2, y3 = batch["sat"], batch["gt"], batch["overlay"]
    lam = cfg.lambda_l1

    g1_grad = "G1" in trainable
    with torch.set_grad_enabled(g1_grad):
        fake1, taps = nets["G1"](x, return_taps=True)
    d1 = _d_update(nets["D1"], opts["D1"], "D1" in trainable, x, y2, fake1.detach(), cfg)

    feed1, feed_taps = fake1, taps
    if cfg.detach_g1:
        feed1, feed_taps = fake1.detach(), {k: v.detach() for k, v in taps.items()}
    combined = torch.cat([feed1, x], 1)
    g2_grad = "G2" in trainable
    with torch.set_grad_enabled(g2_grad or g1_grad):
        fake2 = nets["G2"](combined, taps={f"G1/{k}": v for k, v in feed_taps.items()})
    d2 = _d_update(nets["D2"], opts["D2"], "D2" in trainable, combined.detach(), y3, fake2.detach(), cfg)

    for name in ("D1", "D2"):
        nets[name].requires_grad_(False)
    try:
        with torch.set_grad_enabled(g1_grad or g2_grad):
            g1_adv = _bce(nets["D1"](torch.cat([x, fake1], 1)), cfg.real_label)
            g1_l1 = l1_loss(fake1, y2)
            g2_adv = _bce(nets["D2"](torch.cat([combined, fake2], 1)), cfg.real_label)
            g2_l1 = l1_loss(fake2, y3)
            g1_total = g1_adv + lam * g1_l1
            g2_total = g2_adv + lam * g2_l1
            objective = (g1_total if g1_grad else 0) + (g2_total if g2_grad else 0)
        losses = _as_floats(d1=d1, g1_adv=g1_adv, g1_l1=g1_l1, d2=d2, g2_adv=g2_adv, g2_l1=g2_l1,
                            g1_total=g1_total, g2_total=g2_total)
        _check_finite(losses, state)
        if g1_grad or g2_grad:
            for name in ("G1", "G2"):
                opts[name].zero_grad(set_to_none=True)
            objective.backward()
            for name in ("G1", "G2"):
                if name in trainable:
                    opts[name].step()
    finally:
        for name in ("D1", "D2"):
            nets[name].requires_grad_(True)
    return losses


def _pix2pix_step(state, batch, cfg, trainable):
    g, d = state.nets["P2P_G"], state.nets["P2P_D"]
    x, y = batch["sat"], batch["gt"]
    g_grad = "P2P_G" in trainable
    with torch.set_grad_enabled(g_grad):
        fake = g(x)
    d1 = _d_update(d, state.optimizers["P2P_D"], "P2P_D" in trainable, x, y, fake.detach(), cfg)
    d.requires_grad_(False)
    try:
        with torch.set_grad_enabled(g_grad):
            adv = _bce(d(torch.cat([x, fake], 1)), cfg.real_label)
            l1 = l1_loss(fake, y)
            total = adv + cfg.lambda_l1 * l1
        losses = _as_floats(d1=d1, g1_adv=adv, g1_l1=l1, g1_total=total)
        _check_finite(losses, state)
        if g_grad:
            state.optimizers["P2P_G"].zero_grad(set_to_none=True)
            total.backward()
            state.optimizers["P2P_G"].step()
    finally:
        d.requires_grad_(True)
    return losses


def _as_floats(**terms) -> dict[str, float]:
    return {k: float(v.detach()) if torch.is_tensor(v) else v for k, v in terms.items()}


# --- phased training ----------------------------------------------------------

def checkpoint_name(phase: int, epoch: int) -> str:
    return f"ckpt_phase{phase}_epoch{epoch}.bin"


def save_state(state: TrainState, path: str | Path) -> None:
    payload = {
        "model": state.model,
        "widths": state.widths,
        "params": {n: net.state_dict() for n, net in state.nets.items()},
        "optimizers": {n: opt.state_dict() for n, opt in state.optimizers.items()},
        "seed": state.seed, "phase": state.phase, "epoch": state.epoch, "step": state.step,
        "history": list(state.history),
        "training_phase_tag": state.phase,
    }
    save_checkpoint(path, state.specs, payload)


def load_state(path: str | Path, model: str | None = None, widths: dict | None = None) -> TrainState:
    """Restore a TrainState. When ``model``/``widths`` are given the
    checkpoint must have been produced by exactly those networks."""
    doc = load_checkpoint(path)
    ckpt_model, ckpt_widths = doc["model"], doc["widths"]
    expected = build_specs(model or ckpt_model, **(widths or ckpt_widths))
    load_checkpoint(path, expected)  # raises on spec-hash mismatch
    state = init_state(ckpt_model, doc["seed"], **ckpt_widths)
    for name, net in state.nets.items():
        net.load_state_dict(doc["params"][name])
    for name, opt in state.optimizers.items():
        opt.load_state_dict(doc["optimizers"][name])
    state.phase, state.epoch, state.step = doc["phase"], doc["epoch"], doc["step"]
    state.history = list(doc["history"])
    return state


def epoch_order(n: int, seed: int, phase: int, epoch: int) -> list[int]:
    gen = torch.Generator().manual_seed(seed * 1_000_003 + phase * 10_007 + epoch)
    return torch.randperm(n, generator=gen).tolist()


class LossLog:
    """Append-only CSV loss log, one row per step."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        if self.path and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(",".join(LOG_COLUMNS) + "\n")

    def append(self, row: dict) -> None:
        if self.path is None:
            return
        with self.path.open("a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                ["" if row.get(c) is None else (f"{row[c]:.9g}" if isinstance(row[c], float) else row[c])
                 for c in LOG_COLUMNS])


def run_plan(
    state: TrainState,
    plan: Sequence[PhasePlan],
    data: Sequence[SampleTriple],
    cfg: ObjectiveConfig,
    out_dir: str | Path | None = None,
    checkpoint_every: int = 0,
    max_steps_per_epoch: int | None = None,
    encoding: MaskEncoding = MaskEncoding(),
    stop_after_epochs: int | None = None,
    on_epoch: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Run the phases in order, resuming after whatever ``state`` already
    completed. Checkpoints go to ``out_dir`` every ``checkpoint_every``
    epochs and at each phase end; loss rows to ``out_dir/loss_log.csv``.

    ``stop_after_epochs`` interrupts the run after that many epochs (used
    to exercise resume).
    """
    if not plan:
        return state
    if not data:
        raise ConfigurationError("training data is empty")
    for p in plan:
        unknown = set(p.trainable) - set(state.nets)
        if unknown:
            raise ConfigurationError(f"phase {p.phase} names unknown networks {sorted(unknown)}")
    out = Path(out_dir) if out_dir else None
    log = LossLog(out / "loss_log.csv" if out else None)
    epochs_run = 0
    for p in plan:
        if p.phase < state.phase or (p.phase == state.phase and state.epoch >= p.epochs):
            continue
        if p.phase != state.phase:
            state.phase, state.epoch = p.phase, 0
        _set_lr(state, p.learning_rate)
        logger.info("phase %d: %d epochs at lr %g, training %s", p.phase, p.epochs, p.learning_rate,
                    ",".join(sorted(p.trainable)))
        while state.epoch < p.epochs:
            order = epoch_order(len(data), state.seed, p.phase, state.epoch)
            if max_steps_per_epoch is not None:
                order = order[:max_steps_per_epoch]
            for idx in order:
                losses = train_step(state, triple_tensors([data[idx]], encoding), cfg, p.trainable)
                row = {"phase": p.phase, "epoch": state.epoch + 1, "step": state.step, **losses}
                state.history.append(row)
                log.append(row)
                state.step += 1
            state.epoch += 1
            epochs_run += 1
            if on_epoch:
                on_epoch(state)
            if out and ((checkpoint_every and state.epoch % checkpoint_every == 0) or state.epoch == p.epochs):
                save_state(state, out / checkpoint_name(p.phase, state.epoch))
            if stop_after_epochs is not None and epochs_run >= stop_after_epochs:
                return state
    return state


# --- inference ----------------------------------------------------------------

@dataclass
class Prediction:
    g1_out: Raster
    g2_out: Raster | None
    final_mask: Raster


def _to_raster(t: torch.Tensor) -> Raster:
    arr = ((t[0].permute(1, 2, 0).numpy() + 1.0) / 2.0).clip(0.0, 1.0)
    return Raster(arr.astype(np.float32))


@torch.no_grad()
def predict(state: TrainState | None, satellite: Raster, encoding: MaskEncoding = MaskEncoding()) -> Prediction:
    """G1 (then G2 for G2G) on one 256x256 tile; the final mask is the
    binarized last generator output with contours folded into building."""
    if state is None or not state.nets:
        raise CheckpointError("predict needs trained parameters")
    gen_spec = state.specs[state.generator_names[0]]
    if (satellite.height, satellite.width, satellite.channels) != gen_spec.input_shape.as_tuple():
        raise ContractViolationError(f"satellite tile must be {gen_spec.input_shape.as_tuple()}")
    for net in state.nets.values():
        net.eval()
    x = torch.from_numpy(satellite.data * 2.0 - 1.0).permute(2, 0, 1)[None].float()
    if state.model == "pix2pix":
        out = state.nets["P2P_G"](x)
        return Prediction(_to_raster(out), None, binarize_prediction(out[0].permute(1, 2, 0).numpy(), encoding))
    fake1, taps = state.nets["G1"](x, return_taps=True)
    fake2 = state.nets["G2"](torch.cat([fake1, x], 1), taps={f"G1/{k}": v for k, v in taps.items()})
    mask = binarize_prediction(fake2[0].permute(1, 2, 0).numpy(), encoding)
    return Prediction(_to_raster(fake1), _to_raster(fake2), mask)


def g1_mask(pred: Prediction, encoding: MaskEncoding = MaskEncoding()) -> Raster:
    """Binarized first-generator output, for G1-only comparisons."""
    return binarize_prediction(pred.g1_out.data * 2.0 - 1.0, encoding)
