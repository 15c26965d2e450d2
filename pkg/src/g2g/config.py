"""Run configuration: one INI document, overridable from the command line."""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigurationError
from .raster import FULL_SCALE_GRID, TileGridSpec
from .training import G2G_NETS, P2P_NETS, ObjectiveConfig, PhasePlan

OUTPUT_ROOT_ENV = "G2G_OUTPUT_ROOT"

# Synthetic sources: 2029 -> 2028 -> 36 x 338 -> 256, same tile count and
# network resolution as the Orthofoto grid at a fraction of the pixels.
SYNTHETIC_GRID = TileGridSpec(2029, 2028, 338, 256, 6)


@dataclass
class RunConfig:
    data_root: str = "data"
    output_root: str = "runs"
    sources: str = "sources"
    checkpoint: str = ""
    grid: TileGridSpec = FULL_SCALE_GRID
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    phases: list[PhasePlan] = field(default_factory=lambda: [
        PhasePlan(1, 200, 1e-3, frozenset(G2G_NETS)),
        PhasePlan(2, 200, 1e-6, frozenset({"G2", "D2"})),
    ])
    pix2pix_phase: PhasePlan = PhasePlan(1, 200, 1e-3, frozenset(P2P_NETS))
    seed: int = 0
    model: str = "g2g"
    ngf: int = 64
    ndf: int = 64
    g2_skips: bool = True
    contour_width: int = 2
    split_counts: tuple[int, int, int] = (191, 21, 22)
    checkpoint_every: int = 10
    max_steps_per_epoch: int = 0
    workers: int = 1

    def resolved_output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ROOT_ENV) or self.output_root)

    def plan(self) -> list[PhasePlan]:
        return list(self.phases) if self.model == "g2g" else [self.pix2pix_phase]

    # --- serialization --------------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["paths"] = {"data_root": self.data_root, "output_root": self.output_root,
                       "sources": self.sources, "checkpoint": self.checkpoint}
        g = self.grid
        cp["grid"] = {"source_side": str(g.source_side), "trimmed_side": str(g.trimmed_side),
                      "tile_side": str(g.tile_side), "output_side": str(g.output_side), "grid_n": str(g.grid_n)}
        cp["dataset"] = {"split_counts": " ".join(map(str, self.split_counts)),
                         "contour_width": str(self.contour_width), "workers": str(self.workers)}
        o = self.objective
        cp["objective"] = {"lambda_l1": repr(o.lambda_l1), "real_label": repr(o.real_label),
                           "fake_label": repr(o.fake_label), "detach_g1": str(o.detach_g1).lower()}
        for p in self.phases:
            cp[f"phase{p.phase}"] = _phase_section(p)
        cp["pix2pix"] = _phase_section(self.pix2pix_phase)
        cp["run"] = {"model": self.model, "seed": str(self.seed), "ngf": str(self.ngf), "ndf": str(self.ndf),
                     "g2_skips": str(self.g2_skips).lower(), "checkpoint_every": str(self.checkpoint_every),
                     "max_steps_per_epoch": str(self.max_steps_per_epoch)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str, source: str = "<config>") -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text, source=source)
            cfg = cls()
            if cp.has_section("paths"):
                s = cp["paths"]
                cfg = replace(cfg, data_root=s.get("data_root", cfg.data_root),
                              output_root=s.get("output_root", cfg.output_root),
                              sources=s.get("sources", cfg.sources), checkpoint=s.get("checkpoint", cfg.checkpoint))
            if cp.has_section("grid"):
                s = cp["grid"]
                cfg.grid = TileGridSpec(*(s.getint(k) for k in
                                          ("source_side", "trimmed_side", "tile_side", "output_side", "grid_n")))
            if cp.has_section("dataset"):
                s = cp["dataset"]
                cfg.split_counts = tuple(int(v) for v in s.get("split_counts", "191 21 22").split())
                cfg.contour_width = s.getint("contour_width", cfg.contour_width)
                cfg.workers = s.getint("workers", cfg.workers)
            if cp.has_section("objective"):
                s = cp["objective"]
                cfg.objective = ObjectiveConfig(s.getfloat("lambda_l1", 100.0), s.getfloat("real_label", 1.0),
                                                s.getfloat("fake_label", 0.0), s.getboolean("detach_g1", False))
            phases = [_read_phase(cp[name]) for name in cp.sections()
                      if name.startswith("phase") and name[5:].isdigit()]
            if phases:
                cfg.phases = sorted(phases, key=lambda p: p.phase)
            if cp.has_section("pix2pix"):
                cfg.pix2pix_phase = _read_phase(cp["pix2pix"])
            if cp.has_section("run"):
                s = cp["run"]
                cfg.model = s.get("model", cfg.model)
                cfg.seed = s.getint("seed", cfg.seed)
                cfg.ngf = s.getint("ngf", cfg.ngf)
                cfg.ndf = s.getint("ndf", cfg.ndf)
                cfg.g2_skips = s.getboolean("g2_skips", cfg.g2_skips)
                cfg.checkpoint_every = s.getint("checkpoint_every", cfg.checkpoint_every)
                cfg.max_steps_per_epoch = s.getint("max_steps_per_epoch", cfg.max_steps_per_epoch)
        except (configparser.Error, ValueError, TypeError, KeyError) as exc:
            raise ConfigurationError(f"{source}: {exc}") from exc
        if len(cfg.split_counts) != 3:
            raise ConfigurationError(f"{source}: split_counts needs three integers")
        if cfg.model not in ("g2g", "pix2pix"):
            raise ConfigurationError(f"{source}: unknown model {cfg.model!r}")
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        return cls.from_ini(path.read_text(), source=str(path))

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini())


def _phase_section(p: PhasePlan) -> dict[str, str]:
    return {"phase": str(p.phase), "epochs": str(p.epochs), "learning_rate": repr(p.learning_rate),
            "trainable": " ".join(sorted(p.trainable))}


def _read_phase(s) -> PhasePlan:
    return PhasePlan(s.getint("phase"), s.getint("epochs"), s.getfloat("learning_rate"),
                     frozenset(s.get("trainable").split()))
