"""Declarative network specs for the G2G generators/discriminators and the
Pix2Pix baseline, their torch realization, and diagnostic probes."""

from __future__ import annotations

import hashlib
import itertools
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn

from .errors import CheckpointError, ContractViolationError, InvalidArgumentError

LEAKY_SLOPE = 0.2
INIT_STD = 0.02
SIDE = 256

KINDS = (
    "conv", "transposed-conv", "batch-norm", "leaky-relu", "relu", "tanh",
    "max-pool", "concat", "skip-source", "skip-sink",
)
PADDING_KINDS = ("conv", "transposed-conv", "max-pool")


@dataclass(frozen=True)
class TensorShape:
    height: int
    width: int
    channels: int

    def __post_init__(self):
        if min(self.height, self.width, self.channels) <= 0:
            raise ContractViolationError(f"non-positive tensor shape {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)


@dataclass(frozen=True)
class LayerSpec:
    """One layer. ``tag`` names the stash slot for skip-source/concat and
    the external tap (``"<network>/<tap>"``) for skip-sink; a skip-sink's
    ``out_channels`` is the width of the tap it merges."""

    kind: str
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    out_channels: int = 0
    negative_slope: float = 0.0
    tag: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown layer kind {self.kind!r}")
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise InvalidArgumentError(f"bad kernel/stride/padding in {self}")

    def describe(self) -> str:
        parts = [self.kind]
        if self.kind in PADDING_KINDS:
            parts.append(f"k{self.kernel} s{self.stride} p{self.padding}")
        if self.out_channels and self.kind != "skip-sink":
            parts.append(f"->{self.out_channels}")
        if self.kind == "leaky-relu":
            parts.append(f"slope={self.negative_slope}")
        if self.tag:
            parts.append(f"[{self.tag}]")
        return " ".join(parts)


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    input_shape: TensorShape
    output_shape: TensorShape
    exports: tuple[str, ...] = ()
    notes: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        shapes = trace_shapes(self, self.input_shape)
        if shapes[-1] != self.output_shape:
            raise ContractViolationError(
                f"{self.name}: layers produce {shapes[-1].as_tuple()}, declared {self.output_shape.as_tuple()}"
            )

    @property
    def is_discriminator(self) -> bool:
        return not any(l.kind == "tanh" for l in self.layers)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": self.input_shape.as_tuple(),
            "output_shape": self.output_shape.as_tuple(),
            "exports": list(self.exports),
            "layers": [asdict(l) for l in self.layers],
        }

    def spec_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def to_text(self) -> str:
        """Layer table with the traced output shape of every layer."""
        shapes = trace_shapes(self, self.input_shape)
        lines = [f"{self.name}: {self.input_shape.as_tuple()} -> {self.output_shape.as_tuple()}",
                 f"{'idx':>4}  {'layer':<42} {'output (h, w, c)'}"]
        lines.append(f"{'-':>4}  {'input':<42} {shapes[0].as_tuple()}")
        for i, (layer, shape) in enumerate(zip(self.layers, shapes[1:])):
            lines.append(f"{i:>4}  {layer.describe():<42} {shape.as_tuple()}")
        lines.append(f"parameters: {count_params(self):,}")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines) + "\n"


def conv_out(side: int, kernel: int, stride: int, padding: int = 0) -> int:
    return (side + 2 * padding - kernel) // stride + 1


def trace_shapes(spec: NetworkSpec, input_shape: TensorShape | tuple) -> list[TensorShape]:
    """Symbolic shape of the input followed by the output of each layer.

    Raises ContractViolationError naming the first layer whose shape rule
    fails.
    """
    if not isinstance(input_shape, TensorShape):
        input_shape = TensorShape(*input_shape)
    h, w, c = input_shape.as_tuple()
    stash: dict[str, tuple[int, int, int]] = {}
    out = [input_shape]
    prev = None
    for i, layer in enumerate(spec.layers):
        def fail(msg):
            raise ContractViolationError(f"{spec.name} layer {i} ({layer.describe()}): {msg}")

        k = layer.kind
        if k in ("conv", "max-pool"):
            h = conv_out(h, layer.kernel, layer.stride, layer.padding)
            w = conv_out(w, layer.kernel, layer.stride, layer.padding)
            if k == "conv":
                c = layer.out_channels
        elif k == "transposed-conv":
            h = (h - 1) * layer.stride - 2 * layer.padding + layer.kernel
            w = (w - 1) * layer.stride - 2 * layer.padding + layer.kernel
            c = layer.out_channels
        elif k == "batch-norm":
            if prev is not None and prev.kind not in ("conv", "transposed-conv"):
                fail("normalization must follow a convolution")
        elif k == "skip-source":
            stash[layer.tag] = (h, w, c)
        elif k == "concat":
            if layer.tag not in stash:
                fail(f"no skip-source {layer.tag!r} before this layer")
            sh, sw, sc = stash[layer.tag]
            if (sh, sw) != (h, w):
                fail(f"skip {layer.tag!r} is {sh}x{sw}, current tensor is {h}x{w}")
            c += sc
        elif k == "skip-sink":
            c += layer.out_channels
        if h <= 0 or w <= 0 or c <= 0:
            fail(f"non-positive output shape ({h}, {w}, {c})")
        out.append(TensorShape(h, w, c))
        prev = layer
    return out


def tap_shapes(spec: NetworkSpec) -> dict[str, TensorShape]:
    shapes = trace_shapes(spec, spec.input_shape)
    return {l.tag: shapes[i + 1] for i, l in enumerate(spec.layers)
            if l.kind == "skip-source" and l.tag in spec.exports}


def sink_shapes(spec: NetworkSpec) -> dict[str, TensorShape]:
    """Shape each skip-sink expects from its external tap."""
    shapes = trace_shapes(spec, spec.input_shape)
    out = {}
    for i, l in enumerate(spec.layers):
        if l.kind == "skip-sink":
            before = shapes[i]
            out[l.tag] = TensorShape(before.height, before.width, l.out_channels)
    return out


def count_params(spec: NetworkSpec) -> int:
    """Parameter count from layer shapes alone (conv/deconv weights + biases,
    normalization scale + shift)."""
    shapes = trace_shapes(spec, spec.input_shape)
    total = 0
    for i, l in enumerate(spec.layers):
        c_in = shapes[i].channels
        if l.kind in ("conv", "transposed-conv"):
            total += c_in * l.out_channels * l.kernel * l.kernel + l.out_channels
        elif l.kind == "batch-norm":
            total += 2 * c_in
    return total


def has_padding(spec: NetworkSpec) -> bool:
    return any(l.padding > 0 for l in spec.layers)


# --- builders -----------------------------------------------------------------

def _conv(out, k=4, s=2, p=0):
    return LayerSpec("conv", kernel=k, stride=s, padding=p, out_channels=out)


def _lrelu():
    return LayerSpec("leaky-relu", negative_slope=LEAKY_SLOPE)


def _unet(
    name: str,
    in_channels: int,
    out_channels: int,
    ngf: int,
    depth: int,
    side: int,
    max_mult: int,
    exports: Sequence[str] = (),
    sinks: dict[int, tuple[str, int]] | None = None,
) -> NetworkSpec:
    """Pix2Pix-style U-Net: stride-2 4x4 convs down to 1x1 and back up,
    encoder stage i concatenated onto the decoder stage of equal resolution.

    ``sinks`` maps an encoder level to an external (tap tag, channels) pair
    that is concatenated right after that level's internal skip.
    """
    if side != 2**depth:
        raise InvalidArgumentError(f"a depth-{depth} U-Net needs a {2**depth}px input, got {side}")
    sinks = sinks or {}
    widths = [ngf * min(2**i, max_mult) for i in range(depth)]
    layers: list[LayerSpec] = []
    for i, width in enumerate(widths):
        if i > 0:
            layers.append(_lrelu())
        layers.append(_conv(width, 4, 2, 1))
        if 0 < i < depth - 1:
            layers.append(LayerSpec("batch-norm"))
        if i < depth - 1:
            layers.append(LayerSpec("skip-source", tag=f"e{i}"))
    for level in range(depth - 2, -2, -1):
        layers.append(LayerSpec("relu"))
        width = widths[level] if level >= 0 else out_channels
        layers.append(LayerSpec("transposed-conv", kernel=4, stride=2, padding=1, out_channels=width))
        if level >= 0:
            layers.append(LayerSpec("batch-norm"))
            layers.append(LayerSpec("concat", tag=f"e{level}"))
            if level in sinks:
                tag, channels = sinks[level]
                layers.append(LayerSpec("skip-sink", tag=tag, out_channels=channels))
        else:
            layers.append(LayerSpec("tanh"))
    return NetworkSpec(
        name, tuple(layers), TensorShape(side, side, in_channels), TensorShape(side, side, out_channels),
        exports=tuple(exports),
    )


def build_g1(ngf: int = 64, depth: int = 8, side: int = SIDE, max_mult: int = 8) -> NetworkSpec:
    """First generator: satellite RGB -> building mask RGB. Exports its first
    two encoder stages (taps ``e0``, ``e1``) for the second generator."""
    return _unet("G1", 3, 3, ngf, depth, side, max_mult, exports=("e0", "e1"))


def build_g2(ngf: int = 64, depth: int = 8, side: int = SIDE, max_mult: int = 8, skips: bool = True) -> NetworkSpec:
    """Second generator: concat(G1 output, satellite) -> contour-overlay RGB.

    With ``skips`` the G1 taps are merged into the last two decoder stages.
    """
    sinks = {}
    if skips:
        sinks = {1: ("G1/e1", ngf * min(2, max_mult)), 0: ("G1/e0", ngf)}
    return _unet("G2", 6, 3, ngf, depth, side, max_mult, sinks=sinks)


_KERNEL_PREFERENCE = (4, 3, 5, 2, 1)
_STRIDE_PREFERENCE = (2, 1)


def solve_valid_stack(side: int, target: int, n_searchable: int, template) -> tuple[tuple[int, int], ...]:
    """Choose (kernel, stride) for ``n_searchable`` valid layers so that
    ``template(side, choices)`` lands on ``target``.

    Candidates are tried in increasing preference cost (4x4 kernels and
    stride 2 cheapest), ties broken by enumeration order.
    """
    options = [(k, s) for k in _KERNEL_PREFERENCE for s in _STRIDE_PREFERENCE]

    def cost(combo):
        return sum(_KERNEL_PREFERENCE.index(k) + _STRIDE_PREFERENCE.index(s) for k, s in combo)

    combos = sorted(itertools.product(options, repeat=n_searchable), key=cost)
    for combo in combos:
        if template(side, combo) == target:
            return combo
    raise ContractViolationError(f"no valid kernel/stride stack maps {side} to {target}")


def _valid_chain(side: int, steps: Sequence[tuple[int, int]]) -> int:
    for k, s in steps:
        side = conv_out(side, k, s)
        if side <= 0:
            return -1
    return side


_D_LEAD = ((4, 2), (4, 2), (4, 2))
_POOL = (2, 2)


def d1_geometry(side: int = SIDE) -> dict:
    """Kernel/stride plan for D1: three fixed 4x4/2 blocks, a searched fourth
    block, 2x2 max-pool, searched head conv; output 12x12."""
    def template(s, combo):
        (k4, s4), (kh, sh) = combo
        return _valid_chain(s, [*_D_LEAD, (k4, s4), _POOL, (kh, sh)])

    (b4, head) = solve_valid_stack(side, 12, 2, template)
    return {"lead": _D_LEAD, "block4": b4, "pool": _POOL, "head": head}


def d2_geometry(side: int = SIDE) -> dict:
    """D2 reuses D1's four leading blocks, then searches block5 (halved
    width), block6 and the head conv around a terminal 2x2 max-pool; output 4x4."""
    g1 = d1_geometry(side)
    lead = [*g1["lead"], g1["block4"]]

    def template(s, combo):
        b5, b6, head = combo
        return _valid_chain(s, [*lead, b5, b6, _POOL, head])

    b5, b6, head = solve_valid_stack(side, 4, 3, template)
    return {"lead": g1["lead"], "block4": g1["block4"], "block5": b5, "block6": b6, "pool": _POOL, "head": head}


def build_d1(ndf: int = 64, side: int = SIDE, in_channels: int = 6) -> NetworkSpec:
    """First discriminator. Input: concat(satellite, candidate mask)."""
    g = d1_geometry(side)
    layers = []
    for i, (k, s) in enumerate(g["lead"]):
        layers += [_conv(ndf * 2**i, k, s), LayerSpec("batch-norm"), _lrelu()]
    k, s = g["block4"]
    layers += [_conv(ndf * 8, k, s), LayerSpec("batch-norm")]
    layers += [LayerSpec("max-pool", kernel=g["pool"][0], stride=g["pool"][1])]
    k, s = g["head"]
    layers += [_conv(1, k, s)]
    notes = (f"geometry {g}",)
    return NetworkSpec("D1", tuple(layers), TensorShape(side, side, in_channels), TensorShape(12, 12, 1), notes=notes)


def build_d2(ndf: int = 64, side: int = SIDE, in_channels: int = 9) -> NetworkSpec:
    """Second discriminator. Input: concat(combined 6-channel G2 input,
    candidate overlay)."""
    g = d2_geometry(side)
    layers = []
    for i, (k, s) in enumerate(g["lead"]):
        layers += [_conv(ndf * 2**i, k, s), LayerSpec("batch-norm"), _lrelu()]
    k, s = g["block4"]
    layers += [_conv(ndf * 8, k, s), LayerSpec("batch-norm")]
    k, s = g["block5"]
    layers += [_conv(ndf * 4, k, s), LayerSpec("batch-norm"), _lrelu()]
    k, s = g["block6"]
    layers += [_conv(ndf * 4, k, s), LayerSpec("batch-norm"), _lrelu()]
    layers += [LayerSpec("max-pool", kernel=g["pool"][0], stride=g["pool"][1])]
    k, s = g["head"]
    layers += [_conv(1, k, s)]
    notes = (f"geometry {g}",)
    return NetworkSpec("D2", tuple(layers), TensorShape(side, side, in_channels), TensorShape(4, 4, 1), notes=notes)


def build_pix2pix_baseline(ngf: int = 64, ndf: int = 64) -> tuple[NetworkSpec, NetworkSpec]:
    """Original Pix2Pix: 8-level U-Net and the 70x70 PatchGAN (30x30 output)."""
    g = _unet("P2P_G", 3, 3, ngf, 8, SIDE, 8)
    layers = (
        _conv(ndf, 4, 2, 1), _lrelu(),
        _conv(ndf * 2, 4, 2, 1), LayerSpec("batch-norm"), _lrelu(),
        _conv(ndf * 4, 4, 2, 1), LayerSpec("batch-norm"), _lrelu(),
        _conv(ndf * 8, 4, 1, 1), LayerSpec("batch-norm"), _lrelu(),
        _conv(1, 4, 1, 1),
    )
    d = NetworkSpec("P2P_D", layers, TensorShape(SIDE, SIDE, 6), TensorShape(30, 30, 1))
    return g, d


def analytic_receptive_field(spec: NetworkSpec) -> int:
    """Receptive-field side of one output unit of a chain network via
    r <- r + (k - 1) * jump."""
    rf, jump = 1, 1
    for l in spec.layers:
        if l.kind in ("conv", "max-pool"):
            rf += (l.kernel - 1) * jump
            jump *= l.stride
        elif l.kind in ("transposed-conv", "concat", "skip-sink"):
            raise InvalidArgumentError("analytic receptive field needs a plain conv chain")
    return rf


# --- torch realization --------------------------------------------------------

def _norm(channels: int) -> nn.Module:
    # Per-sample statistics: equals batch norm at batch size 1 and keeps
    # inference independent of batch composition.
    return nn.InstanceNorm2d(channels, affine=True, track_running_stats=False)


class SpecNet(nn.Module):
    """A NetworkSpec compiled into torch modules, one slot per layer index."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        shapes = trace_shapes(spec, spec.input_shape)
        self.shapes = shapes
        mods = []
        for i, l in enumerate(spec.layers):
            c_in = shapes[i].channels
            if l.kind == "conv":
                mods.append(nn.Conv2d(c_in, l.out_channels, l.kernel, l.stride, l.padding))
            elif l.kind == "transposed-conv":
                mods.append(nn.ConvTranspose2d(c_in, l.out_channels, l.kernel, l.stride, l.padding))
            elif l.kind == "batch-norm":
                mods.append(_norm(c_in))
            elif l.kind == "leaky-relu":
                mods.append(nn.LeakyReLU(l.negative_slope))
            elif l.kind == "relu":
                mods.append(nn.ReLU())
            elif l.kind == "tanh":
                mods.append(nn.Tanh())
            elif l.kind == "max-pool":
                mods.append(nn.MaxPool2d(l.kernel, l.stride, l.padding))
            else:
                mods.append(nn.Identity())
        self.layers = nn.ModuleList(mods)

    def forward(self, x: torch.Tensor, taps: dict[str, torch.Tensor] | None = None, return_taps: bool = False):
        check_input(self.spec, x)
        stash: dict[str, torch.Tensor] = {}
        for i, (l, mod) in enumerate(zip(self.spec.layers, self.layers)):
            if l.kind == "skip-source":
                stash[l.tag] = x
            elif l.kind == "concat":
                x = torch.cat([x, stash[l.tag]], dim=1)
            elif l.kind == "skip-sink":
                if taps is None or l.tag not in taps:
                    raise ContractViolationError(f"{self.spec.name} layer {i}: missing external tap {l.tag!r}")
                tap = taps[l.tag]
                if tap.shape[1:] != (l.out_channels, x.shape[2], x.shape[3]):
                    raise ContractViolationError(
                        f"{self.spec.name} layer {i}: tap {l.tag!r} has shape {tuple(tap.shape[1:])}"
                    )
                x = torch.cat([x, tap], dim=1)
            else:
                x = mod(x)
        if return_taps:
            return x, {t: stash[t] for t in self.spec.exports}
        return x


def check_input(spec: NetworkSpec, x: torch.Tensor) -> None:
    if x.dim() != 4:
        raise ContractViolationError(f"{spec.name}: expected NCHW input, got {tuple(x.shape)}")
    got = TensorShape(x.shape[2], x.shape[3], x.shape[1]) if min(x.shape[1:]) > 0 else None
    if got == spec.input_shape:
        return
    if got is None:
        raise ContractViolationError(f"{spec.name} layer 0: empty input {tuple(x.shape)}")
    # locate the first layer that breaks with this input
    try:
        shapes = trace_shapes(spec, got)
    except ContractViolationError as exc:
        raise ContractViolationError(f"input {got.as_tuple()} != {spec.input_shape.as_tuple()}: {exc}") from None
    for i, l in enumerate(spec.layers):
        if l.kind in ("conv", "transposed-conv", "batch-norm"):
            raise ContractViolationError(
                f"{spec.name} layer {i} ({l.describe()}): input {got.as_tuple()} does not match "
                f"declared {spec.input_shape.as_tuple()}"
            )
    raise ContractViolationError(
        f"{spec.name}: input {got.as_tuple()} -> {shapes[-1].as_tuple()}, declared {spec.input_shape.as_tuple()}"
    )


def init_weights(net: nn.Module, generator: torch.Generator | None = None, std: float = INIT_STD) -> None:
    """Gaussian init: conv weights N(0, std), norm scales N(1, std), zero biases."""
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * std)
                m.bias.zero_()
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            with torch.no_grad():
                m.weight.copy_(1.0 + torch.randn(m.weight.shape, generator=generator) * std)
                m.bias.zero_()


@dataclass
class ModelParams:
    """Parameter tensors per network, keyed by torch state-dict names
    (``layers.<index>.<tensor>``)."""

    tensors: dict[str, dict[str, torch.Tensor]]
    version: int = 1
    phase: int = 0

    @classmethod
    def from_nets(cls, nets: dict[str, nn.Module], phase: int = 0) -> "ModelParams":
        return cls({name: {k: v.detach().clone() for k, v in net.state_dict().items()}
                    for name, net in nets.items()}, phase=phase)

    def by_layer(self, network: str) -> dict[int, dict[str, torch.Tensor]]:
        out: dict[int, dict[str, torch.Tensor]] = {}
        for key, value in self.tensors[network].items():
            _, idx, tensor = key.split(".")
            out.setdefault(int(idx), {})[tensor] = value
        return out

    def digest(self, network: str) -> str:
        h = hashlib.sha256()
        for key in sorted(self.tensors[network]):
            h.update(key.encode())
            h.update(self.tensors[network][key].detach().cpu().numpy().tobytes())
        return h.hexdigest()


def forward(spec: NetworkSpec, params: dict[str, torch.Tensor] | None, x: torch.Tensor, taps=None) -> torch.Tensor:
    """Evaluate ``spec`` with the given state-dict (``None`` -> all zeros)."""
    net = SpecNet(spec).to(x.dtype)
    if params is None:
        for p in net.parameters():
            nn.init.zeros_(p)
    else:
        net.load_state_dict(params)
    return net(x, taps=taps)


def network_digest(net: nn.Module) -> str:
    h = hashlib.sha256()
    for key, value in sorted(net.state_dict().items()):
        h.update(key.encode())
        h.update(value.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# --- receptive field ----------------------------------------------------------

def receptive_field_probe(
    spec: NetworkSpec,
    params: dict[str, torch.Tensor] | None,
    out_y: int,
    out_x: int,
) -> tuple[tuple[int, int], tuple[int, int]]:
    """Input rows/cols (inclusive bounds) that one output unit depends on.

    Measured from the gradient support of that unit. Normalization is
    replaced by identity (its statistics couple every pixel), max-pool by
    average pooling over the same window, and weights by their magnitudes
    (or ones without ``params``) so no path cancels.
    """
    out = spec.output_shape
    if not (0 <= out_y < out.height and 0 <= out_x < out.width):
        raise InvalidArgumentError(f"output unit ({out_y}, {out_x}) outside {out.height}x{out.width} grid")
    if any(l.kind in ("skip-sink",) for l in spec.layers):
        raise InvalidArgumentError("probe needs a self-contained network")
    net = SpecNet(spec).double()
    if params is not None:
        net.load_state_dict(params)
    with torch.no_grad():
        for i, (l, mod) in enumerate(zip(spec.layers, net.layers)):
            if l.kind == "batch-norm":
                net.layers[i] = nn.Identity()
            elif l.kind == "max-pool":
                net.layers[i] = nn.AvgPool2d(l.kernel, l.stride, l.padding)
            elif isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d)):
                if params is None:
                    mod.weight.fill_(1.0)
                else:
                    mod.weight.copy_(mod.weight.abs() + 1e-3)
                mod.bias.zero_()
    inp = spec.input_shape
    x = torch.ones(1, inp.channels, inp.height, inp.width, dtype=torch.float64, requires_grad=True)
    y = net(x)
    y[0, 0, out_y, out_x].backward()
    support = (x.grad[0] != 0).any(dim=0)
    rows = torch.nonzero(support.any(dim=1)).flatten()
    cols = torch.nonzero(support.any(dim=0)).flatten()
    return (int(rows.min()), int(rows.max())), (int(cols.min()), int(cols.max()))


def model_report(specs: Sequence[NetworkSpec]) -> str:
    """Layer tables plus measured receptive fields of the discriminators."""
    parts = []
    for spec in specs:
        parts.append(spec.to_text())
        if spec.is_discriminator:
            cy, cx = spec.output_shape.height // 2, spec.output_shape.width // 2
            (r0, r1), (c0, c1) = receptive_field_probe(spec, None, cy, cx)
            claim = {"D1": "28x28", "D2": "9x9", "P2P_D": "70x70"}.get(spec.name, "n/a")
            parts.append(
                f"receptive field of unit ({cy}, {cx}): rows {r0}-{r1}, cols {c0}-{c1} "
                f"= {r1 - r0 + 1}x{c1 - c0 + 1} px (quoted claim: {claim})\n"
            )
    return "\n".join(parts)


# --- checkpoints --------------------------------------------------------------

CHECKPOINT_VERSION = 1


def combined_spec_hash(specs: dict[str, NetworkSpec]) -> str:
    h = hashlib.sha256()
    for name in sorted(specs):
        h.update(name.encode())
        h.update(specs[name].spec_hash().encode())
    return h.hexdigest()


def save_checkpoint(path: str | Path, specs: dict[str, NetworkSpec], payload: dict) -> None:
    """Atomic write of ``payload`` tagged with the spec hash and format version."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"version": CHECKPOINT_VERSION, "spec_hash": combined_spec_hash(specs),
           "specs": {n: s.to_dict() for n, s in specs.items()}, **payload}
    tmp = path.with_name(path.name + ".tmp")
    try:
        torch.save(doc, tmp)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path, specs: dict[str, NetworkSpec] | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        doc = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    if specs is not None and doc.get("spec_hash") != combined_spec_hash(specs):
        raise CheckpointError(f"{path}: network spec hash mismatch; checkpoint was built for other networks")
    return doc
