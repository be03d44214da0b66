"""Residual meta-network whose quantized layers take per-unit bit-widths at runtime."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import AssignmentError, ShapeError
from .layers import BatchNorm, BitContext, Conv2d, Linear, MixedPrecisionConv, Module, TransitionalBatchNorm
from .quantizer import SYMMETRIC
from .tensor import Tensor

PER_LAYER = "per_layer"
PER_BLOCK = "per_block"


@dataclass
class ArchConfig:
    widths: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    in_channels: int = 1
    image_size: int = 16
    classes: int = 10
    granularity: str = PER_LAYER


@dataclass
class QuantConfig:
    bits: tuple = (2, 3, 4)
    n: int = 4
    mode: str = SYMMETRIC
    tie_scales: bool = False
    transitional_bn: bool = True
    weight_bit_map: dict = field(default_factory=dict)


class BasicBlock(Module):
    def __init__(self, cin, cout, stride, qc: QuantConfig, rng, name):
        kw = dict(bits=qc.bits, n=qc.n, mode=qc.mode, tie_scales=qc.tie_scales,
                  weight_bit_map=qc.weight_bit_map, rng=rng)
        tb = dict(bits=qc.bits, transitional=qc.transitional_bn)
        self.conv1 = MixedPrecisionConv(cin, cout, 3, stride, 1, **kw)
        self.bn1 = TransitionalBatchNorm(cout, name=f"{name}.bn1", **tb)
        self.conv2 = MixedPrecisionConv(cout, cout, 3, 1, 1, **kw)
        self.bn2 = TransitionalBatchNorm(cout, name=f"{name}.bn2", **tb)
        if stride != 1 or cin != cout:
            self.down = MixedPrecisionConv(cin, cout, 1, stride, 0, **kw)
            self.down_bn = TransitionalBatchNorm(cout, name=f"{name}.down_bn", **tb)
        else:
            self.down = None
            self.down_bn = None

    def quantized_layers(self):
        return [c for c in (self.conv1, self.conv2, self.down) if c is not None]

    def forward(self, x, bits, incoming, quantize_weights, training):
        """``bits`` holds one width per quantized layer of this block, in order."""
        b1, b2 = bits[0], bits[1]
        i0 = b1 if incoming is None else incoming
        h = self.conv1.forward(x, b1, quantize_weights, training)
        h = T.relu(self.bn1.forward(h, BitContext(i0, b1), training))
        h = self.conv2.forward(h, b2, quantize_weights, training)
        h = self.bn2.forward(h, BitContext(b1, b2), training)
        if self.down is not None:
            bd = bits[2]
            id_in = bd if incoming is None else incoming
            sc = self.down.forward(x, bd, quantize_weights, training)
            sc = self.down_bn.forward(sc, BitContext(id_in, bd), training)
        else:
            sc = x
        return T.relu(T.add(h, sc)), b2


def stem_geometry(image_size: int, downsamples: int):
    """Stem kernel/padding making every stride-2 step integral.

    Stride-2 3x3 (pad 1) and 1x1 (pad 0) convolutions need odd extents, so the
    stem emits a size of the form ``2**downsamples * m + 1``: kernel 3 keeps an
    already-odd size, kernel 4 with pad 2 turns an even size into ``size + 1``.
    """
    k, p = (3, 1) if image_size % 2 else (4, 2)
    size = image_size + 2 * p - k + 1
    for _ in range(downsamples):
        if size % 2 == 0:
            raise ShapeError(f"image size {image_size} cannot be downsampled {downsamples} times integrally")
        size = (size - 1) // 2 + 1
    return k, p


class MetaNet(Module):
    """Stem -> stages of basic blocks -> global pool -> classifier.

    The stem and classifier stay full precision; every conv inside the blocks
    (including 1x1 downsampling) is a mixed-precision layer followed by a
    transitional batch norm.
    """

    def __init__(self, arch: ArchConfig | None = None, quant: QuantConfig | None = None, seed: int = 0):
        self.arch = arch = arch or ArchConfig()
        self.quant = quant = quant or QuantConfig()
        if arch.granularity not in (PER_LAYER, PER_BLOCK):
            raise AssignmentError(f"unknown granularity {arch.granularity!r}")
        rng = np.random.default_rng(seed)
        k, p = stem_geometry(arch.image_size, len(arch.widths) - 1)
        w0 = arch.widths[0]
        self.stem = Conv2d(arch.in_channels, w0, k, 1, p, rng=rng)
        self.stem_bn = BatchNorm(w0)
        blocks = []
        cin = w0
        for s, width in enumerate(arch.widths):
            for j in range(arch.blocks_per_stage):
                stride = 2 if (s > 0 and j == 0) else 1
                blocks.append(BasicBlock(cin, width, stride, quant, rng, f"blocks.{len(blocks)}"))
                cin = width
        self.blocks = blocks
        self.fc = Linear(cin, arch.classes, rng=rng)
        self.weight_quant = False
        self.stage_completed = 0

    # -- structure ---------------------------------------------------------
    @property
    def bits(self):
        return tuple(self.quant.bits)

    def quantized_layers(self) -> list[MixedPrecisionConv]:
        return [c for b in self.blocks for c in b.quantized_layers()]

    def tbn_layers(self) -> list[TransitionalBatchNorm]:
        return [m for m in self.modules() if isinstance(m, TransitionalBatchNorm)]

    @property
    def num_units(self) -> int:
        if self.arch.granularity == PER_BLOCK:
            return len(self.blocks)
        return len(self.quantized_layers())

    def unit_layers(self) -> list[list[MixedPrecisionConv]]:
        """Quantized layers grouped by independently assignable unit."""
        if self.arch.granularity == PER_BLOCK:
            return [b.quantized_layers() for b in self.blocks]
        return [[c] for c in self.quantized_layers()]

    def check_assignment(self, assignment: Sequence[int]) -> tuple:
        a = tuple(int(b) for b in assignment)
        if len(a) != self.num_units:
            raise AssignmentError(f"assignment has {len(a)} entries, network has {self.num_units} units")
        bad = [b for b in a if b not in self.bits]
        if bad:
            raise AssignmentError(f"bit-widths {bad} not in the configured set {self.bits}")
        return a

    def constant(self, b: int) -> tuple:
        return (b,) * self.num_units

    # -- forward -----------------------------------------------------------
    def forward(self, x, assignment: Sequence[int], training: bool = False) -> Tensor:
        a = self.check_assignment(assignment)
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 4 or x.shape[1] != self.arch.in_channels:
            raise ShapeError(f"expected N x {self.arch.in_channels} x H x W input, got {x.shape}")
        h = T.relu(self.stem_bn.forward(self.stem.forward(x), training))
        incoming = None
        pos = 0
        for blk in self.blocks:
            nl = len(blk.quantized_layers())
            if self.arch.granularity == PER_BLOCK:
                bits = (a[pos],) * nl
                pos += 1
            else:
                bits = a[pos:pos + nl]
                pos += nl
            h, incoming = blk.forward(h, bits, incoming, self.weight_quant, training)
        return self.fc.forward(T.flatten(T.global_avg_pool(h)))

    def __call__(self, x, assignment, training=False):
        return self.forward(x, assignment, training)

    # -- housekeeping ------------------------------------------------------
    def clamp_scales(self):
        for c in self.quantized_layers():
            c.clamp_scales()

    def init_offdiagonal_cells(self):
        for t in self.tbn_layers():
            t.init_offdiagonal_cells()

    def collapse_batchnorm(self, source_bit: int | None = None):
        """Ablation: one shared BN cell per layer, seeded from a diagonal cell."""
        src = max(b for b in self.bits) if source_bit is None else source_bit
        for t in self.tbn_layers():
            t.collapse(src)
        self.quant.transitional_bn = False

    def parameter_counts(self) -> dict:
        tbn = sum(t.param_count() for t in self.tbn_layers())
        total = sum(p.size for p in self.parameters())
        return {"total": total, "tbn": tbn, "tbn_fraction": tbn / total}


# -- bit sampling -------------------------------------------------------------


def sample_shared(bit_set, n_units: int, rng: np.random.Generator) -> tuple:
    """Constant assignment, bit drawn uniformly from ``bit_set``."""
    bits = sorted(bit_set)
    if not bits:
        raise AssignmentError("empty bit set")
    b = bits[int(rng.integers(len(bits)))]
    return (b,) * n_units


def sample_independent(bit_set, n_units: int, rng: np.random.Generator) -> tuple:
    """Each unit's bit drawn i.i.d. uniformly from ``bit_set``."""
    bits = sorted(bit_set)
    if not bits:
        raise AssignmentError("empty bit set")
    idx = rng.integers(len(bits), size=n_units)
    return tuple(bits[i] for i in idx)


def avg_bits(assignment) -> float:
    return float(np.mean(assignment))
