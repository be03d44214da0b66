"""Layer primitives: plain and mixed-precision conv/linear, batch-norm grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ParameterError, ShapeError, UninitializedCellError
from .quantizer import (
    CLIP_SHARED,
    FP_BITS,
    SCALE_FLOOR,
    SYMMETRIC,
    derive_codes,
    init_scale,
    max_level,
    quant_forward,
    quantize,
)
from .tensor import Tensor


class Module:
    """Minimal container: named parameters and buffers by attribute walk."""

    training = True

    def _children(self):
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{name}.{i}", v

    def _own_params(self):
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val

    def _own_buffers(self):
        return iter(())

    def named_parameters(self, prefix: str = ""):
        for name, p in self._own_params():
            yield prefix + name, p
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self._own_buffers():
            yield prefix + name, b
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, child in self._children():
            yield from child.named_modules(f"{prefix}{name}.")

    def load_buffer(self, name: str, value: np.ndarray):
        raise KeyError(f"{type(self).__name__} has no buffer {name!r}")

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Cast every parameter and float buffer in place (used by float64 oracles)."""
        for m in self.modules():
            m._cast(dtype)
        return self

    def _cast(self, dtype):
        for _, p in self._own_params():
            p.data = p.data.astype(dtype)


def kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv2d(Module):
    """Full-precision convolution (stem)."""

    def __init__(self, cin, cout, k, stride=1, padding=0, rng=None):
        rng = rng or np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        self.weight = Tensor(kaiming(rng, (cout, cin, k, k), cin * k * k), requires_grad=True)

    def forward(self, x):
        return T.conv2d(x, self.weight, self.stride, self.padding)


class Linear(Module):
    """Full-precision affine layer (classifier)."""

    def __init__(self, fin, fout, rng=None):
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(fin)
        self.weight = Tensor(rng.uniform(-bound, bound, (fout, fin)).astype(np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(fout, np.float32), requires_grad=True)

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


# -- quantization scales --------------------------------------------------


class ScaleSet(Module):
    """Learnable step sizes, one per bit-width.

    ``tied``: only the top-width scale is a parameter and lower widths use
    ``alpha_n * 2**(n - b)``.  ``shared``: one scale for every width (the
    clip-based scheme).  Scales are initialized lazily from the first tensor
    quantized at that width.
    """

    def __init__(self, bits, n=4, mode=SYMMETRIC, tied=False):
        self.bits = sorted(b for b in bits if b != FP_BITS)
        self.n, self.mode = n, mode
        self.tied = tied
        self.shared = mode == CLIP_SHARED
        self.keys = [n] if (tied or self.shared) else list(self.bits)
        self.alpha = {b: Tensor(np.float32(1.0), requires_grad=True) for b in self.keys}
        self.ready = {b: False for b in self.keys}

    def _own_params(self):
        for b in self.keys:
            yield f"alpha_b{b}", self.alpha[b]

    def _own_buffers(self):
        for b in self.keys:
            yield f"ready_b{b}", np.array(self.ready[b], dtype=np.uint8)

    def load_buffer(self, name, value):
        k = int(name.removeprefix("ready_b"))
        if k not in self.ready:
            raise KeyError(name)
        self.ready[k] = bool(value)

    def _cast(self, dtype):
        for p in self.alpha.values():
            p.data = p.data.astype(dtype)

    def key(self, b):
        return self.keys[0] if len(self.keys) == 1 and (self.tied or self.shared) else b

    def maybe_init(self, b, x: np.ndarray):
        k = self.key(b)
        if not self.ready[k]:
            mode = SYMMETRIC if self.shared else self.mode
            self.alpha[k].data[...] = init_scale(x, k, mode, self.n)
            self.ready[k] = True

    def get(self, b) -> Tensor:
        k = self.key(b)
        if k not in self.alpha:
            raise ParameterError(f"no scale for bit-width {b}")
        a = self.alpha[k]
        if self.tied and b != self.n:
            return T.mul(a, float(2 ** (self.n - b)))
        return a

    def value(self, b) -> np.ndarray:
        """The float32 scale that ``get(b)`` would produce, without recording."""
        with T.no_grad():
            return self.get(b).data

    def clamp(self):
        for a in self.alpha.values():
            np.maximum(a.data, SCALE_FLOOR, out=a.data)


# -- mixed precision layers -------------------------------------------------


class _MixedBase(Module):
    """Shared-weight layer with runtime-selectable bit-width.

    One real weight tensor backs every bit-width.  ``weight_bit_map`` lets a
    logical bit-width use a different weight width (e.g. 2 -> 1 for ternary
    activations with binary weights).
    """

    def _setup(self, bits, n, mode, tie_scales, weight_bit_map):
        for b in bits:
            if b != FP_BITS:
                max_level(b, n)
        self.bits = tuple(bits)
        self.n, self.mode = n, mode
        self.tie_scales = tie_scales
        self.weight_bit_map = dict(weight_bit_map or {})
        wbits = {self.weight_bit_map.get(b, b) for b in bits}
        self.w_scales = ScaleSet(wbits, n, mode, tied=tie_scales)
        self.a_scales = ScaleSet(bits, n, mode, tied=False)
        self.codes = None  # deploy mode: {bit: int8 codes}

    @property
    def deployed(self):
        return self.codes is not None

    def _check_bit(self, b):
        if b not in self.bits:
            raise ParameterError(f"bit-width {b} not available; layer supports {self.bits}")

    def quant_act(self, x: Tensor, b: int, training: bool) -> Tensor:
        if b == FP_BITS:
            return x
        if training or not self.a_scales.ready[self.a_scales.key(b)]:
            self.a_scales.maybe_init(b, x.data)
        return quantize(x, self.a_scales.get(b), b, self.mode, self.n)

    def quant_weight(self, b: int, quantize_weights: bool) -> Tensor:
        if self.deployed:
            return self._weight_from_codes(b)
        if b == FP_BITS or not quantize_weights:
            return self.weight
        wb = self.weight_bit_map.get(b, b)
        self.w_scales.maybe_init(wb, self.weight.data)
        return quantize(self.weight, self.w_scales.get(wb), wb, self.mode, self.n)

    def weight_codes(self, b: int) -> np.ndarray:
        """Integer weight codes at logical bit-width ``b`` (export path)."""
        wb = self.weight_bit_map.get(b, b)
        if self.deployed:
            return self._codes_at(wb)
        alpha = float(self.w_scales.value(wb))
        _, codes = quant_forward(self.weight.data, alpha, wb, self.mode, self.n)
        return codes

    def _codes_at(self, wb):
        if wb in self.codes:
            return self.codes[wb]
        if not self.tie_scales:
            raise ParameterError(f"deployed layer has no stored codes for {wb} bits")
        c = derive_codes(self.codes[self.n], wb, self.n, SYMMETRIC if self.mode == CLIP_SHARED else self.mode)
        self.codes[wb] = c
        return c

    def _weight_from_codes(self, b):
        if b == FP_BITS:
            raise ParameterError("a deployed layer has no full-precision weights")
        wb = self.weight_bit_map.get(b, b)
        codes = self._codes_at(wb)
        alpha = self.w_scales.value(wb)
        return Tensor._wrap(codes.astype(alpha.dtype) * alpha)

    def clamp_scales(self):
        self.w_scales.clamp()
        self.a_scales.clamp()

    def _own_params(self):
        w = vars(self).get("weight")
        if isinstance(w, Tensor) and w.requires_grad:
            yield "weight", w


class MixedPrecisionConv(_MixedBase):
    def __init__(self, cin, cout, k, stride=1, padding=0, bits=(2, 3, 4), n=4, mode=SYMMETRIC,
                 tie_scales=False, weight_bit_map=None, rng=None):
        rng = rng or np.random.default_rng(0)
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.padding = stride, padding
        self.weight = Tensor(kaiming(rng, (cout, cin, k, k), cin * k * k), requires_grad=True)
        self._setup(bits, n, mode, tie_scales, weight_bit_map)

    @property
    def weight_shape(self):
        return (self.cout, self.cin, self.k, self.k)

    def forward(self, x: Tensor, b: int, quantize_weights: bool = True, training: bool = False) -> Tensor:
        self._check_bit(b)
        xq = self.quant_act(x, b, training)
        w = self.quant_weight(b, quantize_weights)
        return T.conv2d(xq, w, self.stride, self.padding)


class MixedPrecisionLinear(_MixedBase):
    def __init__(self, fin, fout, bits=(2, 3, 4), n=4, mode=SYMMETRIC, tie_scales=False,
                 weight_bit_map=None, bias=True, rng=None):
        rng = rng or np.random.default_rng(0)
        self.fin, self.fout = fin, fout
        self.weight = Tensor(kaiming(rng, (fout, fin), fin), requires_grad=True)
        self.bias = Tensor(np.zeros(fout, np.float32), requires_grad=True) if bias else None
        self._setup(bits, n, mode, tie_scales, weight_bit_map)

    @property
    def weight_shape(self):
        return (self.fout, self.fin)

    def _own_params(self):
        yield from super()._own_params()
        if self.bias is not None:
            yield "bias", self.bias

    def forward(self, x: Tensor, b: int, quantize_weights: bool = True, training: bool = False) -> Tensor:
        self._check_bit(b)
        xq = self.quant_act(x, b, training)
        w = self.quant_weight(b, quantize_weights)
        return T.linear(xq, w, self.bias)


# -- batch norm ------------------------------------------------------------


@dataclass(frozen=True)
class BitContext:
    incoming: int
    current: int


class _Cell:
    __slots__ = ("gamma", "beta", "mean", "var", "ready")

    def __init__(self, c, ready):
        self.gamma = Tensor(np.ones(c, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(c, np.float32), requires_grad=True)
        self.mean = np.zeros(c, np.float32)
        self.var = np.ones(c, np.float32)
        self.ready = ready

    def copy_from(self, other: "_Cell"):
        self.gamma.data = other.gamma.data.copy()
        self.beta.data = other.beta.data.copy()
        self.mean = other.mean.copy()
        self.var = other.var.copy()
        self.ready = other.ready


def batch_norm(x: Tensor, cell: _Cell, training: bool, momentum: float, eps: float) -> Tensor:
    """Per-channel normalization of NCHW (or NC) input with one cell's parameters."""
    bshape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    if training:
        count = x.size // x.shape[1]
        out, bm, var = T.batch_norm_train(x, cell.gamma, cell.beta, eps)
        bv = var * (count / max(count - 1, 1))
        cell.mean = ((1.0 - momentum) * cell.mean + momentum * bm).astype(cell.mean.dtype)
        cell.var = ((1.0 - momentum) * cell.var + momentum * bv).astype(cell.var.dtype)
        cell.ready = True
        return out
    else:
        inv = (1.0 / np.sqrt(cell.var + eps)).astype(x.dtype)
        shift = Tensor._wrap(cell.mean.reshape(bshape).astype(x.dtype))
        xhat = T.mask_mul(T.sub(x, shift), inv.reshape(bshape))
    g = T.reshape(cell.gamma, bshape)
    b = T.reshape(cell.beta, bshape)
    return T.add(T.mul(xhat, g), b)


class BatchNorm(Module):
    """Ordinary batch norm (one cell), used after the full-precision stem."""

    def __init__(self, c, momentum=0.1, eps=1e-5):
        self.c, self.momentum, self.eps = c, momentum, eps
        self.cell = _Cell(c, True)

    def _own_params(self):
        yield "gamma", self.cell.gamma
        yield "beta", self.cell.beta

    def _own_buffers(self):
        yield "running_mean", self.cell.mean
        yield "running_var", self.cell.var

    def load_buffer(self, name, value):
        if name == "running_mean":
            self.cell.mean = value.astype(np.float32)
        elif name == "running_var":
            self.cell.var = value.astype(np.float32)
        else:
            raise KeyError(name)

    def _cast(self, dtype):
        for t in (self.cell.gamma, self.cell.beta):
            t.data = t.data.astype(dtype)

    def forward(self, x, training=False):
        return batch_norm(x, self.cell, training, self.momentum, self.eps)


class TransitionalBatchNorm(Module):
    """Grid of batch-norm cells keyed by (incoming bit, current bit).

    With ``transitional=False`` the grid collapses to a single cell shared by
    every context (the ablation baseline).  Diagonal cells start usable;
    off-diagonal cells must be trained or copied in before evaluation.
    """

    def __init__(self, c, bits=(2, 3, 4), transitional=True, momentum=0.1, eps=1e-5, name=""):
        self.c, self.momentum, self.eps = c, momentum, eps
        self.bits = tuple(bits)
        self.transitional = transitional
        self.name = name
        self.probe = None
        if transitional:
            self.cells = {(i, j): _Cell(c, i == j) for i in self.bits for j in self.bits}
        else:
            self.cells = {(0, 0): _Cell(c, True)}

    def key(self, ctx: BitContext):
        if not self.transitional:
            return (0, 0)
        key = (ctx.incoming, ctx.current)
        if key not in self.cells:
            raise ParameterError(f"bit context {key} outside the grid {self.bits}")
        return key

    def cell(self, ctx: BitContext) -> _Cell:
        return self.cells[self.key(ctx)]

    @staticmethod
    def _tag(key):
        return f"{key[0]}_{key[1]}"

    def _own_params(self):
        for key, cell in self.cells.items():
            yield f"gamma.{self._tag(key)}", cell.gamma
            yield f"beta.{self._tag(key)}", cell.beta

    def _own_buffers(self):
        for key, cell in self.cells.items():
            t = self._tag(key)
            yield f"running_mean.{t}", cell.mean
            yield f"running_var.{t}", cell.var
            yield f"ready.{t}", np.array(cell.ready, dtype=np.uint8)

    def load_buffer(self, name, value):
        kind, _, tag = name.partition(".")
        i, _, j = tag.partition("_")
        cell = self.cells[(int(i), int(j))]
        if kind == "running_mean":
            cell.mean = value.astype(np.float32)
        elif kind == "running_var":
            cell.var = value.astype(np.float32)
        elif kind == "ready":
            cell.ready = bool(value)
        else:
            raise KeyError(name)

    def _cast(self, dtype):
        for cell in self.cells.values():
            cell.gamma.data = cell.gamma.data.astype(dtype)
            cell.beta.data = cell.beta.data.astype(dtype)

    def forward(self, x: Tensor, ctx: BitContext, training: bool = False) -> Tensor:
        if x.shape[1] != self.c:
            raise ShapeError(f"expected {self.c} channels, got {x.shape[1]}")
        key = self.key(ctx)
        cell = self.cells[key]
        if not training and not cell.ready:
            raise UninitializedCellError(self.name, key)
        out = batch_norm(x, cell, training, self.momentum, self.eps)
        if self.probe is not None:
            self.probe.append((key, x.data.copy(), out.data.copy()))
        return out

    def init_offdiagonal_cells(self):
        """Copy cell (j, j) into every (i, j), i != j."""
        if not self.transitional:
            return
        for (i, j), cell in self.cells.items():
            if i != j:
                cell.copy_from(self.cells[(j, j)])

    def collapse(self, source_bit: int):
        """Replace the grid by one shared cell copied from (source_bit, source_bit)."""
        src = self.cells[(source_bit, source_bit)] if self.transitional else self.cells[(0, 0)]
        cell = _Cell(self.c, True)
        cell.copy_from(src)
        self.cells = {(0, 0): cell}
        self.transitional = False

    def param_count(self):
        return 2 * self.c * len(self.cells)
