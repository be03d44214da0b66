"""Unified 1..n bit quantizer with learnable per-bit step sizes.

For ``b > 1`` a value is mapped to the integer code ``floor(clip(x/alpha, -m_b, m_b))``
with ``m_b = 2**(b-1) - 1``; for ``b == 1`` the code is the sign of the clipped
value (``sign(0) = +1``).  The dequantized output is ``alpha * code``.

Gradients follow the straight-through estimator for ``x`` and the LSQ step-size
surrogate for ``alpha``, scaled by ``1 / sqrt(numel * m_b)``.
"""

from __future__ import annotations

import math

import numpy as np

from . import _kernels
from .errors import NumericError, ParameterError, ShapeError
from .tensor import Tensor, custom_op, mask_mul, mul, sum_

FP_BITS = 32  # pass-through "bit-width": no quantization at all
SCALE_FLOOR = 1e-5

SYMMETRIC = "scale_symmetric_floor"
ASYMMETRIC = "asymmetric_floor"
ASYMMETRIC_ROUND = "asymmetric_round"
CLIP_SHARED = "clip_shared"
MODES = (SYMMETRIC, ASYMMETRIC, ASYMMETRIC_ROUND, CLIP_SHARED)


def _check_mode(mode):
    if mode not in MODES:
        raise ParameterError(f"unknown quantization mode {mode!r}; expected one of {MODES}")


def max_level(b: int, n: int = 4) -> int:
    """Largest code magnitude at bit-width ``b`` (1 for the sign codebook)."""
    if isinstance(b, bool) or not isinstance(b, (int, np.integer)) or not 1 <= b <= n:
        raise ParameterError(f"bit-width must be an integer in [1, {n}], got {b!r}")
    return 1 if b == 1 else 2 ** (b - 1) - 1


def code_range(b: int, mode: str = SYMMETRIC, n: int = 4) -> tuple[int, int]:
    """Inclusive integer code range emitted at bit-width ``b``."""
    _check_mode(mode)
    m = max_level(b, n)
    if b == 1:
        return -1, 1
    if mode in (ASYMMETRIC, ASYMMETRIC_ROUND):
        return -(2 ** (b - 1)), 2 ** (b - 1) - 1
    return -m, m


def grad_normalizer(numel: int, b: int, mode: str = SYMMETRIC, n: int = 4) -> float:
    _, hi = code_range(b, mode, n)
    return 1.0 / math.sqrt(numel * max(hi, 1))


def _rounding(b, mode):
    if b == 1:
        return _kernels.ROUND_SIGN
    return _kernels.ROUND_HALF_UP if mode == ASYMMETRIC_ROUND else _kernels.ROUND_FLOOR


def _validate(x: np.ndarray, alpha: float):
    if not alpha > 0:
        raise ParameterError(f"quantization scale must be positive, got {alpha}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite value passed to the quantizer")


def _kernel(x: np.ndarray, alpha: float, b: int, mode: str, n: int):
    lo, hi = code_range(b, mode, n)
    dt = x.dtype.type
    return _kernels.quantize(x, dt(alpha), dt(lo), dt(hi), _rounding(b, mode))


def quant_forward(x, alpha: float, b: int, mode: str = SYMMETRIC, n: int = 4):
    """Return ``(dequantized, integer_codes)`` for a plain array.

    ``clip_shared`` quantizes at width ``n`` first and clips the codes down to
    ``[-m_b, m_b]``; every other mode quantizes at ``b`` directly.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float32)
    _check_mode(mode)
    max_level(b, n)
    _validate(x, alpha)
    if mode == CLIP_SHARED:
        codes_n, _, _ = _kernel(x, alpha, n, SYMMETRIC, n)
        code = clip_codes(codes_n, b, n)
    else:
        code, _, _ = _kernel(x, alpha, b, mode, n)
    return code * x.dtype.type(alpha), code.astype(np.int8)


def quant_backward(upstream, x, alpha: float, b: int, mode: str = SYMMETRIC, n: int = 4):
    """Surrogate gradients ``(dx, dalpha)`` of ``alpha * code(x / alpha)``.

    ``dx`` passes ``upstream`` where ``x/alpha`` lies strictly inside the clip
    range and is zero elsewhere.  ``dalpha`` sums ``upstream * (code - x/alpha)``
    inside and ``upstream * code`` at saturation, times the LSQ normalizer.
    """
    upstream = np.asarray(upstream)
    x = np.asarray(x)
    if upstream.shape != x.shape:
        raise ShapeError(f"upstream {upstream.shape} does not match input {x.shape}")
    _check_mode(mode)
    _validate(x, alpha)
    eff = SYMMETRIC if mode == CLIP_SHARED else mode
    _, active, s = _kernel(x, alpha, b, eff, n)
    g = grad_normalizer(x.size, b, eff, n)
    dx = upstream * active
    dalpha = float(np.sum(upstream * s, dtype=np.float64)) * g
    return dx, dalpha


def quantize(x: Tensor, alpha: Tensor, b: int, mode: str = SYMMETRIC, n: int = 4) -> Tensor:
    """Tape-recording quantizer; ``alpha`` is a 0-d tensor (possibly derived)."""
    _check_mode(mode)
    a = float(alpha.data)
    _validate(x.data, a)
    eff = SYMMETRIC if mode == CLIP_SHARED else mode
    code, active, s = _kernel(x.data, a, b, eff, n)
    out = code * alpha.data.astype(x.dtype)
    g = grad_normalizer(x.size, b, eff, n)

    def bw(up):
        dx = mask_mul(up, active) if x.requires_grad else None
        da = None
        if alpha.requires_grad:
            da = mul(sum_(mask_mul(up, s)), g)
        return dx, da

    return custom_op(out, (x, alpha), bw)


def clip_codes(codes_n: np.ndarray, b: int, n: int = 4) -> np.ndarray:
    """Shrink ``n``-bit codes to ``b`` bits by clipping (sign for ``b == 1``)."""
    m = max_level(b, n)
    codes_n = np.asarray(codes_n)
    if b == 1:
        return np.where(codes_n >= 0, 1, -1).astype(codes_n.dtype)
    return np.clip(codes_n, -m, m)


def clip_quant_forward(codes_n: np.ndarray, alpha: float, b: int, n: int = 4) -> np.ndarray:
    """Dequantized ``b``-bit weights from shared ``n``-bit codes and one shared scale."""
    if b > n:
        raise ParameterError(f"target bit-width {b} exceeds the stored width {n}")
    if not alpha > 0:
        raise ParameterError(f"quantization scale must be positive, got {alpha}")
    return clip_codes(codes_n, b, n).astype(np.float32) * np.float32(alpha)


def derive_lower_bit_codes(codes: np.ndarray, b_from: int, tie_scales: bool = True, mode: str = SYMMETRIC, n: int = 4):
    """Codes at ``b_from - 1`` bits from codes at ``b_from`` bits, without real weights.

    Exact only when the scales are tied as ``alpha_b = 2 * alpha_(b+1)``: then
    ``floor(y/2) == floor(floor(y)/2)`` makes halving the integer codes equal to
    re-quantizing.  The step down to one bit keeps only the sign.
    """
    if not tie_scales:
        raise ParameterError(
            "lower-bit codes can only be derived when scales are tied (alpha_b = 2 * alpha_(b+1)); "
            "with freely learned scales the nesting is not exact"
        )
    if mode not in (SYMMETRIC, ASYMMETRIC):
        raise ParameterError(f"code nesting needs floor rounding; mode {mode!r} is not supported")
    if not 2 <= b_from <= n:
        raise ParameterError(f"cannot derive codes below bit-width {b_from}")
    codes = np.asarray(codes)
    b = b_from - 1
    if b == 1:
        return np.where(codes >= 0, 1, -1).astype(codes.dtype)
    lo, hi = code_range(b, mode, n)
    return np.clip(np.floor_divide(codes, 2), lo, hi).astype(codes.dtype)


def derive_codes(codes_n: np.ndarray, b: int, n: int = 4, mode: str = SYMMETRIC) -> np.ndarray:
    """Walk the nesting chain from ``n`` bits down to ``b`` bits."""
    codes = np.asarray(codes_n)
    for src in range(n, b, -1):
        codes = derive_lower_bit_codes(codes, src, True, mode, n)
    return codes


def init_scale(x: np.ndarray, b: int, mode: str = SYMMETRIC, n: int = 4) -> float:
    """LSQ-style initial step size ``2 * mean|x| / sqrt(m_b)``."""
    _, hi = code_range(b, mode, n)
    val = 2.0 * float(np.mean(np.abs(x), dtype=np.float64)) / math.sqrt(max(hi, 1))
    return max(val, SCALE_FLOOR)
