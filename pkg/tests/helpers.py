"""Shared test utilities."""

import contextlib
import math
import time

import numpy as np

from metaquant import tensor as T
from metaquant.quantizer import ASYMMETRIC_ROUND, CLIP_SHARED, SYMMETRIC
from metaquant.tensor import Tensor

F32 = np.float32


def fd_grad(f, arrays, h=1e-3):
    """Central finite differences of scalar ``f(*arrays)`` with respect to each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f(*arrays)
            a[i] = old - h
            fm = f(*arrays)
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def check_grad(build, shapes, rng, rtol=1e-2, atol=1e-6, h=1e-3):
    """Compare tape gradients of ``build(*tensors) -> scalar`` to finite differences (float64)."""
    arrays = [rng.standard_normal(s) for s in shapes]

    def value(*arrs):
        with T.no_grad():
            return float(build(*[Tensor(a, dtype=np.float64) for a in arrs]).data)

    ts = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    out = build(*ts)
    T.backward(out)
    T.get_tape().clear()
    num = fd_grad(value, arrays, h)
    for t, g in zip(ts, num):
        got = np.zeros_like(g) if t.grad is None else t.grad
        np.testing.assert_allclose(got, g, rtol=rtol, atol=atol)


def toy_data(noise=0.6, per_class=64, classes=3, seed=5):
    """Small synthetic 5x5 dataset; train and test share the class prototypes."""
    from metaquant.config import DataConfig
    from metaquant.data import build_dataset

    dc = DataConfig(classes=classes, dim=5, noise=noise, seed=seed, train_per_class=per_class,
                    test_per_class=20, hflip=False)
    return build_dataset(dc)


def toy_net(bits=(2, 3, 4), classes=3, seed=0, tie_scales=False):
    """Two-stage, one-block-per-stage meta-net with five quantized layers."""
    from metaquant.metanet import ArchConfig, MetaNet, QuantConfig

    arch = ArchConfig(widths=(4, 8), blocks_per_stage=1, image_size=5, classes=classes)
    return MetaNet(arch, QuantConfig(bits=bits, tie_scales=tie_scales), seed=seed)


def stage_cfg(stage, epochs=3, bit_set=(2, 3, 4), **kw):
    from metaquant.optim import LrSchedule
    from metaquant.trainer import StageConfig

    kw.setdefault("schedule", LrSchedule(5e-3, 0, epochs))
    return StageConfig(stage=stage, epochs=epochs, bit_set=bit_set, batch_size=32, **kw)


def trained_toy_net(data, stages=(1, 2, 3), epochs=(12, 3, 3), **net_kw):
    from metaquant.trainer import train_stage

    net = toy_net(**net_kw)
    for s, e in zip(stages, epochs):
        train_stage(net, data, stage_cfg(s, epochs=e), evaluate=False)
    return net


# -- scalar quantizer references ---------------------------------------------------


def ref_code(x, alpha, b, mode, n=4):
    """Scalar reference written from the definitions, in float32 arithmetic."""
    y = F32(x) / F32(alpha)
    if b == 1:
        c = min(max(y, F32(-1)), F32(1))
        return 1 if c >= 0 else -1
    if mode == CLIP_SHARED:
        full = ref_code(x, alpha, n, SYMMETRIC, n)
        m = 2 ** (b - 1) - 1
        return min(max(full, -m), m)
    if mode == SYMMETRIC:
        lo, hi = -(2 ** (b - 1) - 1), 2 ** (b - 1) - 1
    else:
        lo, hi = -(2 ** (b - 1)), 2 ** (b - 1) - 1
    c = min(max(y, F32(lo)), F32(hi))
    if mode == ASYMMETRIC_ROUND:
        return int(math.floor(c + F32(0.5)))
    return int(math.floor(c))


def ref_backward(up, x, alpha, b, mode, numel, n=4):
    """Per-element (dx, dalpha contribution before normalization) and the normalizer."""
    y = F32(x) / F32(alpha)
    if b == 1:
        lo, hi = -1, 1
    elif mode in (SYMMETRIC, CLIP_SHARED):
        lo, hi = -(2 ** (b - 1) - 1), 2 ** (b - 1) - 1
    else:
        lo, hi = -(2 ** (b - 1)), 2 ** (b - 1) - 1
    eff = SYMMETRIC if mode == CLIP_SHARED else mode
    code = ref_code(x, alpha, b, eff, n)
    if lo < y < hi:
        return up, up * (code - y)
    return 0.0, up * code


def ref_normalizer(numel, b, mode):
    if b == 1:
        m = 1
    else:
        m = 2 ** (b - 1) - 1
    return 1.0 / math.sqrt(numel * m)


# -- dense Hessian oracle -----------------------------------------------------------


def _linear_toy(seed=0):
    """A trained 8 -> 5 quantized linear layer (40 weights), cast to float64."""
    from metaquant.layers import MixedPrecisionLinear
    from metaquant.optim import Adam

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((64, 8))
    y = rng.integers(0, 5, 64)
    lin = MixedPrecisionLinear(8, 5, bits=(4,), rng=rng)
    opt = Adam(lin.named_parameters())
    for _ in range(30):
        loss = T.softmax_cross_entropy(lin.forward(Tensor(x.astype(np.float32)), 4, training=True), y)
        opt.zero_grad()
        T.backward(loss)
        T.get_tape().clear()
        opt.step(0.01)
    lin.astype(np.float64)
    for s in (lin.a_scales, lin.w_scales):
        s.alpha[4].data = s.alpha[4].data.astype(np.float64)
    return lin, x, y


def fd_hessian(grad_fn, w, h=1e-5):
    """Dense Hessian by central differences of an analytic gradient, symmetrized."""
    n = w.size
    hess = np.zeros((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        hess[:, i] = (grad_fn(w + e.reshape(w.shape)) - grad_fn(w - e.reshape(w.shape))).ravel() / (2 * h)
    return 0.5 * (hess + hess.T)


def dense_hessian_check(quantize_weights: bool):
    """Return (power-iteration top eigenvalue, dense-eigensolver top eigenvalue) for the toy layer.

    With quantized weights the reference is ``M H(W~) M``: the plain Hessian at the
    quantized weights, masked to the weights inside the clip range.
    """
    from metaquant.quantizer import quant_forward
    from metaquant.subnet import HessianOperator, power_iteration

    lin, x, y = _linear_toy()
    xt = Tensor(x, dtype=np.float64)

    def loss_at(w, quantize):
        lin.weight.data = w.copy()
        return T.softmax_cross_entropy(lin.forward(xt, 4, quantize), y)

    def grad(w):
        (g,) = T.grad(loss_at(w, False), [lin.weight])
        T.get_tape().clear()
        return g.data

    w0 = lin.weight.data.copy()
    if quantize_weights:
        alpha = float(lin.w_scales.value(4))
        wq, _ = quant_forward(w0, alpha, 4)
        ratio = (w0 / alpha).ravel()
        mask = ((ratio > -7) & (ratio < 7)).astype(np.float64)
        dense = mask[:, None] * fd_hessian(grad, wq) * mask[None, :]
    else:
        dense = fd_hessian(grad, w0)
    ev = np.linalg.eigvalsh(dense)
    want = float(ev[np.argmax(np.abs(ev))])

    lin.weight.data = w0
    op = HessianOperator(lambda: loss_at(w0, quantize_weights), [lin.weight])
    r = power_iteration(op, op.shapes, iters=2000, tol=1e-12)
    op.release()
    return r.value, want


# -- acceptance reporting -------------------------------------------------------------

ACCEPTANCE_RESULTS = {}


class _Record:
    def __init__(self):
        self.detail = ""


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record PASS/FAIL for one acceptance criterion; the failure still propagates."""
    rec = _Record()
    t0 = time.perf_counter()
    try:
        yield rec
    except BaseException as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        ACCEPTANCE_RESULTS[number] = ("FAIL", title, f"{rec.detail} | {msg}".strip(" |"), time.perf_counter() - t0)
        raise
    ACCEPTANCE_RESULTS[number] = ("PASS", title, rec.detail, time.perf_counter() - t0)
