"""Three-stage training of the meta-network, distillation and evaluation protocols.

Stage 1 quantizes activations only, stage 2 weights and activations, both with
one bit-width shared by the whole network per iteration.  Stage 3 mixes
shared iterations (probability sigma) with iterations where every unit draws
its own bit-width; ``1 - sigma`` ramps linearly to ``k``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Dataset, iterate_batches
from .errors import InputError, ShapeError, StageOrderError, TrainingDiverged
from .metanet import MetaNet, sample_independent, sample_shared
from .optim import Adam, LrSchedule, lr_at
from .tensor import Tensor

log = logging.getLogger(__name__)

METRIC_BITS = (2, 3, 4)


@dataclass(frozen=True)
class SigmaSchedule:
    k: float = 0.75
    ramp_end_epoch: int = 8

    def __post_init__(self):
        if not 0 <= self.k < 1:
            raise InputError(f"k must lie in [0, 1), got {self.k}")

    def p_independent(self, epoch: float) -> float:
        """Probability ``1 - sigma`` of an independent per-unit draw."""
        if self.ramp_end_epoch <= 0:
            return self.k
        return self.k * min(1.0, epoch / self.ramp_end_epoch)

    def sigma(self, epoch: float) -> float:
        return 1.0 - self.p_independent(epoch)


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 2.0
    weight: float = 0.5


@dataclass
class StageConfig:
    stage: int
    epochs: int = 15
    bit_set: tuple = (2, 3, 4)
    batch_size: int = 128
    schedule: LrSchedule | None = None
    weight_decay: float = 1e-4
    distill: DistillConfig | None = None
    sigma: SigmaSchedule | None = None
    seed: int = 0
    eval_batch_size: int = 500
    eval_seed: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise InputError(f"stage must be 1, 2 or 3, got {self.stage}")
        if not self.bit_set:
            raise InputError("bit_set must be non-empty")
        if self.epochs < 1:
            raise InputError("epochs must be >= 1")
        if self.schedule is None:
            self.schedule = LrSchedule(1e-3, min(1, self.epochs - 1), self.epochs)
        if self.stage == 3 and self.sigma is None:
            self.sigma = SigmaSchedule()


def make_streams(seed: int):
    """Independent generators for data order, bit draws and the shared/independent coin."""
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(3)]


class BitSampler:
    """Per-iteration assignment source.

    The shared/independent coin comes from its own stream and is always drawn,
    so with ``p_independent == 0`` the bit stream matches a pure shared run.
    """

    def __init__(self, bit_set, n_units, bits_rng, coin_rng):
        self.bit_set = tuple(sorted(bit_set))
        self.n_units = n_units
        self.bits_rng = bits_rng
        self.coin_rng = coin_rng

    def draw(self, p_independent: float = 0.0):
        u = self.coin_rng.random()
        if u < p_independent:
            return sample_independent(self.bit_set, self.n_units, self.bits_rng), True
        return sample_shared(self.bit_set, self.n_units, self.bits_rng), False


# -- losses -------------------------------------------------------------------


def distill_loss(student_logits: Tensor, teacher_logits, labels, cfg: DistillConfig) -> Tensor:
    """``(1 - w) * CE(student, labels) + w * T^2 * KL(p_teacher || p_student)`` at temperature T."""
    teacher_logits = np.asarray(teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits)
    if teacher_logits.shape != student_logits.shape:
        raise ShapeError(f"teacher logits {teacher_logits.shape} vs student {student_logits.shape}")
    w, temp = cfg.weight, cfg.temperature
    ce = T.softmax_cross_entropy(student_logits, labels)
    if w == 0:
        return ce
    n = student_logits.shape[0]
    pt = T.softmax(teacher_logits.astype(np.float64) / temp)
    ent = float(np.sum(pt * np.log(np.maximum(pt, 1e-300)))) / n
    ls = T.log_softmax(T.mul(student_logits, 1.0 / temp))
    cross = T.mul(T.sum_(T.mask_mul(ls, pt.astype(student_logits.dtype))), -1.0 / n)
    kl = T.add(cross, ent)
    return T.add(T.mul(ce, 1.0 - w), T.mul(kl, w * temp * temp))


# -- evaluation -----------------------------------------------------------------


def _accuracy(net: MetaNet, x, y, assignment_fn: Callable[[int], tuple], batch_size: int) -> float:
    correct = 0
    with T.no_grad():
        for i, idx in enumerate(iterate_batches(len(y), batch_size, None)):
            logits = net.forward(Tensor._wrap(x[idx]), assignment_fn(i), training=False)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y[idx]))
    return 100.0 * correct / len(y)


def evaluate_assignment(net: MetaNet, data: Dataset, assignment, batch_size: int = 500) -> float:
    a = net.check_assignment(assignment)
    return _accuracy(net, data.x_test, data.y_test, lambda _: a, batch_size)


def evaluate_fixed(net: MetaNet, data: Dataset, b: int, batch_size: int = 500) -> float:
    """Top-1 accuracy (%) with every unit at bit-width ``b``."""
    return evaluate_assignment(net, data, net.constant(b), batch_size)


def evaluate_random(net: MetaNet, data: Dataset, bit_set, seed: int = 0, batch_size: int = 500) -> float:
    """Top-1 accuracy (%) with a fresh independent assignment per batch."""
    rng = np.random.default_rng(seed)
    bits = tuple(sorted(bit_set))
    return _accuracy(net, data.x_test, data.y_test,
                     lambda _: sample_independent(bits, net.num_units, rng), batch_size)


# -- training -----------------------------------------------------------------


def _check_order(net: MetaNet, stage: int):
    need = stage - 1
    if net.stage_completed < need:
        names = {1: "Stage I", 2: "Stage II"}
        raise StageOrderError(
            f"stage {stage} must resume from a {names[need]} checkpoint "
            f"(network has completed stage {net.stage_completed})"
        )


def _all_cells_ready(net: MetaNet) -> bool:
    return all(c.ready for t in net.tbn_layers() for c in t.cells.values())


def epoch_metrics(net: MetaNet, data: Dataset, cfg: StageConfig) -> dict:
    row = {}
    for b in METRIC_BITS:
        row[f"acc_b{b}"] = evaluate_fixed(net, data, b, cfg.eval_batch_size) if b in net.bits else None
    row["acc_rand"] = (
        evaluate_random(net, data, net.bits, cfg.eval_seed, cfg.eval_batch_size) if _all_cells_ready(net) else None
    )
    return row


def train_stage(net: MetaNet, data: Dataset, cfg: StageConfig, teacher: MetaNet | None = None,
                on_epoch: Callable[[dict], None] | None = None, evaluate: bool = True) -> list[dict]:
    """Run one training stage in place and return the per-epoch metric rows."""
    _check_order(net, cfg.stage)
    bad = [b for b in cfg.bit_set if b not in net.bits]
    if bad:
        raise InputError(f"bit_set {cfg.bit_set} includes widths {bad} the network was not built for")
    if cfg.distill is not None and teacher is None:
        raise InputError("distillation configured without a teacher network")
    net.weight_quant = cfg.stage >= 2
    if cfg.stage == 3:
        net.init_offdiagonal_cells()
    if teacher is not None:
        teacher.init_offdiagonal_cells()

    data_rng, bits_rng, coin_rng = make_streams(cfg.seed)
    sampler = BitSampler(cfg.bit_set, net.num_units, bits_rng, coin_rng)
    opt = Adam(net.named_parameters(), weight_decay=cfg.weight_decay)
    tape = T.get_tape()
    tape.clear()
    history = []
    it = 0
    n = len(data.y_train)
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg.schedule, epoch + 0.5)
        p_ind = cfg.sigma.p_independent(epoch) if cfg.stage == 3 else 0.0
        total, count, n_indep = 0.0, 0, 0
        for idx in iterate_batches(n, cfg.batch_size, data_rng):
            xb = data.x_train[idx]
            if data.hflip:
                flip = data_rng.random(len(idx)) < 0.5
                xb = xb.copy()
                xb[flip] = xb[flip][..., ::-1]
            yb = data.y_train[idx]
            assignment, indep = sampler.draw(p_ind)
            n_indep += indep
            logits = net.forward(Tensor._wrap(xb), assignment, training=True)
            if cfg.distill is not None:
                with T.no_grad():
                    t_assign = teacher.constant(32) if teacher.bits == (32,) else assignment
                    t_logits = teacher.forward(Tensor._wrap(xb), t_assign, training=False).data
                loss = distill_loss(logits, t_logits, yb, cfg.distill)
            else:
                loss = T.softmax_cross_entropy(logits, yb)
            lv = float(loss.data)
            if not math.isfinite(lv):
                tape.clear()
                raise TrainingDiverged(cfg.stage, it, lv)
            opt.zero_grad()
            T.backward(loss)
            tape.clear()
            opt.step(lr)
            net.clamp_scales()
            total += lv * len(idx)
            count += len(idx)
            it += 1
        row = {"stage": cfg.stage, "epoch": epoch, "lr": lr, "sigma": 1.0 - p_ind,
               "loss": total / count, "independent_iters": n_indep}
        if evaluate:
            row.update(epoch_metrics(net, data, cfg))
        log.info("stage %d epoch %d loss %.4f", cfg.stage, epoch, row["loss"])
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    net.stage_completed = max(net.stage_completed, cfg.stage)
    return history


def train_stage1(net, data, cfg: StageConfig, **kw):
    if cfg.stage != 1:
        raise InputError("train_stage1 needs a stage-1 config")
    return train_stage(net, data, cfg, **kw)


def train_stage2(net, data, cfg: StageConfig, **kw):
    if cfg.stage != 2:
        raise InputError("train_stage2 needs a stage-2 config")
    return train_stage(net, data, cfg, **kw)


def train_stage3(net, data, cfg: StageConfig, sigma: SigmaSchedule | None = None, **kw):
    if cfg.stage != 3:
        raise InputError("train_stage3 needs a stage-3 config")
    if sigma is not None:
        cfg.sigma = sigma
    return train_stage(net, data, cfg, **kw)


def tbn_variance_report(net: MetaNet, x: np.ndarray, bits=(2, 3, 4)) -> dict:
    """Mean per-channel variance of each TBN's input vs. output at constant bit-widths.

    Returns ``{b: (before, after)}`` averaged over channels and TBN layers.
    """
    tbns = net.tbn_layers()
    out = {}
    for b in bits:
        for t in tbns:
            t.probe = []
        with T.no_grad():
            net.forward(Tensor._wrap(x), net.constant(b), training=False)
        before, after = [], []
        for t in tbns:
            for _, xin, xout in t.probe:
                before.append(float(np.mean(np.var(xin, axis=(0, 2, 3), dtype=np.float64))))
                after.append(float(np.mean(np.var(xout, axis=(0, 2, 3), dtype=np.float64))))
            t.probe = None
        out[b] = (float(np.mean(before)), float(np.mean(after)))
    return out
