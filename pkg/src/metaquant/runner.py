"""Glue between a :class:`RunConfig`, the trainer, checkpoints and the run directory."""

from __future__ import annotations

import csv
import io
import json
import os

from .checkpoint import atomic_write, checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Dataset, build_dataset
from .errors import InputError
from .metanet import ArchConfig, MetaNet, QuantConfig
from .optim import LrSchedule
from .quantizer import FP_BITS
from .trainer import DistillConfig, SigmaSchedule, StageConfig, train_stage

METRIC_COLUMNS = ("stage", "epoch", "lr", "sigma", "loss", "acc_b2", "acc_b3", "acc_b4", "acc_rand")


def build_net(cfg: RunConfig, data: Dataset, bits=None) -> MetaNet:
    m = cfg.model
    _, c, h, w = data.x_train.shape
    if h != w:
        raise InputError(f"square images expected, got {h}x{w}")
    arch = ArchConfig(widths=tuple(m.widths), blocks_per_stage=m.blocks_per_stage, in_channels=c,
                      image_size=h, classes=data.classes, granularity=m.granularity)
    quant = QuantConfig(bits=tuple(bits or m.bits), n=m.n, mode=m.mode, tie_scales=m.tie_scales,
                        transitional_bn=m.transitional_bn, weight_bit_map=dict(m.weight_bit_map))
    return MetaNet(arch, quant, seed=m.init_seed)


def stage_config(cfg: RunConfig, stage: int, bit_set=None, epochs=None) -> StageConfig:
    t = cfg.train
    ep = epochs or t.epochs
    distill = None
    if cfg.distill.teacher != "none":
        distill = DistillConfig(cfg.distill.temperature, cfg.distill.weight)
    return StageConfig(
        stage=stage,
        epochs=ep,
        bit_set=tuple(bit_set or cfg.model.bits),
        batch_size=t.batch_size,
        schedule=LrSchedule(t.lr, min(t.warmup_epochs, ep - 1), ep),
        weight_decay=t.weight_decay,
        distill=distill,
        sigma=SigmaSchedule(cfg.stage3.k, cfg.stage3.ramp_end_epoch) if stage == 3 else None,
        seed=cfg.run.seed,
        eval_batch_size=t.eval_batch_size,
        eval_seed=cfg.run.seed,
    )


def clone(net: MetaNet) -> MetaNet:
    """Deep copy through the train-mode checkpoint encoding."""
    return parse_checkpoint(checkpoint_bytes(net)).net


def load_teacher(cfg: RunConfig) -> MetaNet | None:
    if cfg.distill.teacher == "none":
        return None
    if not cfg.distill.teacher_ckpt:
        raise InputError("distill.teacher is set but distill.teacher_ckpt is empty")
    return load_checkpoint(cfg.distill.teacher_ckpt).net


# -- metrics files ----------------------------------------------------------------


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in METRIC_COLUMNS])
    return buf.getvalue()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for r in rows:
        d = {}
        for k, v in r.items():
            if v == "":
                d[k] = None
            elif k in ("stage", "epoch"):
                d[k] = int(v)
            else:
                d[k] = float(v)
        out.append(d)
    return out


class RunDir:
    """Files of one run: config, per-stage checkpoints, metrics CSV and summary JSON."""

    def __init__(self, path):
        self.path = os.fspath(path)
        os.makedirs(self.path, exist_ok=True)

    def file(self, name):
        return os.path.join(self.path, name)

    def ckpt(self, stage: int):
        return self.file(f"stage{stage}.ckpt")

    @property
    def metrics_path(self):
        return self.file("metrics.csv")

    def write_metrics(self, stage: int, rows):
        """Replace the rows of ``stage`` and keep those of other stages."""
        old = read_metrics(self.metrics_path) if os.path.exists(self.metrics_path) else []
        keep = [r for r in old if r["stage"] != stage]
        merged = sorted(keep + list(rows), key=lambda r: (r["stage"], r["epoch"]))
        atomic_write(self.metrics_path, metrics_csv_text(merged).encode())
        summary = {}
        for r in merged:
            summary[f"stage{r['stage']}"] = {c: r.get(c) for c in METRIC_COLUMNS}
        atomic_write(self.file("summary.json"), (json.dumps(summary, indent=2, sort_keys=True) + "\n").encode())


def run_stage(cfg: RunConfig, stage: int, data: Dataset | None = None, resume: MetaNet | None = None,
              run_dir: RunDir | None = None, teacher: MetaNet | None = None, evaluate: bool = True):
    """Train one stage from ``resume`` (or a fresh network) and persist the results."""
    data = data or build_dataset(cfg.data)
    net = resume if resume is not None else build_net(cfg, data)
    if teacher is None:
        teacher = load_teacher(cfg)
    sc = stage_config(cfg, stage)
    rows = train_stage(net, data, sc, teacher=teacher, evaluate=evaluate)
    if run_dir is not None:
        cfg.save(run_dir.file("config.txt"))
        save_checkpoint(net, run_dir.ckpt(stage), "train", run_config=cfg.to_text())
        run_dir.write_metrics(stage, rows)
    return net, rows


def train_fp_baseline(cfg: RunConfig, data: Dataset, epochs: int):
    """Same architecture with the full-precision pass-through width only."""
    net = build_net(cfg, data, bits=(FP_BITS,))
    sc = stage_config(cfg, 1, bit_set=(FP_BITS,), epochs=epochs)
    rows = train_stage(net, data, sc)
    return net, rows


def run_pipeline(cfg: RunConfig, data: Dataset | None = None, run_dir: RunDir | None = None, stages=(1, 2, 3)):
    """Stages in order, each resuming from the previous; returns ``{stage: (net snapshot, rows)}``."""
    data = data or build_dataset(cfg.data)
    out = {}
    net = None
    for s in stages:
        net, rows = run_stage(cfg, s, data, resume=net, run_dir=run_dir)
        out[s] = (clone(net), rows)
    return out
