"""Optimizers and the training loop.

One iteration of the symmetrized recipe runs, in order: view augmentation,
worker partitioning, the two-view loss with lazily updated teacher BN, one
backward pass over the summed loss, the optimizer step at the scheduled
learning rate, the single per-iteration history commit at the scheduled
blend coefficient, and finally the teacher weight EMA. The contrastive
mode swaps in a single-view InfoNCE loss, a fixed blend coefficient, a
constant weight-EMA coefficient, and a negatives-queue update.

``sec_per_iter`` in the metrics is a deterministic cost model (local
compute plus what the cross-worker BN traffic would cost at nominal
latency/bandwidth), not a measurement; measured wall time rides along in
the record but stays out of the CSV so that identical runs produce
byte-identical metrics.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import engine
from .config import TrainConfig
from .data import Dataset, make_views, synth_clusters, load_idx
from .engine import HEALTH, Tensor, backward, record
from .model import (
    StudentTeacherPair,
    build_pair,
    commit_teacher_bn,
    default_encoder_spec,
    default_predictor_spec,
    default_projector_spec,
    dump_teacher,
    ema_update,
    forward_student,
    forward_teacher,
)
from .normalization import WorkerLayout, comm_bytes
from .objectives import NegQueue, infonce_loss, queue_update, symmetrized_loss
from .schedules import ScheduleSpec, lr_at, schedule_value, apply_linear_scaling
from .seeding import substream, substream_int

# Nominal hardware model for the deterministic cost column.
NOMINAL_FLOPS_PER_SEC = 2e9
NOMINAL_BANDWIDTH_BYTES = 1e9
NOMINAL_COLLECTIVE_LATENCY = 1e-3


@dataclass
class Param:
    name: str
    tensor: Tensor
    exclude: bool  # bias or BN affine: out of LARS adaptation / wd filtering


@dataclass
class OptimizerState:
    kind: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    trust_coeff: float = 0.001
    wd_exclude: bool = False
    buffers: dict = field(default_factory=dict)

    def buffer_for(self, p: Param) -> np.ndarray:
        if p.name not in self.buffers:
            self.buffers[p.name] = np.zeros_like(p.tensor.values)
        return self.buffers[p.name]


def sgd_step(params: list[Param], grads: list[np.ndarray],
             state: OptimizerState, lr: float) -> None:
    """Momentum SGD: buf <- momentum * buf + (g + wd * w); w <- w - lr * buf.

    Weight decay skips excluded parameters when the state says so.
    """
    for p, g in zip(params, grads):
        if g.shape != p.tensor.values.shape:
            raise engine.DimensionError(
                f"{p.name}: gradient shape {g.shape} != parameter shape "
                f"{p.tensor.values.shape}")
        wd = 0.0 if (p.exclude and state.wd_exclude) else state.weight_decay
        d = g + wd * p.tensor.values
        buf = state.buffer_for(p)
        buf *= state.momentum
        buf += d
        p.tensor.values = p.tensor.values - lr * buf


def lars_step(params: list[Param], grads: list[np.ndarray],
              state: OptimizerState, lr: float) -> None:
    """Layer-wise adaptive scaling with trust coefficient.

    Non-excluded blocks scale their update direction by
    trust * ||w|| / (||g + wd w|| + 1e-9); excluded blocks (biases, BN
    affines) take the plain momentum update with no weight decay.
    """
    for p, g in zip(params, grads):
        if g.shape != p.tensor.values.shape:
            raise engine.DimensionError(
                f"{p.name}: gradient shape {g.shape} != parameter shape "
                f"{p.tensor.values.shape}")
        buf = state.buffer_for(p)
        if p.exclude:
            d = g
        else:
            d = g + state.weight_decay * p.tensor.values
            w_norm = float(np.linalg.norm(p.tensor.values))
            d_norm = float(np.linalg.norm(d))
            local = state.trust_coeff * w_norm / (d_norm + 1e-9)
            d = local * d
        buf *= state.momentum
        buf += d
        p.tensor.values = p.tensor.values - lr * buf


@dataclass
class MetricsRecord:
    iteration: int
    epoch: int
    loss: float
    l1: float
    l2: float
    lr: float
    m: float
    alpha: float
    hist_drift: float
    sec_per_iter: float
    wall_time: float = 0.0

    CSV_FIELDS = ("iter", "epoch", "loss", "L1", "L2", "lr", "m", "alpha",
                  "hist_drift", "sec_per_iter")

    def csv_row(self) -> str:
        cells = [str(self.iteration), str(self.epoch)]
        for v in (self.loss, self.l1, self.l2, self.lr, self.m, self.alpha,
                  self.hist_drift, self.sec_per_iter):
            cells.append(f"{v:.17g}")
        return ",".join(cells)


class NanLossError(RuntimeError):
    """Training hit a non-finite loss; carries the diagnostic record and any
    metrics collected before the abort."""

    def __init__(self, message: str, diagnostic: MetricsRecord,
                 metrics: Optional[list] = None):
        super().__init__(message)
        self.diagnostic = diagnostic
        self.metrics = metrics or []


@dataclass
class TrainResult:
    payload: dict
    metrics: list
    config: TrainConfig
    health: dict
    dataset: Dataset


def build_dataset(cfg: TrainConfig) -> Dataset:
    d = cfg.data
    if d.kind == "synthetic":
        return synth_clusters(d.num_classes, d.dim, d.per_class, d.spread,
                              seed=substream_int(cfg.seed, "data"))
    return load_idx(d.images_path, d.labels_path)


def build_model(cfg: TrainConfig, in_dim: int) -> StudentTeacherPair:
    student_bn, teacher_bn = cfg.resolved_bn()
    enc = cfg.encoder or default_encoder_spec(in_dim)
    proj = cfg.projector or default_projector_spec(enc.out_dim)
    pred = cfg.predictor or default_predictor_spec(proj.out_dim)
    rng = substream(cfg.seed, "init")
    return build_pair(enc, proj, pred, rng, student_bn=student_bn,
                      teacher_bn=teacher_bn, eps=cfg.eps,
                      alpha_semantics=cfg.alpha_semantics)


def modeled_sec_per_iter(cfg: TrainConfig, pair: StudentTeacherPair,
                         batch_size: int) -> float:
    """Deterministic per-iteration cost model (the Table-1 analogue)."""
    student_bn, teacher_bn = pair.student_bn, pair.teacher_bn
    layout = WorkerLayout(batch_size, cfg.workers)
    student_passes = 1 if cfg.mode == "moco" else 2
    teacher_passes = 1 if cfg.mode == "moco" else 2

    def mlp_flops(mlp):
        return sum(2 * l.weight.shape[0] * l.weight.shape[1] * batch_size
                   for l in mlp.layers)

    def bn_cost(mlp, kind, passes):
        cost = 0.0
        for layer in mlp.layers:
            if layer.norm is None:
                continue
            bytes_moved = comm_bytes(kind, layout, layer.weight.shape[1])
            if bytes_moved:
                cost += passes * (NOMINAL_COLLECTIVE_LATENCY
                                  + bytes_moved / NOMINAL_BANDWIDTH_BYTES)
        return cost

    student_mlps = [pair.encoder, pair.projector, pair.predictor]
    teacher_mlps = [pair.t_encoder, pair.t_projector]
    fwd = sum(mlp_flops(m) for m in student_mlps)
    # forward + backward for the student (backward ~ 2x forward), forward
    # only for the teacher
    flops = student_passes * fwd * 3
    flops += teacher_passes * sum(mlp_flops(m) for m in teacher_mlps)
    seconds = flops / NOMINAL_FLOPS_PER_SEC
    for m in student_mlps:
        seconds += bn_cost(m, student_bn, student_passes)
    for m in teacher_mlps:
        seconds += bn_cost(m, teacher_bn, teacher_passes)
    return seconds


class Trainer:
    """Owns the pair, optimizer, schedules and (in contrastive mode) the
    negatives queue for one training run."""

    def __init__(self, cfg: TrainConfig, dataset: Optional[Dataset] = None):
        cfg.validate()
        self.cfg = cfg
        self.dataset = dataset if dataset is not None else build_dataset(cfg)
        self.pair = build_model(cfg, self.dataset.dim)
        self.layout_workers = cfg.workers

        n = len(self.dataset)
        if n < cfg.batch_size:
            raise ValueError(
                f"dataset of {n} samples smaller than batch {cfg.batch_size}")
        full, rem = divmod(n, cfg.batch_size)
        # The trailing partial batch is kept when the worker split allows it.
        self.batch_starts = [i * cfg.batch_size for i in range(full)]
        self.batch_sizes = [cfg.batch_size] * full
        if rem and rem % cfg.workers == 0:
            self.batch_starts.append(full * cfg.batch_size)
            self.batch_sizes.append(rem)
        self.iters_per_epoch = len(self.batch_starts)
        self.total_iters = cfg.epochs * self.iters_per_epoch

        lr = cfg.lr_base
        m_base = cfg.m_base
        if cfg.auto_scale:
            lr, m_base = apply_linear_scaling(
                lr, m_base, cfg.batch_size / cfg.reference_batch)
        if self.total_iters > 0:
            warmup = min(cfg.warmup_epochs * self.iters_per_epoch,
                         self.total_iters - 1)
            self.lr_spec = ScheduleSpec(base=lr, total_steps=self.total_iters,
                                        warmup_steps=warmup,
                                        warmup_factor=cfg.warmup_factor)
            self.m_spec = ScheduleSpec(base=m_base,
                                       total_steps=self.total_iters,
                                       kind=cfg.m_schedule)
            self.alpha_spec = ScheduleSpec(base=cfg.alpha_base,
                                           total_steps=self.total_iters,
                                           kind=cfg.alpha_schedule)
        else:
            self.lr_spec = self.m_spec = self.alpha_spec = None

        self.is_moco = cfg.mode == "moco"
        self.params = [Param(name, t, excl) for name, t, excl
                       in self.pair.student_params(
                           include_predictor=not self.is_moco)]
        self.opt = OptimizerState(
            kind=cfg.optimizer,
            momentum=cfg.sgd_momentum,
            weight_decay=cfg.weight_decay,
            trust_coeff=cfg.trust_coeff,
            wd_exclude=(cfg.wd_exclude_bias_bn or cfg.optimizer == "lars"),
        )
        self.queue = None
        if self.is_moco:
            self.queue = NegQueue(cfg.queue_capacity,
                                  self.pair.t_projector.spec.out_dim,
                                  rng=substream(cfg.seed, "queue"))
        self._sec_model = None

    def _step_fn(self):
        return lars_step if self.opt.kind == "lars" else sgd_step

    def train_step(self, batch: np.ndarray, k: int) -> MetricsRecord:
        """One full iteration at global step k; returns its metrics."""
        cfg = self.cfg
        t0 = time.perf_counter()
        alpha_k = schedule_value(self.alpha_spec, k)
        m_k = schedule_value(self.m_spec, k)
        lr_k = lr_at(self.lr_spec, k)
        epoch = k // self.iters_per_epoch

        v, v2 = make_views(batch, cfg.augment,
                           seed=substream_int(cfg.seed, "augment", k),
                           image_hw=self.dataset.image_hw)
        layout = WorkerLayout(batch.shape[0], cfg.workers)
        perm_seed = substream_int(cfg.seed, "bnperm", k)

        for p in self.params:
            p.tensor.zero_grad()

        with record():
            if self.is_moco:
                z, _ = forward_student(self.pair, v, layout)
                k_pos = forward_teacher(self.pair, v2, alpha_k, layout=layout,
                                        perm_seed=perm_seed)
                loss_t = infonce_loss(z, k_pos, self.queue, cfg.temperature)
                l1 = loss_t.item()
                l2 = 0.0
            else:
                lv = symmetrized_loss(self.pair, v, v2, layout, alpha_k,
                                      perm_seed=perm_seed)
                loss_t = lv.loss
                l1 = lv.term_student_v.item()
                l2 = lv.term_student_v2.item()

        loss_val = loss_t.item()
        if self._sec_model is None:
            self._sec_model = modeled_sec_per_iter(cfg, self.pair,
                                                   cfg.batch_size)
        if not np.isfinite(loss_val):
            HEALTH.nonfinite_losses += 1
            diag = MetricsRecord(iteration=k, epoch=epoch, loss=loss_val,
                                 l1=l1, l2=l2, lr=lr_k, m=m_k, alpha=alpha_k,
                                 hist_drift=float("nan"),
                                 sec_per_iter=self._sec_model,
                                 wall_time=time.perf_counter() - t0)
            raise NanLossError(f"non-finite loss at iteration {k}", diag)

        backward(loss_t)
        grads = [p.tensor.grad if p.tensor.grad is not None
                 else np.zeros_like(p.tensor.values) for p in self.params]
        self._step_fn()(self.params, grads, self.opt, lr_k)
        drift = commit_teacher_bn(self.pair, alpha_k)
        ema_update(self.pair, m_k)
        if self.is_moco:
            queue_update(self.queue, k_pos.values)

        return MetricsRecord(iteration=k, epoch=epoch, loss=loss_val, l1=l1,
                             l2=l2, lr=lr_k, m=m_k, alpha=alpha_k,
                             hist_drift=drift, sec_per_iter=self._sec_model,
                             wall_time=time.perf_counter() - t0)

    def epoch_order(self, epoch: int) -> np.ndarray:
        return substream(self.cfg.seed, "shuffle", epoch).permutation(
            len(self.dataset))

    def run(self) -> TrainResult:
        """Loop train_step over all epochs and dump the teacher."""
        HEALTH.reset()
        cfg = self.cfg
        metrics: list[MetricsRecord] = []
        k = 0
        for epoch in range(cfg.epochs):
            order = self.epoch_order(epoch)
            shuffled = self.dataset.samples[order]
            for start, size in zip(self.batch_starts, self.batch_sizes):
                batch = shuffled[start:start + size]
                try:
                    rec = self.train_step(batch, k)
                except NanLossError as e:
                    e.metrics = metrics
                    raise
                if k % cfg.log_interval == 0:
                    metrics.append(rec)
                k += 1
        return TrainResult(payload=dump_teacher(self.pair), metrics=metrics,
                           config=cfg, health=HEALTH.as_dict(),
                           dataset=self.dataset)


def run_training(cfg: TrainConfig,
                 dataset: Optional[Dataset] = None) -> TrainResult:
    return Trainer(cfg, dataset=dataset).run()


# ---------------------------------------------------------------------------
# ablation grid


GRID_ROWS = (
    ("synced", "synced"),
    ("plain", "synced"),
    ("synced", "plain"),
    ("plain", "plain"),
    ("plain", "momentum"),
    ("synced", "momentum"),
)


def ablation_grid(cfg: TrainConfig) -> list[dict]:
    """Train every student/teacher BN combination under identical seeds and
    data order; report probe accuracy and the modeled cost per iteration."""
    from .evaluate import extract_features, linear_probe

    rows = []
    for student_bn, teacher_bn in GRID_ROWS:
        row_cfg = replace(cfg, mode="byol_m2t", student_bn=student_bn,
                          teacher_bn=teacher_bn)
        trainer = Trainer(row_cfg)
        t0 = time.perf_counter()
        result = trainer.run()
        wall = time.perf_counter() - t0
        feats = extract_features(result.payload, result.dataset.samples)
        acc = linear_probe(feats, result.dataset.labels,
                           epochs=cfg.probe_epochs, lr=cfg.probe_lr,
                           batch_size=cfg.probe_batch,
                           test_fraction=cfg.probe_test_fraction,
                           seed=substream_int(cfg.seed, "probe"))
        rows.append({
            "student": student_bn,
            "teacher": teacher_bn,
            "accuracy": acc,
            "sec_per_iter_model": modeled_sec_per_iter(row_cfg, trainer.pair,
                                                       cfg.batch_size),
            "wall_seconds": wall,
            "metrics": result.metrics,
            "payload": result.payload,
        })
    return rows
