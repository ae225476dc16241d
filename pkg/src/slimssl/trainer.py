"""The slimmable self-supervised training loop.

One iteration: zero grads, run the full-width network on both views, add
the base loss and group regularization, build detached (or momentum)
targets, then, once past warmup, run every sampled sub-width through the
distillation head and add its symmetric distillation loss. A single
backward pass accumulates everything and SGD takes one step; the momentum
teacher follows by EMA.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .autograd import DegenerateInputError, Tape, Tensor, backward
from .data import DataConfig, augment_batch, build_policy, default_policy, load_dataset
from .evaluation import CollapseDetector, collapse_metrics
from .nn import EncoderSpec, MomentumEncoder, SlimmableEncoder, ema_update
from .objectives import (
    BranchOutputs,
    ConfigError,
    GroupRegConfig,
    LossSpec,
    group_coefficients,
    group_reg_penalty,
    us3l_total,
)
from .schedule import CostLedger, SamplingSchedule, assert_min_samples, cosine_lr, sample_widths

__all__ = [
    "CollapseConfig",
    "DivergenceError",
    "OptimizerConfig",
    "RunArtifacts",
    "SGD",
    "TrainConfig",
    "layer_decay_coefficients",
    "sgd_step",
    "train",
]

log = logging.getLogger(__name__)

TARGET_MODES = ("momentum", "detached_base")


@dataclass
class OptimizerConfig:
    base_lr: float = 0.5
    momentum: float = 0.9
    batch_size: int = 512
    epochs: int = 20
    ema_momentum: float = 0.99
    ema_after_step: bool = True


@dataclass
class CollapseConfig:
    mean_abs_cos: float = 0.95
    feature_std: float = 1e-2
    patience: int = 50
    stop_on_collapse: bool = False


@dataclass
class TrainConfig:
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    loss: LossSpec = field(default_factory=LossSpec)
    schedule: SamplingSchedule = field(default_factory=SamplingSchedule)
    groupreg: GroupRegConfig = field(default_factory=GroupRegConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    augmentation: list[dict] | None = None
    collapse: CollapseConfig = field(default_factory=CollapseConfig)
    seed: int = 0
    target_mode: str = "momentum"
    teacher_full_width: bool = True
    sub_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.target_mode not in TARGET_MODES:
            raise ConfigError(f"target_mode must be one of {TARGET_MODES}")
        if self.loss.base_loss == "NCE" and self.optimizer.batch_size < 2:
            raise ConfigError("the contrastive base loss needs batch_size >= 2 so negatives exist")
        if self.encoder.head_mode != self.loss.head_mode:
            self.encoder = replace(self.encoder, head_mode=self.loss.head_mode)


class DivergenceError(RuntimeError):
    """Raised when the loss becomes non-finite; carries the partial run."""

    def __init__(self, message: str, artifacts: "RunArtifacts"):
        super().__init__(message)
        self.artifacts = artifacts


@dataclass
class RunArtifacts:
    config: TrainConfig
    encoder: SlimmableEncoder
    teacher: MomentumEncoder | None
    metrics: list[dict] = field(default_factory=list)
    ledger: CostLedger = field(default_factory=CostLedger)
    collapse_trace: list[dict] = field(default_factory=list)
    collapsed_at: int | None = None
    student_view_forwards: int = 0
    iterations: int = 0

    def summary(self) -> dict:
        last = self.metrics[-1] if self.metrics else {}
        return {
            "iterations": self.iterations,
            "schedule_T_iters": self.config.schedule.T_iters,
            "total_forwards": self.ledger.total,
            "teacher_forwards": self.ledger.teacher_forwards,
            "student_view_forwards": self.student_view_forwards,
            "collapsed": self.collapsed_at is not None,
            "collapsed_at": self.collapsed_at,
            "final_loss": last.get("loss"),
            "final_mean_abs_cos": last.get("mean_abs_cos"),
            "final_feature_std": last.get("feature_std"),
        }


def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    lr: float,
    momentum_buf: list[np.ndarray | None],
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> None:
    """Heavy-ball SGD: ``v <- momentum * v + g``, ``w <- w - lr * v``.

    ``weight_decay`` adds the gradient of ``weight_decay * ||w||^2`` (i.e.
    ``2 * weight_decay * w``) to ``g``; leave it at 0 when the penalty is
    already part of the loss.
    """
    if not (len(params) == len(grads) == len(momentum_buf)):
        raise ValueError("params, grads and momentum buffers must have equal length")
    for k, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p.data) if g is None else np.asarray(g)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if weight_decay:
            g = g + 2.0 * weight_decay * p.data
        v = g if momentum_buf[k] is None else momentum * momentum_buf[k] + g
        momentum_buf[k] = v
        p.data = p.data - lr * v


class SGD:
    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: list[np.ndarray | None] = [None] * len(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        sgd_step(self.params, [p.grad for p in self.params], lr, self.buffers, self.momentum, self.weight_decay)


def layer_decay_coefficients(enc: SlimmableEncoder, cfg: GroupRegConfig) -> list[tuple[Tensor, Tensor, np.ndarray]]:
    """``(weight, bias, per-channel coefficients)`` for every linear layer.

    Width-sliced layers get the grouped coefficients; layers whose outputs are
    never sliced (the projector output and the heads) get the constant base
    coefficient. Normalization parameters are not decayed.
    """
    return [entry for _, entry in _tagged_decay(enc, cfg)]


def _tagged_decay(enc: SlimmableEncoder, cfg: GroupRegConfig) -> list[tuple[str, tuple[Tensor, Tensor, np.ndarray]]]:
    tagged = [("encoder", lin) for lin in enc.linear_layers()]
    tagged += [("predictor", lin) for lin in enc.predictor.layers]
    if enc.distill_head is not None and enc.distill_head is not enc.predictor:
        tagged += [("distill_head", lin) for lin in enc.distill_head.layers]
    out = []
    for tag, lin in tagged:
        K = lin.out_features
        if lin.slice_output and K >= cfg.groups:
            c = group_coefficients(K, cfg)
        else:
            c = np.full(K, cfg.lam)
        out.append((tag, (lin.weight, lin.bias, c)))
    return out


def regularization_penalty(coeffs: list[tuple[Tensor, Tensor, np.ndarray]]) -> Tensor:
    total = None
    for w, b, c in coeffs:
        term = group_reg_penalty(w, c, b)
        total = term if total is None else total + term
    return total


def _prepare(X: np.ndarray) -> np.ndarray:
    return X.reshape(X.shape[0], -1)


def train(
    config: TrainConfig,
    data: np.ndarray | None = None,
    *,
    callback: Callable[[int, dict], None] | None = None,
    max_iterations: int | None = None,
) -> RunArtifacts:
    """Run the full training procedure described in the module docstring.

    ``data`` is the unlabeled training array (``[n, d]`` vectors or
    ``[n, C, H, W]`` images); when omitted it is loaded from ``config.data``.
    ``max_iterations`` truncates the run without changing the schedule.
    """
    if data is None:
        data = load_dataset(config.data)[0]
    X = np.asarray(data, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    opt = config.optimizer
    n = X.shape[0]
    batch = min(opt.batch_size, n)
    steps_per_epoch = max(1, n // batch)
    T = max(1, opt.epochs * steps_per_epoch)
    schedule = replace(config.schedule, T_iters=T)
    assert_min_samples(schedule)
    enc_spec = replace(config.encoder, input_dim=int(np.prod(X.shape[1:])))
    config = replace(config, encoder=enc_spec, schedule=schedule)

    enc = SlimmableEncoder(enc_spec, rng=int(rng.integers(2**31)))
    spec = config.loss
    if config.target_mode == "detached_base":
        spec = replace(spec, momentum_target_base=False, momentum_target_sub=False)
    teacher = MomentumEncoder(enc, opt.ema_momentum) if spec.uses_momentum else None
    policy = build_policy(config.augmentation) if config.augmentation else default_policy(
        "images" if X.ndim == 4 else "blobs"
    )
    optimizer = SGD(enc.parameters(), momentum=opt.momentum)
    decay = _tagged_decay(enc, config.groupreg)
    detector = CollapseDetector(config.collapse.mean_abs_cos, config.collapse.feature_std, config.collapse.patience)
    sample_rng = np.random.default_rng(rng.integers(2**31))
    art = RunArtifacts(config=config, encoder=enc, teacher=teacher)
    need_p = spec.base_loss == "MSE"
    shared_head = spec.head_mode == "shared"

    t = 0
    for _epoch in range(opt.epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            t += 1
            if max_iterations is not None and t > max_iterations:
                return art
            xb = X[order[b * batch:(b + 1) * batch]]
            x1 = Tensor(_prepare(augment_batch(xb, policy, rng)[0]))
            x2 = Tensor(_prepare(augment_batch(xb, policy, rng)[0]))
            lr = cosine_lr(t - 1, T, opt.base_lr)
            widths = sample_widths(schedule, t, sample_rng)
            art.ledger.record(t, widths)

            optimizer.zero_grad()
            with Tape(), np.errstate(over="ignore", invalid="ignore"):
                o1 = enc.forward(x1, schedule.r_max, predictor=need_p, distill=False)
                o2 = enc.forward(x2, schedule.r_max, predictor=need_p, distill=False)
                art.student_view_forwards += 2
                base_out = BranchOutputs(o1.z, o2.z, o1.p, o2.p)
                teacher_out = None
                if teacher is not None:
                    m1 = teacher.forward(x1, 1.0 if config.teacher_full_width else schedule.r_max, predictor=False, distill=False)
                    m2 = teacher.forward(x2, 1.0 if config.teacher_full_width else schedule.r_max, predictor=False, distill=False)
                    art.ledger.teacher_forwards += 1
                    teacher_out = BranchOutputs(m1.z, m2.z)
                subs = []
                sub_teachers = []
                for w in widths[1:]:
                    s1 = enc.forward(x1, w, predictor=need_p and spec.distill_loss == "none")
                    s2 = enc.forward(x2, w, predictor=need_p and spec.distill_loss == "none")
                    art.student_view_forwards += 2
                    if spec.head_mode != "none":
                        subs.append(BranchOutputs(s1.z_distill, s2.z_distill))
                    else:
                        subs.append(BranchOutputs(s1.z, s2.z, s1.p, s2.p))
                    if teacher is not None and not config.teacher_full_width:
                        t1 = teacher.forward(x1, w, predictor=False, distill=False)
                        t2 = teacher.forward(x2, w, predictor=False, distill=False)
                        art.ledger.teacher_forwards += 1
                        sub_teachers.append(BranchOutputs(t1.z, t2.z))
                try:
                    _check_finite(t, art, o1.z, o2.z, *[b.z1 for b in subs])
                    terms = _loss_terms(spec, base_out, subs, teacher_out, sub_teachers, config.sub_weight)
                except DegenerateInputError as exc:
                    art.iterations = t - 1
                    raise DivergenceError(f"degenerate embeddings at iteration {t}: {exc}", art) from exc
                # decay only what this iteration's forward passes used
                used = {"encoder"}
                if need_p or (shared_head and subs):
                    used.add("predictor")
                if subs and spec.head_mode == "new":
                    used.add("distill_head")
                greg = regularization_penalty([entry for tag, entry in decay if tag in used])
                loss = terms.total + greg
                loss_value = loss.item()
                row = {
                    "iter": t,
                    "lr": lr,
                    "width_set": " ".join(f"{w:g}" for w in widths),
                    "loss": loss_value,
                    "loss_base": terms.base.item(),
                    "loss_distill": terms.distill.item() if terms.distill is not None else 0.0,
                    "loss_greg": greg.item(),
                }
                if not math.isfinite(loss_value):
                    art.iterations = t - 1
                    raise DivergenceError(f"non-finite loss at iteration {t} ({row}); {_last_metrics(art)}", art)
                backward(loss)

            if teacher is not None and not opt.ema_after_step:
                ema_update(teacher, enc)
            optimizer.step(lr)
            if teacher is not None and opt.ema_after_step:
                ema_update(teacher, enc)

            cm = collapse_metrics(o1.z.data)
            row.update(cm)
            art.metrics.append(row)
            art.collapse_trace.append({"iter": t, **cm})
            art.iterations = t
            if detector.update(t, cm) and art.collapsed_at is None:
                art.collapsed_at = detector.collapsed_at
                log.info("collapse detected at iteration %d", t)
            if callback is not None:
                callback(t, row)
            if art.collapsed_at is not None and config.collapse.stop_on_collapse:
                return art
    return art


def _last_metrics(art: RunArtifacts) -> str:
    return f"last collapse metrics {art.collapse_trace[-1]}" if art.collapse_trace else "no collapse metrics yet"


def _check_finite(t: int, art: RunArtifacts, *outputs: Tensor) -> None:
    if not all(np.all(np.isfinite(o.data)) for o in outputs):
        art.iterations = t - 1
        raise DivergenceError(f"non-finite embeddings at iteration {t}; {_last_metrics(art)}", art)


def _loss_terms(spec, base_out, subs, teacher_out, sub_teachers, sub_weight):
    if not sub_teachers:
        return us3l_total(base_out, subs, teacher_out, spec, sub_weight=sub_weight)
    # one teacher pass per sub-width: sub-network terms are built one at a time
    terms = us3l_total(base_out, [], teacher_out, spec)
    per_sub = []
    for sub, tout in zip(subs, sub_teachers):
        per_sub += us3l_total(base_out, [sub], tout, spec).per_sub
    distill = per_sub[0]
    for term in per_sub[1:]:
        distill = distill + term
    if sub_weight != 1.0:
        distill = distill * sub_weight
    return replace(terms, distill=distill, per_sub=per_sub)
