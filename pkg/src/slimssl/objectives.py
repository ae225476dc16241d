"""Self-supervised, distillation and supervised losses plus group regularization.

All losses take row-major ``[n, d]`` tensors. Per-sample terms are averaged
over the batch by default (``reduction="mean"``); ``reduction="sum"`` gives
the plain summed form used when checking gradients term by term.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .autograd import Tensor, concat, l2_normalize, log_sum_exp, matmul, stop_gradient

__all__ = [
    "BASE_LOSSES",
    "DISTILL_LOSSES",
    "ClassifierHead",
    "ConfigError",
    "GroupRegConfig",
    "GuidelineReport",
    "LossSpec",
    "LossTerms",
    "check_guidelines",
    "cross_entropy",
    "group_coefficients",
    "group_reg_penalty",
    "info_nce",
    "mse_distill",
    "nce_distill",
    "neg_cosine",
    "simsiam_loss",
    "us3l_total",
]

BASE_LOSSES = ("MSE", "NCE")
DISTILL_LOSSES = ("none", "MSE", "NCE")
UNIT_TOL = 1e-4


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class LossSpec:
    base_loss: str = "NCE"
    distill_loss: str = "MSE"
    head_mode: str = "new"
    momentum_target_base: bool = True
    momentum_target_sub: bool = True
    temperature: float = 0.5

    def __post_init__(self) -> None:
        if self.base_loss not in BASE_LOSSES:
            raise ConfigError(f"base_loss must be one of {BASE_LOSSES}, got {self.base_loss!r}")
        if self.distill_loss not in DISTILL_LOSSES:
            raise ConfigError(f"distill_loss must be one of {DISTILL_LOSSES}, got {self.distill_loss!r}")
        if self.head_mode not in ("none", "shared", "new"):
            raise ConfigError(f"head_mode must be none/shared/new, got {self.head_mode!r}")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if self.distill_loss == "none" and self.head_mode != "none":
            raise ConfigError("a distillation head requires a distillation loss")

    @property
    def uses_momentum(self) -> bool:
        return self.momentum_target_base or self.momentum_target_sub


@dataclass(frozen=True)
class GuidelineReport:
    g1_base_relative: bool
    g2_distill_relative: bool
    g3_momentum_teacher: bool

    @property
    def satisfied_count(self) -> int:
        return int(self.g1_base_relative) + int(self.g2_distill_relative) + int(self.g3_momentum_teacher)

    @property
    def stable(self) -> bool:
        return self.satisfied_count >= 1

    def to_dict(self) -> dict:
        return {
            "g1_base_relative": self.g1_base_relative,
            "g2_distill_relative": self.g2_distill_relative,
            "g3_momentum_teacher": self.g3_momentum_teacher,
            "satisfied_count": self.satisfied_count,
            "stable": self.stable,
        }


def check_guidelines(spec: LossSpec) -> GuidelineReport:
    """Which of the three stability guidelines a loss configuration meets.

    Training is expected to be stable as soon as one holds: a relative-distance
    (contrastive) base loss, a relative-distance distillation loss, or a
    momentum teacher providing the targets.
    """
    return GuidelineReport(
        g1_base_relative=spec.base_loss == "NCE",
        g2_distill_relative=spec.distill_loss == "NCE",
        g3_momentum_teacher=spec.uses_momentum,
    )


# -- primitive losses ----------------------------------------------------

def _reduce(per_sample: Tensor, reduction: str) -> Tensor:
    if reduction == "sum":
        return per_sample.sum()
    if reduction == "mean":
        return per_sample.mean()
    if reduction == "none":
        return per_sample
    raise ValueError(f"unknown reduction {reduction!r}")


def _check_same_shape(*ts: Tensor) -> None:
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def _check_unit_rows(x: Tensor, name: str) -> None:
    norms = np.linalg.norm(x.data, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError(f"{name} rows must be L2-normalized (max deviation {np.max(np.abs(norms - 1.0)):.3g})")


def neg_cosine(p: Tensor, z: Tensor) -> Tensor:
    """Per-row ``-(p/|p|) . (z/|z|)``, shape ``[n]``."""
    _check_same_shape(p, z)
    return -(l2_normalize(p) * l2_normalize(z)).sum(axis=1)


def simsiam_loss(p1: Tensor, z1: Tensor, p2: Tensor, z2: Tensor, reduction: str = "mean") -> Tensor:
    """Symmetric negative cosine with stop-gradient on the ``z`` targets."""
    _check_same_shape(p1, z1, p2, z2)
    per = neg_cosine(p1, stop_gradient(z2)) + neg_cosine(p2, stop_gradient(z1))
    return _reduce(per, reduction)


def _off_diagonal(sim: Tensor) -> Tensor:
    n = sim.shape[0]
    rows, cols = np.nonzero(~np.eye(n, dtype=bool))
    return sim[rows, cols].reshape(n, n - 1)


def info_nce(
    z1: Tensor,
    z2: Tensor,
    tau: float = 0.5,
    *,
    bank: Sequence[Tensor] | None = None,
    reduction: str = "mean",
) -> Tensor:
    """InfoNCE anchored on ``z1`` with positives ``z2``.

    Negatives for anchor ``i`` are ``z2[j]`` and every ``bank`` view's ``j``-th
    row for ``j != i``. The default bank is ``[z1]``, i.e. both views of the
    other batch items. All rows must be unit-norm.
    """
    _check_same_shape(z1, z2)
    bank = [z1] if bank is None else list(bank)
    for t, name in [(z1, "z1"), (z2, "z2"), *[(b, "bank") for b in bank]]:
        _check_unit_rows(t, name)
    n = z1.shape[0]
    pos = (z1 * z2).sum(axis=1)
    if n == 1:
        logits = pos.reshape(1, 1)
    else:
        parts = [pos.reshape(n, 1), _off_diagonal(matmul(z1, z2.T))]
        parts += [_off_diagonal(matmul(z1, b.T)) for b in bank]
        logits = concat(parts, axis=1)
    per = log_sum_exp(logits, scale=tau, axis=1) - pos / tau
    return _reduce(per, reduction)


def mse_distill(z_s: Tensor, z_t: Tensor, reduction: str = "mean") -> Tensor:
    """``-z_s . z_t`` per row; ``z_t`` is treated as a constant target."""
    _check_same_shape(z_s, z_t)
    per = -(z_s * stop_gradient(z_t)).sum(axis=1)
    return _reduce(per, reduction)


def nce_distill(z_s: Tensor, z_t_all: Tensor, tau: float = 1.0, reduction: str = "mean") -> Tensor:
    """Contrastive distillation: row ``i`` of ``z_s`` is pulled to ``z_t_all[i]``
    relative to every row of ``z_t_all``.

    ``-z_s_i . z_t_i / tau + log sum_k exp(z_s_i . z_t_k / tau)``.
    """
    if z_t_all.shape[0] == 0:
        raise ValueError("nce_distill needs at least one target")
    m = z_s.shape[0]
    if m > z_t_all.shape[0] or z_s.shape[1] != z_t_all.shape[1]:
        raise ValueError(f"shape mismatch: students {z_s.shape}, targets {z_t_all.shape}")
    targets = stop_gradient(z_t_all)
    sim = matmul(z_s, targets.T)
    pos = (z_s * targets[:m]).sum(axis=1)
    per = log_sum_exp(sim, scale=tau, axis=1) - pos / tau
    return _reduce(per, reduction)


@dataclass
class ClassifierHead:
    """Linear classification head with weight matrix ``[d, C]``."""

    weight: Tensor

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def random(cls, d: int, C: int, rng: np.random.Generator, requires_grad: bool = False) -> "ClassifierHead":
        return cls(Tensor(rng.normal(size=(d, C)), requires_grad=requires_grad))


def cross_entropy(z: Tensor, head: ClassifierHead, labels: Sequence[int], reduction: str = "mean") -> Tensor:
    labels = np.asarray(labels, dtype=int)
    C = head.num_classes
    if labels.shape != (z.shape[0],):
        raise ValueError("need one label per row")
    if np.any(labels < 0) or np.any(labels >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    logits = matmul(z, head.weight)
    picked = logits[np.arange(len(labels)), labels]
    per = log_sum_exp(logits, axis=1) - picked
    return _reduce(per, reduction)


# -- group regularization ------------------------------------------------

@dataclass(frozen=True)
class GroupRegConfig:
    lam: float = 1e-4
    groups: int = 8
    alpha: float = 0.05

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.groups < 1:
            raise ConfigError("group count must be >= 1")
        if self.alpha * (self.groups - 1) >= 1:
            raise ConfigError(
                f"alpha*(G-1) = {self.alpha * (self.groups - 1):g} >= 1 would make the last group's coefficient non-positive"
            )


def group_coefficients(K: int, cfg: GroupRegConfig) -> np.ndarray:
    """Per-channel decay ``lam * (1 - group(k) * alpha)`` for channels ``k = 0..K-1``.

    ``group(k) = min(k // floor(K / G), G - 1)``; the multiplier is evaluated in
    exact rational arithmetic and rounded once, so K=64, G=8, alpha=0.05 gives
    exactly 1.0, 0.95, ..., 0.65.
    """
    cfg.__post_init__()
    if K < cfg.groups:
        raise ConfigError(f"need at least G={cfg.groups} channels, got K={K}")
    KG = K // cfg.groups
    alpha = Fraction(repr(float(cfg.alpha)))  # decimal value as typed, e.g. 1/20 for 0.05
    mult = [float(1 - min(k // KG, cfg.groups - 1) * alpha) for k in range(K)]
    return cfg.lam * np.asarray(mult)


def group_reg_penalty(weight: Tensor, coeffs: np.ndarray, bias: Tensor | None = None) -> Tensor:
    """``sum_k coeffs[k] * ||w_k||^2`` where ``w_k`` is row ``k`` of ``weight``
    (output channel ``k``) together with ``bias[k]`` if given."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (weight.shape[0],):
        raise ValueError(f"{coeffs.shape[0] if coeffs.ndim else 0} coefficients for {weight.shape[0]} channels")
    total = (weight.square() * coeffs[:, None]).sum()
    if bias is not None:
        total = total + (bias.square() * coeffs).sum()
    return total


# -- the combined objective ----------------------------------------------

@dataclass
class BranchOutputs:
    """Two-view outputs of one network (student base, sub-network or teacher)."""

    z1: Tensor
    z2: Tensor
    p1: Tensor | None = None
    p2: Tensor | None = None


@dataclass
class LossTerms:
    base: Tensor
    distill: Tensor | None
    per_sub: list[Tensor] = field(default_factory=list)

    @property
    def total(self) -> Tensor:
        return self.base if self.distill is None else self.base + self.distill


def base_loss(spec: LossSpec, out: BranchOutputs, targets: BranchOutputs | None = None) -> Tensor:
    """Base objective on two views; ``targets`` (already detached) replaces the
    network's own outputs as the target side when given."""
    if spec.base_loss == "MSE":
        if out.p1 is None or out.p2 is None:
            raise ValueError("MSE base loss needs predictor outputs")
        t = targets if targets is not None else out
        return simsiam_loss(out.p1, t.z1, out.p2, t.z2)
    z1, z2 = l2_normalize(out.z1), l2_normalize(out.z2)
    if targets is None:
        return info_nce(z1, z2, spec.temperature) + info_nce(z2, z1, spec.temperature)
    t1 = stop_gradient(l2_normalize(targets.z1))
    t2 = stop_gradient(l2_normalize(targets.z2))
    return info_nce(z1, t2, spec.temperature, bank=[t1]) + info_nce(z2, t1, spec.temperature, bank=[t2])


def distill_pair(spec: LossSpec, s1: Tensor, s2: Tensor, t1: Tensor, t2: Tensor) -> Tensor:
    """Symmetric distillation ``L(s1, t2) + L(s2, t1)`` on normalized rows."""
    s1, s2 = l2_normalize(s1), l2_normalize(s2)
    t1, t2 = stop_gradient(l2_normalize(t1)), stop_gradient(l2_normalize(t2))
    if spec.distill_loss == "MSE":
        return mse_distill(s1, t2) + mse_distill(s2, t1)
    if spec.distill_loss == "NCE":
        return nce_distill(s1, t2, spec.temperature) + nce_distill(s2, t1, spec.temperature)
    raise ConfigError(f"no distillation loss configured ({spec.distill_loss!r})")


def us3l_total(
    base_outputs: BranchOutputs,
    sub_outputs: Sequence[BranchOutputs],
    teacher_outputs: BranchOutputs | None,
    spec: LossSpec,
    *,
    sub_weight: float = 1.0,
) -> LossTerms:
    """Base loss plus a symmetric term for every sampled sub-network.

    ``sub_outputs`` must already be passed through the distillation head when
    ``spec.head_mode`` is not ``"none"`` (``p1/p2`` unused there). With
    ``distill_loss="none"`` each sub-network is trained with the base loss on
    its own two views instead. ``teacher_outputs`` is required whenever the
    spec asks for momentum targets.
    """
    if spec.uses_momentum and teacher_outputs is None:
        raise ValueError("spec asks for momentum targets but no teacher outputs were given")
    base_t = None
    if spec.momentum_target_base:
        base_t = _detached(teacher_outputs)
    base = base_loss(spec, base_outputs, base_t)

    sub_src = teacher_outputs if spec.momentum_target_sub else base_outputs
    per_sub: list[Tensor] = []
    for sub in sub_outputs:
        if spec.distill_loss == "none":
            if sub.p1 is None and spec.base_loss == "MSE":
                raise ValueError("sub-network outputs need predictor outputs for the MSE base loss")
            targets = _detached(teacher_outputs) if spec.momentum_target_sub else None
            per_sub.append(base_loss(spec, sub, targets))
        else:
            per_sub.append(distill_pair(spec, sub.z1, sub.z2, sub_src.z1, sub_src.z2))
    distill = None
    if per_sub:
        distill = per_sub[0]
        for term in per_sub[1:]:
            distill = distill + term
        if sub_weight != 1.0:
            distill = distill * sub_weight
    return LossTerms(base=base, distill=distill, per_sub=per_sub)


def _detached(out: BranchOutputs | None) -> BranchOutputs | None:
    if out is None:
        return None
    return BranchOutputs(stop_gradient(out.z1), stop_gradient(out.z2))

