"""scikit-learn style wrapper around :func:`slimssl.trainer.train`."""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .evaluation import extract_features
from .nn import EncoderSpec, recalibrate_stats, width_key
from .objectives import GroupRegConfig, LossSpec
from .schedule import SamplingSchedule
from .trainer import OptimizerConfig, TrainConfig, train

__all__ = ["SlimmableSSL"]


class SlimmableSSL(TransformerMixin, BaseEstimator):
    """Self-supervised slimmable encoder with a ``fit``/``transform`` interface.

    ``fit`` pretrains on unlabeled rows of ``X``; ``transform`` returns frozen
    backbone features at ``width`` (defaults to the instance's ``width``),
    recalibrating normalization statistics on the training data the first
    time a width is requested.

    Examples
    --------
    >>> from slimssl import SlimmableSSL, synthetic_blobs
    >>> X, _ = synthetic_blobs(256, 16, 4, seed=0)
    >>> model = SlimmableSSL(backbone=(32, 32), proj_dim=32, epochs=1, batch_size=64).fit(X)
    >>> model.transform(X, width=0.5).shape
    (256, 16)
    """

    def __init__(
        self,
        backbone=(256, 256),
        projector=(256,),
        proj_dim: int = 2048,
        base_loss: str = "NCE",
        distill_loss: str = "MSE",
        head_mode: str = "new",
        momentum_targets: bool = True,
        temperature: float = 0.5,
        schedule: str = "dynamic",
        r_min: float = 0.25,
        s: int = 4,
        lam: float = 1e-4,
        groups: int = 8,
        alpha: float = 0.05,
        base_lr: float = 0.5,
        batch_size: int = 512,
        epochs: int = 20,
        width: float = 1.0,
        random_state: int = 0,
    ):
        self.backbone = backbone
        self.projector = projector
        self.proj_dim = proj_dim
        self.base_loss = base_loss
        self.distill_loss = distill_loss
        self.head_mode = head_mode
        self.momentum_targets = momentum_targets
        self.temperature = temperature
        self.schedule = schedule
        self.r_min = r_min
        self.s = s
        self.lam = lam
        self.groups = groups
        self.alpha = alpha
        self.base_lr = base_lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.width = width
        self.random_state = random_state

    def _train_config(self, n_features: int) -> TrainConfig:
        hidden = [*self.backbone, *self.projector]
        width = max(hidden)
        return TrainConfig(
            encoder=EncoderSpec(
                input_dim=n_features,
                backbone=list(self.backbone),
                projector=list(self.projector),
                proj_dim=self.proj_dim,
                predictor=[width],
                distill_head=[width],
                head_mode=self.head_mode,
            ),
            loss=LossSpec(
                base_loss=self.base_loss,
                distill_loss=self.distill_loss,
                head_mode=self.head_mode,
                momentum_target_base=self.momentum_targets,
                momentum_target_sub=self.momentum_targets,
                temperature=self.temperature,
            ),
            schedule=SamplingSchedule(mode=self.schedule, r_min=self.r_min, s=self.s),
            groupreg=GroupRegConfig(lam=self.lam, groups=self.groups, alpha=self.alpha),
            optimizer=OptimizerConfig(base_lr=self.base_lr, batch_size=self.batch_size, epochs=self.epochs),
            seed=self.random_state,
        )

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        self.n_features_in_ = X.shape[1]
        art = train(self._train_config(X.shape[1]), X)
        self.encoder_ = art.encoder
        self.artifacts_ = art
        self.history_ = art.metrics
        self._calibration = X
        self.calibrated_widths_: set[float] = set()
        return self

    def transform(self, X, width: float | None = None):
        check_is_fitted(self, "encoder_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        w = self.width if width is None else width
        if not self.r_min - 1e-9 <= w <= 1.0 + 1e-9:
            raise ValueError(f"width {w} outside the trained range [{self.r_min}, 1.0]")
        key = width_key(w)
        if key not in self.calibrated_widths_:
            recalibrate_stats(self.encoder_, w, [self._calibration])
            self.calibrated_widths_.add(key)
        return extract_features(self.encoder_, X, w)

    def config(self) -> dict:
        check_is_fitted(self, "encoder_")
        return dataclasses.asdict(self.artifacts_.config)
