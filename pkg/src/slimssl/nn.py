"""Slimmable layers, encoders and the momentum (EMA) teacher.

A layer with ``K`` output channels evaluated at width ``w`` uses only the
first ``active_channels(w, K)`` rows of its weight; the parameters active at
a smaller width are therefore always a prefix of those active at a larger one.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autograd import Tensor, no_grad, relu

__all__ = [
    "EncoderOutput",
    "EncoderSpec",
    "MLP",
    "MissingStatisticsError",
    "MomentumEncoder",
    "SlimmableBatchNorm",
    "SlimmableEncoder",
    "SlimmableLinear",
    "active_channels",
    "ema_update",
    "recalibrate_stats",
    "width_key",
]

HEAD_MODES = ("none", "shared", "new")
NORM_KINDS = ("batch", "none")


class MissingStatisticsError(RuntimeError):
    """Evaluation requested at a width that has not been recalibrated."""


def active_channels(width: float, K: int) -> int:
    """Channels kept at ``width``: ``max(1, round(width * K))`` with banker's rounding."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if not (0.0 < width <= 1.0):
        raise ValueError(f"width must lie in (0, 1], got {width}")
    return max(1, round(width * K))


def width_key(width: float) -> float:
    return round(float(width), 6)


def _kaiming(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class SlimmableLinear:
    """Dense layer whose weight rows (outputs) and columns (inputs) can be prefix-sliced."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        *,
        slice_input: bool = True,
        slice_output: bool = True,
        rng: np.random.Generator | None = None,
        name: str = "linear",
    ):
        rng = np.random.default_rng() if rng is None else rng
        self.in_features = in_features
        self.out_features = out_features
        self.slice_input = slice_input
        self.slice_output = slice_output
        self.name = name
        self.weight = Tensor(_kaiming(rng, out_features, in_features), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def dims(self, width: float) -> tuple[int, int]:
        k_in = active_channels(width, self.in_features) if self.slice_input else self.in_features
        k_out = active_channels(width, self.out_features) if self.slice_output else self.out_features
        return k_in, k_out

    def __call__(self, x: Tensor, width: float = 1.0) -> Tensor:
        k_in, k_out = self.dims(width)
        if x.shape[1] != k_in:
            raise ValueError(f"{self.name}: expected {k_in} input features at width {width}, got {x.shape[1]}")
        if k_in == self.in_features and k_out == self.out_features:
            w, b = self.weight, self.bias
        else:
            w, b = self.weight[:k_out, :k_in], self.bias[:k_out]
        return x @ w.T + b

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]

    def active_parameter_count(self, width: float) -> int:
        k_in, k_out = self.dims(width)
        return k_out * k_in + k_out


class SlimmableBatchNorm:
    """Batch normalization with a sliceable affine part and private statistics per width.

    Training mode normalizes with the batch moments. Evaluation mode reads the
    statistics stored for that exact width and refuses to run without them.
    """

    def __init__(self, num_features: int, *, eps: float = 1e-5, slice_output: bool = True, name: str = "bn"):
        self.num_features = num_features
        self.eps = eps
        self.slice_output = slice_output
        self.name = name
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.stats: dict[float, tuple[np.ndarray, np.ndarray]] = {}

    def __call__(self, x: Tensor, width: float = 1.0, training: bool = True) -> Tensor:
        k = x.shape[1]
        if k == self.num_features:
            gamma, beta = self.gamma, self.beta
        else:
            gamma, beta = self.gamma[:k], self.beta[:k]
        if training:
            mean = x.mean(axis=0, keepdims=True)
            xc = x - mean
            var = (xc * xc).mean(axis=0, keepdims=True)
            xhat = xc / (var + self.eps).sqrt()
        else:
            key = width_key(width)
            if key not in self.stats:
                raise MissingStatisticsError(
                    f"{self.name}: no statistics for width {key}; run recalibrate_stats first"
                )
            mean, var = self.stats[key]
            if mean.shape[0] != k:
                raise ValueError(f"{self.name}: statistics for width {key} have {mean.shape[0]} channels, input {k}")
            xhat = (x - mean) / np.sqrt(var + self.eps)
        return xhat * gamma + beta

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]


class _Moments:
    """Streaming mean/variance (Chan et al. batch merge)."""

    def __init__(self) -> None:
        self.n = 0
        self.mean: np.ndarray | None = None
        self.m2: np.ndarray | None = None

    def update(self, x: np.ndarray) -> None:
        nb = x.shape[0]
        mb = x.mean(axis=0)
        m2b = ((x - mb) ** 2).sum(axis=0)
        if self.n == 0:
            self.n, self.mean, self.m2 = nb, mb, m2b
            return
        n = self.n + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * (nb / n)
        self.m2 = self.m2 + m2b + delta**2 * (self.n * nb / n)
        self.n = n

    @property
    def var(self) -> np.ndarray:
        return self.m2 / self.n


class MLP:
    """Un-sliced ReLU MLP used for the predictor ``h`` and distillation head ``g``."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, name: str):
        self.name = name
        self.layers = [
            SlimmableLinear(a, b, slice_input=False, slice_output=False, rng=rng, name=f"{name}.{i}")
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [np_ for layer in self.layers for np_ in layer.named_parameters()]


@dataclass
class EncoderSpec:
    input_dim: int = 32
    backbone: list[int] = field(default_factory=lambda: [256, 256])
    norm: str = "batch"
    projector: list[int] = field(default_factory=lambda: [256])
    proj_dim: int = 2048
    predictor: list[int] = field(default_factory=lambda: [512])
    distill_head: list[int] = field(default_factory=lambda: [512])
    head_mode: str = "new"

    def __post_init__(self) -> None:
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}")
        if self.norm not in NORM_KINDS:
            raise ValueError(f"norm must be one of {NORM_KINDS}")
        if not self.backbone:
            raise ValueError("backbone needs at least one layer")


@dataclass
class EncoderOutput:
    features: Tensor
    z: Tensor
    p: Tensor | None
    z_distill: Tensor | None


class SlimmableEncoder:
    """Backbone + projector ``f`` with predictor ``h`` and optional distill head ``g``.

    The first layer never slices its input and the last projector layer never
    slices its output, so ``z`` has ``proj_dim`` columns at every width.
    """

    def __init__(self, spec: EncoderSpec, rng: np.random.Generator | int | None = None):
        rng = np.random.default_rng(rng)
        self.spec = spec
        self.training = True
        self.blocks: list[tuple[SlimmableLinear, SlimmableBatchNorm | None]] = []
        sizes = [spec.input_dim, *spec.backbone, *spec.projector]
        n_backbone = len(spec.backbone)
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            name = f"backbone.{i}" if i < n_backbone else f"projector.{i - n_backbone}"
            lin = SlimmableLinear(a, b, slice_input=i > 0, slice_output=True, rng=rng, name=name)
            bn = SlimmableBatchNorm(b, name=f"{name}.bn") if spec.norm == "batch" else None
            self.blocks.append((lin, bn))
        self.n_backbone = n_backbone
        self.proj_out = SlimmableLinear(
            sizes[-1], spec.proj_dim, slice_input=True, slice_output=False, rng=rng, name="projector.out"
        )
        self.predictor = MLP([spec.proj_dim, *spec.predictor, spec.proj_dim], rng, "predictor")
        if spec.head_mode == "new":
            self.distill_head: MLP | None = MLP([spec.proj_dim, *spec.distill_head, spec.proj_dim], rng, "distill_head")
        elif spec.head_mode == "shared":
            self.distill_head = self.predictor
        else:
            self.distill_head = None

    # -- forward -------------------------------------------------------
    def _block(self, i: int, x: Tensor, width: float) -> Tensor:
        lin, bn = self.blocks[i]
        x = lin(x, width)
        if bn is not None:
            x = bn(x, width, training=self.training)
        return relu(x)

    def backbone_features(self, x: Tensor, width: float = 1.0) -> Tensor:
        for i in range(self.n_backbone):
            x = self._block(i, x, width)
        return x

    def project(self, h: Tensor, width: float = 1.0) -> Tensor:
        for i in range(self.n_backbone, len(self.blocks)):
            h = self._block(i, h, width)
        return self.proj_out(h, width)

    def forward(
        self, batch: Tensor | np.ndarray, width: float = 1.0, *, predictor: bool = True, distill: bool = True
    ) -> EncoderOutput:
        """Features, projection ``z``, prediction ``p = h(z)`` and ``g(z)``.

        ``predictor``/``distill`` switch off heads the caller will not use;
        the corresponding fields are then ``None``.
        """
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ValueError(f"expected input of shape [n, {self.spec.input_dim}], got {x.shape}")
        features = self.backbone_features(x, width)
        z = self.project(features, width)
        p = self.predictor(z) if predictor else None
        zd = self.distill_head(z) if (distill and self.distill_head is not None) else None
        return EncoderOutput(features, z, p, zd)

    __call__ = forward

    def train(self, mode: bool = True) -> "SlimmableEncoder":
        self.training = mode
        return self

    def eval(self) -> "SlimmableEncoder":
        return self.train(False)

    # -- parameters ----------------------------------------------------
    def linear_layers(self) -> list[SlimmableLinear]:
        return [lin for lin, _ in self.blocks] + [self.proj_out]

    def norm_layers(self) -> list[SlimmableBatchNorm]:
        return [bn for _, bn in self.blocks if bn is not None]

    def heads(self) -> list[MLP]:
        out = [self.predictor]
        if self.distill_head is not None and self.distill_head is not self.predictor:
            out.append(self.distill_head)
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named: list[tuple[str, Tensor]] = []
        for lin, bn in self.blocks:
            named += lin.named_parameters()
            if bn is not None:
                named += bn.named_parameters()
        named += self.proj_out.named_parameters()
        for head in self.heads():
            named += head.named_parameters()
        return named

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def active_parameter_count(self, width: float, *, include_projector: bool = False) -> int:
        """Parameters touched by a width-``width`` backbone pass (weights, biases, norm affine)."""
        count = 0
        n = len(self.blocks) if include_projector else self.n_backbone
        for lin, bn in self.blocks[:n]:
            count += lin.active_parameter_count(width)
            if bn is not None:
                count += 2 * lin.dims(width)[1]
        if include_projector:
            count += self.proj_out.active_parameter_count(width)
        return count

    def active_slices(self, width: float) -> dict[str, tuple[slice, ...]]:
        """Index of the active block of every sliceable parameter at ``width``."""
        out: dict[str, tuple[slice, ...]] = {}
        for lin, bn in self.blocks + [(self.proj_out, None)]:
            k_in, k_out = lin.dims(width)
            out[f"{lin.name}.weight"] = (slice(0, k_out), slice(0, k_in))
            out[f"{lin.name}.bias"] = (slice(0, k_out),)
            if bn is not None:
                out[f"{bn.name}.gamma"] = (slice(0, k_out),)
                out[f"{bn.name}.beta"] = (slice(0, k_out),)
        for head in self.heads():
            for name, p in head.named_parameters():
                out[name] = tuple(slice(0, s) for s in p.shape)
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = dict(self.named_parameters())
        missing = set(named) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for name, p in named.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def norm_stats(self) -> dict[str, dict[float, tuple[np.ndarray, np.ndarray]]]:
        return {bn.name: dict(bn.stats) for bn in self.norm_layers()}

    def load_norm_stats(self, stats: dict[str, dict[float, tuple[np.ndarray, np.ndarray]]]) -> None:
        for bn in self.norm_layers():
            bn.stats = {width_key(k): (np.asarray(m), np.asarray(v)) for k, (m, v) in stats.get(bn.name, {}).items()}

    def copy(self) -> "SlimmableEncoder":
        return copy.deepcopy(self)


def recalibrate_stats(
    enc: SlimmableEncoder, width: float, calibration_batches: Iterable[np.ndarray | Tensor]
) -> None:
    """Replace the stored normalization statistics for ``width`` with the exact
    moments of the calibration data (pre-normalization activations)."""
    batches = list(calibration_batches)
    if not batches:
        raise ValueError("recalibration needs at least one batch")
    key = width_key(width)
    if not enc.norm_layers():
        return
    acts = [np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64) for b in batches]
    with no_grad():
        for lin, bn in enc.blocks:
            mom = _Moments()
            pre = []
            for a in acts:
                y = lin(Tensor(a), width).data
                mom.update(y)
                pre.append(y)
            mean, var = mom.mean.copy(), mom.var.copy()
            bn.stats[key] = (mean, var)
            k = mean.shape[0]
            scale = bn.gamma.data[:k] / np.sqrt(var + bn.eps)
            acts = [np.maximum((y - mean) * scale + bn.beta.data[:k], 0.0) for y in pre]


class MomentumEncoder:
    """Shadow copy of a student encoder, updated only through :func:`ema_update`."""

    def __init__(self, student: SlimmableEncoder, m: float = 0.99):
        if not 0.0 <= m <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        self.encoder = student.copy()
        self.m = m
        for p in self.encoder.parameters():
            p.requires_grad = False
            p.grad = None

    def forward(self, batch: Tensor | np.ndarray, width: float = 1.0, **kw) -> EncoderOutput:
        with no_grad():
            return self.encoder.forward(batch, width, **kw)

    __call__ = forward

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters()


def ema_update(teacher: MomentumEncoder, student: SlimmableEncoder, m: float | None = None) -> MomentumEncoder:
    """``theta_t <- m * theta_t + (1 - m) * theta_s`` for every parameter."""
    m = teacher.m if m is None else m
    if not 0.0 <= m <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    t_params = teacher.encoder.named_parameters()
    s_params = student.named_parameters()
    if len(t_params) != len(s_params):
        raise ValueError("teacher and student have different parameter lists")
    for (tn, tp), (sn, sp) in zip(t_params, s_params):
        if tp.shape != sp.shape:
            raise ValueError(f"shape mismatch for {tn}: {tp.shape} vs {sp.shape}")
        tp.data = m * tp.data + (1.0 - m) * sp.data
    return teacher
