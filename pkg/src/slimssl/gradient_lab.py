"""Closed-form distillation/CE gradients and temporal-consistency experiments.

The experiments here quantify how much the gradient a sub-network receives
changes between two adjacent iterations when every output is rotated by the
same orthogonal matrix, and how much a momentum teacher's outputs drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import softmax

from .autograd import Tape, Tensor, backward
from .objectives import ClassifierHead, cross_entropy, mse_distill, nce_distill

__all__ = [
    "RotationPerturbation",
    "SoftmaxWeights",
    "StabilityReport",
    "alignment_bound",
    "ema_consistency_probe",
    "gradient_agreement",
    "grad_ce",
    "grad_mse_distill",
    "grad_nce_distill",
    "random_update_stream",
    "rotation_gap",
    "stability_compare",
]

ORTHO_TOL = 1e-10


@dataclass(frozen=True)
class SoftmaxWeights:
    P: np.ndarray

    def __post_init__(self) -> None:
        if np.any(self.P < 0) or abs(self.P.sum() - 1.0) > 1e-10:
            raise ValueError("softmax weights must be non-negative and sum to 1")


@dataclass(frozen=True)
class RotationPerturbation:
    matrix: np.ndarray

    def __post_init__(self) -> None:
        W = np.asarray(self.matrix, dtype=np.float64)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise ValueError("rotation must be a square matrix")
        if np.max(np.abs(W.T @ W - np.eye(W.shape[0]))) > ORTHO_TOL:
            raise ValueError("matrix is not orthogonal")
        object.__setattr__(self, "matrix", W)

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def from_angle(cls, theta: float) -> "RotationPerturbation":
        c, s = np.cos(theta), np.sin(theta)
        return cls(np.array([[c, -s], [s, c]]))

    @classmethod
    def planar(cls, d: int, theta: float, rng: np.random.Generator) -> "RotationPerturbation":
        """Rotation by ``theta`` inside a random 2-plane of R^d."""
        Q, _ = np.linalg.qr(rng.normal(size=(d, 2)))
        u, v = Q[:, 0], Q[:, 1]
        c, s = np.cos(theta), np.sin(theta)
        W = np.eye(d) + (c - 1.0) * (np.outer(u, u) + np.outer(v, v)) + s * (np.outer(v, u) - np.outer(u, v))
        return cls(W)

    @classmethod
    def random(cls, d: int, rng: np.random.Generator) -> "RotationPerturbation":
        """Haar-distributed orthogonal matrix."""
        Q, R = np.linalg.qr(rng.normal(size=(d, d)))
        return cls(Q * np.sign(np.diag(R)))


def grad_mse_distill(z_t_i: np.ndarray) -> np.ndarray:
    return -np.asarray(z_t_i, dtype=np.float64)


def grad_nce_distill(
    z_s_i: np.ndarray, z_t_all: np.ndarray, index: int = 0, tau: float = 1.0
) -> tuple[np.ndarray, SoftmaxWeights]:
    """``(-z_t[index] + sum_j P_j z_t[j]) / tau`` with ``P = softmax(z_t @ z_s / tau)``."""
    z_t_all = np.atleast_2d(np.asarray(z_t_all, dtype=np.float64))
    if z_t_all.shape[0] == 0:
        raise ValueError("need at least one target")
    P = softmax(z_t_all @ np.asarray(z_s_i, dtype=np.float64) / tau)
    return (-z_t_all[index] + P @ z_t_all) / tau, SoftmaxWeights(P)


def grad_ce(z_i: np.ndarray, head: ClassifierHead, y_i: int) -> np.ndarray:
    w = head.weight.data
    C = w.shape[1]
    if not 0 <= y_i < C:
        raise ValueError(f"label {y_i} outside [0, {C})")
    P = softmax(w.T @ np.asarray(z_i, dtype=np.float64))
    return -w[:, y_i] + w @ P


def rotation_gap(
    loss_kind: str,
    z_s_i: np.ndarray,
    z_t_all: np.ndarray,
    i: int,
    W: RotationPerturbation,
    *,
    p_mode: str = "pre",
    tau: float = 1.0,
) -> float:
    """Norm of the gradient change w.r.t. ``z_s_i`` when the outputs are rotated by ``W``.

    MSE: ``||(I - W) z_t_i||``. NCE: ``||(I - W)(z_t_i - sum_j P_j z_t_j)||``
    with ``P`` from the unrotated state (``p_mode="pre"``). ``p_mode="post"``
    instead takes the exact difference of gradients when only the targets are
    rotated, so ``P`` is recomputed on the rotated targets.
    """
    z_t_all = np.atleast_2d(np.asarray(z_t_all, dtype=np.float64))
    I_minus_W = np.eye(W.d) - W.matrix
    if loss_kind == "MSE":
        return float(np.linalg.norm(I_minus_W @ z_t_all[i]))
    if loss_kind != "NCE":
        raise ValueError(f"loss_kind must be MSE or NCE, got {loss_kind!r}")
    if p_mode == "pre":
        _, w = grad_nce_distill(z_s_i, z_t_all, i, tau)
        return float(np.linalg.norm(I_minus_W @ (z_t_all[i] - w.P @ z_t_all)) / tau)
    if p_mode == "post":
        g0, _ = grad_nce_distill(z_s_i, z_t_all, i, tau)
        g1, _ = grad_nce_distill(z_s_i, z_t_all @ W.matrix.T, i, tau)
        return float(np.linalg.norm(g1 - g0))
    raise ValueError(f"p_mode must be 'pre' or 'post', got {p_mode!r}")


def alignment_bound(z_s_i: np.ndarray, z_t_all: np.ndarray, i: int) -> tuple[float, float]:
    """``(||z_t_i - sum_j P_j z_t_j||, (1 - P_i) * max_j ||z_t_i - z_t_j||)``.

    Since ``z_t_i - sum_j P_j z_t_j = sum_{j != i} P_j (z_t_i - z_t_j)`` the
    first value never exceeds the second.
    """
    z_t_all = np.atleast_2d(np.asarray(z_t_all, dtype=np.float64))
    _, w = grad_nce_distill(z_s_i, z_t_all, i)
    lhs = float(np.linalg.norm(z_t_all[i] - w.P @ z_t_all))
    spread = float(np.max(np.linalg.norm(z_t_all[i] - z_t_all, axis=1)))
    return lhs, float((1.0 - w.P[i]) * spread)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _concentrate(z_s: np.ndarray, z_t: np.ndarray, i: int, eps: float, max_scale: float = 1e6) -> np.ndarray | None:
    """Smallest power-of-two multiple of ``z_s`` (then bisected) with ``P_i >= 1 - eps``."""

    def p_i(scale: float) -> float:
        return float(softmax(z_t @ (scale * z_s))[i])

    if p_i(1.0) >= 1 - eps:
        return z_s
    hi = 1.0
    while p_i(hi) < 1 - eps:
        hi *= 2.0
        if hi > max_scale:
            return None
    lo = hi / 2.0
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        if p_i(mid) >= 1 - eps:
            hi = mid
        else:
            lo = mid
    return hi * z_s


@dataclass
class StabilityReport:
    trials: int
    eps: float
    nce_wins: int
    ties: int
    premise_violations: int
    mse_gaps: np.ndarray
    nce_gaps: np.ndarray
    p_i: np.ndarray
    premise_ok: np.ndarray
    rows: list[dict] = field(default_factory=list)

    @property
    def counted(self) -> int:
        return int(np.sum(self.premise_ok)) - self.ties

    @property
    def nce_win_fraction(self) -> float:
        return self.nce_wins / self.counted if self.counted else float("nan")

    def summary(self) -> dict:
        def stats(x: np.ndarray) -> dict:
            return {"mean": float(np.mean(x)), "median": float(np.median(x)), "max": float(np.max(x))}

        return {
            "trials": self.trials,
            "eps": self.eps,
            "nce_wins": self.nce_wins,
            "ties": self.ties,
            "premise_violations": self.premise_violations,
            "counted": self.counted,
            "nce_win_fraction": self.nce_win_fraction,
            "mse_gap": stats(self.mse_gaps),
            "nce_gap": stats(self.nce_gaps),
        }


def stability_compare(
    trials: int = 1000,
    d: int = 16,
    batch: int = 8,
    concentration: float = 0.01,
    *,
    rng: np.random.Generator | int | None = 0,
    theta: float | None = None,
    alignment: str = "aligned",
    noise: float = 0.05,
    p_mode: str = "pre",
    rotation: str = "shared",
) -> StabilityReport:
    """Monte Carlo comparison of MSE vs NCE rotation gaps.

    Each trial draws ``batch`` random unit targets, picks an anchor ``i`` and a
    student. With ``alignment="aligned"`` the student points near ``z_t_i`` and
    is scaled until ``P_i >= 1 - concentration``; with ``"random"`` the student
    is a random unit vector. Trials whose student misses the premise are
    flagged, not scored. ``theta=None`` uses a Haar rotation, otherwise a
    rotation by ``theta`` in a random plane.

    ``rotation="per_sample"`` gives every target its own rotation instead of
    one shared matrix (a robustness check beyond the shared-rotation setting;
    gaps then use pre-rotation ``P``).
    """
    if rotation not in ("shared", "per_sample"):
        raise ValueError("rotation must be 'shared' or 'per_sample'")
    rng = np.random.default_rng(rng)
    mse, nce, pis, ok = [], [], [], []
    wins = ties = 0
    rows: list[dict] = []
    for trial in range(trials):
        z_t = _unit(rng.normal(size=(batch, d)))
        i = int(rng.integers(batch))
        if alignment == "aligned":
            z_s = _concentrate(_unit(z_t[i] + noise * rng.normal(size=d)), z_t, i, concentration)
            if z_s is None:
                z_s = _unit(z_t[i] + noise * rng.normal(size=d))
        elif alignment == "random":
            z_s = _unit(rng.normal(size=d))
        else:
            raise ValueError("alignment must be 'aligned' or 'random'")
        if rotation == "shared":
            W = _draw_rotation(d, theta, rng)
            g_mse = rotation_gap("MSE", z_s, z_t, i, W)
            g_nce = rotation_gap("NCE", z_s, z_t, i, W, p_mode=p_mode)
        else:
            g_mse, g_nce = _per_sample_gaps(z_s, z_t, i, [_draw_rotation(d, theta, rng) for _ in range(batch)])
        P_i = float(softmax(z_t @ z_s)[i])
        premise = P_i >= 1 - concentration
        mse.append(g_mse)
        nce.append(g_nce)
        pis.append(P_i)
        ok.append(premise)
        if premise:
            if g_nce == g_mse:
                ties += 1
            elif g_nce < g_mse:
                wins += 1
        rows.append({"trial": trial, "loss_kind": "MSE", "gap_norm": g_mse, "P_i": P_i})
        rows.append({"trial": trial, "loss_kind": "NCE", "gap_norm": g_nce, "P_i": P_i})
    okarr = np.asarray(ok)
    return StabilityReport(
        trials=trials,
        eps=concentration,
        nce_wins=wins,
        ties=ties,
        premise_violations=int(np.sum(~okarr)),
        mse_gaps=np.asarray(mse),
        nce_gaps=np.asarray(nce),
        p_i=np.asarray(pis),
        premise_ok=okarr,
        rows=rows,
    )


def _draw_rotation(d: int, theta: float | None, rng: np.random.Generator) -> RotationPerturbation:
    return RotationPerturbation.random(d, rng) if theta is None else RotationPerturbation.planar(d, theta, rng)


def _per_sample_gaps(
    z_s: np.ndarray, z_t: np.ndarray, i: int, rotations: Sequence[RotationPerturbation]
) -> tuple[float, float]:
    # target j moves by (W_j - I) z_t_j; NCE weights stay at their pre-rotation values
    moves = np.stack([(W.matrix - np.eye(W.d)) @ z for W, z in zip(rotations, z_t)])
    _, w = grad_nce_distill(z_s, z_t, i)
    return float(np.linalg.norm(moves[i])), float(np.linalg.norm(-moves[i] + w.P @ moves))


def random_update_stream(
    steps: int, dim: int, rng: np.random.Generator | int | None = 0, step_scale: float = 0.1
) -> np.ndarray:
    """Random-walk student parameters, shape ``[steps + 1, dim]``."""
    rng = np.random.default_rng(rng)
    deltas = step_scale * rng.normal(size=(steps, dim))
    start = rng.normal(size=(1, dim))
    return np.concatenate([start, start + np.cumsum(deltas, axis=0)])


def ema_consistency_probe(
    m_values: Sequence[float],
    stream: np.ndarray,
    output_fn: Callable[[np.ndarray], np.ndarray] | None = None,
) -> dict[float, np.ndarray]:
    """Per-step teacher output drift for each momentum ``m`` on one student stream.

    The teacher starts at the stream's first parameters and follows
    ``theta_t <- m theta_t + (1 - m) theta_s`` after each student update.
    Returns ``{m: drift}`` with ``drift[k] = ||out(theta_t[k+1]) - out(theta_t[k])||``.
    """
    stream = np.asarray(stream, dtype=np.float64)
    if output_fn is None:
        def output_fn(theta):
            return theta
    drifts: dict[float, np.ndarray] = {}
    for m in m_values:
        if not 0.0 <= m <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        theta = stream[0].copy()
        prev = output_fn(theta)
        out = np.empty(len(stream) - 1)
        for k, theta_s in enumerate(stream[1:]):
            theta = m * theta + (1.0 - m) * theta_s
            cur = output_fn(theta)
            out[k] = np.linalg.norm(cur - prev)
            prev = cur
        drifts[float(m)] = out
    return drifts


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0.0 else float(np.linalg.norm(a - b) / scale)


def gradient_agreement(instances: int = 1000, rng: np.random.Generator | int | None = 0) -> list[dict]:
    """Closed-form vs autodiff gradients on random problems.

    One row per (instance, loss_kind) with the relative error of the
    closed-form gradient of every student row against the tape's result.
    """
    rng = np.random.default_rng(rng)
    rows = []
    for k in range(instances):
        d = int(rng.integers(2, 17))
        K = int(rng.integers(1, 11))
        zs = rng.normal(size=(K, d))
        zt = rng.normal(size=(K, d))

        x = Tensor(zs, requires_grad=True)
        with Tape():
            backward(mse_distill(x, Tensor(zt), reduction="sum"))
        closed = np.stack([grad_mse_distill(zt[i]) for i in range(K)])
        rows.append({"instance": k, "loss_kind": "MSE", "rel_err": _rel_err(closed, x.grad)})

        x = Tensor(zs, requires_grad=True)
        with Tape():
            backward(nce_distill(x, Tensor(zt), tau=1.0, reduction="sum"))
        closed = np.stack([grad_nce_distill(zs[i], zt, i)[0] for i in range(K)])
        rows.append({"instance": k, "loss_kind": "NCE", "rel_err": _rel_err(closed, x.grad)})

        C = int(rng.integers(2, 11))
        head = ClassifierHead.random(d, C, rng)
        labels = rng.integers(0, C, size=K)
        x = Tensor(zs, requires_grad=True)
        with Tape():
            backward(cross_entropy(x, head, labels, reduction="sum"))
        closed = np.stack([grad_ce(zs[i], head, int(labels[i])) for i in range(K)])
        rows.append({"instance": k, "loss_kind": "CE", "rel_err": _rel_err(closed, x.grad)})
    return rows
