"""Checkpoints and schema-stable CSV/JSON outputs."""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .nn import EncoderSpec, SlimmableEncoder, width_key

__all__ = [
    "METRIC_COLUMNS",
    "SWEEP_COLUMNS",
    "load_checkpoint",
    "save_checkpoint",
    "write_csv",
    "write_json",
    "write_run",
]

METRIC_COLUMNS = (
    "iter", "lr", "width_set", "loss", "loss_base", "loss_distill", "loss_greg", "feature_std", "mean_abs_cos",
)
SWEEP_COLUMNS = ("width", "params_active", "accuracy")


def write_csv(path: str | os.PathLike, rows: Iterable[dict], columns: Sequence[str]) -> None:
    """Header always written; columns in the given order; extra keys are an error."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="raise")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_json(path: str | os.PathLike, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=_jsonable)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def save_checkpoint(enc: SlimmableEncoder, path: str | os.PathLike) -> None:
    """Parameters and normalization statistics in one ``.npz``; the encoder
    spec goes into a JSON ``meta`` entry so the file is self-describing."""
    arrays = {f"param/{k}": v for k, v in enc.state_dict().items()}
    for layer, stats in enc.norm_stats().items():
        for w, (mean, var) in stats.items():
            arrays[f"stats/{layer}/{w!r}/mean"] = mean
            arrays[f"stats/{layer}/{w!r}/var"] = var
    meta = json.dumps({"encoder": dataclasses.asdict(enc.spec)})
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(meta.encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path: str | os.PathLike) -> SlimmableEncoder:
    with np.load(path) as npz:
        meta = json.loads(bytes(npz["__meta__"]).decode())
        enc = SlimmableEncoder(EncoderSpec(**meta["encoder"]), rng=0)
        state = {k[len("param/"):]: npz[k] for k in npz.files if k.startswith("param/")}
        stats: dict[str, dict] = {}
        for k in npz.files:
            if not k.startswith("stats/") or not k.endswith("/mean"):
                continue
            _, layer, w, _ = _split_stat(k)
            stats.setdefault(layer, {})[width_key(float(w))] = (npz[k], npz[k[: -len("mean")] + "var"])
    enc.load_state_dict(state)
    enc.load_norm_stats(stats)
    return enc


def _split_stat(key: str) -> tuple[str, str, str, str]:
    head, rest = key.split("/", 1)
    layer_w, moment = rest.rsplit("/", 1)
    layer, w = layer_w.rsplit("/", 1)
    return head, layer, w, moment


def write_run(artifacts, out_dir: str | os.PathLike) -> dict[str, Path]:
    """Metrics CSV, cost ledger CSV, checkpoint and JSON summary for one run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": out / "metrics.csv",
        "ledger": out / "cost_ledger.csv",
        "checkpoint": out / "checkpoint.npz",
        "summary": out / "summary.json",
    }
    write_csv(paths["metrics"], ({k: r.get(k, "") for k in METRIC_COLUMNS} for r in artifacts.metrics), METRIC_COLUMNS)
    with open(paths["ledger"], "w", newline="") as fh:
        artifacts.ledger.write_csv(fh)
    save_checkpoint(artifacts.encoder, paths["checkpoint"])
    write_json(paths["summary"], artifacts.summary())
    return paths
