"""Minibatch Adam training with validation-based model selection.

Batches are processed as micro-batches whose gradients are accumulated with
weights proportional to their size, so the update equals the full-batch
gradient while peak memory stays bounded by the micro-batch.  Validation is
deterministic (latents at their means), the per-epoch loss log is written as
CSV, and the returned parameters are the minimum-validation-loss snapshot.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, Split
from .errors import ConfigError, NumericError
from .losses import LossWeights, loss_total
from .model import CrnModel
from .optim import ParamStore, adam_step_grads, save_checkpoint
from .rng import Rng, derive_seed

LOG_FIELDS = ("l_y", "l_x", "l_a", "l_elbo", "total")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 256
    micro_batch: int = 32
    lr: float = 1e-4
    clip_norm: float = 10.0
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if self.batch_size < 1 or self.micro_batch < 1:
            raise ConfigError("batch sizes must be positive")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        self.weights.validate()
        return self


def _episode_loss(model: CrnModel, leaves, split: Split, idx, weights,
                  mode: str, rng: Rng | None):
    xb = split.x_local[idx].astype(np.float64)
    gb = split.x_global[idx].astype(np.float64)
    ab = split.treatment[idx].astype(np.float64)
    yb = split.outcome[idx].astype(np.float64)
    roll = model.rollout(leaves, xb, gb, ab, mode, rng=rng,
                         sample_latents=mode == "train" and rng is not None)
    return loss_total(roll, xb, gb, yb, ab, weights)


def validation_loss(model: CrnModel, store: ParamStore, split: Split,
                    weights: LossWeights, micro_batch: int = 32) -> dict:
    """Deterministic validation components (latents at their means)."""
    n = split.n
    acc = {k: 0.0 for k in LOG_FIELDS}
    for start in range(0, n, micro_batch):
        idx = np.arange(start, min(start + micro_batch, n))
        tape = T.Tape(record=False)
        leaves = store.bind(tape)
        _, parts = _episode_loss(model, leaves, split, idx, weights,
                                 "train", None)
        for k in LOG_FIELDS:
            acc[k] += parts[k if k != "total" else "total"] * len(idx) / n
    return acc


def _clip_grads(grads: dict[str, np.ndarray], clip_norm: float):
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if not np.isfinite(total):
        raise NumericError(f"non-finite gradient norm {total}")
    if total > clip_norm:
        scale = clip_norm / total
        for name in grads:
            grads[name] = grads[name] * scale
        return total, True
    return total, False


def train(model: CrnModel, dataset: Dataset, cfg: TrainConfig,
          out_dir: str | None = None):
    """Run the optimization; returns (best ParamStore, summary dict).

    The summary carries per-epoch rows (also written to loss_log.csv under
    out_dir together with best/last checkpoints), the initial validation
    loss, the selected epoch, and the count of gradient-clip events.
    """
    cfg.validate()
    train_split, val_split = dataset.train, dataset.val
    store = model.init_store(cfg.seed)
    root = Rng(derive_seed(cfg.seed, "train"))

    init_val = validation_loss(model, store, val_split, cfg.weights,
                               cfg.micro_batch)
    best_val = init_val["total"]
    best_store = store.copy()
    best_epoch = 0
    rows = []
    clip_events = 0

    for epoch in range(1, cfg.epochs + 1):
        order = root.fork("shuffle", epoch).permutation(train_split.n)
        train_acc = {k: 0.0 for k in LOG_FIELDS}
        for b_start in range(0, train_split.n, cfg.batch_size):
            batch_idx = order[b_start:b_start + cfg.batch_size]
            batch_n = len(batch_idx)
            grads_sum: dict[str, np.ndarray] = {}
            for m_start in range(0, batch_n, cfg.micro_batch):
                idx = batch_idx[m_start:m_start + cfg.micro_batch]
                tape = T.Tape()
                leaves = store.bind(tape)
                rng = root.fork("latent", epoch * 1_000_003 + b_start + m_start)
                total, parts = _episode_loss(model, leaves, train_split, idx,
                                             cfg.weights, "train", rng)
                if not np.isfinite(parts["total"]):
                    raise NumericError(
                        f"training loss diverged at epoch {epoch}: {parts}")
                scaled = T.mul(total, len(idx) / batch_n)
                T.backward(scaled)
                for name, g in store.gradients().items():
                    acc = grads_sum.get(name)
                    grads_sum[name] = g.copy() if acc is None else acc + g
                for k in LOG_FIELDS:
                    train_acc[k] += parts[k] * len(idx) / train_split.n
            _, clipped = _clip_grads(grads_sum, cfg.clip_norm)
            clip_events += int(clipped)
            adam_step_grads(store, grads_sum, cfg.lr)
        val = validation_loss(model, store, val_split, cfg.weights,
                              cfg.micro_batch)
        rows.append({"epoch": epoch,
                     **{f"train_{k}": train_acc[k] for k in LOG_FIELDS},
                     **{f"val_{k}": val[k] for k in LOG_FIELDS}})
        if val["total"] < best_val:
            best_val = val["total"]
            best_store = store.copy()
            best_epoch = epoch

    summary = {"initial_val": init_val, "best_epoch": best_epoch,
               "best_val": best_val, "clip_events": clip_events,
               "epochs": cfg.epochs, "rows": rows,
               "variant": model.variant.value}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "loss_log.csv", "w", newline="") as fh:
            names = ["epoch"] + [f"train_{k}" for k in LOG_FIELDS] \
                + [f"val_{k}" for k in LOG_FIELDS]
            writer = csv.DictWriter(fh, fieldnames=names)
            writer.writeheader()
            writer.writerows(rows)
        save_checkpoint(best_store, str(out / "best"))
        save_checkpoint(store, str(out / "last"))
    return best_store, summary
