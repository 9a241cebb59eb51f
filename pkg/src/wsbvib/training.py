"""Minibatch training with burn-in, augmentation, and early stopping.

All stochastic choices are derived from named seed streams keyed by
(seed, purpose, epoch, ...), so a resumed run replays the remaining epochs
exactly and two runs with one seed produce identical logs. The global
torch generator is reseeded at each epoch start for the same reason.
"""

from __future__ import annotations

import csv
import dataclasses
import os
import time
from dataclasses import dataclass

import numpy as np
import torch

from .config import RunConfig
from .core import LatentGaussian, PointSet, Volume, read_point_set, read_volume
from .errors import ConfigError, DataError, TrainingError
from .losses import bvib_objective, chamfer_bidirectional, vib_objective
from .network import ShapePredictor, build_model, load_checkpoint, reparameterize, save_checkpoint
from .rng import np_rng, stream_words
from .ssm import farthest_point_indices
from .synth import load_manifest

_G = "%.10g"

LOG_COLUMNS = ("epoch", "total", "nll", "kl_latent", "kl_weights", "spread",
               "burnin_lambda", "deterministic", "val_score", "wall_time")


@dataclass(frozen=True)
class TrainLogRow:
    epoch: int
    total: float
    nll: float
    kl_latent: float
    kl_weights: float
    spread: float
    burnin_lambda: float
    deterministic: float
    val_score: float
    wall_time: float


@dataclass(frozen=True)
class TrainResult:
    best_checkpoint: str
    last_checkpoint: str
    log_path: str
    rows: list
    best_epoch: int
    best_score: float


def augment(volume: Volume, rng: np.random.Generator, ceiling: float) -> Volume:
    """Additive Gaussian noise with variance drawn from [0, ceiling * range^2]."""
    if ceiling < 0:
        raise ConfigError(f"augmentation ceiling must be >= 0, got {ceiling}")
    span = volume.value_range()
    var = rng.uniform(0.0, ceiling * span ** 2)
    noise = rng.standard_normal(volume.data.shape)
    data = (volume.data + np.sqrt(var) * noise).astype(np.float32)
    return Volume(data, spacing=volume.spacing, origin=volume.origin)


class TrainingData:
    """Preloaded volumes and supervision targets for the train/val splits.

    Only the label files the supervision mode actually needs are opened:
    cloud runs never touch ground-truth correspondence files.
    """

    def __init__(self, manifest_path: str, supervision: str, m_out: int):
        samples = load_manifest(manifest_path)
        self.train = [s for s in samples if s.split == "train"]
        self.val = [s for s in samples if s.split == "val"]
        if not self.train:
            raise TrainingError("empty train split")
        if not self.val:
            raise TrainingError("empty val split")
        self.volumes = {}
        for s in [*self.train, *self.val]:
            self.volumes[s.id] = read_volume(s.volume_path)
        self.gt_subset = None
        self.targets = {}
        if supervision == "pdm":
            for s in [*self.train, *self.val]:
                if s.gt_path is None:
                    raise TrainingError(
                        f"{s.id}: pdm supervision needs ground-truth correspondences")
            gts = {s.id: read_point_set(s.gt_path).points
                   for s in [*self.train, *self.val]}
            mean_gt = np.mean(np.stack([gts[s.id] for s in self.train]), axis=0)
            if mean_gt.shape[0] < m_out:
                raise TrainingError(
                    f"ground truth has {mean_gt.shape[0]} points, model needs {m_out}")
            self.gt_subset = farthest_point_indices(mean_gt, m_out)
            for sid, pts in gts.items():
                self.targets[sid] = PointSet(pts[self.gt_subset], ordered=True)
        else:
            for s in [*self.train, *self.val]:
                cloud = read_point_set(s.cloud_path)
                if cloud.ordered:
                    raise DataError(f"{s.id}: expected an unordered cloud file")
                self.targets[s.id] = cloud

    def volume_shape(self):
        return self.volumes[self.train[0].id].shape


def validation_score(model: ShapePredictor, data: TrainingData, supervision: str,
                     n_latent_samples: int, n_mask_samples: int,
                     rng: np.random.Generator) -> float:
    """Mean-squared correspondence error (pdm) or bidirectional CD (cloud).

    Scored on the predictive mean (the grid mean over mask and latent
    samples), which is the point estimate evaluation reports; the single-pass
    decode of q.mu drifts away from it once the probabilistic terms are
    active, so scoring that path would misrank checkpoints.
    """
    total = 0.0
    for s in data.val:
        pred = model.predict(data.volumes[s.id], n_latent_samples,
                             n_mask_samples, rng=rng)
        target = data.targets[s.id]
        if supervision == "pdm":
            diff = pred.mean - target.points
            total += float((diff ** 2).sum(axis=-1).mean())
        else:
            total += float(chamfer_bidirectional(pred.mean, target))
    return total / len(data.val)


def _seed_int(seed: int, purpose: str, *idx) -> int:
    return int(stream_words(seed, purpose, *idx)[0])


def _objective_for_sample(model, config: RunConfig, q_all, k, target, epoch):
    s_train = config.loss.n_latent_samples_train
    qk = LatentGaussian(q_all.mu[k:k + 1], q_all.log_var[k:k + 1])
    eps = torch.randn(s_train, config.model.latent_dim)
    z = reparameterize(LatentGaussian(q_all.mu[k], q_all.log_var[k]), eps)
    pred = model._decode(z)
    if config.mode == "vib":
        return vib_objective(pred, qk, target, config.loss, epoch, config.supervision)
    return bvib_objective(pred.unsqueeze(0), qk, model.weight_kl(), target,
                          config.loss, epoch, config.supervision)


def _write_log(path: str, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOG_COLUMNS)
        for r in rows:
            writer.writerow([r.epoch] + [_G % getattr(r, c) for c in LOG_COLUMNS[1:]])


def read_train_log(path: str) -> list:
    rows = []
    with open(path) as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != list(LOG_COLUMNS):
            raise DataError(f"{path}: unexpected train log header {header}")
        for row in reader:
            rows.append(TrainLogRow(int(row[0]), *(float(v) for v in row[1:])))
    return rows


def train(config: RunConfig, resume_from: str | None = None) -> TrainResult:
    """Run the training loop; returns paths to the best checkpoint and log."""
    data = TrainingData(config.manifest, config.supervision, config.model.m_out)
    if data.volume_shape() != config.model.input_resolution:
        raise TrainingError(
            f"cohort volumes are {data.volume_shape()} but the model expects "
            f"{config.model.input_resolution}; set model.input_resolution")
    os.makedirs(config.out_dir, exist_ok=True)
    best_path = os.path.join(config.out_dir, "checkpoint_best.pt")
    last_path = os.path.join(config.out_dir, "checkpoint_last.pt")
    log_path = os.path.join(config.out_dir, "train_log.csv")
    flat_config = {k: list(v) if isinstance(v, tuple) else v
                   for k, v in config.as_flat_dict().items()}
    gt_subset = None if data.gt_subset is None else data.gt_subset.tolist()

    if resume_from is not None:
        model, payload = load_checkpoint(resume_from)
        extra = payload["extra"]
        # Stopping knobs and the output location may change between the
        # original run and a resumption; everything else must be identical
        # or the replay would silently diverge.
        loose = ("train.max_epochs", "train.patience", "train.out_dir")
        stored = {k: v for k, v in extra.get("run_config", {}).items()
                  if k not in loose}
        current = {k: v for k, v in flat_config.items() if k not in loose}
        if stored != current:
            diff = sorted(k for k in set(stored) | set(current)
                          if stored.get(k) != current.get(k))
            raise ConfigError(
                f"resume config does not match the checkpoint's (differs: {diff})")
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        optimizer.load_state_dict(payload["optimizer_state"])
        start_epoch = extra["epoch"] + 1
        best = extra["best_score"]
        best_epoch = extra["best_epoch"]
        since = extra["since_improve"]
        rows = [TrainLogRow(**r) for r in extra["log_rows"]]
    else:
        model = build_model(config.network_config(), seed=_seed_int(config.seed, "model-init"))
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        start_epoch = 0
        best = float("inf")
        best_epoch = -1
        since = 0
        rows = []
    if config.mode == "bvib":
        model.set_dataset_size(len(data.train))

    n_train = len(data.train)
    for epoch in range(start_epoch, config.max_epochs):
        t0 = time.perf_counter()
        torch.manual_seed(_seed_int(config.seed, "torch-epoch", epoch))
        order = np_rng(config.seed, "batch-order", epoch).permutation(n_train)
        sums = dict.fromkeys(LOG_COLUMNS[1:8], 0.0)
        n_samples = 0
        for start in range(0, n_train, config.batch_size):
            batch_idx = order[start:start + config.batch_size]
            xs = []
            for gi in batch_idx:
                sample = data.train[int(gi)]
                arng = np_rng(config.seed, "augment", epoch, int(gi))
                xs.append(augment(data.volumes[sample.id], arng,
                                  config.augment_ceiling).data)
            x = torch.from_numpy(np.stack(xs))
            optimizer.zero_grad()
            q_all = model.encode(x)
            parts = []
            for k, gi in enumerate(batch_idx):
                target = data.targets[data.train[int(gi)].id]
                parts.append(_objective_for_sample(model, config, q_all, k, target, epoch))
            batch_loss = torch.stack([p.total for p in parts]).mean()
            if not torch.isfinite(batch_loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}: "
                    + ", ".join(f"{c}={float(np.asarray(getattr(parts[0], c).detach() if torch.is_tensor(getattr(parts[0], c)) else getattr(parts[0], c))):.3g}"
                                for c in LOG_COLUMNS[1:8]))
            batch_loss.backward()
            optimizer.step()
            model.step += 1
            for p in parts:
                for c in LOG_COLUMNS[1:8]:
                    v = getattr(p, c)
                    sums[c] += float(v.detach()) if torch.is_tensor(v) else float(v)
            n_samples += len(parts)

        score = validation_score(model, data, config.supervision,
                                 config.infer_latent_samples,
                                 config.infer_mask_samples,
                                 np_rng(config.seed, "val-score", epoch))
        if not np.isfinite(score):
            raise TrainingError(f"non-finite validation score at epoch {epoch}")
        row = TrainLogRow(epoch=epoch, val_score=score,
                          wall_time=time.perf_counter() - t0,
                          **{c: sums[c] / n_samples for c in LOG_COLUMNS[1:8]})
        rows.append(row)

        if score < best:
            best = score
            best_epoch = epoch
            since = 0
            save_checkpoint(best_path, model, optimizer=optimizer, extra={
                "run_config": flat_config, "epoch": epoch, "val_score": score,
                "gt_subset": gt_subset, "n_train": n_train,
            })
        else:
            since += 1
        save_checkpoint(last_path, model, optimizer=optimizer, extra={
            "run_config": flat_config, "epoch": epoch, "best_score": best,
            "best_epoch": best_epoch, "since_improve": since,
            "gt_subset": gt_subset, "n_train": n_train,
            "log_rows": [dataclasses.asdict(r) for r in rows],
        })
        _write_log(log_path, rows)
        if since >= config.patience:
            break

    if best_epoch < 0:
        raise TrainingError("training produced no finite validation score")
    return TrainResult(best_checkpoint=best_path, last_checkpoint=last_path,
                       log_path=log_path, rows=rows, best_epoch=best_epoch,
                       best_score=best)
