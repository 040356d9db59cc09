"""Optimizer, learning-rate schedule, the pre-training loop, progressive
resolution scheduling, and checkpointing.

Every stochastic draw (epoch order, per-sample augmentation, mask) is keyed
by (run seed, step/epoch, index), so a run is a pure function of its
RunConfig: checkpoint resume and stage boundaries are bit-exact by
construction.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imageio, masking, models, objective
from . import tensor as T
from .config import ConfigError, RunConfig
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# AdamW with decoupled weight decay

@dataclass
class OptimState:
    moments: dict = field(default_factory=dict)   # name -> (m, v)
    step: int = 0

    @classmethod
    def for_bundle(cls, bundle: models.ModelBundle) -> "OptimState":
        moments = {name: (np.zeros_like(p.data, dtype=np.float32),
                          np.zeros_like(p.data, dtype=np.float32))
                   for name, p in bundle.params.items() if p.requires_grad}
        return cls(moments=moments, step=0)


def adamw_step(bundle: models.ModelBundle, state: OptimState, lr: float,
               optim_cfg) -> None:
    """One decoupled-weight-decay Adam update over the trainable registry.

    LayerNorm/bias parameters and the mask token (the no_decay set) are
    exempt from decay.
    """
    b1, b2 = optim_cfg.beta1, optim_cfg.beta2
    wd, eps = optim_cfg.weight_decay, optim_cfg.eps
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in bundle.params.items():
        if not p.requires_grad:
            continue
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        g = g.astype(np.float32, copy=False)
        m, v = state.moments[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if wd and name not in bundle.no_decay:
            update = update + wd * p.data
        p.data = (p.data - lr * update.astype(p.data.dtype)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# learning-rate schedule

def lr_at(schedule, step: int, steps_per_epoch: int) -> float:
    """Linear warmup from 0, then cosine decay to 0 (or x0.1 step decay at
    90% of the run).  Steps are global across progressive stages."""
    total = schedule.total_epochs * steps_per_epoch
    warm = schedule.warmup_epochs * steps_per_epoch
    eff = schedule.effective_lr
    if warm > 0 and step < warm:
        return eff * step / warm
    if schedule.shape == "step":
        return eff * (0.1 if step >= 0.9 * total else 1.0)
    span = max(total - warm, 1e-9)
    progress = min(max((step - warm) / span, 0.0), 1.0)
    return eff * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# the loop

class PretrainLoop:
    """Owns the model bundle, optimizer state, and per-step pipeline."""

    def __init__(self, cfg: RunConfig, dataset=None, out_dir=None, resume=None):
        cfg.validate()
        self.cfg = cfg
        self.dataset = dataset if dataset is not None else imageio.load_dataset(
            cfg.data.root or None, cfg.data.format, seed=cfg.data.seed,
            count=cfg.data.count, resolution=cfg.data.resolution)
        if len(self.dataset) != cfg.data.count and cfg.data.format == "synthetic":
            raise ConfigError("dataset length does not match data.count")
        self.stats = (imageio.compute_norm_stats(self.dataset)
                      if cfg.data.norm == "dataset" else imageio.NormStats.identity())
        self.bundle = models.build_bundle(
            cfg.model.encoder_config(), cfg.model.decoder_config(),
            target_kind=cfg.target.kind, mask_size=cfg.mask.size,
            bins=cfg.target.bins, cell=cfg.target.cell,
            channels=cfg.target.hog_config().channels,
            token_learnable=cfg.mask.learnable_token, seed=cfg.data.seed)
        self.opt = OptimState.for_bundle(self.bundle)
        self.start_step = 0
        self.digest = cfg.digest()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        if resume is not None:
            ckpt = models.load_checkpoint(resume)
            if ckpt["digest"] and ckpt["digest"] != self.digest:
                raise ConfigError(
                    f"checkpoint digest {ckpt['digest']} does not match config {self.digest}")
            models.apply_checkpoint(self.bundle, ckpt)
            if ckpt["opt"] is not None:
                self.opt.step = int(ckpt["opt"]["step"])
                for name, (m, v) in ckpt["opt"]["moments"].items():
                    self.opt.moments[name] = (m.astype(np.float32), v.astype(np.float32))
            self.start_step = int(ckpt["step"])
        self.metrics: list = []
        self._metrics_file = None

    # -- single step ---------------------------------------------------------
    def build_batch(self, step: int):
        cfg = self.cfg
        res = cfg.resolution_at(step)
        spe = cfg.steps_per_epoch
        epoch, pos = divmod(step, spe)
        perm = imageio.epoch_order(len(self.dataset), cfg.data.seed, epoch)
        idx = perm[pos * cfg.schedule.batch_size:(pos + 1) * cfg.schedule.batch_size]
        batch = imageio.collate_batch(self.dataset, idx, res, cfg.data.seed, epoch)
        mask = masking.sample_mask(
            len(idx), res, cfg.mask.mask_config(),
            imageio.stream_rng(cfg.data.seed, 0x3A55, step))
        return batch, mask

    def masked_input(self, batch: imageio.ImageBatch, mask) -> Tensor:
        token = self.bundle.mask_token
        if self.bundle.enc.discard_masked:
            # MAE mode: pixels stay intact, visible tokens selected in encode
            return Tensor(imageio.normalize(batch.data, self.stats))
        if self.cfg.mask.pre_norm:
            x = masking.apply_mask(Tensor(batch.data), mask, token)
            inv_std = (1.0 / self.stats.std).reshape(3, 1, 1)
            shift = (-self.stats.mean / self.stats.std).reshape(3, 1, 1)
            return T.add(T.mul(x, Tensor(inv_std)), Tensor(shift))
        x = Tensor(imageio.normalize(batch.data, self.stats))
        return masking.apply_mask(x, mask, token)

    def forward(self, batch: imageio.ImageBatch, mask):
        x = self.masked_input(batch, mask)
        enc_out = models.encode(self.bundle, x, mask=mask)
        return models.decode(self.bundle, enc_out, mask)

    def run_step(self, step: int, timing: dict | None = None) -> dict:
        cfg = self.cfg
        t0 = time.perf_counter()
        batch, mask = self.build_batch(step)
        t1 = time.perf_counter()
        target = objective.extract_targets(
            batch, mask, cfg.target.kind,
            hog_cfg=cfg.target.hog_config(), norm_stats=self.stats)
        t2 = time.perf_counter()
        try:
            pred = self.forward(batch, mask)
            loss = objective.masked_l2_loss(pred, target)
            t3 = time.perf_counter()
            T.backward(loss)
            t4 = time.perf_counter()
        except NumericError:
            self._dump_diagnostics(step, batch, mask)
            raise
        lr = lr_at(cfg.schedule, step, cfg.steps_per_epoch)
        adamw_step(self.bundle, self.opt, lr, cfg.optim)
        T.zero_grads(self.bundle.params.values())
        t5 = time.perf_counter()

        wall = t5 - t0
        record = {"step": step, "wall_ms": wall * 1e3, "lr": lr,
                  "loss": loss.item(),
                  "imgs_per_sec": batch.data.shape[0] / max(wall, 1e-9)}
        if timing is not None:
            timing.setdefault("data", []).append(t1 - t0)
            timing.setdefault("targets", []).append(t2 - t1)
            timing.setdefault("forward", []).append(t3 - t2)
            timing.setdefault("backward", []).append(t4 - t3)
            timing.setdefault("optimizer", []).append(t5 - t4)
        self._log_record(record)
        return record

    def _dump_diagnostics(self, step: int, batch, mask) -> None:
        data = batch.data
        log.error(
            "non-finite loss at step %d: batch shape=%s min=%.4g max=%.4g mean=%.4g, "
            "masked blocks per sample=%s, lr=%.3g", step, data.shape, data.min(),
            data.max(), data.mean(), mask.masked_count.tolist(),
            lr_at(self.cfg.schedule, step, self.cfg.steps_per_epoch))
        if self.out_dir is not None:
            dump = {"step": step, "batch_min": float(data.min()),
                    "batch_max": float(data.max()), "batch_mean": float(data.mean()),
                    "masked_counts": mask.masked_count.tolist()}
            (self.out_dir / "abort.json").write_text(json.dumps(dump, indent=2))

    def _log_record(self, record: dict) -> None:
        self.metrics.append(record)
        if self.out_dir is not None:
            if self._metrics_file is None:
                self._metrics_file = open(self.out_dir / "metrics.ndjson", "a")
            self._metrics_file.write(json.dumps(record) + "\n")
            self._metrics_file.flush()

    # -- full runs ------------------------------------------------------------
    def run(self) -> dict:
        cfg = self.cfg
        spans = cfg.stage_step_spans()
        boundaries = {end: i for i, (_, _, end) in enumerate(spans)}
        last = None
        for step in range(self.start_step, cfg.total_steps):
            last = self.run_step(step)
            if step + 1 in boundaries and self.out_dir is not None:
                self.save(self.out_dir / f"stage{boundaries[step + 1]}.ckpt", step + 1)
        if self.out_dir is not None:
            self.save(self.out_dir / "final.ckpt", cfg.total_steps)
        if self._metrics_file is not None:
            self._metrics_file.close()
            self._metrics_file = None
        return last if last is not None else {}

    def save(self, path, step: int) -> None:
        models.save_checkpoint(path, self.bundle, step=step, digest=self.digest,
                               opt_state=self.opt)


def pretrain(cfg: RunConfig, dataset=None, out_dir=None, resume=None) -> PretrainLoop:
    """Fixed-resolution pre-training (a single-stage schedule)."""
    if len(cfg.schedule.stages) != 1:
        raise ConfigError("pretrain expects a single-stage schedule; use pretrain_progressive")
    loop = PretrainLoop(cfg, dataset=dataset, out_dir=out_dir, resume=resume)
    loop.run()
    return loop


def pretrain_progressive(cfg: RunConfig, dataset=None, out_dir=None,
                         resume=None) -> PretrainLoop:
    """Progressive-resolution pre-training over the configured stages.

    Stage boundaries regenerate the positional embedding for the new grid and
    rescale the window; every learnable parameter and the optimizer state
    continue bit-exactly on one global schedule.
    """
    loop = PretrainLoop(cfg, dataset=dataset, out_dir=out_dir, resume=resume)
    loop.run()
    return loop
