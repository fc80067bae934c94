"""Multi-iteration L1 loss, two-phase training, checkpoints and gradient checks."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import Tensor

from .coarse_depth import DepthMap, make_planes
from .config import Config
from .gradchecks import GRADIENT_CHECKS, finite_difference_check, gradient_check, relative_error  # noqa: F401
from .model import FlowMVS, images_tensor
from .pointflow import RefinementSchedule
from .synth import SceneBundle, select_views

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "flowmvs-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: "Checkpoint | None") -> None:
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class LossConfig:
    lambdas: tuple[float, ...]
    step_sizes: tuple[float, ...]  # s^(0) is the coarse plane spacing

    def __post_init__(self) -> None:
        if len(self.lambdas) != len(self.step_sizes):
            raise ValueError("one lambda per prediction is required")
        if any(x < 0 for x in self.lambdas):
            raise ValueError("lambdas must be non-negative")
        if any(s <= 0 for s in self.step_sizes):
            raise ValueError("normalising step sizes must be positive")


def align_gt(gt: DepthMap, shape: tuple[int, int]) -> DepthMap:
    """Nearest-neighbour (strided) resampling of a ground-truth map to ``shape``."""
    h, w = gt.shape
    th, tw = shape
    if (h, w) == (th, tw):
        return gt
    if h % th or w % tw or h // th != w // tw:
        raise ValueError(f"cannot align ground truth {gt.shape} to {shape}")
    f = h // th
    return DepthMap(gt.values[::f, ::f], gt.valid_mask[::f, ::f], gt.scale / f)


def multi_iteration_loss(preds: Sequence[DepthMap], gt: DepthMap, cfg: LossConfig,
                         return_terms: bool = False):
    """``sum_i lambda_i / s_i * sum_{valid p} |gt(p) - pred_i(p)|``."""
    if len(preds) > len(cfg.lambdas):
        raise ValueError(f"{len(preds)} predictions but only {len(cfg.lambdas)} loss weights")
    total = None
    terms = []
    any_valid = False
    for pred, lam, s in zip(preds, cfg.lambdas, cfg.step_sizes):
        g = align_gt(gt, pred.shape)
        valid = g.valid_mask & pred.valid_mask
        if bool(valid.any()):
            any_valid = True
        err = (g.values.to(pred.values.dtype) - pred.values).abs()
        term = torch.where(valid, err, torch.zeros_like(err)).sum() * (lam / s)
        terms.append(term)
        total = term if total is None else total + term
    if not any_valid:
        raise ValueError("no valid ground-truth pixel")
    return (total, terms) if return_terms else total


def mean_abs_error(pred: DepthMap, gt: DepthMap) -> float:
    g = align_gt(gt, pred.shape)
    valid = g.valid_mask & pred.valid_mask
    if not bool(valid.any()):
        raise ValueError("no valid ground-truth pixel")
    return float((g.values.double() - pred.values.detach().double()).abs()[valid].mean())


def evaluate_depth_errors(model: FlowMVS, samples: Sequence["Sample"], schedule: RefinementSchedule,
                          planes: int, coarse_transform: Callable | None = None) -> np.ndarray:
    """Mean absolute depth error of every level ``D^(0..l)``, averaged over ``samples``.

    ``coarse_transform(depth, sample_index)`` may replace the predicted coarse
    map before refinement (noise injection); level 0 then reports the
    replaced map.
    """
    if not samples:
        raise ValueError("no evaluation samples")
    was_training = model.training
    model.eval()
    err = np.zeros(schedule.iterations + 1)
    with torch.no_grad():
        for i, s in enumerate(samples):
            ps = make_planes(*s.depth_range, planes)
            override = None
            if coarse_transform is not None:
                _, _, coarse, _ = model.coarse(s.images, s.views, ps)
                override = coarse_transform(coarse, i)
            pred = model(s.images, s.views, ps, schedule, coarse_override=override)
            err += [mean_abs_error(d, s.gt) for d in pred.depths]
    model.train(was_training)
    return err / len(samples)


# -- samples -------------------------------------------------------------------


@dataclass
class Sample:
    images: Tensor
    views: list
    gt: DepthMap
    depth_range: tuple[float, float]
    scene: int
    ref: int


def make_samples(scenes: Sequence[SceneBundle], num_views: int, refs: Iterable[int] | None = None,
                 dtype: torch.dtype = torch.float32) -> list[Sample]:
    """One sample per (scene, reference view); sources are the nearest cameras."""
    out = []
    for si, scene in enumerate(scenes):
        ref_ids = list(range(scene.num_views)) if refs is None else list(refs)
        for r in ref_ids:
            idx = select_views(scene.views, r, num_views)
            gt = torch.as_tensor(scene.gt_depths[r], dtype=dtype)
            out.append(Sample(images_tensor(scene.images[idx], dtype), [scene.views[i] for i in idx],
                              DepthMap(gt, gt > 0), scene.depth_range, si, r))
    return out


# -- checkpoints ---------------------------------------------------------------


@dataclass
class Checkpoint:
    model_state: dict
    config: dict
    config_hash: str
    epoch: int = 0
    phase: int = 0
    optimizer_state: dict | None = None
    history: list = field(default_factory=list)

    def build_model(self) -> FlowMVS:
        cfg = Config(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.config.items()})
        model = FlowMVS(cfg)
        model.load_state_dict(self.model_state)
        model.eval()
        return model


def make_checkpoint(model: FlowMVS, epoch: int, phase: int, optimizer=None, history=None) -> Checkpoint:
    return Checkpoint(
        model_state=copy.deepcopy(model.state_dict()),
        config=model.cfg.to_dict(),
        config_hash=model.cfg.model_hash(),
        epoch=epoch,
        phase=phase,
        optimizer_state=copy.deepcopy(optimizer.state_dict()) if optimizer is not None else None,
        history=list(history or []),
    )


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Single-file container; see the README for the key layout."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "epoch": ckpt.epoch,
        "phase": ckpt.phase,
        "model_state": ckpt.model_state,
        "optimizer_state": ckpt.optimizer_state,
        "history": ckpt.history,
    }
    tmp = Path(str(path) + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return Checkpoint(payload["model_state"], payload["config"], payload["config_hash"],
                      payload["epoch"], payload["phase"], payload["optimizer_state"],
                      payload.get("history", []))


# -- training loop ---------------------------------------------------------------


def set_reference_mode(seed: int) -> None:
    """Single-threaded deterministic execution."""
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def _lr(cfg: Config, epoch: int) -> float:
    return cfg.learning_rate * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


def _params_finite(model: FlowMVS) -> bool:
    return all(bool(torch.isfinite(p).all()) for p in model.parameters())


def train(scenes: Sequence[SceneBundle], cfg: Config, *, log_path: str | Path | None = None,
          checkpoint_path: str | Path | None = None, model: FlowMVS | None = None,
          phase1_epochs: int | None = None, phase2_epochs: int | None = None,
          max_seconds: float | None = None, on_epoch: Callable | None = None,
          freeze_coarse: bool = False) -> Checkpoint:
    """Phase 1 trains the coarse branch alone, phase 2 the whole network end to end.

    With ``freeze_coarse`` phase 2 updates only the flow network, so several
    refiners can be compared on one shared coarse stage. One log record
    (JSON line) is written per batch.
    """
    import time

    if not scenes:
        raise ValueError("training needs at least one scene")
    set_reference_mode(cfg.seed)
    model = model if model is not None else FlowMVS(cfg)
    model.train()
    samples = make_samples(scenes, cfg.num_views_train)
    if not any(bool(s.gt.valid_mask.any()) for s in samples):
        raise ValueError("training scenes carry no ground-truth depth")
    rng = np.random.default_rng(cfg.seed)
    schedule = RefinementSchedule(cfg.train_steps, cfg.train_upsample)
    p1 = cfg.phase1_epochs if phase1_epochs is None else phase1_epochs
    p2 = cfg.phase2_epochs if phase2_epochs is None else phase2_epochs
    log = open(log_path, "w") if log_path is not None else None
    history: list[dict] = []
    last_good = make_checkpoint(model, 0, 0)
    started = time.monotonic()
    epoch = 0
    try:
        for phase, n_epochs in ((1, p1), (2, p2)):
            if n_epochs <= 0:
                continue
            if phase == 1:
                params = model.coarse_parameters()
            else:
                params = list(model.flow.parameters()) if freeze_coarse else list(model.parameters())
            opt = torch.optim.RMSprop(params, lr=_lr(cfg, epoch))
            sched = schedule if phase == 2 else schedule.truncated(0)
            for p in model.coarse_parameters():
                p.requires_grad_(not (phase == 2 and freeze_coarse))
            for _ in range(n_epochs):
                for group in opt.param_groups:
                    group["lr"] = _lr(cfg, epoch)
                order = rng.permutation(len(samples))
                for b0 in range(0, len(order), cfg.batch_size):
                    opt.zero_grad(set_to_none=True)
                    batch_terms = np.zeros(sched.iterations + 1)
                    batch_loss = 0.0
                    for si in order[b0 : b0 + cfg.batch_size]:
                        s = samples[si]
                        planes = make_planes(*s.depth_range, cfg.planes_train)
                        loss_cfg = LossConfig(cfg.lambdas(sched.iterations),
                                              (planes.spacing,) + sched.step_sizes)
                        try:
                            pred = model(s.images, s.views, planes, sched)
                        except FloatingPointError as exc:
                            raise TrainingDiverged(f"{exc} at epoch {epoch}", last_good) from exc
                        loss, terms = multi_iteration_loss(pred.depths, s.gt, loss_cfg, return_terms=True)
                        if not torch.isfinite(loss):
                            raise TrainingDiverged(f"non-finite loss at epoch {epoch}", last_good)
                        loss.backward()
                        batch_loss += float(loss.detach())
                        batch_terms += np.array([float(t.detach()) for t in terms])
                    opt.step()
                    if not _params_finite(model):
                        raise TrainingDiverged(f"non-finite parameters after a step at epoch {epoch}", last_good)
                    rec = {"epoch": epoch, "phase": phase, "batch": b0 // cfg.batch_size,
                           "loss": batch_loss, "terms": batch_terms.tolist(), "lr": opt.param_groups[0]["lr"]}
                    history.append(rec)
                    if log is not None:
                        log.write(json.dumps(rec) + "\n")
                        log.flush()
                epoch += 1
                last_good = make_checkpoint(model, epoch, phase, opt, history)
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, last_good)
                if on_epoch is not None:
                    on_epoch(epoch, phase, model)
                    if not _params_finite(model):
                        raise TrainingDiverged(f"non-finite parameters after epoch {epoch}", last_good)
                if max_seconds is not None and time.monotonic() - started > max_seconds:
                    logger.warning("training stopped early after %d epochs (time budget)", epoch)
                    break
    finally:
        for p in model.coarse_parameters():
            p.requires_grad_(True)
        if log is not None:
            log.close()
    model.eval()
    return last_good
