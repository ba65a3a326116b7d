"""Training and evaluation loops.

Training runs Adam over whatever the freeze plan left trainable, on a loss
that mixes binary cross-entropy with a soft Dice term. Everything that
affects results is derived from the run seed: shuffling, prompt placement,
and torch init all use it, and the thread count is pinned to one so CPU
runs reproduce bit-for-bit. A finished run leaves a JSON run record and a
checkpoint in the output directory.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (
    checkpoint_from_model,
    load_checkpoint,
    load_state_into,
    optimizer_to_arrays,
    save_checkpoint,
)
from .config import ConfigError
from .data import sample_point_prompt
from .metrics import MetricReport
from .model import Samus
from .registry import FREEZE_PLANS, ParamRegistry
from .sam_head import MaskPrediction

PROMPT_MODES = ("manual", "auto")


@dataclass(frozen=True)
class Sample:
    """One training or evaluation item, already sized to the model input."""

    image: np.ndarray  # (S, S) float32 in [0, 1]
    mask: np.ndarray  # (S, S) bool
    task_id: int = 0


@dataclass
class RunConfig:
    regime: str = "samus_adapt"
    prompt_mode: str = "manual"
    seed: int = 0
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 1
    max_steps: int | None = None
    stop_at_train_dice: float | None = None
    eval_every: int = 25
    bce_weight: float = 0.5
    dice_weight: float = 0.5

    def validate(self) -> "RunConfig":
        if self.regime not in FREEZE_PLANS:
            raise ConfigError(
                f"unknown regime {self.regime!r}, expected one of {sorted(FREEZE_PLANS)}"
            )
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigError(f"prompt_mode must be one of {PROMPT_MODES}")
        if self.regime.startswith("autosamus") and self.prompt_mode != "auto":
            raise ConfigError(
                f"regime {self.regime} trains the prompt generator and only "
                f"makes sense with prompt_mode=auto"
            )
        if self.regime == "samus_adapt" and self.prompt_mode != "manual":
            raise ConfigError("samus_adapt has no prompt generator; use prompt_mode=manual")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be positive when set")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.bce_weight < 0 or self.dice_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be non-negative")
        return self


def soft_dice_loss(logits: torch.Tensor, targets: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """1 - soft Dice between sigmoid probabilities and binary targets."""
    probs = torch.sigmoid(logits)
    dims = tuple(range(1, logits.ndim))
    num = 2.0 * (probs * targets).sum(dims) + eps
    den = probs.sum(dims) + targets.sum(dims) + eps
    return (1.0 - num / den).mean()


def seg_loss(
    logits: torch.Tensor,
    targets: torch.Tensor,
    bce_weight: float = 0.5,
    dice_weight: float = 0.5,
) -> torch.Tensor:
    bce = torch.nn.functional.binary_cross_entropy_with_logits(logits, targets)
    return bce_weight * bce + dice_weight * soft_dice_loss(logits, targets)


@dataclass
class _Batch:
    images: torch.Tensor
    masks: torch.Tensor
    coords: torch.Tensor | None
    labels: torch.Tensor | None
    task_ids: torch.Tensor


def _make_batch(samples: list[Sample], prompt_mode: str) -> _Batch:
    images = torch.from_numpy(
        np.stack([s.image for s in samples]).astype(np.float32)
    ).unsqueeze(1)
    masks = torch.from_numpy(
        np.stack([s.mask.astype(np.float32) for s in samples])
    ).unsqueeze(1)
    task_ids = torch.tensor([s.task_id for s in samples], dtype=torch.long)
    coords = labels = None
    if prompt_mode == "manual":
        points = [sample_point_prompt(s.mask) for s in samples]
        coords = torch.tensor([[list(p)] for p in points], dtype=torch.float32)
        labels = torch.ones(len(samples), 1, dtype=torch.long)
    return _Batch(images, masks, coords, labels, task_ids)


def _forward(model: Samus, batch: _Batch, prompt_mode: str) -> MaskPrediction:
    if prompt_mode == "manual":
        return model.forward_points(batch.images, batch.coords, batch.labels)
    return model.forward_auto(batch.images, batch.task_ids)


def _batch_order(samples: list[Sample], cfg: RunConfig, rng: np.random.Generator) -> list[list[int]]:
    """Index batches for one epoch; auto mode keeps each batch on one task."""
    idx = rng.permutation(len(samples))
    if cfg.prompt_mode == "manual":
        chunks = [
            [int(i) for i in idx[k : k + cfg.batch_size]]
            for k in range(0, len(idx), cfg.batch_size)
        ]
    else:
        by_task: dict[int, list[int]] = {}
        for i in idx:
            by_task.setdefault(samples[int(i)].task_id, []).append(int(i))
        chunks = []
        for task in sorted(by_task):
            members = by_task[task]
            chunks.extend(
                members[k : k + cfg.batch_size]
                for k in range(0, len(members), cfg.batch_size)
            )
        rng.shuffle(chunks)
    return chunks


@torch.no_grad()
def train_set_dice(model: Samus, samples: list[Sample], cfg: RunConfig) -> float:
    """Mean Dice of thresholded predictions over a sample list."""
    scores = []
    for k in range(0, len(samples), cfg.batch_size):
        batch = _make_batch(samples[k : k + cfg.batch_size], cfg.prompt_mode)
        pred = _forward(model, batch, cfg.prompt_mode)
        hard = (pred.logits > 0).float()
        inter = (hard * batch.masks).sum(dim=(1, 2, 3))
        denom = hard.sum(dim=(1, 2, 3)) + batch.masks.sum(dim=(1, 2, 3))
        dice = torch.where(
            denom > 0,
            200.0 * inter / denom.clamp(min=1e-12),
            torch.full_like(denom, 100.0),
        )
        scores.extend(dice.tolist())
    return float(np.mean(scores))


@dataclass
class RunRecord:
    regime: str
    prompt_mode: str
    seed: int
    model_config: dict
    ablation: dict
    steps: int = 0
    epochs_completed: int = 0
    final_loss: float = float("nan")
    train_dice: float = float("nan")
    stopped_early: bool = False
    stop_reason: str = ""
    loss_history: list[float] = field(default_factory=list)
    dice_history: list[list[float]] = field(default_factory=list)  # [step, dice]
    trainable_params: int = 0
    frozen_params: int = 0
    init_report: dict | None = None
    checkpoint_path: str = ""
    eval_results: dict | None = None
    wall_seconds: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def save_run_record(record: RunRecord, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(record.to_json())
    os.replace(tmp, path)


def load_run_record(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def load_init_weights(model: Samus, checkpoint_path: str | Path) -> dict:
    """Warm-start from a checkpoint; APG params may be absent by design."""
    ck = load_checkpoint(checkpoint_path)
    loaded, missing, unexpected = load_state_into(ck, model, strict=False)
    return {
        "checkpoint": str(checkpoint_path),
        "loaded": len(loaded),
        "missing": sorted(missing),
        "unexpected": sorted(unexpected),
    }


def train(
    model: Samus,
    registry: ParamRegistry,
    samples: list[Sample],
    cfg: RunConfig,
    out_dir: str | Path | None = None,
) -> RunRecord:
    cfg = cfg.validate()
    if not samples:
        raise ValueError("cannot train on an empty sample list")
    torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    trainable = registry.trainable_parameters()
    optimizer = torch.optim.Adam(trainable, lr=cfg.lr) if trainable else None

    record = RunRecord(
        regime=cfg.regime,
        prompt_mode=cfg.prompt_mode,
        seed=cfg.seed,
        model_config=model.cfg.to_dict(),
        ablation=asdict(model.ablation),
        trainable_params=sum(p.numel() for p in trainable),
        frozen_params=registry.count_params() - sum(p.numel() for p in trainable),
    )
    started = time.perf_counter()
    step = 0
    done = False
    for epoch in range(cfg.epochs):
        for batch_idx in _batch_order(samples, cfg, rng):
            batch = _make_batch([samples[i] for i in batch_idx], cfg.prompt_mode)
            if optimizer is None:
                # nothing to update; still report the loss curve
                with torch.no_grad():
                    pred = _forward(model, batch, cfg.prompt_mode)
                    loss = seg_loss(pred.logits, batch.masks, cfg.bce_weight, cfg.dice_weight)
            else:
                pred = _forward(model, batch, cfg.prompt_mode)
                loss = seg_loss(pred.logits, batch.masks, cfg.bce_weight, cfg.dice_weight)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            step += 1
            record.loss_history.append(float(loss.detach()))

            if (
                cfg.stop_at_train_dice is not None
                and cfg.eval_every
                and step % cfg.eval_every == 0
            ):
                dice = train_set_dice(model, samples, cfg)
                record.dice_history.append([float(step), dice])
                if dice >= cfg.stop_at_train_dice:
                    record.stopped_early = True
                    record.stop_reason = (
                        f"train dice {dice:.2f} reached target "
                        f"{cfg.stop_at_train_dice:.2f}"
                    )
                    done = True
                    break
            if cfg.max_steps is not None and step >= cfg.max_steps:
                record.stop_reason = record.stop_reason or "max_steps"
                done = True
                break
        record.epochs_completed = epoch + 1
        if done:
            break

    record.steps = step
    record.final_loss = record.loss_history[-1] if record.loss_history else float("nan")
    record.train_dice = train_set_dice(model, samples, cfg)
    record.dice_history.append([float(step), record.train_dice])
    record.wall_seconds = time.perf_counter() - started

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ck_path = out_dir / "checkpoint.bin"
        opt_arrays = opt_meta = None
        if optimizer is not None:
            opt_arrays, opt_meta = optimizer_to_arrays(optimizer, model)
        ck = checkpoint_from_model(
            model,
            model.cfg.to_dict(),
            optimizer=opt_arrays,
            optimizer_meta=opt_meta,
            rng_seeds={"torch": cfg.seed, "numpy": cfg.seed},
            task_ids={"trained_on": sorted({s.task_id for s in samples})},
        )
        save_checkpoint(ck, ck_path)
        record.checkpoint_path = str(ck_path)
        save_run_record(record, out_dir / "run.json")
    return record


@torch.no_grad()
def evaluate(
    model: Samus,
    datasets: dict[str, list[Sample]],
    prompt_mode: str = "manual",
    use_hd95: bool = False,
    batch_size: int = 8,
) -> dict[str, MetricReport]:
    """Per-dataset metrics. Manual mode clicks the ground-truth prompt point;
    samples whose mask has no foreground cannot be prompted and are skipped
    (counted on the report)."""
    if prompt_mode not in PROMPT_MODES:
        raise ValueError(f"prompt_mode must be one of {PROMPT_MODES}")
    model.eval()
    reports: dict[str, MetricReport] = {}
    for name, samples in datasets.items():
        report = MetricReport(dataset=name)
        usable = []
        for s in samples:
            if prompt_mode == "manual" and not s.mask.any():
                report.skipped_prompts += 1
                continue
            usable.append(s)
        for k in range(0, len(usable), batch_size):
            chunk = usable[k : k + batch_size]
            batch = _make_batch(chunk, prompt_mode)
            pred = _forward(model, batch, prompt_mode)
            hard = (pred.logits > 0).squeeze(1).numpy()
            for s, mask_pred in zip(chunk, hard):
                report.add(mask_pred.astype(bool), s.mask, use_hd95=use_hd95)
        reports[name] = report
    model.train()
    return reports
