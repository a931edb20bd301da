"""
Training loop.

One process owns the model. Batches may be prefetched on a side thread, but
their composition depends only on (master_seed, epoch), and mask draws only
on (master_seed, step, sample, modality), so a run is reproducible bit for bit.

Outputs under the run directory:
    train_log.csv       one row per epoch
    best/               checkpoint with the highest validation mIoU
    last/               checkpoint after the most recent epoch (initial weights before epoch 0)
    diagnostic.json     written only if the loss stops being finite
"""

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import psutil

from src.data.dataset import BatchLoader, SegmentationDataset, load_vocabulary
from src.errors import TrainingDivergedError
from src.model.objective import COMPONENTS
from src.model.segmenter import ConditionedSegmenter
from src.training.checkpoint import save_checkpoint
from src.training.config import RunConfig, save_config
from src.training.inference import evaluate_model
from src.training.optim import Adam, LRSchedule

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "loss", *COMPONENTS, "val_dice", "val_miou", "seconds", "rss_mb")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    l_v2t: float | None
    l_t2v: float | None
    l_ccl: float | None
    l_dice: float | None
    l_ce: float | None
    val_dice: float
    val_miou: float
    seconds: float
    rss_mb: float

    def row(self) -> list[str]:
        values = asdict(self)
        return ["" if values[c] is None else f"{values[c]:.6g}" if isinstance(values[c], float) else str(values[c])
                for c in LOG_COLUMNS]


@dataclass
class TrainResult:
    run_dir: Path
    best_checkpoint: Path
    last_checkpoint: Path
    log_path: Path
    best_val_miou: float
    history: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


def _rss_mb() -> float:
    return psutil.Process().memory_info().rss / 2**20


class Trainer:
    def __init__(self, config: RunConfig, data_root: Path | str, out_dir: Path | str) -> None:
        self.config = config
        self.data_root = Path(data_root)
        self.out_dir = Path(out_dir)
        self.vocab = load_vocabulary(self.data_root)
        self.model = ConditionedSegmenter(
            config.model_config(len(self.vocab)), np.random.default_rng(config.master_seed)
        )
        self.options = config.train_options()
        self.train_set = SegmentationDataset(self.data_root, "train")
        self.val_set = SegmentationDataset(self.data_root, "val")
        self.loader = BatchLoader(
            self.train_set,
            config.batch_size,
            config.max_tokens,
            shuffle=True,
            seed=config.master_seed,
            augment=config.augment,
            prefetch=config.prefetch,
            vocab=self.vocab,
        )
        total_steps = config.epochs * len(self.loader)
        self.schedule = LRSchedule(config.learning_rate, total_steps, config.schedule)
        self.optimizer = Adam(list(self.model.named_parameters()), lr=config.learning_rate)
        self._last_grads: dict[str, float] = {}
        self._last_grad_step: int | None = None

    # ------------------------------------------------------------------

    def _record_grads(self, step: int) -> None:
        self._last_grads = {
            name: float(np.abs(p.grad).max()) if p.grad is not None and p.grad.size else 0.0
            for name, p in self.model.named_parameters()
        }
        self._last_grad_step = step

    def _diverged(self, step: int, epoch: int, batch_ids: list[str], components: dict[str, float]) -> None:
        """Write diagnostic.json (max |grad| is from the last finite step) and raise."""
        last = self.out_dir / "last"
        diagnostic = self.out_dir / "diagnostic.json"
        diagnostic.write_text(json.dumps({
            "step": step,
            "epoch": epoch,
            "lr": self.schedule(step),
            "batch": batch_ids,
            "components": {k: (v if np.isfinite(v) else str(v)) for k, v in components.items()},
            "grad_step": self._last_grad_step,
            "max_abs_grad": self._last_grads,
        }, indent=2), encoding="utf-8")
        last_good = last if (last / "manifest.json").exists() else None
        raise TrainingDivergedError(
            f"loss became non-finite at step {step} (epoch {epoch})",
            diagnostic_path=diagnostic,
            last_good_checkpoint=last_good,
        )

    def _save(self, name: str, epoch: int, metrics: dict) -> Path:
        return save_checkpoint(
            self.out_dir / name, self.model, self.config, self.vocab,
            optimizer=self.optimizer, epoch=epoch, metrics=metrics, dataset=str(self.data_root),
        )

    def train(self) -> TrainResult:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        save_config(self.config, self.out_dir / "config.yaml")
        log_path = self.out_dir / "train_log.csv"
        result = TrainResult(
            run_dir=self.out_dir,
            best_checkpoint=self.out_dir / "best",
            last_checkpoint=self.out_dir / "last",
            log_path=log_path,
            best_val_miou=-1.0,
        )
        logger.info(
            "Training %d params (%d train / %d val samples, %d steps/epoch, %d epochs)",
            self.model.num_parameters(), len(self.train_set), len(self.val_set),
            len(self.loader), self.config.epochs,
        )

        with open(log_path, "w", newline="", encoding="utf-8") as log_file:
            writer = csv.writer(log_file)
            writer.writerow(LOG_COLUMNS)
            step = 0
            self._save("last", -1, {})
            for epoch in range(self.config.epochs):
                started = time.perf_counter()
                totals: dict[str, float] = {}
                loss_sum, batches, lr = 0.0, 0, self.schedule(step)

                for batch in self.loader.epoch(epoch):
                    lr = self.schedule(step)
                    self.model.zero_grad()
                    out = self.model.forward_train(
                        batch.images, batch.token_ids, batch.pad_mask, batch.masks,
                        self.options, mask_seed=(self.config.master_seed, step),
                    )
                    loss = out.loss.item()
                    components = out.component_values()
                    if not np.isfinite(loss):
                        self._diverged(step, epoch, batch.ids, components)
                    if out.loss.requires_grad:
                        out.loss.backward()
                        self._record_grads(step)
                    self.optimizer.step(lr)

                    logger.debug("step %d  lr=%.3g  loss=%.4f  %s", step, lr, loss,
                                 "  ".join(f"{k}={v:.4f}" for k, v in components.items()))
                    result.step_losses.append(loss)
                    loss_sum += loss
                    batches += 1
                    for k, v in components.items():
                        totals[k] = totals.get(k, 0.0) + v
                    step += 1

                report = evaluate_model(self.model, self.val_set, self.config.eval_batch_size, self.vocab)
                record = EpochRecord(
                    epoch=epoch,
                    lr=lr,
                    loss=loss_sum / max(batches, 1),
                    **{c: (totals[c] / batches if c in totals else None) for c in COMPONENTS},
                    val_dice=report.dice,
                    val_miou=report.miou,
                    seconds=time.perf_counter() - started,
                    rss_mb=_rss_mb(),
                )
                writer.writerow(record.row())
                log_file.flush()
                result.history.append(record)

                metrics = {"val_dice": report.dice, "val_miou": report.miou,
                           "val_dice_fg": report.dice_fg, "val_miou_fg": report.miou_fg}
                self._save("last", epoch, metrics)
                if report.miou > result.best_val_miou:
                    result.best_val_miou = report.miou
                    self._save("best", epoch, metrics)

                logger.info(
                    "epoch %d/%d  loss=%.4f  val dice=%.4f miou=%.4f  lr=%.2e  %.1fs  rss=%.0fMB",
                    epoch + 1, self.config.epochs, record.loss, report.dice, report.miou,
                    lr, record.seconds, record.rss_mb,
                )
        logger.info("Best val mIoU %.4f -> %s", result.best_val_miou, result.best_checkpoint)
        return result


def train(config: RunConfig, data_root: Path | str, out_dir: Path | str) -> TrainResult:
    return Trainer(config, data_root, out_dir).train()
