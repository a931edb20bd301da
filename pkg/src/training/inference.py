"""
Evaluation and inference on the pruned graph.

Only the visual encoder, text encoder, text-to-vision attention and mask
decoder run here. Interest-weight heatmaps, when requested, take one extra
pass through the full interaction for inspection.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from src.data.dataset import BatchLoader, SegmentationDataset, read_image, scene_from_record
from src.data.shapes import counterfactual_pair
from src.model.encoders import Vocabulary, tokenize, tokenize_batch
from src.model.objective import MetricReport, binarize, metrics
from src.model.segmenter import ConditionedSegmenter
from src.training.checkpoint import Checkpoint, load_checkpoint

logger = logging.getLogger(__name__)


def evaluate_model(
    model: ConditionedSegmenter,
    dataset: SegmentationDataset,
    batch_size: int,
    vocab: Vocabulary | None = None,
) -> MetricReport:
    loader = BatchLoader(dataset, batch_size, model.config.max_tokens, vocab=vocab)
    report = MetricReport()
    for batch in loader.epoch(0):
        logits = model.forward_inference(batch.images, batch.token_ids, batch.pad_mask)
        preds = binarize(logits.data[:, 0])
        for sid, pred, target in zip(batch.ids, preds, batch.masks[:, 0] > 0.5):
            report.add(metrics(pred, target, sid))
    return report


def _open(checkpoint: Checkpoint | Path | str) -> Checkpoint:
    return checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)


def evaluate(
    checkpoint: Checkpoint | Path | str,
    split: str = "test",
    data_root: Path | str | None = None,
    out_csv: Path | str | None = None,
) -> MetricReport:
    ckpt = _open(checkpoint)
    root = data_root if data_root is not None else ckpt.dataset
    if root is None:
        raise FileNotFoundError("checkpoint does not record a dataset; pass data_root")
    model = ckpt.build_model()
    report = evaluate_model(model, SegmentationDataset(root, split), ckpt.config.eval_batch_size, ckpt.vocabulary)
    logger.info("%s split: dice=%.4f miou=%.4f (fg dice=%.4f miou=%.4f) over %d samples",
                split, report.dice, report.miou, report.dice_fg, report.miou_fg, len(report.per_sample))
    if out_csv is not None:
        report.write_csv(out_csv)
    return report


# ----------------------------------------------------------------------
# Single-image inference
# ----------------------------------------------------------------------

@dataclass
class InferenceResult:
    mask: np.ndarray                        # (H, W) bool
    probabilities: np.ndarray               # (H, W) float
    prompt: str
    empty_prompt: bool
    unknown_heavy: bool
    w_poi: np.ndarray | None = None         # (H', W'), sums to 1
    w_woi: list[tuple[str, float]] | None = None


def infer(
    checkpoint: Checkpoint | Path | str,
    image: np.ndarray | Path | str,
    prompt: str,
    emit_heatmaps: bool = False,
    model: ConditionedSegmenter | None = None,
) -> InferenceResult:
    ckpt = _open(checkpoint)
    model = model if model is not None else ckpt.build_model()
    pixels = read_image(image) if isinstance(image, (str, Path)) else np.asarray(image, dtype=np.float32)
    tokens = tokenize(prompt, ckpt.vocabulary, model.config.max_tokens)
    if tokens.unknown_heavy:
        logger.warning("prompt %r: %.0f%% of words are unknown to the vocabulary", prompt, 100 * tokens.unknown_fraction)

    images = pixels[None, None]
    ids, pad = tokens.token_ids[None], tokens.pad_mask[None]
    logits = model.forward_inference(images, ids, pad).data[0, 0]
    result = InferenceResult(
        mask=binarize(logits),
        probabilities=1.0 / (1.0 + np.exp(-logits.astype(np.float64))),
        prompt=prompt,
        empty_prompt=tokens.empty,
        unknown_heavy=tokens.unknown_heavy,
    )
    if emit_heatmaps:
        w_poi, w_woi = model.interest_maps(images, ids, pad)
        result.w_poi = w_poi[0].reshape(model.visual_encoder.grid)
        words = prompt.lower().split()[:model.config.max_tokens]
        result.w_woi = [(word, float(w_woi[0, i])) for i, word in enumerate(words)]
    return result


def write_heatmaps(result: InferenceResult, out_dir: Path | str, stem: str = "heatmap") -> list[Path]:
    """W_poi as an H′×W′ grayscale PNG; W_woi as a bar chart PNG and a JSON list of word weights."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if result.w_poi is not None:
        peak = max(float(result.w_poi.max()), 1e-12)
        path = out_dir / f"{stem}_poi.png"
        Image.fromarray(np.round(result.w_poi / peak * 255).astype(np.uint8)).save(path)
        written.append(path)
    if result.w_woi is not None:
        json_path = out_dir / f"{stem}_woi.json"
        rows = [{"position": i, "word": w, "weight": x} for i, (w, x) in enumerate(result.w_woi)]
        json_path.write_text(json.dumps(rows, indent=2), encoding="utf-8")
        bar_path = out_dir / f"{stem}_woi.png"
        cv2.imwrite(str(bar_path), _word_bars(result.w_woi))
        written += [json_path, bar_path]
    return written


def _word_bars(weights: list[tuple[str, float]], bar_width: int = 48, height: int = 96) -> np.ndarray:
    canvas = np.full((height + 20, max(1, len(weights)) * bar_width), 255, dtype=np.uint8)
    for i, (word, weight) in enumerate(weights):
        top = height - int(round(weight * (height - 4)))
        cv2.rectangle(canvas, (i * bar_width + 6, top), ((i + 1) * bar_width - 6, height), 64, thickness=-1)
        cv2.putText(canvas, word[:6], (i * bar_width + 2, height + 14), cv2.FONT_HERSHEY_SIMPLEX, 0.35, 0, 1)
    return canvas


def save_mask(result: InferenceResult, path: Path | str) -> None:
    Image.fromarray(result.mask.astype(np.uint8) * 255).save(path)


# ----------------------------------------------------------------------
# Language steering
# ----------------------------------------------------------------------

def _iou(pred: np.ndarray, target: np.ndarray) -> float:
    union = np.count_nonzero(pred | target)
    return 1.0 if union == 0 else np.count_nonzero(pred & target) / union


def steering_gap(
    model: ConditionedSegmenter,
    dataset: SegmentationDataset,
    vocab: Vocabulary,
    limit: int = 100,
) -> tuple[float, int]:
    """
    Mean IoU(pred, referred) − IoU(pred, other) over counterfactual prompt
    pairs on multi-shape scenes (both prompts of a pair are scored).
    """
    gaps = []
    for index, record in enumerate(dataset.records):
        if len(gaps) >= 2 * limit:
            break
        scene = scene_from_record(record) if "scene" in record else None
        if scene is None or len(scene.shapes) < 2:
            continue
        prompt_a, mask_a, prompt_b, mask_b = counterfactual_pair(scene)
        image = dataset[index].image[None, None]
        ids, pad = tokenize_batch([prompt_a, prompt_b], vocab, model.config.max_tokens)
        logits = model.forward_inference(np.repeat(image, 2, axis=0), ids, pad).data[:, 0]
        pred_a, pred_b = binarize(logits)
        gaps.append(_iou(pred_a, mask_a) - _iou(pred_a, mask_b))
        gaps.append(_iou(pred_b, mask_b) - _iou(pred_b, mask_a))
    if not gaps:
        return 0.0, 0
    return float(np.mean(gaps)), len(gaps) // 2
