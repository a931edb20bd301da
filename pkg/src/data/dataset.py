"""
On-disk synthetic dataset: generation, manifest, loading and batching.

Layout:
    root/manifest.jsonl                       one JSON record per sample
    root/vocab.tsv                            word<TAB>id
    root/{train,val,test}/{images,masks}/<id>.png

Every sample is seeded from (master_seed, index) alone, so generation can run
on a thread pool and still produce byte-identical files. Splits are assigned
by index: the first round(count·r_train) samples train, the next
round(count·r_val) validate, the rest test.
"""

import json
import logging
import os
import queue
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from src.data.shapes import VOCABULARY_WORDS, SceneSpec, ShapeSpec, render, sample_scene, target_mask, to_uint8
from src.errors import ConfigurationError
from src.model.encoders import Vocabulary, tokenize

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.jsonl"
VOCAB_NAME = "vocab.tsv"


def build_vocabulary() -> Vocabulary:
    return Vocabulary(VOCABULARY_WORDS)


def sample_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def split_counts(count: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-6:
        raise ConfigurationError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    n_train = round(count * ratios[0])
    n_val = min(round(count * ratios[1]), count - n_train)
    return n_train, n_val, count - n_train - n_val


# ----------------------------------------------------------------------
# Writing
# ----------------------------------------------------------------------

def _atomic_png(array: np.ndarray, path: Path) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        Image.fromarray(array).save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _atomic_text(text: str, path: Path) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _write_sample(root: Path, index: int, split: str, master_seed: int, canvas: int) -> dict:
    seed = sample_seed(master_seed, index)
    scene = sample_scene(seed, canvas)
    sample_id = f"{index:05d}"
    image_rel = Path(split) / "images" / f"{sample_id}.png"
    mask_rel = Path(split) / "masks" / f"{sample_id}.png"
    _atomic_png(to_uint8(render(scene)), root / image_rel)
    _atomic_png(target_mask(scene).astype(np.uint8) * 255, root / mask_rel)
    return {
        "id": sample_id,
        "split": split,
        "image": image_rel.as_posix(),
        "mask": mask_rel.as_posix(),
        "prompt": scene.prompt,
        "seed": seed,
        "scene": scene.to_dict(),
    }


def generate(
    root: Path | str,
    count: int,
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    master_seed: int = 0,
    canvas: int = 64,
    workers: int = 4,
) -> Path:
    """Write a dataset under root; returns the manifest path. OSError on an unwritable root."""
    root = Path(root)
    counts = split_counts(count, split_ratios)
    splits = [s for s, n in zip(SPLITS, counts) for _ in range(n)]
    for split in SPLITS:
        (root / split / "images").mkdir(parents=True, exist_ok=True)
        (root / split / "masks").mkdir(parents=True, exist_ok=True)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        records = list(pool.map(
            lambda i: _write_sample(root, i, splits[i], master_seed, canvas), range(count)
        ))

    manifest = root / MANIFEST_NAME
    _atomic_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), manifest)
    build_vocabulary().save(root / VOCAB_NAME)
    logger.info("Generated %d samples (train=%d val=%d test=%d) under %s", count, *counts, root)
    return manifest


# ----------------------------------------------------------------------
# Reading
# ----------------------------------------------------------------------

def read_manifest(root: Path | str) -> list[dict]:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise ConfigurationError(f"no dataset manifest at {path}")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}:{lineno}: invalid JSON ({e})") from None
        missing = {"id", "split", "image", "mask", "prompt", "seed"} - set(record)
        if missing:
            raise ConfigurationError(f"{path}:{lineno}: missing fields {sorted(missing)}")
        records.append(record)
    return records


def load_vocabulary(root: Path | str) -> Vocabulary:
    path = Path(root) / VOCAB_NAME
    return Vocabulary.load(path) if path.exists() else build_vocabulary()


def read_image(path: Path | str) -> np.ndarray:
    """8-bit grayscale PNG → float32 in [0, 1]."""
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float32) / 255.0


def read_mask(path: Path | str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) >= 128


@dataclass
class Sample:
    id: str
    image: np.ndarray               # (H, W) float32
    mask: np.ndarray                # (H, W) bool
    prompt: str
    seed: int
    scene: dict | None = None


class SegmentationDataset:
    def __init__(self, root: Path | str, split: str) -> None:
        if split not in SPLITS:
            raise ConfigurationError(f"split must be one of {SPLITS}, got {split!r}")
        self.root = Path(root)
        self.split = split
        self.records = [r for r in read_manifest(self.root) if r["split"] == split]
        self.vocab = load_vocabulary(self.root)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> Sample:
        r = self.records[index]
        return Sample(
            id=r["id"],
            image=read_image(self.root / r["image"]),
            mask=read_mask(self.root / r["mask"]),
            prompt=r["prompt"],
            seed=int(r["seed"]),
            scene=r.get("scene"),
        )


# ----------------------------------------------------------------------
# Batching
# ----------------------------------------------------------------------

@dataclass
class SampleBatch:
    ids: list[str]
    images: np.ndarray              # (B, 1, H, W) float32
    token_ids: np.ndarray           # (B, L) int64
    pad_mask: np.ndarray            # (B, L) bool
    masks: np.ndarray               # (B, 1, H, W) float32 in {0, 1}
    prompts: list[str]
    seeds: list[int]

    def __len__(self) -> int:
        return len(self.ids)


def jitter_intensity(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Brightness/contrast jitter plus Gaussian pixel noise; geometry is untouched."""
    contrast = rng.uniform(0.8, 1.2)
    brightness = rng.uniform(-0.08, 0.08)
    noisy = (image - 0.5) * contrast + 0.5 + brightness + rng.normal(0.0, 0.02, size=image.shape)
    return np.clip(noisy, 0.0, 1.0).astype(np.float32)


def collate(samples: list[Sample], vocab: Vocabulary, max_tokens: int) -> SampleBatch:
    tokens = [tokenize(s.prompt, vocab, max_tokens) for s in samples]
    for s, t in zip(samples, tokens):
        if t.unknown_heavy:
            logger.warning("prompt %r of sample %s is mostly unknown words", s.prompt, s.id)
    return SampleBatch(
        ids=[s.id for s in samples],
        images=np.stack([s.image for s in samples])[:, None].astype(np.float32),
        token_ids=np.stack([t.token_ids for t in tokens]),
        pad_mask=np.stack([t.pad_mask for t in tokens]),
        masks=np.stack([s.mask for s in samples])[:, None].astype(np.float32),
        prompts=[s.prompt for s in samples],
        seeds=[s.seed for s in samples],
    )


class BatchLoader:
    """
    Fixed-composition batches: the order for an epoch comes from
    default_rng([seed, epoch]) only. With prefetch > 0 a side thread fills a
    bounded queue; the batches it yields are identical to the synchronous path.
    """

    def __init__(
        self,
        dataset: SegmentationDataset,
        batch_size: int,
        max_tokens: int,
        shuffle: bool = False,
        seed: int = 0,
        augment: bool = False,
        prefetch: int = 0,
        vocab: Vocabulary | None = None,
    ) -> None:
        if batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.max_tokens = max_tokens
        self.shuffle = shuffle
        self.seed = seed
        self.augment = augment
        self.prefetch = prefetch
        self.vocab = vocab if vocab is not None else dataset.vocab

    def __len__(self) -> int:
        return -(-len(self.dataset) // self.batch_size)

    def order(self, epoch: int) -> np.ndarray:
        if not self.shuffle:
            return np.arange(len(self.dataset))
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.dataset))

    def _make(self, epoch: int, indices: np.ndarray) -> SampleBatch:
        samples = [self.dataset[int(i)] for i in indices]
        if self.augment:
            for i, s in zip(indices, samples):
                s.image = jitter_intensity(s.image, np.random.default_rng([self.seed, epoch, int(i)]))
        return collate(samples, self.vocab, self.max_tokens)

    def _chunks(self, epoch: int) -> list[np.ndarray]:
        order = self.order(epoch)
        return [order[i:i + self.batch_size] for i in range(0, len(order), self.batch_size)]

    def epoch(self, epoch: int = 0) -> Iterator[SampleBatch]:
        if self.prefetch <= 0:
            for chunk in self._chunks(epoch):
                yield self._make(epoch, chunk)
            return
        yield from self._prefetched(epoch)

    def _prefetched(self, epoch: int) -> Iterator[SampleBatch]:
        ready: queue.Queue = queue.Queue(maxsize=self.prefetch)
        stop = threading.Event()
        done = object()

        def worker() -> None:
            try:
                for chunk in self._chunks(epoch):
                    if stop.is_set():
                        return
                    ready.put(self._make(epoch, chunk))
            except BaseException as e:          # surfaced in the consumer
                ready.put(e)
                return
            ready.put(done)

        thread = threading.Thread(target=worker, name="batch-prefetch", daemon=True)
        thread.start()
        try:
            while True:
                item = ready.get()
                if item is done:
                    break
                if isinstance(item, BaseException):
                    raise item
                yield item
        finally:
            stop.set()
            while thread.is_alive():
                try:
                    ready.get_nowait()
                except queue.Empty:
                    thread.join(timeout=0.05)

    def __iter__(self) -> Iterator[SampleBatch]:
        return self.epoch(0)


def scene_from_record(record: dict) -> SceneSpec:
    """Rebuild the SceneSpec stored in a manifest record."""
    scene = record["scene"]
    shapes = [
        ShapeSpec(s["kind"], s["quadrant"], tuple(s["center"]), tuple(s["size"]), float(s["intensity"]))
        for s in scene["shapes"]
    ]
    return SceneSpec(
        canvas=scene["canvas"],
        shapes=shapes,
        targets=tuple(scene["targets"]),
        prompt=scene["prompt"],
        seed=scene["seed"],
        background=scene.get("background", 0.0),
        phrasing=scene.get("phrasing", "single"),
    )
