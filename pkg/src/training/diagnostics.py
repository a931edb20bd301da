"""
Gradient-check suite.

Runs finite-difference checks in float64 over every differentiable op on
small random inputs, then over the full training objective on the
micro-config (2×2 patch grid, 3 token slots, width 8). Parameters of the full
model are subsampled per tensor to keep the suite fast.
"""

import logging
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from src.autodiff import ops
from src.autodiff.gradcheck import GradcheckReport, gradcheck
from src.autodiff.tensor import Tensor, no_grad
from src.model.encoders import TransformerBlock
from src.model.interaction import CrossAttention, alignment_matrix, contrastive_loss, pair_similarity
from src.model.layers import LayerNorm
from src.model.objective import ce_loss, dice_loss
from src.model.reconstruction import ConditionedReconstructor
from src.model.segmenter import ConditionedSegmenter
from src.training.config import RunConfig

logger = logging.getLogger(__name__)

MICRO_CONFIG = RunConfig(
    image_size=16,
    channels=(2, 4, 8),
    width=8,
    text_layers=1,
    text_heads=2,
    max_tokens=3,
    ffn_mult=2,
    recon_layers=2,
    batch_size=1,
    tau=0.5,
)
MICRO_VOCAB = 12


@dataclass
class SuiteResult:
    name: str
    report: GradcheckReport
    seconds: float


def _leaf(rng: np.random.Generator, *shape: int, name: str, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True, dtype=np.float64, name=name)


def micro_problem(config: RunConfig = MICRO_CONFIG, batch: int = 1, seed: int = 0):
    """float64 model on the micro-config plus one random batch (the last token slot is padding)."""
    rng = np.random.default_rng(seed)
    model = ConditionedSegmenter(config.model_config(MICRO_VOCAB), rng).to_dtype(np.float64)
    size = config.image_size
    images = rng.uniform(0, 1, size=(batch, 1, size, size))
    token_ids = rng.integers(2, MICRO_VOCAB, size=(batch, config.max_tokens))
    pad_mask = np.zeros((batch, config.max_tokens), dtype=bool)
    if config.max_tokens > 1:
        pad_mask[:, -1] = True
        token_ids[:, -1] = 0
    targets = (rng.uniform(size=(batch, 1, size, size)) < 0.3).astype(np.float64)
    return model, images, token_ids, pad_mask, targets


def op_checks(rng: np.random.Generator) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    """(name, objective, parameters) per differentiable op."""
    checks = []

    a, b = _leaf(rng, 3, 4, name="a"), _leaf(rng, 4, 2, name="b")
    checks.append(("matmul", lambda: ops.sum(a @ b), [a, b]))

    x, w = _leaf(rng, 3, 4, name="x"), _leaf(rng, 1, 4, name="w")
    checks.append(("elementwise", lambda: ops.sum(ops.square(x * w) + ops.relu(x - w) + ops.scale(x, 3.0) / (w + 2.5)), [x, w]))

    s = _leaf(rng, 3, 5, name="s")
    proj = rng.normal(size=(3, 5))
    mask = np.array([[True, True, False, True, True]] * 3)
    checks.append(("softmax", lambda: ops.sum(ops.softmax(s, axis=-1, mask=mask) * proj), [s]))
    checks.append(("log_softmax", lambda: ops.sum(ops.log_softmax(s, axis=0) * proj), [s]))

    u = _leaf(rng, 4, 3, name="u", low=0.2, high=2.0)
    checks.append(("unary", lambda: ops.sum(ops.exp(u) + ops.log(u) + ops.sqrt(u) + ops.sigmoid(u) + ops.softplus(u)), [u]))

    r = _leaf(rng, 2, 3, 4, name="r")
    checks.append(("reductions", lambda: ops.sum(ops.mean(r, axis=1)) + ops.sum(ops.max(r, axis=-1, mask=mask[:2, :4][:, None, :]))
                   + ops.sum(ops.norm(r, axis=-1)), [r]))
    checks.append(("shape", lambda: ops.sum(ops.narrow(ops.concat([ops.permute(r, (0, 2, 1)), ops.reshape(r, (2, 4, 3))], axis=1), 1, 2, 7) * 1.7), [r]))

    table = _leaf(rng, 5, 3, name="table")
    ids = np.array([[0, 3, 3], [4, 1, 0]])
    checks.append(("take", lambda: ops.sum(ops.square(ops.take(table, ids))), [table]))

    img = _leaf(rng, 1, 2, 6, 6, name="img")
    kernel, bias = _leaf(rng, 3, 2, 3, 3, name="kernel"), _leaf(rng, 3, name="bias")
    checks.append(("conv2d", lambda: ops.sum(ops.square(ops.conv2d(img, kernel, bias))), [img, kernel, bias]))
    checks.append(("pool_upsample", lambda: ops.sum(ops.square(ops.upsample2x(ops.avg_pool2d(img)))), [img]))

    ln = LayerNorm(4).to_dtype(np.float64)
    checks.append(("layer_norm", lambda: ops.sum(ln(r) * r), [r, *ln.parameters()]))

    block = TransformerBlock(4, 2, 8, rng).to_dtype(np.float64)
    pads = np.array([[False, False, True], [False, False, False]])
    tokens = _leaf(rng, 2, 3, 4, name="tokens")
    checks.append(("transformer_block", lambda: ops.sum(ops.square(block(tokens, pads))), [tokens, *block.parameters()]))

    attn = CrossAttention(4, rng).to_dtype(np.float64)
    patches = _leaf(rng, 2, 4, 4, name="patches")
    checks.append(("cross_attention", lambda: ops.sum(ops.square(attn(patches, tokens, ~pads))), [patches, tokens, *attn.parameters()]))

    recon = ConditionedReconstructor(4, 2, 8, rng).to_dtype(np.float64)
    cond = _leaf(rng, 2, 3, name="condition", low=0.1, high=1.0)
    checks.append(("reconstructor", lambda: ops.sum(ops.square(recon(patches, tokens, cond, ~pads))),
                   [patches, tokens, cond, *recon.parameters()]))

    w_poi, w_woi = _leaf(rng, 2, 4, name="w_poi"), _leaf(rng, 2, 3, name="w_woi")
    checks.append(("pair_similarity", lambda: ops.sum(pair_similarity(alignment_matrix(patches, tokens), w_poi, w_woi, ~pads)),
                   [patches, tokens, w_poi, w_woi]))

    sim = _leaf(rng, 3, 3, name="similarity")
    checks.append(("contrastive", lambda: contrastive_loss(sim, 0.5), [sim]))

    logits = _leaf(rng, 2, 1, 4, 4, name="logits", low=-3, high=3)
    target = (rng.uniform(size=(2, 1, 4, 4)) < 0.4).astype(np.float64)
    checks.append(("dice_ce", lambda: dice_loss(logits, target) + ce_loss(logits, target), [logits]))
    return checks


def objective_check(config: RunConfig = MICRO_CONFIG, batch: int = 1, seed: int = 0, max_elements: int | None = 24) -> GradcheckReport:
    model, images, token_ids, pad_mask, targets = micro_problem(config, batch, seed)
    options = config.train_options()
    with no_grad():
        frozen = model.forward_train(images, token_ids, pad_mask, targets, options, mask_seed=(seed, 0)).frozen

    def objective() -> Tensor:
        return model.forward_train(images, token_ids, pad_mask, targets, options, frozen=frozen).loss

    return gradcheck(objective, dict(model.named_parameters()), max_elements=max_elements, rng=np.random.default_rng(seed))


def run_gradcheck_suite(seed: int = 0, max_elements: int | None = 24, config: RunConfig = MICRO_CONFIG) -> list[SuiteResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, objective, params in op_checks(rng):
        started = time.perf_counter()
        report = gradcheck(objective, params)
        results.append(SuiteResult(name, report, time.perf_counter() - started))
    for batch in (1, 2):
        started = time.perf_counter()
        report = objective_check(config, batch=batch, seed=seed, max_elements=max_elements)
        results.append(SuiteResult(f"objective_b{batch}", report, time.perf_counter() - started))
    for r in results:
        logger.info("gradcheck %-18s max rel err %.2e  (%.1fs)", r.name, r.report.max_rel_error, r.seconds)
    return results
