"""
Closed-form parameter and multiply-add counts.

MACs count multiplications in matmuls and convolutions for one sample;
elementwise ops, normalisation and softmax are not counted. The training
forward adds the vision-to-text attention, interest heads, alignment matrix
and both reconstructors to the pruned inference forward.
"""

import logging
from dataclasses import dataclass, field

from src.data.dataset import build_vocabulary
from src.training.config import RunConfig

logger = logging.getLogger(__name__)


def conv_macs(height: int, width: int, in_channels: int, out_channels: int, kernel: int) -> int:
    return height * width * in_channels * out_channels * kernel * kernel


def linear_macs(rows: int, in_features: int, out_features: int) -> int:
    return rows * in_features * out_features


def attention_macs(queries: int, keys: int, width: int) -> int:
    """Q·Kᵀ plus weights·V."""
    return 2 * queries * keys * width


def cross_attention_macs(queries: int, keys: int, width: int) -> int:
    """Projections of queries (one) and context (two) plus the attention products."""
    return queries * width * width + 2 * keys * width * width + attention_macs(queries, keys, width)


def fusion_macs(patches: int, tokens: int, width: int) -> int:
    """Text-to-vision fusion layer: patches query tokens."""
    return cross_attention_macs(patches, tokens, width)


@dataclass
class CostReport:
    params_inference: int
    params_train: int
    macs_inference: int
    macs_train: int
    breakdown: dict[str, tuple[int, int]] = field(default_factory=dict)   # part → (params, macs)

    def rows(self) -> list[tuple[str, int, int]]:
        return [(part, p, m) for part, (p, m) in self.breakdown.items()]


def _conv_params(cin: int, cout: int, kernel: int) -> int:
    return cin * cout * kernel * kernel + cout


def _ffn(rows: int, width: int, hidden: int) -> tuple[int, int]:
    return width * hidden + hidden + hidden * width + width, 2 * linear_macs(rows, width, hidden)


def cost_breakdown(config: RunConfig, vocab_size: int | None = None) -> CostReport:
    vocab_size = vocab_size if vocab_size is not None else len(build_vocabulary())
    d = config.width
    hidden = config.ffn_mult * d
    size = config.image_size
    channels = config.channels
    grid = size // 2 ** len(channels)
    n, l = grid * grid, config.max_tokens
    parts: dict[str, tuple[int, int]] = {}

    # visual encoder
    params = macs = 0
    cin, res = 1, size
    for c in channels:
        params += _conv_params(cin, c, 3)
        macs += conv_macs(res, res, cin, c, 3)
        cin, res = c, res // 2
    params += _conv_params(cin, d, 1) + n * d
    macs += conv_macs(grid, grid, cin, d, 1)
    parts["visual_encoder"] = (params, macs)

    # text encoder
    params, macs = vocab_size * d + l * d + 2 * d, 0
    for _ in range(config.text_layers):
        ffn_params, ffn_macs = _ffn(l, d, hidden)
        params += 4 * d + 4 * d * d + d + ffn_params
        macs += 4 * linear_macs(l, d, d) + attention_macs(l, l, d) + ffn_macs
    parts["text_encoder"] = (params, macs)

    parts["text_to_vision"] = (3 * d * d, fusion_macs(n, l, d))

    # decoder
    params = macs = 0
    cin, res = d, grid
    for depth in reversed(range(len(channels))):
        cout = channels[max(depth - 1, 0)]
        res *= 2
        params += _conv_params(cin + channels[depth], cout, 3)
        macs += conv_macs(res, res, cin + channels[depth], cout, 3)
        cin = cout
    params += _conv_params(cin, 1, 1)
    macs += conv_macs(size, size, cin, 1, 1)
    parts["decoder"] = (params, macs)

    # training-only parts
    parts["vision_to_text"] = (3 * d * d, cross_attention_macs(l, n, d))
    parts["interest_heads"] = (2 * (d + 1), linear_macs(n + l, d, 1))
    parts["alignment"] = (0, n * l * d)
    if config.attention == "self":
        reconstructors = (("joint_recon", n + l, n + l),)
    else:
        reconstructors = (("vision_recon", n, l), ("text_recon", l, n))
    for name, queries, keys in reconstructors:
        params = macs = 0
        for _ in range(config.recon_layers):
            ffn_params, ffn_macs = _ffn(queries, d, hidden)
            params += 3 * d * d + ffn_params
            macs += cross_attention_macs(queries, keys, d) + ffn_macs
        parts[name] = (params, macs)

    inference_parts = ("visual_encoder", "text_encoder", "text_to_vision", "decoder")
    return CostReport(
        params_inference=sum(parts[p][0] for p in inference_parts),
        params_train=sum(p for p, _ in parts.values()),
        macs_inference=sum(parts[p][1] for p in inference_parts),
        macs_train=sum(m for _, m in parts.values()),
        breakdown=parts,
    )


def count_params_flops(config: RunConfig, vocab_size: int | None = None) -> tuple[int, int]:
    """(parameter count, multiply-adds) of one pruned inference forward."""
    report = cost_breakdown(config, vocab_size)
    return report.params_inference, report.macs_inference
