"""Autoregressive decoding: greedy argmax and nucleus (top-p) sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .model import assemble_input
from .vocab import BOS_ID, EOS_ID, N_RESERVED, GENERATION_TASKS, Vocabulary

if TYPE_CHECKING:  # pragma: no cover
    from .data import MultimodalExample
    from .model import Model

MODES = ("greedy", "nucleus")


@dataclass
class GenerationConfig:
    mode: str = "greedy"
    top_p: float = 0.9
    max_len: int = 32
    num_samples: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.max_len < 1:
            raise ValueError(f"max_len must be positive, got {self.max_len}")
        if self.num_samples < 1:
            raise ValueError(f"num_samples must be positive, got {self.num_samples}")


def nucleus_candidates(probs: np.ndarray, top_p: float) -> tuple[np.ndarray, np.ndarray]:
    """Minimal prefix of the distribution (descending prob, ties by lowest id)
    whose cumulative mass reaches top_p, renormalized.

    Zero-probability tokens are never candidates.
    """
    probs = np.asarray(probs, dtype=np.float64)
    order = np.lexsort((np.arange(len(probs)), -probs))
    cum = np.cumsum(probs[order])
    k = int(np.searchsorted(cum, top_p, side="left")) + 1
    k = min(k, len(probs))
    ids = order[:k]
    ids = ids[probs[ids] > 0.0]
    chosen = probs[ids]
    return ids, chosen / chosen.sum()


def _allowed_token_ids(vocab_size: int) -> np.ndarray:
    """Everything a decoder may emit: regular tokens plus </s>."""
    return np.concatenate(([EOS_ID], np.arange(N_RESERVED, vocab_size)))


def sample_next_token(
    logits: np.ndarray,
    config: GenerationConfig,
    rng: np.random.Generator | None,
) -> int:
    """Pick the next token id from a full-vocabulary logit row.

    Reserved tokens other than </s> are excluded before the argmax or the
    top-p renormalization; greedy breaks ties by lowest token id.
    """
    allowed = _allowed_token_ids(len(logits))
    masked = np.full(len(logits), -np.inf)
    masked[allowed] = logits[allowed]
    if config.mode == "greedy":
        return int(np.argmax(masked))
    shifted = masked - masked.max()
    exp = np.exp(shifted)
    probs = exp / exp.sum()
    ids, renormed = nucleus_candidates(probs, config.top_p)
    return int(rng.choice(ids, p=renormed))


def generate(
    model: "Model",
    vocab: Vocabulary,
    example: "MultimodalExample",
    config: GenerationConfig,
    use_event: bool = True,
) -> list[list[int]]:
    """Decode ``num_samples`` token-id sequences for one example.

    Decoding starts the decoder at <s> and stops at </s> or max_len; the
    returned sequences carry neither. Greedy ignores top_p and yields the
    same sequence for every sample; nucleus sample k draws from a generator
    seeded by (config.seed, k), so different examples can share a config.
    """
    config.validate()
    if example.task not in GENERATION_TASKS:
        raise ValueError(
            f"example {example.source_id!r} has non-generation task {example.task.value!r}"
        )
    assembled = assemble_input(
        example, vocab, "gen", use_event=use_event, max_positions=model.config.max_positions
    )
    enc_out, enc_mask = model.encoder_states(assembled, example.rois)
    max_len = min(config.max_len, model.config.max_positions - 1)

    sequences: list[list[int]] = []
    for k in range(config.num_samples):
        rng = np.random.default_rng([config.seed, k]) if config.mode == "nucleus" else None
        dec_ids = [BOS_ID]
        out: list[int] = []
        for _ in range(max_len):
            hidden = model.decode_ids(np.asarray(dec_ids, dtype=np.int64), enc_out, enc_mask)
            logits = model.lm_head(hidden).data[-1]
            nxt = sample_next_token(logits, config, rng)
            if nxt == EOS_ID:
                break
            out.append(nxt)
            dec_ids.append(nxt)
        sequences.append(out)
    return sequences
