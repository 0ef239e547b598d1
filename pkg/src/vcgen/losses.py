"""The five pretraining losses and their weighted combination.

Every loss is a per-unit mean in nats: tokens for the generation and
masked-token objectives, annotated regions for attribute prediction, region
pairs for relation prediction, masked regions for region modeling. Terms
with zero applicable units in a batch are omitted rather than reported as
zero, so the weighted sum is never silently diluted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .tensor import (
    Tensor,
    add,
    concat,
    cross_entropy,
    gather_rows,
    kl_divergence,
    log_softmax,
    scale,
)
from .vocab import PAD_ID

if TYPE_CHECKING:  # pragma: no cover
    from .data import PaddedBatch
    from .model import Model

LOSS_ORDER = ("kcg", "ap", "rp", "mlm", "mrm")


@dataclass
class LossWeights:
    kcg: float = 1.0
    ap: float = 1.0
    rp: float = 1.0
    mlm: float = 5.0
    mrm: float = 1.0

    def get(self, name: str) -> float:
        return getattr(self, name)


@dataclass
class LossBreakdown:
    """Float snapshot of one step's loss terms; absent terms stay None."""

    kcg: float | None
    ap: float | None
    rp: float | None
    mlm: float | None
    mrm: float | None
    weights: LossWeights
    total: float

    def term_dict(self) -> dict[str, float]:
        out = {}
        for name in LOSS_ORDER:
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out


# ---------------------------------------------------------------------------
# individual loss terms (logits -> scalar)


def loss_kcg(logits: Tensor, target_ids, ignore_index: int = PAD_ID) -> Tensor:
    """Teacher-forced token cross-entropy; padded positions are ignored."""
    return cross_entropy(logits, target_ids, ignore_index=ignore_index)


def loss_ap(logits: Tensor, attr_labels) -> Tensor:
    """Mean cross-entropy over annotated regions."""
    labels = np.asarray(attr_labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("loss_ap needs at least one annotated region")
    return cross_entropy(logits, labels)


def loss_rp(logits: Tensor, rel_labels) -> Tensor:
    """Mean cross-entropy over (subject, object) region pairs."""
    labels = np.asarray(rel_labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("loss_rp needs at least one region pair")
    return cross_entropy(logits, labels)


def loss_mlm(logits: Tensor, original_ids) -> Tensor:
    """Mean cross-entropy over masked text positions only."""
    targets = np.asarray(original_ids, dtype=np.int64)
    if targets.size == 0:
        raise ValueError("loss_mlm needs at least one masked position")
    return cross_entropy(logits, targets)


def loss_mrm(logits: Tensor, detector_probs) -> Tensor:
    """Mean KL(p || q) against the detector distributions of masked regions."""
    p = detector_probs if isinstance(detector_probs, Tensor) else Tensor(np.asarray(detector_probs), dtype=logits.dtype)
    if p.shape[0] == 0:
        raise ValueError("loss_mrm needs at least one masked region")
    return kl_divergence(p, log_softmax(logits))


def combine_losses(
    terms: dict[str, Tensor], weights: LossWeights | None = None
) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum over present terms, accumulated in the fixed order
    kcg, ap, rp, mlm, mrm (exact in the working dtype)."""
    weights = weights or LossWeights()
    present = [name for name in LOSS_ORDER if name in terms]
    if not present:
        raise ValueError("combine_losses: no loss terms present")
    unknown = set(terms) - set(LOSS_ORDER)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    total: Tensor | None = None
    for name in present:
        weighted = scale(terms[name], weights.get(name))
        total = weighted if total is None else add(total, weighted)
    breakdown = LossBreakdown(
        kcg=float(terms["kcg"].data) if "kcg" in terms else None,
        ap=float(terms["ap"].data) if "ap" in terms else None,
        rp=float(terms["rp"].data) if "rp" in terms else None,
        mlm=float(terms["mlm"].data) if "mlm" in terms else None,
        mrm=float(terms["mrm"].data) if "mrm" in terms else None,
        weights=weights,
        total=float(total.data),
    )
    return total, breakdown


# ---------------------------------------------------------------------------
# batch orchestration


def compute_losses(
    model: "Model",
    batch: "PaddedBatch | Sequence",
    wanted: Iterable[str],
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> dict[str, Tensor]:
    """Forward every example of the batch once and build the wanted terms.

    ``batch`` is a PaddedBatch or a plain sequence of (assembled, example)
    pairs. Units are pooled across the batch before each head so every term
    is a mean over all of its units, matching the singleton decomposition.
    """
    wanted = set(wanted)
    unknown = wanted - set(LOSS_ORDER)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")

    items = getattr(batch, "items", batch)
    enc_pad_to = getattr(batch, "enc_len", None)
    dec_pad_to = getattr(batch, "dec_len", None)

    kcg_rows, kcg_labels = [], []
    ap_rows, ap_labels = [], []
    rp_rows, rp_labels = [], []
    mlm_rows, mlm_targets = [], []
    mrm_rows, mrm_probs = [], []

    for assembled, example in items:
        hidden = model.forward(
            assembled,
            example.rois,
            train=train,
            rng=rng,
            enc_pad_to=enc_pad_to,
            dec_pad_to=dec_pad_to,
        )
        if "kcg" in wanted and assembled.dec_labels is not None:
            kcg_rows.append(gather_rows(hidden, np.arange(assembled.dec_len)))
            kcg_labels.append(assembled.dec_labels)
        if "ap" in wanted and example.attributes:
            slots = assembled.visual_slots
            positions = [slots[roi_idx] for roi_idx, _ in example.attributes]
            ap_rows.append(gather_rows(hidden, positions))
            ap_labels.extend(label for _, label in example.attributes)
        if "rp" in wanted and example.relations:
            slots = assembled.visual_slots
            n = len(slots)
            for subj, obj, _ in example.relations:
                if not (0 <= subj < n and 0 <= obj < n) or subj == obj:
                    raise ValueError(
                        f"relation pair ({subj}, {obj}) out of range for {n} regions"
                    )
            subj_rows = gather_rows(hidden, [slots[s] for s, _, _ in example.relations])
            obj_rows = gather_rows(hidden, [slots[o] for _, o, _ in example.relations])
            rp_rows.append(concat([subj_rows, obj_rows], axis=1))
            rp_labels.extend(label for _, _, label in example.relations)
        if "mlm" in wanted and len(assembled.mlm_positions) > 0:
            mlm_rows.append(gather_rows(hidden, assembled.mlm_positions))
            mlm_targets.append(assembled.mlm_targets)
        if "mrm" in wanted and len(assembled.mrm_positions) > 0:
            mrm_rows.append(gather_rows(hidden, assembled.mrm_positions))
            mrm_probs.extend(example.rois[r].class_probs for r in assembled.mrm_roi_indices)

    terms: dict[str, Tensor] = {}
    if kcg_rows:
        logits = model.lm_head(concat(kcg_rows, axis=0))
        terms["kcg"] = loss_kcg(logits, np.concatenate(kcg_labels))
    if ap_rows:
        logits = model.ap_head(concat(ap_rows, axis=0))
        terms["ap"] = loss_ap(logits, ap_labels)
    if rp_rows:
        logits = model.rp_head(concat(rp_rows, axis=0))
        terms["rp"] = loss_rp(logits, rp_labels)
    if mlm_rows:
        logits = model.lm_head(concat(mlm_rows, axis=0))
        terms["mlm"] = loss_mlm(logits, np.concatenate(mlm_targets))
    if mrm_rows:
        logits = model.mrm_head(concat(mrm_rows, axis=0))
        probs = np.stack(mrm_probs).astype(logits.dtype)
        terms["mrm"] = loss_mrm(logits, probs)
    return terms
