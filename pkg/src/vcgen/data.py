"""Dataset records, JSONL ingestion, relation mapping, batching, CE filter.

Dataset schema (UTF-8 JSONL, one object per line):

    {"task": "intent|before|after|caption|region_caption",
     "event": "string or null",
     "target": "string",
     "rois": [{"feat": [...], "class_probs": [...]}, ...],
     "attributes": [[roi_idx, attr_label], ...],
     "relations": [[subj_idx, obj_idx, rel_label], ...],
     "source_id": "string"}

Candidate files for the self-training filter replace "task" with a
"relation" field holding a knowledge-model relation name (xIntent, xWant,
xNeed, xReact, xEffect); the filter maps it onto a task. Scored outputs are
the same schema plus "avg_ce" (per-token mean cross-entropy in nats).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .model import AssembledInput, RoIFeature, assemble_input
from .tensor import cross_entropy
from .vocab import GENERATION_TASKS, PAD_ID, TaskType, Vocabulary

if TYPE_CHECKING:  # pragma: no cover
    from .model import Model


class DatasetError(ValueError):
    """Schema violation; message carries the offending line number."""


class UnknownRelationError(ValueError):
    pass


COMET_RELATION_TASKS = {
    "xIntent": TaskType.INTENT,
    "xWant": TaskType.INTENT,
    "xNeed": TaskType.BEFORE,
    "xReact": TaskType.AFTER,
    "xEffect": TaskType.AFTER,
}


def map_comet_relation(relation: str) -> TaskType:
    """xIntent/xWant -> intent, xNeed -> before, xReact/xEffect -> after."""
    try:
        return COMET_RELATION_TASKS[relation]
    except KeyError:
        raise UnknownRelationError(f"unknown relation {relation!r}") from None


@dataclass
class MultimodalExample:
    task: TaskType
    rois: list[RoIFeature]
    event_text: str | None
    target_text: str
    attributes: list[tuple[int, int]] = field(default_factory=list)
    relations: list[tuple[int, int, int]] = field(default_factory=list)
    source_id: str = ""


@dataclass
class ScoredExample:
    example: MultimodalExample
    avg_ce: float
    relation: str | None = None  # original relation for filter candidates


def _check(condition: bool, line_no: int | None, message: str) -> None:
    if not condition:
        where = f"line {line_no}: " if line_no is not None else ""
        raise DatasetError(where + message)


def example_from_dict(
    obj: dict,
    line_no: int | None = None,
    n_attr: int | None = None,
    n_rel: int | None = None,
    task_override: TaskType | None = None,
) -> MultimodalExample:
    _check(isinstance(obj, dict), line_no, "record is not a JSON object")
    if task_override is None:
        raw_task = obj.get("task")
        _check(
            isinstance(raw_task, str) and raw_task in TaskType._value2member_map_,
            line_no,
            f"field 'task' must be one of {[t.value for t in TaskType]}, got {obj.get('task')!r}",
        )
        task = TaskType(raw_task)
    else:
        task = task_override

    rois_raw = obj.get("rois", [])
    _check(isinstance(rois_raw, list), line_no, "field 'rois' must be a list")
    rois: list[RoIFeature] = []
    for i, r in enumerate(rois_raw):
        _check(
            isinstance(r, dict) and "feat" in r and "class_probs" in r,
            line_no,
            f"roi {i} must be an object with 'feat' and 'class_probs'",
        )
        try:
            rois.append(RoIFeature(np.asarray(r["feat"], dtype=np.float64), np.asarray(r["class_probs"], dtype=np.float64)))
        except ValueError as exc:
            raise DatasetError(f"line {line_no}: roi {i} field invalid: {exc}") from None
    if rois:
        _check(
            all(len(r.feat) == len(rois[0].feat) for r in rois)
            and all(len(r.class_probs) == len(rois[0].class_probs) for r in rois),
            line_no,
            "rois must share feat/class_probs widths",
        )

    target = obj.get("target", "")
    _check(isinstance(target, str), line_no, "field 'target' must be a string")
    if task in GENERATION_TASKS:
        _check(bool(target.strip()), line_no, f"field 'target' must be non-empty for task {task.value!r}")

    event = obj.get("event")
    _check(event is None or isinstance(event, str), line_no, "field 'event' must be a string or null")

    n_rois = len(rois)
    attributes: list[tuple[int, int]] = []
    for a in obj.get("attributes", []) or []:
        _check(
            isinstance(a, (list, tuple)) and len(a) == 2,
            line_no,
            "field 'attributes' entries must be [roi_idx, attr_label]",
        )
        idx, label = int(a[0]), int(a[1])
        _check(0 <= idx < n_rois, line_no, f"attribute roi index {idx} out of range for {n_rois} rois")
        _check(label >= 0, line_no, f"attribute label {label} must be >= 0")
        if n_attr is not None:
            _check(label < n_attr, line_no, f"attribute label {label} exceeds configured count {n_attr}")
        attributes.append((idx, label))

    relations: list[tuple[int, int, int]] = []
    for r in obj.get("relations", []) or []:
        _check(
            isinstance(r, (list, tuple)) and len(r) == 3,
            line_no,
            "field 'relations' entries must be [subj_idx, obj_idx, rel_label]",
        )
        subj, obj_idx, label = int(r[0]), int(r[1]), int(r[2])
        _check(0 <= subj < n_rois and 0 <= obj_idx < n_rois, line_no, f"relation indices ({subj}, {obj_idx}) out of range for {n_rois} rois")
        _check(subj != obj_idx, line_no, f"relation pair ({subj}, {obj_idx}) must name two distinct rois")
        _check(label >= 0, line_no, f"relation label {label} must be >= 0")
        if n_rel is not None:
            _check(label < n_rel, line_no, f"relation label {label} exceeds configured count {n_rel}")
        relations.append((subj, obj_idx, label))

    source_id = obj.get("source_id", "")
    _check(isinstance(source_id, str), line_no, "field 'source_id' must be a string")

    return MultimodalExample(
        task=task,
        rois=rois,
        event_text=event,
        target_text=target,
        attributes=attributes,
        relations=relations,
        source_id=source_id,
    )


def example_to_dict(example: MultimodalExample) -> dict:
    return {
        "task": example.task.value,
        "event": example.event_text,
        "target": example.target_text,
        "rois": [
            {"feat": [float(x) for x in r.feat], "class_probs": [float(x) for x in r.class_probs]}
            for r in example.rois
        ],
        "attributes": [list(a) for a in example.attributes],
        "relations": [list(r) for r in example.relations],
        "source_id": example.source_id,
    }


def _iter_jsonl(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield line_no, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {line_no}: malformed JSON ({exc.msg})") from None


def load_jsonl(path: str | Path, n_attr: int | None = None, n_rel: int | None = None) -> list[MultimodalExample]:
    """Parse and validate a dataset file; fails fast with the line number."""
    return [example_from_dict(obj, line_no, n_attr, n_rel) for line_no, obj in _iter_jsonl(path)]


def save_jsonl(path: str | Path, examples: Sequence[MultimodalExample], extras: Sequence[dict] | None = None) -> None:
    """Write examples one JSON object per line; ``extras`` merge extra fields."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for i, example in enumerate(examples):
            obj = example_to_dict(example)
            if extras is not None:
                obj.update(extras[i])
            fh.write(json.dumps(obj) + "\n")


def load_candidates_jsonl(path: str | Path) -> list[tuple[str, MultimodalExample]]:
    """Load filter candidates whose rows carry a 'relation' instead of a task."""
    out: list[tuple[str, MultimodalExample]] = []
    for line_no, obj in _iter_jsonl(path):
        relation = obj.get("relation")
        if not isinstance(relation, str):
            raise DatasetError(f"line {line_no}: candidate rows need a string 'relation' field")
        try:
            task = map_comet_relation(relation)
        except UnknownRelationError:
            raise UnknownRelationError(f"line {line_no}: unknown relation {relation!r}") from None
        out.append((relation, example_from_dict(obj, line_no, task_override=task)))
    return out


# ---------------------------------------------------------------------------
# scoring and filtering


def score_description(
    model: "Model", vocab: Vocabulary, example: MultimodalExample, use_event: bool = True
) -> ScoredExample:
    """Teacher-forced per-token mean cross-entropy of the target, in nats.

    Runs in eval mode (no dropout), conditioning on the example's task token,
    regions, and event text; the end-of-sequence token counts as the final
    label, matching the generation training objective.
    """
    assembled = assemble_input(
        example, vocab, "kcg", use_event=use_event, max_positions=model.config.max_positions
    )
    hidden = model.forward(assembled, example.rois, train=False)
    logits = model.lm_head(hidden)
    ce = cross_entropy(logits, assembled.dec_labels, ignore_index=PAD_ID)
    return ScoredExample(example=example, avg_ce=float(ce.data))


def score_dataset(
    model: "Model", vocab: Vocabulary, examples: Sequence[MultimodalExample], use_event: bool = True
) -> list[ScoredExample]:
    return [score_description(model, vocab, ex, use_event) for ex in examples]


DEFAULT_FILTER_THRESHOLD = 3.5


def filter_dataset(
    scored: Sequence[ScoredExample], threshold: float = DEFAULT_FILTER_THRESHOLD
) -> tuple[list[ScoredExample], list[ScoredExample]]:
    """Partition by strict avg_ce < threshold ("below"); order preserved."""
    if np.isnan(threshold):
        raise ValueError("threshold must not be NaN")
    kept = [s for s in scored if s.avg_ce < threshold]
    dropped = [s for s in scored if not (s.avg_ce < threshold)]
    return kept, dropped


HISTOGRAM_BINS = 50
HISTOGRAM_RANGE = (0.0, 10.0)


def filter_report(kept: Sequence[ScoredExample], dropped: Sequence[ScoredExample]) -> dict:
    """Counts, keep ratio, and a histogram of avg_ce over all scored examples."""
    scores = np.asarray([s.avg_ce for s in kept] + [s.avg_ce for s in dropped])
    n_total = len(scores)
    in_range = scores[scores <= HISTOGRAM_RANGE[1]] if n_total else scores
    counts, edges = np.histogram(in_range, bins=HISTOGRAM_BINS, range=HISTOGRAM_RANGE)
    overflow = int((scores > HISTOGRAM_RANGE[1]).sum()) if n_total else 0
    return {
        "n_candidates": n_total,
        "n_kept": len(kept),
        "n_dropped": len(dropped),
        "keep_ratio": (len(kept) / n_total) if n_total else 0.0,
        "histogram": {
            "bin_edges": [float(e) for e in edges],
            "counts": [int(c) for c in counts],
            "overflow": overflow,
        },
    }


# ---------------------------------------------------------------------------
# batching


@dataclass
class PaddedBatch:
    """A batch of assembled examples right-padded to the batch max lengths."""

    items: list[tuple[AssembledInput, MultimodalExample]]
    enc_len: int
    dec_len: int
    enc_ids: np.ndarray  # [B, enc_len], pad id beyond each real length
    enc_mask: np.ndarray  # [B, enc_len] bool, True at real positions
    dec_ids: np.ndarray  # [B, dec_len]
    dec_labels: np.ndarray | None  # [B, dec_len], pad id at ignored positions

    def __len__(self) -> int:
        return len(self.items)


def make_batches(
    items: Sequence[tuple[AssembledInput, MultimodalExample]],
    batch_size: int,
    pad_id: int = PAD_ID,
    seed=0,
    shuffle: bool = True,
) -> list[PaddedBatch]:
    """Chunk (assembled, example) pairs into padded batches.

    The shuffle is a deterministic permutation of the given seed; the last
    partial batch is retained.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(items))
    if shuffle:
        order = np.random.default_rng(seed).permutation(order)
    batches = []
    for start in range(0, len(items), batch_size):
        chunk = [items[i] for i in order[start : start + batch_size]]
        enc_len = max(a.enc_len for a, _ in chunk)
        dec_len = max(a.dec_len for a, _ in chunk)
        enc_ids = np.full((len(chunk), enc_len), pad_id, dtype=np.int64)
        enc_mask = np.zeros((len(chunk), enc_len), dtype=bool)
        dec_ids = np.full((len(chunk), dec_len), pad_id, dtype=np.int64)
        any_labels = any(a.dec_labels is not None for a, _ in chunk)
        dec_labels = np.full((len(chunk), dec_len), pad_id, dtype=np.int64) if any_labels else None
        for row, (a, _) in enumerate(chunk):
            enc_ids[row, : a.enc_len] = a.enc_ids
            enc_mask[row, : a.enc_len] = True
            dec_ids[row, : a.dec_len] = a.dec_ids
            if dec_labels is not None and a.dec_labels is not None:
                dec_labels[row, : len(a.dec_labels)] = a.dec_labels
        batches.append(
            PaddedBatch(
                items=chunk,
                enc_len=enc_len,
                dec_len=dec_len,
                enc_ids=enc_ids,
                enc_mask=enc_mask,
                dec_ids=dec_ids,
                dec_labels=dec_labels,
            )
        )
    return batches
