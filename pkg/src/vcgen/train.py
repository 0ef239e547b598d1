"""Training loops, validation scoring, and run manifests.

Everything stochastic derives from the schedule seed through fixed tag
tuples, so a run with the same config, inputs, and a single thread is
bit-reproducible. Per step, the round-robin trainer draws one batch from
the active task's dataset and reads out only that task's loss; denoising
passes still corrupt text and regions together. Joint mode instead takes
one batch per dataset stream per step and sums every active term.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import (
    check_model_config,
    load_checkpoint,
    params_as_tensors,
    save_checkpoint,
)
from .config import RunConfig, config_hash, to_dict
from .data import MultimodalExample, PaddedBatch, load_jsonl, make_batches, score_description
from .losses import LOSS_ORDER, LossWeights, combine_losses, compute_losses
from .model import Model, assemble_input
from .optim import AdamW
from .tensor import Tape
from .vocab import Vocabulary

# Seed-derivation tags; each stochastic consumer mixes its tag with the run
# seed so streams never collide.
TAG_INIT = 0
TAG_SHUFFLE = 1
TAG_MASK = 2
TAG_DROPOUT = 3

STREAM_OF_TASK = {
    "kcg": "kcg_data",
    "ap": "region_data",
    "rp": "region_data",
    "mlm": "caption_data",
    "mrm": "caption_data",
}


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: RunConfig, inputs: Sequence[str | Path]) -> None:
    manifest = {
        "command": command,
        "seed": cfg.schedule.seed,
        "config_sha256": config_hash(cfg),
        "config": to_dict(cfg),
        "inputs": {str(p): sha256_file(p) for p in inputs},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def resolve_vocab_size(cfg: RunConfig, vocab: Vocabulary) -> None:
    if cfg.model.vocab_size == 0:
        cfg.model.vocab_size = len(vocab)
    elif cfg.model.vocab_size != len(vocab):
        raise ValueError(
            f"config vocab_size {cfg.model.vocab_size} does not match vocabulary size {len(vocab)}"
        )


def check_dataset_dims(examples: Sequence[MultimodalExample], cfg: RunConfig, path: str) -> None:
    """Fail fast when region feature widths disagree with the model config."""
    for example in examples:
        for roi in example.rois:
            if len(roi.feat) != cfg.model.d_visual:
                raise ValueError(
                    f"{path}: example {example.source_id!r} has RoI feature width "
                    f"{len(roi.feat)}, config d_visual is {cfg.model.d_visual}"
                )
            if len(roi.class_probs) != cfg.model.n_classes:
                raise ValueError(
                    f"{path}: example {example.source_id!r} has {len(roi.class_probs)} "
                    f"detector classes, config n_classes is {cfg.model.n_classes}"
                )


def _task_batches(
    examples: Sequence[MultimodalExample],
    vocab: Vocabulary,
    task: str,
    cfg: RunConfig,
    epoch: int,
) -> list[PaddedBatch]:
    """Assemble and batch one task's dataset for one epoch."""
    task_index = LOSS_ORDER.index(task)
    items = []
    for idx, example in enumerate(examples):
        assembled = assemble_input(
            example,
            vocab,
            task,
            use_event=cfg.use_event,
            seed=[cfg.schedule.seed, TAG_MASK, epoch, task_index, idx],
            max_positions=cfg.model.max_positions,
        )
        items.append((assembled, example))
    return make_batches(
        items,
        cfg.schedule.batch_size,
        seed=[cfg.schedule.seed, TAG_SHUFFLE, epoch, task_index],
        shuffle=True,
    )


def _train_step(
    model: Model,
    optimizer: AdamW,
    batch_terms: list[tuple[PaddedBatch, set[str]]],
    weights: LossWeights,
    cfg: RunConfig,
    epoch: int,
    global_step: int,
):
    """One optimizer step; returns None when the batch carried no loss units
    (e.g. a denoising batch where the 15% masking selected nothing)."""
    rng = np.random.default_rng([cfg.schedule.seed, TAG_DROPOUT, epoch, global_step])
    with Tape() as tape:
        terms = {}
        for batch, wanted in batch_terms:
            terms.update(compute_losses(model, batch, wanted, train=True, rng=rng))
        if not terms:
            return None
        total, breakdown = combine_losses(terms, weights)
    model.zero_grad()
    tape.backward(total)
    optimizer.step()
    return breakdown


def _log_line(fh, record: dict) -> None:
    fh.write(json.dumps(record) + "\n")
    fh.flush()


def evaluate_kcg(
    model: Model, vocab: Vocabulary, examples: Sequence[MultimodalExample], use_event: bool = True
) -> float:
    """Per-token mean cross-entropy over a dataset, eval mode."""
    total_nll = 0.0
    total_tokens = 0
    for example in examples:
        scored = score_description(model, vocab, example, use_event=use_event)
        n_tokens = len(vocab.encode(example.target_text)) + 1  # plus </s>
        total_nll += scored.avg_ce * n_tokens
        total_tokens += n_tokens
    if total_tokens == 0:
        raise ValueError("evaluate_kcg needs a non-empty dataset")
    return total_nll / total_tokens


def _run_epochs(
    cfg: RunConfig,
    model: Model,
    vocab: Vocabulary,
    datasets: dict[str, list[MultimodalExample]],
    active: list[str],
    log_fh,
    out_dir: Path,
    val_examples: Sequence[MultimodalExample] | None = None,
    start_step: int = 0,
) -> int:
    optimizer = AdamW(
        model.params,
        lr=cfg.optimizer.lr,
        betas=(cfg.optimizer.beta1, cfg.optimizer.beta2),
        eps=cfg.optimizer.eps,
        weight_decay=cfg.optimizer.weight_decay,
    )
    weights = cfg.loss_weights
    global_step = start_step
    for epoch in range(cfg.schedule.epochs):
        if cfg.interleave == "round-robin":
            queues = {task: iter(_task_batches(datasets[task], vocab, task, cfg, epoch)) for task in active}
            alive = dict.fromkeys(active, True)
            while any(alive.values()):
                for task in active:
                    if not alive[task]:
                        continue
                    batch = next(queues[task], None)
                    if batch is None:
                        alive[task] = False
                        continue
                    breakdown = _train_step(
                        model, optimizer, [(batch, {task})], weights, cfg, epoch, global_step
                    )
                    if breakdown is None:
                        continue
                    global_step += 1
                    _log_line(
                        log_fh,
                        {
                            "kind": "step",
                            "epoch": epoch,
                            "step": global_step,
                            "task": task,
                            **breakdown.term_dict(),
                            "total": breakdown.total,
                        },
                    )
        else:  # joint
            streams: dict[str, tuple[list[PaddedBatch], set[str]]] = {}
            for task in active:
                key = STREAM_OF_TASK[task]
                if key in streams:
                    streams[key][1].add(task)
                else:
                    streams[key] = (_task_batches(datasets[task], vocab, task, cfg, epoch), {task})
            n_steps = max(len(batches) for batches, _ in streams.values())
            for s in range(n_steps):
                batch_terms = [
                    (batches[s % len(batches)], wanted) for batches, wanted in streams.values()
                ]
                breakdown = _train_step(model, optimizer, batch_terms, weights, cfg, epoch, global_step)
                if breakdown is None:
                    continue
                global_step += 1
                _log_line(
                    log_fh,
                    {
                        "kind": "step",
                        "epoch": epoch,
                        "step": global_step,
                        "task": "joint",
                        **breakdown.term_dict(),
                        "total": breakdown.total,
                    },
                )
        if val_examples is not None:
            val = evaluate_kcg(model, vocab, val_examples, use_event=cfg.use_event)
            _log_line(log_fh, {"kind": "val", "epoch": epoch, "val_kcg": val})
        save_checkpoint(
            out_dir / f"epoch_{epoch + 1:03d}.kmbt",
            to_dict(cfg),
            model.params,
            global_step=global_step,
        )
    return global_step


def pretrain(cfg: RunConfig) -> dict:
    """Multi-task pretraining over the configured task mix."""
    cfg.validate()
    vocab = Vocabulary.load(cfg.paths.vocab)
    resolve_vocab_size(cfg, vocab)
    active = [t for t in LOSS_ORDER if t in cfg.tasks]

    datasets: dict[str, list[MultimodalExample]] = {}
    input_paths = [cfg.paths.vocab]
    loaded: dict[str, list[MultimodalExample]] = {}
    for task in active:
        path = getattr(cfg.paths, STREAM_OF_TASK[task])
        if not path:
            raise ValueError(f"active task {task!r} has no dataset path configured")
        if path not in loaded:
            loaded[path] = load_jsonl(path, n_attr=cfg.model.n_attr, n_rel=cfg.model.n_rel)
            check_dataset_dims(loaded[path], cfg, path)
            input_paths.append(path)
        if not loaded[path]:
            raise ValueError(f"active task {task!r} has an empty dataset: {path}")
        datasets[task] = loaded[path]

    out_dir = Path(cfg.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir, "pretrain", cfg, input_paths)

    model = Model.init_random(cfg.model, [cfg.schedule.seed, TAG_INIT])
    log_path = out_dir / "train_log.jsonl"
    with log_path.open("w", encoding="utf-8", newline="\n") as log_fh:
        global_step = _run_epochs(cfg, model, vocab, datasets, active, log_fh, out_dir)
    final = out_dir / "final.kmbt"
    save_checkpoint(final, to_dict(cfg), model.params, global_step=global_step)
    return {"log": str(log_path), "checkpoint": str(final), "steps": global_step}


def finetune(cfg: RunConfig, init_checkpoint: str | Path | None = None) -> dict:
    """Generation-only training on a VCG-format dataset.

    With ``init_checkpoint`` the parameters start from the checkpoint
    (structural config fields must agree); otherwise from random init.
    """
    cfg.validate()
    vocab = Vocabulary.load(cfg.paths.vocab)
    resolve_vocab_size(cfg, vocab)
    if not cfg.paths.train_data:
        raise ValueError("finetune needs paths.train_data")
    train_examples = load_jsonl(cfg.paths.train_data)
    if not train_examples:
        raise ValueError(f"empty training dataset: {cfg.paths.train_data}")
    check_dataset_dims(train_examples, cfg, cfg.paths.train_data)
    val_examples = load_jsonl(cfg.paths.val_data) if cfg.paths.val_data else None
    if val_examples is not None:
        check_dataset_dims(val_examples, cfg, cfg.paths.val_data)

    input_paths = [cfg.paths.vocab, cfg.paths.train_data]
    if cfg.paths.val_data:
        input_paths.append(cfg.paths.val_data)

    if init_checkpoint is not None:
        ckpt = load_checkpoint(init_checkpoint)
        check_model_config(ckpt, cfg.model)
        model = Model(cfg.model, params_as_tensors(ckpt))
        input_paths.append(init_checkpoint)
    else:
        model = Model.init_random(cfg.model, [cfg.schedule.seed, TAG_INIT])

    out_dir = Path(cfg.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir, "finetune", cfg, input_paths)

    log_path = out_dir / "train_log.jsonl"
    with log_path.open("w", encoding="utf-8", newline="\n") as log_fh:
        global_step = _run_epochs(
            cfg,
            model,
            vocab,
            {"kcg": train_examples},
            ["kcg"],
            log_fh,
            out_dir,
            val_examples=val_examples,
        )
    final = out_dir / "final.kmbt"
    save_checkpoint(final, to_dict(cfg), model.params, global_step=global_step)
    return {"log": str(log_path), "checkpoint": str(final), "steps": global_step}
