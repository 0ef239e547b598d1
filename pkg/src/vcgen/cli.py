"""Command-line surface: build-vocab, pretrain, finetune, filter, generate,
evaluate, inspect-checkpoint.

Exit codes: 0 success, 1 usage errors, 2 data/validation errors. Heavy
imports happen inside the command handlers so that ``--threads`` can pin the
BLAS thread pools before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


def _apply_thread_limit(argv: list[str]) -> None:
    """Pin BLAS pools before numpy is imported anywhere in this process."""
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            value = argv[i + 1]
        elif arg.startswith("--threads="):
            value = arg.split("=", 1)[1]
        else:
            continue
        if value.isdigit() and int(value) >= 1:
            for var in _THREAD_ENV_VARS:
                os.environ[var] = value
        return


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file merged over the preset")
    parser.add_argument("--seed", type=int, help="override schedule.seed")
    parser.add_argument("--threads", type=int, help="BLAS/OpenMP thread cap")
    parser.add_argument("--preset", choices=("desk", "paper"), default="desk")
    parser.add_argument("--tasks", help="comma list from kcg,ap,rp,mlm,mrm")
    parser.add_argument("--use-event", choices=("true", "false"))
    parser.add_argument("--interleave", choices=("round-robin", "joint"))
    parser.add_argument("--out-dir", help="override paths.out_dir")
    # Dotted overrides for every scalar config leaf (e.g. --model.d_model 64).
    from .config import leaf_fields

    for dotted, _ in leaf_fields():
        if dotted in ("use_event", "interleave"):
            continue
        parser.add_argument(f"--{dotted}", dest=dotted, metavar="VALUE")


def _build_config(args) -> "RunConfig":
    from .config import apply_override, leaf_fields, load_config, preset

    cfg = preset(args.preset)
    if getattr(args, "_finetune_defaults", False):
        cfg.model.dropout_rate = 0.3
    if args.config:
        cfg = load_config(args.config, base=cfg)
    argmap = vars(args)
    for dotted, _ in leaf_fields():
        if dotted in ("use_event", "interleave"):
            continue
        raw = argmap.get(dotted)
        if raw is not None:
            apply_override(cfg, dotted, raw)
    if args.seed is not None:
        cfg.schedule.seed = args.seed
    if args.tasks:
        cfg.tasks = [t.strip() for t in args.tasks.split(",") if t.strip()]
    if args.use_event is not None:
        cfg.use_event = args.use_event == "true"
    if args.interleave is not None:
        cfg.interleave = args.interleave
    if args.out_dir:
        cfg.paths.out_dir = args.out_dir
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_build_vocab(args) -> int:
    from .vocab import build_vocab

    if args.min_freq < 1:
        print(f"error: --min-freq must be >= 1, got {args.min_freq}", file=sys.stderr)
        return EXIT_USAGE
    lines: list[str] = []
    for path in args.input:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"corpus file not found: {p}")
        lines.extend(p.read_text(encoding="utf-8").splitlines())
    vocab = build_vocab(lines, min_freq=args.min_freq)
    vocab.save(args.out)
    print(f"wrote vocabulary of {len(vocab)} tokens to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .train import pretrain

    cfg = _build_config(args)
    result = pretrain(cfg)
    print(json.dumps(result))
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .train import finetune

    cfg = _build_config(args)
    result = finetune(cfg, init_checkpoint=args.init_checkpoint)
    print(json.dumps(result))
    return EXIT_OK


def cmd_filter(args) -> int:
    from .checkpoint import load_checkpoint, params_as_tensors
    from .data import (
        filter_dataset,
        filter_report,
        load_candidates_jsonl,
        save_jsonl,
        score_description,
    )
    from .model import Model
    from .vocab import Vocabulary

    ckpt = load_checkpoint(args.checkpoint)
    model = Model(ckpt.model_config(), params_as_tensors(ckpt))
    vocab = Vocabulary.load(args.vocab)
    if len(vocab) != model.config.vocab_size:
        raise ValueError(
            f"vocabulary size {len(vocab)} does not match checkpoint vocab_size {model.config.vocab_size}"
        )
    use_event = args.use_event != "false"

    candidates = load_candidates_jsonl(args.candidates)
    scored = []
    for relation, example in candidates:
        s = score_description(model, vocab, example, use_event=use_event)
        s.relation = relation
        scored.append(s)
    kept, dropped = filter_dataset(scored, threshold=args.threshold)

    def write(path: str, subset) -> None:
        save_jsonl(
            path,
            [s.example for s in subset],
            extras=[{"relation": s.relation, "avg_ce": s.avg_ce} for s in subset],
        )

    write(args.out_kept, kept)
    write(args.out_dropped, dropped)
    report = filter_report(kept, dropped)
    report["threshold"] = args.threshold
    Path(args.report).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    print(f"kept {len(kept)}/{len(scored)} candidates (threshold {args.threshold})")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .checkpoint import load_checkpoint, params_as_tensors
    from .data import load_jsonl
    from .generate import GenerationConfig, generate
    from .model import Model
    from .vocab import Vocabulary

    ckpt = load_checkpoint(args.checkpoint)
    model = Model(ckpt.model_config(), params_as_tensors(ckpt))
    vocab = Vocabulary.load(args.vocab)
    if len(vocab) != model.config.vocab_size:
        raise ValueError(
            f"vocabulary size {len(vocab)} does not match checkpoint vocab_size {model.config.vocab_size}"
        )
    use_event = args.use_event != "false"
    num_samples = 1 if args.mode == "greedy" else args.num_samples
    gen_cfg = GenerationConfig(
        mode=args.mode,
        top_p=args.top_p,
        max_len=args.max_len,
        num_samples=num_samples,
        seed=args.seed if args.seed is not None else 0,
    )
    gen_cfg.validate()

    examples = load_jsonl(args.dataset)
    with Path(args.out).open("w", encoding="utf-8", newline="\n") as fh:
        header = {
            "seed": gen_cfg.seed,
            "mode": gen_cfg.mode,
            "top_p": gen_cfg.top_p,
            "num_samples": gen_cfg.num_samples,
            "max_len": gen_cfg.max_len,
        }
        fh.write(json.dumps(header) + "\n")
        for idx, example in enumerate(examples):
            per_example = GenerationConfig(
                mode=gen_cfg.mode,
                top_p=gen_cfg.top_p,
                max_len=gen_cfg.max_len,
                num_samples=gen_cfg.num_samples,
                seed=_mix_seed(gen_cfg.seed, idx),
            )
            sequences = generate(model, vocab, example, per_example, use_event=use_event)
            record = {
                "source_id": example.source_id,
                "task": example.task.value,
                "generations": [vocab.decode(seq) for seq in sequences],
            }
            fh.write(json.dumps(record) + "\n")
    print(f"wrote generations for {len(examples)} examples to {args.out}")
    return EXIT_OK


def _mix_seed(seed: int, index: int) -> int:
    # Stable per-example stream; examples can be decoded in any order.
    import numpy as np

    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _load_generations(path: str):
    records = []
    header = None
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if "source_id" not in obj:
                if line_no == 1:
                    header = obj
                    continue
                raise ValueError(f"line {line_no}: generation rows need a source_id")
            records.append(obj)
    return header, records


def cmd_evaluate(args) -> int:
    from .data import load_jsonl
    from .metrics import EvalCorpus, EvalEntry, metric_report

    _, records = _load_generations(args.generations)
    references = load_jsonl(args.references)
    refs_by_key: dict[tuple[str, str], list[str]] = {}
    for example in references:
        refs_by_key.setdefault((example.source_id, example.task.value), []).append(
            example.target_text.lower()
        )
    training_sentences: set[str] = set()
    if args.training_corpus:
        training_sentences = {
            ex.target_text.lower() for ex in load_jsonl(args.training_corpus)
        }

    def corpus_for(rows) -> EvalCorpus:
        entries = []
        for row in rows:
            key = (row["source_id"], row["task"])
            if key not in refs_by_key:
                raise ValueError(
                    f"source_id {row['source_id']!r} (task {row['task']!r}) missing from references"
                )
            entries.append(EvalEntry(generated=list(row["generations"]), references=refs_by_key[key]))
        return EvalCorpus(entries=entries, training_sentences=training_sentences)

    distinct = args.unique_mode == "distinct"
    report = metric_report(corpus_for(records), distinct_unique=distinct)
    if args.group_by_task:
        tasks = sorted({row["task"] for row in records})
        per_task = {}
        for task in tasks:
            rows = [row for row in records if row["task"] == task]
            per_task[task] = metric_report(corpus_for(rows), distinct_unique=distinct)
        totals = {}
        for key in ("bleu2", "cider", "unique", "novel"):
            totals[key] = sum(per_task[t][key] for t in tasks) / len(tasks)
        totals["n_examples"] = sum(per_task[t]["n_examples"] for t in tasks)
        per_task["total"] = totals
        report["per_task"] = per_task
    payload = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
    print(payload)
    return EXIT_OK


def cmd_inspect_checkpoint(args) -> int:
    from .checkpoint import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    total = sum(int(v.size) for v in ckpt.params.values())
    print(f"checkpoint: {args.checkpoint}")
    print(f"global_step: {ckpt.global_step}")
    print(f"parameters: {len(ckpt.params)} tensors, {total} values")
    if ckpt.opt_state:
        print(f"optimizer state: {len(ckpt.opt_state)} tensors")
    print("model config: " + json.dumps(ckpt.config.get("model", {}), sort_keys=True))
    for name, data in ckpt.params.items():
        print(f"  {name}  {list(data.shape)}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="vcgen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", parents=[], help="build a vocabulary file from text corpora")
    p.add_argument("--input", nargs="+", required=True, help="plain-text corpus files")
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("pretrain", help="multi-task pretraining")
    _add_common_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="generation-only training on a VCG-format dataset")
    _add_common_flags(p)
    p.add_argument("--init-checkpoint", help="start from these parameters")
    p.set_defaults(func=cmd_finetune, _finetune_defaults=True)

    p = sub.add_parser("filter", help="score candidates and keep those below the threshold")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--threshold", type=float, default=3.5)
    p.add_argument("--out-kept", required=True)
    p.add_argument("--out-dropped", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--use-event", choices=("true", "false"), default="true")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("generate", help="decode a dataset with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("greedy", "nucleus"), default="greedy")
    p.add_argument("--top-p", type=float, default=0.9)
    p.add_argument("--num-samples", type=int, default=1)
    p.add_argument("--max-len", type=int, default=32)
    p.add_argument("--seed", type=int)
    p.add_argument("--use-event", choices=("true", "false"), default="true")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score generations against references")
    p.add_argument("--generations", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--training-corpus", help="dataset whose targets define the novelty set")
    p.add_argument("--group-by-task", action="store_true")
    p.add_argument("--unique-mode", choices=("exactly-once", "distinct"), default="exactly-once")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect_checkpoint)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    _apply_thread_limit(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # data/validation errors from the library layers
        from .checkpoint import CheckpointError
        from .data import DatasetError, UnknownRelationError

        if isinstance(exc, (DatasetError, UnknownRelationError, CheckpointError, ValueError, KeyError, json.JSONDecodeError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
        raise


if __name__ == "__main__":
    raise SystemExit(main())
