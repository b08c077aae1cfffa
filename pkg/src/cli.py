#!/usr/bin/env python3
"""
Command-line interface for the event-grounding toolkit.

Exit codes: 0 success, 2 user or input error, 1 internal error.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from src.config.config import PRESETS, Config, PipelineConfig, load_run_config
from src.core.errors import ContractError, ToolkitError
from src.core.events import Response, TaskKind
from src.utils.logging_utils import get_logger, set_level

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USER = 2


def _values(args_values: Sequence[str]) -> List[str]:
    """Positional values, or whitespace-separated values from stdin when none are given."""
    if args_values:
        return list(args_values)
    return sys.stdin.read().split()


def cmd_tokenize(args) -> int:
    from src.core.tokenizers import encode_score_list, encode_time_list, text_tokenize, TEXT_VOCAB, TaskTag, TokenSeq

    if args.kind == "text":
        text = " ".join(args.values) if args.values else sys.stdin.read().rstrip("\n")
        seq = text_tokenize(text) + TokenSeq.of(TaskTag.TEXT, [TEXT_VOCAB.sync_id])
    else:
        try:
            numbers = [float(v) for v in _values(args.values)]
        except ValueError as e:
            raise ContractError(f"not a number: {e}") from None
        seq = encode_time_list(numbers) if args.kind == "time" else encode_score_list(numbers)
    print(seq.render())
    return EXIT_OK


def cmd_detokenize(args) -> int:
    from src.core.tokenizers import (
        TEXT_VOCAB, TaskTag, decode_score_list_detailed, decode_time_list_detailed, parse_display, text_detokenize,
    )

    text = " ".join(args.values) if args.values else sys.stdin.read()
    tag = TaskTag(args.kind)
    seq = parse_display(text.strip(), tag)
    if tag is TaskTag.TEXT:
        ids = [i for i in seq.ids if i not in (TEXT_VOCAB.sync_id, TEXT_VOCAB.eos_id)]
        print(text_detokenize(ids))
        return EXIT_OK
    decode = decode_time_list_detailed if tag is TaskTag.TIME else decode_score_list_detailed
    decoded = decode(seq, lenient=args.lenient)
    for message in decoded.diagnostics:
        print(f"skipped: {message}", file=sys.stderr)
    print(" ".join(f"{v:.1f}" for v in decoded.values))
    return EXIT_OK


def _select_record(path: Path, video_id: Optional[str], index: int):
    from src.core.data_pipeline import read_records

    records = list(read_records(path))
    if video_id is not None:
        for record in records:
            if record.video_id == video_id:
                return record
        raise ContractError(f"no record with video_id {video_id!r} in {path}")
    if not 0 <= index < len(records):
        raise ContractError(f"record index {index} out of range ({len(records)} records)")
    return records[index]


def cmd_build_seq(args) -> int:
    from src.core.sequence_codec import build_sequence, dump_layout
    from src.core.synthetic_data import sample_from_record

    record = _select_record(Path(args.input), args.video_id, args.index)
    sample = sample_from_record(record.video_id, record.duration, record.instruction, record.events,
                                record.task_kind, args.num_frames)
    layout = build_sequence(sample, record.events, slots_per_frame=args.slots_per_frame,
                            append_stop=args.append_stop)
    meta = {"video_id": record.video_id, "duration": record.duration, "task": record.task_kind.value}
    text = "#meta " + json.dumps(meta) + "\n" + dump_layout(layout)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
        logger.info(f"Wrote {len(layout)} positions to {args.output}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_parse_seq(args) -> int:
    from src.core.data_pipeline import AnnotationRecord, serialize_record
    from src.core.errors import SequenceParseError
    from src.core.events import response_to_dict
    from src.core.sequence_codec import load_layout_dump, parse_layout
    from src.core.tokenizers import text_detokenize

    text = Path(args.input).read_text(encoding="utf-8")
    meta = None
    if text.startswith("#meta "):
        first, _, text = text.partition("\n")
        try:
            meta = json.loads(first[len("#meta "):])
        except json.JSONDecodeError:
            raise SequenceParseError("unreadable #meta line", 1) from None

    layout = load_layout_dump(text)
    response = parse_layout(layout, lenient=args.lenient)
    if meta is None:
        print(json.dumps(response_to_dict(response)))
        return EXIT_OK

    instruction_ids = layout.prompt.ids[layout.frame_region_length:-1]
    record = AnnotationRecord(
        video_id=meta["video_id"],
        duration=meta["duration"],
        task_kind=TaskKind(meta["task"]),
        instruction=text_detokenize(instruction_ids),
        events=response,
    )
    print(serialize_record(record))
    return EXIT_OK


def _run_config(args):
    overrides = {
        "seed": args.seed,
        "train_epochs": args.epochs,
        "learning_rate": args.lr,
        "batch_size": args.batch_size,
        "num_frames": args.num_frames,
        "slots_per_frame": args.slots_per_frame,
        "frame_sample": args.frame_sample,
        "output_dir": args.output_dir,
        "checkpoint_path": args.checkpoint,
    }
    return load_run_config(args.config, preset=args.preset, overrides=overrides)


def cmd_train_toy(args) -> int:
    from src.core.data_pipeline import record_from_sample, write_records
    from src.core.synthetic_data import make_splits
    from src.core.trainer import save_checkpoint, train

    config = _run_config(args)
    train_set, test_set = make_splits(config)
    result = train(config, train_set, eval_samples=test_set.samples, show_progress=not args.quiet)

    checkpoint = save_checkpoint(config.resolved_checkpoint_path, result.model, config)
    output_dir = Path(config.output_dir)
    write_records(output_dir / "train_gold.jsonl", [record_from_sample(s) for s in train_set.samples])
    write_records(output_dir / "test_gold.jsonl", [record_from_sample(s) for s in test_set.samples])
    with open(output_dir / "history.json", "w", encoding="utf-8") as f:
        json.dump([record.model_dump() for record in result.history], f, indent=2)

    print(f"final_loss={result.final_loss:.6f}")
    print(f"checkpoint={checkpoint}")
    return EXIT_OK


def cmd_demo(args) -> int:
    from src.core.pipeline import run_learning_demo

    report, metrics = run_learning_demo(_run_config(args), show_progress=not args.quiet)
    sys.stdout.write(report.to_text())
    print(f"final_loss={metrics['final_loss']:.6f}")
    for key, value in metrics["gold_echo"].items():
        print(f"gold_echo.{key}={value:.2f}")
    return EXIT_OK


def cmd_generate(args) -> int:
    from src.core.data_pipeline import prediction_record, read_records, write_records
    from src.core.synthetic_data import generate_dataset
    from src.core.trainer import load_checkpoint, predict

    model, config = load_checkpoint(args.checkpoint)
    updates = {k: v for k, v in {
        "decode_policy": args.policy,
        "constrained": True if args.constrained else None,
        "max_new_tokens": args.max_new_tokens,
        "seed": args.seed,
    }.items() if v is not None}
    decode_config = config.model_copy(update=updates)

    wanted = list(read_records(args.records))
    # samples are regenerated from the checkpoint's data settings
    pool = {}
    for split, size in (("train", config.train_size), ("test", config.test_size)):
        if any(r.video_id.startswith(f"{split}-") for r in wanted):
            pool.update(generate_dataset(config, size, split).by_id())

    records = []
    traces = []
    for record in wanted:
        sample = pool.get(record.video_id)
        if sample is None:
            raise ContractError(f"video {record.video_id!r} is not part of the checkpoint's synthetic data")
        result = predict(model, sample, decode_config)
        if result.truncated:
            logger.warning(f"{record.video_id}: generation truncated by the token budget")
        records.append(prediction_record(sample, result.response))
        traces.extend({"video_id": record.video_id, **step.model_dump(mode="json")} for step in result.trace)

    write_records(args.output, records)
    if args.trace:
        from src.utils.jsonl import write_jsonl
        write_jsonl(args.trace, traces)
    print(f"predictions={args.output}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from src.core.data_pipeline import read_records
    from src.core.metrics import evaluate_task

    golds = list(read_records(args.gold))
    preds = {r.video_id: r for r in read_records(args.pred)}
    missing = [g.video_id for g in golds if g.video_id not in preds]
    if missing:
        logger.warning(f"{len(missing)} gold videos have no prediction; scoring them as empty")
    pred_responses = [preds[g.video_id].events if g.video_id in preds else Response() for g in golds]
    report = evaluate_task(args.task, pred_responses, [g.events for g in golds])
    if args.json:
        print(report.to_json())
    else:
        sys.stdout.write(report.to_text())
    return EXIT_OK


def _pipeline_config(args) -> PipelineConfig:
    updates: Dict[str, Any] = {}
    if getattr(args, "scope", None):
        updates["percentile_scope"] = args.scope
    if getattr(args, "mr_source", None):
        updates["mr_annotation_source"] = args.mr_source
    return PipelineConfig(**updates)


def cmd_filter(args) -> int:
    from src.core.data_pipeline import filter_dvc, filter_mr, read_records, write_records
    from src.utils.jsonl import write_jsonl

    config = _pipeline_config(args)
    kept = []
    report = []
    for record in read_records(args.input):
        if record.task_kind is TaskKind.DVC:
            decision = filter_dvc(record, config)
            keep, reasons = decision.keep, list(decision.reasons)
        elif record.task_kind is TaskKind.MR:
            keep = filter_mr(record, config)
            reasons = [] if keep else ["annotation-source"]
        else:
            keep, reasons = True, []
        report.append({"video_id": record.video_id, "keep": keep, "reasons": reasons})
        if keep:
            kept.append(record)

    write_records(args.output, kept)
    if args.report:
        write_jsonl(args.report, report)
    rejected = len(report) - len(kept)
    print(f"kept={len(kept)} rejected={rejected}")
    for row in report:
        if not row["keep"]:
            print(f"reject {row['video_id']}: {','.join(row['reasons'])}")
    return EXIT_OK


def cmd_bin_scores(args) -> int:
    from src.core.data_pipeline import build_highlight_record, record_from_dict, write_records
    from src.core.errors import RecordSchemaError
    from src.utils.jsonl import iter_jsonl

    config = _pipeline_config(args)
    out = []
    for line_number, obj in iter_jsonl(args.input):
        similarities = obj.pop("similarities", None)
        if not isinstance(similarities, list):
            raise RecordSchemaError("required: one list of clip similarities per event", "similarities", line_number)
        record = record_from_dict(obj, line_number)
        out.append(build_highlight_record(record, similarities, config))
    write_records(args.output, out)
    print(f"highlight_records={len(out)}")
    return EXIT_OK


def cmd_make_vs(args) -> int:
    from src.core.data_pipeline import read_records, select_summary_clips, write_records

    out = [select_summary_clips(record) for record in read_records(args.input)]
    write_records(args.output, out)
    print(f"summary_records={len(out)}")
    return EXIT_OK


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", choices=sorted(PRESETS), default="smoke", help="Base settings (default: smoke)")
    parser.add_argument("--config", type=str, help="Flat key=value config file overriding the preset")
    parser.add_argument("--seed", type=int, help="Seed for every random generator")
    parser.add_argument("--epochs", type=int, help="Training epochs")
    parser.add_argument("--lr", type=float, help="Peak learning rate")
    parser.add_argument("--batch-size", type=int, help="Samples per optimizer step")
    parser.add_argument("--num-frames", type=int, help="Frames per video")
    parser.add_argument("--slots-per-frame", type=int, help="Visual slots per frame (8 or 16)")
    parser.add_argument("--frame-sample", choices=["uniform", "clip_random"], help="Frame sampling strategy")
    parser.add_argument("--output-dir", type=str, help=f"Output directory (default: {Config.OUTPUT_DIR})")
    parser.add_argument("--checkpoint", type=str, help="Checkpoint path (default: <output-dir>/toy_net.pt)")
    parser.add_argument("--quiet", action="store_true", help="Hide progress bars")


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per operation."""
    parser = argparse.ArgumentParser(
        prog="python -m src.cli",
        description="Event-grounding toolkit: tokenizers, sequences, toy model, metrics and data pipeline.",
    )
    parser.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help=f"Console and file log level (default: {Config.LOG_LEVEL})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tokenize", help="Encode values or text as display-form tokens")
    p.add_argument("--kind", choices=["time", "score", "text"], required=True, help="Tokenizer to use")
    p.add_argument("values", nargs="*", help="Values (or text) to encode; read from stdin when omitted")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("detokenize", help="Decode display-form tokens back to values or text")
    p.add_argument("--kind", choices=["time", "score", "text"], required=True, help="Tokenizer to use")
    p.add_argument("--lenient", action="store_true", help="Skip malformed values instead of failing")
    p.add_argument("values", nargs="*", help="Display-form tokens; read from stdin when omitted")
    p.set_defaults(func=cmd_detokenize)

    p = sub.add_parser("build-seq", help="Lay out one JSONL record as a sequence debug dump")
    p.add_argument("--input", required=True, help="Annotation JSONL file")
    p.add_argument("--video-id", help="Record to lay out (default: --index)")
    p.add_argument("--index", type=int, default=0, help="Record position in the file (default: 0)")
    p.add_argument("--num-frames", type=int, default=8, help="Frame blocks in the prompt (default: 8)")
    p.add_argument("--slots-per-frame", type=int, default=8, help="Visual slots per frame (default: 8)")
    p.add_argument("--append-stop", action="store_true", help="Close the answer with the stop event")
    p.add_argument("--output", help="Dump file (default: stdout)")
    p.set_defaults(func=cmd_build_seq)

    p = sub.add_parser("parse-seq", help="Parse a sequence debug dump back into a record")
    p.add_argument("--input", required=True, help="Dump file written by build-seq")
    p.add_argument("--lenient", action="store_true", help="Keep complete events of a malformed answer")
    p.set_defaults(func=cmd_parse_seq)

    p = sub.add_parser("train-toy", help="Train the toy network on synthetic planted events")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("demo", help="Train, generate and evaluate in one staged run")
    _add_run_flags(p)
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("generate", help="Decode answers for records with a trained checkpoint")
    p.add_argument("--checkpoint", required=True, help="Checkpoint written by train-toy")
    p.add_argument("--records", required=True, help="JSONL records naming the videos to answer")
    p.add_argument("--output", required=True, help="Prediction JSONL file")
    p.add_argument("--policy", choices=["greedy", "top_k"], help="Sampling policy (default: from checkpoint)")
    p.add_argument("--constrained", action="store_true", help="Enforce the fixed-width value grammar")
    p.add_argument("--max-new-tokens", type=int, help="Token budget per answer")
    p.add_argument("--seed", type=int, help="Sampling seed")
    p.add_argument("--trace", help="Write a JSONL generation trace here")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="Score predictions against gold records")
    p.add_argument("--pred", required=True, help="Prediction JSONL")
    p.add_argument("--gold", required=True, help="Gold JSONL")
    p.add_argument("--task", choices=[t.value for t in TaskKind], required=True, help="Metric set to report")
    p.add_argument("--json", action="store_true", help="Print the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("filter", help="Apply the dense-caption checklist and the moment-retrieval source flag")
    p.add_argument("--input", required=True, help="Annotation JSONL")
    p.add_argument("--output", required=True, help="Kept records JSONL")
    p.add_argument("--report", help="Per-record decisions JSONL")
    p.add_argument("--mr-source", help="Accepted moment-retrieval annotation source")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("bin-scores", help="Build highlight records from dense-caption records and clip similarities")
    p.add_argument("--input", required=True, help="DVC JSONL whose lines also carry 'similarities'")
    p.add_argument("--output", required=True, help="Highlight JSONL")
    p.add_argument("--scope", choices=["video", "event"], help="Clips ranked per video or per event")
    p.set_defaults(func=cmd_bin_scores)

    p = sub.add_parser("make-vs", help="Select one summarization clip per source event")
    p.add_argument("--input", required=True, help="Highlight JSONL")
    p.add_argument("--output", required=True, help="Summarization JSONL")
    p.set_defaults(func=cmd_make_vs)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for the CLI."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USER if e.code not in (0, None) else EXIT_OK

    if args.log_level:
        set_level(args.log_level)

    try:
        return args.func(args)
    except (ToolkitError, ValidationError, OSError, ValueError) as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_USER
    except Exception as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
