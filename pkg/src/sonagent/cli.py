"""Command-line surface over the interpretation engine.

Every command is a single pipeline run driven by one config file; identical
config and fixtures give identical stdout. Exit codes: 0 success, 1 runtime
failure (printed as `error: ...`), 2 usage errors.
"""

import argparse
import json
import os
import sys

import numpy as np
from PIL import Image as PILImage

from .bench import BenchItem, generate_vqa_items, read_items_jsonl, score_run
from .config import build_engine, load_config
from .core import ImageRef, Query, TaskKind, Unit
from .errors import ConfigError, SonagentError
from .evidence import EvidenceBank
from .fixtures import load_image_by_id, load_manifest, load_video
from .workflows import answer_vqa, caption_image, summarize_video


def _emit(payload: dict, as_json: bool, text_lines) -> None:
    if as_json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        for line in text_lines:
            print(line)


def _report_dict(report) -> dict:
    return {
        "findings": report.findings,
        "impression": report.impression,
        "note": report.note,
        "citations": list(report.citations),
        "flags": list(report.flags),
    }


def _dump_bank(bank, path: str | None) -> None:
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(bank.snapshot())


def _manifest_or_none(cfg):
    try:
        return load_manifest(cfg.fixture_root)
    except FileNotFoundError:
        return None


def _load_image(cfg, image_arg: str, spacing: float | None) -> ImageRef:
    manifest = _manifest_or_none(cfg)
    if manifest is not None:
        try:
            return load_image_by_id(cfg.fixture_root, manifest, image_arg)
        except (KeyError, FileNotFoundError):
            pass
    if os.path.isfile(image_arg):
        if spacing is None:
            raise ConfigError("--spacing is required when --image is a file path")
        pixels = np.asarray(PILImage.open(image_arg).convert("L"), dtype=np.uint8)
        image_id = os.path.splitext(os.path.basename(image_arg))[0]
        return ImageRef(id=image_id, pixels=pixels, spacing_mm_per_px=spacing,
                        source_path=image_arg)
    raise ConfigError(f"image {image_arg!r} is neither a bundle image id"
                      " nor a readable file")


def _parse_inline_options(pairs) -> tuple:
    options = []
    for pair in pairs or ():
        key, sep, text = pair.partition("=")
        if not sep or not key or not text:
            raise ConfigError(f"--option must look like KEY=text, got {pair!r}")
        options.append((key, text))
    return tuple(options)


def _resolve_item(args) -> BenchItem:
    if args.item:
        with open(args.item, encoding="utf-8") as fh:
            return BenchItem.from_dict(json.load(fh))
    items = read_items_jsonl(args.items)
    for item in items:
        if item.item_id == args.item_id:
            return item
    raise ConfigError(f"item id {args.item_id!r} not found in {args.items}")


def cmd_ask(args) -> int:
    cfg = load_config(args.config)
    engine = build_engine(cfg)
    if args.question:
        options = _parse_inline_options(args.option)
        image = _load_image(cfg, args.image, args.spacing)
        query = Query(id=args.query_id, text=args.question, options=options,
                      attachments=(image,))
        answer = None
    else:
        item = _resolve_item(args)
        image = _load_image(cfg, item.image_id, args.spacing)
        query = Query(id=item.item_id, text=item.question, options=item.options,
                      attachments=(image,))
        answer = item.answer
    decision, report, bank = answer_vqa(
        engine, query,
        disable_tools=args.disable_tools, disable_voters=args.disable_voters)
    _dump_bank(bank, args.dump_bank)
    payload = {
        "query_id": query.id,
        "decision": decision.to_dict(),
        "report": _report_dict(report),
        "bank_entries": len(bank.entries),
    }
    lines = [f"query: {query.id}",
             f"decision: {decision.key}"
             f" ({decision.justification.get('rule', decision.mode.value)})"]
    if answer is not None:
        payload["expected"] = answer
        lines.append(f"expected: {answer}")
    lines += ["", report.text]
    _emit(payload, args.json, lines)
    return 0


def cmd_caption(args) -> int:
    cfg = load_config(args.config)
    engine = build_engine(cfg)
    image = _load_image(cfg, args.image, args.spacing)
    report, bank = caption_image(engine, image, ga_weeks=args.ga_weeks)
    _dump_bank(bank, args.dump_bank)
    payload = {"image_id": image.id, "report": _report_dict(report),
               "bank_entries": len(bank.entries)}
    _emit(payload, args.json, [f"image: {image.id}", "", report.text])
    return 0


def cmd_summarize_video(args) -> int:
    cfg = load_config(args.config)
    engine = build_engine(cfg)
    manifest = _manifest_or_none(cfg)
    if manifest is None:
        raise ConfigError("summarize-video needs a bundle manifest under"
                          " the fixture root")
    video = load_video(cfg.fixture_root, manifest)
    keyframes, report, bank = summarize_video(
        engine, video, exam=cfg.exam,
        tau=cfg.constant("keyframe_tau"),
        window=cfg.constant("keyframe_window"),
        max_per_plane=cfg.constant("max_per_plane"))
    _dump_bank(bank, args.dump_bank)
    payload = {"video_id": video.id, "keyframes": keyframes.to_dict(),
               "report": _report_dict(report),
               "bank_entries": len(bank.entries)}
    lines = [f"video: {video.id}"]
    for frame in keyframes.frames:
        lines.append(f"keyframe {frame.index}: {frame.label}"
                     f" (score {frame.score:g})")
    lines += ["", report.text]
    _emit(payload, args.json, lines)
    return 0


def cmd_bench_generate(args) -> int:
    cfg = load_config(args.config)
    manifest = _manifest_or_none(cfg)
    if manifest is None:
        raise ConfigError("bench generate needs a bundle manifest under"
                          " the fixture root")
    from .bench import LabeledCase

    cases = []
    for case in manifest["cases"]:
        cases.append(LabeledCase(
            image_id=case["image_id"], task=TaskKind(case["task"]),
            label=case["label"], value=case["value"],
            unit=Unit(case["unit"]) if case["unit"] else None))
    items = generate_vqa_items(cases, seed=args.seed)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    from .bench import write_items_jsonl

    write_items_jsonl(items, args.out)
    payload = {"out": args.out, "n_items": len(items), "seed": args.seed}
    _emit(payload, args.json,
          [f"wrote {len(items)} items to {args.out} (seed {args.seed})"])
    return 0


def _load_predictions(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = [json.loads(line) for line in text.splitlines() if line.strip()]
    if isinstance(data, dict):
        return data
    return {record["item_id"]: record["key"] for record in data}


def cmd_bench_score(args) -> int:
    items = read_items_jsonl(args.items)
    predictions = _load_predictions(args.preds)
    result = score_run(items, predictions)
    lines = [f"{'family':>8}  {'n':>4}  {'accuracy':>8}  {'macro_f1':>8}"]
    for family_id in sorted(result["per_task"]):
        row = result["per_task"][family_id]
        lines.append(f"{family_id:>8}  {row['n']:>4}  {row['accuracy']:>8.4f}"
                     f"  {row['macro_f1']:>8.4f}")
    lines.append(f"overall accuracy (family mean): "
                 f"{result['overall_accuracy']:.4f}")
    lines.append(f"overall macro-F1 (family mean): "
                 f"{result['overall_macro_f1']:.4f}")
    lines.append(f"overall accuracy (item weighted): "
                 f"{result['overall_accuracy_item_weighted']:.4f}")
    if result["missing"]:
        lines.append(f"missing predictions: {', '.join(result['missing'])}")
    _emit(result, args.json, lines)
    return 0


def cmd_tools_list(args) -> int:
    cfg = load_config(args.config)
    engine = build_engine(cfg)
    rows = []
    for binding in engine.registry.bindings():
        rows.append({
            "tool_id": binding.tool_id,
            "task": binding.task.value,
            "kind": binding.kind,
            "transport": getattr(binding.adapter, "transport", "in_process"),
            "degraded": binding.degraded,
        })
    lines = [f"{'tool':<16} {'task':<14} {'kind':<7} {'transport':<11} degraded"]
    for row in rows:
        lines.append(f"{row['tool_id']:<16} {row['task']:<14} {row['kind']:<7}"
                     f" {row['transport']:<11} {str(row['degraded']).lower()}")
    _emit({"tools": rows}, args.json, lines)
    return 0


def cmd_tools_probe(args) -> int:
    cfg = load_config(args.config)
    engine = build_engine(cfg)
    rows = []
    for binding in engine.registry.bindings():
        try:
            healthy = bool(binding.adapter.health())
        except Exception:  # a probe never crashes the command
            healthy = False
        rows.append({"tool_id": binding.tool_id, "healthy": healthy})
    lines = [f"{row['tool_id']:<16} {'ok' if row['healthy'] else 'unreachable'}"
             for row in rows]
    _emit({"tools": rows}, args.json, lines)
    return 0


def cmd_bank_dump(args) -> int:
    with open(args.snapshot, encoding="utf-8") as fh:
        bank = EvidenceBank.load_snapshot(fh.read())
    entries = [e for e in bank.entries if args.tag is None or e.tag == args.tag]
    payload = {"run_id": bank.run_id, "mode": bank.mode.value,
               "entries": [e.to_dict() for e in entries]}
    lines = [f"run: {bank.run_id} ({bank.mode.value}),"
             f" {len(entries)} entries"]
    for entry in entries:
        lines.append(f"[{entry.id}] {entry.tag}: "
                     + json.dumps(entry.payload, sort_keys=True))
    _emit(payload, args.json, lines)
    return 0


def _add_common(parser, config=True):
    if config:
        parser.add_argument("--config", required=True,
                            help="path to the run config JSON")
    parser.add_argument("--json", action="store_true",
                        help="emit machine-readable JSON on stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sonagent",
        description="Evidence-driven fetal-ultrasound interpretation engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ask", help="answer one option question about an image")
    _add_common(p)
    p.add_argument("--item", help="path to a single benchmark item JSON file")
    p.add_argument("--item-id", help="item id to look up in --items")
    p.add_argument("--items", help="benchmark items JSONL (with --item-id)")
    p.add_argument("--question", help="inline question text")
    p.add_argument("--option", action="append",
                   help="inline option KEY=text (repeatable)")
    p.add_argument("--image", help="image id or file path for inline questions")
    p.add_argument("--query-id", default="cli-query")
    p.add_argument("--spacing", type=float,
                   help="mm per pixel when --image is a file path")
    p.add_argument("--disable-tools", action="store_true")
    p.add_argument("--disable-voters", action="store_true")
    p.add_argument("--dump-bank", help="write the evidence bank snapshot here")
    p.set_defaults(func=cmd_ask)

    p = sub.add_parser("caption", help="describe one image as a grounded report")
    _add_common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--ga-weeks", type=float,
                   help="gestational age; estimated from the image when omitted")
    p.add_argument("--spacing", type=float)
    p.add_argument("--dump-bank")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("summarize-video",
                       help="keyframes plus a grounded report for the bundle video")
    _add_common(p)
    p.add_argument("--dump-bank")
    p.set_defaults(func=cmd_summarize_video)

    bench = sub.add_parser("bench", help="benchmark generation and scoring")
    bench_sub = bench.add_subparsers(dest="bench_command", required=True)

    p = bench_sub.add_parser("generate",
                             help="emit option questions from the bundle manifest")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench_generate)

    p = bench_sub.add_parser("score", help="score predictions against items")
    _add_common(p, config=False)
    p.add_argument("--items", required=True)
    p.add_argument("--preds", required=True)
    p.set_defaults(func=cmd_bench_score)

    tools = sub.add_parser("tools", help="inspect the registered tool battery")
    tools_sub = tools.add_subparsers(dest="tools_command", required=True)

    p = tools_sub.add_parser("list", help="show registered tools")
    _add_common(p)
    p.set_defaults(func=cmd_tools_list)

    p = tools_sub.add_parser("probe", help="health-check every tool adapter")
    _add_common(p)
    p.set_defaults(func=cmd_tools_probe)

    bank = sub.add_parser("bank", help="evidence bank utilities")
    bank_sub = bank.add_subparsers(dest="bank_command", required=True)

    p = bank_sub.add_parser("dump", help="print a saved bank snapshot")
    _add_common(p, config=False)
    p.add_argument("--snapshot", required=True)
    p.add_argument("--tag", help="only entries with this tag")
    p.set_defaults(func=cmd_bank_dump)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.func is cmd_ask:
        inline = bool(args.question)
        by_file = bool(args.item)
        by_id = bool(args.item_id and args.items)
        if sum((inline, by_file, by_id)) != 1:
            parser.error("ask needs exactly one of --item, --item-id/--items,"
                         " or --question/--option/--image")
        if inline and not (args.option and args.image):
            parser.error("inline questions need --option and --image")
    try:
        return args.func(args)
    except SonagentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
