"""``keytree`` command line: run one task, evaluate a dataset, inspect a run record.

Exit codes: 0 ok, 2 configuration/input, 3 missing or malformed assets,
4 backend failure, 5 unparseable output or record.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from keytree.backends import build_backends
from keytree.config import DEMO_CONFIG, CliConfig, build_config
from keytree.errors import AssetError, ConfigError, DatasetFormatError, KeyTreeError, RecordFormatError
from keytree.evaluation import efficiency_profile, evaluate, feature_path, load_dataset, render_profile
from keytree.pipeline import RunRecord, run_video
from keytree.prompts import QATask
from keytree.tree import canonical_json, export_tree

log = logging.getLogger("keytree")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file or preset name (egoschema.defaults, nextqa.defaults, videomme.defaults)")
    p.add_argument("--demo", action="store_true", help="use the bundled scripted-mock demo configuration")
    p.add_argument("--seed", type=int, help="random seed for clustering")
    p.add_argument("--k-init", type=int, dest="k_init", help="initial number of first-level clusters")
    p.add_argument("--max-breadth", type=int, dest="max_breadth", help="cap on first-level clusters")
    p.add_argument("--threshold", type=int, dest="rele_num_thresh", help="highly relevant clusters needed to stop")
    p.add_argument("--branch-width", type=int, dest="branch_width", help="children per expanded cluster")
    p.add_argument("--max-depth", type=int, dest="max_depth", choices=(2, 3), help="tree depth cap")
    p.add_argument("--llm", help="LLM endpoint: URL, mock:<script.jsonl>, mock:keyword or mock:keyword-inverted")
    p.add_argument("--captioner", help="captioner: URL, store:<file-or-dir> or mock:<script.jsonl>")
    p.add_argument("--assets", help="directory holding <video_id>.vtrf and <video_id>.captions.jsonl")
    p.add_argument("--examples", help="text file with few-shot examples for both prompts")
    p.add_argument("--mask-timings", action="store_true", help="write zero stage times (for byte-stable outputs)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="keytree", description="Query-adaptive keyframe trees for video QA.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="answer one question")
    _add_common(run)
    run.add_argument("--task", help="JSON file with one task object, or a dataset array")
    run.add_argument("--uid", help="task uid to pick from a dataset array")
    run.add_argument("--question", help="inline question text")
    run.add_argument("--options", nargs=5, metavar="OPT", help="the five answer options")
    run.add_argument("--video-id", dest="video_id", help="video id for an inline question")
    run.add_argument("--features", help="features file (default: <assets>/<video_id>.vtrf)")
    run.add_argument("--out", help="where to write the run record (default: <uid>.record.json)")
    run.add_argument("--tree-out", dest="tree_out", help="path stem for tree exports (.json and/or .dot)")
    run.add_argument("--format", choices=("structured", "graph", "both"), default="both", help="tree export format")

    ev = sub.add_parser("eval", help="evaluate a dataset")
    _add_common(ev)
    ev.add_argument("--dataset", help="dataset JSON array (default: [paths] dataset)")
    ev.add_argument("--parallel", type=int, default=1, help="concurrent runs")
    ev.add_argument("--out-dir", dest="out_dir", help="output directory (default: eval_out)")

    ins = sub.add_parser("inspect", help="summarize a run record")
    ins.add_argument("record", help="run record JSON")
    ins.add_argument("--format", choices=("text", "dot", "json"), default="text", help="output format")
    return parser


def _load_config(args) -> CliConfig:
    config = args.config
    if args.demo:
        if config:
            raise ConfigError("--demo and --config are mutually exclusive")
        config = str(DEMO_CONFIG)
    pipe = {k: getattr(args, k) for k in ("seed", "k_init", "max_breadth", "rele_num_thresh", "branch_width", "max_depth")}
    back = {"llm": args.llm, "captioner": args.captioner}
    paths = {"asset_dir": args.assets, "examples": args.examples}
    if getattr(args, "dataset", None):
        paths["dataset"] = args.dataset
    if getattr(args, "out_dir", None):
        paths["out_dir"] = args.out_dir
    return build_config(config, pipe, back, paths)


def _examples(cfg: CliConfig) -> str | None:
    p = cfg.paths.get("examples")
    if p is None:
        return None
    try:
        return p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read examples file {p}: {e.strerror or e}") from e


def _pick_task(args, cfg: CliConfig) -> QATask:
    if args.question is not None:
        if not args.options or not args.video_id:
            raise ConfigError("--question needs --options (five values) and --video-id")
        return QATask(args.uid or "inline", args.video_id, args.question, tuple(args.options))
    source = Path(args.task) if args.task else cfg.paths.get("dataset")
    if source is None:
        raise ConfigError("no task given: use --task, --question, or a config with [paths] dataset")
    try:
        data = json.loads(Path(source).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read task file {source}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"task file {source} is not valid JSON: {e}") from None
    if isinstance(data, dict):
        return QATask.from_dict(data)
    tasks = load_dataset(source)
    if args.uid is None:
        if len(tasks) != 1:
            raise ConfigError(f"{source} holds {len(tasks)} tasks; choose one with --uid")
        return tasks[0]
    for t in tasks:
        if t.uid == args.uid:
            return t
    raise ConfigError(f"uid {args.uid!r} not found in {source}")


def cmd_run(args) -> int:
    cfg = _load_config(args)
    task = _pick_task(args, cfg)
    if args.features:
        feats = Path(args.features)
    elif "asset_dir" in cfg.paths:
        feats = feature_path(cfg.paths["asset_dir"], task.video_id)
    else:
        raise ConfigError("no features: pass --features or --assets (or set [paths] asset_dir)")
    backends = build_backends(cfg.resolved_backends)
    record = run_video(task, feats, cfg.pipeline, backends, _examples(cfg), cfg.echo())
    out = Path(args.out) if args.out else Path(f"{task.uid}.record.json")
    out.write_bytes(canonical_json(record.to_dict(mask_timings=args.mask_timings)))
    if args.tree_out:
        stem = Path(args.tree_out)
        if args.format in ("structured", "both"):
            stem.with_suffix(".json").write_bytes(export_tree(record.tree, "structured"))
        if args.format in ("graph", "both"):
            stem.with_suffix(".dot").write_bytes(export_tree(record.tree, "graph"))
    for w in record.warnings:
        log.warning("%s", w)
    print(f"prediction: {record.answer.prediction}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    if "dataset" not in cfg.paths:
        raise ConfigError("no dataset: pass --dataset or set [paths] dataset")
    if "asset_dir" not in cfg.paths:
        raise ConfigError("no assets: pass --assets or set [paths] asset_dir")
    if args.parallel < 1:
        raise ConfigError("--parallel must be >= 1")
    tasks = load_dataset(cfg.paths["dataset"])
    backends = build_backends(cfg.resolved_backends)
    report = evaluate(tasks, cfg.paths["asset_dir"], cfg.pipeline, backends, args.parallel, _examples(cfg), cfg.echo())
    out = cfg.paths.get("out_dir", Path("eval_out"))
    (out / "records").mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_bytes(report.to_json(mask_timings=args.mask_timings))
    (out / "predictions.json").write_bytes(canonical_json(report.predictions()))
    table = report.text_table()
    if report.records:
        profile = efficiency_profile(report.records)
        if args.mask_timings:
            profile = {c: {k: 0.0 for k in v} for c, v in profile.items()}
        table += "\n" + render_profile(profile)
    (out / "report.txt").write_text(table, encoding="utf-8")
    for rec in report.records:
        (out / "records" / f"{rec.uid}.json").write_bytes(canonical_json(rec.to_dict(mask_timings=args.mask_timings)))
    for uid, err in report.failures:
        print(f"failed {uid}: {err}", file=sys.stderr)
    sys.stdout.write(report.text_table())
    return 0


def render_inspect(record: RunRecord) -> str:
    lines = [
        f"task {record.uid}  video {record.video_id}",
        f"prediction: {record.answer.prediction}  confidence {record.answer.confidence}"
        + ("  (degraded)" if record.answer.degraded else ""),
        "k sequence: " + " -> ".join(str(k) for k in record.k_sequence),
        "first-level clusters:",
        f"  {'node':<6}{'keyframe':>9}{'relevance':>11}{'members':>9}{'descendants':>13}",
    ]
    for root in record.tree.roots:
        rel = "-" if root.relevance is None else str(int(root.relevance))
        desc = sum(1 for _ in root.walk()) - 1
        lines.append(f"  {root.node_id:<6}{root.keyframe:>9}{rel:>11}{len(root.member_frames):>9}{desc:>13}")
    lines.append(f"keyframes ({record.captions_used}): " + ", ".join(map(str, record.keyframes_used)))
    lines.append(f"llm calls {record.llm_calls}  captioner calls {record.captioner_calls}")
    times = "  ".join(f"{k} {v:.3f}" for k, v in record.stage_times.items())
    lines.append(f"stage times (s): {times}  overall {record.overall_time:.3f}")
    for w in record.warnings:
        lines.append(f"warning: {w}")
    return "\n".join(lines) + "\n"


def cmd_inspect(args) -> int:
    path = Path(args.record)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as e:
        raise AssetError(f"cannot read run record {path}: {e.strerror or e}") from e
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as e:
        raise RecordFormatError(f"{path} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise RecordFormatError(f"{path} does not hold a run record")
    record = RunRecord.from_dict(data)
    if args.format == "dot":
        sys.stdout.write(export_tree(record.tree, "graph").decode("utf-8"))
    elif args.format == "json":
        sys.stdout.write(canonical_json(record.to_dict()).decode("utf-8"))
    else:
        sys.stdout.write(render_inspect(record))
    return 0


COMMANDS = {"run": cmd_run, "eval": cmd_eval, "inspect": cmd_inspect}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.ERROR,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except KeyTreeError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
