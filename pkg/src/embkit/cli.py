"""Command-line entry point.

Subcommands: curate (pair extraction + filtering), train (any or all of the
three stages), eval (run the benchmark against a checkpoint or an external
encoder), synth (generate the synthetic benchmark) and serve (expose a
checkpoint over the external-encoder line protocol).

Exit codes: 0 success, 1 runtime error, 2 usage error, 3 partial evaluation
failure. Every output directory gets exactly one manifest.json, written
before the outputs; timestamps live only there, so all other outputs are
byte-reproducible for a fixed argv and seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .curation import FilterConfig, builtin_overlap_scorer, run_pipeline
from .datamodel import TextPair, load_text_pairs
from .encoder import (
    ExternalEncoder,
    ModelEncoder,
    encode,
    init_model,
    load_model,
    serve_model,
)
from .evalsuite import discover_tasks, run_suite
from .synth import SynthConfig, generate, write_suite
from .trainer import (
    TrainConfig,
    load_labeled_pairs,
    run_recipe,
    train_general,
    train_pretrain,
    train_taskspecific,
    write_checkpoint,
)

USAGE_ERROR = 2
PARTIAL_FAILURE = 3


def _default_seed() -> int:
    env = os.environ.get("EMBKIT_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            pass
    return 0


class _Manifest:
    def __init__(self, out_dir: Path, subcommand: str, args: argparse.Namespace) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        self.path = out_dir / "manifest.json"
        self.payload = {
            "tool": "embkit",
            "version": __version__,
            "subcommand": subcommand,
            "seed": getattr(args, "seed", None),
            "config": {k: v for k, v in vars(args).items() if k != "func"},
            "started": datetime.now(timezone.utc).isoformat(),
            "finished": None,
            "outputs": [],
        }
        self._write()

    def _write(self) -> None:
        self.path.write_text(
            json.dumps(self.payload, indent=2, ensure_ascii=False, default=str) + "\n",
            encoding="utf-8",
        )

    def finish(self, outputs: list[str]) -> None:
        self.payload["outputs"] = outputs
        self.payload["finished"] = datetime.now(timezone.utc).isoformat()
        self._write()


def _build_scorer(spec: str, timeout: float):
    """--scorer overlap | encoder:CHECKPOINT | external:CMD.

    Model-based scorers map cosine from [-1, 1] to [0, 1]."""
    if spec == "overlap":
        return builtin_overlap_scorer, None
    if spec.startswith("encoder:"):
        model = load_model(spec.split(":", 1)[1])

        def scorer(pair: TextPair) -> float:
            q = encode(model, [pair.query], "query").data[0]
            p = encode(model, [pair.passage], "passage").data[0]
            return (1.0 + float(q @ p)) / 2.0

        return scorer, None
    if spec.startswith("external:"):
        ext = ExternalEncoder(spec.split(":", 1)[1], timeout=timeout)

        def scorer(pair: TextPair) -> float:
            q = ext.encode([pair.query], "query").data[0]
            p = ext.encode([pair.passage], "passage").data[0]
            return (1.0 + float(q @ p)) / 2.0

        return scorer, ext
    raise ValueError(f"unknown scorer {spec!r}")


def cmd_curate(args: argparse.Namespace) -> int:
    out_dir = Path(args.output)
    manifest = _Manifest(out_dir, "curate", args)
    scorer, ext = _build_scorer(args.scorer, args.timeout)
    cfg = FilterConfig(
        min_chars=args.min_chars,
        max_chars=args.max_chars,
        min_informative_ratio=args.min_informative_ratio,
        dedup=not args.no_dedup,
        semantic_threshold=args.threshold,
        scorer=scorer,
    )
    pairs_path = out_dir / "pairs.jsonl"
    try:
        report = run_pipeline(args.input, cfg, pairs_path)
    finally:
        if ext is not None:
            ext.close()
    report_path = out_dir / "report.json"
    report_path.write_text(
        json.dumps(report.as_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    manifest.finish([str(pairs_path), str(report_path)])
    print(
        f"curate: raw={report.raw} after_general={report.after_general} "
        f"after_semantic={report.after_semantic}"
    )
    return 0


def _read_lines(path: str) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def cmd_train(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    manifest = _Manifest(out_dir, "train", args)
    instructions = {}
    if args.instructions:
        instructions = json.loads(Path(args.instructions).read_text(encoding="utf-8"))

    def cfg(stage: str) -> TrainConfig:
        return TrainConfig(
            stage=stage,
            batch_size=args.batch_size,
            temperature=args.temperature,
            learning_rate=args.lr,
            steps=args.steps,
            seed=args.seed,
            mask_ratio=args.mask_ratio,
            instructions=instructions,
            hard_negative_rank_window=(args.window[0], args.window[1]),
            remine_every=args.remine_every,
        )

    model = (
        load_model(args.init)
        if args.init
        else init_model(args.buckets, args.dim, args.dim, seed=args.seed)
    )
    corpus = _read_lines(args.corpus) if args.corpus else None
    outputs: list[str] = []

    if args.stage == "all":
        for flag, name in ((args.texts, "--texts"), (args.pairs, "--pairs"), (args.labeled, "--labeled")):
            if not flag:
                raise ValueError(f"--stage all requires {name}")
        run_recipe(
            _read_lines(args.texts),
            load_text_pairs(args.pairs),
            load_labeled_pairs(args.labeled),
            (cfg("pretrain"), cfg("general"), cfg("taskspecific")),
            model,
            out_dir=out_dir,
            mining_corpus=corpus,
        )
        outputs = [str(out_dir / f"model_{s}.embm") for s in ("pretrain", "general", "finetune")]
    else:
        if args.stage == "pretrain":
            if not args.texts:
                raise ValueError("--stage pretrain requires --texts")
            trained, curve = train_pretrain(model, _read_lines(args.texts), cfg("pretrain"))
        elif args.stage == "general":
            if not args.pairs:
                raise ValueError("--stage general requires --pairs")
            trained, curve = train_general(model, load_text_pairs(args.pairs), cfg("general"))
        else:
            if not args.labeled:
                raise ValueError("--stage taskspecific requires --labeled")
            trained, curve = train_taskspecific(
                model, load_labeled_pairs(args.labeled), cfg("taskspecific"), corpus
            )
        ckpt = out_dir / "model.embm"
        write_checkpoint(trained, cfg(args.stage), ckpt)
        curve.write_csv(out_dir / "model.loss.csv")
        outputs = [str(ckpt), str(out_dir / "model.loss.csv")]

    manifest.finish(outputs)
    print(f"train: stage={args.stage} -> {out_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    manifest = _Manifest(out_dir, "eval", args)
    tasks = discover_tasks(args.tasks)
    if not len(tasks):
        raise ValueError(f"no datasets found under {args.tasks}")
    ext = None
    try:
        if args.external:
            ext = ExternalEncoder(args.external, timeout=args.timeout)
            enc = ext
        else:
            enc = ModelEncoder(load_model(args.model), instruction=args.instruction)
        report = run_suite(tasks, enc, out_dir, seed=args.seed, k=args.k, jobs=args.jobs)
    finally:
        if ext is not None:
            ext.close()
    manifest.finish([str(out_dir / "report.json")])
    for score in report.per_dataset:
        print(f"{score.name}\t{score.metric}\t{score.score:.5f}")
    for name, kind, error in report.failed:
        print(f"{name}\t{kind.value}\tFAILED\t{error}", file=sys.stderr)
    if report.per_dataset:
        print(f"average\t{report.overall_average:.5f}")
    if report.failed:
        return PARTIAL_FAILURE
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    manifest = _Manifest(out_dir, "synth", args)
    suite = generate(SynthConfig(seed=args.seed, topics=args.topics, size=args.size))
    written = write_suite(suite, out_dir)
    manifest.finish([str(p) for p in written])
    print(f"synth: {len(written)} artifacts -> {out_dir}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    serve_model(model, sys.stdin, sys.stdout)
    return 0


def _threshold(value: str) -> float:
    t = float(value)
    if not 0.0 <= t <= 1.0:
        raise argparse.ArgumentTypeError(f"threshold {t} outside [0, 1]")
    return t


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embkit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"embkit {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("curate", help="extract, filter and score text pairs")
    p.add_argument("--input", required=True, nargs="+", help="structured-doc or pair JSONL files")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--threshold", type=_threshold, default=0.43)
    p.add_argument("--scorer", default="overlap", help="overlap | encoder:CKPT | external:CMD")
    p.add_argument("--min-chars", type=int, default=4)
    p.add_argument("--max-chars", type=int, default=8192)
    p.add_argument("--min-informative-ratio", type=float, default=0.5)
    p.add_argument("--no-dedup", action="store_true")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("train", help="run one or all training stages")
    p.add_argument("--stage", required=True, choices=["pretrain", "general", "taskspecific", "all"])
    p.add_argument("--texts", help="pre-training corpus, one text per line")
    p.add_argument("--pairs", help="unlabeled TextPair JSONL")
    p.add_argument("--labeled", help="labeled pair JSONL with task tags")
    p.add_argument("--corpus", help="passage pool for hard-negative mining, one per line")
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--temperature", type=float, default=0.05)
    p.add_argument("--mask-ratio", type=float, default=0.3)
    p.add_argument("--buckets", type=int, default=32768)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--instructions", help="JSON file mapping task tag -> instruction")
    p.add_argument("--window", type=int, nargs=2, default=[2, 100], metavar=("LO", "HI"))
    p.add_argument("--remine-every", type=int, default=None)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate an encoder on a task directory")
    p.add_argument("--tasks", required=True, help="directory of <name>.<kind> datasets")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--model", help="encoder checkpoint")
    group.add_argument("--external", help="command implementing the line protocol")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--instruction", help="prefix attached to every query-side text")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate the synthetic benchmark suite")
    p.add_argument("--out", required=True)
    p.add_argument("--topics", type=int, default=8)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("serve", help="serve a checkpoint over the line protocol on stdio")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 0
    except Exception as exc:  # noqa: BLE001 - map every runtime failure to exit 1
        print(f"embkit {args.subcommand}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
