"""Command-line entry point: convert, train, eval, caption, report.

Exit codes: 0 success, 1 runtime failure, 2 usage error. All paths are
resolved relative to --workdir when given. Every subcommand accepts
--seed and is deterministic under the mock and replay backends.
"""

from __future__ import annotations

import argparse
import importlib.resources
import json
import sys
from pathlib import Path

from .errors import EvrepError
from .events import DatasetIndex, load_events_file, parse_csv_events, parse_nmnist_bin, window_events
from .generator import GeneratorConfig, build_generator, load_checkpoint
from .llm import BackendConfig, CaptionRequest, build_backend, caption
from .losses import LossWeights
from .representation import encode_event_frame, encode_tencode, export_png, load_rep_image
from . import evaluation, training

BUILTIN_CLASS_LISTS = {
    "n_mnist": "n_mnist_classes.txt",
    "n_caltech101": "n_caltech101_classes.txt",
}


def load_class_list(name_or_path: str) -> tuple[str, ...]:
    """A builtin list name (n_mnist, n_caltech101) or a text-file path."""
    if name_or_path in BUILTIN_CLASS_LISTS:
        ref = importlib.resources.files("evrep.data") / BUILTIN_CLASS_LISTS[name_or_path]
        text = ref.read_text()
    else:
        text = Path(name_or_path).read_text()
    return tuple(line.strip() for line in text.splitlines() if line.strip())


def _add_backend_args(parser):
    parser.add_argument("--backend", choices=("mock", "replay", "http"), default="mock")
    parser.add_argument("--fixture", default="", help="replay fixture (JSON lines)")
    parser.add_argument("--record", default="", help="append responses to this fixture file")
    parser.add_argument("--endpoint", default="", help="http backend base URL")
    parser.add_argument("--model", default="", help="http backend model name")
    parser.add_argument("--auth-env", default="EVREP_API_KEY",
                        help="environment variable holding the API key")
    parser.add_argument("--timeout", type=float, default=60.0)
    parser.add_argument("--max-retries", type=int, default=3)
    parser.add_argument("--concurrency", type=int, default=4)


def _make_backend(args):
    config = BackendConfig(
        kind=args.backend,
        endpoint=args.endpoint,
        model=args.model,
        auth_env=args.auth_env,
        timeout_s=args.timeout,
        max_retries=args.max_retries,
        concurrency=args.concurrency,
        fixture_path=args.fixture,
        record_path=args.record,
    )
    return build_backend(config)


def _resolve(workdir: Path, path: str) -> str:
    p = Path(path)
    return str(p if p.is_absolute() else workdir / p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evrep", description=__doc__)
    parser.add_argument("--workdir", default=".", help="base directory for relative paths")
    sub = parser.add_subparsers(dest="command", required=True)

    p_convert = sub.add_parser("convert", help="event file(s) to representation PNGs")
    p_convert.add_argument("events_path")
    p_convert.add_argument("--format", choices=("auto", "nmnist", "csv"), default="auto")
    p_convert.add_argument("--repr", choices=("tencode", "event_frame"), default="tencode")
    p_convert.add_argument("--out", default="", help="output PNG path (or prefix with --window-us)")
    p_convert.add_argument("--width", type=int, default=34)
    p_convert.add_argument("--height", type=int, default=34)
    p_convert.add_argument("--window-us", type=int, default=0,
                           help="split into fixed windows of this many microseconds; 0 = one full window")
    p_convert.add_argument("--background", default="0,0,0", help="tencode background as r,g,b floats")
    p_convert.add_argument("--sort", action="store_true", help="sort events instead of rejecting unsorted input")
    p_convert.add_argument("--seed", type=int, default=0)

    p_train = sub.add_parser("train", help="train the generator")
    p_train.add_argument("--manifest", required=True, help="training manifest (JSON lines)")
    p_train.add_argument("--val-manifest", default="", help="validation manifest")
    p_train.add_argument("--config", default="", help="key = value config file")
    p_train.add_argument("--out-dir", default="runs/train")
    p_train.add_argument("--resume", default="", help="resume from a training output directory")
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--batch-size", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--lambda", dest="lambda_semantic", type=float)
    p_train.add_argument("--gamma", dest="gamma_fidelity", type=float)
    p_train.add_argument("--strategy", choices=("spsa", "staged"))
    p_train.add_argument("--spsa-pairs", type=int)
    p_train.add_argument("--spsa-step", type=float)
    p_train.add_argument("--warmup-epochs", type=int)
    p_train.add_argument("--checkpoint-interval", type=int)
    p_train.add_argument("--width", type=int, default=34)
    p_train.add_argument("--height", type=int, default=34)
    p_train.add_argument("--stem", type=int, default=32)
    p_train.add_argument("--stages", default="48,80,160", help="encoder stage channels")
    p_train.add_argument("--repeats", default="2,2,3")
    p_train.add_argument("--kinds", default="fused,fused,mbconv")
    p_train.add_argument("--seed", type=int, default=0)
    _add_backend_args(p_train)

    p_eval = sub.add_parser("eval", help="zero-shot recognition over representations")
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--dataset", default="dataset", help="dataset name for report rows")
    p_eval.add_argument("--classes", default="", help="builtin class list name or file (default: manifest labels)")
    p_eval.add_argument("--kinds", default="tencode", help="comma-separated representation kinds")
    p_eval.add_argument("--checkpoint", default="", help="generator checkpoint for kind=evrep")
    p_eval.add_argument("--external-dir", default="", help="PNG directory for kind=external_frame")
    p_eval.add_argument("--out", default="runs/eval")
    p_eval.add_argument("--width", type=int, default=34)
    p_eval.add_argument("--height", type=int, default=34)
    p_eval.add_argument("--seed", type=int, default=0)
    _add_backend_args(p_eval)

    p_caption = sub.add_parser("caption", help="caption one image file")
    p_caption.add_argument("image")
    p_caption.add_argument("--prompt", default="")
    p_caption.add_argument("--max-tokens", type=int, default=64)
    p_caption.add_argument("--seed", type=int, default=0)
    _add_backend_args(p_caption)

    p_report = sub.add_parser("report", help="aggregate saved record files into a report")
    p_report.add_argument("records", nargs="+", help="records.jsonl files")
    p_report.add_argument("--out", default="runs/report")
    p_report.add_argument("--seed", type=int, default=0)
    return parser


def _parse_background(text: str) -> tuple[float, float, float]:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3 or not all(0.0 <= v <= 1.0 for v in parts):
        raise EvrepError(f"--background must be three floats in [0,1], got {text!r}")
    return tuple(parts)  # type: ignore[return-value]


def cmd_convert(args, workdir: Path) -> int:
    path = _resolve(workdir, args.events_path)
    if args.format == "nmnist":
        stream = parse_nmnist_bin(Path(path).read_bytes(), args.width, args.height, sort=args.sort)
    elif args.format == "csv":
        stream = parse_csv_events(Path(path).read_text(), args.width, args.height, sort=args.sort)
    else:
        stream = load_events_file(path, args.width, args.height, sort=args.sort)
    if not len(stream):
        print(f"warning: {args.events_path} contains no events", file=sys.stderr)
    t0, t1 = stream.time_span()
    windows = []
    if args.window_us > 0:
        start = t0
        while start < t1:
            windows.append((start, start + args.window_us))
            start += args.window_us
    else:
        windows.append((t0, t1))
    out = _resolve(workdir, args.out) if args.out else str(Path(path).with_suffix("")) + f"_{args.repr}.png"
    background = _parse_background(args.background)
    written = []
    for i, (w0, w1) in enumerate(windows):
        if args.repr == "tencode":
            image = encode_tencode(window_events(stream, w0, min(w1, t1)), w0, w1, background=background)
        else:
            image = encode_event_frame(stream, w0, min(w1, t1))
        target = out if len(windows) == 1 else str(Path(out).with_suffix("")) + f"_{i:04d}.png"
        export_png(image, target)
        written.append(target)
    print("\n".join(written))
    return 0


def read_train_config_file(path: str) -> dict:
    """Parse "key = value" lines; '#' starts a comment."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise EvrepError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


_CONFIG_FIELD_TYPES = {
    "epochs": int, "batch_size": int, "learning_rate": float, "beta1": float,
    "beta2": float, "lambda_semantic": float, "gamma_fidelity": float,
    "semantic_strategy": str, "spsa_pairs_per_batch": int, "spsa_step": float,
    "warmup_epochs": int, "seed": int, "checkpoint_interval": int,
    "grad_clip_norm": float, "caption_max_tokens": int, "early_stop_patience": int,
}


def _build_train_config(args, workdir: Path) -> training.TrainConfig:
    values: dict = {}
    if args.config:
        raw = read_train_config_file(_resolve(workdir, args.config))
        for key, text in raw.items():
            if key not in _CONFIG_FIELD_TYPES:
                raise EvrepError(f"unknown training config key {key!r}")
            values[key] = _CONFIG_FIELD_TYPES[key](text)
    overrides = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "lambda_semantic": args.lambda_semantic,
        "gamma_fidelity": args.gamma_fidelity,
        "semantic_strategy": args.strategy,
        "spsa_pairs_per_batch": args.spsa_pairs,
        "spsa_step": args.spsa_step,
        "warmup_epochs": args.warmup_epochs,
        "checkpoint_interval": args.checkpoint_interval,
    }
    for key, value in overrides.items():
        if value is not None:
            values[key] = value
    values.setdefault("seed", args.seed)
    lam = values.pop("lambda_semantic", 1.0)
    gam = values.pop("gamma_fidelity", 1.0)
    return training.TrainConfig(weights=LossWeights(lam, gam), **values)


def cmd_train(args, workdir: Path) -> int:
    config = _build_train_config(args, workdir)
    gen_config = GeneratorConfig(
        stem_channels=args.stem,
        stage_channels=tuple(int(c) for c in args.stages.split(",")),
        stage_repeats=tuple(int(r) for r in args.repeats.split(",")),
        stage_kind=tuple(args.kinds.split(",")),
    )
    index = DatasetIndex.from_manifest(_resolve(workdir, args.manifest))
    pairs = training.load_train_pairs(index, gen_config.grid_factor, (args.width, args.height))
    val_pairs = []
    if args.val_manifest:
        val_index = DatasetIndex.from_manifest(_resolve(workdir, args.val_manifest))
        val_pairs = training.load_train_pairs(val_index, gen_config.grid_factor, (args.width, args.height))
    out_dir = Path(_resolve(workdir, args.out_dir))
    resume = _resolve(workdir, args.resume) if args.resume else None
    if resume:
        generator, _ = load_checkpoint(Path(resume) / training.LAST_CHECKPOINT)
    else:
        generator = build_generator(gen_config, seed=config.seed)
    backend = _make_backend(args)
    result = training.train(pairs, val_pairs, generator, backend, config, out_dir, resume_from=resume)
    print(result.checkpoint_path)
    return 0


def cmd_eval(args, workdir: Path) -> int:
    index = DatasetIndex.from_manifest(_resolve(workdir, args.manifest))
    if args.classes:
        index = DatasetIndex(index.samples, load_class_list(args.classes))
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    generator = None
    if args.checkpoint:
        generator, _ = load_checkpoint(_resolve(workdir, args.checkpoint))
    backend = _make_backend(args)
    report = evaluation.compare_representations(
        datasets={args.dataset: index},
        kinds=kinds,
        backends={args.backend: backend},
        out_dir=_resolve(workdir, args.out),
        generator=generator,
        external_dirs={args.dataset: _resolve(workdir, args.external_dir)} if args.external_dir else None,
        sensor_sizes={args.dataset: (args.width, args.height)},
        seed=args.seed,
    )
    print("backend,kind,dataset,accuracy_pct,total,unknown,best_flag")
    for r in report.rows:
        print(f"{r.backend},{r.kind},{r.dataset},{r.accuracy_pct:.2f},{r.total},{r.unknown},{int(r.best_flag)}")
    return 0


def cmd_caption(args, workdir: Path) -> int:
    image = load_rep_image(_resolve(workdir, args.image), kind="external_frame")
    backend = _make_backend(args)
    request = CaptionRequest(image=image, max_tokens=args.max_tokens)
    if args.prompt:
        request.prompt = args.prompt
    response = caption(backend, request)
    print(response.text)
    return 0


def cmd_report(args, workdir: Path) -> int:
    records = []
    for path in args.records:
        records.extend(evaluation.read_records(_resolve(workdir, path)))
    report = evaluation.aggregate(records, metadata={"seed": args.seed})
    paths = evaluation.write_report(report, _resolve(workdir, args.out))
    print(json.dumps(paths))
    return 0


_COMMANDS = {
    "convert": cmd_convert,
    "train": cmd_train,
    "eval": cmd_eval,
    "caption": cmd_caption,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    workdir = Path(args.workdir)
    try:
        return _COMMANDS[args.command](args, workdir)
    except EvrepError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
