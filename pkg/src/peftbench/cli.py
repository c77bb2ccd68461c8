"""Command-line entry point: ``gen-data``, ``train``, ``eval``, ``merge`` and ``report``.

Exit status is 0 on success, 1 on a usage error (bad flags, missing or
invalid config) and 2 when the command itself fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .config import (ConfigError, PRESETS, RunConfig, apply_preset, load_config)

log = logging.getLogger("peftbench")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _list(s: str) -> list[str]:
    return [t.strip() for t in s.split(",") if t.strip()]


# flag -> (config path, type)
OVERRIDES = {
    "--method": ("method", str),
    "--output-dir": ("output_dir", str),
    "--dataset": ("data.dataset", str),
    "--rouge-field": ("rouge_field", str),
    "--tokenize-mode": ("tokenize_mode", str),
    "--d-model": ("model.d_model", int),
    "--n-layers": ("model.n_layers", int),
    "--n-heads": ("model.n_heads", int),
    "--d-ff": ("model.d_ff", int),
    "--max-seq-len": ("model.max_seq_len", int),
    "--init-scheme": ("model.init_scheme", str),
    "--lr": ("train.learning_rate", float),
    "--batch-size": ("train.batch_size", int),
    "--epochs": ("train.epochs", int),
    "--max-source-length": ("train.max_source_length", int),
    "--max-target-length": ("train.max_target_length", int),
    "--pre-seq-len": ("prefix.pre_seq_len", int),
    "--d-prefix": ("prefix.d_prefix", int),
    "--prefix-hidden": ("prefix.mlp_hidden", int),
    "--prefix-projection": ("prefix.projection", _bool),
    "--prefix-lr": ("prefix.learning_rate", float),
    "--prefix-epochs": ("prefix.epochs", int),
    "--lora-r": ("lora.r", int),
    "--lora-alpha": ("lora.alpha", float),
    "--lora-dropout": ("lora.dropout", float),
    "--lora-targets": ("lora.targets", _list),
    "--lora-lr": ("lora.learning_rate", float),
    "--lora-epochs": ("lora.epochs", int),
}


def _dest(flag: str) -> str:
    return "ov_" + flag.lstrip("-").replace("-", "_")


def add_config_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="RunConfig JSON file")
    g.add_argument("--preset", action="append", default=[], choices=sorted(PRESETS),
                   help="named hyperparameter preset; repeatable, applied in order")
    g.add_argument("--seed", type=int, help="single seed for model init, shuffling and dropout")
    for flag, (path, typ) in OVERRIDES.items():
        g.add_argument(flag, dest=_dest(flag), type=typ, metavar=path.split(".")[-1].upper())


def resolve_config(args) -> RunConfig:
    """config file, then presets, then per-field flags, then ``--seed``."""
    if args.config:
        try:
            cfg = load_config(args.config)
        except FileNotFoundError as exc:
            raise UsageError(str(exc)) from exc
    else:
        cfg = RunConfig()
    for name in args.preset:
        cfg = apply_preset(cfg, name)
    d = cfg.to_dict()
    for flag, (path, _) in OVERRIDES.items():
        val = getattr(args, _dest(flag))
        if val is None:
            continue
        *parents, leaf = path.split(".")
        node = d
        for k in parents:
            if node.get(k) is None:
                node[k] = {}
            node = node[k]
        node[leaf] = val
    if args.seed is not None:
        d["model"]["seed"] = args.seed
        d["train"]["seed"] = args.seed
    try:
        return RunConfig.from_dict(d).validate()
    except (ConfigError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .backends import MockBackend, RemoteBackend
    from .corpus import GenerationParams, load_corpus, run_pipeline, split_dataset, write_jsonl

    if args.mock:
        backend = MockBackend.from_file(args.mock)
    else:
        backend = RemoteBackend(args.backend_url)
    docs = load_corpus(args.corpus, min_chars=args.min_chars)
    if not docs:
        raise RuntimeError(f"no .txt documents with usable paragraphs in {args.corpus}")
    params = GenerationParams(max_tokens=args.max_tokens, temperature=args.temperature,
                              concurrency=args.concurrency)
    res = run_pipeline(docs, backend, params, threshold=args.dedup_threshold,
                       instruction_text=args.instruction)
    if len(res.records) < 2:
        raise RuntimeError(f"pipeline produced {len(res.records)} records; need at least 2 to split")
    seed = 0 if args.seed is None else args.seed
    train, test, manifest = split_dataset(res.records, args.train_fraction, seed=seed,
                                          train_count=args.train_count, by_doc=args.by_doc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(res.records, out / "dataset.jsonl")
    write_jsonl(train, out / "train.jsonl")
    write_jsonl(test, out / "test.jsonl")
    (out / "split.json").write_text(manifest.to_json() + "\n", encoding="utf-8")
    (out / "gen_log.json").write_text(json.dumps(res.summary(), indent=1, sort_keys=True) + "\n",
                                      encoding="utf-8")
    print(f"{len(docs)} documents, {res.n_completions} completions, {res.n_parsed} pairs parsed, "
          f"{len(res.records)} kept -> train {len(train)} / test {len(test)} in {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import train

    cfg = resolve_config(args)
    if cfg.data.dataset is None:
        raise UsageError("train needs a dataset (--dataset or data.dataset in the config)")
    out = train(cfg)
    print(f"trained method={cfg.method} -> {out}")
    return EXIT_OK


def _load_records(path):
    from .corpus import read_jsonl

    recs = read_jsonl(path)
    if not recs:
        raise RuntimeError(f"{path}: no records")
    return recs


def _merged_model_run(path):
    """Model checkpoint written by ``merge``; a baked prefix rides along as extra tensors."""
    from .adapters import AdapterStack, PrefixAdapter

    model, meta, extra = ckpt.load_model(path)
    stack = AdapterStack()
    if "prefix" in meta:
        a = meta["prefix"]
        ad = PrefixAdapter(a["pre_seq_len"], a["n_layers"], a["d_model"], a["n_heads"],
                           d_prefix=a["d_prefix"], mlp_hidden=a["mlp_hidden"],
                           projection=a["projection"], seed=a["seed"], init=False)
        ad.projection_active = False
        from .autograd import Tensor
        ad.baked = Tensor(extra["prefix.baked"])
        stack.attach(ad)
        stack.freeze("prefix")
    return model, stack, meta


def cmd_eval(args) -> int:
    from .evaluation import evaluate, load_run
    from .model import count_params

    records = _load_records(args.dataset)
    if args.model:
        cfg = resolve_config(args)
        model, stack, meta = _merged_model_run(args.model)
        cfg.model = model.config
        cfg.method = meta.get("method", cfg.method)
        cfg.train.max_source_length = meta.get("max_source_length", cfg.train.max_source_length)
        cfg.train.max_target_length = meta.get("max_target_length", cfg.train.max_target_length)
        accounting = (meta.get("base_params", count_params(model)), meta.get("trainable_params", 0))
        report, preds = evaluate(cfg, model, stack, records, label=args.label, oracle=args.oracle,
                                 timing=args.timing, accounting=accounting)
        report.config_hash = meta.get("config_hash", report.config_hash)
    else:
        if not args.run:
            raise UsageError("eval needs --run DIR or --model FILE")
        override = resolve_config(args) if (args.config or _any_override(args)) else None
        run = load_run(args.run, override)
        report, preds = evaluate(run.config, run.model, run.stack, records, label=args.label,
                                 merge=not args.no_merge, oracle=args.oracle, timing=args.timing)
    out = Path(args.out) if args.out else Path(args.run or ".") / "eval_report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json(), encoding="utf-8")
    if args.predictions:
        with open(args.predictions, "w", encoding="utf-8", newline="\n") as fh:
            for rec, p in zip(records, preds):
                fh.write(json.dumps({"input": rec.input, "reference": rec.output, "prediction": p},
                                    ensure_ascii=False) + "\n")
    print(f"{report.model_label}: bleu4={report.bleu4:.4f} rouge1={report.rouge1:.4f} "
          f"rouge2={report.rouge2:.4f} rougeL={report.rougeL:.4f} -> {out}")
    return EXIT_OK


def _any_override(args) -> bool:
    return bool(args.preset) or args.seed is not None or any(
        getattr(args, _dest(f)) is not None for f in OVERRIDES)


def cmd_merge(args) -> int:
    from .adapters import merge_lora
    from .evaluation import load_run
    from .model import count_params

    run = load_run(args.run)
    model, stack = run.model, run.stack
    if stack.lora is not None:
        model = merge_lora(model, stack.lora)
    meta = {"method": run.config.method, "config_hash": run.manifest["config_hash"],
            "base_params": count_params(run.model), "trainable_params": stack.trainable_count(),
            "max_source_length": run.config.train.max_source_length,
            "max_target_length": run.config.train.max_target_length}
    extra = {}
    if stack.prefix is not None:
        stack.prefix.bake()
        meta["prefix"] = stack.prefix.config_dict()
        extra["prefix.baked"] = stack.prefix.baked.data
    out = Path(args.out) if args.out else Path(args.run) / "merged.ckpt"
    ckpt.save_model(model, out, meta, extra)
    print(f"merged {', '.join(run.manifest['adapters']) or 'nothing'} into {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .evaluation import EvalReport
    from .report import accounting_reports, report_table, reports_from_json, write_bundle

    reports: list[EvalReport] = []
    if args.accounting:
        reports += accounting_reports(args.pre_seq_len, args.lora_r)
    for path in args.reports:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"report file not found: {p}")
        reports += reports_from_json(p.read_text(encoding="utf-8"))
    if not reports:
        raise UsageError("nothing to report: pass EvalReport JSON files or --accounting")
    losses = {}
    for run in args.runs:
        tl = Path(run) / "train_log.json"
        if not tl.is_file():
            raise RuntimeError(f"{run}: no train_log.json")
        for stage in json.loads(tl.read_text(encoding="utf-8"))["stages"]:
            losses[f"{Path(run).name}/{stage['stage']}"] = stage["epoch_losses"]
    sys.stdout.write(report_table(reports))
    if args.out:
        paths = write_bundle(reports, args.out, losses, figures=not args.no_figures)
        print(f"wrote {', '.join(sorted(p.name for p in paths.values()))} to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> ArgumentParser:
    p = ArgumentParser(prog="peftbench", description="Prefix tuning, LoRA and their staged combination "
                                                     "on a small numpy transformer.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    g = sub.add_parser("gen-data", help="corpus -> QA instruction dataset with train/test split")
    g.add_argument("--corpus", required=True, help="directory of .txt documents")
    g.add_argument("--out", required=True)
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--mock", help="JSON file of canned completions keyed by prompt sha256")
    src.add_argument("--backend-url", help="HTTP completion endpoint (token from $PEFTBENCH_API_TOKEN)")
    g.add_argument("--seed", type=int)
    g.add_argument("--train-fraction", type=float, default=0.8)
    g.add_argument("--train-count", type=int)
    g.add_argument("--by-doc", action="store_true")
    g.add_argument("--concurrency", type=int, default=4)
    g.add_argument("--max-tokens", type=int, default=512)
    g.add_argument("--temperature", type=float, default=0.7)
    g.add_argument("--min-chars", type=int, default=200)
    g.add_argument("--dedup-threshold", type=float, default=0.8)
    g.add_argument("--instruction", default="Answer the following question about urban renewal.")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the configured method")
    add_config_args(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy generation + Bleu/Rouge on a dataset")
    e.add_argument("--run", help="train output directory")
    e.add_argument("--model", help="standalone checkpoint written by merge")
    e.add_argument("--test", "--data", dest="dataset", required=True, help="JSONL records to score")
    e.add_argument("--out", help="EvalReport JSON path (default RUN/eval_report.json)")
    e.add_argument("--label")
    e.add_argument("--predictions", help="also write generated answers as JSONL")
    e.add_argument("--no-merge", action="store_true", help="keep LoRA on the adapter path")
    e.add_argument("--oracle", action="store_true", help="score references against themselves")
    e.add_argument("--timing", action="store_true", help="record runtime_seconds (breaks byte-reproducibility)")
    add_config_args(e)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("merge", help="bake prefix and fold LoRA into a standalone checkpoint")
    m.add_argument("--run", required=True)
    m.add_argument("--out")
    m.set_defaults(func=cmd_merge)

    r = sub.add_parser("report", help="tables, TSV/JSON and figures from EvalReports")
    r.add_argument("reports", nargs="*", help="EvalReport JSON files")
    r.add_argument("--runs", nargs="*", default=[], help="train directories for loss curves")
    r.add_argument("--accounting", action="store_true", help="prepend 6B-scale parameter accounting rows")
    r.add_argument("--pre-seq-len", type=int, default=128)
    r.add_argument("--lora-r", type=int, default=8)
    r.add_argument("--out", help="directory for table.txt, report.tsv, report.json and PNGs")
    r.add_argument("--no-figures", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"peftbench {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        if args.verbose > 1:
            raise
        print(f"peftbench {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
