"""Greedy-generation evaluation and parameter accounting for trained runs."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from . import checkpoint as ckpt
from .adapters import AdapterStack, merge_lora
from .config import RunConfig, config_hash
from .corpus import InstructionRecord
from .metrics import MetricScore, corpus_eval
from .model import EOS, TransformerModel, count_params, generate
from .training import source_ids


class EvalError(RuntimeError):
    pass


@dataclass
class EvalReport:
    model_label: str
    total_params: int
    trainable_params: int
    trainable_ratio: float
    bleu4: float | None  # None on parameter-only rows
    rouge1: float | None
    rouge2: float | None
    rougeL: float | None
    runtime_seconds: float | None
    config_hash: str

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        names = {f.name for f in fields(cls)}
        missing = names - set(d)
        if missing:
            raise ValueError(f"EvalReport JSON lacks {', '.join(sorted(missing))}")
        return cls(**{k: d[k] for k in names})

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def make_report(label: str, base_params: int, trainable: int, score: MetricScore, rouge_field: str = "f1",
                runtime_seconds: float | None = None, cfg_hash: str = "") -> EvalReport:
    # total counts the adapter parameters on top of the frozen base
    total = base_params + trainable
    return EvalReport(model_label=label, total_params=total, trainable_params=trainable,
                      trainable_ratio=trainable / total if total else 0.0,
                      runtime_seconds=runtime_seconds, config_hash=cfg_hash,
                      **score.headline(rouge_field))


@dataclass
class LoadedRun:
    config: RunConfig
    model: TransformerModel
    stack: AdapterStack
    manifest: dict


def load_run(run_dir: str | Path, config: RunConfig | None = None) -> LoadedRun:
    """Rebuild base model and adapters from a ``train`` output directory."""
    run_dir = Path(run_dir)
    man_path = run_dir / "stack.json"
    if not man_path.is_file():
        raise EvalError(f"{run_dir} has no stack.json; is it a train output directory?")
    manifest = json.loads(man_path.read_text(encoding="utf-8"))
    if config is None:
        from .config import load_config
        config = load_config(run_dir / "run_config.json")
    try:
        model, _, _ = ckpt.load_model(run_dir / manifest["base"], expect_config=config.model)
    except ckpt.CheckpointShapeError as exc:
        raise EvalError(f"base checkpoint does not match the config: {exc}") from exc
    stack = AdapterStack()
    for kind in ("prefix", "lora"):
        if kind in manifest["adapters"]:
            ad = ckpt.load_adapter(run_dir / manifest["adapters"][kind], model.config)
            stack.attach(ad, manifest["stages"].get(kind))
            stack.freeze(kind)
    if config.uses_prefix() != (stack.prefix is not None) or config.uses_lora() != (stack.lora is not None):
        raise EvalError(f"config method {config.method!r} does not match checkpoints "
                        f"({', '.join(manifest['adapters']) or 'none'})")
    return LoadedRun(config, model, stack, manifest)


def answer_text(ids: list[int]) -> str:
    """Generated ids up to EOS, special tokens dropped.

    Invalid UTF-8 from a half-trained model becomes U+FFFD so the text is
    always writable.
    """
    out = []
    for t in ids:
        if t == EOS:
            break
        if t < 256:
            out.append(t)
    return bytes(out).decode("utf-8", errors="replace")


def predict(model: TransformerModel, stack: AdapterStack, records: list[InstructionRecord],
            max_source_length: int, max_new_tokens: int, merge: bool = True) -> list[str]:
    """Greedy answers. With ``merge`` LoRA is folded into a copy of the weights first."""
    if stack.lora is not None and merge:
        model = merge_lora(model, stack.lora, consume=False)
        stack = AdapterStack(prefix=stack.prefix)
    preds = []
    for rec in records:
        src = source_ids(rec, max_source_length)
        ids = generate(model, src, adapters=stack, max_new_tokens=max_new_tokens)
        preds.append(answer_text(ids[len(src):]))
    return preds


def evaluate(config: RunConfig, model: TransformerModel, stack: AdapterStack,
             records: list[InstructionRecord], label: str | None = None, merge: bool = True,
             oracle: bool = False, timing: bool = False,
             accounting: tuple[int, int] | None = None) -> tuple[EvalReport, list[str]]:
    """Score greedy generations against gold answers.

    ``oracle`` skips generation and uses the references as candidates, which
    checks the scoring path in isolation.  ``runtime_seconds`` is filled only
    with ``timing`` so that reports stay byte-reproducible by default.
    ``accounting`` overrides ``(base_params, trainable_params)``, for merged
    checkpoints whose adapters no longer exist as separate tensors.
    """
    if not records:
        raise EvalError("test set is empty")
    t0 = time.perf_counter()
    refs = [r.output for r in records]
    if oracle:
        preds = list(refs)
    else:
        preds = predict(model, stack, records, config.train.max_source_length,
                        config.train.max_target_length, merge=merge)
    score = corpus_eval(list(zip(preds, refs)), config.tokenize_mode)
    elapsed = time.perf_counter() - t0
    base, trainable = accounting or (count_params(model), stack.trainable_count())
    report = make_report(label or config.method, base, trainable, score, config.rouge_field,
                         round(elapsed, 3) if timing else None, config_hash(config))
    return report, preds


def evaluate_run(run_dir: str | Path, records: list[InstructionRecord], **kw) -> tuple[EvalReport, list[str]]:
    run = load_run(run_dir)
    return evaluate(run.config, run.model, run.stack, records, **kw)
