"""Adapter training: batching, the optimizer loop and the staged joint procedure."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt
from .adapters import (AdapterStack, LoraAdapter, PrefixAdapter, freeze_base, lora_param_count,
                       prefix_param_count, prefix_past, require_trainable)
from .config import LoraConfig, PrefixConfig, RunConfig, TrainConfig, config_hash, save_config
from .corpus import InstructionRecord
from .model import BOS, EOS, PAD, SEP, TransformerModel, encode, forward

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, stage: str, epoch: int, step: int):
        super().__init__(f"[{stage}] loss became NaN at epoch {epoch}, step {step}")
        self.stage, self.epoch, self.step = stage, epoch, step


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def source_ids(rec: InstructionRecord, max_source_length: int) -> list[int]:
    """``BOS instruction SEP question SEP``; instruction+question bytes capped at ``max_source_length``."""
    ins = encode(rec.instruction)[:max_source_length]
    q = encode(rec.input)[:max(0, max_source_length - len(ins))]
    return [BOS] + ins + [SEP] + q + [SEP]


def target_ids(rec: InstructionRecord, max_target_length: int) -> list[int]:
    return encode(rec.output)[:max_target_length] + [EOS]


@dataclass
class TrainBatch:
    token_ids: np.ndarray  # [B x T], PAD-filled
    loss_mask: np.ndarray  # [B x T], true on answer tokens and EOS
    lengths: np.ndarray

    def shifted(self):
        """Inputs, next-token targets and target mask for teacher forcing."""
        return self.token_ids[:, :-1], self.token_ids[:, 1:], self.loss_mask[:, 1:]


def make_batch(records, max_source_length: int, max_target_length: int) -> TrainBatch:
    seqs = []
    for r in records:
        src, tgt = source_ids(r, max_source_length), target_ids(r, max_target_length)
        seqs.append((src, tgt))
    width = max(len(s) + len(t) for s, t in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    lengths = np.zeros(len(seqs), dtype=np.int64)
    for i, (s, t) in enumerate(seqs):
        n = len(s) + len(t)
        ids[i, :n] = s + t
        mask[i, len(s):n] = True
        lengths[i] = n
    return TrainBatch(ids, mask, lengths)


def batch_loss(model: TransformerModel, stack: AdapterStack, batch: TrainBatch, train: bool,
               rng: np.random.Generator | None) -> ag.Tensor:
    x, y, m = batch.shifted()
    past = prefix_past(stack.prefix, model.config) if stack.prefix is not None else None
    logits = forward(model, x, past=past, lora=stack.lora, train=train, rng=rng)
    return ag.cross_entropy(ag.reshape(logits, (-1, model.config.vocab_size)), y.reshape(-1), m.reshape(-1))


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


@dataclass
class StageLog:
    stage: str
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"stage": self.stage, "step_losses": self.step_losses, "epoch_losses": self.epoch_losses}


def train_stage(model: TransformerModel, stack: AdapterStack, records, *, learning_rate: float,
                epochs: int, batch_size: int, seed: int, max_source_length: int,
                max_target_length: int, stage: str) -> StageLog:
    """Adam over the stack's unfrozen tensors; the base stays frozen."""
    if not records:
        raise ValueError("dataset is empty")
    freeze_base(model, stack)
    params = require_trainable(stack)
    state = ag.AdamState(learning_rate)
    rng = np.random.default_rng(seed)
    out = StageLog(stage)
    n = len(records)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        steps = 0
        for start in range(0, n, batch_size):
            batch = make_batch([records[i] for i in order[start:start + batch_size]],
                               max_source_length, max_target_length)
            for p in params:
                p.grad = None
            loss = batch_loss(model, stack, batch, train=True, rng=rng)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(stage, epoch, steps)
            ag.backward(loss, params)
            ag.adam_step(params, [p.grad for p in params], state)
            out.step_losses.append(value)
            total += value
            steps += 1
        out.epoch_losses.append(total / steps)
        log.info("[%s] epoch %d mean loss %.4f", stage, epoch, out.epoch_losses[-1])
    for p in params:
        p.grad = None
    return out


def _stage_hparams(block, train: TrainConfig) -> tuple[float, int]:
    lr = block.learning_rate if block.learning_rate is not None else train.learning_rate
    ep = block.epochs if block.epochs is not None else train.epochs
    return lr, ep


def build_prefix(model: TransformerModel, pcfg: PrefixConfig, seed: int) -> PrefixAdapter:
    return PrefixAdapter.for_model(model.config, pcfg.pre_seq_len, d_prefix=pcfg.d_prefix,
                                   mlp_hidden=pcfg.mlp_hidden, projection=pcfg.projection, seed=seed)


def build_lora(model: TransformerModel, lcfg: LoraConfig, seed: int) -> LoraAdapter:
    return LoraAdapter(model.config, r=lcfg.r, alpha=lcfg.alpha, dropout=lcfg.dropout,
                       targets=lcfg.targets, seed=seed)


def _loop_kwargs(train: TrainConfig) -> dict:
    return {"batch_size": train.batch_size, "max_source_length": train.max_source_length,
            "max_target_length": train.max_target_length}


def prefix_stage(model, records, pcfg: PrefixConfig, train: TrainConfig, stack: AdapterStack | None = None):
    stack = stack or AdapterStack()
    stack.attach(build_prefix(model, pcfg, train.seed + 1), stage="prefix-stage")
    lr, ep = _stage_hparams(pcfg, train)
    slog = train_stage(model, stack, records, learning_rate=lr, epochs=ep, seed=train.seed + 11,
                       stage="prefix", **_loop_kwargs(train))
    # keep only the projected prefix rows, frozen from here on
    stack.prefix.bake()
    stack.freeze("prefix")
    return stack, slog


def lora_stage(model, records, lcfg: LoraConfig, train: TrainConfig, stack: AdapterStack | None = None):
    stack = stack or AdapterStack()
    stack.attach(build_lora(model, lcfg, train.seed + 2), stage="lora-stage")
    lr, ep = _stage_hparams(lcfg, train)
    slog = train_stage(model, stack, records, learning_rate=lr, epochs=ep, seed=train.seed + 12,
                       stage="lora", **_loop_kwargs(train))
    return stack, slog


def joint_finetune(model: TransformerModel, dataset, prefix_cfg: PrefixConfig, lora_cfg: LoraConfig,
                   train_cfg: TrainConfig, out_dir: str | Path | None = None):
    """Prefix first, then LoRA on the prefix-augmented model.

    Stage 1 trains the prefix (base frozen), bakes it and freezes it.  Stage 2
    trains LoRA with base and prefix frozen.  LoRA stays unmerged here; it is
    folded into the weights only for inference.  Returns ``(stack, logs,
    checkpoint_paths)``.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    stack, log1 = prefix_stage(model, dataset, prefix_cfg, train_cfg)
    paths = {}
    if out_dir is not None:
        paths["prefix"] = Path(out_dir) / "prefix.ckpt"
        ckpt.save_adapter(stack.prefix, paths["prefix"],
                          {"trainable_params": prefix_param_count(stack.prefix)})
    stack, log2 = lora_stage(model, dataset, lora_cfg, train_cfg, stack)
    if out_dir is not None:
        paths["lora"] = Path(out_dir) / "lora.ckpt"
        ckpt.save_adapter(stack.lora, paths["lora"],
                          {"model": model.config.to_dict(),
                           "trainable_params": lora_param_count(stack.lora)})
    return stack, [log1, log2], paths


# ---------------------------------------------------------------------------
# run entry point
# ---------------------------------------------------------------------------


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def train(config: RunConfig, records: list[InstructionRecord] | None = None) -> Path:
    """Train per ``config`` and write everything into ``config.output_dir``.

    Writes ``run_config.json``, ``base.ckpt``, one checkpoint per adapter
    stage, ``stack.json`` and ``train_log.json``.
    """
    from .corpus import read_jsonl

    config.validate()
    if records is None:
        if not config.data.dataset:
            raise ValueError("no dataset given")
        records = read_jsonl(config.data.dataset)
    if not records:
        raise ValueError("dataset is empty")
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "run_config.json")
    model = TransformerModel.init(config.model)
    ckpt.save_model(model, out / "base.ckpt")
    t = config.train
    logs: list[StageLog] = []
    files: dict[str, str] = {}
    stack = AdapterStack()
    if config.method == "prefix":
        stack, slog = prefix_stage(model, records, config.prefix, t)
        logs.append(slog)
        ckpt.save_adapter(stack.prefix, out / "prefix.ckpt",
                          {"trainable_params": prefix_param_count(stack.prefix)})
    elif config.method == "lora":
        stack, slog = lora_stage(model, records, config.lora, t)
        logs.append(slog)
        ckpt.save_adapter(stack.lora, out / "lora.ckpt",
                          {"model": model.config.to_dict(),
                           "trainable_params": lora_param_count(stack.lora)})
    elif config.method == "joint":
        stack, logs, _ = joint_finetune(model, records, config.prefix, config.lora, t, out)
    for kind in ("prefix", "lora"):
        if getattr(stack, kind) is not None:
            files[kind] = f"{kind}.ckpt"
    manifest = {
        "method": config.method,
        "config_hash": config_hash(config),
        "base": "base.ckpt",
        "adapters": files,
        "stages": stack.stages,
        "trainable_params": {
            "prefix": prefix_param_count(stack.prefix) if stack.prefix else 0,
            "lora": lora_param_count(stack.lora) if stack.lora else 0,
            "total": stack.trainable_count(),
        },
    }
    write_json(out / "stack.json", manifest)
    write_json(out / "train_log.json", {"stages": [s.to_dict() for s in logs]})
    return out
