"""Prefix tuning and LoRA adapters for :class:`~peftbench.model.TransformerModel`."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .model import ModelConfig, PastKeyValues, TransformerModel

DEFAULT_LORA_TARGETS = ("attn.wq", "attn.wv")
ALL_LINEAR_TARGETS = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w1", "ffn.w2")


class AdapterError(ValueError):
    pass


class NothingToTrainError(AdapterError):
    pass


# ---------------------------------------------------------------------------
# prefix
# ---------------------------------------------------------------------------


def prefix_param_formula(pre_seq_len: int, d_prefix: int, mlp_hidden: int, n_layers: int,
                         d_model: int, projection: bool = True) -> int:
    """Train-time trainable count of a prefix adapter.

    With the reparameterization MLP::

        P*d_prefix + (d_prefix*h + h) + (h*L*2*d + L*2*d)

    Without it the table itself holds the key/value rows: ``P*L*2*d``.
    """
    out = n_layers * 2 * d_model
    if not projection:
        return pre_seq_len * out
    return pre_seq_len * d_prefix + (d_prefix * mlp_hidden + mlp_hidden) + (mlp_hidden * out + out)


class PrefixAdapter:
    """Virtual-token prefix producing per-layer key/value blocks.

    With ``projection`` the trainable table ``[P x d_prefix]`` runs through
    ``tanh(table @ w1 + b1) @ w2 + b2``.  :meth:`bake` freezes that output
    into a ``[P x L*2*d]`` table and drops the MLP.
    """

    kind = "prefix"

    def __init__(self, pre_seq_len: int, n_layers: int, d_model: int, n_heads: int,
                 d_prefix: int | None = None, mlp_hidden: int | None = None,
                 projection: bool = True, seed: int = 0, init: bool = True):
        if d_model % n_heads:
            raise AdapterError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.pre_seq_len = pre_seq_len
        self.n_layers = n_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_prefix = d_model if d_prefix is None else d_prefix
        self.mlp_hidden = 4 * self.d_prefix if mlp_hidden is None else mlp_hidden
        self.projection = projection
        self.projection_active = projection
        self.seed = seed
        self.table: Tensor | None = None
        self.w1 = self.b1 = self.w2 = self.b2 = None
        self.baked: Tensor | None = None
        if not init:
            return
        rng = np.random.default_rng(seed)
        out = self.out_width
        if projection:
            self.table = Tensor(rng.normal(0.0, 1.0, (pre_seq_len, self.d_prefix)), requires_grad=True)
            self.w1 = Tensor(rng.normal(0.0, 0.02, (self.d_prefix, self.mlp_hidden)), requires_grad=True)
            self.b1 = Tensor(np.zeros(self.mlp_hidden), requires_grad=True)
            self.w2 = Tensor(rng.normal(0.0, 0.02, (self.mlp_hidden, out)), requires_grad=True)
            self.b2 = Tensor(np.zeros(out), requires_grad=True)
        else:
            self.baked = Tensor(rng.normal(0.0, 0.02, (pre_seq_len, out)), requires_grad=True)

    @classmethod
    def for_model(cls, config: ModelConfig, pre_seq_len: int, **kw) -> "PrefixAdapter":
        return cls(pre_seq_len, config.n_layers, config.d_model, config.n_heads, **kw)

    @property
    def out_width(self) -> int:
        return self.n_layers * 2 * self.d_model

    def config_dict(self) -> dict:
        return {"pre_seq_len": self.pre_seq_len, "n_layers": self.n_layers,
                "d_model": self.d_model, "n_heads": self.n_heads, "d_prefix": self.d_prefix,
                "mlp_hidden": self.mlp_hidden, "projection": self.projection,
                "projection_active": self.projection_active, "seed": self.seed}

    def named_tensors(self) -> dict[str, Tensor]:
        names = ("table", "w1", "b1", "w2", "b2", "baked")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag

    def projected(self) -> Tensor:
        """``[P x L*2*d]`` key/value rows (MLP path or baked table)."""
        if not self.projection_active:
            return self.baked
        hid = ag.tanh(ag.add(ag.matmul(self.table, self.w1), self.b1))
        return ag.add(ag.matmul(hid, self.w2), self.b2)

    def bake(self) -> None:
        """Replace the MLP with its current output. Idempotent."""
        if not self.projection_active:
            return
        with ag.no_grad():
            rows = self.projected().data.copy()
        self.baked = Tensor(rows)
        self.table = self.w1 = self.b1 = self.w2 = self.b2 = None
        self.projection_active = False


def prefix_past(adapter: PrefixAdapter, model_config: ModelConfig) -> PastKeyValues:
    cfg = model_config
    if (adapter.n_layers, adapter.d_model, adapter.n_heads) != (cfg.n_layers, cfg.d_model, cfg.n_heads):
        raise AdapterError(
            f"prefix adapter built for n_layers={adapter.n_layers}, d_model={adapter.d_model}, "
            f"n_heads={adapter.n_heads}; model has {cfg.n_layers}/{cfg.d_model}/{cfg.n_heads}")
    rows = adapter.projected()
    if rows.shape != (adapter.pre_seq_len, adapter.out_width):
        raise AdapterError(f"prefix rows have shape {rows.shape}, expected "
                           f"{(adapter.pre_seq_len, adapter.out_width)}")
    p, hd = adapter.pre_seq_len, cfg.head_dim
    # [P, L, 2, H, hd] -> [L, 2, H, P, hd]
    blocks = ag.transpose(ag.reshape(rows, (p, cfg.n_layers, 2, cfg.n_heads, hd)), (1, 2, 3, 0, 4))
    keys = [blocks[i, 0] for i in range(cfg.n_layers)]
    values = [blocks[i, 1] for i in range(cfg.n_layers)]
    return PastKeyValues(keys, values)


def prefix_param_count(adapter: PrefixAdapter) -> int:
    return prefix_param_formula(adapter.pre_seq_len, adapter.d_prefix, adapter.mlp_hidden,
                                adapter.n_layers, adapter.d_model, adapter.projection)


def prefix_retained_count(adapter: PrefixAdapter) -> int:
    """Inference-time size once baked: ``P*L*2*d``."""
    return adapter.pre_seq_len * adapter.out_width


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------


@dataclass
class LoraEntry:
    A: Tensor  # [r x d_in]
    B: Tensor  # [d_out x r]
    scaling: float
    dropout: float


def lora_param_formula(r: int, shapes) -> int:
    """``sum r*(d_in + d_out)`` over target matrices."""
    return sum(r * (d_in + d_out) for d_in, d_out in shapes)


def expand_targets(targets, n_layers: int) -> list[str]:
    """``"attn.wq"`` -> every layer's ``layer.{i}.attn.wq``; full names pass through."""
    out: list[str] = []
    for t in targets:
        if t.startswith("layer."):
            names = [t]
        else:
            names = [f"layer.{i}.{t}" for i in range(n_layers)]
        out.extend(n for n in names if n not in out)
    return out


class LoraAdapter:
    """Low-rank update ``(alpha/r) * B @ A`` beside each targeted linear layer.

    ``A`` starts gaussian (std 0.02), ``B`` starts at zero.
    """

    kind = "lora"

    def __init__(self, model_config: ModelConfig, r: int = 8, alpha: float = 32.0,
                 dropout: float = 0.05, targets=DEFAULT_LORA_TARGETS, seed: int = 0,
                 init: bool = True):
        from .model import param_shapes

        self.r = r
        self.alpha = float(alpha)
        self.dropout = float(dropout)
        self.seed = seed
        self.targets = expand_targets(targets, model_config.n_layers)
        self.consumed = False
        shapes = param_shapes(model_config)
        unknown = [t for t in self.targets if t not in shapes or len(shapes[t]) != 2]
        if unknown:
            raise AdapterError(f"unknown LoRA target(s): {', '.join(unknown)}")
        self.shapes = {t: shapes[t] for t in self.targets}
        rng = np.random.default_rng(seed)
        self.entries: dict[str, LoraEntry] = {}
        for name in self.targets:
            d_in, d_out = self.shapes[name]
            a = rng.normal(0.0, 0.02, (r, d_in)) if init else np.zeros((r, d_in))
            self.entries[name] = LoraEntry(Tensor(a, requires_grad=True),
                                           Tensor(np.zeros((d_out, r)), requires_grad=True),
                                           self.scaling, self.dropout)

    @property
    def scaling(self) -> float:
        return self.alpha / self.r if self.r > 0 else 0.0

    def config_dict(self) -> dict:
        return {"r": self.r, "alpha": self.alpha, "dropout": self.dropout,
                "targets": list(self.targets), "seed": self.seed}

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for name, e in self.entries.items():
            out[name + ".lora_A"] = e.A
            out[name + ".lora_B"] = e.B
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag

    def delta(self, name: str) -> np.ndarray:
        """Weight update in the model's ``[d_in x d_out]`` storage layout."""
        e = self.entries[name]
        return e.scaling * (e.B.data @ e.A.data).T


def lora_forward(x: Tensor, W: Tensor, entry: LoraEntry, train: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    """``x @ W + scaling * dropout(x) @ A^T @ B^T``.

    ``W`` is stored ``[d_in x d_out]``, so ``x @ W`` is the usual ``x W^T``
    of an ``[d_out x d_in]`` weight.
    """
    base = ag.matmul(x, W)
    if entry.scaling == 0.0 or entry.A.shape[0] == 0:
        return base
    xd = ag.dropout(x, entry.dropout, rng, train)
    low = ag.matmul(ag.matmul(xd, ag.transpose(entry.A, (1, 0))), ag.transpose(entry.B, (1, 0)))
    return ag.add(base, ag.mul(low, entry.scaling))


def lora_param_count(adapter: LoraAdapter) -> int:
    return lora_param_formula(adapter.r, adapter.shapes.values())


def merge_lora(model: TransformerModel, adapter: LoraAdapter, consume: bool = True) -> TransformerModel:
    """A copy of ``model`` with ``W + (alpha/r) B A`` folded into each target.

    With ``consume`` the adapter is marked merged and merging it again raises.
    Pass ``consume=False`` for a throwaway inference copy.
    """
    if adapter.consumed:
        raise AdapterError("LoRA adapter already merged; merging twice would add the update twice")
    unknown = [t for t in adapter.targets if t not in model.params]
    if unknown:
        raise AdapterError(f"unknown LoRA target(s): {', '.join(unknown)}")
    merged = model.copy()
    for name in adapter.targets:
        merged.params[name] = Tensor(model.params[name].data + adapter.delta(name))
    adapter.consumed = adapter.consumed or consume
    return merged


# ---------------------------------------------------------------------------
# stack / freezing
# ---------------------------------------------------------------------------


@dataclass
class AdapterStack:
    prefix: PrefixAdapter | None = None
    lora: LoraAdapter | None = None
    frozen: dict[str, bool] = field(default_factory=dict)
    stages: dict[str, str] = field(default_factory=dict)

    def attach(self, adapter, stage: str | None = None) -> None:
        if adapter.kind == "prefix":
            if self.prefix is not None:
                raise AdapterError("stack already holds a prefix adapter")
            self.prefix = adapter
        elif adapter.kind == "lora":
            if self.lora is not None:
                raise AdapterError("stack already holds a LoRA adapter")
            self.lora = adapter
        else:
            raise AdapterError(f"unknown adapter kind {adapter.kind!r}")
        self.frozen[adapter.kind] = False
        if stage is not None:
            self.stages[adapter.kind] = stage

    def adapters(self):
        return [a for a in (self.prefix, self.lora) if a is not None]

    def freeze(self, kind: str) -> None:
        self.frozen[kind] = True
        getattr(self, kind).set_trainable(False)

    def trainable_parameters(self) -> list[Tensor]:
        return [t for a in self.adapters() if not self.frozen.get(a.kind) for t in a.parameters()]

    def trainable_count(self) -> int:
        """Train-time trainable parameters across every attached adapter."""
        total = 0
        if self.prefix is not None:
            total += prefix_param_count(self.prefix)
        if self.lora is not None:
            total += lora_param_count(self.lora)
        return total


def freeze_base(model: TransformerModel, stack: AdapterStack | None = None) -> None:
    for t in model.parameters():
        t.requires_grad = False
    if stack is None:
        return
    for a in stack.adapters():
        a.set_trainable(not stack.frozen.get(a.kind, False))


def require_trainable(stack: AdapterStack | None) -> list[Tensor]:
    params = stack.trainable_parameters() if stack is not None else []
    if not params:
        raise NothingToTrainError("nothing to train: no unfrozen adapter tensors")
    return params
