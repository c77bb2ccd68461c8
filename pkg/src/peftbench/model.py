"""Toy causal decoder with per-layer key/value injection, plus a byte tokenizer.

Parameter layout (all stored ``[d_in x d_out]`` so a linear layer is ``x @ W``)::

    tok_emb                  [vocab x d]        (also the tied output projection)
    pos_emb                  [max_seq_len x d]
    layer.{i}.ln1.gain/bias  [d]
    layer.{i}.attn.wq/wk/wv/wo  [d x d]
    layer.{i}.ln2.gain/bias  [d]
    layer.{i}.ffn.w1         [d x d_ff]
    layer.{i}.ffn.w2         [d_ff x d]
    ln_f.gain/bias           [d]

so the total parameter count is::

    vocab*d + max_seq_len*d + n_layers*(4*d*d + 2*d*d_ff + 4*d) + 2*d
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import autograd as ag
from .autograd import Tensor

if TYPE_CHECKING:
    from .adapters import AdapterStack, LoraAdapter

PAD, BOS, EOS, SEP = 256, 257, 258, 259
SPECIAL_GLYPHS = {PAD: "<pad>", BOS: "<bos>", EOS: "<eos>", SEP: "<sep>"}
N_SPECIAL = 4
INIT_STD = 0.02
EMB_STD = 0.2
INIT_SCHEMES = ("scaled", "normal")


class SequenceTooLongError(ValueError):
    pass


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------


def encode(text: str) -> list[int]:
    """UTF-8 bytes as ids 0..255. Lone surrogates from undecodable bytes round-trip."""
    return list(text.encode("utf-8", errors="surrogateescape"))


def decode(ids) -> str:
    """Inverse of :func:`encode`; special ids render as ``<pad>``, ``<bos>`` etc."""
    parts: list[str] = []
    buf = bytearray()
    for i in ids:
        i = int(i)
        if i < 256:
            buf.append(i)
            continue
        if buf:
            parts.append(buf.decode("utf-8", errors="surrogateescape"))
            buf = bytearray()
        parts.append(SPECIAL_GLYPHS.get(i, f"<{i}>"))
    if buf:
        parts.append(buf.decode("utf-8", errors="surrogateescape"))
    return "".join(parts)


def encode_bytes(raw: bytes) -> list[int]:
    return list(raw)


def decode_bytes(ids) -> bytes:
    return bytes(int(i) for i in ids if int(i) < 256)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    vocab_size: int = 260
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 256
    seed: int = 0
    # "scaled": matrices N(0, 1/d_in), embeddings N(0, EMB_STD**2); "normal": everything N(0, 0.02**2)
    init_scheme: str = "scaled"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.vocab_size < 256 + N_SPECIAL:
            raise ValueError(f"vocab_size must be >= {256 + N_SPECIAL}, got {self.vocab_size}")
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(f"init_scheme must be one of {INIT_SCHEMES}, got {self.init_scheme!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_seq_len, d),
    }
    for i in range(cfg.n_layers):
        p = f"layer.{i}."
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + "attn." + w] = (d, d)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "ffn.w1"] = (d, cfg.d_ff)
        shapes[p + "ffn.w2"] = (cfg.d_ff, d)
    shapes["ln_f.gain"] = (d,)
    shapes["ln_f.bias"] = (d,)
    return shapes


def closed_form_param_count(cfg: ModelConfig) -> int:
    d, ff = cfg.d_model, cfg.d_ff
    return (cfg.vocab_size * d + cfg.max_seq_len * d
            + cfg.n_layers * (4 * d * d + 2 * d * ff + 4 * d) + 2 * d)


@dataclass
class PastKeyValues:
    """Per-layer prefix key/value blocks, each ``[n_heads x prefix_len x head_dim]``."""

    keys: list[Tensor]
    values: list[Tensor]

    def __post_init__(self):
        if len(self.keys) != len(self.values):
            raise ValueError("keys and values must cover the same layers")
        lens = {k.shape[1] for k in self.keys} | {v.shape[1] for v in self.values}
        if len(lens) > 1:
            raise ValueError(f"inconsistent prefix lengths across layers: {sorted(lens)}")

    @property
    def prefix_len(self) -> int:
        return self.keys[0].shape[1] if self.keys else 0


@dataclass
class TransformerModel:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig) -> "TransformerModel":
        rng = np.random.default_rng(config.seed)
        params = {}
        for name, shape in param_shapes(config).items():
            if name.endswith(".gain"):
                data = np.ones(shape)
            elif name.endswith(".bias"):
                data = np.zeros(shape)
            elif config.init_scheme == "normal":
                data = rng.normal(0.0, INIT_STD, size=shape)
            elif name.endswith("_emb"):
                data = rng.normal(0.0, EMB_STD, size=shape)
            else:
                data = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
            params[name] = Tensor(data)
        return cls(config, params)

    def copy(self) -> "TransformerModel":
        return TransformerModel(self.config, {k: Tensor(v.data.copy()) for k, v in self.params.items()})

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def __call__(self, tokens, **kw) -> Tensor:
        return forward(self, tokens, **kw)


def count_params(model: TransformerModel) -> int:
    return sum(t.size for t in model.params.values())


def _linear(x: Tensor, model: TransformerModel, name: str, lora, train, rng) -> Tensor:
    w = model.params[name]
    if lora is not None and name in lora.entries:
        from .adapters import lora_forward
        return lora_forward(x, w, lora.entries[name], train=train, rng=rng)
    return ag.matmul(x, w)


def forward(model: TransformerModel, tokens, past: PastKeyValues | None = None,
            lora: "LoraAdapter | None" = None, train: bool = False,
            rng: np.random.Generator | None = None, mask_prefix: bool = False) -> Tensor:
    """Logits for ``tokens`` (``[t]`` -> ``[t x V]``, ``[B x t]`` -> ``[B x t x V]``).

    Position ``i`` attends to every prefix slot plus token positions ``<= i``.
    ``mask_prefix`` hides the prefix columns from every attention softmax.
    """
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None, :]
    bsz, t = tokens.shape
    plen = past.prefix_len if past is not None else 0
    if t + plen > cfg.max_seq_len:
        raise SequenceTooLongError(
            f"sequence of {t} tokens + {plen} prefix slots exceeds max_seq_len={cfg.max_seq_len}")
    if past is not None and len(past.keys) != cfg.n_layers:
        raise ValueError(f"past covers {len(past.keys)} layers, model has {cfg.n_layers}")
    h_, hd = cfg.n_heads, cfg.head_dim
    p = model.params

    x = ag.add(ag.embedding(p["tok_emb"], tokens), p["pos_emb"][:t])
    causal = np.tril(np.ones((t, t), dtype=bool))
    if plen:
        mask = np.concatenate([np.full((t, plen), not mask_prefix), causal], axis=1)
    else:
        mask = causal
    scale = 1.0 / math.sqrt(hd)

    for i in range(cfg.n_layers):
        pre = f"layer.{i}."
        a = ag.layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
        q = _linear(a, model, pre + "attn.wq", lora, train, rng)
        k = _linear(a, model, pre + "attn.wk", lora, train, rng)
        v = _linear(a, model, pre + "attn.wv", lora, train, rng)
        q = ag.transpose(ag.reshape(q, (bsz, t, h_, hd)), (0, 2, 1, 3))
        k = ag.transpose(ag.reshape(k, (bsz, t, h_, hd)), (0, 2, 1, 3))
        v = ag.transpose(ag.reshape(v, (bsz, t, h_, hd)), (0, 2, 1, 3))
        if plen:
            pk = ag.broadcast_to(past.keys[i], (bsz, h_, plen, hd))
            pv = ag.broadcast_to(past.values[i], (bsz, h_, plen, hd))
            k = ag.concat([pk, k], axis=2)
            v = ag.concat([pv, v], axis=2)
        scores = ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), scale)
        att = ag.softmax(scores, axis=-1, mask=mask)
        ctx = ag.matmul(att, v)
        ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (bsz, t, cfg.d_model))
        x = ag.add(x, _linear(ctx, model, pre + "attn.wo", lora, train, rng))

        f = ag.layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
        f = ag.gelu(_linear(f, model, pre + "ffn.w1", lora, train, rng))
        x = ag.add(x, _linear(f, model, pre + "ffn.w2", lora, train, rng))

    x = ag.layer_norm(x, p["ln_f.gain"], p["ln_f.bias"])
    logits = ag.matmul(x, ag.transpose(p["tok_emb"], (1, 0)))
    if squeeze:
        logits = ag.reshape(logits, (t, cfg.vocab_size))
    return logits


def generate(model: TransformerModel, prompt, adapters: "AdapterStack | None" = None,
             max_new_tokens: int = 64) -> list[int]:
    """Greedy decoding. Returns prompt + generated ids, ending at EOS if produced."""
    from .adapters import prefix_past

    ids = [int(i) for i in prompt]
    if not ids:
        raise ValueError("prompt must be nonempty")
    past = None
    lora = None
    if adapters is not None:
        if adapters.prefix is not None:
            with ag.no_grad():
                past = prefix_past(adapters.prefix, model.config)
        lora = adapters.lora
    budget = model.config.max_seq_len - (past.prefix_len if past else 0)
    with ag.no_grad():
        for _ in range(max_new_tokens):
            if len(ids) >= budget:
                break
            logits = forward(model, ids, past=past, lora=lora)
            nxt = int(np.argmax(logits.data[-1]))
            ids.append(nxt)
            if nxt == EOS:
                break
    return ids
