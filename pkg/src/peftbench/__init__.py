"""Parameter-efficient fine-tuning toolkit on a small numpy transformer."""

from .adapters import AdapterStack, LoraAdapter, PrefixAdapter, merge_lora
from .autograd import Tensor, backward, grad_check
from .config import RunConfig, load_config
from .corpus import InstructionRecord, read_jsonl, write_jsonl
from .evaluation import EvalReport, evaluate, evaluate_run
from .metrics import corpus_eval
from .model import ModelConfig, TransformerModel, forward, generate
from .training import joint_finetune, train

__version__ = "0.1.0"

__all__ = [
    "AdapterStack", "EvalReport", "InstructionRecord", "LoraAdapter", "ModelConfig", "PrefixAdapter",
    "RunConfig", "Tensor", "TransformerModel", "backward", "corpus_eval", "evaluate", "evaluate_run",
    "forward", "generate", "grad_check", "joint_finetune", "load_config", "merge_lora", "read_jsonl",
    "train", "write_jsonl",
]
