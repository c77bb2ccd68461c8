"""Self-instruct QA dataset construction from plain-text documents."""

from __future__ import annotations

import json
import logging
import re
import string
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .backends import BackendError, BackendUnreachable, CompletionBackend

log = logging.getLogger(__name__)

DEFAULT_INSTRUCTION = "Answer the following question about urban renewal."
DEFAULT_MIN_CHARS = 200
NEAR_DUP_THRESHOLD = 0.8


class PipelineError(RuntimeError):
    pass


@dataclass
class CorpusDocument:
    doc_id: str
    paragraphs: list[str]
    source_name: str


@dataclass
class QAPair:
    question: str
    answer: str
    doc_id: str = ""
    raw_span: tuple[int, int] = (0, 0)
    interrogative: bool = True


@dataclass
class InstructionRecord:
    instruction: str
    input: str
    output: str
    doc_id: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> "InstructionRecord":
        return cls(d["instruction"], d["input"], d["output"], d.get("doc_id", ""))


# ---------------------------------------------------------------------------
# cleaning
# ---------------------------------------------------------------------------

_NUMBERED_HEADING = re.compile(r"^\s*\d+(\.\d+)*\.?\s+\S")
_CAPTION = re.compile(r"^\s*(Figure|Fig\.|Table)\s*\d")
_WS = re.compile(r"\s+")
_SMALL_WORDS = {"a", "an", "and", "as", "at", "by", "for", "in", "of", "on", "or", "the", "to", "with"}


def _is_heading(line: str) -> bool:
    s = line.strip()
    if not s:
        return False
    words = s.split()
    if _CAPTION.match(s):
        return True
    # numbered headings are short; a long line starting with a year is prose
    if _NUMBERED_HEADING.match(s) and len(words) <= 10:
        return True
    if len(words) <= 4 and not s.endswith((".", "?", "!", ",", ";", ":")):
        alpha = [w for w in words if w[0].isalpha()]
        if alpha and all(w[0].isupper() or w.lower() in _SMALL_WORDS for w in alpha):
            return True
    return False


def _printable(text: str) -> str:
    return "".join(c if (c.isprintable() or c.isspace()) and unicodedata.category(c) != "Co" else " "
                   for c in text)


def clean_text(raw: str, min_chars: int = DEFAULT_MIN_CHARS) -> list[str]:
    """Split on blank lines, drop headings and captions, normalize whitespace.

    Dropped lines: numbered headings (``3.2 Prefix Tuning``), title-case lines
    of at most four words, and lines starting with Figure/Fig./Table.
    Paragraphs shorter than ``min_chars`` after cleaning are discarded.
    """
    out: list[str] = []
    for block in re.split(r"\n\s*\n", raw.replace("\r\n", "\n")):
        lines = [ln for ln in block.split("\n") if ln.strip() and not _is_heading(ln)]
        if not lines:
            continue
        para = _WS.sub(" ", _printable(" ".join(lines))).strip()
        if len(para) >= min_chars:
            out.append(para)
    return out


def load_corpus(directory: str | Path, min_chars: int = DEFAULT_MIN_CHARS) -> list[CorpusDocument]:
    """Every ``*.txt`` under ``directory`` (sorted by name) as one document."""
    docs = []
    for path in sorted(Path(directory).glob("*.txt")):
        paras = clean_text(path.read_text(encoding="utf-8"), min_chars)
        docs.append(CorpusDocument(path.stem, paras, path.name))
    return docs


# ---------------------------------------------------------------------------
# prompt
# ---------------------------------------------------------------------------


def prompt_template() -> str:
    return resources.files("peftbench.resources").joinpath("qa_prompt.txt").read_text(encoding="utf-8")


def escape_text(text: str) -> str:
    """Double every backtick so the text cannot close the ``...`` fence."""
    return text.replace("`", "``")


def unescape_text(text: str) -> str:
    return text.replace("``", "`")


def build_prompt(text: str) -> str:
    if not text:
        raise ValueError("prompt text must be nonempty")
    return prompt_template().replace("{text}", escape_text(text), 1)


def extract_prompt_text(prompt: str) -> str:
    """Recover the original text from a prompt made by :func:`build_prompt`."""
    head, _, tail = prompt_template().partition("{text}")
    if not (prompt.startswith(head) and prompt.endswith(tail)):
        raise ValueError("prompt does not match the QA template")
    return unescape_text(prompt[len(head):len(prompt) - len(tail)])


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


@dataclass
class GenerationParams:
    max_tokens: int = 512
    temperature: float = 0.7
    concurrency: int = 4


@dataclass
class GenerationResult:
    completions: list[tuple[int, str, str]] = field(default_factory=list)  # (index, paragraph, text)
    failures: list[dict] = field(default_factory=list)


def generate_qa(backend: CompletionBackend, doc: CorpusDocument,
                params: GenerationParams | None = None) -> GenerationResult:
    """One completion per paragraph, in paragraph order.

    Per-paragraph :class:`BackendError` is recorded and skipped; an
    unreachable backend aborts with the paragraph index.
    """
    params = params or GenerationParams()

    def one(i: int):
        prompt = build_prompt(doc.paragraphs[i])
        try:
            return i, backend.complete(prompt, max_tokens=params.max_tokens,
                                       temperature=params.temperature), None
        except BackendUnreachable as exc:
            raise PipelineError(f"{doc.doc_id}: backend unreachable at paragraph {i}: {exc}") from exc
        except BackendError as exc:
            return i, None, str(exc)

    idx = range(len(doc.paragraphs))
    if params.concurrency > 1 and len(doc.paragraphs) > 1:
        with ThreadPoolExecutor(max_workers=params.concurrency) as pool:
            results = list(pool.map(one, idx))
    else:
        results = [one(i) for i in idx]
    res = GenerationResult()
    for i, text, err in results:
        if err is None:
            res.completions.append((i, doc.paragraphs[i], text))
        else:
            res.failures.append({"doc_id": doc.doc_id, "paragraph": i, "error": err})
    return res


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

MARKER_RE = re.compile(r"\b(question|answer)\s*(?:\d+\s*)?[:：]", re.IGNORECASE)


def _strip_field(text: str) -> str:
    s = text.strip()
    if s.startswith("[") and s.endswith("]"):
        s = s[1:-1].strip()
    return s


def parse_qa(completion: str, doc_id: str = "", warnings: list[str] | None = None) -> list[QAPair]:
    """Pull ``Question:`` / ``Answer:`` pairs out of a completion.

    Markers are case-insensitive and may carry a number (``Question 2:``);
    brackets around a field are optional.  A question binds to the next
    answer; a question followed by another question, an answer with no open
    question, and a trailing question are dropped with a warning.
    """
    warnings = warnings if warnings is not None else []
    marks = list(MARKER_RE.finditer(completion or ""))
    if not marks:
        warnings.append("no Question/Answer markers found")
        return []
    pairs: list[QAPair] = []
    pending: tuple[str, int] | None = None
    for j, m in enumerate(marks):
        end = marks[j + 1].start() if j + 1 < len(marks) else len(completion)
        body = _strip_field(completion[m.end():end])
        if m.group(1).lower() == "question":
            if pending is not None:
                warnings.append(f"question without answer dropped: {pending[0]!r}")
            pending = (body, m.start())
            continue
        if pending is None:
            warnings.append(f"answer without question dropped: {body!r}")
            continue
        q, start = pending
        pending = None
        if not q or not body:
            warnings.append(f"empty field in pair at offset {start}")
            continue
        pairs.append(QAPair(q, body, doc_id, (start, end), q.endswith("?")))
    if pending is not None:
        warnings.append(f"trailing question without answer dropped: {pending[0]!r}")
    return pairs


# ---------------------------------------------------------------------------
# dedup / records / split
# ---------------------------------------------------------------------------

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def normalize(text: str) -> str:
    return _WS.sub(" ", text.lower().translate(_PUNCT_TABLE)).strip()


def word_trigrams(text: str) -> set[tuple[str, ...]]:
    toks = normalize(text).split()
    return {tuple(toks[i:i + 3]) for i in range(len(toks) - 2)}


def jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


def is_erroneous(pair: QAPair) -> bool:
    a = normalize(pair.answer)
    return not a or a == normalize(pair.question) or len(a.split()) < 3


def dedup(pairs: list[QAPair], threshold: float = NEAR_DUP_THRESHOLD) -> list[QAPair]:
    """Drop erroneous pairs, exact duplicates and near-duplicate questions.

    First occurrence wins.  Near-duplicate means question word-trigram
    Jaccard >= ``threshold`` against any already kept question.
    """
    kept: list[QAPair] = []
    seen: set[tuple[str, str]] = set()
    grams: list[set] = []
    for p in pairs:
        if is_erroneous(p):
            continue
        key = (normalize(p.question), normalize(p.answer))
        if key in seen:
            continue
        g = word_trigrams(p.question)
        if g and any(jaccard(g, h) >= threshold for h in grams):
            continue
        seen.add(key)
        grams.append(g)
        kept.append(p)
    return kept


def to_instruction(pairs: list[QAPair], instruction_text: str = DEFAULT_INSTRUCTION) -> list[InstructionRecord]:
    if not instruction_text:
        raise ValueError("instruction text must be nonempty")
    return [InstructionRecord(instruction_text, p.question, p.answer, p.doc_id) for p in pairs]


def write_jsonl(records: list[InstructionRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_jsonl(path: str | Path) -> list[InstructionRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(InstructionRecord.from_dict(json.loads(line)))
    return out


@dataclass
class SplitManifest:
    seed: int
    train: list[int]
    test: list[int]
    by_doc: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


def split_dataset(records: list, train_fraction: float = 0.8, seed: int = 0,
                  train_count: int | None = None, by_doc: bool = False):
    """Seeded shuffle then split. Returns ``(train, test, manifest)``.

    ``train_count`` overrides the fraction with an exact size.  ``by_doc``
    keeps every document's records on one side (the train side takes whole
    documents until it reaches the target size).
    """
    n = len(records)
    if n < 2:
        raise ValueError(f"need at least 2 records to split, got {n}")
    if train_count is None:
        if not 0.0 < train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
        train_count = int(round(n * train_fraction))
    if not 0 <= train_count <= n:
        raise ValueError(f"train_count {train_count} out of range for {n} records")
    rng = np.random.default_rng(seed)
    if by_doc:
        docs: dict[str, list[int]] = {}
        for i, r in enumerate(records):
            docs.setdefault(getattr(r, "doc_id", ""), []).append(i)
        names = sorted(docs)
        train_idx: list[int] = []
        test_idx: list[int] = []
        for k in rng.permutation(len(names)):
            (train_idx if len(train_idx) < train_count else test_idx).extend(docs[names[k]])
    else:
        perm = [int(i) for i in rng.permutation(n)]
        train_idx, test_idx = perm[:train_count], perm[train_count:]
    manifest = SplitManifest(seed, train_idx, test_idx, by_doc)
    return [records[i] for i in train_idx], [records[i] for i in test_idx], manifest


# ---------------------------------------------------------------------------
# end to end
# ---------------------------------------------------------------------------


@dataclass
class PipelineOutput:
    records: list[InstructionRecord]
    n_completions: int
    n_parsed: int
    warnings: list[str]
    failures: list[dict]

    def summary(self) -> dict:
        return {"completions": self.n_completions, "parsed_pairs": self.n_parsed,
                "records": len(self.records), "warnings": self.warnings, "failures": self.failures}


def run_pipeline(docs: list[CorpusDocument], backend: CompletionBackend,
                 params: GenerationParams | None = None, threshold: float = NEAR_DUP_THRESHOLD,
                 instruction_text: str = DEFAULT_INSTRUCTION) -> PipelineOutput:
    """generate -> parse -> dedup -> instruction records, documents in the given order."""
    pairs: list[QAPair] = []
    warnings: list[str] = []
    failures: list[dict] = []
    n_comp = 0
    for doc in docs:
        res = generate_qa(backend, doc, params)
        failures.extend(res.failures)
        for i, _, text in res.completions:
            n_comp += 1
            got = parse_qa(text, doc.doc_id, warnings)
            if not got:
                warnings.append(f"{doc.doc_id}: paragraph {i} yielded no QA pairs")
            pairs.extend(got)
    kept = dedup(pairs, threshold)
    return PipelineOutput(to_instruction(kept, instruction_text), n_comp, len(pairs), warnings, failures)
