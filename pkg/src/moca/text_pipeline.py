"""Tokenization, latent-semantic-option rewriting, and input construction.

Inputs are assembled as [CLS] context [SEP] question [SEP] option [SEP],
truncating the context first and padding to the fixed model length.
Options whose meaning references other options ("all of the above",
"none of these", "both a and b") are rewritten before encoding.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .tokenizer import split_words

log = logging.getLogger(__name__)

SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)

QUESTION_TYPES = ("TF", "TMC", "DMC")


@dataclass
class Vocab:
    token_to_id: dict[str, int]
    freq: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for i, tok in enumerate(SPECIAL_TOKENS):
            if self.token_to_id.get(tok) != i:
                raise DataError(f"vocab must map {tok} to id {i}")
        ids = sorted(self.token_to_id.values())
        if ids != list(range(len(ids))):
            raise DataError("vocab ids must be contiguous from 0")

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    pad_id = PAD_ID
    unk_id = UNK_ID
    cls_id = CLS_ID
    sep_id = SEP_ID
    mask_id = MASK_ID

    @property
    def special_ids(self) -> tuple[int, ...]:
        return (PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID)

    @property
    def non_special_ids(self) -> np.ndarray:
        return np.arange(len(SPECIAL_TOKENS), self.size, dtype=np.int64)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    @classmethod
    def build(cls, texts, max_size: int | None = None, min_freq: int = 1) -> "Vocab":
        """Frequency-ranked vocab over split_words tokens; ties lexicographic."""
        counts = Counter()
        for text in texts:
            counts.update(split_words(text))
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        mapping = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
        budget = None if max_size is None else max_size - len(SPECIAL_TOKENS)
        for tok, n in ranked:
            if n < min_freq or (budget is not None and len(mapping) - len(SPECIAL_TOKENS) >= budget):
                break
            if tok not in mapping:
                mapping[tok] = len(mapping)
        return cls(token_to_id=mapping, freq=dict(counts))

    def save(self, path) -> None:
        ordered = sorted(self.token_to_id.items(), key=lambda kv: kv[1])
        with open(path, "w", encoding="utf-8") as fh:
            for tok, _ in ordered:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = [ln.rstrip("\n") for ln in fh if ln.strip()]
        return cls(token_to_id={tok: i for i, tok in enumerate(tokens)})


def tokenize(text: str, vocab: Vocab) -> list[int]:
    """Lowercased word tokens mapped through the vocab; unknowns become [UNK]."""
    return [vocab.id_of(tok) for tok in split_words(text)]


@dataclass
class QuestionRecord:
    id: str
    context: str
    question: str
    options: list[str]
    answer_index: int | None = None
    question_diagram: str | None = None
    instructional_diagrams: list[str] = field(default_factory=list)
    qtype: str = "TMC"

    def __post_init__(self):
        if self.qtype not in QUESTION_TYPES:
            raise DataError(f"qtype must be one of {QUESTION_TYPES}, got {self.qtype!r}")
        if not 2 <= len(self.options) <= 7:
            raise DataError(f"record {self.id}: needs 2-7 options, got {len(self.options)}")
        if self.answer_index is not None and not 0 <= self.answer_index < len(self.options):
            raise DataError(f"record {self.id}: answer_index {self.answer_index} out of range")
        if self.qtype == "DMC" and self.question_diagram is None:
            raise DataError(f"record {self.id}: DMC requires a question_diagram")

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.id,
                "context": self.context,
                "question": self.question,
                "options": self.options,
                "answer_index": self.answer_index,
                "question_diagram": self.question_diagram,
                "instructional_diagrams": self.instructional_diagrams,
                "qtype": self.qtype,
            }
        )

    @classmethod
    def from_dict(cls, obj: dict) -> "QuestionRecord":
        return cls(
            id=str(obj["id"]),
            context=obj.get("context", ""),
            question=obj["question"],
            options=list(obj["options"]),
            answer_index=obj.get("answer_index"),
            question_diagram=obj.get("question_diagram"),
            instructional_diagrams=list(obj.get("instructional_diagrams", [])),
            qtype=obj.get("qtype", "TMC"),
        )

    @classmethod
    def from_json(cls, line: str) -> "QuestionRecord":
        return cls.from_dict(json.loads(line))


@dataclass
class TokenSeq:
    ids: np.ndarray
    attention_mask: np.ndarray
    segments: dict[str, tuple[int, int]]

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.attention_mask = np.asarray(self.attention_mask, dtype=np.int64)
        if self.ids.shape != self.attention_mask.shape:
            raise DataError("TokenSeq ids and attention_mask must align")
        if self.ids[0] != CLS_ID:
            raise DataError("TokenSeq must start with [CLS]")
        real = self.ids[self.attention_mask == 1]
        if int((real == SEP_ID).sum()) != 3:
            raise DataError("TokenSeq must contain exactly three [SEP] before padding")

    def __len__(self) -> int:
        return int(self.ids.size)


# --------------------------------------------------------------------------
# Latent semantic options
# --------------------------------------------------------------------------

# Positive patterns resolve to the referenced options' concatenation;
# negative patterns resolve to the empty string. Both lists are extensible.
POSITIVE_ALL_PATTERNS = (
    r"all of the above",
    r"all of these",
    r"all the above",
    r"all of them",
)
NEGATIVE_PATTERNS = (
    r"none of the above",
    r"none of these",
    r"none of them",
    r"neither \(?([a-g1-7])\)? nor \(?([a-g1-7])\)?",
)
_BOTH_RE = re.compile(r"^both \(?([a-g1-7])\)? and \(?([a-g1-7])\)?$")

LSO_SEPARATOR = "; "


def _canon(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().strip(".!?,").strip()).lower()


def _label_index(label: str) -> int:
    if label.isdigit():
        return int(label) - 1
    return ord(label) - ord("a")


def normalize_lso(
    options: list[str],
    extra_positive: tuple[str, ...] = (),
    extra_negative: tuple[str, ...] = (),
) -> list[str]:
    """Rewrite latent semantic options in place of their references.

    "All ..." variants become the concatenation of every other non-LSO
    option; "both X and Y" becomes the two referenced options joined; the
    negative family becomes the empty string. A "both" reference outside
    the option range is left unchanged with a warning.
    """
    if len(options) < 2:
        raise DataError("normalize_lso requires at least 2 options")
    pos_all = [re.compile(f"^(?:{p})$") for p in POSITIVE_ALL_PATTERNS + extra_positive]
    negative = [re.compile(f"^(?:{p})$") for p in NEGATIVE_PATTERNS + extra_negative]

    def kind(text: str) -> str:
        c = _canon(text)
        if any(p.match(c) for p in pos_all):
            return "all"
        if _BOTH_RE.match(c):
            return "both"
        if any(p.match(c) for p in negative):
            return "negative"
        return "plain"

    kinds = [kind(o) for o in options]
    plain = [o for o, k in zip(options, kinds) if k == "plain"]
    out: list[str] = []
    for i, (text, k) in enumerate(zip(options, kinds)):
        if k == "plain":
            out.append(text)
        elif k == "negative":
            out.append("")
        elif k == "all":
            out.append(LSO_SEPARATOR.join(plain))
        else:  # both X and Y
            m = _BOTH_RE.match(_canon(text))
            a, b = _label_index(m.group(1)), _label_index(m.group(2))
            if not (0 <= a < len(options) and 0 <= b < len(options)):
                log.warning(
                    "option %d %r references a label outside the option range; left unchanged",
                    i,
                    text,
                )
                out.append(text)
            else:
                out.append(options[a] + LSO_SEPARATOR + options[b])
    return out


def build_input(
    record: QuestionRecord,
    option_index: int,
    vocab: Vocab,
    n_max: int = 180,
    context: str | None = None,
    option_text: str | None = None,
) -> TokenSeq:
    """[CLS] context [SEP] question [SEP] option [SEP], padded to n_max.

    The context is truncated (tail first) to fit; the question and option
    are never truncated. `context` overrides the record's own context
    (letting retrieval supply the background text) and `option_text`
    overrides the stored option (letting LSO rewriting apply).
    """
    if not 0 <= option_index < len(record.options):
        raise DataError(f"option_index {option_index} out of range")
    ctx_ids = tokenize(record.context if context is None else context, vocab)
    q_ids = tokenize(record.question, vocab)
    opt_ids = tokenize(
        record.options[option_index] if option_text is None else option_text, vocab
    )
    overhead = 4  # [CLS] + three [SEP]
    if len(q_ids) + len(opt_ids) > n_max - overhead:
        raise DataError(
            f"record {record.id}: question too long "
            f"({len(q_ids)} + {len(opt_ids)} tokens exceed {n_max - overhead})"
        )
    ctx_budget = n_max - overhead - len(q_ids) - len(opt_ids)
    ctx_ids = ctx_ids[:ctx_budget]
    ids = [CLS_ID, *ctx_ids, SEP_ID, *q_ids, SEP_ID, *opt_ids, SEP_ID]
    real = len(ids)
    ids.extend([PAD_ID] * (n_max - real))
    mask = [1] * real + [0] * (n_max - real)
    segments = {
        "context": (1, len(ctx_ids)),
        "question": (2 + len(ctx_ids), len(q_ids)),
        "option": (3 + len(ctx_ids) + len(q_ids), len(opt_ids)),
    }
    return TokenSeq(ids=np.array(ids), attention_mask=np.array(mask), segments=segments)


def read_records(path) -> list[QuestionRecord]:
    """Read QuestionRecord JSONL; `_moca` header records are skipped."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "_moca" in obj:
                continue
            records.append(QuestionRecord.from_dict(obj))
    return records
