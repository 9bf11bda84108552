"""Question/document data model, synthetic corpus generation, and JSONL I/O."""

from __future__ import annotations

import json
import random
import string
from dataclasses import dataclass, field

SPLITS = ("train", "dev", "test")

_EDGE_PUNCT = string.punctuation


def tokenize(text: str) -> list[str]:
    """Lowercase whitespace tokens with edge punctuation stripped.

    This is the single normalization rule shared by labeling, retrieval,
    and the EM/F1 metrics. Tokens that are pure punctuation vanish.
    """
    out = []
    for tok in text.lower().split():
        tok = tok.strip(_EDGE_PUNCT)
        if tok:
            out.append(tok)
    return out


def normalize(text: str) -> str:
    return " ".join(tokenize(text))


class CorpusError(Exception):
    """Malformed dataset file or invalid generator configuration."""


@dataclass(frozen=True)
class Question:
    id: str
    text: str
    gold_answers: tuple[str, ...]

    def __post_init__(self):
        if not self.gold_answers:
            raise CorpusError(f"question {self.id!r} has no gold answers")


@dataclass(frozen=True)
class Document:
    id: str
    paragraphs: tuple[str, ...]


@dataclass(frozen=True)
class Instance:
    question: Question
    documents: tuple[Document, ...]
    split: str = "train"

    def __post_init__(self):
        if not self.documents:
            raise CorpusError(f"instance {self.question.id!r} has no documents")
        if self.split not in SPLITS:
            raise CorpusError(f"unknown split {self.split!r}")

    @property
    def id(self) -> str:
        return self.question.id


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int
    num_instances: int
    docs_per_instance: int = 3
    paragraphs_per_doc: int = 4
    paragraph_len_range: tuple[int, int] = (8, 14)
    vocab_size: int = 512
    distractor_rate: float = 0.5
    answer_len_range: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.num_instances < 0:
            raise CorpusError("num_instances must be >= 0")
        for name in ("docs_per_instance", "paragraphs_per_doc", "vocab_size"):
            if getattr(self, name) <= 0:
                raise CorpusError(f"{name} must be positive")
        lo, hi = self.paragraph_len_range
        if not (0 < lo <= hi):
            raise CorpusError("invalid paragraph_len_range")
        if not 0.0 <= self.distractor_rate <= 1.0:
            raise CorpusError("distractor_rate must be in [0, 1]")
        alo, ahi = self.answer_len_range
        if not (0 < alo <= ahi):
            raise CorpusError("invalid answer_len_range")


def _instance_to_record(inst: Instance) -> dict:
    return {
        "id": inst.question.id,
        "question": inst.question.text,
        "answers": list(inst.question.gold_answers),
        "documents": [
            {"id": d.id, "paragraphs": list(d.paragraphs)} for d in inst.documents
        ],
        "split": inst.split,
    }


def _record_to_instance(rec: dict) -> Instance:
    for key in ("id", "question", "answers", "documents", "split"):
        if key not in rec:
            raise KeyError(key)
    q = Question(rec["id"], rec["question"], tuple(rec["answers"]))
    docs = tuple(
        Document(d["id"], tuple(d["paragraphs"])) for d in rec["documents"]
    )
    return Instance(q, docs, rec["split"])


def save_dataset(instances: list[Instance], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(_instance_to_record(inst), sort_keys=True))
            fh.write("\n")


def load_dataset(path) -> list[Instance]:
    instances: list[Instance] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                inst = _record_to_instance(rec)
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}: malformed record at line {lineno}: {exc}")
            if inst.id in seen:
                raise CorpusError(f"{path}: duplicate instance id {inst.id!r} at line {lineno}")
            seen.add(inst.id)
            instances.append(inst)
    for inst in instances:
        if inst.split in ("train", "dev") and not _answerable(inst):
            import warnings

            warnings.warn(f"instance {inst.id!r} has no answer-bearing paragraph")
    return instances


def _answerable(inst: Instance) -> bool:
    golds = [tokenize(a) for a in inst.question.gold_answers]
    for doc in inst.documents:
        for para in doc.paragraphs:
            toks = tokenize(para)
            for g in golds:
                if g and any(toks[i : i + len(g)] == g for i in range(len(toks))):
                    return True
    return False


# Word pools for the templated task. Content words are synthetic surface
# forms derived from the vocab budget; the template glue is fixed English.
_TEMPLATE_WORDS = ("what", "is", "the", "of")


@dataclass
class _Pools:
    subjects: list[str]
    relations: list[str]
    answers: list[str]
    fillers: list[str]


def _make_pools(spec: SyntheticSpec) -> _Pools:
    budget = spec.vocab_size - len(_TEMPLATE_WORDS)
    # Small subject/relation pools keep every word frequent enough for the
    # role-pattern rule to beat per-instance memorization; answers get the
    # largest share so answers stay hard to guess without reading.
    n_subj = max(budget // 8, 2)
    n_rel = max(budget // 12, 2)
    n_ans = budget // 2
    n_fill = budget - n_subj - n_rel - n_ans
    if min(n_subj, n_rel, n_ans, n_fill) < 2:
        raise CorpusError(
            f"vocab_size {spec.vocab_size} too small to form distinct "
            "(subject, relation, answer) triples"
        )
    words = [f"w{i:04d}" for i in range(budget)]
    return _Pools(
        subjects=words[:n_subj],
        relations=words[n_subj : n_subj + n_rel],
        answers=words[n_subj + n_rel : n_subj + n_rel + n_ans],
        fillers=words[n_subj + n_rel + n_ans :],
    )


def _fact_sentence(relation: str, subject: str, answer: list[str]) -> list[str]:
    return ["the", relation, "of", subject, "is", *answer]


def _filler(rng: random.Random, pools: _Pools, n: int) -> list[str]:
    return [rng.choice(pools.fillers) for _ in range(n)]


def generate_synthetic(spec: SyntheticSpec, split: str = "train") -> list[Instance]:
    """Deterministic templated QA corpus.

    Each instance asks "what is the <relation> of <subject>"; exactly one
    paragraph states the fact "the <relation> of <subject> is <answer>".
    Distractor paragraphs carry the role-swapped sentence "the <subject> of
    <relation> is <other>": the same bag of question words, so lexical
    overlap alone cannot separate gold from distractor, but the local token
    order differs and an order-aware encoder can.
    """
    if split not in SPLITS:
        raise CorpusError(f"unknown split {split!r}")
    pools = _make_pools(spec)
    rng = random.Random(spec.seed * len(SPLITS) + SPLITS.index(split))
    instances = []
    triples_seen: set[tuple[str, str]] = set()
    max_pairs = len(pools.subjects) * len(pools.relations)
    if spec.num_instances > max_pairs:
        raise CorpusError(
            f"vocab_size {spec.vocab_size} supports only {max_pairs} unique "
            f"(subject, relation) pairs; {spec.num_instances} requested"
        )
    for idx in range(spec.num_instances):
        while True:
            subject = rng.choice(pools.subjects)
            relation = rng.choice(pools.relations)
            if (subject, relation) not in triples_seen:
                triples_seen.add((subject, relation))
                break
        answer = [
            rng.choice(pools.answers)
            for _ in range(rng.randint(*spec.answer_len_range))
        ]
        total_paras = spec.docs_per_instance * spec.paragraphs_per_doc
        gold_pos = rng.randrange(total_paras)

        paragraphs: list[str] = []
        for p in range(total_paras):
            lo, hi = spec.paragraph_len_range
            n_fill = rng.randint(lo, hi)
            toks = _filler(rng, pools, n_fill)
            if p == gold_pos:
                sent = _fact_sentence(relation, subject, answer)
            elif rng.random() < spec.distractor_rate:
                # Role-swapped sentence with a filler tail: identical
                # question-word bag, so lexical overlap cannot separate it
                # from the gold paragraph, but no answer-pool token.
                other_ans = [
                    rng.choice(pools.fillers)
                    for _ in range(rng.randint(*spec.answer_len_range))
                ]
                sent = _fact_sentence(subject, relation, other_ans)
            else:
                sent = []
            cut = rng.randint(0, len(toks))
            paragraphs.append(" ".join(toks[:cut] + sent + toks[cut:]))

        docs = []
        for d in range(spec.docs_per_instance):
            lo_p = d * spec.paragraphs_per_doc
            docs.append(
                Document(
                    id=f"{split}-{idx:05d}-d{d}",
                    paragraphs=tuple(paragraphs[lo_p : lo_p + spec.paragraphs_per_doc]),
                )
            )
        q = Question(
            id=f"{split}-{idx:05d}",
            text=f"what is the {relation} of {subject}",
            gold_answers=(" ".join(answer),),
        )
        instances.append(Instance(q, tuple(docs), split))
    return instances
