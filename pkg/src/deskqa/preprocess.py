"""Paragraph merging, TF-IDF pruning, sliding windows, and distant labels."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .corpus import Document, Instance, Question, tokenize

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIALS = (PAD, UNK, CLS, SEP)


class PreprocessError(Exception):
    pass


class Vocabulary:
    """Dense token<->id bijection with the four specials at ids 0..3."""

    def __init__(self, tokens: list[str]):
        self._itos = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self._stoi = {t: i for i, t in enumerate(self._itos)}
        if len(self._stoi) != len(self._itos):
            raise PreprocessError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self._itos)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def cls_id(self) -> int:
        return 2

    @property
    def sep_id(self) -> int:
        return 3

    def id(self, token: str) -> int:
        return self._stoi.get(token, self.unk_id)

    def token(self, idx: int) -> str:
        return self._itos[idx]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self._itos:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            toks = [line.rstrip("\n") for line in fh]
        if tuple(toks[:4]) != SPECIALS:
            raise PreprocessError(f"{path}: vocabulary must start with {SPECIALS}")
        return cls(toks[4:])

    @classmethod
    def build(cls, instances: list[Instance]) -> "Vocabulary":
        counts: Counter[str] = Counter()
        for inst in instances:
            counts.update(tokenize(inst.question.text))
            for ans in inst.question.gold_answers:
                counts.update(tokenize(ans))
            for doc in inst.documents:
                for para in doc.paragraphs:
                    counts.update(tokenize(para))
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        return cls(ordered)


@dataclass(frozen=True)
class PrunedDocument:
    instance_id: str
    paragraphs: tuple[str, ...]
    tokens: tuple[str, ...]
    provenance: tuple[tuple[int, int, int], ...]  # (doc idx, para idx, offset)

    @property
    def length(self) -> int:
        return len(self.tokens)


@dataclass
class Segment:
    instance_id: str
    index: int
    window_start: int
    input_ids: list[int]
    type_ids: list[int]
    context_span: tuple[int, int]  # inclusive positions of context inside x
    context_tokens: tuple[str, ...]
    y_r: tuple[int, int] | None = None
    y_s: list[int] = field(default_factory=list)
    y_e: list[int] = field(default_factory=list)

    @property
    def is_gold(self) -> bool:
        return self.y_r is not None and self.y_r[0] == 1


def merge_paragraphs(doc: Document, threshold: int = 200) -> Document:
    """Greedy left-to-right fold of consecutive short paragraphs."""
    if threshold <= 0:
        raise PreprocessError("threshold must be positive")
    merged: list[list[str]] = []
    acc: list[str] = []
    acc_len = 0
    for para in doc.paragraphs:
        plen = len(tokenize(para))
        if acc and acc_len + plen <= threshold:
            acc.append(para)
            acc_len += plen
        else:
            if acc:
                merged.append(acc)
            acc = [para]
            acc_len = plen
    if acc:
        merged.append(acc)
    return Document(doc.id, tuple(" ".join(group) for group in merged))


def _tfidf_vectors(texts: list[list[str]]) -> list[dict[str, float]]:
    n = len(texts)
    df: Counter[str] = Counter()
    for toks in texts:
        df.update(set(toks))
    idf = {t: math.log((1 + n) / (1 + c)) + 1.0 for t, c in df.items()}
    vecs = []
    for toks in texts:
        tf = Counter(toks)
        vecs.append({t: tf[t] * idf.get(t, math.log(1 + n) + 1.0) for t in tf})
    return vecs


def _cosine_distance(a: dict[str, float], b: dict[str, float]) -> float:
    dot = sum(v * b.get(t, 0.0) for t, v in a.items())
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 1.0
    return 1.0 - dot / (na * nb)


def prune_document(q: Question, docs: list[Document], k: int) -> PrunedDocument:
    """Keep the K paragraphs closest to the question under TF-IDF cosine.

    IDF statistics come from this instance's paragraph set alone. Selected
    paragraphs are restored to source order before concatenation.
    """
    if k < 1:
        raise PreprocessError("k must be >= 1")
    entries = []  # (doc idx, para idx, paragraph text, tokens)
    for di, doc in enumerate(docs):
        for pi, para in enumerate(doc.paragraphs):
            entries.append((di, pi, para, tokenize(para)))
    if not entries:
        raise PreprocessError(f"instance {q.id!r} has no paragraphs")

    para_tokens = [e[3] for e in entries]
    vecs = _tfidf_vectors(para_tokens)
    # Query terms reuse the paragraph-collection IDF via the same builder.
    n = len(para_tokens)
    df: Counter[str] = Counter()
    for toks in para_tokens:
        df.update(set(toks))
    idf = {t: math.log((1 + n) / (1 + c)) + 1.0 for t, c in df.items()}
    q_tf = Counter(tokenize(q.text))
    q_vec = {t: c * idf.get(t, math.log(1 + n) + 1.0) for t, c in q_tf.items()}

    ranked = sorted(
        range(len(entries)),
        key=lambda i: (_cosine_distance(q_vec, vecs[i]), entries[i][0], entries[i][1]),
    )
    selected = sorted(ranked[:k])  # back to (doc idx, para idx) order

    paragraphs = []
    tokens: list[str] = []
    provenance: list[tuple[int, int, int]] = []
    for i in selected:
        di, pi, para, toks = entries[i]
        paragraphs.append(para)
        for off, tok in enumerate(toks):
            tokens.append(tok)
            provenance.append((di, pi, off))
    return PrunedDocument(q.id, tuple(paragraphs), tuple(tokens), tuple(provenance))


def num_windows(doc_len: int, l: int, r: int) -> int:
    if doc_len <= l:
        return 1
    return math.ceil((doc_len - l) / r) + 1


def build_input_sequence(
    q_tokens: list[str], c_tokens: list[str], max_len: int, vocab: Vocabulary
) -> tuple[list[int], list[int], tuple[int, int]]:
    """[CLS] q [SEP] c [SEP] PAD...; returns (ids, type ids, context span)."""
    if not c_tokens:
        raise PreprocessError("empty context")
    need = len(q_tokens) + len(c_tokens) + 3
    if need > max_len:
        raise PreprocessError(f"sequence length {need} exceeds {max_len}")
    ids = [vocab.cls_id]
    ids += [vocab.id(t) for t in q_tokens]
    ids.append(vocab.sep_id)
    ctx_start = len(ids)
    ids += [vocab.id(t) for t in c_tokens]
    ctx_end = len(ids) - 1
    ids.append(vocab.sep_id)
    type_ids = [0] * (len(q_tokens) + 2) + [1] * (len(c_tokens) + 1)
    pad = max_len - len(ids)
    ids += [vocab.pad_id] * pad
    type_ids += [0] * pad
    return ids, type_ids, (ctx_start, ctx_end)


def segmentize(
    pd: PrunedDocument, q: Question, l: int, r: int, vocab: Vocabulary, max_len: int
) -> list[Segment]:
    """Slide a window of length l with stride r over the pruned document."""
    if l < 1 or not 1 <= r <= l:
        raise PreprocessError(f"invalid window/stride ({l}, {r})")
    if pd.length == 0:
        raise PreprocessError(f"instance {pd.instance_id!r}: empty pruned document")
    q_tokens = tokenize(q.text)
    if len(q_tokens) + l + 3 > max_len:
        raise PreprocessError(
            f"window {l} plus question {len(q_tokens)} exceeds max_len {max_len}"
        )
    segments = []
    for i in range(num_windows(pd.length, l, r)):
        start = i * r
        ctx = list(pd.tokens[start : start + l])
        ids, type_ids, span = build_input_sequence(q_tokens, ctx, max_len, vocab)
        segments.append(
            Segment(
                instance_id=pd.instance_id,
                index=i,
                window_start=start,
                input_ids=ids,
                type_ids=type_ids,
                context_span=span,
                context_tokens=tuple(ctx),
            )
        )
    return segments


def label_segment(seg: Segment, gold_answers: list[str]) -> Segment:
    """Distant supervision: mark every context span matching a gold answer."""
    length = len(seg.input_ids)
    y_s = [0] * length
    y_e = [0] * length
    ctx_start, _ = seg.context_span
    golds = [tokenize(a) for a in gold_answers]
    found = False
    ctx = list(seg.context_tokens)
    for g in golds:
        if not g:
            continue
        for i in range(len(ctx) - len(g) + 1):
            if ctx[i : i + len(g)] == g:
                y_s[ctx_start + i] = 1
                y_e[ctx_start + i + len(g) - 1] = 1
                found = True
    if not found:
        y_s[0] = 1
        y_e[0] = 1
    seg.y_s = y_s
    seg.y_e = y_e
    seg.y_r = (1, 0) if found else (0, 1)
    return seg
