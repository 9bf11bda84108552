"""Retriever scoring/selection, span proposal, span NMS, and reranking."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, replace

import torch

from .corpus import tokenize
from .encoder import QAModel
from .preprocess import Segment

NEG_INF = float("-inf")


class HeadsError(Exception):
    pass


@dataclass
class CandidateAnswer:
    segment_index: int
    start: int  # position in the input sequence, inside the context span
    end: int
    text: str
    reading_score: float
    rerank_score: float = 0.0
    retrieve_prob: float = 0.0

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)


def retrieve_score(model: QAModel, hidden: torch.Tensor, mask: torch.Tensor):
    """Weighted self-alignment over block-J states -> 2-way score and P(positive).

    hidden: [B, L, D]; mask: [B, L] bool over non-PAD positions.
    """
    if not mask.any(dim=1).all():
        raise HeadsError("retrieve_score received an all-PAD sequence")
    align = model.retrieve_align(hidden).squeeze(-1)  # [B, L]
    align = align.masked_fill(~mask, torch.finfo(hidden.dtype).min)
    weights = torch.softmax(align, dim=-1)
    pooled = (weights[:, :, None] * hidden).sum(dim=1)  # [B, D]
    scores = model.retrieve_out(torch.tanh(model.retrieve_proj(pooled)))  # [B, 2]
    probs = torch.softmax(scores, dim=-1)[:, 0]
    return scores, probs


def select_segments(
    segments: list[Segment], probs: list[float], n: int, train: bool
) -> list[int]:
    """Indices of the top-N segments of one instance by positive probability.

    In train mode, if none of the retained segments is answer-bearing and a
    gold one exists, the least confident retained slot is swapped for the
    most confident gold segment.
    """
    if n < 1:
        raise HeadsError("n must be >= 1")
    if len(segments) != len(probs):
        raise HeadsError("segments/probs length mismatch")
    order = sorted(range(len(segments)), key=lambda i: (-probs[i], i))
    retained = order[: n]
    if train and not any(segments[i].is_gold for i in retained):
        gold = [i for i in order if segments[i].is_gold]
        if gold:
            weakest = min(retained, key=lambda i: (probs[i], i))
            retained = [x for x in retained if x != weakest] + [gold[0]]
    return sorted(retained)


def reader_scores(model: QAModel, hidden: torch.Tensor):
    """Start/end position scores from the final hidden states. [B, L] each."""
    start = model.start_scorer(hidden).squeeze(-1)
    end = model.end_scorer(hidden).squeeze(-1)
    return start, end


def propose_candidates(
    start_scores,
    end_scores,
    context_span: tuple[int, int],
    m: int,
    max_len: int,
) -> list[tuple[int, int, float]]:
    """Top-M context spans by start+end score, ties in (start, end) order."""
    if m < 1 or max_len < 1:
        raise HeadsError("m and max_len must be >= 1")
    lo, hi = context_span
    spans = []
    for a in range(lo, hi + 1):
        sa = float(start_scores[a])
        for b in range(a, min(a + max_len - 1, hi) + 1):
            spans.append((a, b, sa + float(end_scores[b])))
    spans.sort(key=lambda t: (-t[2], t[0], t[1]))
    return spans[:m]


def span_nms(
    spans: list[tuple[int, int]], scores: list[float], m_star: int
) -> list[int]:
    """Greedy suppression of spans sharing a start or end boundary.

    Returns the indices of kept spans in selection order.
    """
    if len(spans) != len(scores):
        raise HeadsError("spans/scores length mismatch")
    if m_star < 1:
        raise HeadsError("m_star must be >= 1")
    alive = list(range(len(spans)))
    kept: list[int] = []
    while alive and len(kept) < m_star:
        best = min(alive, key=lambda i: (-scores[i], i))
        kept.append(best)
        a, b = spans[best]
        alive = [i for i in alive if i != best and spans[i][0] != a and spans[i][1] != b]
    return kept


def rerank_score(model: QAModel, hidden: torch.Tensor, spans: list[tuple[int, int]]):
    """Self-aligned span representations -> scalar score per span.

    hidden: [L, D] final states of one segment.
    """
    scores = []
    for a, b in spans:
        piece = hidden[a : b + 1]  # [len, D]
        align = model.rerank_align(piece).squeeze(-1)
        weights = torch.softmax(align, dim=-1)
        vec = (weights[:, None] * piece).sum(dim=0)
        scores.append(model.rerank_out(torch.tanh(model.rerank_proj(vec))).squeeze(-1))
    if not scores:
        return hidden.new_zeros(0)
    return torch.stack(scores)


def exact_match(pred: str, gold: str) -> float:
    return 1.0 if tokenize(pred) == tokenize(gold) and tokenize(gold) else 0.0


def token_f1(pred: str, gold: str) -> float:
    p, g = tokenize(pred), tokenize(gold)
    common = Counter(p) & Counter(g)
    same = sum(common.values())
    if same == 0:
        return 0.0
    precision = same / len(p)
    recall = same / len(g)
    return 2 * precision * recall / (precision + recall)


def find_gold_span(seg: Segment, gold_answers: list[str]) -> tuple[int, int] | None:
    """First (start, end) occurrence of any gold answer inside the context."""
    lo, _ = seg.context_span
    ctx = list(seg.context_tokens)
    hits = []
    for gold in gold_answers:
        g = tokenize(gold)
        if not g:
            continue
        for i in range(len(ctx) - len(g) + 1):
            if ctx[i : i + len(g)] == g:
                hits.append((lo + i, lo + i + len(g) - 1))
    return min(hits) if hits else None


def build_rerank_labels(
    candidates: list[CandidateAnswer],
    seg: Segment,
    gold_answers: list[str],
) -> tuple[list[CandidateAnswer], list[float], list[float]]:
    """Hard (exact match) and soft (token F1) labels per candidate.

    When no candidate is exactly correct but the segment does contain a gold
    span, the lowest-scored candidate is replaced by that span so the hard
    loss always has a target when one is available.
    """
    cands = list(candidates)
    y_hard = [max((exact_match(c.text, g) for g in gold_answers), default=0.0) for c in cands]
    if cands and not any(y_hard):
        gold_span = find_gold_span(seg, gold_answers)
        if gold_span is not None:
            worst = min(range(len(cands)), key=lambda i: (cands[i].reading_score, -i))
            lo, _ = seg.context_span
            a, b = gold_span
            text = " ".join(seg.context_tokens[a - lo : b - lo + 1])
            cands[worst] = replace(cands[worst], start=a, end=b, text=text)
            y_hard = [
                max((exact_match(c.text, g) for g in gold_answers), default=0.0)
                for c in cands
            ]
    y_soft = [max((token_f1(c.text, g) for g in gold_answers), default=0.0) for c in cands]
    return cands, y_hard, y_soft
