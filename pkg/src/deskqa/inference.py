"""Weighted answer selection, EM/F1/MAP/top-N evaluation, and the block-pass
benchmark comparing unified and pipelined inference."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import torch

from .config import TrainConfig
from .corpus import Instance, tokenize
from .encoder import QAModel
from .heads import (
    CandidateAnswer,
    exact_match,
    propose_candidates,
    reader_scores,
    rerank_score,
    retrieve_score,
    select_segments,
    span_nms,
    token_f1,
)
from .preprocess import Segment
from .train import _batch_tensors, preprocess_instance
from .preprocess import Vocabulary


class InferenceError(Exception):
    pass


@dataclass
class Prediction:
    instance_id: str
    answer: str
    segment_index: int
    start: int
    end: int
    retrieve_prob: float
    reading_score: float
    rerank_score: float
    combined_score: float


@dataclass
class EvalReport:
    em: float
    f1: float
    map: float
    top_n: dict[int, float]
    count: int
    ablation: str = "full"

    def to_dict(self) -> dict:
        return {
            "em": self.em,
            "f1": self.f1,
            "map": self.map,
            "top_n": {str(k): v for k, v in self.top_n.items()},
            "count": self.count,
            "ablation": self.ablation,
        }


def combined_score(
    retrieve_prob: float, reading: float, rerank: float, config: TrainConfig
) -> float:
    return (
        config.weight_retrieve * retrieve_prob
        + config.weight_read * reading
        + config.weight_rerank * rerank
    )


def _tfidf_rank_segments(segs: list[Segment], question: str) -> list[float]:
    """Negative TF-IDF cosine distance per segment; the retriever-ablation
    replacement for the learned scores."""
    from .preprocess import _tfidf_vectors, _cosine_distance
    from collections import Counter

    texts = [list(s.context_tokens) for s in segs]
    vecs = _tfidf_vectors(texts)
    n = len(texts)
    df = Counter()
    for t in texts:
        df.update(set(t))
    idf = {t: math.log((1 + n) / (1 + c)) + 1.0 for t, c in df.items()}
    q_tf = Counter(tokenize(question))
    q_vec = {t: c * idf.get(t, math.log(1 + n) + 1.0) for t, c in q_tf.items()}
    return [-_cosine_distance(q_vec, v) for v in vecs]


def predict(
    inst: Instance,
    model: QAModel,
    vocab: Vocabulary,
    config: TrainConfig,
    use_retriever: bool = True,
    use_reranker: bool = True,
    use_nms: bool = True,
    segments: list[Segment] | None = None,
) -> tuple[Prediction, list[float], list[int]]:
    """Full retrieve-read-rerank pass over one instance.

    Returns the prediction plus the per-segment retrieval probabilities and
    the retained segment indices (used by the retrieval metrics).
    """
    segs = segments if segments is not None else preprocess_instance(inst, vocab, config)
    model.eval()
    with torch.no_grad():
        ids, types = _batch_tensors(segs)
        state = model.forward_to(ids, types, config.early_exit_depth)
        _, probs_t = retrieve_score(model, state.hidden, state.attn_mask)
        probs = probs_t.tolist()

        if use_retriever:
            rank_scores = probs
        else:
            rank_scores = _tfidf_rank_segments(segs, inst.question.text)
        retained = select_segments(segs, rank_scores, config.retrieved_segments, train=False)

        kept_states = model.resume_encode(
            type(state)(
                hidden=state.hidden[retained],
                depth=state.depth,
                attn_mask=state.attn_mask[retained],
            ),
            model.depth,
        )
        start, end = reader_scores(model, kept_states.hidden)

        candidates: list[CandidateAnswer] = []
        for row, seg_idx in enumerate(retained):
            seg = segs[seg_idx]
            proposals = propose_candidates(
                start[row], end[row], seg.context_span,
                config.proposed_answers, config.max_answer_len,
            )
            if not proposals:
                continue
            spans = [(a, b) for a, b, _ in proposals]
            scores = [s for _, _, s in proposals]
            kept = span_nms(spans, scores, config.nms_threshold) if use_nms else list(
                range(min(len(spans), config.nms_threshold))
            )
            sel_spans = [spans[i] for i in kept]
            if use_reranker:
                rr = rerank_score(model, kept_states.hidden[row], sel_spans).tolist()
            else:
                rr = [0.0] * len(sel_spans)
            lo, _ = seg.context_span
            for (a, b), s_read, s_rr in zip(
                sel_spans, (scores[i] for i in kept), rr
            ):
                candidates.append(
                    CandidateAnswer(
                        segment_index=seg.index,
                        start=a,
                        end=b,
                        text=" ".join(seg.context_tokens[a - lo : b - lo + 1]),
                        reading_score=s_read,
                        rerank_score=s_rr if use_reranker else 0.0,
                        retrieve_prob=probs[seg_idx],
                    )
                )

    if not candidates:
        raise InferenceError(f"instance {inst.id!r}: no candidate answers proposed")

    w_rr = config.weight_rerank if use_reranker else 0.0
    w_ret = config.weight_retrieve if use_retriever else 0.0

    def key(c: CandidateAnswer):
        combined = (
            w_ret * c.retrieve_prob
            + config.weight_read * c.reading_score
            + w_rr * c.rerank_score
        )
        return (-combined, c.segment_index, c.start, c.end)

    best = min(candidates, key=key)
    combined = -key(best)[0]
    pred = Prediction(
        instance_id=inst.id,
        answer=best.text,
        segment_index=best.segment_index,
        start=best.start,
        end=best.end,
        retrieve_prob=best.retrieve_prob,
        reading_score=best.reading_score,
        rerank_score=best.rerank_score,
        combined_score=combined,
    )
    return pred, probs, retained


def metric_em_f1(prediction: str, gold_answers: list[str]) -> tuple[float, float]:
    em = max((exact_match(prediction, g) for g in gold_answers), default=0.0)
    f1 = max((token_f1(prediction, g) for g in gold_answers), default=0.0)
    return em, f1


def average_precision(relevance: list[int]) -> float | None:
    """AP of one ranked list; None when it has no relevant entries."""
    hits = 0
    total = 0.0
    for rank, rel in enumerate(relevance, start=1):
        if rel:
            hits += 1
            total += hits / rank
    return total / hits if hits else None


def metric_map_topn(
    relevance_lists: list[list[int]], n_values: list[int]
) -> tuple[float, dict[int, float]]:
    """MAP over instances with >=1 relevant segment; top-N over all instances."""
    aps = [ap for ap in (average_precision(r) for r in relevance_lists) if ap is not None]
    map_score = sum(aps) / len(aps) if aps else 0.0
    top_n = {}
    for n in n_values:
        hits = sum(1 for r in relevance_lists if any(r[:n]))
        top_n[n] = hits / len(relevance_lists) if relevance_lists else 0.0
    return map_score, top_n


def evaluate(
    instances: list[Instance],
    model: QAModel,
    vocab: Vocabulary,
    config: TrainConfig,
    use_retriever: bool = True,
    use_reranker: bool = True,
    n_values: list[int] | None = None,
    ablation: str = "full",
) -> tuple[EvalReport, list[Prediction]]:
    from .train import preprocess_dataset

    n_values = n_values or [1, config.retrieved_segments, 3]
    by_instance = preprocess_dataset(instances, vocab, config)
    em_total = f1_total = 0.0
    relevance_lists = []
    predictions = []
    for inst in instances:
        segs = by_instance[inst.id]
        pred, probs, _ = predict(
            inst, model, vocab, config,
            use_retriever=use_retriever, use_reranker=use_reranker, segments=segs,
        )
        predictions.append(pred)
        em, f1 = metric_em_f1(pred.answer, list(inst.question.gold_answers))
        em_total += em
        f1_total += f1
        order = sorted(range(len(segs)), key=lambda i: (-probs[i], i))
        relevance_lists.append([1 if segs[i].is_gold else 0 for i in order])
    map_score, top_n = metric_map_topn(relevance_lists, sorted(set(n_values)))
    count = len(instances)
    report = EvalReport(
        em=em_total / count if count else 0.0,
        f1=f1_total / count if count else 0.0,
        map=map_score,
        top_n=top_n,
        count=count,
        ablation=ablation,
    )
    return report, predictions


@dataclass(frozen=True)
class BlockPassResult:
    unified: int
    pipeline: int

    @property
    def ratio(self) -> float:
        return self.pipeline / self.unified


def block_pass_benchmark(n: int, top_n: int, blocks: int, depth: int) -> BlockPassResult:
    """Analytic encoder-cost comparison in units of one block applied to one
    segment. Unified: the retriever's first `depth` blocks are shared, only
    top_n segments continue. Pipeline: a separate retriever at `depth`, then
    the reader and the reranker each re-encode the retained segments fully.
    """
    if top_n > n:
        raise InferenceError(f"top_n {top_n} exceeds segment count {n}")
    if depth > blocks:
        raise InferenceError(f"depth {depth} exceeds block count {blocks}")
    unified = n * depth + top_n * (blocks - depth)
    pipeline = n * depth + top_n * blocks + top_n * blocks
    return BlockPassResult(unified=unified, pipeline=pipeline)


def write_predictions(predictions: list[Prediction], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in predictions:
            fh.write(
                json.dumps(
                    {
                        "id": p.instance_id,
                        "answer": p.answer,
                        "segment": p.segment_index,
                        "start": p.start,
                        "end": p.end,
                        "retrieve_prob": p.retrieve_prob,
                        "reading_score": p.reading_score,
                        "rerank_score": p.rerank_score,
                        "combined_score": p.combined_score,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def format_report_table(reports: list[EvalReport]) -> str:
    n_cols = sorted({n for r in reports for n in r.top_n})
    headers = ["ablation", "EM", "F1", "MAP"] + [f"top-{n}" for n in n_cols] + ["count"]
    rows = [headers]
    for r in reports:
        rows.append(
            [r.ablation, f"{r.em:.4f}", f"{r.f1:.4f}", f"{r.map:.4f}"]
            + [f"{r.top_n.get(n, 0.0):.4f}" for n in n_cols]
            + [str(r.count)]
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(headers))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)
