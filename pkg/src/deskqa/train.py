"""Joint losses, Adam with linear warmup, and the end-to-end epoch loop.

Each epoch scores every segment with the early-exit retriever, rebuilds the
retained-segment set (with gold substitution), and then walks both sets with
a shared step count so a single optimizer step sees a retrieval batch plus a
reading/reranking batch whose final-block states are computed once.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .config import TrainConfig
from .corpus import Instance, tokenize
from .encoder import ModelConfig, QAModel, save_checkpoint
from .heads import (
    CandidateAnswer,
    build_rerank_labels,
    propose_candidates,
    reader_scores,
    retrieve_score,
    rerank_score,
    select_segments,
    span_nms,
)
from .preprocess import (
    Segment,
    Vocabulary,
    label_segment,
    merge_paragraphs,
    prune_document,
    segmentize,
)


class TrainError(Exception):
    pass


def loss_retrieve(scores: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Batch-mean cross entropy of the 2-way retrieving scores."""
    logp = F.log_softmax(scores, dim=-1)
    return -(labels * logp).sum(dim=-1).mean()


def loss_read(
    start_scores: torch.Tensor,
    end_scores: torch.Tensor,
    y_start: torch.Tensor,
    y_end: torch.Tensor,
) -> torch.Tensor:
    """Multi-hot span loss: summed log-likelihood at every labeled position."""
    ls = -(y_start * F.log_softmax(start_scores, dim=-1)).sum(dim=-1)
    le = -(y_end * F.log_softmax(end_scores, dim=-1)).sum(dim=-1)
    return (ls + le).mean()


def loss_rerank(
    scores: torch.Tensor,
    y_hard: torch.Tensor,
    y_soft: torch.Tensor,
    soft_norm: str = "softmax",
) -> torch.Tensor:
    """Hard cross-entropy term plus squared error against soft labels.

    The soft term regresses a normalized confidence toward the token-F1
    labels; "softmax" normalization is the default because dividing raw
    tanh-range scores by their sum is undefined near zero.
    """
    term1 = -(y_hard * F.log_softmax(scores, dim=-1)).sum()
    if soft_norm == "softmax":
        p = torch.softmax(scores, dim=-1)
    elif soft_norm == "raw":
        p = scores / scores.sum()
    else:
        raise TrainError(f"unknown soft_norm {soft_norm!r}")
    term2 = ((y_soft - p) ** 2).sum()
    return term1 + term2


@dataclass
class AdamState:
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


def warmup_lr(step: int, total_steps: int, base_lr: float, warmup_fraction: float) -> float:
    """Linear ramp from 0 over the first warmup_fraction of steps, then flat."""
    warmup = max(int(round(total_steps * warmup_fraction)), 0)
    if warmup and step < warmup:
        return base_lr * step / warmup
    return base_lr


def adam_step(
    named_params,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update with bias correction over (name, param) pairs in place."""
    state.step += 1
    t = state.step
    with torch.no_grad():
        for name, p in named_params:
            if p.grad is None:
                continue
            g = p.grad
            if g.shape != p.shape:
                raise TrainError(f"gradient shape mismatch on {name}")
            m = state.exp_avg.setdefault(name, torch.zeros_like(p))
            v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            m_hat = m / (1 - beta1 ** t)
            v_hat = v / (1 - beta2 ** t)
            p.addcdiv_(m_hat, v_hat.sqrt() + eps, value=-lr)


def preprocess_instance(
    inst: Instance, vocab: Vocabulary, config: TrainConfig
) -> list[Segment]:
    """Merge, prune, window, assemble, and label one instance's segments."""
    merged = [merge_paragraphs(d, config.merge_threshold) for d in inst.documents]
    pruned = prune_document(inst.question, merged, config.retrieved_paragraphs)
    q_len = len(tokenize(inst.question.text))
    window = config.window if config.window is not None else config.max_len - q_len - 3
    if window < 1:
        raise TrainError(f"question {inst.id!r} too long for max_len {config.max_len}")
    stride = min(config.stride, window)
    segs = segmentize(pruned, inst.question, window, stride, vocab, config.max_len)
    for seg in segs:
        label_segment(seg, list(inst.question.gold_answers))
    return segs


def preprocess_dataset(
    instances: list[Instance], vocab: Vocabulary, config: TrainConfig
) -> dict[str, list[Segment]]:
    return {inst.id: preprocess_instance(inst, vocab, config) for inst in instances}


def _batch_tensors(segs: list[Segment], device=None):
    ids = torch.tensor([s.input_ids for s in segs], dtype=torch.long, device=device)
    types = torch.tensor([s.type_ids for s in segs], dtype=torch.long, device=device)
    return ids, types


def _labels_retrieve(segs: list[Segment]) -> torch.Tensor:
    return torch.tensor([s.y_r for s in segs], dtype=torch.float32)


def score_all_segments(
    model: QAModel, segs: list[Segment], depth: int, batch: int = 256
) -> list[float]:
    """Positive retrieving probability for every segment, batched, no grad."""
    probs: list[float] = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(segs), batch):
            chunk = segs[i : i + batch]
            ids, types = _batch_tensors(chunk)
            state = model.forward_to(ids, types, depth)
            _, p = retrieve_score(model, state.hidden, state.attn_mask)
            probs.extend(p.tolist())
    return probs


def rerank_loss_for_segment(
    model: QAModel,
    hidden: torch.Tensor,
    seg: Segment,
    gold_answers: list[str],
    config: TrainConfig,
) -> torch.Tensor | None:
    """Propose, suppress, substitute, and score candidates for one segment."""
    with torch.no_grad():
        start, end = reader_scores(model, hidden[None])
    proposals = propose_candidates(
        start[0], end[0], seg.context_span, config.proposed_answers, config.max_answer_len
    )
    if not proposals:
        return None
    spans = [(a, b) for a, b, _ in proposals]
    kept = span_nms(spans, [s for _, _, s in proposals], config.nms_threshold)
    lo, _ = seg.context_span
    cands = [
        CandidateAnswer(
            segment_index=seg.index,
            start=spans[i][0],
            end=spans[i][1],
            text=" ".join(seg.context_tokens[spans[i][0] - lo : spans[i][1] - lo + 1]),
            reading_score=proposals[i][2],
        )
        for i in kept
    ]
    cands, y_hard, y_soft = build_rerank_labels(cands, seg, gold_answers)
    scores = rerank_score(model, hidden, [c.span for c in cands])
    return loss_rerank(
        scores,
        torch.tensor(y_hard, dtype=hidden.dtype),
        torch.tensor(y_soft, dtype=hidden.dtype),
        config.rerank_soft_norm,
    )


@dataclass
class StepRecord:
    epoch: int
    step: int
    loss_retrieve: float
    loss_read: float
    loss_rerank: float
    lr: float


def train(
    model: QAModel,
    instances: list[Instance],
    vocab: Vocabulary,
    config: TrainConfig,
    checkpoint_dir=None,
) -> list[StepRecord]:
    """End-to-end training over the preprocessed segment sets."""
    torch.manual_seed(config.seed)
    rng = random.Random(config.seed)
    by_instance = preprocess_dataset(instances, vocab, config)
    answers = {inst.id: list(inst.question.gold_answers) for inst in instances}
    all_segments = [s for segs in by_instance.values() for s in segs]
    if not all_segments:
        raise TrainError("no segments to train on")

    log: list[StepRecord] = []
    opt_state = AdamState()
    # Step count per epoch is fixed by the retained-set size, which is
    # n_instances * N at most; precompute for the warmup schedule.
    n_retained = sum(
        min(config.retrieved_segments, len(segs)) for segs in by_instance.values()
    )
    steps_per_epoch = math.ceil(n_retained / config.batch_size)
    total_steps = config.epochs * steps_per_epoch

    for epoch in range(config.epochs):
        probs = score_all_segments(model, all_segments, config.early_exit_depth)
        offsets = {}
        pos = 0
        for iid, segs in by_instance.items():
            offsets[iid] = pos
            pos += len(segs)
        retained: list[Segment] = []
        for iid, segs in by_instance.items():
            base = offsets[iid]
            picked = select_segments(
                segs, probs[base : base + len(segs)], config.retrieved_segments, train=True
            )
            retained.extend(segs[i] for i in picked)
        if not retained:
            raise TrainError("retained segment set is empty")

        steps = math.ceil(len(retained) / config.batch_size)
        batch_x = math.ceil(len(all_segments) / steps)
        order_x = list(range(len(all_segments)))
        order_xt = list(range(len(retained)))
        rng.shuffle(order_x)
        rng.shuffle(order_xt)

        model.train()
        for step in range(steps):
            xb = [all_segments[i] for i in order_x[step * batch_x : (step + 1) * batch_x]]
            xtb = [
                retained[i]
                for i in order_xt[step * config.batch_size : (step + 1) * config.batch_size]
            ]
            model.zero_grad(set_to_none=True)

            l1 = torch.zeros(())
            if xb:
                ids, types = _batch_tensors(xb)
                state = model.forward_to(ids, types, config.early_exit_depth)
                scores, _ = retrieve_score(model, state.hidden, state.attn_mask)
                l1 = loss_retrieve(scores, _labels_retrieve(xb))

            l2 = torch.zeros(())
            l3 = torch.zeros(())
            if xtb:
                ids, types = _batch_tensors(xtb)
                full = model.forward_to(ids, types, model.depth)
                start, end = reader_scores(model, full.hidden)
                y_s = torch.tensor([s.y_s for s in xtb], dtype=torch.float32)
                y_e = torch.tensor([s.y_e for s in xtb], dtype=torch.float32)
                l2 = loss_read(start, end, y_s, y_e)
                seg_losses = []
                for j, seg in enumerate(xtb):
                    # Reuses the final-block states already computed for reading.
                    rl = rerank_loss_for_segment(
                        model, full.hidden[j], seg, answers[seg.instance_id], config
                    )
                    if rl is not None:
                        seg_losses.append(rl)
                if seg_losses:
                    l3 = torch.stack(seg_losses).mean()

            total = l1 + l2 + l3
            if not torch.isfinite(total):
                raise TrainError(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"L1={float(l1)} L2={float(l2)} L3={float(l3)}"
                )
            total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            lr = warmup_lr(opt_state.step, total_steps, config.learning_rate, config.warmup_fraction)
            adam_step(model.named_parameters(), opt_state, lr)
            log.append(
                StepRecord(
                    epoch, step,
                    float(l1.detach()), float(l2.detach()), float(l3.detach()), lr,
                )
            )
        if checkpoint_dir is not None:
            save_checkpoint(model, f"{checkpoint_dir}/epoch{epoch:03d}.ckpt")
    model.eval()
    return log


def model_from_config(config: TrainConfig, vocab_size: int) -> QAModel:
    torch.manual_seed(config.seed)
    return QAModel(
        ModelConfig(
            vocab_size=vocab_size,
            hidden=config.hidden,
            blocks=config.blocks,
            heads=config.attention_heads,
            max_len=config.max_len,
            dropout=config.dropout,
        )
    )
