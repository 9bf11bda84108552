"""Deterministic loss builders for finite-difference gradient verification.

Candidate spans and all labels are frozen up front so the loss surface is
smooth in the parameters; only the continuous scoring paths are exercised.
"""

from __future__ import annotations

import torch

from .encoder import QAModel
from .heads import reader_scores, rerank_score, retrieve_score
from .train import loss_read, loss_rerank, loss_retrieve


def randomize(model: QAModel, std: float = 0.3, seed: int = 0) -> QAModel:
    """Re-draw all parameters at a scale where attention differentiates.

    The training-time init (std 0.02) leaves softmax attention near uniform,
    which pushes query/key gradients below what central differences at
    eps=1e-5 can resolve in float64.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)
    return model


def make_batch(model: QAModel, seed: int = 0, batch: int = 2):
    """Random input ids with a trailing PAD region and synthetic labels."""
    cfg = model.config
    gen = torch.Generator().manual_seed(seed)
    length = cfg.max_len
    ids = torch.randint(4, cfg.vocab_size, (batch, length), generator=gen)
    ids[:, 0] = 2  # CLS
    pad_from = length - 3
    ids[:, pad_from:] = 0
    type_ids = torch.zeros(batch, length, dtype=torch.long)
    type_ids[:, length // 2 : pad_from] = 1

    y_r = torch.zeros(batch, 2, dtype=torch.float64)
    y_r[:, 0] = 1.0
    y_s = torch.zeros(batch, length, dtype=torch.float64)
    y_e = torch.zeros(batch, length, dtype=torch.float64)
    y_s[:, length // 2] = 1.0
    y_e[:, length // 2 + 1] = 1.0
    spans = [(length // 2, length // 2 + 1), (length // 2 + 2, length // 2 + 2)]
    y_hard = torch.tensor([1.0, 0.0], dtype=torch.float64)
    y_soft = torch.tensor([1.0, 0.5], dtype=torch.float64)
    return ids, type_ids, y_r, y_s, y_e, spans, y_hard, y_soft


def joint_loss_builder(
    model: QAModel, seed: int = 0, which: str = "joint", depth: int | None = None
):
    """Returns a zero-argument loss function over the model's parameters."""
    ids, type_ids, y_r, y_s, y_e, spans, y_hard, y_soft = make_batch(model, seed)
    if depth is None:
        depth = max(model.depth - 1, 0)

    def retrieve_loss():
        state = model.forward_to(ids, type_ids, depth)
        scores, _ = retrieve_score(model, state.hidden, state.attn_mask)
        return loss_retrieve(scores, y_r)

    def read_loss():
        state = model.forward_to(ids, type_ids, model.depth)
        start, end = reader_scores(model, state.hidden)
        return loss_read(start, end, y_s, y_e)

    def rerank_loss():
        state = model.forward_to(ids, type_ids, model.depth)
        losses = []
        for row in range(ids.shape[0]):
            scores = rerank_score(model, state.hidden[row], spans)
            losses.append(loss_rerank(scores, y_hard, y_soft))
        return torch.stack(losses).mean()

    table = {
        "retrieve": retrieve_loss,
        "read": read_loss,
        "rerank": rerank_loss,
        "joint": lambda: retrieve_loss() + read_loss() + rerank_loss(),
    }
    if which not in table:
        raise ValueError(f"unknown loss {which!r}")
    return table[which]
