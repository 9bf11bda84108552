"""Shared transformer encoder with suspend/resume evaluation and scoring heads.

The encoder runs blocks 1..J for every segment, caches the block-J states,
and resumes through block I only for retained segments. All parameters,
including the retriever/reader/reranker head weights, live on one module so
a single checkpoint captures the whole model.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_MAGIC = b"DQA1"


class EncoderError(Exception):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    hidden: int = 32
    blocks: int = 4
    heads: int = 4
    max_len: int = 64
    dropout: float = 0.1

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise EncoderError("hidden size must be divisible by head count")


class SelfAttention(nn.Module):
    def __init__(self, hidden: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = hidden // heads
        self.query = nn.Linear(hidden, hidden)
        # A key bias shifts every attention logit of a query equally and
        # cancels in the softmax, leaving a parameter with zero gradient.
        self.key = nn.Linear(hidden, hidden, bias=False)
        self.value = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, hidden)
        self.drop = nn.Dropout(dropout)

    def forward(self, h, attn_mask):
        # h: [B, L, D]; attn_mask: [B, L] bool, True on real tokens
        b, l, d = h.shape
        def split(x):
            return x.view(b, l, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.query(h)), split(self.key(h)), split(self.value(h))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        neg = torch.finfo(h.dtype).min
        scores = scores.masked_fill(~attn_mask[:, None, None, :], neg)
        probs = self.drop(torch.softmax(scores, dim=-1))
        ctx = (probs @ v).transpose(1, 2).reshape(b, l, d)
        return self.out(ctx)

    def attention_probs(self, h, attn_mask):
        b, l, d = h.shape
        def split(x):
            return x.view(b, l, self.heads, self.head_dim).transpose(1, 2)

        q, k = split(self.query(h)), split(self.key(h))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        neg = torch.finfo(h.dtype).min
        scores = scores.masked_fill(~attn_mask[:, None, None, :], neg)
        return torch.softmax(scores, dim=-1)


class TransformerBlock(nn.Module):
    """Post-layer-norm residual block with a GELU feed-forward."""

    def __init__(self, hidden: int, heads: int, dropout: float):
        super().__init__()
        self.attn = SelfAttention(hidden, heads, dropout)
        self.norm1 = nn.LayerNorm(hidden)
        self.ff1 = nn.Linear(hidden, 4 * hidden)
        self.ff2 = nn.Linear(4 * hidden, hidden)
        self.norm2 = nn.LayerNorm(hidden)
        self.drop = nn.Dropout(dropout)

    def forward(self, h, attn_mask):
        h = self.norm1(h + self.drop(self.attn(h, attn_mask)))
        h = self.norm2(h + self.drop(self.ff2(F.gelu(self.ff1(h)))))
        return h


@dataclass
class EncoderState:
    """Activations cached at the deepest block evaluated so far."""

    hidden: torch.Tensor
    depth: int
    attn_mask: torch.Tensor


class QAModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.word_emb = nn.Embedding(c.vocab_size, c.hidden)
        self.type_emb = nn.Embedding(2, c.hidden)
        self.pos_emb = nn.Embedding(c.max_len, c.hidden)
        self.blocks = nn.ModuleList(
            TransformerBlock(c.hidden, c.heads, c.dropout) for _ in range(c.blocks)
        )
        # Retriever head: w_mu alignment, W_r projection, w_r output.
        self.retrieve_align = nn.Linear(c.hidden, 1, bias=False)
        self.retrieve_proj = nn.Linear(c.hidden, c.hidden, bias=False)
        self.retrieve_out = nn.Linear(c.hidden, 2, bias=False)
        # Reader head: start/end scoring vectors.
        self.start_scorer = nn.Linear(c.hidden, 1, bias=False)
        self.end_scorer = nn.Linear(c.hidden, 1, bias=False)
        # Reranker head: w_eta alignment, W_a projection, w_a output.
        self.rerank_align = nn.Linear(c.hidden, 1, bias=False)
        self.rerank_proj = nn.Linear(c.hidden, c.hidden, bias=False)
        self.rerank_out = nn.Linear(c.hidden, 1, bias=False)
        self.apply(self._init)

    @staticmethod
    def _init(module):
        if isinstance(module, (nn.Linear, nn.Embedding)):
            nn.init.normal_(module.weight, std=0.02)
            if isinstance(module, nn.Linear) and module.bias is not None:
                nn.init.zeros_(module.bias)

    @property
    def depth(self) -> int:
        return self.config.blocks

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def embed(self, input_ids: torch.Tensor, type_ids: torch.Tensor) -> torch.Tensor:
        if input_ids.min() < 0 or input_ids.max() >= self.config.vocab_size:
            raise EncoderError("input id out of vocabulary range")
        positions = torch.arange(input_ids.shape[1], device=input_ids.device)
        return (
            self.word_emb(input_ids)
            + self.type_emb(type_ids)
            + self.pos_emb(positions)[None, :, :]
        )

    def encode_until(
        self, h0: torch.Tensor, depth: int, attn_mask: torch.Tensor
    ) -> EncoderState:
        if not 0 <= depth <= self.config.blocks:
            raise EncoderError(f"depth {depth} outside [0, {self.config.blocks}]")
        h = h0
        for block in self.blocks[:depth]:
            h = block(h, attn_mask)
        return EncoderState(hidden=h, depth=depth, attn_mask=attn_mask)

    def resume_encode(self, state: EncoderState, depth: int) -> EncoderState:
        if depth < state.depth:
            raise EncoderError(f"cannot resume backwards ({state.depth} -> {depth})")
        if depth > self.config.blocks:
            raise EncoderError(f"depth {depth} exceeds block count")
        h = state.hidden
        for block in self.blocks[state.depth : depth]:
            h = block(h, state.attn_mask)
        return EncoderState(hidden=h, depth=depth, attn_mask=state.attn_mask)

    def forward_to(
        self, input_ids: torch.Tensor, type_ids: torch.Tensor, depth: int, pad_id: int = 0
    ) -> EncoderState:
        mask = input_ids != pad_id
        return self.encode_until(self.embed(input_ids, type_ids), depth, mask)


def save_checkpoint(model: QAModel, path) -> None:
    """Binary checkpoint: magic, JSON header (names/shapes/dtype/config),
    then raw float32 little-endian tensor data in header order."""
    tensors = {name: p.detach().to(torch.float32) for name, p in model.state_dict().items()}
    header = {
        "config": model.config.__dict__,
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors.items()],
        "dtype": "float32le",
    }
    head_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(head_bytes)))
        fh.write(head_bytes)
        for t in tensors.values():
            fh.write(t.contiguous().numpy().astype("<f4").tobytes())


def load_checkpoint(path) -> QAModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise EncoderError(f"{path}: bad checkpoint magic {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        config = ModelConfig(**header["config"])
        model = QAModel(config)
        state = {}
        import numpy as np

        for entry in header["tensors"]:
            shape = entry["shape"]
            count = int(math.prod(shape)) if shape else 1
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise EncoderError(f"{path}: truncated tensor {entry['name']!r}")
            arr = np.frombuffer(buf, dtype="<f4").reshape(shape)
            state[entry["name"]] = torch.from_numpy(arr.copy())
        expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
        got = {k: tuple(v.shape) for k, v in state.items()}
        if expected != got:
            raise EncoderError(f"{path}: checkpoint shapes do not match config")
        model.load_state_dict(state)
    return model


def gradient_check(
    loss_fn, model: QAModel, eps: float = 1e-5, tolerance: float = 1e-4
) -> dict:
    """Analytic gradients vs central finite differences, per parameter tensor.

    loss_fn() must rebuild the loss from the model's current parameters.
    The model must already be in float64 for the differences to resolve.
    """
    model.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    report = {"tensors": {}, "passed": True, "tolerance": tolerance}
    for name, param in model.named_parameters():
        analytic = (
            param.grad.detach().clone()
            if param.grad is not None
            else torch.zeros_like(param)
        )
        numeric = torch.zeros_like(param)
        flat = param.data.view(-1)
        nflat = numeric.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            with torch.no_grad():
                hi = loss_fn().item()
            flat[i] = orig - eps
            with torch.no_grad():
                lo = loss_fn().item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2 * eps)
        # Error relative to the tensor's gradient scale; a purely elementwise
        # ratio would amplify float64 roundoff on near-zero entries.
        scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-8)
        max_rel = ((analytic - numeric).abs().max() / scale).item()
        ok = max_rel < tolerance
        report["tensors"][name] = {"max_rel_error": max_rel, "passed": ok}
        if not ok:
            report["passed"] = False
    return report
