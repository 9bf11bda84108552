import math

import numpy as np
import pytest
import torch

from deskqa.encoder import (
    EncoderError,
    ModelConfig,
    QAModel,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
)
from deskqa.gradcheck import joint_loss_builder, make_batch, randomize


def small_model(dropout=0.0, hidden=8, blocks=2, max_len=16, vocab=32, heads=2):
    torch.manual_seed(0)
    return QAModel(
        ModelConfig(
            vocab_size=vocab, hidden=hidden, blocks=blocks, heads=heads,
            max_len=max_len, dropout=dropout,
        )
    )


def rand_inputs(model, batch=2, pad_tail=3, seed=0):
    gen = torch.Generator().manual_seed(seed)
    cfg = model.config
    ids = torch.randint(4, cfg.vocab_size, (batch, cfg.max_len), generator=gen)
    ids[:, cfg.max_len - pad_tail :] = 0
    types = torch.zeros_like(ids)
    types[:, cfg.max_len // 2 :] = 1
    types[:, cfg.max_len - pad_tail :] = 0
    return ids, types


class TestEmbed:
    def test_zero_tables_give_zero(self):
        model = small_model()
        with torch.no_grad():
            model.word_emb.weight.zero_()
            model.type_emb.weight.zero_()
            model.pos_emb.weight.zero_()
        ids, types = rand_inputs(model)
        assert torch.all(model.embed(ids, types) == 0)

    def test_elementwise_addition(self):
        model = small_model(hidden=2, heads=2, vocab=8, max_len=4)
        with torch.no_grad():
            model.word_emb.weight.zero_()
            model.type_emb.weight.zero_()
            model.pos_emb.weight.zero_()
            model.word_emb.weight[5] = torch.tensor([1.0, 0.0])
            model.type_emb.weight[0] = torch.tensor([0.0, 1.0])
            model.pos_emb.weight[0] = torch.tensor([1.0, 1.0])
        ids = torch.tensor([[5, 0, 0, 0]])
        types = torch.zeros_like(ids)
        h0 = model.embed(ids, types)
        assert torch.allclose(h0[0, 0], torch.tensor([2.0, 2.0]))

    def test_position_rows_stay_put_under_permutation(self):
        model = small_model()
        ids, types = rand_inputs(model, pad_tail=0)
        swapped = ids.clone()
        swapped[:, [1, 2]] = swapped[:, [2, 1]]
        h0 = model.embed(ids, types)
        h0s = model.embed(swapped, types)
        pos = model.pos_emb.weight
        # Word contributions move with the tokens; position rows do not.
        assert torch.allclose(h0[:, 1] - pos[1], h0s[:, 2] - pos[2])

    def test_out_of_range_id(self):
        model = small_model()
        ids = torch.full((1, model.config.max_len), model.config.vocab_size)
        with pytest.raises(EncoderError):
            model.embed(ids, torch.zeros_like(ids))


class TestEncodeUntil:
    def test_depth_zero_identity(self):
        model = small_model()
        ids, types = rand_inputs(model)
        h0 = model.embed(ids, types)
        state = model.encode_until(h0, 0, ids != 0)
        assert torch.equal(state.hidden, h0)

    def test_depth_out_of_range(self):
        model = small_model()
        ids, types = rand_inputs(model)
        with pytest.raises(EncoderError):
            model.forward_to(ids, types, model.config.blocks + 1)

    def test_suspend_resume_bit_identical(self):
        model = small_model(blocks=4)
        model.eval()
        ids, types = rand_inputs(model)
        with torch.no_grad():
            for j in range(5):
                full = model.forward_to(ids, types, 4)
                part = model.forward_to(ids, types, j)
                resumed = model.resume_encode(part, 4)
                assert torch.equal(full.hidden, resumed.hidden)

    def test_resume_backwards_rejected(self):
        model = small_model()
        ids, types = rand_inputs(model)
        state = model.forward_to(ids, types, 2)
        with pytest.raises(EncoderError):
            model.resume_encode(state, 1)


def _reference_block_forward(block, h, mask):
    """Straightforward numpy re-implementation of one post-LN block."""
    def lin(layer, x):
        w = layer.weight.detach().numpy()
        b = layer.bias.detach().numpy() if layer.bias is not None else 0.0
        return x @ w.T + b

    def layer_norm(layer, x):
        mu = x.mean(-1, keepdims=True)
        var = x.var(-1, keepdims=True)
        y = (x - mu) / np.sqrt(var + layer.eps)
        return y * layer.weight.detach().numpy() + layer.bias.detach().numpy()

    def gelu(x):
        from scipy.special import erf

        return 0.5 * x * (1 + erf(x / math.sqrt(2)))

    attn = block.attn
    heads, hd = attn.heads, attn.head_dim
    L, D = h.shape
    q = lin(attn.query, h).reshape(L, heads, hd)
    k = lin(attn.key, h).reshape(L, heads, hd)
    v = lin(attn.value, h).reshape(L, heads, hd)
    ctx = np.zeros((L, heads, hd))
    for hh in range(heads):
        scores = q[:, hh] @ k[:, hh].T / math.sqrt(hd)
        scores[:, ~mask] = -1e30
        scores = scores - scores.max(-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(-1, keepdims=True)
        ctx[:, hh] = probs @ v[:, hh]
    attended = lin(attn.out, ctx.reshape(L, D))
    h = layer_norm(block.norm1, h + attended)
    ff = lin(block.ff2, gelu(lin(block.ff1, h)))
    return layer_norm(block.norm2, h + ff)


class TestReferenceForward:
    def test_block_matches_independent_implementation(self):
        model = small_model().double()
        model.eval()
        ids, types = rand_inputs(model, batch=1)
        mask = ids != 0
        with torch.no_grad():
            h0 = model.embed(ids, types)
            h1 = model.blocks[0](h0, mask)
        ref = _reference_block_forward(
            model.blocks[0].double(), h0[0].numpy(), mask[0].numpy()
        )
        assert np.abs(h1[0].numpy() - ref).max() < 1e-10


class TestNumericInvariants:
    def test_attention_rows_sum_to_one(self):
        model = small_model()
        model.eval()
        ids, types = rand_inputs(model)
        mask = ids != 0
        with torch.no_grad():
            h0 = model.embed(ids, types)
            probs = model.blocks[0].attn.attention_probs(h0, mask)
        sums = probs.sum(dim=-1)
        assert torch.all((sums - 1).abs() < 1e-6)
        # Probability never leaks onto PAD keys.
        assert torch.all(probs[..., ~mask[0]][0] < 1e-6)

    def test_layer_norm_statistics(self):
        model = small_model()
        model.eval()
        ids, types = rand_inputs(model)
        mask = ids != 0
        with torch.no_grad():
            # Scale well above the norm's eps so the eps term is negligible.
            h0 = model.embed(ids, types) * 1000
            block = model.blocks[0]
            pre = h0 + block.attn(h0, mask)
            normed = (pre - pre.mean(-1, keepdim=True)) / torch.sqrt(
                pre.var(-1, unbiased=False, keepdim=True) + block.norm1.eps
            )
        assert normed.mean(-1).abs().max() < 1e-6
        assert (normed.var(-1, unbiased=False) - 1).abs().max() < 1e-6


class TestBackward:
    def test_embedding_gradient_counts_occurrences(self):
        model = small_model()
        with torch.no_grad():
            model.word_emb.weight.zero_()
            model.type_emb.weight.zero_()
            model.pos_emb.weight.zero_()
        ids = torch.tensor([[5, 5, 6, 0]])
        types = torch.zeros_like(ids)
        loss = model.embed(ids, types).sum()
        loss.backward()
        grad = model.word_emb.weight.grad
        hidden = model.config.hidden
        assert torch.allclose(grad[5], torch.full((hidden,), 2.0))
        assert torch.allclose(grad[6], torch.full((hidden,), 1.0))
        assert torch.all(grad[7] == 0)

    def test_constant_loss_zero_gradients(self):
        model = small_model()
        ids, types = rand_inputs(model)
        out = model.forward_to(ids, types, 2).hidden
        loss = (out * 0).sum()
        loss.backward()
        for p in model.parameters():
            if p.grad is not None:
                assert torch.all(p.grad == 0)

    def test_second_backward_without_forward_errors(self):
        model = small_model()
        ids, types = rand_inputs(model)
        loss = model.forward_to(ids, types, 2).hidden.sum()
        loss.backward()
        with pytest.raises(RuntimeError):
            loss.backward()


class TestGradientCheck:
    def test_random_tiny_model_passes(self):
        model = randomize(small_model().double(), seed=2)
        model.eval()
        loss_fn = joint_loss_builder(model, seed=1)
        report = gradient_check(loss_fn, model, eps=1e-5, tolerance=1e-4)
        assert report["passed"], {
            k: v for k, v in report["tensors"].items() if not v["passed"]
        }

    def test_corrupted_gradient_detected(self):
        model = randomize(small_model().double(), seed=2)
        model.eval()
        # Fault injection: double the analytic gradient of one tensor.
        handle = model.start_scorer.weight.register_hook(lambda g: g * 2)
        try:
            loss_fn = joint_loss_builder(model, seed=1)
            report = gradient_check(loss_fn, model, eps=1e-5, tolerance=1e-4)
        finally:
            handle.remove()
        assert not report["passed"]
        failing = [k for k, v in report["tensors"].items() if not v["passed"]]
        assert failing == ["start_scorer.weight"]


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = small_model()
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        for (n1, p1), (n2, p2) in zip(
            model.state_dict().items(), loaded.state_dict().items()
        ):
            assert n1 == n2
            assert torch.equal(p1, p2)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(EncoderError):
            load_checkpoint(path)

    def test_save_deterministic(self, tmp_path):
        model = small_model()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(model, p1)
        save_checkpoint(model, p2)
        assert p1.read_bytes() == p2.read_bytes()
