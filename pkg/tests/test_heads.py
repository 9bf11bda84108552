import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from deskqa.encoder import ModelConfig, QAModel
from deskqa.heads import (
    CandidateAnswer,
    HeadsError,
    build_rerank_labels,
    exact_match,
    find_gold_span,
    propose_candidates,
    rerank_score,
    retrieve_score,
    select_segments,
    span_nms,
    token_f1,
)
from deskqa.preprocess import Segment


def model_with(hidden, **overrides):
    torch.manual_seed(0)
    model = QAModel(
        ModelConfig(vocab_size=16, hidden=hidden, blocks=2, heads=1, max_len=8, dropout=0.0)
    )
    with torch.no_grad():
        for name, value in overrides.items():
            getattr(model, name).weight.copy_(torch.tensor(value, dtype=torch.float32))
    return model


def make_segment(ctx_tokens, y_r=None, context_start=4):
    n = len(ctx_tokens)
    return Segment(
        instance_id="i",
        index=0,
        window_start=0,
        input_ids=[2] + [5] * (context_start - 2) + [3] + [6] * n + [3],
        type_ids=[0] * context_start + [1] * (n + 1),
        context_span=(context_start, context_start + n - 1),
        context_tokens=tuple(ctx_tokens),
        y_r=y_r,
    )


class TestRetrieveScore:
    def test_zero_alignment_gives_mean_pooling(self):
        model = model_with(2, retrieve_align=[[0.0, 0.0]])
        h = torch.tensor([[[1.0, 0.0], [0.0, 1.0], [9.0, 9.0]]])
        mask = torch.tensor([[True, True, False]])
        with torch.no_grad():
            model.retrieve_proj.weight.copy_(torch.eye(2))
            model.retrieve_out.weight.copy_(torch.tensor([[1.0, 0.0], [0.0, 1.0]]))
        scores, probs = retrieve_score(model, h, mask)
        expected = math.tanh(0.5)
        assert torch.allclose(scores, torch.tensor([[expected, expected]]), atol=1e-6)
        assert abs(probs.item() - 0.5) < 1e-6

    def test_zero_projection_gives_half_probability(self):
        model = model_with(2)
        with torch.no_grad():
            model.retrieve_proj.weight.zero_()
        h = torch.randn(1, 4, 2)
        mask = torch.ones(1, 4, dtype=torch.bool)
        scores, probs = retrieve_score(model, h, mask)
        assert torch.allclose(scores, torch.zeros(1, 2), atol=1e-7)
        assert abs(probs.item() - 0.5) < 1e-7

    def test_all_pad_rejected(self):
        model = model_with(2)
        h = torch.zeros(1, 3, 2)
        mask = torch.zeros(1, 3, dtype=torch.bool)
        with pytest.raises(HeadsError):
            retrieve_score(model, h, mask)


class TestSelectSegments:
    def test_n_covers_all(self):
        segs = [make_segment(["a"], (0, 1)) for _ in range(3)]
        assert select_segments(segs, [0.5, 0.1, 0.9], 5, train=False) == [0, 1, 2]

    def test_gold_substitution_in_train_mode(self):
        segs = [
            make_segment(["a"], (0, 1)),
            make_segment(["a"], (0, 1)),
            make_segment(["a"], (1, 0)),
        ]
        assert select_segments(segs, [0.9, 0.8, 0.1], 2, train=True) == [0, 2]

    def test_no_substitution_at_inference(self):
        segs = [
            make_segment(["a"], (0, 1)),
            make_segment(["a"], (0, 1)),
            make_segment(["a"], (1, 0)),
        ]
        assert select_segments(segs, [0.9, 0.8, 0.1], 2, train=False) == [0, 1]

    def test_tie_break_lower_index(self):
        segs = [make_segment(["a"], (0, 1)) for _ in range(3)]
        assert select_segments(segs, [0.5, 0.5, 0.5], 2, train=False) == [0, 1]

    @settings(max_examples=100, deadline=None)
    @given(
        probs=st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=10),
        gold=st.lists(st.booleans(), min_size=1, max_size=10),
        n=st.integers(1, 5),
    )
    def test_train_mode_keeps_a_positive_when_one_exists(self, probs, gold, n):
        k = min(len(probs), len(gold))
        probs, gold = probs[:k], gold[:k]
        segs = [make_segment(["a"], (1, 0) if g else (0, 1)) for g in gold]
        picked = select_segments(segs, probs, n, train=True)
        if any(gold):
            assert any(segs[i].is_gold for i in picked)
        assert len(picked) == min(n, k)


class TestProposeCandidates:
    def test_hand_example(self):
        start = torch.tensor([0.0] * 4 + [0.0, 3.0, 1.0])
        end = torch.tensor([0.0] * 4 + [0.0, 1.0, 4.0])
        got = propose_candidates(start, end, (4, 6), m=2, max_len=2)
        assert [(a, b) for a, b, _ in got] == [(5, 6), (6, 6)]
        assert got[0][2] == pytest.approx(7.0)
        assert got[1][2] == pytest.approx(5.0)

    def test_m_exceeding_span_count(self):
        start = torch.zeros(6)
        end = torch.zeros(6)
        got = propose_candidates(start, end, (4, 5), m=100, max_len=2)
        assert len(got) == 3  # (4,4), (4,5), (5,5)

    def test_tie_break_lexicographic(self):
        start = torch.zeros(8)
        end = torch.zeros(8)
        got = propose_candidates(start, end, (4, 6), m=3, max_len=3)
        assert [(a, b) for a, b, _ in got] == [(4, 4), (4, 5), (4, 6)]

    def test_constant_shift_preserves_ranking(self):
        gen = torch.Generator().manual_seed(3)
        start = torch.randn(10, generator=gen)
        end = torch.randn(10, generator=gen)
        base = propose_candidates(start, end, (2, 8), m=5, max_len=4)
        shifted = propose_candidates(start + 7.5, end, (2, 8), m=5, max_len=4)
        assert [(a, b) for a, b, _ in base] == [(a, b) for a, b, _ in shifted]

    @settings(max_examples=100, deadline=None)
    @given(
        length=st.integers(1, 24),
        m=st.integers(1, 10),
        max_len=st.integers(1, 6),
        seed=st.integers(0, 1000),
    )
    def test_matches_brute_force(self, length, m, max_len, seed):
        gen = torch.Generator().manual_seed(seed)
        lo = 3
        start = torch.randn(lo + length, generator=gen)
        end = torch.randn(lo + length, generator=gen)
        span = (lo, lo + length - 1)
        got = propose_candidates(start, end, span, m, max_len)
        brute = sorted(
            (
                (a, b, float(start[a] + end[b]))
                for a in range(lo, lo + length)
                for b in range(a, min(a + max_len - 1, lo + length - 1) + 1)
            ),
            key=lambda t: (-t[2], t[0], t[1]),
        )[:m]
        assert [(a, b) for a, b, _ in got] == [(a, b) for a, b, _ in brute]


def reference_nms(spans, scores, m_star):
    """Line-by-line re-execution of the suppression loop."""
    pool = list(range(len(spans)))
    kept = []
    while pool and len(kept) < m_star:
        best = pool[0]
        for i in pool[1:]:
            if scores[i] > scores[best]:
                best = i
        kept.append(best)
        pool = [
            i
            for i in pool
            if i != best
            and spans[i][0] != spans[best][0]
            and spans[i][1] != spans[best][1]
        ]
    return kept


class TestSpanNMS:
    def test_shared_start_suppressed(self):
        spans = [(2, 5), (2, 7), (8, 9)]
        scores = [3.0, 2.5, 2.0]
        assert span_nms(spans, scores, 5) == [0, 2]

    def test_empty_input(self):
        assert span_nms([], [], 5) == []

    def test_threshold_one(self):
        spans = [(1, 2), (3, 4), (5, 6)]
        assert span_nms(spans, [1.0, 9.0, 2.0], 1) == [1]

    def test_top_candidate_survives(self):
        spans = [(1, 2), (1, 3), (2, 2)]
        scores = [5.0, 4.0, 3.0]
        assert span_nms(spans, scores, 5)[0] == 0

    @settings(max_examples=200, deadline=None)
    @given(
        n=st.integers(0, 50),
        m_star=st.integers(1, 10),
        seed=st.integers(0, 10_000),
    )
    def test_matches_reference(self, n, m_star, seed):
        import random

        rng = random.Random(seed)
        spans = [(rng.randint(0, 15), rng.randint(0, 15)) for _ in range(n)]
        spans = [(min(a, b), max(a, b)) for a, b in spans]
        scores = [rng.uniform(-5, 5) for _ in range(n)]
        kept = span_nms(spans, scores, m_star)
        assert kept == reference_nms(spans, scores, m_star)
        # Output pairwise non-overlapping.
        for i, a in enumerate(kept):
            for b in kept[i + 1 :]:
                assert spans[a][0] != spans[b][0]
                assert spans[a][1] != spans[b][1]


class TestRerankScore:
    def test_single_token_span_uses_that_row(self):
        model = model_with(2)
        h = torch.randn(6, 2)
        with torch.no_grad():
            expected = model.rerank_out(
                torch.tanh(model.rerank_proj(h[3]))
            ).squeeze()
            got = rerank_score(model, h, [(3, 3)])
        assert torch.allclose(got[0], expected)

    def test_zero_projection_gives_zero_scores(self):
        model = model_with(2)
        with torch.no_grad():
            model.rerank_proj.weight.zero_()
        h = torch.randn(6, 2)
        got = rerank_score(model, h, [(1, 3), (2, 2)])
        assert torch.allclose(got, torch.zeros(2), atol=1e-7)

    def test_hand_example_uniform_alignment(self):
        torch.manual_seed(0)
        model = QAModel(
            ModelConfig(vocab_size=16, hidden=1, blocks=2, heads=1, max_len=8, dropout=0.0)
        )
        with torch.no_grad():
            model.rerank_align.weight.zero_()
            model.rerank_proj.weight.fill_(1.0)
            model.rerank_out.weight.fill_(1.0)
        h = torch.tensor([[2.0], [4.0]])
        got = rerank_score(model, h, [(0, 1)])
        assert got[0].item() == pytest.approx(math.tanh(3.0), abs=1e-6)


class TestTextMetricsHelpers:
    def test_exact_match(self):
        assert exact_match("Baby Buggy", "baby buggy") == 1.0
        assert exact_match("buggy", "baby buggy") == 0.0

    def test_token_f1_partial(self):
        assert token_f1("collapsible baby buggy", "baby buggy") == pytest.approx(0.8)

    def test_token_f1_disjoint(self):
        assert token_f1("alpha beta", "gamma") == 0.0


class TestBuildRerankLabels:
    def _cands(self, texts, scores):
        return [
            CandidateAnswer(0, 4 + i, 4 + i, t, s)
            for i, (t, s) in enumerate(zip(texts, scores))
        ]

    def test_exact_candidate_gets_full_labels(self):
        seg = make_segment(["baby", "buggy"])
        cands = self._cands(["baby buggy"], [1.0])
        cands[0].end = 5
        _, y_hard, y_soft = build_rerank_labels(cands, seg, ["baby buggy"])
        assert y_hard == [1.0]
        assert y_soft == [1.0]

    def test_partial_candidate_soft_label(self):
        seg = make_segment(["collapsible", "baby", "buggy"])
        cands = self._cands(["collapsible baby buggy", "buggy"], [2.0, 1.0])
        _, y_hard, y_soft = build_rerank_labels(cands, seg, ["baby buggy"])
        # No exact candidate, so the weakest slot is gold-substituted.
        assert y_hard == [0.0, 1.0]
        assert y_soft[0] == pytest.approx(0.8)

    def test_gold_substitution_into_lowest_slot(self):
        seg = make_segment(["x", "baby", "buggy", "y"])
        cands = self._cands(["x", "y"], [3.0, 1.0])
        got, y_hard, _ = build_rerank_labels(cands, seg, ["baby buggy"])
        assert y_hard == [0.0, 1.0]
        assert got[1].text == "baby buggy"
        assert (got[1].start, got[1].end) == (5, 6)

    def test_no_gold_in_segment_leaves_candidates(self):
        seg = make_segment(["x", "y"])
        cands = self._cands(["x", "y"], [3.0, 1.0])
        got, y_hard, _ = build_rerank_labels(cands, seg, ["absent"])
        assert y_hard == [0.0, 0.0]
        assert [c.text for c in got] == ["x", "y"]


class TestFindGoldSpan:
    def test_first_occurrence(self):
        seg = make_segment(["a", "b", "a", "b"])
        assert find_gold_span(seg, ["a b"]) == (4, 5)

    def test_absent(self):
        seg = make_segment(["a", "b"])
        assert find_gold_span(seg, ["zzz"]) is None
