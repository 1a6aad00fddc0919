"""Sequence layout, history packing, leak freedom, and masking plans."""

import numpy as np
import pytest

from expertrank.assembly import (ColdExpertError, MaskingPlan, PretrainExample,
                                 SequenceBuilder, apply_plan, build_pretrain_examples,
                                 example_rng, load_examples, make_pretrain_plan,
                                 maskable_positions, save_examples, span_positions)
from expertrank.corpus import (ExpertProfile, HistoryItem, QuestionRecord, SyntheticConfig,
                               build_corpus, generate_synthetic)
from expertrank.vocab import HSEP, MASK, PAD, SEP, build_vocab


def _fixture():
    questions = {
        1: QuestionRecord(1, "a b c", None, 1000.0, 0),
        2: QuestionRecord(2, "d e", None, 500.0, 0),
        3: QuestionRecord(3, "f g h", None, 600.0, 0),
    }
    vocab = build_vocab([q.title for q in questions.values()], min_freq=1)
    profile = ExpertProfile(7, 7, [HistoryItem(2, 4, 510.0), HistoryItem(3, 9, 610.0)])
    builder = SequenceBuilder(vocab, questions, max_len=32, title_cap=8)
    return questions, vocab, profile, builder


def test_layout_matches_contract():
    questions, vocab, profile, builder = _fixture()
    seq = builder.assemble(profile, questions[1], as_of=1000.0)
    ids = {w: vocab.token_to_id[w] for w in "abcdefgh"}
    assert seq.token_ids == [PAD, ids["a"], ids["b"], ids["c"], SEP,
                             ids["d"], ids["e"], HSEP,
                             ids["f"], ids["g"], ids["h"], SEP]
    assert seq.segment_ids == [0] * 5 + [1] * 7
    assert seq.vote_ids == [PAD, PAD, PAD, PAD, PAD, 4, 4, PAD, 9, 9, 9, PAD]
    assert seq.position_ids == list(range(12))
    assert seq.expert_id == 7
    assert seq.question_spans == [(1, 4, 1), (5, 7, 2), (8, 11, 3)]
    assert seq.attention_len == 12


def test_lane_lengths_equal_and_sep_counts():
    questions, vocab, profile, builder = _fixture()
    seq = builder.assemble(profile, questions[1], as_of=1000.0)
    n = len(seq.token_ids)
    assert len(seq.segment_ids) == len(seq.position_ids) == len(seq.vote_ids) == n
    assert seq.token_ids.count(SEP) == 2
    assert seq.token_ids.count(HSEP) == len(seq.history_spans) - 1


def test_single_history_no_hsep():
    questions, vocab, profile, builder = _fixture()
    seq = builder.assemble(profile, questions[1], as_of=600.0)  # only q2 usable
    assert seq.token_ids.count(HSEP) == 0
    assert len(seq.history_spans) == 1


def test_vote_pad_exactly_on_structural_and_target():
    questions, vocab, profile, builder = _fixture()
    seq = builder.assemble(profile, questions[1], as_of=1000.0)
    in_history = {p for s, e, _ in seq.history_spans for p in range(s, e)}
    for pos, vote in enumerate(seq.vote_ids):
        assert (vote == PAD) == (pos not in in_history)


def test_packing_keeps_most_recent_that_fit():
    # 50 histories of 8 tokens, 3-token target, max_len 64 -> floor(58/9) = 6 kept
    words = [f"w{i}" for i in range(8)]
    questions = {100: QuestionRecord(100, "t0 t1 t2", None, 10_000.0, 0)}
    history = []
    for i in range(50):
        qid = i + 1
        questions[qid] = QuestionRecord(qid, " ".join(words), None, float(i), 0)
        history.append(HistoryItem(qid, 5, float(i) + 0.5))
    vocab = build_vocab([q.title for q in questions.values()], min_freq=1)
    builder = SequenceBuilder(vocab, questions, max_len=64, title_cap=16)
    seq = builder.assemble(ExpertProfile(0, 0, history), questions[100], as_of=10_000.0)
    kept = [qid for _, _, qid in seq.history_spans]
    assert len(kept) == (64 - 6) // 9 == 6
    assert kept == [45, 46, 47, 48, 49, 50]  # newest six, oldest dropped first
    assert seq.attention_len <= 64


def test_leak_freedom_future_history_never_appears():
    questions, vocab, profile, builder = _fixture()
    planted = ExpertProfile(7, 7, profile.history + [HistoryItem(1, 8, 1000.0)])
    seq = builder.assemble(planted, questions[1], as_of=1000.0)
    assert all(qid != 1 for _, _, qid in seq.history_spans)
    seq2 = builder.assemble(planted, questions[1], as_of=999.0)
    assert [qid for _, _, qid in seq2.history_spans] == [2, 3]


def test_cold_expert_raises_and_fallback_shape():
    questions, vocab, profile, builder = _fixture()
    with pytest.raises(ColdExpertError):
        builder.assemble(profile, questions[1], as_of=0.0)
    seq = builder.assemble_cold(7, questions[1])
    assert seq.is_fallback
    assert seq.token_ids[-2:] == [SEP, SEP]
    assert seq.history_spans == []
    assert all(v == PAD for v in seq.vote_ids)


def test_title_cap_truncates():
    questions = {1: QuestionRecord(1, " ".join(f"x{i}" for i in range(30)), None, 100.0, 0),
                 2: QuestionRecord(2, "y y", None, 10.0, 0)}
    vocab = build_vocab([q.title for q in questions.values()], min_freq=1)
    builder = SequenceBuilder(vocab, questions, max_len=64, title_cap=4)
    profile = ExpertProfile(0, 0, [HistoryItem(2, 3, 11.0)])
    seq = builder.assemble(profile, questions[1], as_of=100.0)
    start, end, _ = seq.target_span
    assert end - start == 4


# ---------------------------------------------------------------------------
# Masking plans
# ---------------------------------------------------------------------------

def _assembled():
    questions, vocab, profile, builder = _fixture()
    return vocab, builder.assemble(profile, questions[1], as_of=1000.0)


def test_plan_never_touches_structural_or_target():
    vocab, seq = _assembled()
    protected = {0}  # expert-ID slot
    protected |= {p for p, t in enumerate(seq.token_ids) if t in (SEP, HSEP)}
    protected |= set(range(seq.target_span[0], seq.target_span[1]))
    for trial in range(200):
        rng = np.random.default_rng(trial)
        plan = make_pretrain_plan(seq, 0.4, 0.5, rng, vote_class=6, vocab_size=len(vocab))
        touched = set(plan.word_mask_positions) | set(span_positions(seq, plan)) \
            | set(plan.replacements)
        assert not touched & protected


def test_question_span_masks_whole_span_only():
    vocab, seq = _assembled()
    seen_span = False
    for trial in range(200):
        rng = np.random.default_rng(trial)
        plan = make_pretrain_plan(seq, 0.15, 0.9, rng, vote_class=6, vocab_size=len(vocab))
        if plan.question_mask_span is None:
            continue
        seen_span = True
        start, end, _ = seq.history_spans[plan.question_mask_span]
        positions = span_positions(seq, plan)
        assert positions == list(range(start, end))
        assert not set(positions) & set(plan.word_mask_positions)
    assert seen_span


def test_question_ratio_zero_never_masks_spans():
    vocab, seq = _assembled()
    for trial in range(100):
        rng = np.random.default_rng(trial)
        plan = make_pretrain_plan(seq, 0.15, 0.0, rng, vote_class=6, vocab_size=len(vocab))
        assert plan.question_mask_span is None


def test_plan_deterministic_under_seed():
    vocab, seq = _assembled()
    one = make_pretrain_plan(seq, 0.3, 0.4, np.random.default_rng(55), 6, len(vocab))
    two = make_pretrain_plan(seq, 0.3, 0.4, np.random.default_rng(55), 6, len(vocab))
    assert one == two


def test_word_mask_fraction_near_ratio():
    vocab, seq = _assembled()
    rng = np.random.default_rng(0)
    masked = total = 0
    for _ in range(2000):
        plan = make_pretrain_plan(seq, 0.15, 0.0, rng, vote_class=6, vocab_size=len(vocab))
        masked += len(plan.word_mask_positions)
        total += len(maskable_positions(seq))
    assert abs(masked / total - 0.15) < 0.02


def test_replacement_mix_is_80_10_10():
    vocab, seq = _assembled()
    rng = np.random.default_rng(1)
    n_mask = n_random = n_keep = 0
    for _ in range(3000):
        plan = make_pretrain_plan(seq, 0.5, 0.0, rng, vote_class=6, vocab_size=len(vocab))
        for pos in plan.word_mask_positions:
            tok = plan.replacements.get(pos)
            if tok is None:
                n_keep += 1
            elif tok == MASK:
                n_mask += 1
            else:
                assert 5 <= tok < len(vocab)
                n_random += 1
    total = n_mask + n_random + n_keep
    assert abs(n_mask / total - 0.8) < 0.03
    assert abs(n_random / total - 0.1) < 0.02
    assert abs(n_keep / total - 0.1) < 0.02


def test_apply_plan_substitutes_only_planned_positions():
    vocab, seq = _assembled()
    plan = make_pretrain_plan(seq, 0.5, 0.5, np.random.default_rng(3), 6, len(vocab))
    out = apply_plan(seq, plan)
    for pos, tok in enumerate(seq.token_ids):
        if pos in plan.replacements:
            assert out[pos] == plan.replacements[pos]
        else:
            assert out[pos] == tok


# ---------------------------------------------------------------------------
# Example building + serialization
# ---------------------------------------------------------------------------

def _small_corpus():
    cfg = SyntheticConfig(experts=25, topics=3, questions=80, seed=13)
    corpus = build_corpus(*generate_synthetic(cfg))
    vocab = build_vocab([q.title for q in corpus.questions.values()], min_freq=1)
    builder = SequenceBuilder(vocab, corpus.questions, max_len=96, title_cap=12)
    return corpus, vocab, builder


def test_build_pretrain_examples_leak_free_and_train_window_only():
    corpus, vocab, builder = _small_corpus()
    examples, skipped = build_pretrain_examples(corpus, builder, 0.15, 0.15, seed=9)
    assert examples
    train_end = max(corpus.questions[q].creation_time for q in corpus.split.train)
    for ex in examples:
        target_qid = ex.seq.target_span[2]
        target_time = corpus.questions[target_qid].creation_time
        assert target_time <= train_end
        for _, _, qid in ex.seq.history_spans:
            # the history answer predates the target question
            answered = [h for h in corpus.profiles[ex.seq.expert_id].history
                        if h.question_id == qid]
            assert min(a.answer_time for a in answered) < target_time


def test_build_pretrain_examples_deterministic():
    corpus, vocab, builder = _small_corpus()
    one, _ = build_pretrain_examples(corpus, builder, 0.15, 0.15, seed=9)
    two, _ = build_pretrain_examples(corpus, builder, 0.15, 0.15, seed=9)
    assert one == two


def test_example_serialization_roundtrip(tmp_path):
    corpus, vocab, builder = _small_corpus()
    examples, _ = build_pretrain_examples(corpus, builder, 0.2, 0.3, seed=4)
    path = tmp_path / "examples.jsonl"
    save_examples(examples[:50], path)
    back = load_examples(path)
    assert back == examples[:50]


def test_example_rng_is_stable():
    a = example_rng(5, 10, 3).integers(0, 1_000_000, size=4)
    b = example_rng(5, 10, 3).integers(0, 1_000_000, size=4)
    c = example_rng(5, 10, 4).integers(0, 1_000_000, size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
