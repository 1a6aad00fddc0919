"""Corpus ingestion, vote normalization, profiles, splits, synthetic data."""

import io
import math

import mpmath
import numpy as np
import pytest

from expertrank.corpus import (AnswerRecord, DataError, QuestionRecord, SyntheticConfig,
                               VoteNormalizer, build_corpus, build_profiles,
                               chronological_split, corpus_stats, generate_synthetic,
                               load_corpus, normalize_votes, parse_posts, save_corpus)

POSTS_XML = """<?xml version="1.0" encoding="utf-8"?>
<posts>
  <row Id="1" PostTypeId="1" AcceptedAnswerId="11" CreationDate="2010-01-01T00:00:00.000" Score="3" Title="a b" OwnerUserId="900" />
  <row Id="2" PostTypeId="1" AcceptedAnswerId="13" CreationDate="2010-01-02T00:00:00.000" Score="0" Title="c d e" OwnerUserId="901" />
  <row Id="3" PostTypeId="1" CreationDate="2010-01-03T00:00:00.000" Score="1" Title="f" OwnerUserId="902" />
  <row Id="4" PostTypeId="1" CreationDate="2010-01-04T00:00:00.000" Score="1" OwnerUserId="903" />
  <row Id="11" PostTypeId="2" ParentId="1" CreationDate="2010-01-01T05:00:00.000" Score="7" OwnerUserId="100" />
  <row Id="12" PostTypeId="2" ParentId="1" CreationDate="2010-01-01T06:00:00.000" Score="-2" OwnerUserId="101" />
  <row Id="13" PostTypeId="2" ParentId="2" CreationDate="2010-01-02T05:00:00.000" Score="4" OwnerUserId="100" />
  <row Id="14" PostTypeId="2" ParentId="3" CreationDate="2010-01-03T05:00:00.000" Score="0" OwnerUserId="102" />
  <row Id="15" PostTypeId="2" ParentId="3" CreationDate="2010-01-03T06:00:00.000" Score="1" OwnerUserId="101" />
  <row Id="16" PostTypeId="2" ParentId="3" CreationDate="2010-01-03T07:00:00.000" Score="1" />
  <row Id="90" PostTypeId="4" CreationDate="2010-01-05T00:00:00.000" />
</posts>
"""


def test_parse_posts_field_mapping():
    questions, answers, stats = parse_posts(io.StringIO(POSTS_XML))
    q1 = next(q for q in questions if q.question_id == 1)
    assert q1.title == "a b"
    assert q1.raw_score == 3
    assert q1.accepted_answer_id == 11
    a13 = next(a for a in answers if a.answer_id == 13)
    assert a13.parent_question_id == 2
    assert a13.owner_expert_id == 100
    assert a13.raw_vote_score == 4


def test_parse_posts_counts_and_no_dangling_parents():
    questions, answers, stats = parse_posts(io.StringIO(POSTS_XML))
    assert stats.questions == 3 and len(questions) == 3
    assert stats.answers == 5 and len(answers) == 5
    assert stats.dropped_questions == 1  # missing Title
    assert stats.dropped_answers == 1    # missing OwnerUserId
    assert stats.skipped_other == 1      # PostTypeId=4
    qids = {q.question_id for q in questions}
    assert all(a.parent_question_id in qids for a in answers)


def test_parse_posts_ordering_is_time_parseable():
    questions, _, _ = parse_posts(io.StringIO(POSTS_XML))
    times = [q.creation_time for q in sorted(questions, key=lambda q: q.question_id)]
    assert times == sorted(times)


def test_parse_posts_malformed_xml_reports_line():
    bad = POSTS_XML.replace("</posts>", "<row broken")
    with pytest.raises(DataError, match="line"):
        parse_posts(io.StringIO(bad))


# ---------------------------------------------------------------------------
# Vote normalization
# ---------------------------------------------------------------------------

def test_normalize_endpoints_biology_range():
    norm = VoteNormalizer.fit([-8, 0, 287])
    assert norm.normalize(-8) == 1
    assert norm.normalize(287) == 10


def test_normalize_degenerate_range_maps_to_one():
    norm, values = normalize_votes([5, 5, 5])
    assert values == [1, 1, 1]


def test_normalize_raw_zero_matches_high_precision_pipeline():
    # independent recomputation of shift -> ln -> scale -> round at 50 digits
    mpmath.mp.dps = 50
    shifted = mpmath.mpf(0 - (-8) + 1)
    log_max = mpmath.log(mpmath.mpf(287 - (-8) + 1))
    value = 9 * mpmath.log(shifted) / log_max + 1
    expected = int(mpmath.floor(value + mpmath.mpf("0.5")))
    assert expected == 4
    norm = VoteNormalizer.fit([-8, 287])
    assert norm.normalize(0) == expected


def test_normalize_monotone_on_random_corpora():
    rng = np.random.default_rng(123)
    for _ in range(2000):
        raws = rng.integers(-50, 500, size=rng.integers(2, 40)).tolist()
        norm, values = normalize_votes(raws)
        order = np.argsort(raws, kind="stable")
        sorted_vals = [values[i] for i in order]
        assert all(a <= b for a, b in zip(sorted_vals, sorted_vals[1:]))
        if min(raws) < max(raws):
            assert norm.normalize(min(raws)) == 1
            assert norm.normalize(max(raws)) == 10


def test_normalize_frozen_stats_clamp_out_of_range():
    norm = VoteNormalizer.fit([0, 100])
    assert norm.normalize(-10) == 1
    assert norm.normalize(10_000) == 10


def test_normalize_votes_empty_list():
    with pytest.raises(DataError):
        normalize_votes([])


# ---------------------------------------------------------------------------
# Profiles
# ---------------------------------------------------------------------------

def _mk_question(qid, t, acc=None):
    return QuestionRecord(qid, f"title {qid}", acc, float(t), 0)


def test_profiles_history_chronological():
    questions = [_mk_question(1, 100), _mk_question(2, 200)]
    answers = [AnswerRecord(10, 2, 7, 1, 250.0), AnswerRecord(11, 1, 7, 2, 150.0)]
    norm = VoteNormalizer.fit([1, 2])
    profiles, id_map = build_profiles(questions, answers, norm)
    assert [h.question_id for h in profiles[0].history] == [1, 2]


def test_profiles_only_answering_experts_appear():
    questions = [_mk_question(1, 100)]
    answers = [AnswerRecord(10, 1, 5, 3, 110.0)]
    profiles, id_map = build_profiles(questions, answers, VoteNormalizer.fit([3]))
    assert len(profiles) == 1
    assert id_map == {5: 0}


def test_profiles_history_lengths_sum_to_answer_count():
    questions = [_mk_question(i, 100 * i) for i in range(1, 10)]
    rng = np.random.default_rng(5)
    answers = []
    owners = [70, 71, 72, 73]
    for i in range(9):
        owner = owners[int(rng.integers(4))]
        answers.append(AnswerRecord(50 + i, (i % 9) + 1, owner, int(rng.integers(0, 9)),
                                    100.0 * ((i % 9) + 1) + 5))
    norm = VoteNormalizer.fit([a.raw_vote_score for a in answers])
    profiles, _ = build_profiles(questions, answers, norm)
    assert sum(len(p.history) for p in profiles) == 9
    assert all(1 <= h.normalized_vote <= 10 for p in profiles for h in p.history)


def test_profiles_skip_dangling_answers():
    questions = [_mk_question(1, 100)]
    answers = [AnswerRecord(10, 99, 5, 3, 110.0)]  # parent 99 unknown
    profiles, _ = build_profiles(questions, answers, VoteNormalizer.fit([3]))
    assert profiles == []


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("n,expected", [(10, (8, 1, 1)), (100, (80, 10, 10)), (25, (20, 2, 3))])
def test_split_sizes(n, expected):
    questions = [_mk_question(i, i) for i in range(n)]
    split = chronological_split(questions)
    assert (len(split.train), len(split.validation), len(split.test)) == expected


def test_split_too_few_questions():
    with pytest.raises(DataError):
        chronological_split([_mk_question(i, i) for i in range(9)])


def test_split_partitions_and_orders():
    rng = np.random.default_rng(8)
    questions = [_mk_question(i, float(t)) for i, t in enumerate(rng.permutation(50))]
    split = chronological_split(questions)
    ids = split.train + split.validation + split.test
    assert sorted(ids) == sorted(q.question_id for q in questions)
    time_of = {q.question_id: q.creation_time for q in questions}
    assert max(time_of[q] for q in split.train) <= min(time_of[q] for q in split.validation)
    assert max(time_of[q] for q in split.validation) <= min(time_of[q] for q in split.test)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

def test_synthetic_deterministic():
    cfg = SyntheticConfig(experts=10, topics=2, questions=30, seed=99)
    assert generate_synthetic(cfg) == generate_synthetic(cfg)


def test_synthetic_zero_skill_variance_votes_constant_per_expert():
    cfg = SyntheticConfig(experts=8, topics=2, questions=40, seed=3, vote_noise=0.0,
                          main_skill_range=(0.5, 0.5), off_skill_range=(0.5, 0.5))
    _, answers = generate_synthetic(cfg)
    by_owner = {}
    for a in answers:
        by_owner.setdefault(a.owner_expert_id, set()).add(a.raw_vote_score)
    assert all(len(v) == 1 for v in by_owner.values())


def test_synthetic_planted_star_wins_its_topic_under_strong_separation():
    cfg = SyntheticConfig(experts=50, topics=5, questions=2000, seed=11,
                          planted_star_skill=0.99, pick_sharpness=9.0,
                          affinity_off=0.01, main_skill_range=(0.45, 0.8))
    questions, answers = generate_synthetic(cfg)
    answer_by_id = {a.answer_id: a for a in answers}
    star_hits = sum(answer_by_id[q.accepted_answer_id].owner_expert_id < cfg.topics
                    for q in questions)
    # expert t dominates topic t, so stars take >= 60% of all questions
    assert star_hits / len(questions) >= 0.6


def test_synthetic_token_rule_plants_exact_classes():
    cfg = SyntheticConfig(experts=12, topics=2, questions=60, seed=5, vote_rule="token")
    questions, answers = generate_synthetic(cfg)
    raws = [a.raw_vote_score for a in answers]
    assert min(raws) == 0 and max(raws) == 511
    norm = VoteNormalizer.fit(raws)
    title_of = {q.question_id: q.title for q in questions}
    for a in answers:
        grade_tok = next(w for w in title_of[a.parent_question_id].split() if w.startswith("grade"))
        assert norm.normalize(a.raw_vote_score) == int(grade_tok[5:])


def test_synthetic_shared_vocab_seed_keeps_titles_in_vocabulary():
    # zero-shot needs corpus B titles to encode mostly in-vocab under a
    # vocabulary built from corpus A
    from expertrank.vocab import UNK, build_vocab

    a = SyntheticConfig(experts=10, topics=3, questions=200, seed=1, vocab_seed=42)
    b = SyntheticConfig(experts=10, topics=3, questions=200, seed=2, vocab_seed=42)
    qa, _ = generate_synthetic(a)
    qb, _ = generate_synthetic(b)
    vocab = build_vocab([q.title for q in qa], min_freq=1)
    ids = [i for q in qb for i in vocab.encode(q.title)]
    assert ids.count(UNK) / len(ids) < 0.05


# ---------------------------------------------------------------------------
# Corpus build + round trip
# ---------------------------------------------------------------------------

def test_build_corpus_roundtrip_fixed_point(tmp_path):
    cfg = SyntheticConfig(experts=25, topics=3, questions=60, seed=21)
    questions, answers = generate_synthetic(cfg)
    corpus = build_corpus(questions, answers)
    save_corpus(corpus, tmp_path)
    back = load_corpus(tmp_path)
    assert back.questions == corpus.questions
    assert back.answers == corpus.answers
    assert back.profiles == corpus.profiles
    assert back.split == corpus.split
    assert back.normalizer == corpus.normalizer
    # serialize again: byte-identical files
    twice = tmp_path / "again"
    save_corpus(back, twice)
    for name in ("questions.tsv", "answers.tsv", "profiles.tsv", "split.txt"):
        assert (twice / name).read_bytes() == (tmp_path / name).read_bytes()


def test_build_corpus_normalizer_excludes_test_window():
    # plant an extreme vote on the last question; train-window stats must not see it
    cfg = SyntheticConfig(experts=25, topics=3, questions=100, seed=2)
    questions, answers = generate_synthetic(cfg)
    last_q = max(questions, key=lambda q: q.creation_time)
    for a in answers:
        if a.parent_question_id == last_q.question_id:
            a.raw_vote_score = 100_000
    corpus = build_corpus(questions, answers)
    assert corpus.normalizer.v_max_raw < 100_000


def test_corpus_stats_density_matches_hand_count():
    cfg = SyntheticConfig(experts=25, topics=3, questions=60, seed=21)
    corpus = build_corpus(*generate_synthetic(cfg))
    stats = corpus_stats(corpus)
    assert stats["questions"] == 60
    assert stats["answerers"] == corpus.num_experts
    expected_density = 100.0 * stats["answers"] / (60 * stats["answerers"])
    assert math.isclose(stats["density_pct"], expected_density)
    hand_avg = sum(len(q.title.split()) for q in corpus.questions.values()) / 60
    assert math.isclose(stats["avg_title_length"], hand_avg)


def test_accepted_expert_resolution():
    cfg = SyntheticConfig(experts=25, topics=3, questions=60, seed=21)
    corpus = build_corpus(*generate_synthetic(cfg))
    for qid in corpus.ranking_targets("test"):
        truth = corpus.accepted_expert(qid)
        assert truth in corpus.question_answerers(qid)
