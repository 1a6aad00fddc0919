"""Target-aware expert sequence assembly and pre-training masking plans.

A sequence packs one expert's identity slot, the target question, and the
most recent history titles that fit, into four parallel integer lanes:

    position: 0     1..a   a+1    ...        ...          L-1
    tokens:   [EID] t1..ta [SEP]  h1.. [HSEP] h2.. [SEP]
    segment:  0     0      0      1 1 1 1 1 1 1 1  1
    votes:    PAD   PAD    PAD    v1v1 PAD   v2v2  PAD

The expert-ID slot resolves against a dedicated embedding table, not the
word vocabulary; its token lane entry is PAD by convention. Vote ids are the
expert's normalized vote class, constant within each history span, PAD on
the target span and all structural tokens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Corpus, DataError, ExpertProfile, QuestionRecord
from .vocab import HSEP, MASK, NUM_SPECIALS, PAD, SEP, UNK, Vocabulary


class ColdExpertError(Exception):
    """Expert has no usable history strictly before the as-of time."""


@dataclass
class EncodedSequence:
    expert_id: int
    token_ids: list[int]
    segment_ids: list[int]
    position_ids: list[int]
    vote_ids: list[int]
    question_spans: list[tuple[int, int, int]]  # (start, end, question_id); [0] is the target
    attention_len: int
    is_fallback: bool = False

    @property
    def target_span(self) -> tuple[int, int, int]:
        return self.question_spans[0]

    @property
    def history_spans(self) -> list[tuple[int, int, int]]:
        return self.question_spans[1:]


class SequenceBuilder:
    """Assembles sequences against one corpus + vocabulary, caching encoded
    titles. History packing keeps the most recent questions, dropping oldest
    first when max_len binds; every title is capped at title_cap tokens."""

    def __init__(self, vocab: Vocabulary, questions: dict[int, QuestionRecord],
                 max_len: int = 256, title_cap: int = 16):
        if max_len < 2 * title_cap + 3:
            raise DataError(f"max_len {max_len} too small for title_cap {title_cap} "
                            f"(need >= {2 * title_cap + 3})")
        self.vocab = vocab
        self.questions = questions
        self.max_len = max_len
        self.title_cap = title_cap
        self._title_cache: dict[int, list[int]] = {}

    def _title_ids(self, question_id: int) -> list[int]:
        ids = self._title_cache.get(question_id)
        if ids is None:
            q = self.questions.get(question_id)
            if q is None:
                raise DataError(f"unknown question id {question_id}")
            ids = self.vocab.encode(q.title)[: self.title_cap]
            self._title_cache[question_id] = ids
        return ids

    def assemble(self, profile: ExpertProfile, target: QuestionRecord,
                 as_of: float) -> EncodedSequence:
        usable = [h for h in profile.history if h.answer_time < as_of]
        if not usable:
            raise ColdExpertError(f"expert {profile.expert_id} has no history before {as_of}")

        target_ids = self.vocab.encode(target.title)[: self.title_cap]
        budget = self.max_len - (1 + len(target_ids) + 2)
        chosen: list = []
        used = 0
        for item in reversed(usable):  # newest first
            tlen = len(self._title_ids(item.question_id))
            cost = tlen + (1 if chosen else 0)
            if used + cost > budget:
                break
            chosen.append(item)
            used += cost
        if not chosen:
            raise ColdExpertError(f"no history title fits within max_len {self.max_len}")
        chosen.reverse()  # back to chronological order

        tokens = [PAD] + target_ids + [SEP]
        votes = [PAD] * len(tokens)
        spans = [(1, 1 + len(target_ids), target.question_id)]
        for i, item in enumerate(chosen):
            if i > 0:
                tokens.append(HSEP)
                votes.append(PAD)
            ids = self._title_ids(item.question_id)
            spans.append((len(tokens), len(tokens) + len(ids), item.question_id))
            tokens.extend(ids)
            votes.extend([item.normalized_vote] * len(ids))
        tokens.append(SEP)
        votes.append(PAD)

        return self._finish(profile.expert_id, tokens, votes, spans, len(target_ids))

    def assemble_cold(self, expert_id: int, target: QuestionRecord) -> EncodedSequence:
        """Target-only fallback: [EID] target [SEP] [SEP], all votes PAD."""
        target_ids = self.vocab.encode(target.title)[: self.title_cap]
        tokens = [PAD] + target_ids + [SEP, SEP]
        votes = [PAD] * len(tokens)
        spans = [(1, 1 + len(target_ids), target.question_id)]
        seq = self._finish(expert_id, tokens, votes, spans, len(target_ids))
        seq.is_fallback = True
        return seq

    def _finish(self, expert_id, tokens, votes, spans, target_len) -> EncodedSequence:
        length = len(tokens)
        first_sep = 1 + target_len  # segment 0 covers EID + target + first SEP
        segments = [0 if p <= first_sep else 1 for p in range(length)]
        return EncodedSequence(
            expert_id=expert_id,
            token_ids=tokens,
            segment_ids=segments,
            position_ids=list(range(length)),
            vote_ids=votes,
            question_spans=spans,
            attention_len=length,
        )


# ---------------------------------------------------------------------------
# Masking plans
# ---------------------------------------------------------------------------

@dataclass
class MaskingPlan:
    word_mask_positions: list[int]
    question_mask_span: int | None  # index into history_spans
    replacements: dict[int, int]    # position -> token id presented to the model
    vote_class: int                 # true normalized vote of the target question


def maskable_positions(seq: EncodedSequence) -> list[int]:
    """History-title positions: everything structural and the whole target
    span are exempt from word masking."""
    out: list[int] = []
    for start, end, _ in seq.history_spans:
        out.extend(range(start, end))
    return out


def span_positions(seq: EncodedSequence, plan: MaskingPlan) -> list[int]:
    if plan.question_mask_span is None:
        return []
    start, end, _ = seq.history_spans[plan.question_mask_span]
    return list(range(start, end))


def make_pretrain_plan(seq: EncodedSequence, word_ratio: float, question_ratio: float,
                       rng: np.random.Generator, vote_class: int,
                       vocab_size: int) -> MaskingPlan:
    """Draw one masking plan: with probability question_ratio a uniformly
    chosen history span is fully masked; remaining history tokens are
    independently word-masked at word_ratio; every masked token gets the
    80/10/10 MASK / random-in-vocab / unchanged replacement."""
    if not (0.0 <= word_ratio < 1.0 and 0.0 <= question_ratio < 1.0):
        raise DataError(f"mask ratios must be in [0,1): {word_ratio}, {question_ratio}")
    if not 1 <= vote_class <= 10:
        raise DataError(f"vote class {vote_class} outside 1..10")

    span_idx = None
    n_hist = len(seq.history_spans)
    if n_hist and rng.random() < question_ratio:
        span_idx = int(rng.integers(n_hist))
        span_start, span_end, _ = seq.history_spans[span_idx]
        in_span = set(range(span_start, span_end))
    else:
        in_span = set()

    word_positions = [p for p in maskable_positions(seq)
                      if p not in in_span and rng.random() < word_ratio]

    replacements: dict[int, int] = {}
    for pos in sorted(word_positions + sorted(in_span)):
        r = rng.random()
        if r < 0.8:
            replacements[pos] = MASK
        elif r < 0.9:
            if vocab_size > NUM_SPECIALS:
                replacements[pos] = int(rng.integers(NUM_SPECIALS, vocab_size))
            else:
                replacements[pos] = UNK
        # else: left unchanged on purpose; no entry

    return MaskingPlan(word_mask_positions=sorted(word_positions),
                       question_mask_span=span_idx,
                       replacements=replacements,
                       vote_class=vote_class)


def apply_plan(seq: EncodedSequence, plan: MaskingPlan) -> np.ndarray:
    """Token lane as the model sees it during pre-training."""
    tokens = np.asarray(seq.token_ids, dtype=np.int64).copy()
    for pos, tok in plan.replacements.items():
        tokens[pos] = tok
    return tokens


# ---------------------------------------------------------------------------
# Pre-training examples
# ---------------------------------------------------------------------------

@dataclass
class PretrainExample:
    seq: EncodedSequence
    plan: MaskingPlan


def example_rng(global_seed: int, question_id: int, expert_id: int) -> np.random.Generator:
    """Per-sequence generator folding the ids into the global seed."""
    return np.random.default_rng(np.random.SeedSequence([global_seed, question_id, expert_id]))


def build_pretrain_examples(corpus: Corpus, builder: SequenceBuilder,
                            word_ratio: float, question_ratio: float,
                            seed: int, window: str = "train") -> tuple[list[PretrainExample], int]:
    """One example per (expert, answered question) pair inside the training
    window. The target's true vote class is the label for the vote task; the
    input vote lane at the target span stays PAD. Pairs whose expert has no
    earlier history are skipped (counted).

    With window="train" only questions created no later than the last
    training-split question are used, so validation/test-period data never
    appears in pre-training; window="heldout" selects the complement (for
    probes like vote-prediction accuracy on unseen questions).
    """
    if window not in ("train", "heldout"):
        raise DataError(f"unknown example window: {window}")
    train_end = max(corpus.questions[qid].creation_time for qid in corpus.split.train)
    examples: list[PretrainExample] = []
    skipped_cold = 0
    for profile in corpus.profiles:
        for item in profile.history:
            target = corpus.questions.get(item.question_id)
            if target is None:
                continue
            in_train = target.creation_time <= train_end
            if (window == "train") != in_train:
                continue
            try:
                seq = builder.assemble(profile, target, as_of=target.creation_time)
            except ColdExpertError:
                skipped_cold += 1
                continue
            rng = example_rng(seed, target.question_id, profile.expert_id)
            plan = make_pretrain_plan(seq, word_ratio, question_ratio, rng,
                                      vote_class=item.normalized_vote,
                                      vocab_size=len(builder.vocab))
            examples.append(PretrainExample(seq=seq, plan=plan))
    return examples, skipped_cold


# ---------------------------------------------------------------------------
# Example serialization (line-delimited, for inspection and replay)
# ---------------------------------------------------------------------------

def save_examples(examples: list[PretrainExample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(_example_to_obj(ex), separators=(",", ":")) + "\n")


def load_examples(path) -> list[PretrainExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(_example_from_obj(json.loads(line)))
    return out


def _example_to_obj(ex: PretrainExample) -> dict:
    seq, plan = ex.seq, ex.plan
    return {
        "expert_id": seq.expert_id,
        "tokens": seq.token_ids,
        "segments": seq.segment_ids,
        "positions": seq.position_ids,
        "votes": seq.vote_ids,
        "spans": [list(s) for s in seq.question_spans],
        "fallback": seq.is_fallback,
        "plan": {
            "word": plan.word_mask_positions,
            "qspan": plan.question_mask_span,
            "repl": {str(k): v for k, v in sorted(plan.replacements.items())},
            "vote_class": plan.vote_class,
        },
    }


def _example_from_obj(obj: dict) -> PretrainExample:
    seq = EncodedSequence(
        expert_id=obj["expert_id"],
        token_ids=list(obj["tokens"]),
        segment_ids=list(obj["segments"]),
        position_ids=list(obj["positions"]),
        vote_ids=list(obj["votes"]),
        question_spans=[tuple(s) for s in obj["spans"]],
        attention_len=len(obj["tokens"]),
        is_fallback=obj.get("fallback", False),
    )
    p = obj["plan"]
    plan = MaskingPlan(
        word_mask_positions=list(p["word"]),
        question_mask_span=p["qspan"],
        replacements={int(k): v for k, v in p["repl"].items()},
        vote_class=p["vote_class"],
    )
    return PretrainExample(seq=seq, plan=plan)
