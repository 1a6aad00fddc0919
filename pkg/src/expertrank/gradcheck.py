"""End-to-end gradient verification on a tiny fixture model.

Builds a 3-expert corpus with a 12-word vocabulary, a small double-precision
encoder, and checks reverse-mode gradients of the combined pre-training loss
and the fine-tuning loss against central finite differences for every
parameter. Double precision is forced regardless of configuration; the
single-precision mode is too noisy for h = 1e-5 differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .assembly import MaskingPlan, PretrainExample, SequenceBuilder
from .corpus import (AnswerRecord, Corpus, ExpertProfile, HistoryItem, QuestionRecord,
                     SplitSpec, VoteNormalizer)
from .encoder import ModelConfig, init_params, init_score_head
from .finetune import RankingInstance, finetune_loss, instance_scores
from .pretrain import combined_losses, make_pretrain_batch
from .vocab import MASK, build_vocab


class GradCheckError(ArithmeticError):
    """Gradient verification failed its tolerance."""


_FIXTURE_TITLES = [
    "alpha beta gamma delta",
    "beta epsilon zeta",
    "gamma eta theta alpha",
    "iota kappa beta",
    "delta zeta lambda mu",
    "mu alpha kappa",
]


def build_fixture(d: int = 8, heads: int = 2, layers: int = 2, seed: int = 0):
    """Tiny deterministic corpus: 6 questions over a 12-word vocabulary,
    3 experts with 2-3 answers each."""
    questions = [QuestionRecord(qid, title, None, 1000.0 + 10.0 * qid, 1)
                 for qid, title in enumerate(_FIXTURE_TITLES, start=1)]
    history = {
        0: [(1, 3), (2, 7), (3, 5)],
        1: [(2, 9), (4, 2)],
        2: [(1, 1), (3, 6), (5, 10)],
    }
    profiles, answers = [], []
    aid = 100
    for expert, items in history.items():
        h = []
        for qid, vote in items:
            t = 1000.0 + 10.0 * qid + 1.0
            h.append(HistoryItem(qid, vote, t))
            answers.append(AnswerRecord(aid, qid, expert, vote, t))
            aid += 1
        profiles.append(ExpertProfile(expert, expert, h))
    corpus = Corpus(questions={q.question_id: q for q in questions}, answers=answers,
                    profiles=profiles, owner_id_map={e: e for e in history},
                    normalizer=VoteNormalizer(0, 511, 0.0, float(np.log(512.0))),
                    split=SplitSpec([], [], []))
    vocab = build_vocab(_FIXTURE_TITLES, min_freq=1)
    config = ModelConfig(word_vocab=len(vocab), experts=3, d=d, heads=heads,
                         layers=layers, ffn_mult=2, max_len=48, title_cap=8,
                         dropout_pretrain=0.0, dropout_finetune=0.0)
    builder = SequenceBuilder(vocab, corpus.questions, max_len=config.max_len,
                              title_cap=config.title_cap)
    params = init_params(config, seed=seed, dtype=np.float64)
    params.update(init_score_head(config, seed=seed, dtype=np.float64))
    return corpus, vocab, builder, config, params


def _fixture_pretrain_batch(corpus: Corpus, builder: SequenceBuilder):
    """Hand-picked plans covering all three heads: word masks, one fully
    masked history span, and vote targets."""
    q6 = corpus.questions[6]
    q5 = corpus.questions[5]
    seq_a = builder.assemble(corpus.profiles[0], q6, as_of=q6.creation_time)
    seq_b = builder.assemble(corpus.profiles[2], q5, as_of=q5.creation_time)

    span_b = seq_b.history_spans[1]
    plan_a = MaskingPlan(
        word_mask_positions=[seq_a.history_spans[0][0], seq_a.history_spans[1][0] + 1],
        question_mask_span=None,
        replacements={seq_a.history_spans[0][0]: MASK, seq_a.history_spans[1][0] + 1: MASK},
        vote_class=4,
    )
    plan_b = MaskingPlan(
        word_mask_positions=[seq_b.history_spans[0][0]],
        question_mask_span=1,
        replacements={seq_b.history_spans[0][0]: MASK,
                      **{p: MASK for p in range(span_b[0], span_b[1])}},
        vote_class=9,
    )
    return make_pretrain_batch([PretrainExample(seq_a, plan_a), PretrainExample(seq_b, plan_b)])


@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    pretrain_max_err: float
    finetune_max_err: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return (self.pretrain_max_err < self.tolerance
                and self.finetune_max_err < self.tolerance)

    def lines(self) -> list[str]:
        out = ["gradient check (precision: float64, forced)"]
        out.append(f"step h = {self.step:g}, tolerance = {self.tolerance:g}")
        out.append(f"combined pre-training loss: max rel err = {self.pretrain_max_err:.3e}")
        out.append(f"fine-tuning loss:           max rel err = {self.finetune_max_err:.3e}")
        out.append("PASS" if self.passed else "FAIL")
        return out


def run_gradcheck(d: int = 8, heads: int = 2, layers: int = 2, seed: int = 0,
                  h: float = 1e-5, tolerance: float = 1e-4,
                  inject_error: bool = False) -> GradCheckReport:
    """Check every parameter's gradient through both losses.

    `inject_error` is a negative control: it adds a dependency on one weight
    outside the tape, which finite differences see but reverse mode cannot,
    so the check must fail.
    """
    corpus, vocab, builder, config, params = build_fixture(d, heads, layers, seed)
    pb = _fixture_pretrain_batch(corpus, builder)

    q6 = corpus.questions[6]
    q5 = corpus.questions[5]
    instances = [
        RankingInstance(question_id=6, positive=0, negatives=[1, 2], as_of=q6.creation_time),
        RankingInstance(question_id=5, positive=2, negatives=[0, 1], as_of=q5.creation_time),
    ]

    def loss_pretrain():
        _, _, _, total = combined_losses(pb, params, config)
        if inject_error:
            total = total + float(params["vote_head_w"].data.sum()) * 0.01
        return total

    def loss_finetune():
        scores = instance_scores(instances, corpus, builder, params, config)
        return finetune_loss(scores)

    errs_pt = ad.grad_check_params(loss_pretrain, params, h=h)
    errs_ft = ad.grad_check_params(loss_finetune, params, h=h)
    per_param = {f"pretrain/{k}": v for k, v in errs_pt.items()}
    per_param.update({f"finetune/{k}": v for k, v in errs_ft.items()})
    return GradCheckReport(
        tolerance=tolerance, step=h,
        pretrain_max_err=max(errs_pt.values()),
        finetune_max_err=max(errs_ft.values()),
        per_param=per_param,
    )
