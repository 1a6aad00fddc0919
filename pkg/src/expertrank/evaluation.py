"""Candidate-set construction, ranking metrics, and report generation.

Each evaluation question gets a fixed 20-expert candidate set (its original
answerers plus sampled fills), every candidate is scored by the ranking
head, and the ground truth's rank feeds MRR, Precision@K, and NDCG@20. With
exactly one relevant expert per question, NDCG@20 reduces to
1/log2(rank + 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .assembly import ColdExpertError, SequenceBuilder, example_rng
from .corpus import Corpus, DataError
from .encoder import ModelConfig, batch_sequences, forward

CANDIDATE_SET_SIZE = 20
# H_20 / 20: expected MRR of a random ranking over 20 candidates
RANDOM_MRR_BASELINE = 0.17994


@dataclass
class CandidateSet:
    question_id: int
    experts: list[int]        # dense ids, exactly 20, ground truth included once
    ground_truth_index: int


def build_candidates(corpus: Corpus, question_id: int, rng: np.random.Generator,
                     size: int = CANDIDATE_SET_SIZE) -> CandidateSet:
    """Original answerers first (earliest answer first); uniform fill to
    `size` from experts with history before the question. If answerers
    exceed `size`, keep the ground truth plus the earliest others."""
    question = corpus.questions.get(question_id)
    truth = corpus.accepted_expert(question_id)
    if question is None or truth is None:
        raise DataError(f"question {question_id} has no resolvable accepted answer")
    answerers = corpus.question_answerers(question_id)

    if len(answerers) > size:
        kept, others = [], 0
        for e in answerers:
            if e == truth:
                kept.append(e)
            elif others < size - 1:
                kept.append(e)
                others += 1
        candidates = kept[:size]
    else:
        candidates = list(answerers)
        need = size - len(candidates)
        if need > 0:
            as_of = question.creation_time
            taken = set(candidates)
            pool = [p.expert_id for p in corpus.profiles
                    if p.expert_id not in taken and p.history and p.history[0].answer_time < as_of]
            if len(pool) < need:
                raise DataError(f"question {question_id}: only {len(pool) + len(candidates)} "
                                f"eligible experts for a {size}-candidate set")
            fills = rng.choice(np.asarray(pool, dtype=np.int64), size=need, replace=False)
            candidates.extend(int(e) for e in fills)
    return CandidateSet(question_id=question_id, experts=candidates,
                        ground_truth_index=candidates.index(truth))


def rank_of_truth(scores: np.ndarray, ground_truth_index: int) -> int:
    """1-based rank under stable descending sort, ties broken by ascending
    candidate index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise DataError(f"rank_of_truth: scores must be 1-D, got shape {scores.shape}")
    order = np.argsort(-scores, kind="stable")
    return int(np.nonzero(order == ground_truth_index)[0][0]) + 1


def ranking_metrics(ranks) -> dict[str, float]:
    """MRR, P@1, P@3, NDCG@20 from 1-based ground-truth ranks."""
    ranks = list(ranks)
    if not ranks:
        raise DataError("ranking_metrics: empty rank list")
    if min(ranks) < 1 or max(ranks) > CANDIDATE_SET_SIZE:
        raise DataError(f"ranks must lie in 1..{CANDIDATE_SET_SIZE}")
    n = len(ranks)
    return {
        "mrr": sum(1.0 / r for r in ranks) / n,
        "p_at_1": sum(r <= 1 for r in ranks) / n,
        "p_at_3": sum(r <= 3 for r in ranks) / n,
        "ndcg_at_20": sum(1.0 / math.log2(r + 1) for r in ranks) / n,
    }


# ---------------------------------------------------------------------------
# Full-split evaluation
# ---------------------------------------------------------------------------

@dataclass
class QuestionResult:
    question_id: int
    rank: int
    ground_truth: int
    candidates: list[int]
    scores: list[float]


@dataclass
class RankingReport:
    section: str
    seed: int
    config_fingerprint: str
    metrics: dict[str, float]
    rows: list[QuestionResult]
    cold_fallbacks: int = 0
    flagged: list[tuple[int, int]] = field(default_factory=list)  # (question, expert) cold pairs


def score_candidates(corpus: Corpus, builder: SequenceBuilder, params: dict[str, ad.Tensor],
                     config: ModelConfig, cand: CandidateSet) -> tuple[np.ndarray, list[int]]:
    """Eval-mode matching scores for every candidate; cold candidates get
    the target-only fallback sequence and are reported back."""
    question = corpus.questions[cand.question_id]
    as_of = question.creation_time
    seqs, cold = [], []
    for expert in cand.experts:
        profile = corpus.profiles[expert]
        try:
            seqs.append(builder.assemble(profile, question, as_of))
        except ColdExpertError:
            seqs.append(builder.assemble_cold(expert, question))
            cold.append(expert)
    batch = batch_sequences(seqs)
    _, expert_vec = forward(batch, params, config)
    scores = ad.matmul(expert_vec, params["score_w"]) + params["score_b"]
    return scores.data.reshape(-1).astype(np.float64), cold


def _evaluate_one(corpus, builder, params, config, qid: int, seed: int,
                  shuffle_candidates: bool) -> tuple[QuestionResult, list[tuple[int, int]]]:
    rng = example_rng(seed, qid, 0)
    cand = build_candidates(corpus, qid, rng)
    if shuffle_candidates:
        perm = example_rng(seed, qid, 1).permutation(len(cand.experts))
        experts = [cand.experts[i] for i in perm]
        cand = CandidateSet(qid, experts, experts.index(cand.experts[cand.ground_truth_index]))
    scores, cold = score_candidates(corpus, builder, params, config, cand)
    rank = rank_of_truth(scores, cand.ground_truth_index)
    row = QuestionResult(question_id=qid, rank=rank,
                         ground_truth=cand.experts[cand.ground_truth_index],
                         candidates=cand.experts, scores=scores.tolist())
    return row, [(qid, e) for e in cold]


def evaluate(corpus: Corpus, builder: SequenceBuilder, params: dict[str, ad.Tensor],
             config: ModelConfig, section: str, seed: int,
             config_fingerprint: str = "", shuffle_candidates: bool = False,
             question_ids: list[int] | None = None, workers: int = 1) -> RankingReport:
    """Score every ranking target in a split. `shuffle_candidates` permutes
    each candidate list (seeded) so tie statistics are unbiased; by default
    order is deterministic and ties resolve by candidate index. Questions
    are independent, so `workers` > 1 fans them out over read-only
    parameters without changing any result."""
    if "score_w" not in params or "score_b" not in params:
        raise DataError("checkpoint has no ranking head; run finetune first")
    targets = question_ids if question_ids is not None else corpus.ranking_targets(section)
    if not targets:
        raise DataError(f"no evaluable questions in section {section}")
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda qid: _evaluate_one(corpus, builder, params, config, qid,
                                          seed, shuffle_candidates), targets))
    else:
        results = [_evaluate_one(corpus, builder, params, config, qid, seed,
                                 shuffle_candidates) for qid in targets]
    rows = [row for row, _ in results]
    flagged = [pair for _, cold in results for pair in cold]
    report = RankingReport(section=section, seed=seed, config_fingerprint=config_fingerprint,
                           metrics=ranking_metrics([r.rank for r in rows]), rows=rows,
                           cold_fallbacks=len(flagged), flagged=flagged)
    return report


def save_report(report: RankingReport, out_dir, stem: str = "report") -> tuple[Path, Path]:
    """Write the human-readable summary and the per-question TSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    txt = out / f"{stem}.txt"
    tsv = out / f"{stem}.tsv"
    m = report.metrics
    with open(txt, "w", encoding="utf-8") as fh:
        fh.write("expert ranking report\n")
        fh.write(f"section = {report.section}\n")
        fh.write(f"seed = {report.seed}\n")
        fh.write(f"config_fingerprint = {report.config_fingerprint}\n")
        fh.write(f"questions = {len(report.rows)}\n")
        fh.write(f"cold_fallbacks = {report.cold_fallbacks}\n")
        fh.write(f"mrr = {m['mrr']:.6f}\n")
        fh.write(f"p_at_1 = {m['p_at_1']:.6f}\n")
        fh.write(f"p_at_3 = {m['p_at_3']:.6f}\n")
        fh.write(f"ndcg_at_20 = {m['ndcg_at_20']:.6f}\n")
    with open(tsv, "w", encoding="utf-8") as fh:
        fh.write("question_id\trank\tground_truth\tcandidates\tscores\n")
        for r in report.rows:
            cands = "|".join(str(c) for c in r.candidates)
            scores = "|".join(repr(s) for s in r.scores)
            fh.write(f"{r.question_id}\t{r.rank}\t{r.ground_truth}\t{cands}\t{scores}\n")
    return txt, tsv


def score_matrix(corpus: Corpus, builder: SequenceBuilder, params: dict[str, ad.Tensor],
                 config: ModelConfig, question_ids: list[int], expert_ids: list[int]) -> str:
    """Aligned text dump of matching scores for chosen questions x experts
    (the case-study view)."""
    if "score_w" not in params:
        raise DataError("checkpoint has no ranking head; run finetune first")
    header = ["question"] + [f"expert_{e}" for e in expert_ids]
    lines = ["\t".join(header)]
    for qid in question_ids:
        question = corpus.questions.get(qid)
        if question is None:
            raise DataError(f"unknown question id {qid}")
        cand = CandidateSet(qid, list(expert_ids), 0)
        scores, _ = score_candidates(corpus, builder, params, config, cand)
        lines.append("\t".join([str(qid)] + [f"{s:+.4f}" for s in scores]))
    widths = [max(len(row.split("\t")[i]) for row in lines) for i in range(len(header))]
    pretty = []
    for row in lines:
        cells = row.split("\t")
        pretty.append("  ".join(c.rjust(w) for c, w in zip(cells, widths)))
    return "\n".join(pretty) + "\n"
