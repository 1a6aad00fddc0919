"""Fine-tuning the encoder as an expert-question ranker.

Each training instance pairs the accepted answerer with k sampled negatives;
all k+1 candidates are scored by the ranking head and optimized with softmax
cross-entropy against the positive. History is always filtered to answers
strictly before the target question's creation time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .assembly import ColdExpertError, SequenceBuilder, example_rng
from .checkpoint import save_params
from .corpus import Corpus, DataError, QuestionRecord
from .encoder import ModelConfig, batch_sequences, forward, init_score_head
from .evaluation import evaluate


@dataclass
class RankingInstance:
    question_id: int
    positive: int
    negatives: list[int]
    as_of: float

    def __post_init__(self):
        everyone = [self.positive] + self.negatives
        if len(set(everyone)) != len(everyone):
            raise DataError(f"instance {self.question_id}: candidates not distinct")


def eligible_negatives(corpus: Corpus, question_id: int, as_of: float) -> list[int]:
    """Experts with at least one answer strictly before as_of who did not
    answer this question, ascending dense id."""
    answered = set(corpus.question_answerers(question_id))
    return [p.expert_id for p in corpus.profiles
            if p.expert_id not in answered and p.history and p.history[0].answer_time < as_of]


def sample_negatives(corpus: Corpus, question_id: int, positive: int, k: int,
                     rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement from the eligible pool."""
    question = corpus.questions.get(question_id)
    if question is None:
        raise DataError(f"unknown question id {question_id}")
    pool = [e for e in eligible_negatives(corpus, question_id, question.creation_time)
            if e != positive]
    if len(pool) < k:
        raise DataError(f"question {question_id}: only {len(pool)} eligible negatives, "
                        f"need {k}; lower k")
    if len(pool) == k:
        return pool
    picked = rng.choice(np.asarray(pool, dtype=np.int64), size=k, replace=False)
    return [int(e) for e in picked]


def build_instances(corpus: Corpus, section: str, k: int, seed: int,
                    train_fraction: float = 1.0) -> tuple[list[RankingInstance], int]:
    """One instance per ranking target whose positive has usable history.
    `train_fraction` keeps only the earliest fraction of the section (the
    data-sparsity protocol)."""
    targets = corpus.ranking_targets(section)
    if train_fraction < 1.0:
        targets = targets[: int(len(targets) * train_fraction)]
    instances: list[RankingInstance] = []
    skipped_cold = 0
    for qid in targets:
        question = corpus.questions[qid]
        positive = corpus.accepted_expert(qid)
        profile = corpus.profiles[positive]
        if not profile.history or profile.history[0].answer_time >= question.creation_time:
            skipped_cold += 1
            continue
        rng = example_rng(seed, qid, positive)
        negatives = sample_negatives(corpus, qid, positive, k, rng)
        instances.append(RankingInstance(question_id=qid, positive=positive,
                                         negatives=negatives, as_of=question.creation_time))
    return instances, skipped_cold


# ---------------------------------------------------------------------------
# Scoring and loss
# ---------------------------------------------------------------------------

def score(expert_id: int, question: QuestionRecord, as_of: float,
          params: dict[str, ad.Tensor], config: ModelConfig,
          builder: SequenceBuilder, corpus: Corpus) -> float:
    """Eval-mode matching score for one expert-question pair. Cold experts
    raise; evaluation decides whether to fall back."""
    seq = builder.assemble(corpus.profiles[expert_id], question, as_of)
    batch = batch_sequences([seq])
    _, expert_vec = forward(batch, params, config)
    out = ad.matmul(expert_vec, params["score_w"]) + params["score_b"]
    return float(out.data.reshape(-1)[0])


def instance_scores(instances: list[RankingInstance], corpus: Corpus,
                    builder: SequenceBuilder, params: dict[str, ad.Tensor],
                    config: ModelConfig, dropout: float = 0.0,
                    rng: np.random.Generator | None = None) -> ad.Tensor:
    """(instances, k+1) score matrix; column 0 is the positive."""
    seqs = []
    for inst in instances:
        for expert in [inst.positive] + inst.negatives:
            seqs.append(builder.assemble(corpus.profiles[expert],
                                         corpus.questions[inst.question_id], inst.as_of))
    batch = batch_sequences(seqs)
    _, expert_vec = forward(batch, params, config, dropout=dropout, rng=rng)
    flat = ad.matmul(expert_vec, params["score_w"]) + params["score_b"]
    return ad.reshape(flat, (len(instances), len(instances[0].negatives) + 1))


def finetune_loss(scores: ad.Tensor) -> ad.Tensor:
    """Softmax cross-entropy over each row of k+1 scores, positive at
    column 0, averaged over the batch."""
    targets = np.zeros(scores.shape[0], dtype=np.int64)
    return ad.cross_entropy(scores, targets).mean()


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class FinetuneRun:
    epochs: int = 3
    batch_instances: int = 16
    lr: float = 5e-6
    k: int = 9
    patience: int = 3
    seed: int = 0
    train_fraction: float = 1.0


@dataclass
class FinetuneResult:
    checkpoint_path: Path
    log_path: Path
    best_val_mrr: float
    epochs_run: int
    skipped_cold: int
    diverged: bool = False
    val_history: list[float] = field(default_factory=list)


def finetune_loop(corpus: Corpus, builder: SequenceBuilder, params: dict[str, ad.Tensor],
                  config: ModelConfig, run: FinetuneRun, out_dir) -> FinetuneResult:
    """Adam over the ranking loss with early stopping on validation MRR.
    The ranking head is created fresh if the checkpoint lacks one. With
    zero epochs the input parameters pass through untouched."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "finetune_checkpoint.bin"
    log_path = out / "finetune_log.tsv"

    if "score_w" not in params:
        params.update(init_score_head(config, seed=run.seed,
                                      dtype=params["token_table"].dtype))
    instances, skipped_cold = build_instances(corpus, "train", run.k, run.seed,
                                              train_fraction=run.train_fraction)
    if not instances and run.epochs > 0:
        raise DataError("no usable fine-tuning instances (all positives cold?)")

    state = ad.AdamState()
    rng = np.random.default_rng(np.random.SeedSequence([run.seed, 2]))
    best = {"mrr": -1.0, "snapshot": {k: p.data.copy() for k, p in params.items()}}
    val_history: list[float] = []
    stale = 0
    diverged = False
    epochs_run = 0

    with open(log_path, "w", encoding="utf-8") as log:
        log.write("epoch\ttrain_loss\tval_mrr\twall_time\n")
        t0 = time.monotonic()
        for epoch in range(1, run.epochs + 1):
            order = rng.permutation(len(instances))
            losses = []
            try:
                for i in range(0, len(order), run.batch_instances):
                    chunk = [instances[j] for j in order[i: i + run.batch_instances]]
                    for p in params.values():
                        p.zero_grad()
                    with ad.GradTape() as tape:
                        scores = instance_scores(chunk, corpus, builder, params, config,
                                                 dropout=config.dropout_finetune, rng=rng)
                        loss = finetune_loss(scores)
                    tape.backward(loss)
                    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
                    ad.adam_step(params, grads, state, lr=run.lr)
                    losses.append(loss.item())
            except ad.NumericsError:
                diverged = True
                break
            epochs_run = epoch
            val_report = evaluate(corpus, builder, params, config, "validation", seed=run.seed)
            val_mrr = val_report.metrics["mrr"]
            val_history.append(val_mrr)
            log.write(f"{epoch}\t{float(np.mean(losses))!r}\t{val_mrr!r}"
                      f"\t{time.monotonic() - t0:.3f}\n")
            if val_mrr > best["mrr"]:
                best = {"mrr": val_mrr, "snapshot": {k: p.data.copy() for k, p in params.items()}}
                stale = 0
            else:
                stale += 1
                if stale >= run.patience:
                    break

    for name, arr in best["snapshot"].items():
        params[name].data = arr
    save_params(ckpt_path, params)
    return FinetuneResult(checkpoint_path=ckpt_path, log_path=log_path,
                          best_val_mrr=best["mrr"], epochs_run=epochs_run,
                          skipped_cold=skipped_cold, diverged=diverged,
                          val_history=val_history)


def lr_sweep(corpus: Corpus, builder: SequenceBuilder,
             base_params: dict[str, ad.Tensor], config: ModelConfig,
             run: FinetuneRun, lrs: list[float], out_dir) -> list[dict]:
    """Fine-tune once per learning rate from the same starting checkpoint;
    report validation MRR per rate."""
    out = Path(out_dir)
    results = []
    for lr in lrs:
        fresh = {k: ad.Tensor(p.data.copy(), requires_grad=True) for k, p in base_params.items()}
        sub = FinetuneRun(epochs=run.epochs, batch_instances=run.batch_instances, lr=lr,
                          k=run.k, patience=run.patience, seed=run.seed,
                          train_fraction=run.train_fraction)
        res = finetune_loop(corpus, builder, fresh, config, sub, out / f"lr_{lr:g}")
        results.append({"lr": lr, "val_mrr": res.best_val_mrr,
                        "checkpoint": str(res.checkpoint_path)})
    return results
