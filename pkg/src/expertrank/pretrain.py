"""Pre-training objectives and the joint optimization loop.

Three losses share one encoder pass per batch: word-level masked-token
recovery (word head weight-tied to the token table), whole-span recovery of
one masked history question, and vote-class prediction for the target
question from the expert-level vector. The combined loss is their unweighted
sum.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .assembly import PretrainExample, apply_plan, span_positions
from .checkpoint import save_params
from .corpus import DataError
from .encoder import ModelConfig, SequenceBatch, batch_sequences, forward, init_params
from .vocab import PAD


@dataclass
class PretrainBatch:
    batch: SequenceBatch
    word_positions: np.ndarray  # flat (b * L + p) indices of word-masked tokens
    word_labels: np.ndarray     # original token ids at those positions
    span_positions: np.ndarray  # flat indices of question-span-masked tokens
    span_labels: np.ndarray
    vote_classes: np.ndarray    # (B,) true classes 1..10


def make_pretrain_batch(examples: list[PretrainExample], use_vote_lane: bool = True) -> PretrainBatch:
    overrides = [apply_plan(ex.seq, ex.plan) for ex in examples]
    batch = batch_sequences([ex.seq for ex in examples], token_override=overrides)
    if not use_vote_lane:
        batch.votes = np.full_like(batch.votes, PAD)
    L = batch.max_len
    word_pos, word_lab, span_pos, span_lab, votes = [], [], [], [], []
    for i, ex in enumerate(examples):
        tokens = ex.seq.token_ids
        for p in ex.plan.word_mask_positions:
            word_pos.append(i * L + p)
            word_lab.append(tokens[p])
        for p in span_positions(ex.seq, ex.plan):
            span_pos.append(i * L + p)
            span_lab.append(tokens[p])
        votes.append(ex.plan.vote_class)
    return PretrainBatch(
        batch=batch,
        word_positions=np.asarray(word_pos, dtype=np.int64),
        word_labels=np.asarray(word_lab, dtype=np.int64),
        span_positions=np.asarray(span_pos, dtype=np.int64),
        span_labels=np.asarray(span_lab, dtype=np.int64),
        vote_classes=np.asarray(votes, dtype=np.int64),
    )


def _masked_token_loss(hidden: ad.Tensor, params: dict[str, ad.Tensor],
                       positions: np.ndarray, labels: np.ndarray) -> ad.Tensor:
    """Mean cross-entropy of tied-word-head logits at flat `positions`."""
    B, L, d = hidden.shape
    flat = ad.reshape(hidden, (B * L, d))
    rows = ad.take_rows(flat, positions)
    logits = ad.matmul(rows, ad.transpose(params["token_table"], (1, 0))) + params["word_head_bias"]
    return ad.cross_entropy(logits, labels).mean()


def _zero_loss(params: dict[str, ad.Tensor]) -> ad.Tensor:
    return ad.Tensor(np.zeros((), dtype=params["token_table"].dtype))


def loss_word_mlm(pb: PretrainBatch, hidden: ad.Tensor, params: dict[str, ad.Tensor],
                  counters: dict[str, int] | None = None) -> ad.Tensor:
    if pb.word_positions.size == 0:
        if counters is not None:
            counters["word_mlm_empty_batches"] = counters.get("word_mlm_empty_batches", 0) + 1
        return _zero_loss(params)
    return _masked_token_loss(hidden, params, pb.word_positions, pb.word_labels)


def loss_question_mlm(pb: PretrainBatch, hidden: ad.Tensor, params: dict[str, ad.Tensor],
                      counters: dict[str, int] | None = None) -> ad.Tensor:
    if pb.span_positions.size == 0:
        if counters is not None:
            counters["question_mlm_empty_batches"] = counters.get("question_mlm_empty_batches", 0) + 1
        return _zero_loss(params)
    return _masked_token_loss(hidden, params, pb.span_positions, pb.span_labels)


def loss_vote(pb: PretrainBatch, expert_vec: ad.Tensor, params: dict[str, ad.Tensor]) -> ad.Tensor:
    """Cross-entropy of the vote head on the expert-level vector against the
    target question's true vote class."""
    if pb.vote_classes.size == 0 or (pb.vote_classes < 1).any() or (pb.vote_classes > 10).any():
        raise DataError("every pre-training sequence needs a vote class in 1..10")
    logits = ad.matmul(expert_vec, params["vote_head_w"]) + params["vote_head_bias"]
    return ad.cross_entropy(logits, pb.vote_classes - 1).mean()


def combined_losses(pb: PretrainBatch, params: dict[str, ad.Tensor], config: ModelConfig,
                    dropout: float = 0.0, rng: np.random.Generator | None = None,
                    enable_vote_loss: bool = True,
                    counters: dict[str, int] | None = None):
    """One encoder pass feeding all three heads. Returns (wm, ql, vs, total)."""
    hidden, expert_vec = forward(pb.batch, params, config, dropout=dropout, rng=rng)
    wm = loss_word_mlm(pb, hidden, params, counters)
    ql = loss_question_mlm(pb, hidden, params, counters)
    vs = loss_vote(pb, expert_vec, params) if enable_vote_loss else _zero_loss(params)
    return wm, ql, vs, wm + ql + vs


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class PretrainRun:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 5e-5
    warmup_frac: float = 0.05
    seed: int = 0
    checkpoint_interval: int = 500
    use_vote_lane: bool = True
    enable_vote_loss: bool = True


@dataclass
class PretrainResult:
    checkpoint_path: Path
    log_path: Path
    final_losses: dict[str, float]
    diverged: bool = False
    counters: dict[str, int] = field(default_factory=dict)


def warmup_lr(base_lr: float, step: int, total_steps: int, warmup_frac: float) -> float:
    """Linear warmup over the first warmup_frac of steps, then constant."""
    warmup = max(1, int(total_steps * warmup_frac))
    return base_lr * min(1.0, step / warmup)


def pretrain_loop(examples: list[PretrainExample], config: ModelConfig, run: PretrainRun,
                  out_dir, params: dict[str, ad.Tensor] | None = None) -> PretrainResult:
    """Optimize the combined loss with Adam; logs every step, checkpoints at
    the configured interval, aborts (keeping the last good checkpoint) if
    the loss goes non-finite."""
    if not examples:
        raise DataError("no pre-training examples; corpus too small or all experts cold")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "pretrain_checkpoint.bin"
    log_path = out / "pretrain_log.tsv"

    if params is None:
        params = init_params(config, seed=run.seed)
    state = ad.AdamState()
    rng = np.random.default_rng(np.random.SeedSequence([run.seed, 1]))
    counters: dict[str, int] = {}
    save_params(ckpt_path, params)  # step-0 fallback if the very first step diverges

    order: list[int] = []
    final = {"loss_word": 0.0, "loss_question": 0.0, "loss_vote": 0.0, "loss_total": 0.0}
    diverged = False
    with open(log_path, "w", encoding="utf-8") as log:
        log.write("step\tloss_word\tloss_question\tloss_vote\tloss_total\twall_time\n")
        t0 = time.monotonic()
        for step in range(1, run.steps + 1):
            while len(order) < run.batch_size:
                order.extend(rng.permutation(len(examples)).tolist())
            take, order = order[: run.batch_size], order[run.batch_size:]
            pb = make_pretrain_batch([examples[i] for i in take], use_vote_lane=run.use_vote_lane)
            try:
                for p in params.values():
                    p.zero_grad()
                with ad.GradTape() as tape:
                    wm, ql, vs, total = combined_losses(
                        pb, params, config, dropout=config.dropout_pretrain, rng=rng,
                        enable_vote_loss=run.enable_vote_loss, counters=counters)
                tape.backward(total)
                grads = {k: p.grad for k, p in params.items() if p.grad is not None}
                lr = warmup_lr(run.lr, step, run.steps, run.warmup_frac)
                ad.adam_step(params, grads, state, lr=lr)
            except ad.NumericsError:
                diverged = True
                counters["diverged_at_step"] = step
                break
            # log the total as the exact float64 sum of the logged components
            final = {"loss_word": wm.item(), "loss_question": ql.item(),
                     "loss_vote": vs.item()}
            final["loss_total"] = final["loss_word"] + final["loss_question"] + final["loss_vote"]
            log.write(f"{step}\t{final['loss_word']!r}\t{final['loss_question']!r}"
                      f"\t{final['loss_vote']!r}\t{final['loss_total']!r}"
                      f"\t{time.monotonic() - t0:.3f}\n")
            if step % run.checkpoint_interval == 0:
                save_params(ckpt_path, params)
    if not diverged:
        save_params(ckpt_path, params)
    return PretrainResult(checkpoint_path=ckpt_path, log_path=log_path,
                          final_losses=final, diverged=diverged, counters=counters)


def vote_accuracy(examples: list[PretrainExample], params: dict[str, ad.Tensor],
                  config: ModelConfig, batch_size: int = 64,
                  use_vote_lane: bool = True) -> float:
    """Fraction of examples whose vote class the vote head predicts (eval
    mode, argmax over the ten classes)."""
    if not examples:
        raise DataError("vote_accuracy: no examples")
    hits = 0
    for i in range(0, len(examples), batch_size):
        pb = make_pretrain_batch(examples[i: i + batch_size], use_vote_lane=use_vote_lane)
        _, expert_vec = forward(pb.batch, params, config)
        logits = ad.matmul(expert_vec, params["vote_head_w"]) + params["vote_head_bias"]
        pred = logits.data.argmax(axis=1) + 1
        hits += int((pred == pb.vote_classes).sum())
    return hits / len(examples)
