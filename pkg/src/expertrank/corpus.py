"""Corpus ingestion and construction.

Parses StackExchange-style Posts.xml dumps (or generates synthetic corpora
with a planted expertise signal), normalizes answer vote scores onto a 1..10
log scale, assembles per-expert answering histories, and produces
chronological train/validation/test splits. All outputs round-trip through a
small set of delimited text files (see FORMATS.md).
"""

from __future__ import annotations

import math
import string
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

TRAIN_FRACTION = 0.8
VALIDATION_FRACTION = 0.1
MIN_SPLIT_QUESTIONS = 10


class DataError(Exception):
    """Input data is missing, malformed, or too small for the request."""


@dataclass
class QuestionRecord:
    question_id: int
    title: str
    accepted_answer_id: int | None
    creation_time: float
    raw_score: int


@dataclass
class AnswerRecord:
    answer_id: int
    parent_question_id: int
    owner_expert_id: int
    raw_vote_score: int
    creation_time: float


@dataclass
class HistoryItem:
    question_id: int
    normalized_vote: int
    answer_time: float


@dataclass
class ExpertProfile:
    expert_id: int  # dense, 0-based
    raw_owner_id: int
    history: list[HistoryItem] = field(default_factory=list)


@dataclass
class ParseStats:
    questions: int = 0
    answers: int = 0
    dropped_questions: int = 0
    dropped_answers: int = 0
    skipped_other: int = 0


def _parse_time(text: str) -> float:
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def parse_posts(source) -> tuple[list[QuestionRecord], list[AnswerRecord], ParseStats]:
    """Parse a Posts.xml rows file into question and answer records.

    PostTypeId=1 rows become questions (dropped if Title missing/blank),
    PostTypeId=2 rows become answers (dropped if OwnerUserId or ParentId
    missing); other post types are skipped. Drops are counted, not fatal.
    """
    questions: list[QuestionRecord] = []
    answers: list[AnswerRecord] = []
    stats = ParseStats()
    try:
        for _, elem in ET.iterparse(source, events=("end",)):
            if elem.tag != "row":
                continue
            a = elem.attrib
            ptype = a.get("PostTypeId")
            if ptype == "1":
                title = (a.get("Title") or "").strip()
                if not title or "Id" not in a or "CreationDate" not in a:
                    stats.dropped_questions += 1
                else:
                    acc = a.get("AcceptedAnswerId")
                    questions.append(QuestionRecord(
                        question_id=int(a["Id"]),
                        title=title,
                        accepted_answer_id=int(acc) if acc is not None else None,
                        creation_time=_parse_time(a["CreationDate"]),
                        raw_score=int(a.get("Score", "0")),
                    ))
                    stats.questions += 1
            elif ptype == "2":
                if "OwnerUserId" not in a or "ParentId" not in a or "Id" not in a or "CreationDate" not in a:
                    stats.dropped_answers += 1
                else:
                    answers.append(AnswerRecord(
                        answer_id=int(a["Id"]),
                        parent_question_id=int(a["ParentId"]),
                        owner_expert_id=int(a["OwnerUserId"]),
                        raw_vote_score=int(a.get("Score", "0")),
                        creation_time=_parse_time(a["CreationDate"]),
                    ))
                    stats.answers += 1
            else:
                stats.skipped_other += 1
            elem.clear()
    except ET.ParseError as exc:
        line, col = exc.position
        raise DataError(f"malformed XML at line {line}, column {col}: {exc}") from exc
    return questions, answers, stats


# ---------------------------------------------------------------------------
# Vote normalization
# ---------------------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class VoteNormalizer:
    """Maps raw vote scores onto integer classes 1..10.

    Pipeline: shift so the corpus minimum lands on 1, take ln, then scale the
    log range linearly onto [1, 10] and round. Raw scores outside the fitted
    range (frozen stats applied to later data) clamp to the endpoints.
    """

    v_min_raw: int
    v_max_raw: int
    log_min: float
    log_max: float

    @classmethod
    def fit(cls, raw_scores) -> "VoteNormalizer":
        scores = list(raw_scores)
        if not scores:
            raise DataError("normalize_votes: empty score list")
        v_min, v_max = min(scores), max(scores)
        return cls(v_min_raw=v_min, v_max_raw=v_max,
                   log_min=0.0, log_max=math.log(v_max - v_min + 1))

    @property
    def degenerate(self) -> bool:
        return self.v_min_raw == self.v_max_raw

    def normalize(self, raw: int) -> int:
        if self.degenerate:
            return 1
        shifted = max(1, raw - self.v_min_raw + 1)
        level = math.log(shifted)
        value = 9.0 * (level - self.log_min) / (self.log_max - self.log_min) + 1.0
        return min(10, max(1, _round_half_up(value)))


def normalize_votes(raw_scores) -> tuple[VoteNormalizer, list[int]]:
    norm = VoteNormalizer.fit(raw_scores)
    return norm, [norm.normalize(v) for v in raw_scores]


# ---------------------------------------------------------------------------
# Profiles and splits
# ---------------------------------------------------------------------------

def build_profiles(questions: list[QuestionRecord], answers: list[AnswerRecord],
                   normalizer: VoteNormalizer) -> tuple[list[ExpertProfile], dict[int, int]]:
    """One profile per owner with >=1 answer whose parent question exists.

    Dense ids are assigned by ascending raw owner id; each history is sorted
    by answer creation time (ties by question id).
    """
    known = {q.question_id for q in questions}
    by_owner: dict[int, list[HistoryItem]] = {}
    for ans in answers:
        if ans.parent_question_id not in known:
            continue
        item = HistoryItem(ans.parent_question_id,
                           normalizer.normalize(ans.raw_vote_score),
                           ans.creation_time)
        by_owner.setdefault(ans.owner_expert_id, []).append(item)
    id_map = {raw: dense for dense, raw in enumerate(sorted(by_owner))}
    profiles = []
    for raw, dense in id_map.items():
        history = sorted(by_owner[raw], key=lambda h: (h.answer_time, h.question_id))
        profiles.append(ExpertProfile(expert_id=dense, raw_owner_id=raw, history=history))
    return profiles, id_map


@dataclass
class SplitSpec:
    """Chronological 80/10/10 partition of ranking-target question ids."""

    train: list[int]
    validation: list[int]
    test: list[int]

    def section(self, name: str) -> list[int]:
        if name not in ("train", "validation", "test"):
            raise DataError(f"unknown split section: {name}")
        return getattr(self, name)


def chronological_split(questions: list[QuestionRecord]) -> SplitSpec:
    """Sort by creation time; first 80% train, next 10% validation, rest test."""
    if len(questions) < MIN_SPLIT_QUESTIONS:
        raise DataError(f"need >= {MIN_SPLIT_QUESTIONS} questions to split, got {len(questions)}")
    ordered = sorted(questions, key=lambda q: (q.creation_time, q.question_id))
    n = len(ordered)
    n_train = int(n * TRAIN_FRACTION)
    n_val = int(n * VALIDATION_FRACTION)
    ids = [q.question_id for q in ordered]
    return SplitSpec(train=ids[:n_train],
                     validation=ids[n_train:n_train + n_val],
                     test=ids[n_train + n_val:])


# ---------------------------------------------------------------------------
# Synthetic corpus with a planted signal
# ---------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    experts: int = 50
    topics: int = 5
    questions: int = 2000
    seed: int = 0
    vocab_seed: int | None = None  # share word pools across corpora when set
    words_per_topic: int = 30
    title_len: tuple[int, int] = (4, 8)
    extra_answers: tuple[int, int] = (1, 3)
    affinity_main: float = 1.0
    affinity_off: float = 0.15
    main_skill_range: tuple[float, float] = (0.5, 0.9)
    off_skill_range: tuple[float, float] = (0.05, 0.3)
    planted_star_skill: float | None = None  # expert t dominates topic t when set
    pick_sharpness: float = 3.0
    vote_scale: float = 20.0
    vote_noise: float = 1.5
    vote_offset: int = -4
    vote_rule: str = "skill"  # or "token": class planted on a title token
    start_time: float = 1_000_000.0
    time_step: float = 100.0


_COMMON_WORDS = ["how", "why", "what", "does", "can", "when", "which", "where"]


def _topic_word_pools(cfg: SyntheticConfig) -> list[list[str]]:
    rng = np.random.default_rng(cfg.seed if cfg.vocab_seed is None else cfg.vocab_seed)
    syllables = [c + v for c in "bcdfglmnprst" for v in "aeiou"]
    seen = set(_COMMON_WORDS)
    pools = []
    for _ in range(cfg.topics):
        pool = []
        while len(pool) < cfg.words_per_topic:
            word = "".join(rng.choice(syllables) for _ in range(int(rng.integers(2, 4))))
            if word not in seen:
                seen.add(word)
                pool.append(word)
        pools.append(pool)
    return pools


def generate_synthetic(cfg: SyntheticConfig) -> tuple[list[QuestionRecord], list[AnswerRecord]]:
    """Generate a corpus where topical interest and per-topic skill drive
    who answers and who gets accepted.

    Each expert has a main topic (high affinity, skill from
    main_skill_range) and is weaker elsewhere (off_skill_range). The
    accepted answerer is sampled proportional to affinity * exp(sharpness *
    skill), so acceptance depends on the (expert, topic) pair rather than a
    global popularity prior. Raw votes track the answerer's skill on the
    question's topic (rule "skill") or a planted grade token in the title
    (rule "token", raw = 2**(k-1) - 1, which normalizes exactly to class k
    once 0 and 511 both occur). With planted_star_skill set, expert t
    dominates topic t outright.
    """
    if cfg.experts <= 0 or cfg.topics <= 0 or cfg.questions <= 0:
        raise DataError("synthetic config needs positive experts/topics/questions")
    if cfg.vote_rule not in ("skill", "token"):
        raise DataError(f"unknown vote_rule: {cfg.vote_rule}")
    rng = np.random.default_rng(cfg.seed)
    pools = _topic_word_pools(cfg)

    main_topic = np.arange(cfg.experts) % cfg.topics
    is_main = main_topic[None, :] == np.arange(cfg.topics)[:, None]  # (topics, experts)
    skill = np.where(
        is_main,
        rng.uniform(cfg.main_skill_range[0], cfg.main_skill_range[1], size=cfg.experts)[None, :],
        rng.uniform(cfg.off_skill_range[0], cfg.off_skill_range[1],
                    size=(cfg.topics, cfg.experts)))
    if cfg.planted_star_skill is not None:
        for t in range(min(cfg.topics, cfg.experts)):
            skill[t, t] = cfg.planted_star_skill
    affinity = np.where(is_main, cfg.affinity_main, cfg.affinity_off)
    pick_weight = affinity * np.exp(cfg.pick_sharpness * skill)

    questions: list[QuestionRecord] = []
    answers: list[AnswerRecord] = []
    next_answer_id = cfg.questions + 1
    lo, hi = cfg.title_len
    for i in range(cfg.questions):
        topic = int(rng.integers(cfg.topics))
        qid = i + 1
        qtime = cfg.start_time + i * cfg.time_step
        n_words = int(rng.integers(lo, hi + 1))
        words = [str(rng.choice(_COMMON_WORDS))]
        words += [pools[topic][int(rng.integers(len(pools[topic])))] for _ in range(max(1, n_words - 1))]
        if cfg.vote_rule == "token":
            # force both endpoint classes to occur so normalization is exact
            grade = 1 if i == 0 else (10 if i == 1 else int(rng.integers(1, 11)))
            words.insert(int(rng.integers(len(words) + 1)), f"grade{grade}")
            planted_raw = 2 ** (grade - 1) - 1

        probs = pick_weight[topic] / pick_weight[topic].sum()
        accepted = int(rng.choice(cfg.experts, p=probs))
        others_pool = np.delete(np.arange(cfg.experts), accepted)
        others_w = affinity[topic][others_pool]
        n_extra = int(rng.integers(cfg.extra_answers[0], cfg.extra_answers[1] + 1))
        extras = rng.choice(others_pool, size=min(n_extra, len(others_pool)),
                            replace=False, p=others_w / others_w.sum())

        accepted_answer_id = None
        for j, expert in enumerate([accepted] + [int(e) for e in extras]):
            if cfg.vote_rule == "token":
                raw = planted_raw
            else:
                raw = int(round(cfg.vote_scale * skill[topic, expert]
                                + rng.normal(0.0, cfg.vote_noise))) + cfg.vote_offset
            aid = next_answer_id
            next_answer_id += 1
            if j == 0:
                accepted_answer_id = aid
            answers.append(AnswerRecord(
                answer_id=aid, parent_question_id=qid, owner_expert_id=expert,
                raw_vote_score=raw, creation_time=qtime + 1.0 + j))
        questions.append(QuestionRecord(
            question_id=qid, title=" ".join(words),
            accepted_answer_id=accepted_answer_id,
            creation_time=qtime, raw_score=int(rng.integers(0, 5))))
    return questions, answers


# ---------------------------------------------------------------------------
# Assembled corpus
# ---------------------------------------------------------------------------

@dataclass
class Corpus:
    """Everything downstream stages need, with derived indexes."""

    questions: dict[int, QuestionRecord]
    answers: list[AnswerRecord]
    profiles: list[ExpertProfile]
    owner_id_map: dict[int, int]
    normalizer: VoteNormalizer
    split: SplitSpec

    def __post_init__(self):
        self.answers_by_question: dict[int, list[AnswerRecord]] = {}
        for ans in self.answers:
            self.answers_by_question.setdefault(ans.parent_question_id, []).append(ans)
        for lst in self.answers_by_question.values():
            lst.sort(key=lambda a: (a.creation_time, a.answer_id))
        self._answer_by_id = {a.answer_id: a for a in self.answers}
        self._dense_by_raw = self.owner_id_map

    @property
    def num_experts(self) -> int:
        return len(self.profiles)

    def accepted_expert(self, question_id: int) -> int | None:
        """Dense id of the accepted answerer, if resolvable."""
        q = self.questions.get(question_id)
        if q is None or q.accepted_answer_id is None:
            return None
        ans = self._answer_by_id.get(q.accepted_answer_id)
        if ans is None or ans.parent_question_id != question_id:
            return None
        return self._dense_by_raw.get(ans.owner_expert_id)

    def question_answerers(self, question_id: int) -> list[int]:
        """Dense ids of all answerers, earliest answer first, deduplicated."""
        out: list[int] = []
        for ans in self.answers_by_question.get(question_id, []):
            dense = self._dense_by_raw.get(ans.owner_expert_id)
            if dense is not None and dense not in out:
                out.append(dense)
        return out

    def ranking_targets(self, section: str) -> list[int]:
        """Split questions whose accepted answerer is a known expert."""
        return [qid for qid in self.split.section(section)
                if self.accepted_expert(qid) is not None]


def build_corpus(questions: list[QuestionRecord], answers: list[AnswerRecord]) -> Corpus:
    """Validate records, split chronologically, fit the vote normalizer on
    the train window only, then build profiles with the frozen stats."""
    known = {q.question_id for q in questions}
    answer_ids = {a.answer_id: a for a in answers}
    cleaned_questions = []
    for q in questions:
        acc = q.accepted_answer_id
        if acc is not None:
            ans = answer_ids.get(acc)
            if ans is None or ans.parent_question_id != q.question_id:
                q = replace(q, accepted_answer_id=None)
        cleaned_questions.append(q)

    with_accepted = [q for q in cleaned_questions if q.accepted_answer_id is not None]
    split = chronological_split(with_accepted)
    qtime = {q.question_id: q.creation_time for q in cleaned_questions}
    train_end = max(qtime[qid] for qid in split.train)
    train_votes = [a.raw_vote_score for a in answers
                   if a.parent_question_id in known and qtime[a.parent_question_id] <= train_end]
    if not train_votes:
        raise DataError("no answers in the training window to fit vote normalization")
    normalizer = VoteNormalizer.fit(train_votes)

    profiles, id_map = build_profiles(cleaned_questions, answers, normalizer)
    return Corpus(questions={q.question_id: q for q in cleaned_questions},
                  answers=answers, profiles=profiles, owner_id_map=id_map,
                  normalizer=normalizer, split=split)


# ---------------------------------------------------------------------------
# Delimited file round trip
# ---------------------------------------------------------------------------

def _clean_text(text: str) -> str:
    return " ".join(text.split())


def _fmt_time(t: float) -> str:
    return repr(float(t))


def save_corpus(corpus: Corpus, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "questions.tsv", "w", encoding="utf-8") as fh:
        fh.write("question_id\ttitle\taccepted_answer_id\tcreation_time\traw_score\n")
        for q in sorted(corpus.questions.values(), key=lambda q: q.question_id):
            acc = "" if q.accepted_answer_id is None else str(q.accepted_answer_id)
            fh.write(f"{q.question_id}\t{_clean_text(q.title)}\t{acc}\t{_fmt_time(q.creation_time)}\t{q.raw_score}\n")
    with open(out / "answers.tsv", "w", encoding="utf-8") as fh:
        fh.write("answer_id\tparent_question_id\towner_expert_id\traw_vote_score\tcreation_time\n")
        for a in sorted(corpus.answers, key=lambda a: a.answer_id):
            fh.write(f"{a.answer_id}\t{a.parent_question_id}\t{a.owner_expert_id}\t{a.raw_vote_score}\t{_fmt_time(a.creation_time)}\n")
    with open(out / "profiles.tsv", "w", encoding="utf-8") as fh:
        fh.write("expert_id\traw_owner_id\thistory\n")
        for p in corpus.profiles:
            hist = ",".join(f"{h.question_id}:{h.normalized_vote}:{_fmt_time(h.answer_time)}" for h in p.history)
            fh.write(f"{p.expert_id}\t{p.raw_owner_id}\t{hist}\n")
    with open(out / "split.txt", "w", encoding="utf-8") as fh:
        for name in ("train", "validation", "test"):
            fh.write(f"[{name}]\n")
            for qid in corpus.split.section(name):
                fh.write(f"{qid}\n")
    norm = corpus.normalizer
    with open(out / "meta.txt", "w", encoding="utf-8") as fh:
        fh.write(f"v_min_raw = {norm.v_min_raw}\n")
        fh.write(f"v_max_raw = {norm.v_max_raw}\n")
        fh.write(f"log_min = {norm.log_min!r}\n")
        fh.write(f"log_max = {norm.log_max!r}\n")


def load_corpus(in_dir) -> Corpus:
    src = Path(in_dir)
    for name in ("questions.tsv", "answers.tsv", "profiles.tsv", "split.txt", "meta.txt"):
        if not (src / name).exists():
            raise DataError(f"corpus directory {src} is missing {name}; run ingest or synth first")
    questions = []
    for row in _read_tsv(src / "questions.tsv", 5):
        questions.append(QuestionRecord(int(row[0]), row[1],
                                        int(row[2]) if row[2] else None,
                                        float(row[3]), int(row[4])))
    answers = []
    for row in _read_tsv(src / "answers.tsv", 5):
        answers.append(AnswerRecord(int(row[0]), int(row[1]), int(row[2]), int(row[3]), float(row[4])))
    profiles = []
    id_map: dict[int, int] = {}
    for row in _read_tsv(src / "profiles.tsv", 3):
        dense, raw = int(row[0]), int(row[1])
        id_map[raw] = dense
        history = []
        if row[2]:
            for part in row[2].split(","):
                qid, vote, t = part.split(":")
                history.append(HistoryItem(int(qid), int(vote), float(t)))
        profiles.append(ExpertProfile(dense, raw, history))
    profiles.sort(key=lambda p: p.expert_id)

    sections: dict[str, list[int]] = {"train": [], "validation": [], "test": []}
    current = None
    for line in (src / "split.txt").read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            if current not in sections:
                raise DataError(f"split.txt: unknown section {current}")
        elif current is None:
            raise DataError("split.txt: question id before any section header")
        else:
            sections[current].append(int(line))
    meta = read_keyvalues(src / "meta.txt")
    normalizer = VoteNormalizer(v_min_raw=int(meta["v_min_raw"]), v_max_raw=int(meta["v_max_raw"]),
                                log_min=float(meta["log_min"]), log_max=float(meta["log_max"]))
    return Corpus(questions={q.question_id: q for q in questions}, answers=answers,
                  profiles=profiles, owner_id_map=id_map, normalizer=normalizer,
                  split=SplitSpec(**sections))


def _read_tsv(path: Path, n_cols: int):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if len(header.rstrip("\n").split("\t")) != n_cols:
            raise DataError(f"{path}: expected {n_cols} columns in header")
        for lineno, line in enumerate(fh, start=2):
            row = line.rstrip("\n").split("\t")
            if len(row) != n_cols:
                raise DataError(f"{path}:{lineno}: expected {n_cols} columns, got {len(row)}")
            yield row


def read_keyvalues(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}: expected 'key = value' lines, got: {line}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def corpus_stats(corpus: Corpus) -> dict[str, float]:
    """Dataset summary: density (%), questions, answerers, answers, average
    title length in whitespace tokens."""
    n_q = len(corpus.questions)
    n_a = len(corpus.answers)
    n_e = corpus.num_experts
    avg_title = (sum(len(q.title.split()) for q in corpus.questions.values()) / n_q) if n_q else 0.0
    density = 100.0 * n_a / (n_q * n_e) if n_q and n_e else 0.0
    return {"density_pct": density, "questions": n_q, "answerers": n_e,
            "answers": n_a, "avg_title_length": avg_title}
