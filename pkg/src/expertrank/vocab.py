"""Word and vote-score vocabularies.

The word vocabulary reserves ids 0..4 for [PAD], [UNK], [MASK], [SEP],
[HSEP]; natural tokens (lowercased alphanumeric runs) can never collide with
those bracketed strings. The vote vocabulary is fixed: PAD at 0 plus the ten
score classes 1..10.
"""

from __future__ import annotations

import re
from collections import Counter
from pathlib import Path

from .corpus import DataError

PAD, UNK, MASK, SEP, HSEP = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ["[PAD]", "[UNK]", "[MASK]", "[SEP]", "[HSEP]"]
NUM_SPECIALS = len(SPECIAL_TOKENS)

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(title: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation boundaries."""
    return _TOKEN_RE.findall(title.lower())


class Vocabulary:
    """Frequency-cut token vocabulary with fixed special slots."""

    def __init__(self, tokens: list[str], min_freq: int):
        self.min_freq = min_freq
        self.id_to_token = SPECIAL_TOKENS + tokens
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def first_regular_id(self) -> int:
        return NUM_SPECIALS

    def encode(self, title: str) -> list[int]:
        """Token ids for a title; unknowns map to UNK, empty titles to [UNK]."""
        ids = [self.token_to_id.get(tok, UNK) for tok in tokenize(title)]
        return ids if ids else [UNK]

    def decode(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids]


def build_vocab(titles, min_freq: int = 2) -> Vocabulary:
    """Count tokens over all titles; keep those with frequency >= min_freq,
    ordered by (frequency desc, token asc)."""
    counts: Counter[str] = Counter()
    n_titles = 0
    for title in titles:
        n_titles += 1
        counts.update(tokenize(title))
    if n_titles == 0:
        raise DataError("build_vocab: empty title set")
    reserved = set(SPECIAL_TOKENS)
    kept = [(tok, c) for tok, c in counts.items() if c >= min_freq and tok not in reserved]
    kept.sort(key=lambda tc: (-tc[1], tc[0]))
    return Vocabulary([tok for tok, _ in kept], min_freq=min_freq)


def save_vocab(vocab: Vocabulary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok in vocab.id_to_token:
            fh.write(tok + "\n")


def load_vocab(path, min_freq: int = 0) -> Vocabulary:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if lines[:NUM_SPECIALS] != SPECIAL_TOKENS:
        raise DataError(f"{path}: missing special-token header")
    return Vocabulary(lines[NUM_SPECIALS:], min_freq=min_freq)


class VoteVocab:
    """Vote-class vocabulary: PAD plus classes 1..10."""

    PAD = 0
    NUM_CLASSES = 10

    def __len__(self) -> int:
        return self.NUM_CLASSES + 1  # 11 ids including PAD

    @staticmethod
    def class_to_id(vote_class: int) -> int:
        if not 1 <= vote_class <= VoteVocab.NUM_CLASSES:
            raise DataError(f"vote class {vote_class} outside 1..{VoteVocab.NUM_CLASSES}")
        return vote_class

    @staticmethod
    def id_to_class(vote_id: int) -> int:
        if not 1 <= vote_id <= VoteVocab.NUM_CLASSES:
            raise DataError(f"vote id {vote_id} is PAD or out of range")
        return vote_id


VOTE_VOCAB_SIZE = 11
