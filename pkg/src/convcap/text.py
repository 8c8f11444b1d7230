"""Tokenization, vocabulary construction, caption datasets, and the
training-caption selection policy.

Captions are stored as lowercase token lists. The vocabulary keeps every
token that appears at least min_count times in the training split; rarer
tokens encode to UNK. Captions longer than the configured maximum are not
deleted from training: each over-length slot is replaced by another caption
of the same image that fits, falling back to a truncated copy so the number
of training pairs per image never changes.
"""

import json
import string
import zlib
from dataclasses import dataclass, field

import numpy as np

from convcap.errors import DataError, FormatError

START, END, UNK, PAD = 0, 1, 2, 3
SPECIAL_TOKENS = ("<start>", "<end>", "<unk>", "<pad>")

_PUNCT = string.punctuation


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip edge punctuation, drop empties."""
    out = []
    for raw in text.lower().split():
        tok = raw.strip(_PUNCT)
        if tok:
            out.append(tok)
    return out


@dataclass
class Vocabulary:
    tokens: list[str]             # index -> token, specials first
    counts: dict[str, int]        # training-split frequency of retained tokens
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, toks) -> list[int]:
        return [self.index.get(t, UNK) for t in toks]

    def decode(self, ids) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise ValueError(f"decode: index {i} out of range for vocabulary of {len(self.tokens)}")
            out.append(self.tokens[i])
        return out

    def to_json(self) -> str:
        return json.dumps({"tokens": self.tokens, "counts": self.counts})

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        try:
            obj = json.loads(text)
            tokens = list(obj["tokens"])
            counts = dict(obj["counts"])
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise FormatError(f"bad vocabulary file: {e}") from e
        if tokens[:4] != list(SPECIAL_TOKENS):
            raise FormatError("vocabulary file does not start with the special tokens")
        return cls(tokens=tokens, counts=counts)


@dataclass
class ImageRecord:
    image_id: str
    split: str
    captions: list[list[str]]


class CaptionDataset:
    """Image records with train/dev/test splits and tokenized captions."""

    def __init__(self, records: list[ImageRecord]):
        seen = set()
        for rec in records:
            if rec.split not in ("train", "dev", "test"):
                raise DataError(f"{rec.image_id}: unknown split {rec.split!r}")
            if rec.image_id in seen:
                raise DataError(f"duplicate image id {rec.image_id!r}")
            seen.add(rec.image_id)
            if not rec.captions:
                raise DataError(f"{rec.image_id}: image has no captions")
            if any(not c for c in rec.captions):
                raise DataError(f"{rec.image_id}: empty caption after tokenization")
        self.records = records

    def split(self, name: str) -> list[ImageRecord]:
        return [r for r in self.records if r.split == name]

    def ids(self, split=None) -> list[str]:
        return [r.image_id for r in self.records if split is None or r.split == split]

    def __len__(self):
        return len(self.records)


def load_captions_jsonl(path) -> CaptionDataset:
    """Read a captions file: one JSON object {id, split, captions} per line."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rec = ImageRecord(
                    image_id=str(obj["id"]),
                    split=str(obj["split"]),
                    captions=[tokenize(c) for c in obj["captions"]],
                )
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise FormatError(f"{path}:{lineno}: bad captions record: {e}") from e
            records.append(rec)
    return CaptionDataset(records)


def save_captions_jsonl(path, entries):
    """Write caption records; entries are (id, split, [caption strings])."""
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, split, captions in entries:
            fh.write(json.dumps({"id": image_id, "split": split, "captions": captions}) + "\n")


def build_vocab(dataset: CaptionDataset, min_count: int = 5) -> Vocabulary:
    """Count tokens over the training split and keep those with frequency
    >= min_count, ordered by descending count then token text."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    train = dataset.split("train")
    if not train:
        raise DataError("cannot build a vocabulary: training split is empty")
    counts: dict[str, int] = {}
    for rec in train:
        for cap in rec.captions:
            for tok in cap:
                counts[tok] = counts.get(tok, 0) + 1
    kept = sorted((t for t, c in counts.items() if c >= min_count),
                  key=lambda t: (-counts[t], t))
    tokens = list(SPECIAL_TOKENS) + kept
    return Vocabulary(tokens=tokens, counts={t: counts[t] for t in kept})


@dataclass
class TrainingPair:
    image_id: str
    input_ids: np.ndarray    # [T] = [START, x1..xL, PAD...]
    target_ids: np.ndarray   # [T] = [x1..xL, END, PAD...]
    mask: np.ndarray         # {0,1}[T], ones over the first L+1 positions


def make_pair(image_id: str, token_ids: list[int], max_len: int) -> TrainingPair:
    length = len(token_ids)
    if length > max_len:
        raise ValueError(f"caption of {length} tokens exceeds max_len {max_len}")
    t = max_len + 1
    inp = np.full(t, PAD, dtype=np.int64)
    tgt = np.full(t, PAD, dtype=np.int64)
    mask = np.zeros(t, dtype=np.int64)
    inp[0] = START
    inp[1:1 + length] = token_ids
    tgt[:length] = token_ids
    tgt[length] = END
    mask[:length + 1] = 1
    return TrainingPair(image_id, inp, tgt, mask)


def select_training_captions(dataset: CaptionDataset, vocab: Vocabulary,
                             max_len: int, rng: np.random.Generator) -> list[TrainingPair]:
    """Build training pairs from the train split under the length policy.

    Every caption slot longer than max_len is replaced by a uniformly
    sampled caption of the same image with length <= max_len. When the
    image has no qualifying caption, its shortest caption truncated to
    max_len fills the slot, so the pair count always equals the caption
    count.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    pairs = []
    for rec in dataset.split("train"):
        short = [c for c in rec.captions if len(c) <= max_len]
        for cap in rec.captions:
            if len(cap) > max_len:
                if short:
                    cap = short[rng.integers(len(short))]
                else:
                    cap = min(rec.captions, key=len)[:max_len]
            pairs.append(make_pair(rec.image_id, vocab.encode(cap), max_len))
    return pairs


def dev_pairs(dataset: CaptionDataset, vocab: Vocabulary, max_len: int,
              split: str = "dev") -> list[TrainingPair]:
    """Deterministic pairs for held-out loss: over-length captions are
    truncated rather than randomly replaced."""
    pairs = []
    for rec in dataset.split(split):
        for cap in rec.captions:
            pairs.append(make_pair(rec.image_id, vocab.encode(cap[:max_len]), max_len))
    return pairs


def stable_id_hash(image_id: str) -> int:
    """Deterministic 32-bit hash of an image id (split assignment, rng streams)."""
    return zlib.crc32(image_id.encode("utf-8")) & 0xFFFFFFFF
