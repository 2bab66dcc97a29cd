"""Poem records, tokenization, vocabulary and negative-example corpora."""
from __future__ import annotations

import json
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SOURCES = ("unim", "multim", "paragraph", "generated", "disordered")
ORIGINS = ("human", "retrieved")

BOS, EOS, BR, UNK, PAD = "<bos>", "<eos>", "<br>", "<unk>", "<pad>"
RESERVED = (BOS, EOS, BR, UNK, PAD)
BOS_ID, EOS_ID, BR_ID, UNK_ID, PAD_ID = range(5)

_ALLOWED_CHARS = frozenset(string.ascii_letters + string.digits + string.punctuation + " \t\n")
_PUNCT = frozenset(string.punctuation)


class CorpusError(ValueError):
    pass


def _collapse(text):
    return " ".join(text.split())


@dataclass(frozen=True)
class Poem:
    id: str
    lines: tuple
    source: str = "unim"

    def __post_init__(self):
        object.__setattr__(self, "lines", tuple(self.lines))
        if not self.id:
            raise CorpusError("poem id must be nonempty")
        if not self.lines:
            raise CorpusError(f"poem {self.id!r} has no lines")
        if any(not _collapse(line) for line in self.lines):
            raise CorpusError(f"poem {self.id!r} has an empty line")
        if self.source not in SOURCES:
            raise CorpusError(f"poem {self.id!r}: unknown source {self.source!r}")

    @property
    def text(self):
        return "\n".join(self.lines)

    def to_json(self):
        return {"id": self.id, "lines": list(self.lines), "source": self.source}


@dataclass(frozen=True)
class PairedExample:
    image_id: str
    poem_id: str
    origin: str = "human"

    def __post_init__(self):
        if self.origin not in ORIGINS:
            raise CorpusError(f"unknown pair origin {self.origin!r}")

    def to_json(self):
        return {"image_id": self.image_id, "poem_id": self.poem_id, "origin": self.origin}


# ---------------------------------------------------------------- tokenization

def split_tokens(line):
    """Lowercase ``line`` and split it into word and punctuation tokens.

    Leading and trailing punctuation characters of each whitespace-separated
    chunk become tokens of their own; inner punctuation (``don't``) stays put.

    >>> split_tokens("Hello, (dark) world!")
    ['hello', ',', '(', 'dark', ')', 'world', '!']
    """
    tokens = []
    for chunk in line.lower().split():
        start, end = 0, len(chunk)
        while start < end and chunk[start] in _PUNCT:
            start += 1
        while end > start and chunk[end - 1] in _PUNCT:
            end -= 1
        tokens.extend(chunk[:start])
        if start < end:
            tokens.append(chunk[start:end])
        tokens.extend(chunk[end:])
    return tokens


def normalize_line(line):
    return " ".join(split_tokens(line))


def poem_tokens(poem):
    """Flattened word tokens of a poem, line breaks dropped."""
    out = []
    for line in poem.lines:
        out.extend(split_tokens(line))
    return out


class Vocabulary:
    """Token <-> id bijection with the five reserved tokens at ids 0..4."""

    def __init__(self, tokens, min_freq=1):
        tokens = list(tokens)
        if tuple(tokens[:len(RESERVED)]) != RESERVED:
            raise CorpusError("vocabulary must start with the reserved tokens")
        self.itos = tokens
        self.stoi = {tok: i for i, tok in enumerate(tokens)}
        if len(self.stoi) != len(tokens):
            raise CorpusError("duplicate token in vocabulary")
        self.min_freq = min_freq

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def id(self, token):
        return self.stoi.get(token, UNK_ID)

    def token(self, idx):
        return self.itos[idx]

    def save(self, path):
        Path(path).write_text(json.dumps({"min_freq": self.min_freq, "tokens": self.itos}) + "\n")

    @classmethod
    def load(cls, path):
        data = json.loads(Path(path).read_text())
        return cls(data["tokens"], data.get("min_freq", 1))


def build_vocabulary(poems, min_freq=1):
    if not poems:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for poem in poems:
        counts.update(tok for tok in poem_tokens(poem) if tok not in RESERVED)
    kept = sorted((tok for tok, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    if not kept:
        raise CorpusError(f"no token occurs at least {min_freq} times")
    return Vocabulary(list(RESERVED) + kept, min_freq)


def tokenize(poem, vocab):
    """[BOS] line1 [BR] line2 ... [EOS] as an int array."""
    ids = [BOS_ID]
    for i, line in enumerate(poem.lines):
        if i:
            ids.append(BR_ID)
        ids.extend(vocab.id(tok) for tok in split_tokens(line))
    if len(ids) == 1:
        raise CorpusError(f"poem {poem.id!r} has no tokens")
    ids.append(EOS_ID)
    return np.asarray(ids, dtype=np.int64)


def detokenize(ids, vocab, poem_id="generated", source="generated"):
    lines, current = [], []
    for idx in ids:
        idx = int(idx)
        if idx == EOS_ID:
            break
        if idx in (BOS_ID, PAD_ID):
            continue
        if idx == BR_ID:
            if current:
                lines.append(" ".join(current))
            current = []
        else:
            current.append(vocab.token(idx))
    if current:
        lines.append(" ".join(current))
    if not lines:
        raise CorpusError("token sequence holds no words (empty poem)")
    return Poem(poem_id, lines, source)


# -------------------------------------------------------------------- file I/O

def _read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                yield lineno, json.loads(raw)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_poems(path):
    poems, seen = [], set()
    for lineno, rec in _read_jsonl(path):
        try:
            if not isinstance(rec, dict):
                raise TypeError("record is not an object")
            if not isinstance(rec["lines"], list) or not all(isinstance(s, str) for s in rec["lines"]):
                raise TypeError("'lines' must be a list of strings")
            poem = Poem(str(rec["id"]), rec["lines"], rec.get("source", "unim"))
        except KeyError as exc:
            raise CorpusError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
        except (TypeError, CorpusError) as exc:
            raise CorpusError(f"{path}:{lineno}: {exc}") from None
        if poem.id in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate poem id {poem.id!r}")
        seen.add(poem.id)
        poems.append(poem)
    return poems


def save_poems(path, poems):
    write_jsonl(path, (p.to_json() for p in poems))


def load_pairs(path):
    pairs = []
    for lineno, rec in _read_jsonl(path):
        try:
            pairs.append(PairedExample(str(rec["image_id"]), str(rec["poem_id"]), rec.get("origin", "human")))
        except KeyError as exc:
            raise CorpusError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
        except CorpusError as exc:
            raise CorpusError(f"{path}:{lineno}: {exc}") from None
    return pairs


def save_pairs(path, pairs):
    write_jsonl(path, (p.to_json() for p in pairs))


def check_pairs(pairs, poem_ids, image_ids):
    """Raise if any pair refers to an unknown poem or image."""
    poem_ids, image_ids = set(poem_ids), set(image_ids)
    for p in pairs:
        if p.poem_id not in poem_ids:
            raise CorpusError(f"pair refers to unknown poem {p.poem_id!r}")
        if p.image_id not in image_ids:
            raise CorpusError(f"pair refers to unknown image {p.image_id!r}")


# ------------------------------------------------------------------- filtering

def dedup_key(poem):
    return _collapse(" ".join(poem.lines).lower())


def ascii_fraction(text):
    if not text:
        return 0.0
    return sum(c in _ALLOWED_CHARS for c in text) / len(text)


def filter_poems(poems, min_lines=3, max_lines=10, min_ascii=0.95):
    """Drop poems that are too short/long, mostly non-ASCII, or duplicated."""
    if min_lines > max_lines:
        raise CorpusError("min_lines must not exceed max_lines")
    kept, seen = [], set()
    for poem in poems:
        if not min_lines <= len(poem.lines) <= max_lines:
            continue
        if ascii_fraction("".join(poem.lines)) < min_ascii:
            continue
        key = dedup_key(poem)
        if key in seen:
            continue
        seen.add(key)
        kept.append(poem)
    return kept


# --------------------------------------------------------------- sentence pool

@dataclass
class SentencePool:
    entries: list = field(default_factory=list)  # (line text, origin poem id)

    def __len__(self):
        return len(self.entries)


def build_sentence_pool(poems):
    return SentencePool([(line, poem.id) for poem in poems for line in poem.lines])


def make_disordered(pool, rng, min_lines=3, max_lines=10, poem_id="disordered"):
    """Fake poem made of random pool lines; line count ~ Uniform{min..max}."""
    if not len(pool):
        raise CorpusError("sentence pool is empty")
    count = int(rng.integers(min_lines, max_lines + 1))
    replace = len(pool) < count
    picks = rng.choice(len(pool), size=count, replace=replace)
    return Poem(poem_id, [pool.entries[i][0] for i in picks], "disordered")


# -------------------------------------------------------------------- lexicons

ASPECTS = ("object", "scene", "sentiment")


@dataclass(frozen=True)
class LexiconSet:
    object: tuple
    scene: tuple
    sentiment: tuple

    def __post_init__(self):
        lists = {}
        for aspect in ASPECTS:
            words = tuple(w.strip().lower() for w in getattr(self, aspect))
            if len(set(words)) != len(words):
                raise CorpusError(f"{aspect} lexicon has duplicate words")
            object.__setattr__(self, aspect, words)
            lists[aspect] = set(words)
        for i, a in enumerate(ASPECTS):
            for b in ASPECTS[i + 1:]:
                common = lists[a] & lists[b]
                if common:
                    raise CorpusError(f"{a} and {b} lexicons share {sorted(common)[:3]}")

    def sizes(self):
        return tuple(len(getattr(self, a)) for a in ASPECTS)


def load_lexicons(directory):
    directory = Path(directory)
    words = {}
    for aspect in ASPECTS:
        text = (directory / f"{aspect}.txt").read_text(encoding="utf-8")
        words[aspect] = [w for w in (s.strip() for s in text.splitlines()) if w]
    return LexiconSet(**words)


def save_lexicons(directory, lexicons):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for aspect in ASPECTS:
        (directory / f"{aspect}.txt").write_text("".join(w + "\n" for w in getattr(lexicons, aspect)))


def extract_labels(poem, lexicons):
    """Binary presence vectors (object, scene, sentiment) over the lexicons."""
    present = set(poem_tokens(poem))
    return tuple(
        np.array([w in present for w in getattr(lexicons, aspect)], dtype=np.float64)
        for aspect in ASPECTS
    )
