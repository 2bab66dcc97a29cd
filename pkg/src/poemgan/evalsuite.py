"""Automatic poem metrics: BLEU-1/2/3, Novelty-2/3, embedding relevance, and the normalized Overall score."""
from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .corpus import Poem, poem_tokens
from .embedding import embed_image, embed_poem, relevance
from .features import encode_poem

METRICS = ("bleu1", "bleu2", "bleu3", "novelty2", "novelty3", "relevance")


class MinZeroError(ValueError):
    """A metric column has minimum 0, so (a - min) / min is undefined."""


class EmptyCandidateWarning(UserWarning):
    pass


def _tokens(poem):
    return poem_tokens(poem) if isinstance(poem, Poem) else list(poem)


def ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


# ------------------------------------------------------------------------ BLEU

def bleu_n(candidate, reference, n):
    """Single-reference BLEU-n with uniform weights and the standard brevity penalty.

    Both sides are flattened to word tokens with line breaks removed. An empty
    candidate scores 0 and raises an ``EmptyCandidateWarning``.
    """
    if n not in (1, 2, 3):
        raise ValueError("n must be 1, 2 or 3")
    cand, ref = _tokens(candidate), _tokens(reference)
    if not ref:
        raise ValueError("empty reference")
    if not cand:
        warnings.warn("empty candidate scores 0", EmptyCandidateWarning, stacklevel=2)
        return 0.0
    log_p = 0.0
    for k in range(1, n + 1):
        counts = Counter(ngrams(cand, k))
        total = sum(counts.values())
        if total == 0:
            return 0.0
        ref_counts = Counter(ngrams(ref, k))
        clipped = sum(min(c, ref_counts[g]) for g, c in counts.items())
        if clipped == 0:
            return 0.0
        log_p += math.log(clipped / total)
    c, r = len(cand), len(ref)
    bp = min(1.0, math.exp(1 - r / c))
    return bp * math.exp(log_p / n)


# --------------------------------------------------------------------- novelty

@dataclass
class NgramStats:
    counts: dict  # n -> Counter of n-gram tuples
    frequent: dict  # n -> set of the top_k most frequent n-grams
    top_k: int


def build_ngram_stats(poems, top_k=50, orders=(2, 3)):
    """N-gram counts over the training poems; the frequent set is the top_k by count (ties lexicographic)."""
    counts = {n: Counter() for n in orders}
    for poem in poems:
        toks = _tokens(poem)
        for n in orders:
            counts[n].update(ngrams(toks, n))
    frequent = {n: set(sorted(c, key=lambda g: (-c[g], g))[:top_k]) for n, c in counts.items()}
    return NgramStats(counts, frequent, top_k)


def novelty_n(poem, stats, n, inclusive=False):
    """Share of the poem's n-gram occurrences that are seen in training but not frequent.

    With ``inclusive`` n-grams never seen in training also count as novel.
    Poems with fewer than ``n`` tokens score 0.
    """
    grams = ngrams(_tokens(poem), n)
    if not grams:
        return 0.0
    seen, frequent = stats.counts[n], stats.frequent[n]
    hits = sum(1 for g in grams if g not in frequent and (inclusive or g in seen))
    return hits / len(grams)


# ------------------------------------------------------------------- relevance

def relevance_metric(image, poem, model, encoder):
    x = embed_image(image.vector(), model)
    m = embed_poem(encode_poem(poem, encoder), model)
    return relevance(x, m)


# --------------------------------------------------------------------- overall

def normalize_column(values, mode="min"):
    a = np.asarray(values, dtype=np.float64)
    lo = a.min()
    if mode == "min":
        if lo == 0:
            raise MinZeroError("column minimum is 0; (a - min) / min is undefined")
        return (a - lo) / lo
    if mode == "range":
        span = a.max() - lo
        return np.zeros_like(a) if span == 0 else (a - lo) / span
    raise ValueError(f"unknown normalization mode {mode!r}")


def overall(columns, mode="min"):
    """Overall score per system from metric columns (name -> per-system values).

    Every column is normalized by (a - min) / min (``mode="range"`` uses
    (a - min) / (max - min) instead); columns named ``bleu*`` and
    ``novelty*`` are averaged into one value each, and the result is the mean
    over the remaining metric groups.
    """
    lengths = {len(v) for v in columns.values()}
    if len(lengths) != 1 or lengths.pop() < 2:
        raise ValueError("need equal-length columns covering at least two systems")
    groups = {}
    for name, values in columns.items():
        key = "bleu" if name.startswith("bleu") else "novelty" if name.startswith("novelty") else name
        groups.setdefault(key, []).append(normalize_column(values, mode))
    return np.mean([np.mean(cols, axis=0) for cols in groups.values()], axis=0)


# ------------------------------------------------------------------ run report

@dataclass
class EvalReport:
    rows: list
    aggregates: dict
    overall: float | None = None
    extra: dict = field(default_factory=dict)

    def to_records(self):
        out = [dict(r) for r in self.rows]
        out.append({"aggregate": self.aggregates, "overall": self.overall})
        return out


def _row(poem, image, reference, model, encoder, stats):
    row = {"image_id": image.image_id}
    for n in (1, 2, 3):
        row[f"bleu{n}"] = bleu_n(poem, reference, n) if reference is not None else None
    for n in (2, 3):
        row[f"novelty{n}"] = novelty_n(poem, stats, n)
    row["relevance"] = relevance_metric(image, poem, model, encoder)
    return row


def evaluate_run(generated, references, images, model, encoder, stats, workers=1):
    """Per-image metrics for generated poems plus their corpus means.

    ``generated`` maps image id to the poem generated for it; ``references``
    maps image id to its human ground-truth poem (missing ids give null BLEU
    fields that are left out of the means).
    """
    items = list(generated.items())
    missing = [k for k, _ in items if k not in images]
    if missing:
        raise KeyError(f"no features for images {missing[:3]}")
    args = [(poem, images[k], references.get(k), model, encoder, stats) for k, poem in items]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(lambda a: _row(*a), args))
    else:
        rows = [_row(*a) for a in args]
    agg = {}
    for name in METRICS:
        vals = [r[name] for r in rows if r[name] is not None]
        agg[name] = float(np.mean(vals)) if vals else None
    agg["n_images"] = len(rows)
    return EvalReport(rows, agg)


def overall_for_reports(reports, mode="min"):
    """Fill in ``overall`` on each named report, comparing them as systems."""
    names = list(reports)
    columns = {m: [reports[n].aggregates[m] for n in names] for m in METRICS}
    if any(v is None for col in columns.values() for v in col):
        columns = {m: c for m, c in columns.items() if not m.startswith("bleu")}
    scores = overall(columns, mode)
    for name, s in zip(names, scores):
        reports[name].overall = float(s)
    return dict(zip(names, scores.tolist()))


def write_report(path, report):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in report.to_records():
            fh.write(json.dumps(rec) + "\n")


def format_table(report):
    head = ["image_id", *METRICS]
    lines = []
    for r in report.rows:
        lines.append([str(r["image_id"])] + ["-" if r[m] is None else f"{r[m]:.4f}" for m in METRICS])
    lines.append(["MEAN"] + ["-" if report.aggregates[m] is None else f"{report.aggregates[m]:.4f}"
                             for m in METRICS])
    widths = [max(len(h), *(len(row[i]) for row in lines)) for i, h in enumerate(head)]
    fmt = lambda row: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths)))
    return "\n".join([fmt(head)] + [fmt(r) for r in lines])
