"""Synthetic datasets with a planted image-poem correspondence.

``make_synthetic`` writes a small file-based corpus (features, poems, pairs,
paragraphs, lexicons) in which image ``i`` and poem ``i`` are generated from
the same keyword set. ``make_toy_task`` builds an in-memory themed language
for exercising the adversarial loop directly on image embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from . import corpus as C
from .features import ImageFeatures, save_features

OBJECTS = ("moon", "river", "stone", "lantern", "willow", "sparrow", "candle", "harbor")
SCENES = ("meadow", "canyon", "shore", "forest")
SENTIMENTS = ("lonely", "tender", "restless", "serene")
VERBS = ("sleeps", "burns", "waits", "sings", "falls", "turns")
PROSE = ("the", "committee", "reported", "that", "quarterly", "results", "were", "consistent", "with",
         "projections", "and", "further", "analysis", "of", "regional", "data", "is", "scheduled", "for",
         "review", "by", "management", "during", "next", "fiscal", "period")

TEMPLATES = (
    "{a} {b}",
    "{a} and {b}",
    "{a} {v} {b}",
    "{a} of {b}",
    "{b} {a}",
)


@dataclass
class SyntheticConfig:
    n_images: int = 50
    corpus_size: int = 100
    D: int = 16
    M: int = 64
    seed: int = 0
    n_paragraphs: int = 30
    noise: float = 0.05

    def __post_init__(self):
        if min(self.n_images, self.corpus_size, self.D, self.M) < 1:
            raise ValueError("sizes must be at least 1")


def _keyword_sets(rng, n, n_strict=None, max_overlap=2):
    """``n`` distinct (object, object, scene, sentiment) sets.

    The first ``n_strict`` (default all) share at most ``max_overlap`` words
    pairwise; the rest only have to differ from every earlier set.
    """
    n_strict = n if n_strict is None else n_strict
    combos = [(a, b, s, e) for a, b in combinations(range(len(OBJECTS)), 2)
              for s in range(len(SCENES)) for e in range(len(SENTIMENTS))]
    chosen, used = [], set()
    for limit, target in ((max_overlap, n_strict), (3, n)):
        for i in rng.permutation(len(combos)):
            if len(chosen) >= target:
                break
            if i in used:
                continue
            a, b, sc, se = combos[i]
            words = {OBJECTS[a], OBJECTS[b], SCENES[sc], SENTIMENTS[se]}
            if all(len(words & other) <= limit for other in chosen):
                chosen.append(words)
                used.add(i)
        if len(chosen) < target:
            raise ValueError(f"could not draw {target} keyword sets with overlap <= {limit}")
    order = OBJECTS + SCENES + SENTIMENTS
    return [tuple(sorted(w, key=order.index)) for w in chosen]


def _orthonormal(rng, D, n):
    """D x n projection with orthonormal columns when D >= n (random Gaussian otherwise)."""
    A = rng.normal(size=(D, n))
    return np.linalg.qr(A)[0] if D >= n else A / np.sqrt(D)


def _poem_lines(rng, words):
    """One line per keyword, each pairing it with the next one, so every keyword occurs exactly twice."""
    order = [words[i] for i in rng.permutation(len(words))]
    lines = []
    for k, a in enumerate(order):
        tpl = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
        lines.append(tpl.format(a=a, b=order[(k + 1) % len(order)], v=VERBS[rng.integers(len(VERBS))]))
    return tuple(lines)


def _paragraph(rng, pid):
    lines = tuple(" ".join(rng.choice(PROSE, size=int(rng.integers(14, 23)))) for _ in range(int(rng.integers(1, 3))))
    return C.Poem(pid, lines, "paragraph")


def synthetic_data(config):
    """In-memory version of ``make_synthetic``: (features dict, poems, pairs, paragraphs, lexicons)."""
    rng = np.random.default_rng(config.seed)
    n_poems = max(config.corpus_size, config.n_images)
    sets = _keyword_sets(rng, n_poems, config.n_images)
    proj = {aspect: _orthonormal(rng, config.D, n) for aspect, n in
            (("object", len(OBJECTS)), ("scene", len(SCENES)), ("sentiment", len(SENTIMENTS)))}
    images = {}
    for i in range(config.n_images):
        obj, obj2, scene, sent = sets[i]
        z = {"object": np.isin(OBJECTS, (obj, obj2)).astype(float),
             "scene": np.isin(SCENES, (scene,)).astype(float),
             "sentiment": np.isin(SENTIMENTS, (sent,)).astype(float)}
        vec = {a: proj[a] @ z[a] + config.noise * rng.normal(size=config.D) for a in proj}
        images[f"img{i:04d}"] = ImageFeatures(f"img{i:04d}", vec["object"], vec["scene"], vec["sentiment"])
    poems = [C.Poem(f"p{i:04d}", _poem_lines(rng, sets[i]), "multim" if i < config.n_images else "unim")
             for i in range(n_poems)]
    pairs = [C.PairedExample(f"img{i:04d}", f"p{i:04d}") for i in range(config.n_images)]
    paragraphs = [_paragraph(rng, f"para{i:04d}") for i in range(config.n_paragraphs)]
    lexicons = C.LexiconSet(OBJECTS, SCENES, SENTIMENTS)
    return images, poems, pairs, paragraphs, lexicons


def make_synthetic(out_dir, config=None):
    """Write features.jsonl, poems.jsonl, pairs.jsonl, paragraphs.jsonl and lexicons/ under ``out_dir``."""
    config = config or SyntheticConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images, poems, pairs, paragraphs, lexicons = synthetic_data(config)
    files = {"features": out / "features.jsonl", "poems": out / "poems.jsonl", "pairs": out / "pairs.jsonl",
             "paragraphs": out / "paragraphs.jsonl", "lexicons": out / "lexicons"}
    save_features(files["features"], images)
    C.save_poems(files["poems"], poems)
    C.save_pairs(files["pairs"], pairs)
    C.save_poems(files["paragraphs"], paragraphs)
    C.save_lexicons(files["lexicons"], lexicons)
    return files


# ---------------------------------------------------------------- toy task

THEME_WORDS = (
    ("moon", "tide", "pearl", "night"),
    ("ember", "forge", "ash", "flame"),
    ("fern", "moss", "rain", "grove"),
    ("frost", "snow", "pine", "peak"),
)
TOY_GLUE = ("the", "my", "and", "sings", "sleeps")
TOY_PROSE = ("committee", "report", "budget", "meeting", "agenda", "policy", "review", "office", "quarter",
             "minutes", "staff", "memo")


def _toy_poem(rng, theme, pid, source):
    words = THEME_WORDS[theme]
    lines = []
    for _ in range(int(rng.integers(3, 5))):
        a, b = rng.choice(len(words), size=2, replace=False)
        glue = TOY_GLUE[rng.integers(len(TOY_GLUE))]
        lines.append(f"{words[a]} {glue} {words[b]}")
    return C.Poem(pid, tuple(lines), source)


def make_toy_task(seed=0, images_per_theme=6, poems_per_theme=10, K=8, noise=0.15, n_paragraphs=40):
    """Themed poetic language with images given directly as K-dim embeddings.

    Every image of theme t is paired with every poem of theme t. Returns
    (train, validation) AdversarialData over disjoint images and poems that
    share one vocabulary.
    """
    from .trainer import build_adversarial_data

    rng = np.random.default_rng(seed)
    n_themes = len(THEME_WORDS)
    # orthogonal theme centers of norm 2 keep the planted correspondence unambiguous
    centers = 2.0 * np.linalg.qr(rng.normal(size=(K, n_themes)))[0].T
    splits = []
    vocab_words = [w for ws in THEME_WORDS for w in ws] + list(TOY_GLUE) + list(TOY_PROSE)
    vocab = C.Vocabulary(list(C.RESERVED) + vocab_words)
    for split in ("train", "val"):
        poems, pairs, image_X = [], [], {}
        for t in range(n_themes):
            theme_poems = [_toy_poem(rng, t, f"{split}-t{t}-p{j}", "unim") for j in range(poems_per_theme)]
            poems.extend(theme_poems)
            for i in range(images_per_theme):
                iid = f"{split}-t{t}-i{i}"
                image_X[iid] = centers[t] + noise * rng.normal(size=K)
                pairs.extend(C.PairedExample(iid, p.id) for p in theme_poems)
        paragraphs = [C.Poem(f"{split}-para{j}", (" ".join(rng.choice(TOY_PROSE, size=int(rng.integers(12, 19)))),),
                             "paragraph") for j in range(n_paragraphs)]
        splits.append(build_adversarial_data(pairs, poems, paragraphs, image_X, vocab))
    return splits[0], splits[1], vocab
