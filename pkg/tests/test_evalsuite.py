import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poemgan import corpus as C
from poemgan.embedding import VisualPoeticEmbedding, embed_image, embed_poem, relevance
from poemgan.evalsuite import (EmptyCandidateWarning, METRICS, MinZeroError, bleu_n, build_ngram_stats,
                               evaluate_run, format_table, normalize_column, novelty_n, overall,
                               overall_for_reports, relevance_metric, write_report)
from poemgan.features import ImageFeatures, MeanWordEncoder, encode_poem

import oracles

TOKENS = st.lists(st.sampled_from(["a", "b", "c", "d"]), min_size=1, max_size=9)


def poem(text, pid="x"):
    return C.Poem(pid, text.split("|"))


# --------------------------------------------------------------------- BLEU

def test_bleu_examples():
    ref = poem("the cat")
    assert bleu_n(poem("the the the"), ref, 1) == pytest.approx(1 / 3, abs=1e-15)
    assert bleu_n(poem("cat"), ref, 1) == pytest.approx(math.exp(-1), abs=1e-15)
    for n in (1, 2, 3):
        assert bleu_n(poem("a b c|d e"), poem("a b|c d e"), n) == 1.0
    with pytest.raises(ValueError):
        bleu_n(ref, ref, 4)


def test_bleu_empty_candidate_warns():
    with pytest.warns(EmptyCandidateWarning):
        assert bleu_n([], poem("the cat"), 2) == 0.0


def test_bleu_matches_brute_force(rng):
    vocab = list("abcde")
    for _ in range(20):
        cand = rng.choice(vocab, size=int(rng.integers(1, 10))).tolist()
        ref = rng.choice(vocab, size=int(rng.integers(1, 10))).tolist()
        for n in (1, 2, 3):
            assert bleu_n(cand, ref, n) == oracles.brute_bleu(cand, ref, n)


@settings(max_examples=80, deadline=None)
@given(TOKENS, TOKENS, st.sampled_from([1, 2, 3]))
def test_bleu_bounded(cand, ref, n):
    assert 0.0 <= bleu_n(cand, ref, n) <= 1.0


# ------------------------------------------------------------------ novelty

@pytest.fixture
def toy_stats():
    corpus = [poem("the moon", f"m{i}") for i in range(8)] + [poem("the sea rises", "s"), poem("cold wind blows", "w")]
    return build_ngram_stats(corpus, top_k=1)


def test_novelty_examples(toy_stats):
    assert toy_stats.frequent[2] == {("the", "moon")}
    assert novelty_n(poem("the moon|the moon"), toy_stats, 2) == pytest.approx(0.0)
    assert novelty_n(poem("the moon"), toy_stats, 2) == 0.0
    assert novelty_n(poem("the moon the sea rises"), toy_stats, 2) == 0.5
    assert novelty_n(poem("moon"), toy_stats, 2) == 0.0
    assert novelty_n(poem("the moon the sea rises"), toy_stats, 2, inclusive=True) == 0.75


def test_novelty_ignores_line_breaks(toy_stats):
    assert novelty_n(poem("the moon the|sea rises"), toy_stats, 2) == novelty_n(poem("the moon the sea rises"),
                                                                               toy_stats, 2)


def test_novelty_matches_oracle(rng):
    vocab = list("abcdef")
    train = [rng.choice(vocab, size=int(rng.integers(2, 8))).tolist() for _ in range(15)]
    stats = build_ngram_stats(train, top_k=4)
    for _ in range(20):
        toks = rng.choice(vocab, size=int(rng.integers(1, 9))).tolist()
        for n in (2, 3):
            assert novelty_n(toks, stats, n) == oracles.novelty(toks, train, n, 4)


def test_frequent_set_bounded(rng):
    train = [rng.choice(list("abc"), size=6).tolist() for _ in range(10)]
    stats = build_ngram_stats(train, top_k=3)
    for n in (2, 3):
        assert len(stats.frequent[n]) <= 3 and stats.frequent[n] <= set(stats.counts[n])


# ---------------------------------------------------------------- relevance

@pytest.fixture
def rel_setup():
    poems = [poem("the moon sleeps|over water", "a"), poem("stone and ember", "b")]
    vocab = C.build_vocabulary(poems)
    enc = MeanWordEncoder.init(vocab, 5, seed=3)
    model = VisualPoeticEmbedding.init(6, 5, 4, seed=2)
    image = ImageFeatures("img", [0.5, -1.0], [2.0, 0.1], [0.3, 0.3])
    return poems, enc, model, image


def test_relevance_metric_composition(rel_setup, rng):
    poems, enc, model, image = rel_setup
    for _ in range(20):
        model.W_v[:] = rng.normal(size=model.W_v.shape)
        model.b_t[:] = rng.normal(size=4)
        for p in poems:
            want = relevance(embed_image(image.vector(), model), embed_poem(encode_poem(p, enc), model))
            assert abs(relevance_metric(image, p, model, enc) - want) <= 1e-12


def test_relevance_metric_extremes(rel_setup):
    poems, enc, model, image = rel_setup
    x = embed_image(image.vector(), model)
    t = encode_poem(poems[0], enc)
    model.b_t[:] = x - model.W_t @ t
    assert relevance_metric(image, poems[0], model, enc) == pytest.approx(1.0, abs=1e-12)
    model.b_t[:] = -x - model.W_t @ t
    assert relevance_metric(image, poems[0], model, enc) == pytest.approx(-1.0, abs=1e-12)


# ------------------------------------------------------------------ overall

def test_normalization_examples():
    assert normalize_column([2, 4]).tolist() == [0.0, 1.0]
    assert normalize_column([5, 5]).tolist() == [0.0, 0.0]
    with pytest.raises(MinZeroError):
        normalize_column([0, 1])
    assert normalize_column([0, 1, 2], mode="range").tolist() == [0.0, 0.5, 1.0]
    assert normalize_column([3, 3], mode="range").tolist() == [0.0, 0.0]


def test_overall_matches_oracle(rng):
    for _ in range(20):
        S = int(rng.integers(2, 6))
        cols = {m: rng.uniform(0.1, 3.0, S).tolist() for m in METRICS}
        want = oracles.min_normalized_overall(cols)
        got = overall(cols)
        assert np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-300)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.1, 100), min_size=2, max_size=6), st.floats(0.01, 100))
def test_normalization_scale_invariant(col, c):
    assert np.allclose(normalize_column(np.array(col) * c), normalize_column(col), rtol=1e-9, atol=1e-12)


def test_overall_needs_two_systems():
    with pytest.raises(ValueError):
        overall({"relevance": [1.0]})


def test_overall_reproduces_published_table():
    # rows: relevance, novelty-2, novelty-3, bleu-1, bleu-2, bleu-3, published overall (percent)
    table = [
        (1.79, 43.66, 76.76, 11.88, 3.35, 0.76, 5.61),
        (1.91, 48.09, 81.37, 12.64, 3.34, 0.80, 11.89),
        (2.03, 47.52, 82.32, 13.40, 3.72, 0.76, 15.86),
        (1.81, 46.75, 79.90, 11.64, 2.50, 0.67, 2.35),
        (1.94, 45.25, 80.13, 13.35, 3.69, 0.88, 14.65),
        (2.07, 43.37, 78.98, 15.15, 4.13, 1.02, 22.09),
        (1.90, 60.66, 89.74, 12.91, 3.05, 0.72, 16.00),
        (2.25, 54.32, 85.37, 14.25, 3.84, 0.94, 27.57),
    ]
    names = ("relevance", "novelty2", "novelty3", "bleu1", "bleu2", "bleu3")
    cols = {n: [row[i] for row in table] for i, n in enumerate(names)}
    got = 100 * overall(cols)
    assert np.max(np.abs(got - [row[6] for row in table])) < 0.015


# -------------------------------------------------------------- evaluate_run

@pytest.fixture
def run_setup(rel_setup):
    poems, enc, model, _ = rel_setup
    rng = np.random.default_rng(0)
    images = {f"i{k}": ImageFeatures(f"i{k}", *rng.normal(size=(3, 2))) for k in range(4)}
    gt = {"i0": poems[0], "i1": poems[1], "i2": poems[0], "i3": poems[1]}
    stats = build_ngram_stats(poems, top_k=2)
    return images, gt, stats, enc, model


def test_evaluate_generated_equals_truth(run_setup):
    images, gt, stats, enc, model = run_setup
    report = evaluate_run(gt, gt, images, model, enc, stats)
    assert len(report.rows) == 4 and report.aggregates["n_images"] == 4
    assert report.aggregates["bleu1"] == 1.0
    for row in report.rows:
        assert row["relevance"] == relevance_metric(images[row["image_id"]], gt[row["image_id"]], model, enc)
    for m in METRICS:
        assert abs(report.aggregates[m] - sum(r[m] for r in report.rows) / 4) <= 1e-12


def test_evaluate_missing_ground_truth(run_setup):
    images, gt, stats, enc, model = run_setup
    gen = {"i0": poem("the moon|stone"), "i1": poem("over water"), "i2": poem("ember")}
    report = evaluate_run(gen, {"i0": gt["i0"]}, images, model, enc, stats)
    assert [r["bleu1"] is None for r in report.rows] == [False, True, True]
    assert report.aggregates["bleu2"] == report.rows[0]["bleu2"]
    nobleu = evaluate_run(gen, {}, images, model, enc, stats)
    assert nobleu.aggregates["bleu1"] is None and nobleu.aggregates["relevance"] is not None


def test_evaluate_parallel_matches_serial(run_setup):
    images, gt, stats, enc, model = run_setup
    gen = {k: poem("the moon over stone") for k in images}
    a = evaluate_run(gen, gt, images, model, enc, stats, workers=1)
    b = evaluate_run(gen, gt, images, model, enc, stats, workers=3)
    assert a.rows == b.rows and a.aggregates == b.aggregates


def test_evaluate_unknown_image(run_setup):
    images, gt, stats, enc, model = run_setup
    with pytest.raises(KeyError):
        evaluate_run({"nope": poem("a")}, {}, images, model, enc, stats)


def test_report_outputs(run_setup, tmp_path):
    images, gt, stats, enc, model = run_setup
    reports = {"x": evaluate_run(gt, gt, images, model, enc, stats),
               "y": evaluate_run({k: poem("the moon over stone") for k in images}, gt, images, model, enc, stats)}
    scores = overall_for_reports(reports, mode="range")
    assert set(scores) == {"x", "y"} and reports["x"].overall == scores["x"]
    write_report(tmp_path / "r.jsonl", reports["x"])
    recs = [json.loads(line) for line in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert len(recs) == 5 and recs[-1]["overall"] == scores["x"]
    table = format_table(reports["x"]).splitlines()
    assert table[0].split() == ["image_id", *METRICS] and table[-1].startswith("MEAN")
