"""End-to-end acceptance checks, one test per criterion, each reporting PASS/FAIL."""
import itertools
import math
import time

import numpy as np
import pytest

from poemgan import corpus as C
from poemgan import trainer as T
from poemgan.adversary import (MultiModalDiscriminator, NoRewardError, PoemStyleDiscriminator, RewardConfig,
                               dm_forward, dp_forward, reward, reward_batch)
from poemgan.embedding import (RankingConfig, VisualPoeticEmbedding, embed_image, embed_poem, indexed_loss_grads,
                               ranking_loss, recall_at_k, train_embedding)
from poemgan.evalsuite import METRICS, MinZeroError, bleu_n, build_ngram_stats, normalize_column, novelty_n, overall
from poemgan.features import MeanWordEncoder, MultiLabelHead, sigmoid_ce_loss
from poemgan.generator import DecodeConfig, GruDecoder, Rollout, mle_grads, pg_gradient_batch, sample_batch, \
    sequence_logprobs
from poemgan.nn import numeric_grad
from poemgan.synthetic import SyntheticConfig, make_toy_task, synthetic_data

from acceptance_log import report
from gradcheck import check_grads
from pipeline import run_pipeline
import oracles

INSTANCES = 20


def rel(got, want):
    got, want = np.asarray(got, dtype=float), np.asarray(want, dtype=float)
    return float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-300)))


def plist(d):
    return {k: v.tolist() for k, v in d.params.items()}


# ---------------------------------------------------------------------------- 1

def test_c1_formula_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = {}

    def note(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    emb = VisualPoeticEmbedding.init(6, 4, 5, seed=1)
    emb.b_v[:] = rng.normal(size=5)
    emb.b_t[:] = rng.normal(size=5)
    dm = MultiModalDiscriminator.init(10, 3, 4, 3, 4, seed=2)
    dp = PoemStyleDiscriminator.init(10, 4, 3, seed=3)
    for d in (dm, dp):
        for k in d.params:
            d.params[k] += rng.normal(0, 0.3, d.params[k].shape)
    for _ in range(INSTANCES):
        z, t = rng.normal(0, 3, 7), (rng.random(7) < 0.5).astype(float)
        note("label loss", rel(sigmoid_ce_loss(z, t), oracles.sigmoid_ce(z.tolist(), t.tolist())))

        v, tt = rng.normal(size=6), rng.normal(size=4)
        note("image map", rel(embed_image(v, emb), oracles.affine(emb.W_v.tolist(), emb.b_v.tolist(), v.tolist())))
        note("poem map", rel(embed_poem(tt, emb), oracles.affine(emb.W_t.tolist(), emb.b_t.tolist(), tt.tolist())))

        P, k = rng.integers(1, 4), rng.integers(1, 4)
        X, M = rng.normal(size=(P, 5)), rng.normal(size=(P, 5))
        Mn, Xn = rng.normal(size=(P, k, 5)), rng.normal(size=(P, k, 5))
        note("ranking loss", rel(ranking_loss(X, M, Mn, Xn, 0.2),
                                 oracles.hinge_loss(X.tolist(), M.tolist(), Mn.tolist(), Xn.tolist(), 0.2)))

        seq = rng.integers(5, 10, size=int(rng.integers(1, 4))).tolist()
        x = rng.normal(size=3)
        cm = oracles.dm_probs(plist(dm), x.tolist(), seq + [C.EOS_ID])
        cp = oracles.dp_probs(plist(dp), seq + [C.EOS_ID])
        full = [C.BOS_ID] + seq + [C.EOS_ID]
        note("D_m", rel(dm_forward(x, full, dm), cm))
        note("D_p", rel(dp_forward(full, dp), cp))
        lam = rng.uniform()
        note("reward", rel(reward(x, full, dm, dp, RewardConfig(lam)), lam * cm[0] + (1 - lam) * cp[0]))

        S = int(rng.integers(2, 6))
        cols = {m: rng.uniform(0.1, 3.0, S).tolist() for m in METRICS}
        note("overall", rel(overall(cols), oracles.min_normalized_overall(cols)))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-10 and elapsed < 60
    report(1, "formula fidelity", ok, f"worst rel err {max(worst.values()):.1e}, {elapsed:.1f}s")
    assert ok, worst


# ---------------------------------------------------------------------------- 2

def test_c2_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    failures, worst = [], [0.0]

    def check(name, f, params, grads):
        try:
            worst[0] = max(worst[0], check_grads(f, params, grads))
        except AssertionError as exc:
            failures.append(f"{name}: {exc}")

    for _ in range(3):
        head = MultiLabelHead.init("object", 5, 4, seed=int(rng.integers(1000)))
        head.W[:] = rng.normal(0, 0.5, head.W.shape)
        V, Tg = rng.normal(size=(6, 4)), (rng.random((6, 5)) < 0.4).astype(float)
        check("label head", lambda: head.loss(V, Tg), {"W": head.W, "b": head.b}, head.grads(V, Tg))

        model = VisualPoeticEmbedding.init(5, 3, 4, seed=int(rng.integers(1000)))
        model.b_v[:] = rng.normal(size=4)
        model.b_t[:] = rng.normal(size=4)
        V, Tp = rng.normal(size=(4, 5)), rng.normal(size=(6, 3))
        idx = np.arange(4)
        neg_p = np.array([[4, 5], [5, 2], [0, 4], [1, 5]])
        neg_i = np.array([[1, 2], [0, 3], [3, 1], [2, 0]])
        args = (model, V, Tp, idx, idx, neg_p, neg_i, 0.2)
        _, grads, _ = indexed_loss_grads(*args)
        check("ranking loss", lambda: indexed_loss_grads(*args)[0], dict(model.params), grads)

        gen = GruDecoder.init(8, 2, 3, 3, 8, seed=int(rng.integers(1000)))
        Xg = rng.normal(size=(3, 2))
        targets = [np.array([C.BOS_ID, 5, 6, C.EOS_ID]), np.array([C.BOS_ID, 7, C.EOS_ID]),
                   np.array([C.BOS_ID, 2, 3, 5, 6])]
        check("teacher-forced NLL", lambda: mle_grads(gen, Xg, targets)[0], gen.params, mle_grads(gen, Xg, targets)[1])

        dm = MultiModalDiscriminator.init(9, 3, 3, 3, 3, seed=int(rng.integers(1000)))
        Xd = rng.normal(size=(4, 3))
        seqs = [[C.BOS_ID, 5, 6, C.EOS_ID], [7, 8], [5, C.BR_ID, 6, 6, C.EOS_ID], [8]]
        labels = [0, 1, 2, 0]
        check("D_m cross-entropy", lambda: dm.loss_and_grads(Xd, seqs, labels)[0], dm.params,
              dm.loss_and_grads(Xd, seqs, labels)[1])

        dp = PoemStyleDiscriminator.init(9, 3, 4, seed=int(rng.integers(1000)))
        labels = [0, 1, 2, 3]
        check("D_p cross-entropy", lambda: dp.loss_and_grads(None, seqs, labels)[0], dp.params,
              dp.loss_and_grads(None, seqs, labels)[1])
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 300
    report(2, "gradient correctness", ok,
           f"{len(failures)} failing, worst passing rel err {worst[0]:.1e}, {elapsed:.1f}s")
    assert ok, failures


# ---------------------------------------------------------------------------- 3

def test_c3_policy_gradient_estimator():
    t0 = time.perf_counter()
    m = GruDecoder.init(3, 2, 2, 2, t_max=3, seed=0, scale=1.0, bos_id=0, eos_id=None, blocked=())
    x = np.random.default_rng(100).normal(size=2)
    seqs = [np.array(s) for s in itertools.product(range(3), repeat=2)]
    X9 = np.tile(x, (9, 1))
    r = np.zeros(9)
    r[7] = 1.0  # terminal reward on a single sequence

    def J():
        return float(sum(np.exp(lp.sum()) * ri for lp, ri in zip(sequence_logprobs(m, X9, seqs), r)))

    exact = {k: numeric_grad(J, v) for k, v in m.params.items()}

    n_total, chunk = 100_000, 10_000
    acc = {k: np.zeros_like(v) for k, v in m.params.items()}
    rng = np.random.default_rng(300)
    Xc = np.tile(x, (chunk, 1))
    for _ in range(n_total // chunk):
        rolls = sample_batch(Xc, m, DecodeConfig(mode="sample"), rng)
        R = np.array([r[ro.tokens[0] * 3 + ro.tokens[1]] for ro in rolls])
        g = pg_gradient_batch(rolls, R, np.zeros(chunk), m, Xc, average=False)
        for k in acc:
            acc[k] += g[k]
    worst = 0.0
    for k in acc:
        big = np.abs(exact[k]) > 1e-3
        if big.any():
            worst = max(worst, float(np.max(np.abs(acc[k][big] / n_total - exact[k][big]) / np.abs(exact[k][big]))))

    lps = sequence_logprobs(m, X9, seqs)
    p = np.exp([lp.sum() for lp in lps])
    rolls = [Rollout(s, lp, False) for s, lp in zip(seqs, lps)]
    g0 = pg_gradient_batch(rolls, p * r, np.zeros(9), m, X9, average=False)
    shift = 0.0
    for b in (0.5, -3.0):
        gb = pg_gradient_batch(rolls, p * r, p * b, m, X9, average=False)
        shift = max(shift, max(float(np.max(np.abs(gb[k] - g0[k]))) for k in g0))
    elapsed = time.perf_counter() - t0
    ok = worst < 0.05 and shift < 1e-8 and elapsed < 300
    report(3, "policy-gradient estimator", ok,
           f"worst coord rel err {worst:.3f}, baseline shift {shift:.1e}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------- 4

def test_c4_retrieval_recall():
    t0 = time.perf_counter()
    images, poems, pairs, _, _ = synthetic_data(SyntheticConfig(n_images=50, corpus_size=50, seed=0))
    vocab = C.build_vocabulary(poems)
    gold = {p.image_id: p.poem_id for p in pairs}
    hits1 = hits3 = 0
    folds = 5
    size = len(pairs) // folds
    for f in range(folds):
        held = pairs[f * size:(f + 1) * size]
        train = [p for p in pairs if p not in held]
        enc = MeanWordEncoder.init(vocab, 64, 0)
        cfg = RankingConfig(margin=0.2, negatives=16, lr=0.003, optimizer="adam", epochs=100, weight_decay=0.03,
                            seed=f)
        model = train_embedding(train, poems, images, enc, cfg)
        queries = [images[p.image_id] for p in held]
        hits1 += recall_at_k(queries, poems, gold, model, enc, 1) * size
        hits3 += recall_at_k(queries, poems, gold, model, enc, 3) * size
    r1, r3 = hits1 / len(pairs), hits3 / len(pairs)
    elapsed = time.perf_counter() - t0
    ok = r1 >= 0.9 and r3 == 1.0 and elapsed < 300
    report(4, "embedding retrieval", ok, f"held-out recall@1 {r1:.2f}, recall@3 {r3:.2f}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------- 5

def test_c5_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(505)
    checks = {}
    words = list("abcde")
    checks["bleu brute force"] = all(
        bleu_n(c, r, n) == oracles.brute_bleu(c, r, n)
        for c, r in ((rng.choice(words, size=int(rng.integers(1, 10))).tolist(),
                      rng.choice(words, size=int(rng.integers(1, 10))).tolist()) for _ in range(20))
        for n in (1, 2, 3))
    checks["clipping"] = abs(bleu_n("the the the".split(), "the cat".split(), 1) - 1 / 3) < 1e-15
    checks["brevity"] = abs(bleu_n(["cat"], "the cat".split(), 1) - math.exp(-1)) < 1e-15

    corpus = [C.Poem(f"m{i}", ["the moon"]) for i in range(8)] + \
        [C.Poem("s", ["the sea rises"]), C.Poem("w", ["cold wind blows"])]
    stats = build_ngram_stats(corpus, top_k=1)
    checks["novelty 0"] = novelty_n(C.Poem("g", ["the moon", "the moon"]), stats, 2) == 0.0
    checks["novelty 0.5"] = novelty_n(C.Poem("g", ["the moon the sea rises"]), stats, 2) == 0.5
    checks["novelty degenerate"] = novelty_n(C.Poem("g", ["moon"]), stats, 2) == 0.0

    checks["min-normalize [2,4]"] = normalize_column([2, 4]).tolist() == [0.0, 1.0]
    checks["min-normalize [5,5]"] = normalize_column([5, 5]).tolist() == [0.0, 0.0]
    try:
        normalize_column([0, 1])
        checks["MinZero"] = False
    except MinZeroError:
        checks["MinZero"] = True
    elapsed = time.perf_counter() - t0
    ok = all(checks.values()) and elapsed < 60
    failed = [k for k, v in checks.items() if not v]
    report(5, "metric oracles", ok, f"{len(checks) - len(failed)}/{len(checks)} checks, {elapsed:.1f}s")
    assert ok, failed


# ---------------------------------------------------------------------------- 6

TOY_CONFIG = dict(K=8, E=16, H=32, H_d=32, F=16, t_max=24, batch_size=64, pretrain_epochs=3, lr_pretrain=0.01,
                  disc_pretrain_steps=150, rounds=50, g_steps=5, lr_gen=0.01, lr_dm=0.005, lr_dp=0.005, lam=0.8)


def toy_run(seed):
    """Pretrain, warm up both discriminators, run 50 rounds.

    The reward gain is measured with the discriminators frozen at the end of
    the warm-up, so pre and post policies are scored by the same function.
    """
    tr, va, vocab = make_toy_task(seed)
    cfg = T.TrainConfig(seed=seed, **TOY_CONFIG)
    gen = GruDecoder.init(len(vocab), cfg.K, cfg.E, cfg.H, cfg.t_max, seed)
    T.pretrain_generator([(tr.X[i], tr.poems[j]) for i, j in tr.pairs], gen, cfg, seed=seed)
    pre = gen.copy()
    dm, dp = T.init_discriminators(len(vocab), cfg)
    state = T.TrainState.create(cfg)
    T.pretrain_discriminators(tr, gen, dm, dp, cfg, state)
    judge = dm.copy(), dp.copy()
    for _ in range(cfg.rounds):
        T.adversarial_round(tr, gen, dm, dp, cfg, state)
    r_pre = T.mean_reward(va, pre, *judge, cfg, 256, 1)
    r_post = T.mean_reward(va, gen, *judge, cfg, 256, 1)
    acc = T.validation_accuracy(va, dm, dp, np.random.default_rng(5))
    return r_post - r_pre, acc


@pytest.mark.slow
def test_c6_adversarial_training_toy():
    t0 = time.perf_counter()
    outcomes = []
    for seed in (0, 1, 2):
        delta, acc = toy_run(seed)
        good = delta >= 0.1 and acc["dm_acc"] >= 0.9 and acc["dp_acc"] >= 0.9
        outcomes.append(good)
        print(f"  seed {seed}: reward gain {delta:+.3f}, D_m acc {acc['dm_acc']:.3f}, "
              f"D_p acc {acc['dp_acc']:.3f} -> {'ok' if good else 'miss'}")
    elapsed = time.perf_counter() - t0
    ok = sum(outcomes) >= 2 and elapsed < 1800
    report(6, "adversarial training on toy task", ok, f"{sum(outcomes)}/3 seeds, {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------- 7

def test_c7_ablations():
    tr, _, vocab = make_toy_task(0)
    dm = MultiModalDiscriminator.init(len(vocab), 8, 8, 8, 8, seed=1)
    dp = PoemStyleDiscriminator.init(len(vocab), 8, 8, seed=2)
    gen = GruDecoder.init(len(vocab), 8, 8, 8, 12, seed=3)
    rolls = sample_batch(tr.X, gen, DecodeConfig(), np.random.default_rng(0))
    seqs = [np.concatenate([[C.BOS_ID], r.tokens]) for r in rolls]
    R_m, _, _ = reward_batch(tr.X, seqs, dm, dp, RewardConfig(0.8, use_dp=False))
    R_p, _, _ = reward_batch(tr.X, seqs, dm, dp, RewardConfig(0.8, use_dm=False))
    only_m = np.array_equal(R_m, np.exp(dm.log_probs(tr.X, seqs)[:, 0]))
    only_p = np.array_equal(R_p, np.exp(dp.log_probs(None, seqs)[:, 0]))
    cfg = T.TrainConfig(K=8, E=8, H=8, H_d=8, F=8, t_max=12, batch_size=8, use_dm=False, use_dp=False)
    try:
        T.adversarial_training(tr, gen, dm, dp, cfg)
        refused = False
    except NoRewardError:
        refused = True
    ok = only_m and only_p and refused
    report(7, "discriminator ablations", ok, f"R=C_m {only_m}, R=C_p {only_p}, both off refused {refused}")
    assert ok


# ---------------------------------------------------------------------------- 8

@pytest.mark.slow
def test_c8_cli_pipeline_deterministic(tmp_path):
    t0 = time.perf_counter()
    first = run_pipeline(tmp_path / "a")
    second = run_pipeline(tmp_path / "b")
    elapsed = time.perf_counter() - t0
    differ = sorted(str(k) for k in set(first) | set(second) if first.get(k) != second.get(k))
    ok = not differ and len(first) > 10 and elapsed < 600
    report(8, "deterministic CLI pipeline", ok, f"{len(first)} files compared, {len(differ)} differ, {elapsed:.0f}s")
    assert ok, differ
