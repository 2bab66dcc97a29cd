"""Pretraining and the multi-adversarial policy-gradient loop."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import corpus as C
from .adversary import (MultiModalDiscriminator, NoRewardError, PoemStyleDiscriminator,
                        RewardConfig, accuracy, disc_step, reward_batch)
from .embedding import RankingConfig, embed_image, expand_dataset, train_embedding
from .features import MeanWordEncoder, load_features
from .generator import (DecodeConfig, GruDecoder, greedy_batch, mle_grads, pg_gradient_batch, sample_batch,
                        sequence_logprobs)
from .nn import all_finite, clip_grads, make_optimizer

log = logging.getLogger(__name__)

STAGES = ("vocab", "embedding", "expand", "pretrain", "discriminators", "adversarial", "generate")


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    pass


def stage_seed(master, stage):
    """Seed for a pipeline stage: SeedSequence([master, index of stage in STAGES])."""
    ss = np.random.SeedSequence([int(master), STAGES.index(stage)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass
class TrainConfig:
    lam: float = 0.8
    lr_gen: float = 0.002
    lr_pretrain: float = 0.01
    lr_dm: float = 0.002
    lr_dp: float = 0.002
    lr_embedding: float = 0.05
    g_steps: int = 1
    d_steps: int = 1
    batch_size: int = 32
    pretrain_epochs: int = 20
    disc_pretrain_steps: int = 50
    rounds: int = 50
    baseline: str = "greedy_rollout"
    ema_decay: float = 0.9
    seed: int = 0
    use_dm: bool = True
    use_dp: bool = True
    temperature: float = 1.0
    clip: float = 5.0
    # model sizes
    K: int = 64
    M: int = 64
    E: int = 64
    H: int = 128
    H_d: int = 128
    F: int = 64
    t_max: int = 60
    # embedding and data
    margin: float = 0.2
    negatives: int = 127
    embedding_epochs: int = 30
    embedding_optimizer: str = "sgd"
    min_freq: int = 1
    expand_k: int = 3
    top_k_frequent: int = 50

    def __post_init__(self):
        rates = [self.lr_gen, self.lr_pretrain, self.lr_dm, self.lr_dp, self.lr_embedding]
        if any(r <= 0 for r in rates):
            raise ValueError("learning rates must be positive")
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.baseline not in ("greedy_rollout", "ema"):
            raise ValueError(f"unknown baseline mode {self.baseline!r}")
        if min(self.g_steps, self.d_steps) < 0:
            raise ValueError("step counts must be nonnegative")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        return dataclasses.asdict(self)

    def reward_config(self):
        return RewardConfig(self.lam, self.use_dm, self.use_dp)


# -------------------------------------------------------------------- baseline

@dataclass
class Baseline:
    mode: str = "greedy_rollout"
    value: float = 0.0
    decay: float = 0.9
    history: list = field(default_factory=list)

    def update(self, rewards):
        """Fold sampled rewards into the running average (ema mode only)."""
        self.history.extend(float(r) for r in rewards)
        if self.mode == "ema":
            for r in rewards:
                self.value = self.decay * self.value + (1 - self.decay) * float(r)


def compute_baseline(X, generator, baseline, reward_fn, config=None):
    """Per-example baselines: reward of the greedy decode, or the current running average."""
    X = np.atleast_2d(X)
    if baseline.mode == "ema":
        return np.full(X.shape[0], baseline.value)
    greedy = greedy_batch(X, generator, config)
    return reward_fn(X, [r.tokens for r in greedy])


# --------------------------------------------------------------- training data

@dataclass
class AdversarialData:
    """Token-level view of the datasets used by the adversarial phase.

    ``poems`` are all real poems (paired and corpus) as token arrays; each
    image lists the indices of the poems paired with it. ``poetic`` indexes
    the poems used as positive style examples, ``pool`` is the sentence pool
    for disordered poems.
    """

    image_ids: list
    X: np.ndarray
    poems: list
    paired: list
    poetic: np.ndarray
    paragraphs: list
    pool: C.SentencePool
    vocab: C.Vocabulary

    def __post_init__(self):
        n = len(self.poems)
        self.unpaired = [np.setdiff1d(np.arange(n), np.asarray(p, dtype=np.int64)) for p in self.paired]
        self.pairs = [(i, j) for i, ps in enumerate(self.paired) for j in ps]

    def subset(self, image_idx):
        image_idx = list(image_idx)
        return AdversarialData([self.image_ids[i] for i in image_idx], self.X[image_idx], self.poems,
                               [self.paired[i] for i in image_idx], self.poetic, self.paragraphs,
                               self.pool, self.vocab)


def build_adversarial_data(pairs, poems, paragraphs, image_X, vocab, poetic_sources=("unim", "multim")):
    """Assemble AdversarialData from pairs, Poem lists and a dict of image embeddings."""
    poems = list(poems)
    index = {p.id: i for i, p in enumerate(poems)}
    image_ids = []
    paired = {}
    for pair in pairs:
        if pair.image_id not in paired:
            image_ids.append(pair.image_id)
            paired[pair.image_id] = []
        if pair.poem_id not in index:
            raise TrainingError(f"pair refers to unknown poem {pair.poem_id!r}")
        paired[pair.image_id].append(index[pair.poem_id])
    missing = [k for k in image_ids if k not in image_X]
    if missing:
        raise TrainingError(f"no image embedding for {missing[:3]}")
    toks = [C.tokenize(p, vocab) for p in poems]
    poetic = np.array([i for i, p in enumerate(poems) if p.source in poetic_sources])
    pool_src = [p for p in poems if p.source == "unim"] or poems
    return AdversarialData(image_ids, np.stack([image_X[k] for k in image_ids]), toks,
                           [paired[k] for k in image_ids], poetic,
                           [C.tokenize(p, vocab) for p in paragraphs], C.build_sentence_pool(pool_src), vocab)


# ------------------------------------------------------------------ pretraining

def pretrain_generator(examples, generator, config, checkpoint=None, seed=None):
    """Teacher-forced MLE on (x, BOS..EOS tokens) examples, minibatched with Adam.

    Returns the per-epoch mean NLL over the whole set (entry 0: before training).
    """
    if not examples:
        raise TrainingError("pretraining set is empty")
    X = np.stack([np.asarray(x, dtype=np.float64) for x, _ in examples])
    targets = [np.asarray(t, dtype=np.int64) for _, t in examples]
    rng = np.random.default_rng(config.seed if seed is None else seed)
    opt = make_optimizer("adam", config.lr_pretrain)

    def full_nll():
        total = 0.0
        for i in range(0, len(targets), 256):
            chunk = targets[i:i + 256]
            total += mle_grads(generator, X[i:i + 256], chunk)[0] * len(chunk)
        return total / len(targets)

    history = [full_nll()]
    for _ in range(config.pretrain_epochs):
        order = rng.permutation(len(targets))
        for s in range(0, len(order), config.batch_size):
            sel = order[s:s + config.batch_size]
            _, grads = mle_grads(generator, X[sel], [targets[i] for i in sel])
            opt.step(generator.params, clip_grads(grads, config.clip))
        if not all_finite(generator.params):
            raise DivergenceError("non-finite generator parameter during pretraining")
        history.append(full_nll())
    if checkpoint is not None:
        generator.save(checkpoint)
    return history


def teacher_nll(generator, X, targets):
    seqs = [t[1:] for t in targets]
    lps = sequence_logprobs(generator, X, seqs)
    return float(np.mean([-lp.mean() for lp in lps]))


# ------------------------------------------------------------ adversarial phase

def param_hash(params):
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


@dataclass
class TrainState:
    """Optimizers, baseline and the independent random streams of the adversarial phase."""

    gen_opt: object
    dm_opt: object
    dp_opt: object
    baseline: Baseline
    gen_rng: np.random.Generator
    neg_rng: np.random.Generator
    dm_rng: np.random.Generator
    dp_rng: np.random.Generator
    round: int = 0

    @classmethod
    def create(cls, config, seed=None):
        seed = stage_seed(config.seed, "adversarial") if seed is None else seed
        streams = np.random.SeedSequence(seed).spawn(4)
        return cls(make_optimizer("adam", config.lr_gen), make_optimizer("adam", config.lr_dm),
                   make_optimizer("adam", config.lr_dp),
                   Baseline(config.baseline, 0.0, config.ema_decay),
                   *(np.random.default_rng(s) for s in streams))


def _rollout_rngs(rng, n):
    return [np.random.default_rng(s) for s in rng.integers(0, 2**63 - 1, size=n)]


def _generated(data, generator, config, rng, n):
    idx = rng.integers(0, len(data.image_ids), size=n)
    dec = DecodeConfig(mode="sample", temperature=config.temperature)
    rolls = sample_batch(data.X[idx], generator, dec, _rollout_rngs(rng, n))
    return idx, [np.concatenate([[C.BOS_ID], r.tokens]) for r in rolls]


def dm_batch(data, rng, n_each, gen_idx, gen_seqs):
    """Class-balanced (X, seqs, labels) for the multi-modal discriminator."""
    pick = rng.integers(0, len(data.pairs), size=n_each)
    X, seqs, labels = [], [], []
    for p in pick:
        i, j = data.pairs[p]
        X.append(data.X[i]); seqs.append(data.poems[j]); labels.append(0)
    imgs = rng.integers(0, len(data.image_ids), size=n_each)
    for i in imgs:
        cands = data.unpaired[i]
        if cands.size == 0:
            continue
        X.append(data.X[i]); seqs.append(data.poems[int(rng.choice(cands))]); labels.append(1)
    for i, s in zip(gen_idx[:n_each], gen_seqs[:n_each]):
        X.append(data.X[i]); seqs.append(s); labels.append(2)
    return np.stack(X), seqs, labels


def dp_batch(data, rng, n_each, gen_seqs):
    """Class-balanced (seqs, labels) for the poem-style discriminator."""
    seqs, labels = [], []
    for j in rng.choice(data.poetic, size=n_each):
        seqs.append(data.poems[int(j)]); labels.append(0)
    for _ in range(n_each):
        fake = C.make_disordered(data.pool, rng)
        seqs.append(C.tokenize(fake, data.vocab)); labels.append(1)
    if data.paragraphs:
        for j in rng.integers(0, len(data.paragraphs), size=n_each):
            seqs.append(data.paragraphs[int(j)]); labels.append(2)
    for s in gen_seqs[:n_each]:
        seqs.append(s); labels.append(3)
    return seqs, labels


def generator_step(data, generator, dm, dp, config, state):
    """One policy-gradient ascent step on a batch of images; returns (R, C_m, C_p) arrays."""
    rc = config.reward_config()
    idx = state.gen_rng.integers(0, len(data.image_ids), size=config.batch_size)
    X = data.X[idx]
    dec = DecodeConfig(mode="sample", temperature=config.temperature)
    rolls = sample_batch(X, generator, dec, _rollout_rngs(state.gen_rng, len(idx)))
    seqs = [np.concatenate([[C.BOS_ID], r.tokens]) for r in rolls]
    R, cm, cp = reward_batch(X, seqs, dm, dp, rc)
    b = compute_baseline(X, generator, state.baseline,
                         lambda Xb, s: reward_batch(Xb, [np.concatenate([[C.BOS_ID], t]) for t in s],
                                                    dm, dp, rc)[0],
                         DecodeConfig(mode="greedy"))
    grads = pg_gradient_batch(rolls, R, b, generator, X)
    state.gen_opt.step(generator.params, {k: -g for k, g in clip_grads(grads, config.clip).items()})
    state.baseline.update(R)
    if not all_finite(generator.params):
        raise DivergenceError(f"round {state.round}: non-finite generator parameter after policy-gradient step")
    return R, cm, cp


def discriminator_step(data, generator, dm, dp, config, state):
    """One update of each enabled discriminator on fresh generated negatives; returns accuracies."""
    n_dm = max(1, config.batch_size // 3)
    n_dp = max(1, config.batch_size // 4)
    gen_idx, gen_seqs = _generated(data, generator, config, state.neg_rng, max(n_dm, n_dp))
    acc = {"dm_acc": None, "dp_acc": None}
    # each discriminator reads only its own stream, so their updates commute
    if config.use_dm:
        X, seqs, labels = dm_batch(data, state.dm_rng, n_dm, gen_idx, gen_seqs)
        acc["dm_acc"] = accuracy(dm, X, seqs, labels)
        disc_step(dm, X, seqs, labels, state.dm_opt, config.clip)
        if not all_finite(dm.params):
            raise DivergenceError(f"round {state.round}: non-finite D_m parameter")
    if config.use_dp:
        seqs, labels = dp_batch(data, state.dp_rng, n_dp, gen_seqs)
        acc["dp_acc"] = accuracy(dp, None, seqs, labels)
        disc_step(dp, None, seqs, labels, state.dp_opt, config.clip)
        if not all_finite(dp.params):
            raise DivergenceError(f"round {state.round}: non-finite D_p parameter")
    return acc


def pretrain_discriminators(data, generator, dm, dp, config, state, steps=None):
    steps = config.disc_pretrain_steps if steps is None else steps
    for _ in range(steps):
        discriminator_step(data, generator, dm, dp, config, state)


def adversarial_round(data, generator, dm, dp, config, state, monitor=None):
    """``g_steps`` generator updates, then ``d_steps`` updates of each enabled discriminator.

    Returns the round's metrics record. ``monitor`` is an optional (X, targets)
    batch of real pairs whose teacher-forced NLL is reported as ``gen_nll``.
    """
    if not (config.use_dm or config.use_dp):
        raise NoRewardError("both discriminators are disabled: no reward is defined (pretraining only)")
    state.round += 1
    Rs, cms, cps = [], [], []
    for _ in range(config.g_steps):
        R, cm, cp = generator_step(data, generator, dm, dp, config, state)
        Rs.append(R); cms.append(cm); cps.append(cp)
    if not Rs:
        idx = state.neg_rng.integers(0, len(data.image_ids), size=config.batch_size)
        rolls = sample_batch(data.X[idx], generator, DecodeConfig(temperature=config.temperature),
                             _rollout_rngs(state.neg_rng, len(idx)))
        R, cm, cp = reward_batch(data.X[idx], [np.concatenate([[C.BOS_ID], r.tokens]) for r in rolls],
                                 dm, dp, config.reward_config())
        Rs.append(R); cms.append(cm); cps.append(cp)
    accs = {"dm_acc": [], "dp_acc": []}
    for _ in range(config.d_steps):
        for k, v in discriminator_step(data, generator, dm, dp, config, state).items():
            if v is not None:
                accs[k].append(v)

    def mean_or_none(arrs):
        v = np.concatenate(arrs)
        return None if np.all(np.isnan(v)) else float(np.nanmean(v))

    metrics = {
        "round": state.round,
        "mean_R": mean_or_none(Rs),
        "mean_Cm_paired": mean_or_none(cms),
        "mean_Cp_poetic": mean_or_none(cps),
        "dm_acc": float(np.mean(accs["dm_acc"])) if accs["dm_acc"] else None,
        "dp_acc": float(np.mean(accs["dp_acc"])) if accs["dp_acc"] else None,
        "gen_nll": teacher_nll(generator, *monitor) if monitor is not None else None,
    }
    return metrics


def mean_reward(data, generator, dm, dp, config, n=128, seed=0):
    """Mean reward of ``n`` sampled poems for random images of ``data`` (fixed seed)."""
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(data.image_ids), size=n)
    rolls = sample_batch(data.X[idx], generator, DecodeConfig(temperature=config.temperature),
                         _rollout_rngs(rng, n))
    R, _, _ = reward_batch(data.X[idx], [np.concatenate([[C.BOS_ID], r.tokens]) for r in rolls], dm, dp,
                           config.reward_config())
    return float(R.mean())


# --------------------------------------------------------------------- pipeline

@dataclass
class TrainPaths:
    features: Path
    poems: Path
    pairs: Path
    out_dir: Path
    paragraphs: Path | None = None


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except Exception as exc:
                raise TrainingError(f"stage {name} failed: {exc}") from exc
        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner
    return wrap


def fit_embedding(poems, pairs, images, config):
    """Build the vocabulary, then train encoder and embedding jointly on the human pairs."""
    vocab = C.build_vocabulary(poems, config.min_freq)
    encoder = MeanWordEncoder.init(vocab, config.M, stage_seed(config.seed, "vocab"))
    rcfg = RankingConfig(margin=config.margin, negatives=config.negatives, epochs=config.embedding_epochs,
                         lr=config.lr_embedding, batch_size=config.batch_size, K=config.K,
                         seed=stage_seed(config.seed, "embedding"), optimizer=config.embedding_optimizer)
    model = train_embedding(pairs, poems, images, encoder, rcfg)
    return vocab, encoder, model


def image_embeddings(images, model):
    return {k: embed_image(f.vector(), model) for k, f in images.items()}


def pretrain_from_pairs(pairs, poems, image_X, vocab, config, generator=None):
    by_id = {p.id: p for p in poems}
    examples = [(image_X[p.image_id], C.tokenize(by_id[p.poem_id], vocab)) for p in pairs]
    if generator is None:
        generator = GruDecoder.init(len(vocab), config.K, config.E, config.H, config.t_max,
                                    stage_seed(config.seed, "pretrain"))
    history = pretrain_generator(examples, generator, config, seed=stage_seed(config.seed, "pretrain"))
    return generator, history


def init_discriminators(vocab_size, config):
    s = stage_seed(config.seed, "discriminators")
    dm = MultiModalDiscriminator.init(vocab_size, config.K, config.E, config.H_d, config.F, seed=s)
    dp = PoemStyleDiscriminator.init(vocab_size, config.E, config.H_d, seed=s + 1)
    return dm, dp


def adversarial_training(data, generator, dm, dp, config, metrics_path=None):
    """Discriminator warm-up followed by ``config.rounds`` adversarial rounds."""
    if not (config.use_dm or config.use_dp):
        raise NoRewardError("both discriminators are disabled: no reward is defined (pretraining only)")
    state = TrainState.create(config)
    pretrain_discriminators(data, generator, dm, dp, config, state)
    mon_idx = np.arange(min(len(data.pairs), 64))
    monitor = (np.stack([data.X[data.pairs[k][0]] for k in mon_idx]),
               [data.poems[data.pairs[k][1]] for k in mon_idx])
    log_records = []
    fh = open(metrics_path, "w") if metrics_path else None
    try:
        for _ in range(config.rounds):
            rec = adversarial_round(data, generator, dm, dp, config, state, monitor)
            log_records.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            log.info("round %d: R=%.4f", rec["round"], rec["mean_R"])
    finally:
        if fh:
            fh.close()
    return log_records


def run_training(config, paths):
    """Embedding -> expansion -> generator pretraining -> adversarial rounds, all files under ``out_dir``.

    Writes vocab.json, encoder.ckpt, embedding.ckpt, expanded_pairs.jsonl,
    generator.ckpt, dm.ckpt, dp.ckpt and metrics.jsonl; returns the list of
    written paths.
    """
    if not (config.use_dm or config.use_dp):
        raise NoRewardError("both discriminators are disabled: no reward is defined (pretraining only)")
    out = Path(paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    poems, pairs, images, paragraphs = _stage("load")(_load_inputs)(paths)
    vocab, encoder, model = _stage("embedding")(fit_embedding)(poems, pairs, images, config)
    for name, obj in (("vocab.json", vocab), ("encoder.ckpt", encoder), ("embedding.ckpt", model)):
        obj.save(out / name)
        written.append(out / name)
    expanded = _stage("expand")(expand_dataset)(pairs, poems, images, model, encoder, config.expand_k)
    C.save_pairs(out / "expanded_pairs.jsonl", expanded)
    written.append(out / "expanded_pairs.jsonl")
    image_X = image_embeddings(images, model)
    generator, _ = _stage("pretrain")(pretrain_from_pairs)(expanded, poems, image_X, vocab, config)
    generator.save(out / "pretrained.ckpt")
    written.append(out / "pretrained.ckpt")

    data = _stage("adversarial")(build_adversarial_data)(expanded, poems, paragraphs, image_X, vocab)
    dm, dp = init_discriminators(len(vocab), config)
    _stage("adversarial")(adversarial_training)(data, generator, dm, dp, config, out / "metrics.jsonl")
    written.append(out / "metrics.jsonl")
    for name, obj in (("generator.ckpt", generator), ("dm.ckpt", dm), ("dp.ckpt", dp)):
        obj.save(out / name)
        written.append(out / name)
    return written


def _load_inputs(paths):
    poems = C.load_poems(paths.poems)
    pairs = C.load_pairs(paths.pairs)
    images = load_features(paths.features)
    paragraphs = C.load_poems(paths.paragraphs) if paths.paragraphs else []
    C.check_pairs(pairs, [p.id for p in poems], images)
    return poems, pairs, images, paragraphs


def _real_class_accuracy(disc, X, seqs, labels, real_only):
    lp = disc.log_probs(X, seqs)
    if real_only:
        lp = lp[:, :-1]  # the generated class is last in both label sets
    return float(np.mean(np.argmax(lp, axis=1) == np.asarray(labels)))


def validation_accuracy(data, dm, dp, rng, n_each=64, real_only=True):
    """Accuracy of each discriminator on fresh real-class examples of ``data``.

    With ``real_only`` the prediction is the argmax over the real classes;
    otherwise the generated class competes as well.
    """
    out = {}
    if dm is not None:
        X, seqs, labels = dm_batch(data, rng, n_each, [], [])
        out["dm_acc"] = _real_class_accuracy(dm, X, seqs, labels, real_only)
    if dp is not None:
        seqs, labels = dp_batch(data, rng, n_each, [])
        out["dp_acc"] = _real_class_accuracy(dp, None, seqs, labels, real_only)
    return out
