"""Multi-modal and poem-style discriminators and the reward they jointly provide."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .checkpoint import read_checkpoint, write_checkpoint
from .corpus import BOS_ID, EOS_ID, PAD_ID
from .nn import (clip_grads, log_softmax, lstm_backward, lstm_forward, make_optimizer, pad_batch,
                 strip_sequence, uniform_init)

log = logging.getLogger(__name__)

DM_CLASSES = ("paired", "unpaired", "generated")
DP_CLASSES = ("poetic", "disordered", "paragraphic", "generated")


class DiscriminatorError(ValueError):
    pass


def _init_params(rng, shapes, scale):
    """Glorot-uniform matrices and zero biases (forget gate +1) unless a fixed ``scale`` is given."""
    if scale is not None:
        return {k: uniform_init(rng, s, scale) for k, s in shapes.items()}
    out = {}
    for k, shape in shapes.items():
        if len(shape) == 1:
            out[k] = np.zeros(shape)
        else:
            out[k] = uniform_init(rng, shape, np.sqrt(6.0 / sum(shape)))
    H = shapes["U"][1]
    out["b"][H:2 * H] = 1.0
    return out


class _LstmClassifier:
    """LSTM poem encoder (final hidden state) feeding a softmax classifier head."""

    classes: tuple = ()
    schema = ""
    head_blocks: tuple = ()

    def __init__(self, params, seed=0):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.seed = seed
        self.history = []

    @property
    def V(self):
        return self.params["emb"].shape[0]

    @property
    def E(self):
        return self.params["emb"].shape[1]

    @property
    def H(self):
        return self.params["U"].shape[1]

    def copy(self):
        return type(self)({k: v.copy() for k, v in self.params.items()}, self.seed)

    def label_index(self, label):
        if isinstance(label, str):
            try:
                return self.classes.index(label)
            except ValueError:
                raise DiscriminatorError(f"unknown class {label!r}") from None
        return int(label)

    def _prepare(self, seqs):
        seqs = [strip_sequence(y, BOS_ID, EOS_ID, PAD_ID) for y in seqs]
        if any(not s for s in seqs):
            raise DiscriminatorError("cannot classify an empty sequence")
        for s in seqs:
            if min(s) < 0 or max(s) >= self.V:
                raise DiscriminatorError("token id out of range")
        return pad_batch(seqs, PAD_ID)

    def _encode(self, seqs):
        ids, mask = self._prepare(seqs)
        prm = self.params
        c, cache = lstm_forward(prm["emb"], prm["W"], prm["U"], prm["b"], ids, mask)
        return c, (ids, cache)

    def _encode_backward(self, dc, enc_state, grads):
        ids, cache = enc_state
        prm = self.params
        demb, dW, dU, db = lstm_backward(dc, prm["emb"], prm["W"], prm["U"], ids, cache)
        grads.update(emb=demb, W=dW, U=dU, b=db)

    def save(self, path):
        write_checkpoint(path, self.header(), [self.params[k] for k in self.block_order()])

    @classmethod
    def block_order(cls):
        return ("emb", "W", "U", "b") + cls.head_blocks


class MultiModalDiscriminator(_LstmClassifier):
    """C_m = softmax(W_m f + b_m), f = tanh(W_x x + b_x) * tanh(W_c c + b_c), c = LSTM(y)."""

    classes = DM_CLASSES
    schema = "dm-v1"
    head_blocks = ("W_x", "b_x", "W_c", "b_c", "W_m", "b_m")

    @classmethod
    def init(cls, V, K, E=64, H=128, F=64, seed=0, scale=None):
        rng = np.random.default_rng(seed)
        shapes = {"emb": (V, E), "W": (4 * H, E), "U": (4 * H, H), "b": (4 * H,),
                  "W_x": (F, K), "b_x": (F,), "W_c": (F, H), "b_c": (F,), "W_m": (3, F), "b_m": (3,)}
        return cls(_init_params(rng, shapes, scale), seed)

    @property
    def K(self):
        return self.params["W_x"].shape[1]

    @property
    def F(self):
        return self.params["W_x"].shape[0]

    def header(self):
        return {"schema": self.schema, "V": self.V, "E": self.E, "H": self.H, "K": self.K, "F": self.F,
                "seed": self.seed}

    @classmethod
    def load(cls, path):
        def shapes(h):
            V, E, H, K, F = h["V"], h["E"], h["H"], h["K"], h["F"]
            return [(V, E), (4 * H, E), (4 * H, H), (4 * H,), (F, K), (F,), (F, H), (F,), (3, F), (3,)]
        header, blocks = read_checkpoint(path, cls.schema, shapes)
        return cls(dict(zip(cls.block_order(), blocks)), header.get("seed", 0))

    def _forward(self, X, seqs):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.K:
            raise DiscriminatorError(f"image embedding length {X.shape[1]} != K={self.K}")
        prm = self.params
        c, enc = self._encode(seqs)
        a = np.tanh(X @ prm["W_x"].T + prm["b_x"])
        g = np.tanh(c @ prm["W_c"].T + prm["b_c"])
        f = a * g
        return log_softmax(f @ prm["W_m"].T + prm["b_m"]), (X, c, a, g, f, enc)

    def log_probs(self, X, seqs):
        return self._forward(X, seqs)[0]

    def loss_and_grads(self, X, seqs, labels):
        """Mean cross-entropy -log C_m(label | x, y) over the batch, with gradients."""
        labels = np.array([self.label_index(lab) for lab in labels])
        lp, (X, c, a, g, f, enc) = self._forward(X, seqs)
        B = len(labels)
        rows = np.arange(B)
        loss = float(-lp[rows, labels].mean())
        dlogit = np.exp(lp)
        dlogit[rows, labels] -= 1.0
        dlogit /= B
        prm = self.params
        grads = {"W_m": dlogit.T @ f, "b_m": dlogit.sum(0)}
        df = dlogit @ prm["W_m"]
        da = df * g * (1 - a * a)
        dg = df * a * (1 - g * g)
        grads.update(W_x=da.T @ X, b_x=da.sum(0), W_c=dg.T @ c, b_c=dg.sum(0))
        self._encode_backward(dg @ prm["W_c"], enc, grads)
        return loss, grads


class PoemStyleDiscriminator(_LstmClassifier):
    """C_p = softmax(W_p LSTM(y) + b_p)."""

    classes = DP_CLASSES
    schema = "dp-v1"
    head_blocks = ("W_p", "b_p")

    @classmethod
    def init(cls, V, E=64, H=128, seed=0, scale=None):
        rng = np.random.default_rng(seed)
        shapes = {"emb": (V, E), "W": (4 * H, E), "U": (4 * H, H), "b": (4 * H,), "W_p": (4, H), "b_p": (4,)}
        return cls(_init_params(rng, shapes, scale), seed)

    def header(self):
        return {"schema": self.schema, "V": self.V, "E": self.E, "H": self.H, "seed": self.seed}

    @classmethod
    def load(cls, path):
        def shapes(h):
            V, E, H = h["V"], h["E"], h["H"]
            return [(V, E), (4 * H, E), (4 * H, H), (4 * H,), (4, H), (4,)]
        header, blocks = read_checkpoint(path, cls.schema, shapes)
        return cls(dict(zip(cls.block_order(), blocks)), header.get("seed", 0))

    def _forward(self, seqs):
        prm = self.params
        c, enc = self._encode(seqs)
        return log_softmax(c @ prm["W_p"].T + prm["b_p"]), (c, enc)

    def log_probs(self, X, seqs):
        return self._forward(seqs)[0]

    def loss_and_grads(self, X, seqs, labels):
        labels = np.array([self.label_index(lab) for lab in labels])
        lp, (c, enc) = self._forward(seqs)
        B = len(labels)
        rows = np.arange(B)
        loss = float(-lp[rows, labels].mean())
        dlogit = np.exp(lp)
        dlogit[rows, labels] -= 1.0
        dlogit /= B
        grads = {"W_p": dlogit.T @ c, "b_p": dlogit.sum(0)}
        self._encode_backward(dlogit @ self.params["W_p"], enc, grads)
        return loss, grads


def dm_forward(x, y, dm):
    """Class probabilities (paired, unpaired, generated) for one image embedding and token sequence."""
    return np.exp(dm.log_probs(np.atleast_2d(x), [y])[0])


def dp_forward(y, dp):
    """Class probabilities (poetic, disordered, paragraphic, generated)."""
    return np.exp(dp.log_probs(None, [y])[0])


# ----------------------------------------------------------------- reward

@dataclass
class RewardConfig:
    lam: float = 0.8
    use_dm: bool = True
    use_dp: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise DiscriminatorError("lambda must lie in [0, 1]")


class NoRewardError(DiscriminatorError):
    pass


def reward_batch(X, seqs, dm, dp, config):
    """Rewards plus the two positive-class probabilities (NaN for a disabled discriminator)."""
    if not (config.use_dm or config.use_dp):
        raise NoRewardError("both discriminators are disabled: no reward signal (use pretraining instead)")
    n = len(seqs)
    cm = np.exp(dm.log_probs(X, seqs)[:, 0]) if config.use_dm else np.full(n, np.nan)
    cp = np.exp(dp.log_probs(None, seqs)[:, 0]) if config.use_dp else np.full(n, np.nan)
    if config.use_dm and config.use_dp:
        R = config.lam * cm + (1 - config.lam) * cp
    elif config.use_dm:
        R = cm.copy()
    else:
        R = cp.copy()
    return R, cm, cp


def reward(x, y, dm, dp, config):
    """lam * C_m(paired | x, y) + (1 - lam) * C_p(poetic | y), or the enabled term alone."""
    return float(reward_batch(np.atleast_2d(x), [y], dm, dp, config)[0][0])


# --------------------------------------------------------------- training

@dataclass
class DiscConfig:
    lr: float = 0.005
    epochs: int = 10
    optimizer: str = "adam"
    clip: float = 5.0
    seed: int = 0


def accuracy(disc, X, seqs, labels):
    labels = np.array([disc.label_index(lab) for lab in labels])
    pred = np.argmax(disc.log_probs(X, seqs), axis=1)
    return float(np.mean(pred == labels))


def disc_step(disc, X, seqs, labels, optimizer, clip=5.0):
    loss, grads = disc.loss_and_grads(X, seqs, labels)
    optimizer.step(disc.params, clip_grads(grads, clip))
    return loss


def _unzip(batch, with_image):
    if with_image:
        X = np.stack([np.asarray(b[0], dtype=np.float64) for b in batch])
        return X, [b[1] for b in batch], [b[2] for b in batch]
    return None, [b[0] for b in batch], [b[1] for b in batch]


def _train(disc, batches, config, with_image):
    config = config or DiscConfig()
    if not batches:
        raise DiscriminatorError("no training batches")
    opt = make_optimizer(config.optimizer, config.lr)
    data = [_unzip(b, with_image) for b in batches]
    present = {disc.label_index(lab) for _, _, labels in data for lab in labels}
    missing = [c for i, c in enumerate(disc.classes) if i not in present]
    if missing:
        log.warning("%s training stream lacks classes %s", type(disc).__name__, missing)
        disc.warnings = [f"missing classes: {missing}"]

    def epoch_loss():
        return float(np.mean([disc.loss_and_grads(X, s, l)[0] for X, s, l in data]))

    disc.history = [epoch_loss()]
    rng = np.random.default_rng(config.seed)
    for _ in range(config.epochs):
        for i in rng.permutation(len(data)):
            X, s, l = data[i]
            disc_step(disc, X, s, l, opt, config.clip)
        disc.history.append(epoch_loss())
    return disc


def train_dm(batches, dm, config=None):
    """Minimise cross-entropy on batches of (x, y, label) triples; ``dm.history`` records per-epoch loss."""
    return _train(dm, batches, config, with_image=True)


def train_dp(batches, dp, config=None):
    """Same as ``train_dm`` for batches of (y, label) pairs."""
    return _train(dp, batches, config, with_image=False)
