"""Image-side feature assembly, multi-label heads, and the mean-of-words sentence encoder."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import read_checkpoint, write_checkpoint
from .corpus import ASPECTS, CorpusError, split_tokens
from .nn import sigmoid, uniform_init

EPS = 1e-7


class FeatureError(ValueError):
    pass


@dataclass
class ImageFeatures:
    image_id: str
    object: np.ndarray
    scene: np.ndarray
    sentiment: np.ndarray

    def __post_init__(self):
        for aspect in ASPECTS:
            setattr(self, aspect, np.asarray(getattr(self, aspect), dtype=np.float64))
        d = {getattr(self, a).shape for a in ASPECTS}
        if len(d) != 1 or self.object.ndim != 1 or self.object.size == 0:
            raise FeatureError(f"image {self.image_id!r}: aspect vectors must share one length D > 0")
        if not all(np.all(np.isfinite(getattr(self, a))) for a in ASPECTS):
            raise FeatureError(f"image {self.image_id!r}: non-finite feature value")

    @property
    def D(self):
        return self.object.size

    def vector(self):
        return assemble(self.object, self.scene, self.sentiment)


def assemble(v1, v2, v3):
    """Concatenate (object, scene, sentiment) features into one N = 3D vector."""
    v1, v2, v3 = (np.asarray(v, dtype=np.float64) for v in (v1, v2, v3))
    if not v1.shape == v2.shape == v3.shape:
        raise FeatureError(f"aspect lengths differ: {v1.shape}, {v2.shape}, {v3.shape}")
    return np.concatenate([v1, v2, v3])


def load_features(path):
    """Read a features JSONL file (first record is the ``{"D": int}`` header)."""
    out = {}
    D = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            rec = json.loads(raw)
            if D is None:
                if set(rec) != {"D"}:
                    raise FeatureError(f"{path}:{lineno}: expected header record {{\"D\": int}}")
                D = int(rec["D"])
                continue
            try:
                feat = ImageFeatures(str(rec["image_id"]), rec["object"], rec["scene"], rec["sentiment"])
            except KeyError as exc:
                raise FeatureError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
            except FeatureError as exc:
                raise FeatureError(f"{path}:{lineno}: {exc}") from None
            if feat.D != D:
                raise FeatureError(f"{path}:{lineno}: D={feat.D} but header says {D}")
            if feat.image_id in out:
                raise FeatureError(f"{path}:{lineno}: duplicate image id {feat.image_id!r}")
            out[feat.image_id] = feat
    if D is None:
        raise FeatureError(f"{path}: missing header record")
    return out


def save_features(path, features):
    feats = list(features.values()) if isinstance(features, dict) else list(features)
    D = feats[0].D if feats else 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"D": D}) + "\n")
        for f in feats:
            fh.write(json.dumps({"image_id": f.image_id, "object": f.object.tolist(),
                                 "scene": f.scene.tolist(), "sentiment": f.sentiment.tolist()}) + "\n")


# ----------------------------------------------------------- multi-label loss

def sigmoid_ce_loss(logits, targets, eps=EPS):
    """Mean sigmoid cross-entropy over the label dimension (probabilities clipped to [eps, 1-eps])."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape:
        raise FeatureError(f"logits {logits.shape} and targets {targets.shape} differ")
    p = np.clip(sigmoid(logits), eps, 1 - eps)
    return float(-np.mean(targets * np.log(p) + (1 - targets) * np.log(1 - p), axis=-1).mean())


def sigmoid_ce_grad(logits, targets, eps=EPS):
    """d(sigmoid_ce_loss)/d(logits); zero where the probability is clipped."""
    logits = np.asarray(logits, dtype=np.float64)
    p = sigmoid(logits)
    inside = (p > eps) & (p < 1 - eps)
    L = logits.shape[-1]
    batch = logits.size // L
    return np.where(inside, (p - targets) / (L * batch), 0.0)


@dataclass
class MultiLabelHead:
    """Trainable linear label head standing in for a fine-tuned CNN classifier."""

    aspect: str
    W: np.ndarray  # labels x D
    b: np.ndarray
    history: list = field(default_factory=list, repr=False)

    @classmethod
    def init(cls, aspect, n_labels, D, seed=0):
        rng = np.random.default_rng(seed)
        return cls(aspect, uniform_init(rng, (n_labels, D)), np.zeros(n_labels))

    def logits(self, V):
        return V @ self.W.T + self.b

    def loss(self, V, T):
        return sigmoid_ce_loss(self.logits(V), T)

    def grads(self, V, T):
        G = sigmoid_ce_grad(self.logits(V), T)
        return {"W": G.T @ V, "b": G.sum(0)}


@dataclass
class HeadConfig:
    lr: float = 1.0
    epochs: int = 200
    seed: int = 0


def train_multilabel_head(features, labels, config=None):
    """Fit one head per aspect by full-batch gradient descent on the sigmoid CE loss.

    ``labels`` holds one ``extract_labels`` triple per feature record. Each
    head keeps its per-epoch loss in ``history`` (entry 0 is the untrained loss).
    """
    config = config or HeadConfig()
    if not features or len(features) != len(labels):
        raise FeatureError("need one label triple per feature record, and at least one record")
    heads = {}
    for a, aspect in enumerate(ASPECTS):
        V = np.stack([getattr(f, aspect) for f in features])
        T = np.stack([lab[a] for lab in labels]).astype(np.float64)
        if T.shape[1] == 0:
            raise FeatureError(f"{aspect} lexicon is empty")
        head = MultiLabelHead.init(aspect, T.shape[1], V.shape[1], config.seed + a)
        head.history.append(head.loss(V, T))
        for _ in range(config.epochs):
            g = head.grads(V, T)
            head.W -= config.lr * g["W"]
            head.b -= config.lr * g["b"]
            head.history.append(head.loss(V, T))
        heads[aspect] = head
    return heads


# ------------------------------------------------------------ sentence encoder

class MeanWordEncoder:
    """Sentence vector = mean of the word-embedding rows of its tokens (UNK row for OOV).

    Any object with ``dim`` and ``encode_line(text) -> ndarray`` can stand in for it;
    the bag-of-words helpers below are what joint training with the embedding uses.
    """

    schema = "enc-v1"

    def __init__(self, vocab, table):
        self.vocab = vocab
        self.table = np.asarray(table, dtype=np.float64)
        if self.table.shape[0] != len(vocab):
            raise FeatureError("encoder table rows must match the vocabulary size")

    @classmethod
    def init(cls, vocab, dim=64, seed=0, scale=0.1):
        rng = np.random.default_rng(seed)
        return cls(vocab, rng.normal(0.0, scale, size=(len(vocab), dim)))

    @property
    def dim(self):
        return self.table.shape[1]

    def line_ids(self, line):
        return [self.vocab.id(tok) for tok in split_tokens(line)]

    def encode_line(self, line):
        ids = self.line_ids(line)
        if not ids:
            raise FeatureError(f"line {line!r} has no tokens")
        return self.table[ids].mean(axis=0)

    def poem_weights(self, poem):
        """Vocabulary weights w with encode_poem(poem) == w @ table."""
        if not poem.lines:
            raise CorpusError("empty poem")
        w = np.zeros(len(self.vocab))
        for line in poem.lines:
            ids = self.line_ids(line)
            if not ids:
                raise FeatureError(f"line {line!r} has no tokens")
            np.add.at(w, ids, 1.0 / len(ids))
        return w / len(poem.lines)

    def save(self, path):
        header = {"schema": self.schema, "V": len(self.vocab), "M": self.dim}
        write_checkpoint(path, header, [self.table])

    @classmethod
    def load(cls, path, vocab):
        _, (table,) = read_checkpoint(path, cls.schema, lambda h: [(h["V"], h["M"])])
        return cls(vocab, table)


def encode_sentence(line, encoder):
    if not line or not line.strip():
        raise FeatureError("cannot encode an empty line")
    return encoder.encode_line(line)


def encode_poem(poem, encoder):
    """Mean of the poem's per-line vectors."""
    if not poem.lines:
        raise FeatureError("cannot encode an empty poem")
    return np.mean([encoder.encode_line(line) for line in poem.lines], axis=0)

