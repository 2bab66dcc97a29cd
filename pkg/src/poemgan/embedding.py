"""Coupled visual-poetic embedding: affine image/poem maps trained with a bidirectional hinge loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import read_checkpoint, write_checkpoint
from .corpus import PairedExample, dedup_key
from .features import ImageFeatures, encode_poem
from .nn import make_optimizer


class EmbeddingError(ValueError):
    pass


@dataclass
class VisualPoeticEmbedding:
    W_v: np.ndarray  # K x N
    b_v: np.ndarray
    W_t: np.ndarray  # K x M
    b_t: np.ndarray
    seed: int = 0
    history: list = field(default_factory=list, repr=False)

    schema = "vpe-v1"
    blocks = ("W_v", "b_v", "W_t", "b_t")

    def __post_init__(self):
        K = self.W_v.shape[0]
        if self.b_v.shape != (K,) or self.W_t.shape[0] != K or self.b_t.shape != (K,):
            raise EmbeddingError("inconsistent embedding parameter shapes")

    @classmethod
    def init(cls, N, M, K=64, seed=0):
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(-1, 1, (K, N)) / np.sqrt(N), np.zeros(K),
                   rng.uniform(-1, 1, (K, M)) / np.sqrt(M), np.zeros(K), seed)

    @property
    def K(self):
        return self.W_v.shape[0]

    @property
    def N(self):
        return self.W_v.shape[1]

    @property
    def M(self):
        return self.W_t.shape[1]

    @property
    def params(self):
        return {name: getattr(self, name) for name in self.blocks}

    def copy(self):
        return VisualPoeticEmbedding(*(getattr(self, b).copy() for b in self.blocks), seed=self.seed)

    def save(self, path):
        header = {"schema": self.schema, "K": self.K, "N": self.N, "M": self.M, "seed": self.seed}
        write_checkpoint(path, header, [getattr(self, b) for b in self.blocks])

    @classmethod
    def load(cls, path):
        header, blocks = read_checkpoint(
            path, cls.schema,
            lambda h: [(h["K"], h["N"]), (h["K"],), (h["K"], h["M"]), (h["K"],)])
        return cls(*blocks, seed=header.get("seed", 0))


def embed_image(v, model):
    """x = W_v v + b_v; ``v`` may be one N-vector or a stack of them."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != model.N:
        raise EmbeddingError(f"image feature length {v.shape[-1]} != N={model.N}")
    return v @ model.W_v.T + model.b_v


def embed_poem(t, model):
    """m = W_t t + b_t."""
    t = np.asarray(t, dtype=np.float64)
    if t.shape[-1] != model.M:
        raise EmbeddingError(f"poem feature length {t.shape[-1]} != M={model.M}")
    return t @ model.W_t.T + model.b_t


# ---------------------------------------------------------------- ranking loss

def _hinge_terms(X, M, M_neg, X_neg, margin):
    X, M = np.atleast_2d(X), np.atleast_2d(M)
    M_neg, X_neg = np.asarray(M_neg, dtype=np.float64), np.asarray(X_neg, dtype=np.float64)
    if M_neg.ndim == 2:
        M_neg, X_neg = M_neg[:, None, :], X_neg[:, None, :]
    if M_neg.shape[1] == 0 or X_neg.shape[1] == 0:
        raise EmbeddingError("each pair needs at least one negative on each side")
    pos = np.einsum("pk,pk->p", X, M)
    h_img = margin - pos[:, None] + np.einsum("pk,pnk->pn", X, M_neg)
    h_poem = margin - pos[:, None] + np.einsum("pk,pnk->pn", M, X_neg)
    return X, M, M_neg, X_neg, h_img, h_poem


def ranking_loss(X, M, M_neg, X_neg, margin=0.2):
    """Sum over pairs and negatives of max(0, a - x.m + x.m_k) + max(0, a - m.x + m.x_k).

    X, M: (P, K) positive image/poem embeddings; M_neg, X_neg: (P, k, K) negatives.
    """
    *_, h_img, h_poem = _hinge_terms(X, M, M_neg, X_neg, margin)
    return float(np.maximum(h_img, 0).sum() + np.maximum(h_poem, 0).sum())


def ranking_loss_grads(X, M, M_neg, X_neg, margin=0.2):
    """Loss and its gradients w.r.t. (X, M, M_neg, X_neg)."""
    X, M, M_neg, X_neg, h_img, h_poem = _hinge_terms(X, M, M_neg, X_neg, margin)
    a = (h_img > 0).astype(np.float64)
    b = (h_poem > 0).astype(np.float64)
    loss = float((h_img * a).sum() + (h_poem * b).sum())
    dX = np.einsum("pn,pnk->pk", a, M_neg) - a.sum(1)[:, None] * M - b.sum(1)[:, None] * M
    dM = -a.sum(1)[:, None] * X + np.einsum("pn,pnk->pk", b, X_neg) - b.sum(1)[:, None] * X
    dM_neg = a[:, :, None] * X[:, None, :]
    dX_neg = b[:, :, None] * M[:, None, :]
    return loss, dX, dM, dM_neg, dX_neg


def indexed_loss_grads(model, V, T, img, poem, neg_poem, neg_img, margin):
    """Ranking loss for pairs given as indices into image rows V and poem rows T.

    Returns the loss, gradients for the four parameter blocks, and the gradient
    w.r.t. the poem feature rows T (used to train the sentence encoder).
    """
    Xall = embed_image(V, model)
    Mall = embed_poem(T, model)
    loss, dX, dM, dMn, dXn = ranking_loss_grads(Xall[img], Mall[poem], Mall[neg_poem], Xall[neg_img], margin)
    gX = np.zeros_like(Xall)
    gM = np.zeros_like(Mall)
    np.add.at(gX, img, dX)
    np.add.at(gX, neg_img, dXn)
    np.add.at(gM, poem, dM)
    np.add.at(gM, neg_poem, dMn)
    grads = {"W_v": gX.T @ V, "b_v": gX.sum(0), "W_t": gM.T @ T, "b_t": gM.sum(0)}
    return loss, grads, gM @ model.W_t


# -------------------------------------------------------------------- training

@dataclass
class RankingConfig:
    margin: float = 0.2
    negatives: int = 127
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 32
    K: int = 64
    seed: int = 0
    optimizer: str = "sgd"
    train_encoder: bool = True
    weight_decay: float = 0.0  # L2 on W_v and W_t, added to the gradient; 0 leaves the loss as is

    def __post_init__(self):
        if self.margin < 0:
            raise EmbeddingError("margin must be nonnegative")
        if self.negatives < 1:
            raise EmbeddingError("need at least one negative per example")
        if self.weight_decay < 0:
            raise EmbeddingError("weight_decay must be nonnegative")


def _sample_negatives(rng, n_total, count, excluded):
    """``count`` iid uniform draws from range(n_total) avoiding each row's excluded set."""
    out = rng.integers(0, n_total, size=(len(excluded), count))
    for r, ex in enumerate(excluded):
        if len(np.unique(ex)) >= n_total:
            raise EmbeddingError("no admissible negative: every candidate is paired with the anchor")
        bad = np.isin(out[r], ex)
        while bad.any():
            out[r, bad] = rng.integers(0, n_total, size=int(bad.sum()))
            bad = np.isin(out[r], ex)
    return out


def _index_pairs(pairs, poems, images):
    poem_index = {p.id: i for i, p in enumerate(poems)}
    image_ids = sorted({p.image_id for p in pairs})
    img_index = {k: i for i, k in enumerate(image_ids)}
    for p in pairs:
        if p.poem_id not in poem_index:
            raise EmbeddingError(f"pair refers to unknown poem {p.poem_id!r}")
        if p.image_id not in images:
            raise EmbeddingError(f"pair refers to image {p.image_id!r} without features")
    img = np.array([img_index[p.image_id] for p in pairs])
    poem = np.array([poem_index[p.poem_id] for p in pairs])
    V = np.stack([images[k].vector() for k in image_ids])
    return img, poem, V


def train_embedding(pairs, poems, images, encoder, config=None):
    """Fit the embedding on image-poem ``pairs``.

    ``poems`` is the corpus negatives are drawn from (it must contain every
    paired poem); ``images`` maps image id to ImageFeatures. Negatives are
    redrawn every epoch, excluding poems paired with the anchor image and
    images paired with the anchor poem. When ``config.train_encoder`` is set
    the encoder's word table is updated jointly, in place.

    ``model.history`` holds the mean per-pair loss before training (entry 0)
    and after each epoch, each measured with that epoch's negatives.
    """
    config = config or RankingConfig()
    poems = list(poems)
    if len(pairs) < 2:
        raise EmbeddingError("need at least two pairs")
    if len({p.id for p in poems}) < 2:
        raise EmbeddingError("need at least two distinct poems")
    img, poem, V = _index_pairs(pairs, poems, images)
    if len(set(poem.tolist())) < 2:
        raise EmbeddingError("need at least two distinct paired poems")

    rng = np.random.default_rng(config.seed)
    B = np.stack([encoder.poem_weights(p) for p in poems])  # T = B @ table
    model = VisualPoeticEmbedding.init(V.shape[1], encoder.dim, config.K, config.seed)
    params = model.params
    if config.train_encoder:
        params["table"] = encoder.table
    opt = make_optimizer(config.optimizer, config.lr)

    poems_of_img = [poem[img == i] for i in range(V.shape[0])]
    imgs_of_poem = {j: img[poem == j] for j in set(poem.tolist())}
    n_poems, n_imgs = len(poems), V.shape[0]

    def draw():
        neg_p = _sample_negatives(rng, n_poems, config.negatives, [poems_of_img[i] for i in img])
        neg_i = _sample_negatives(rng, n_imgs, config.negatives, [imgs_of_poem[j] for j in poem])
        return neg_p, neg_i

    def mean_loss(neg_p, neg_i):
        T = B @ encoder.table
        X, M = embed_image(V, model), embed_poem(T, model)
        return ranking_loss(X[img], M[poem], M[neg_p], X[neg_i], config.margin) / len(img)

    if n_imgs < 2:
        raise EmbeddingError("need at least two images")
    for epoch in range(config.epochs + 1):
        neg_p, neg_i = draw()
        if epoch == 0:
            model.history.append(mean_loss(neg_p, neg_i))
            continue
        order = rng.permutation(len(img))
        for start in range(0, len(order), config.batch_size):
            sel = order[start:start + config.batch_size]
            T = B @ encoder.table
            _, grads, dT = indexed_loss_grads(model, V, T, img[sel], poem[sel], neg_p[sel], neg_i[sel],
                                              config.margin)
            if config.train_encoder:
                grads["table"] = B.T @ dT
            scale = 1.0 / len(sel)
            grads = {k: g * scale for k, g in grads.items()}
            if config.weight_decay:
                for k in ("W_v", "W_t"):
                    grads[k] = grads[k] + config.weight_decay * params[k]
            opt.step(params, grads)
        model.history.append(mean_loss(neg_p, neg_i))
    return model


# ------------------------------------------------------------------- retrieval

def relevance(x, m):
    """Cosine similarity of an image embedding and a poem embedding."""
    x, m = np.asarray(x, dtype=np.float64), np.asarray(m, dtype=np.float64)
    nx, nm = np.linalg.norm(x), np.linalg.norm(m)
    if nx == 0 or nm == 0:
        raise EmbeddingError("relevance is undefined for a zero vector")
    return float(np.clip(x @ m / (nx * nm), -1.0, 1.0))


def poem_embeddings(poems, model, encoder):
    return embed_poem(np.stack([encode_poem(p, encoder) for p in poems]), model)


def _query_vector(image, model):
    v = image.vector() if isinstance(image, ImageFeatures) else np.asarray(image, dtype=np.float64)
    return embed_image(v, model)


def rank_by_embedding(x, poem_emb, poem_ids):
    """Corpus order by decreasing cosine to ``x``, ties broken by poem id; returns (order, cosines)."""
    x = np.asarray(x, dtype=np.float64)
    nx = np.linalg.norm(x)
    norms = np.linalg.norm(poem_emb, axis=1)
    if nx == 0 or np.any(norms == 0):
        raise EmbeddingError("relevance is undefined for a zero vector")
    cos = np.clip(poem_emb @ x / (norms * nx), -1.0, 1.0)
    ids = np.array(poem_ids, dtype=object)
    id_rank = np.argsort(np.argsort(ids, kind="stable"), kind="stable")
    order = np.lexsort((id_rank, -cos))
    return order, cos


def retrieve_topk(image, poems, model, encoder, k=3, poem_emb=None):
    """The ``k`` corpus poems most relevant to ``image`` (best first)."""
    poems = list(poems)
    if len(poems) < k:
        raise EmbeddingError(f"corpus has {len(poems)} poems, fewer than k={k}")
    if poem_emb is None:
        poem_emb = poem_embeddings(poems, model, encoder)
    order, _ = rank_by_embedding(_query_vector(image, model), poem_emb, [p.id for p in poems])
    return [poems[i] for i in order[:k]]


def recall_at_k(queries, poems, gold, model, encoder, k=1):
    """Fraction of image ids in ``queries`` whose gold poem id is among the top-k retrieved."""
    poems = list(poems)
    emb = poem_embeddings(poems, model, encoder)
    hits = 0
    for image in queries:
        top = retrieve_topk(image, poems, model, encoder, k, poem_emb=emb)
        hits += gold[image.image_id] in {p.id for p in top}
    return hits / len(queries)


def expand_dataset(human_pairs, poems, images, model, encoder, k=3):
    """Add each image's ``k`` nearest corpus poems as retrieved pairs.

    Poems already paired with the image, by id or by duplicate text, are
    skipped in favour of the next neighbour. Output is grouped per image in
    order of first appearance: human pairs first, then retrieved ones.
    """
    poems = list(poems)
    by_id = {p.id: p for p in poems}
    emb = poem_embeddings(poems, model, encoder)
    ids = [p.id for p in poems]
    grouped = {}
    for pair in human_pairs:
        grouped.setdefault(pair.image_id, []).append(pair)
    out = []
    for image_id, human in grouped.items():
        taken_ids = {p.poem_id for p in human}
        taken_text = {dedup_key(by_id[i]) for i in taken_ids if i in by_id}
        kept = []
        for p in human:
            if p.poem_id not in {q.poem_id for q in kept}:
                kept.append(p)
        order, _ = rank_by_embedding(_query_vector(images[image_id], model), emb, ids)
        added = 0
        for idx in order:
            if added == k:
                break
            cand = poems[idx]
            key = dedup_key(cand)
            if cand.id in taken_ids or key in taken_text:
                continue
            kept.append(PairedExample(image_id, cand.id, "retrieved"))
            taken_ids.add(cand.id)
            taken_text.add(key)
            added += 1
        out.extend(kept)
    return out
