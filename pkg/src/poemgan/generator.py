"""GRU decoder policy: image-conditioned token sampling, teacher forcing, and policy-gradient updates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import read_checkpoint, write_checkpoint
from .corpus import BOS_ID, EOS_ID, PAD_ID
from .nn import log_softmax, sigmoid, softmax, uniform_init

BLOCKED_LOGIT = -1e30
BLOCKS = ("P", "p", "emb", "W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h", "W_o", "b_o")


class GeneratorError(ValueError):
    pass


class StaleRolloutError(GeneratorError):
    pass


class GruDecoder:
    """Policy p(y_t | y_<t, x).

    h_0 = tanh(P x + p); each step reads the previous token's embedding and
    applies z = s(W_z e + U_z h + b_z), r = s(W_r e + U_r h + b_r),
    n = tanh(W_h e + U_h (r * h) + b_h), h' = z * h + (1 - z) * n,
    logits = W_o h' + b_o.

    Tokens listed in ``blocked`` (by default BOS and PAD) get a logit of
    -1e30, so the policy never emits them.
    """

    schema = "gen-v1"

    def __init__(self, params, t_max=60, seed=0, bos_id=BOS_ID, eos_id=EOS_ID, blocked=None):
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in BLOCKS}
        self.t_max = int(t_max)
        self.seed = seed
        self.bos_id, self.eos_id = bos_id, eos_id
        H, K = self.params["P"].shape
        V, E = self.params["emb"].shape
        if blocked is None:
            blocked = (bos_id, PAD_ID)
        self.blocked = np.array(sorted({int(b) for b in blocked if b is not None and 0 <= b < V}), dtype=np.int64)
        expected = {"P": (H, K), "p": (H,), "emb": (V, E), "W_o": (V, H), "b_o": (V,)}
        for g in "zrh":
            expected.update({f"W_{g}": (H, E), f"U_{g}": (H, H), f"b_{g}": (H,)})
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise GeneratorError(f"parameter {k} has shape {self.params[k].shape}, expected {shape}")
        if self.t_max < 3:
            raise GeneratorError("t_max must be at least 3")

    @classmethod
    def init(cls, V, K, E=64, H=128, t_max=60, seed=0, scale=0.08, **kw):
        rng = np.random.default_rng(seed)
        shapes = {"P": (H, K), "p": (H,), "emb": (V, E), "W_o": (V, H), "b_o": (V,)}
        for g in "zrh":
            shapes.update({f"W_{g}": (H, E), f"U_{g}": (H, H), f"b_{g}": (H,)})
        return cls({k: uniform_init(rng, shapes[k], scale) for k in BLOCKS}, t_max, seed, **kw)

    @property
    def V(self):
        return self.params["emb"].shape[0]

    @property
    def E(self):
        return self.params["emb"].shape[1]

    @property
    def H(self):
        return self.params["P"].shape[0]

    @property
    def K(self):
        return self.params["P"].shape[1]

    def copy(self):
        return GruDecoder({k: v.copy() for k, v in self.params.items()}, self.t_max, self.seed,
                          self.bos_id, self.eos_id, self.blocked.tolist())

    def header(self):
        return {"schema": self.schema, "V": self.V, "E": self.E, "H": self.H, "K": self.K,
                "T_max": self.t_max, "seed": self.seed}

    def save(self, path):
        write_checkpoint(path, self.header(), [self.params[k] for k in BLOCKS])

    @classmethod
    def load(cls, path):
        def shapes(h):
            V, E, H, K = h["V"], h["E"], h["H"], h["K"]
            return [(H, K), (H,), (V, E), (H, E), (H, E), (H, E), (H, H), (H, H), (H, H),
                    (H,), (H,), (H,), (V, H), (V,)]
        header, blocks = read_checkpoint(path, cls.schema, shapes)
        return cls(dict(zip(BLOCKS, blocks)), header["T_max"], header.get("seed", 0))


@dataclass
class DecodeConfig:
    t_max: int | None = None  # None: the model's own limit
    mode: str = "sample"
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "sample"):
            raise GeneratorError(f"unknown decode mode {self.mode!r}")
        if self.temperature <= 0:
            raise GeneratorError("temperature must be positive")
        if self.t_max is not None and self.t_max < 3:
            raise GeneratorError("t_max must be at least 3")


@dataclass
class Rollout:
    tokens: np.ndarray  # generated ids after BOS, EOS included when reached
    logprobs: np.ndarray  # log p(y_t | y_<t) at temperature 1
    terminal: bool

    def __len__(self):
        return len(self.tokens)

    def sequence(self):
        return np.concatenate([[BOS_ID], self.tokens]).astype(np.int64)


# ------------------------------------------------------------------- forward

def init_state(x, model):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.K:
        raise GeneratorError(f"image embedding length {x.shape[-1]} != K={model.K}")
    return np.tanh(x @ model.params["P"].T + model.params["p"])


def _cell(prm, h, e):
    z = sigmoid(e @ prm["W_z"].T + h @ prm["U_z"].T + prm["b_z"])
    r = sigmoid(e @ prm["W_r"].T + h @ prm["U_r"].T + prm["b_r"])
    n = np.tanh(e @ prm["W_h"].T + (r * h) @ prm["U_h"].T + prm["b_h"])
    return z * h + (1 - z) * n, (z, r, n)


def _logits(model, h):
    out = h @ model.params["W_o"].T + model.params["b_o"]
    out[:, model.blocked] = BLOCKED_LOGIT
    return out


def step(h, y_prev, model):
    """One recurrence step: returns the new state and the logits over the vocabulary."""
    y_prev = np.asarray(y_prev)
    if np.any(y_prev < 0) or np.any(y_prev >= model.V):
        raise GeneratorError(f"token id out of range [0, {model.V})")
    prm = model.params
    h_new, _ = _cell(prm, np.asarray(h, dtype=np.float64), prm["emb"][y_prev])
    return h_new, _logits(model, np.atleast_2d(h_new)).reshape(h_new.shape[:-1] + (model.V,))


def _teacher_forward(model, X, seqs):
    """Teacher-forced pass over generated-token sequences (no BOS).

    Returns log-probs of each target (B x T, zero past the end), the mask and
    the per-step cache for the backward pass.
    """
    prm = model.params
    B = len(seqs)
    lengths = np.array([len(s) for s in seqs])
    if np.any(lengths == 0):
        raise GeneratorError("empty target sequence")
    T = int(lengths.max())
    targets = np.full((B, T), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        targets[i, :len(s)] = s
    if targets.min() < 0 or targets.max() >= model.V:
        raise GeneratorError("token id out of range")
    mask = np.arange(T)[None, :] < lengths[:, None]
    inputs = np.concatenate([np.full((B, 1), model.bos_id), targets[:, :-1]], axis=1)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    h = init_state(X, model)
    h0 = h
    logp = np.zeros((B, T))
    cache = []
    rows = np.arange(B)
    for t in range(T):
        e = prm["emb"][inputs[:, t]]
        h_new, gates = _cell(prm, h, e)
        lp = log_softmax(_logits(model, h_new))
        logp[:, t] = np.where(mask[:, t], lp[rows, targets[:, t]], 0.0)
        cache.append((e, h, h_new, gates, lp))
        h = h_new
    return logp, mask, (X, h0, inputs, targets, cache)


def _teacher_backward(model, weights, state):
    """Gradient of sum_{b,t} weights[b,t] * logp[b,t] w.r.t. every parameter block."""
    prm = model.params
    X, h0, inputs, targets, cache = state
    g = {k: np.zeros_like(v) for k, v in prm.items()}
    B, T = targets.shape
    rows = np.arange(B)
    dh = np.zeros((B, model.H))
    for t in reversed(range(T)):
        e, h, h_new, (z, r, n), lp = cache[t]
        w = weights[:, t]
        dlogits = -np.exp(lp) * w[:, None]
        dlogits[rows, targets[:, t]] += w
        g["W_o"] += dlogits.T @ h_new
        g["b_o"] += dlogits.sum(0)
        dh_new = dh + dlogits @ prm["W_o"]
        dz = dh_new * (h - n)
        dn = dh_new * (1 - z)
        dh = dh_new * z
        dan = dn * (1 - n * n)
        g["W_h"] += dan.T @ e
        g["U_h"] += dan.T @ (r * h)
        g["b_h"] += dan.sum(0)
        drh = dan @ prm["U_h"]
        dr = drh * h
        dh += drh * r
        daz = dz * z * (1 - z)
        dar = dr * r * (1 - r)
        g["W_z"] += daz.T @ e
        g["U_z"] += daz.T @ h
        g["b_z"] += daz.sum(0)
        g["W_r"] += dar.T @ e
        g["U_r"] += dar.T @ h
        g["b_r"] += dar.sum(0)
        dh += daz @ prm["U_z"] + dar @ prm["U_r"]
        de = dan @ prm["W_h"] + daz @ prm["W_z"] + dar @ prm["W_r"]
        np.add.at(g["emb"], inputs[:, t], de)
    da0 = dh * (1 - h0 * h0)
    g["P"] += da0.T @ X
    g["p"] += da0.sum(0)
    return g


def sequence_logprobs(model, X, seqs):
    """Per-step log p(y_t | y_<t, x) for each generated-token sequence (list of arrays)."""
    logp, mask, _ = _teacher_forward(model, X, seqs)
    return [logp[i, :len(s)] for i, s in enumerate(seqs)]


def weighted_logprob_grad(model, X, seqs, weights):
    """Objective sum_b sum_t w_bt log p(y_bt) and its gradient; ``weights`` is (B,) or (B, T)."""
    logp, mask, state = _teacher_forward(model, X, seqs)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim == 1:
        weights = weights[:, None]
    weights = np.broadcast_to(weights, logp.shape) * mask
    return float((weights * logp).sum()), _teacher_backward(model, weights, state)


# ------------------------------------------------------------------ decoding

def _decode(X, model, config, rngs, greedy):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    B = X.shape[0]
    t_max = config.t_max or model.t_max
    max_new = t_max - 1  # the leading BOS counts toward t_max
    h = init_state(X, model)
    prev = np.full(B, model.bos_id, dtype=np.int64)
    tokens = [[] for _ in range(B)]
    logps = [[] for _ in range(B)]
    active = np.ones(B, dtype=bool)
    prm = model.params
    for _ in range(max_new):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        h_new, gates = _cell(prm, h[idx], prm["emb"][prev[idx]])
        logits = _logits(model, h_new)
        lp = log_softmax(logits)
        if greedy:
            choice = np.argmax(logits, axis=1)
        else:
            probs = softmax(logits / config.temperature)
            cdf = np.cumsum(probs, axis=1)
            if isinstance(rngs, np.random.Generator):
                u = rngs.random(idx.size)
            else:
                u = np.array([rngs[i].random() for i in idx])
            choice = np.minimum((cdf < (u * cdf[:, -1])[:, None]).sum(axis=1), model.V - 1)
        h[idx] = h_new
        for j, i in enumerate(idx):
            tok = int(choice[j])
            tokens[i].append(tok)
            logps[i].append(float(lp[j, tok]))
            prev[i] = tok
            if model.eos_id is not None and tok == model.eos_id:
                active[i] = False
    return [Rollout(np.array(tokens[i], dtype=np.int64), np.array(logps[i]),
                    model.eos_id is not None and bool(tokens[i]) and tokens[i][-1] == model.eos_id)
            for i in range(B)]


def sample_batch(X, model, config, rng):
    """Sample one rollout per row of X.

    ``rng`` is either one Generator shared by the batch or a list with one
    Generator per row; with per-row generators each rollout is identical to
    sampling it alone with the same generator.
    """
    return _decode(X, model, config, rng, greedy=False)


def sample_sequence(x, model, config, rng=None):
    if config.mode != "sample":
        raise GeneratorError("sample_sequence needs mode='sample'")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    return _decode(x, model, config, [rng], greedy=False)[0]


def greedy_batch(X, model, config=None):
    return _decode(X, model, config or DecodeConfig(mode="greedy"), None, greedy=True)


def greedy_decode(x, model, config=None):
    """Argmax decoding (ties go to the lowest id)."""
    config = config or DecodeConfig(mode="greedy")
    if config.mode != "greedy":
        raise GeneratorError("greedy_decode needs mode='greedy'")
    return _decode(x, model, config, None, greedy=True)[0]


# ------------------------------------------------------------------- losses

def mle_loss(x, target, model):
    """Teacher-forced mean negative log-likelihood of ``target`` (a BOS...EOS sequence)."""
    target = np.asarray(target, dtype=np.int64)
    if target.size and target[0] == model.bos_id:
        target = target[1:]
    if target.size == 0:
        raise GeneratorError("empty target")
    return float(-sequence_logprobs(model, x, [target])[0].mean())


def mle_grads(model, X, targets):
    """Mean over the batch of per-sequence mean NLL, with its gradient."""
    seqs = [np.asarray(t[1:] if t[0] == model.bos_id else t, dtype=np.int64) for t in targets]
    if any(len(s) == 0 for s in seqs):
        raise GeneratorError("empty target")
    w = np.array([1.0 / (len(s) * len(seqs)) for s in seqs])
    obj, grads = weighted_logprob_grad(model, X, seqs, w)
    return -obj, {k: -v for k, v in grads.items()}


def _check_fresh(rollouts, model, X, tol):
    fresh = sequence_logprobs(model, X, [r.tokens for r in rollouts])
    for r, lp in zip(rollouts, fresh):
        if len(r.logprobs) != len(r.tokens) or np.max(np.abs(lp - r.logprobs)) > tol:
            raise StaleRolloutError("rollout log-probs do not match the current model")


def pg_gradient(rollout, reward, baseline, model, x, check_tol=1e-6):
    """(R - b) * sum_t grad log p(y_t | y_<t); add it (times a step size) to ascend J."""
    return pg_gradient_batch([rollout], [reward], [baseline], model, np.atleast_2d(x), check_tol,
                             average=False)


def pg_gradient_batch(rollouts, rewards, baselines, model, X, check_tol=1e-6, average=True):
    """Sum (or mean) of single-sample policy-gradient estimates over a batch of rollouts."""
    if check_tol is not None:
        _check_fresh(rollouts, model, X, check_tol)
    adv = np.asarray(rewards, dtype=np.float64) - np.asarray(baselines, dtype=np.float64)
    if average:
        adv = adv / len(rollouts)
    keep = [i for i, r in enumerate(rollouts) if len(r.tokens)]
    if not keep:
        return {k: np.zeros_like(v) for k, v in model.params.items()}
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))[keep]
    _, grads = weighted_logprob_grad(model, X, [rollouts[i].tokens for i in keep], adv[keep])
    return grads


def apply_gradient(model, grad, lr):
    """Gradient ascent: theta <- theta + lr * grad."""
    for k, g in grad.items():
        model.params[k] += lr * g
