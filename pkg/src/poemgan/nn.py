"""Shared numerics: activations, a packed LSTM encoder, optimizers, gradient checks."""
import numpy as np


def sigmoid(z):
    # split by sign to avoid overflow in exp
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(z, axis=-1):
    return np.exp(log_softmax(z, axis))


def uniform_init(rng, shape, scale=0.08):
    return rng.uniform(-scale, scale, size=shape)


def all_finite(params):
    return all(np.all(np.isfinite(v)) for v in params.values())


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for k, g in grads.items():
            params[k] -= self.lr * g


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        if self.lr == 0:
            return
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name, lr):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")


def clip_grads(grads, max_norm):
    if not max_norm:
        return grads
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        return {k: g * scale for k, g in grads.items()}
    return grads


def numeric_grad(f, x, eps=1e-6):
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def rel_error(a, b, floor=1e-8):
    """Max elementwise relative error, with an absolute floor for near-zero entries."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


# ------------------------------------------------------------- LSTM encoder
# Gates packed as rows [input, forget, output, candidate] of W (4H x E), U (4H x H), b (4H).

def strip_sequence(y, bos_id, eos_id, pad_id):
    y = [int(t) for t in y]
    if y and y[0] == bos_id:
        y = y[1:]
    out = []
    for t in y:
        if t == pad_id:
            continue
        out.append(t)
        if t == eos_id:
            break
    return out


def pad_batch(seqs, pad_id):
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    T = int(lengths.max())
    ids = np.full((len(seqs), T), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
    mask = np.arange(T)[None, :] < lengths[:, None]
    return ids, mask


def lstm_forward(emb, W, U, b, ids, mask):
    """Run the encoder over padded ``ids``; returns final hidden states (B x H) and a cache.

    Masked steps carry the previous state so the result is the state after
    each sequence's last real token.
    """
    B, T = ids.shape
    H = U.shape[1]
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    cache = []
    for t in range(T):
        e = emb[ids[:, t]]
        z = e @ W.T + h @ U.T + b
        i, f, o = sigmoid(z[:, :H]), sigmoid(z[:, H:2 * H]), sigmoid(z[:, 2 * H:3 * H])
        g = np.tanh(z[:, 3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        m = mask[:, t:t + 1]
        cache.append((e, h, c, i, f, o, g, tc, m))
        h = np.where(m, h_new, h)
        c = np.where(m, c_new, c)
    return h, cache


def lstm_backward(dh, emb, W, U, ids, cache):
    """Backprop ``dh`` (grad of the final hidden state) through the encoder."""
    H = U.shape[1]
    dW, dU = np.zeros_like(W), np.zeros_like(U)
    db = np.zeros(4 * H)
    demb = np.zeros_like(emb)
    dc = np.zeros_like(dh)
    dh = dh.copy()
    for t in reversed(range(len(cache))):
        e, h_prev, c_prev, i, f, o, g, tc, m = cache[t]
        dh_new = dh * m
        dc_new = dc * m
        dh_pass = dh * ~m
        dc_pass = dc * ~m
        do = dh_new * tc
        dct = dc_new + dh_new * o * (1 - tc * tc)
        di = dct * g
        dg = dct * i
        df = dct * c_prev
        dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=1)
        dW += dz.T @ e
        dU += dz.T @ h_prev
        db += dz.sum(0)
        np.add.at(demb, ids[:, t], dz @ W)
        dh = dh_pass + dz @ U
        dc = dc_pass + dct * f
    return demb, dW, dU, db
