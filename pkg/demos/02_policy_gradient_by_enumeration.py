# %% [markdown]
# # Checking a score-function estimator against the exact gradient
#
# With three tokens and two steps there are only nine sequences, so the
# expected reward J can be written out in full. Its gradient is compared
# with the average of many single-rollout estimates.

# %%
import itertools

import numpy as np

from poemgan.generator import DecodeConfig, GruDecoder, pg_gradient_batch, sample_batch, sequence_logprobs
from poemgan.nn import numeric_grad

policy = GruDecoder.init(3, 2, 2, 2, t_max=3, seed=0, scale=1.0, bos_id=0, eos_id=None, blocked=())
x = np.random.default_rng(100).normal(size=2)
seqs = [np.array(s) for s in itertools.product(range(3), repeat=2)]
X9 = np.tile(x, (9, 1))
reward = np.zeros(9)
reward[7] = 1.0  # only the sequence (2, 1) pays

probs = np.exp([lp.sum() for lp in sequence_logprobs(policy, X9, seqs)])
print("sequence probabilities:", np.round(probs, 3), "sum", probs.sum())

# %%
def J():
    return float(sum(np.exp(lp.sum()) * r for lp, r in zip(sequence_logprobs(policy, X9, seqs), reward)))


exact = numeric_grad(J, policy.params["b_o"])
print("exact dJ/db_o:", exact)

# %% [markdown]
# Monte Carlo: sample rollouts, weight each log-probability gradient by its
# reward, average.

# %%
n = 50_000
rolls = sample_batch(np.tile(x, (n, 1)), policy, DecodeConfig(), np.random.default_rng(1))
R = np.array([reward[r.tokens[0] * 3 + r.tokens[1]] for r in rolls])
est = pg_gradient_batch(rolls, R, np.zeros(n), policy, np.tile(x, (n, 1)))
print("estimated dJ/db_o:", est["b_o"])

# %% [markdown]
# A baseline moves individual estimates but not their expectation.

# %%
est_b = pg_gradient_batch(rolls, R, np.full(n, 0.3), policy, np.tile(x, (n, 1)))
print("with baseline 0.3:", est_b["b_o"])
