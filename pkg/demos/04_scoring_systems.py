# %% [markdown]
# # Scoring generated poems
#
# BLEU against a reference, novelty against the training corpus's most
# frequent n-grams, and a single overall score that rescales each metric
# column by its minimum.

# %%
from poemgan import corpus as C
from poemgan.evalsuite import bleu_n, build_ngram_stats, novelty_n, overall

ref = C.Poem("ref", ["the moon over the river", "a lantern waits"])
for text in (["the moon over the river", "a lantern waits"], ["the moon the moon"], ["lantern"]):
    cand = C.Poem("c", text)
    print(text, [round(bleu_n(cand, ref, n), 3) for n in (1, 2, 3)])

# %%
train = [C.Poem(f"t{i}", ["the moon"]) for i in range(8)] + [C.Poem("s", ["the sea rises"])]
stats = build_ngram_stats(train, top_k=1)
for text in ("the moon", "the moon the sea rises", "copper lanterns drift"):
    print(f"{text!r}: novelty-2 = {novelty_n(C.Poem('g', [text]), stats, 2):.2f}")

# %% [markdown]
# Overall scores of eight published systems, recomputed from their metric
# columns (relevance, novelty-2, novelty-3, BLEU-1/2/3).

# %%
systems = {
    "ST1CNN": (1.79, 43.66, 76.76, 11.88, 3.35, 0.76),
    "ST3CNN": (1.91, 48.09, 81.37, 12.64, 3.34, 0.80),
    "SeqGAN": (2.03, 47.52, 82.32, 13.40, 3.72, 0.76),
    "RegHier": (1.81, 46.75, 79.90, 11.64, 2.50, 0.67),
    "no discriminator": (1.94, 45.25, 80.13, 13.35, 3.69, 0.88),
    "D_m only": (2.07, 43.37, 78.98, 15.15, 4.13, 1.02),
    "D_p only": (1.90, 60.66, 89.74, 12.91, 3.05, 0.72),
    "both": (2.25, 54.32, 85.37, 14.25, 3.84, 0.94),
}
names = ("relevance", "novelty2", "novelty3", "bleu1", "bleu2", "bleu3")
cols = {m: [row[i] for row in systems.values()] for i, m in enumerate(names)}
for name, score in zip(systems, overall(cols)):
    print(f"{name:>17}: {100 * score:6.2f}")
