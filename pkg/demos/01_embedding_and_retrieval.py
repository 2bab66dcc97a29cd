# %% [markdown]
# # Images and poems in one space
#
# A synthetic corpus plants keywords (two objects, a scene, a sentiment) in
# each image's feature vector and in the words of its poem. We fit the two
# linear maps with the hinge ranking loss, then ask which poems sit closest
# to a held-out image.

# %%
import numpy as np

from poemgan import corpus as C
from poemgan.embedding import RankingConfig, recall_at_k, retrieve_topk, train_embedding
from poemgan.features import MeanWordEncoder
from poemgan.synthetic import SyntheticConfig, synthetic_data

images, poems, pairs, _, _ = synthetic_data(SyntheticConfig(n_images=50, corpus_size=50, seed=0))
vocab = C.build_vocabulary(poems)
print(len(images), "images,", len(poems), "poems, vocabulary of", len(vocab))
print("poem p0000:", " / ".join(poems[0].lines))

# %% [markdown]
# Hold out the last ten pairs. The encoder averages word vectors per line
# and lines per poem; it is trained jointly with the embedding.

# %%
train, held = pairs[:40], pairs[40:]
encoder = MeanWordEncoder.init(vocab, 64, seed=0)
config = RankingConfig(margin=0.2, negatives=16, lr=0.003, optimizer="adam", epochs=100, weight_decay=0.03)
model = train_embedding(train, poems, images, encoder, config)
print(f"loss per pair: {model.history[0]:.3f} -> {model.history[-1]:.3f}")

# %%
gold = {p.image_id: p.poem_id for p in pairs}
queries = [images[p.image_id] for p in held]
print("held-out recall@1:", recall_at_k(queries, poems, gold, model, encoder, 1))
print("held-out recall@3:", recall_at_k(queries, poems, gold, model, encoder, 3))

# %% [markdown]
# The nearest neighbours of one held-out image. The first should be its own
# poem; the runners-up tend to share a keyword or two.

# %%
query = queries[0]
for rank, poem in enumerate(retrieve_topk(query, poems, model, encoder, k=3), 1):
    mark = "*" if poem.id == gold[query.image_id] else " "
    print(f"{rank}{mark} {poem.id}: {' / '.join(poem.lines)}")
print(np.round(model.W_v[:2, :6], 3))
