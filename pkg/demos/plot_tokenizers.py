"""
Three ways to turn patches into visual words
============================================

Each tokenizer is a table of unit vectors; a patch becomes the index of the
row it points most nearly along.  Here the three kinds are fitted on the
synthetic shapes and one image is drawn next to its token maps.
"""

import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from splitmask.data import synth_generate
from splitmask.tokenizer import build_vocabulary, tokenize_image

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

train, _ = synth_generate(seed=0, n_train=256, n_test=0)
image = train.image(3)

# 8x8 patches of a 32x32 image: a 4x4 grid of 192-dimensional vectors
vocabs = {
    "random_projection": build_vocabulary("random_projection", None, 64, 8, seed=0),
    "random_patches": build_vocabulary("random_patches", train, 64, 8, seed=0),
    "kmeans": build_vocabulary("kmeans", train, 64, 8, seed=0, sample_budget=4000),
}

fig, axes = plt.subplots(1, 4, figsize=(10, 2.8))
axes[0].imshow(image.transpose(1, 2, 0))
axes[0].set_title("image")
for ax, (name, vocab) in zip(axes[1:], vocabs.items()):
    tokens = tokenize_image(image, vocab, 8).reshape(4, 4)
    ax.imshow(tokens, cmap="tab20", vmin=0, vmax=63)
    for (r, c), t in np.ndenumerate(tokens):
        ax.text(c, r, str(t), ha="center", va="center", fontsize=8)
    ax.set_title(name)
for ax in axes:
    ax.set_xticks([])
    ax.set_yticks([])
fig.tight_layout()
fig.savefig(out / "tokenizers.png", dpi=100)

# how many distinct words does each table use across the training patches?
for name, vocab in vocabs.items():
    used = {int(t) for i in range(len(train)) for t in tokenize_image(train.image(i), vocab, 8)}
    print(f"{name:>18}: {len(used):2d} of {vocab.V} words in use")
