# %% [markdown]
# # A synthetic corpus with word alignments
#
# Every utterance is a sequence of word templates (keywords and fillers)
# rendered as 13-dimensional frames at 10 ms, plus noise. Because the corpus is
# generated, the start and end of every word is known exactly, which is what
# the localisation metrics need.

# %%
import tempfile
from pathlib import Path

import numpy as np

from kwloc.corpus import SynthConfig, synth_corpus
from kwloc.evaluation import chance_accuracy, chance_accuracy_mc
from kwloc.localisation import segment_grid
from kwloc.supervision import TaggerNoiseConfig, bow_targets, simulate_tagger

root = Path(tempfile.mkdtemp())
cfg = SynthConfig(vocab_size=5, n_train=100, n_dev=20, n_test=20, seed=1)
corpus = synth_corpus(cfg, root / "corpus")
print("vocabulary:", corpus.vocab)
print({split: len(ids) for split, ids in corpus.splits.items()})

# %% [markdown]
# One utterance: its transcript with word times, and the feature matrix.

# %%
utt = corpus.splits["train"][0]
ali = corpus.alignments[utt]
feats = corpus.features(utt)
print(utt, f"{ali.dur_ms} ms,", feats.data.shape, "frames x dims")
for span in ali.words:
    print(f"  {span.word:>8s}  {span.start_ms:5d}-{span.end_ms:5d} ms")

# %% [markdown]
# The weak label is just which keywords occur. A simulated image tagger gives
# a soft and sometimes wrong version of the same vector.

# %%
bow = bow_targets(ali, corpus.vocab)
noisy = simulate_tagger(bow, TaggerNoiseConfig(p_fn=0.3, p_fp=0.05, kappa=10.0, seed=0))
for word, clean, soft in zip(corpus.vocab, bow.y, noisy.y):
    print(f"  {word:>8s}  bow {clean:.0f}  tagger {soft:.2f}")

# %% [markdown]
# Masking-based localisation scores overlapping windows of 200 to 600 ms.

# %%
grid = segment_grid(feats.n_frames)
lengths = np.array([e - s for s, e in grid.windows]) * feats.frame_period_ms
print(len(grid), "windows, durations", sorted(set(lengths.tolist())))

# %% [markdown]
# A location guessed uniformly at random lands inside the keyword with
# probability span / duration. That is the floor any method should clear.

# %%
ids = corpus.splits["test"]
print("chance accuracy", round(chance_accuracy(corpus.alignments, ids, corpus.vocab), 3))
print("monte carlo     ", round(chance_accuracy_mc(corpus.alignments, ids, corpus.vocab), 3))
