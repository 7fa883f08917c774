# %% [markdown]
# # Training a detector and asking it where the keyword is
#
# The detector only ever sees which keywords an utterance contains. We train a
# small attention model, then read locations off it in three ways: the
# attention weights themselves, and two masking sweeps that re-run the model
# on parts of the input.

# %%
import tempfile
from pathlib import Path

import numpy as np

from kwloc.corpus import SynthConfig, synth_corpus
from kwloc.localisation import gradcam_scores, locate
from kwloc.models import forward_full
from kwloc.training import TrainConfig, train

root = Path(tempfile.mkdtemp())
corpus = synth_corpus(SynthConfig(vocab_size=4, n_train=300, n_dev=40, n_test=40, seed=2), root / "corpus")

config = TrainConfig.from_dict({
    "architecture": "CNN-Attend",
    "arch": {"channels": [16, 16, 16, 16, 16, 32], "hidden": 32},
    "lr": 2e-3,
    "epochs": 15,
    "seed": 0,
})
result = train(config, corpus, root / "run",
               progress=lambda r: print(f"epoch {r['epoch']}  dev loss {r['dev_loss']:.3f}"))
params = result.params
print("kept epoch", result.best_epoch)

# %% [markdown]
# Pick a test utterance and compare each method's location with the truth.

# %%
utt = corpus.splits["test"][0]
ali = corpus.alignments[utt]
x = corpus.features(utt).data
det = forward_full(params, x)[0]
print(utt, [(s.word, s.start_ms, s.end_ms) for s in ali.words])
for w, word in enumerate(corpus.vocab):
    line = f"{word:>8s}  p={det.probs[w]:.2f}"
    for method in ("attention", "masked-in", "masked-out"):
        res = locate(params, x, w, method)
        tau = res.tau * 10
        hit = any(s.contains(tau) for s in ali.spans_of(word))
        line += f"  {method} {tau:5d} ms{'*' if hit else ' '}"
    print(line)
print("* marks a location inside an occurrence of the keyword")

# %% [markdown]
# Attention weights form a distribution over encoder frames; the heaviest
# frames show where the model listened for the keyword.

# %%
w = int(np.argmax(det.probs))
alpha = locate(params, x, w, "attention").scores
top = np.argsort(alpha)[::-1][:5]
print(corpus.vocab[w], "top frames", top.tolist(), "mass", round(float(alpha[top].sum()), 3))

# %% [markdown]
# Grad-CAM is meant for the max-pooled model, but its per-channel weights are
# just averaged gradients, so the same call shows how they look here.

# %%
maps, gammas = gradcam_scores(params, x, [w])
print("channels with positive weight:", int((gammas[0] > 0).sum()), "of", gammas.shape[1])
