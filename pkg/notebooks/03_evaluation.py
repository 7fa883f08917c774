# %% [markdown]
# # Three ways to score localisation
#
# * **oracle**: the keyword is known to be present; is the predicted time
#   inside one of its occurrences?
# * **actual**: the model must also detect it (probability above a threshold);
#   a hit needs a correct detection and a correct location.
# * **spotting**: rank all test utterances by detection probability and check
#   the top of the ranking, again requiring a correct location.
#
# Detection alone is an upper bound for actual and spotting localisation, and
# every report checks that. Here we train on clean and on noisy labels and
# compare.

# %%
import tempfile
from pathlib import Path

from kwloc.corpus import SynthConfig, synth_corpus
from kwloc.evaluation import chance_accuracy, evaluate, score_corpus
from kwloc.training import TrainConfig, train

root = Path(tempfile.mkdtemp())
corpus = synth_corpus(SynthConfig(vocab_size=4, n_train=300, n_dev=40, n_test=60, seed=3), root / "corpus")


def fit(supervision):
    cfg = TrainConfig.from_dict({
        "architecture": "CNN-Attend",
        "arch": {"channels": [16, 16, 16, 16, 16, 32], "hidden": 32},
        "lr": 2e-3, "epochs": 15, "seed": 0, "supervision": supervision,
        "tagger": {"p_fn": 0.3, "p_fp": 0.05, "kappa": 10.0, "seed": 0},
    })
    return train(cfg, corpus, root / supervision).params


models = {sup: fit(sup) for sup in ("bow", "tagger")}

# %% [markdown]
# The text report of the clean model, attention method, actual task.

# %%
scores = {sup: score_corpus(p, corpus, "test", "attention") for sup, p in models.items()}
print(evaluate("actual", scores["bow"], corpus.alignments).to_text())

# %% [markdown]
# Side by side. The noisy labels miss 30% of true keywords and invent 5%
# false ones.

# %%
chance = chance_accuracy(corpus.alignments, corpus.splits["test"], corpus.vocab)
print(f"chance oracle accuracy {chance:.3f}")
for sup, table in scores.items():
    oracle = evaluate("oracle", table, corpus.alignments).overall
    actual = evaluate("actual", table, corpus.alignments)
    spot = evaluate("spotting", table, corpus.alignments)
    f1 = actual.overall["f1"]
    print(f"{sup:>6s}  oracle {oracle['accuracy']:.3f}"
          f"  actual F1 {'--' if f1 is None else f'{f1:.3f}'} (detection {actual.upper['f1'] or 0:.3f})"
          f"  P@10 {spot.overall['p_at_10']:.3f} (spotting {spot.upper['p_at_10']:.3f})")

# %% [markdown]
# With a model this small and one seed, which of the two localises better
# changes from run to run. The acceptance suite repeats the comparison on the
# full desk-scale corpus with a larger model.
