"""
Pairwise-trained embeddings and nearest-neighbour evidence
==========================================================

On synthetic data the label is a linear function of a 5-attribute
explanation vector. We compare two ways of getting an embedding for kNN:

* take the hidden layer of a network trained to regress the label;
* start from that network and keep training the hidden layer with a cosine
  pair loss that pulls together pairs with close labels *and* close
  explanations, and pushes apart pairs that differ.

Predictions for a query are kernel-weighted averages over its nearest
training cases, and those cases double as the evidence for the prediction.

Run from the repository root:  python3 demos/pairwise_knn_synthetic.py
"""

import json
import os

import numpy as np

from ted.experiments import ExperimentConfig, load_source, prepare, run_experiment
from ted.knn import EmbeddingIndex, KnnConfig, predict
from ted.metrics import format_table
from ted.models import Network, embed

HERE = os.path.dirname(os.path.abspath(__file__))
OUT = os.path.join(HERE, "runs")


def load(name):
    path = os.path.join(HERE, "configs", name)
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    d["source"]["path"] = os.path.join(HERE, "configs", d["source"]["path"])
    return ExperimentConfig.from_dict(d)


# %% Train both arms and sweep k
plain = run_experiment(load("synth_embed_y.json"), os.path.join(OUT, "embed_y"))
paired = run_experiment(load("synth_pairwise_ye.json"), os.path.join(OUT, "pairwise_ye"))

rows = [(r.method, res.value, res.test) for r in (plain, paired) for res in r.results]
print(format_table(rows, "k"))

counts = paired.diagnostics["pair_status_counts"]
print(f"\npair statuses used for training: {counts}")

# %% Evidence for one test case
# Reload the persisted pairwise model and index, exactly as `ted evaluate` does.
with open(os.path.join(OUT, "pairwise_ye", "model.json"), encoding="utf-8") as fh:
    net = Network.from_dict(json.load(fh))
index = EmbeddingIndex.load(os.path.join(OUT, "pairwise_ye", "index.json"))

cfg = load("synth_pairwise_ye.json")
test = prepare(cfg, load_source(cfg)).test
i = 0
p = predict(index, embed(net, test.features[i : i + 1])[0], KnnConfig(5))
print(f"\ntest case {test.ids[i]}: true y {test.labels[i]:+.3f}, predicted {p.y:+.3f}")
print(f"  true e      {np.array2string(test.explanations[i], precision=2, sign='+')}")
print(f"  predicted e {np.array2string(p.e, precision=2, sign='+')}")
print("  evidence (training id, cosine distance, weight):")
for nb in p.evidence:
    print(f"    {nb.id:<6} {nb.distance:.4f} {nb.weight:.3f}")
