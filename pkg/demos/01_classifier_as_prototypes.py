"""The frozen CNN head is already a prototype model.

Because averaging commutes with the dot product, classifying the pooled
embedding equals averaging per-position class scores: the classifier
columns act as one prototype per class.  This script measures how tightly
the two routes agree and what the columns look like as prototypes.
"""

import numpy as np

from protoexplain import sem_core
from protoexplain.eval_report import cosine_alignment
from protoexplain.sem_core import LinearClassifier, classifier_as_bank

rng = np.random.default_rng(0)

# A fake frozen head: 7x7 spatial grid, 512 channels, 10 classes.
h = rng.normal(size=(49, 512)).astype(np.float32)
clf = LinearClassifier(rng.normal(size=(512, 10)).astype(np.float32))

route_pool_first = sem_core.classify(sem_core.avg_pool(h), clf)
route_score_first = sem_core.sem_forward(h, clf)
gap, tol = sem_core.commutativity_gap(h, clf)
print("pool-then-classify:", np.round(route_pool_first[:4], 4))
print("classify-then-pool:", np.round(route_score_first[:4], 4))
print(f"max gap {gap:.2e} (tolerance {tol:.2e})")

# The columns themselves form a one-prototype-per-class bank.
bank = classifier_as_bank(clf)
print(f"\nclassifier bank: {bank.num_prototypes} prototypes of dim {bank.dim}")

# On random embeddings the columns are poorly aligned with "their" data;
# alignment only means something once embeddings actually cluster by class.
z = rng.normal(size=(500, 512))
labels = rng.integers(0, 10, size=500)
row = cosine_alignment(bank, z, labels, "random-cnn")
print(f"cos_class={row.cos_class:+.3f} cos_out={row.cos_out:+.3f} on unstructured data")
