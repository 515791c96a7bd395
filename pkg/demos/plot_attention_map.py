"""
Inspecting trajectory self-attention
====================================

Train briefly, then draw the attention weights one user's trajectory places
on its own check-ins.  Padded positions carry no weight, and in the
default mask mode each valid row sums to at most one.
"""

# %%
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from stanpoi import ingest, synth, train
from stanpoi.model import export_attention
from stanpoi.relation import trajectory_relation

ds = ingest.from_text(synth.generate(synth.SynthConfig(num_users=10, weeks=6, seed=1)))
params, model_config, report = train.train(ds, train.TrainConfig(epochs=3, n=16, d=16, seed=0))
print(report.table())

# %%
# Take the first test example and compute its attention matrix.
user, prefix = ds.test[0]
seq = ds.sequence(int(user), int(prefix), model_config.n)
weights = export_attention(seq, trajectory_relation(seq), params, model_config)
m = seq.valid_len
print("valid positions:", m, "row sums:", np.round(weights[:m].sum(axis=1), 3))

# %%
labels = [ds.location_keys[int(loc) - 1] for loc in seq.locations[:m]]
fig, ax = plt.subplots(figsize=(6, 5))
im = ax.imshow(weights[:m, :m], cmap="viridis")
ax.set_xticks(range(m), labels, rotation=90, fontsize=6)
ax.set_yticks(range(m), labels, fontsize=6)
fig.colorbar(im, ax=ax)
fig.tight_layout()
fig.savefig("attention_map.png", dpi=120)
print("wrote attention_map.png")
