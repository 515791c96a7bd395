"""
Training the recommender and ablating its interval terms
========================================================

A short run on the synthetic city: train the full model and the variant with
every interval term and the balanced sampler removed, then compare test
recall and the loss curves.  Sizes are scaled down so the script finishes in
about a minute.
"""

# %%
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from stanpoi import ingest, synth, train

ds = ingest.from_text(synth.generate(synth.SynthConfig(num_users=20, weeks=12, seed=0)))
print(ds.stats.summary(), "train examples:", len(ds.train))

# %%
# The defaults follow the published protocol (d=50, n=100, 50 epochs);
# here the window and width shrink to keep the run short.
base = train.TrainConfig(epochs=6, n=20, d=16, eval_k=(1, 5, 10), seed=0)
suite = train.ablation_suite(ds, base, variants=["STAN", "-ALL"], seeds=[0])
print(suite.table())

# %%
# Score-gradient work per optimizer step: the balanced sampler touches the
# label and 10 negatives instead of every candidate.
for name, reports in suite.reports.items():
    print(f"{name:<6} score gradients per step: {reports[0].score_grads_per_step:.0f}")

# %%
# Loss curves.
fig, ax = plt.subplots(figsize=(5, 3.5))
for name, reports in suite.reports.items():
    ax.plot(reports[0].epoch_loss, marker="o", label=name)
ax.set_xlabel("epoch")
ax.set_ylabel("mean training loss")
ax.legend()
fig.tight_layout()
fig.savefig("loss_curves.png", dpi=120)
print("wrote loss_curves.png")
