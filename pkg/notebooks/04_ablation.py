# %% [markdown]
# # Ablation of the three techniques
#
# All eight on/off combinations of gradient equilibrium (GE), inline
# subnetwork collaboration (ISC) and one-for-all distillation (OFA). Phase 1
# only depends on GE, so it is trained once per seed and GE setting and
# shared by the four phase-2 variants. This is a reduced run: the full
# five-seed grid is `multiexit ablate`.

# %%
import numpy as np

from multiexit.config import load_config
from multiexit.experiments import run_ablation, summarize_ablation

# %%
cfg = load_config(overrides={"data.n_train": "4000", "train.phase1_epochs": "12", "train.phase2_epochs": "6"})
rows = run_ablation(cfg, seeds=[0, 1])

# %%
print(" GE ISC OFA  mean acc  per exit")
for r in summarize_ablation(rows):
    print(f" {int(r.ge):2d} {int(r.isc):3d} {int(r.ofa):3d}  {r.mean_accuracy:.4f}   {np.round(r.exit_accuracy, 4)}")

# %% [markdown]
# Block-1 gradient variance during phase 1, per seed: GE averages the
# downstream gradients, so it is far smaller.

# %%
for seed in (0, 1):
    v = {r.ge: r.grad_var_block1 for r in rows if r.seed == seed and not r.isc and not r.ofa}
    print(f"seed {seed}: GE off {v[False]:.3e}  GE on {v[True]:.3e}")
