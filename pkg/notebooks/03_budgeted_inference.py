# %% [markdown]
# # Early exit under a compute budget
#
# Each test sample stops at the first exit whose top softmax probability
# reaches that exit's threshold. For a target average cost, thresholds are
# fitted on the validation split by assuming a fixed fraction of the
# remaining samples leaves at each exit. On a 70/30 easy/hard mixture the
# easy samples leave early, and the accuracy of the full network is reached
# at a fraction of its cost.

# %%
import numpy as np

from multiexit.config import load_config
from multiexit.experiments import train_run
from multiexit.inference import anytime_eval, budgeted_batch_eval, calibrate_thresholds, predict_adaptive
from multiexit.network import count_macs

# %%
cfg = load_config(overrides={"train.phase1_epochs": "15", "train.phase2_epochs": "6"})
model, log, data = train_run(cfg)
costs = count_macs(model.cfg)
acc = anytime_eval(model, data.x_test, data.y_test)
for i, (c, a) in enumerate(zip(costs, acc), start=1):
    print(f"exit {i}: {c:6d} MACs  accuracy {a:.4f}")

# %% [markdown]
# ## One budget
# Halfway between the cheapest and the full cost.

# %%
budget = 0.5 * (costs[0] + costs[-1])
sched = calibrate_thresholds(model, data.x_val, budget)
pred = predict_adaptive(model, data.x_test, sched)
print("q =", round(sched.q, 4), "thresholds", np.round(sched.thresholds, 4))
print("realized cost", pred.costs.mean(), "of budget", budget)
print("accuracy", np.mean(pred.labels == data.y_test))
print("exits taken", np.bincount(pred.exits, minlength=model.k + 1)[1:])
print("hard samples exit at", np.round(pred.exits[data.hard_test].mean(), 2),
      "on average, easy ones at", np.round(pred.exits[~data.hard_test].mean(), 2))

# %% [markdown]
# ## The accuracy-cost curve

# %%
report = budgeted_batch_eval(model, data.x_test, data.y_test, np.linspace(costs[0], costs[-1], 7), data.x_val)
for p in report.points:
    print(f"budget {p.budget:8.0f}  cost {p.avg_cost:8.0f}  accuracy {p.accuracy:.4f}  exits {p.exit_histogram}")
