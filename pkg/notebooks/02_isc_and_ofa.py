# %% [markdown]
# # Inline subnetwork collaboration and one-for-all distillation
#
# ISC adds the previous exit's logits, with the gradient stopped, to each
# exit's own head output. Later exits then only learn a correction on top of
# earlier predictions. OFA trains every intermediate exit against the last
# exit's softened distribution as well as the labels.

# %%
import numpy as np

from multiexit import autodiff as ad
from multiexit.data import DatasetSpec, generate_synthetic
from multiexit.inference import anytime_eval
from multiexit.network import ModelConfig, build_model, forward_all, last_layer_params
from multiexit.training import TrainConfig, ofa_exit_loss, train_phase1, train_phase2

# %% [markdown]
# ## ISC is a residual in the forward pass

# %%
cfg = ModelConfig(8, 4, (16, 16, 16), head_hidden=8, isc_enabled=True)
model = build_model(cfg, seed=1)
x = np.random.default_rng(1).normal(size=(5, 8))
with_isc = forward_all(model, x, "train").logits
heads_only = forward_all(model, x, "off").logits
print("exit 3 = head3 + head2 + head1:",
      np.allclose(with_isc[2].data, sum(h.data for h in heads_only)))

# %% [markdown]
# ## ...and invisible to the backward pass
# Exit 2's loss sends no gradient into head 1 through the transfer.

# %%
y = np.array([0, 1, 2, 3, 0])
model.zero_grad()
ad.backward(ad.cross_entropy_loss(forward_all(model, x, "train").logits[1], y))
print("head1 gradient norm:", np.linalg.norm(model.params["head1.out.weight"].grad))

# %% [markdown]
# ## The distillation loss
# alpha weighs cross-entropy against KL(teacher || student) at temperature T.

# %%
teacher, student = ad.Tensor([[np.log(2.0), 0.0]]), ad.Tensor([[0.0, 0.0]])
for alpha in (1.0, 0.5, 0.0):
    print(f"alpha {alpha}: {ofa_exit_loss(teacher, student, [0], alpha, 1.0).item():.6f}")

# %% [markdown]
# ## Two-phase training on a small problem
# Phase 1 trains everything. Phase 2 tunes only the final affine map of each
# head, with ISC and OFA switched on.

# %%
data = generate_synthetic(DatasetSpec(n_train=2000, n_val=500, n_test=1000, input_dim=12, classes=6))
net = build_model(ModelConfig(12, 6, (32, 32, 32), head_hidden=16, isc_enabled=True), seed=0)
tcfg = TrainConfig(lr0=0.04, phase1_epochs=10, phase2_epochs=5)
train_phase1(net, data, tcfg)
print("after phase 1:", np.round(anytime_eval(net, data.x_test, data.y_test), 4))
print("tunable in phase 2:", last_layer_params(net))
train_phase2(net, data, tcfg)
print("after phase 2:", np.round(anytime_eval(net, data.x_test, data.y_test), 4))
