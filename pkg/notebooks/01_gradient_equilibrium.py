# %% [markdown]
# # Gradient equilibrium
#
# In a multi-exit network, block i sits under every exit j >= i, so its
# gradient is a sum of k - i + 1 loss gradients. Summing grows the variance
# with depth-to-go. Gradient equilibrium inserts a node that is the identity
# going forward and multiplies the gradient by a constant going backward.
# The node is applied on both branches leaving each feature map, and the
# constants are chosen so that each block receives the *average* of its
# downstream loss gradients.

# %%
import numpy as np

from multiexit import autodiff as ad
from multiexit.config import load_config
from multiexit.data import make_dataset
from multiexit.network import ModelConfig, build_model
from multiexit.training import TrainConfig, ge_scale_factors, measure_grad_variance, per_loss_block_grads

# %% [markdown]
# ## The rescale node
# Forward: unchanged. Backward: scaled.

# %%
x = ad.Tensor([1.0, -2.0, 3.0], requires_grad=True)
y = ad.rescale_gradient(x, 0.25)
ad.backward((y * y).sum())
print("forward equal:", np.array_equal(y.data, x.data))
print("gradient:", x.grad, "(plain would be", 2 * x.data, ")")

# %% [markdown]
# ## Branch factors
# For k exits, stage i sends 1/(k-i+1) to its own head and (k-i)/(k-i+1) to
# the next block.

# %%
for i, (head, nxt) in enumerate(ge_scale_factors(5), start=1):
    print(f"stage {i}: head {head:.3f}  next block {nxt if nxt is None else round(nxt, 3)}")

# %% [markdown]
# ## Telescoping
# Along the backbone the pass-through factors multiply out, so every loss
# reaches block i scaled by exactly 1/(k-i+1).

# %%
k = 5
model = build_model(ModelConfig(8, 4, (16,) * k, head_hidden=8), seed=0)
rng = np.random.default_rng(0)
xb, yb = rng.normal(size=(32, 8)), rng.integers(0, 4, 32)
plain = per_loss_block_grads(model, xb, yb, TrainConfig(), ge=False)
ge = per_loss_block_grads(model, xb, yb, TrainConfig(), ge=True)
for i in range(k):
    ratios = [np.linalg.norm(ge[j, i]) / np.linalg.norm(plain[j, i]) for j in range(i, k)]
    print(f"block {i + 1}: ratio per loss {np.round(ratios, 6)}  expected {1 / (k - i):.6f}")

# %% [markdown]
# ## Variance over resampled batches
# The summed-gradient variance under equilibrium equals the plain variance
# divided by (k-i+1)^2, and stays below twice the largest single-loss variance.

# %%
cfg = load_config(overrides={"data.n_train": "2000", "data.n_val": "10", "data.n_test": "10"})
data = make_dataset(cfg.data)
net = build_model(cfg.model_config(data.input_dim, data.num_classes), 0)
report = measure_grad_variance(net, data, cfg.train, n_steps=50)
for b in report.blocks:
    print(f"block {b.block}: plain {b.var_plain:.3e}  ge {b.var_ge:.3e}  2*max single {b.bound:.3e}")
