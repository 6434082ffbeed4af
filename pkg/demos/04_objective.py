# # The unified objective
#
# Latent steps are scored as soft labels, answer tokens by REINFORCE, and a
# per-token KL keeps the policy near a frozen reference.

import numpy as np

from latentrl import tensor as T
from latentrl.model import ModelConfig, init_params, snapshot_reference
from latentrl.objective import ObjectiveConfig, discrete_objective, latent_objective, lepo_loss
from latentrl.rollout import compute_advantages, rollout_group
from latentrl.sampler import SamplerConfig
from latentrl.tasks import make_dataset, single_task_mixture
from latentrl.tensor import Tensor

# With one-hot soft labels the latent objective is exactly the discrete one.

logits = np.random.default_rng(0).normal(size=(3, 5))
ids = [4, 0, 2]
print(float(latent_objective(T.log_softmax(Tensor(logits)), np.eye(5)[ids], 1.5).data),
      float(discrete_objective(T.log_softmax(Tensor(logits)), ids, 1.5).data))

# A full loss over a batch of groups, and one plain gradient step against it.

cfg = ModelConfig(d_model=32, n_layers=2, n_heads=4, d_ff=64, max_seq_len=40)
params = init_params(cfg, seed=1, std=0.3)
reference = snapshot_reference(params)
problems = make_dataset(single_task_mixture("add_chain", 1), 4, seed=2)
groups = [rollout_group(params, p, 6, 3, SamplerConfig(), 4, seed=0, query_index=i)
          for i, p in enumerate(problems)]
for g in groups:
    g.advantages = compute_advantages(g.rewards)
    g.advantages[:] = np.where(np.arange(g.size) % 2 == 0, 1.0, -1.0)  # a made-up signal for the demo

ocfg = ObjectiveConfig(beta=0.1)
out = lepo_loss(groups, params, reference, ocfg)
print(f"loss {out.total_loss:.5f}  latent {out.j_latent:.5f}  discrete {out.j_discrete:.5f}  kl {out.kl_term:.2e}")
out.loss.backward()
for _, t in params.items():
    t.data -= 0.05 * t.grad
    t.grad = None
after = lepo_loss(groups, params, reference, ocfg)
print(f"after one step: loss {after.total_loss:.5f}  kl {after.kl_term:.2e}")
