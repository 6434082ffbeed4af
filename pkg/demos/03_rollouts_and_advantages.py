# # Hybrid rollouts and group advantages
#
# A rollout emits a few latent tokens, then a discrete answer. Each query is
# rolled out G times and rewards are normalised within the group.

import numpy as np

from latentrl.model import ModelConfig, init_params
from latentrl.rollout import compute_advantages, distinct_count, rollout_group
from latentrl.sampler import SamplerConfig
from latentrl.tasks import DEFAULT_VOCAB, make_dataset, single_task_mixture

params = init_params(ModelConfig(d_model=32, n_layers=2, n_heads=4, d_ff=64, max_seq_len=40), seed=0, std=0.3)
inst = make_dataset(single_task_mixture("add_chain", 2), 1, seed=5)[0]
print("query", inst.query, "answer", inst.answer)

group = rollout_group(params, inst, 8, 4, SamplerConfig(tau_g=0.5), 6, seed=0)
for t in group.trajectories:
    top = [int(np.argmax(z)) for z in t.latent_tokens]
    print("latent argmax", DEFAULT_VOCAB.detokenize(top),
          "answer", repr(DEFAULT_VOCAB.detokenize(t.answer_ids)), "reward", t.reward)

# Advantages use the population standard deviation. A group where every
# rollout scores the same carries no signal.

print(compute_advantages([1, 0, 0, 1]))
print(compute_advantages([1, 0, 0, 0, 0, 0, 0, 0]).round(4))
print(compute_advantages([1, 1, 1, 1]))

# Stochastic latents give every rollout its own reasoning prefix. Without
# noise the latent part repeats across the group and only the sampled answer
# can vary. (An untrained model's answers are noise, so whole trajectories
# are distinct either way here.)

det = rollout_group(params, inst, 8, 4, SamplerConfig(noise_kind="none"), 6, seed=0)
for name, g in (("with noise", group), ("without", det)):
    prefixes = len({t.latent_tokens.tobytes() for t in g.trajectories})
    print(f"{name:<10} distinct latent prefixes {prefixes}, distinct trajectories {distinct_count(g.trajectories)}")
