# # Latent tokens from Gumbel-Softmax
#
# A latent token is a whole distribution over the vocabulary. We draw one by
# perturbing log-probabilities with Gumbel noise and applying a tempered softmax.

import numpy as np

from latentrl.sampler import SamplerConfig, gumbel_softmax, sample_gumbel_noise, sample_latent
from latentrl.rng import stream

pi = np.array([0.6, 0.25, 0.1, 0.05])
rng = stream(0, 42)

# At a moderate temperature each draw stays on the simplex but moves around pi.

for _ in range(3):
    z = sample_latent(pi, SamplerConfig(tau_g=0.5), rng)
    print(np.round(z, 3), "sum", z.sum())

# Temperature controls sharpness. Using the same noise at three temperatures
# shows the draw hardening towards a one-hot vector as tau falls.

eps = sample_gumbel_noise(rng, pi.shape)
for tau in (5.0, 0.5, 0.05):
    print(f"tau {tau:>4}:", np.round(gumbel_softmax(pi, eps, tau), 3))

# The argmax of the perturbed logits is an exact categorical sample from pi
# (the Gumbel-max trick). Frequencies over many draws match pi.

n = 100_000
noise = sample_gumbel_noise(rng, (n, pi.size)).epsilon
freq = np.bincount(np.argmax(np.log(pi) + noise, axis=1), minlength=pi.size) / n
print("pi       ", pi)
print("frequency", np.round(freq, 4))

# Without noise the latent token is pi itself, which makes every rollout of a
# query identical.

print(sample_latent(pi, SamplerConfig(noise_kind="none"), rng))
