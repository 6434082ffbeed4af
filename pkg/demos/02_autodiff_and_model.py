# # The autodiff engine and the decoder
#
# Everything is float64 numpy with a small reverse-mode tape.

import numpy as np

from latentrl import tensor as T
from latentrl.model import (ModelConfig, embed_latent, embed_tokens, forward_distribution,
                            init_params)
from latentrl.tasks import DEFAULT_VOCAB
from latentrl.tensor import Tensor

# A scalar function of a matrix, differentiated by the tape and by hand.

x = Tensor(np.array([[1.0, -2.0], [0.5, 3.0]]), requires_grad=True)
y = T.sum(T.tanh(x) * x)
y.backward()
print("tape  ", x.grad)
print("manual", np.tanh(x.data) + x.data * (1 - np.tanh(x.data) ** 2))

# The policy is a pre-norm decoder. Its input can be token ids or latent
# tokens: a latent token enters as the probability-weighted mean of the
# token embeddings.

cfg = ModelConfig(d_model=32, n_layers=2, n_heads=4, d_ff=64, max_seq_len=32)
params = init_params(cfg, seed=0)
print(f"{params.num_parameters()} parameters")

query = [DEFAULT_VOCAB.bos, *DEFAULT_VOCAB.tokenize("3+4=")]
seq = embed_tokens(params, query)
z = np.full(cfg.vocab_size, 1.0 / cfg.vocab_size)
seq = seq.concat(embed_latent(params, z, len(seq)))
pi = forward_distribution(params, seq)
print("next-step distribution sums to", float(pi.data.sum()))
