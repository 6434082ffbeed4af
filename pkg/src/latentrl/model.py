"""Tiny pre-norm decoder-only transformer.

The vocabulary embedding table serves both discrete tokens (row lookup) and
latent tokens (probability-weighted average of rows). Inputs are sequences
of embedding vectors, so a latent step and a discrete step look the same to
the network.

Two execution paths share one parameter set:

* ``forward_logits`` builds a tape and is used for training and as the
  semantic reference;
* ``DecodeCache`` runs plain numpy with per-layer key/value reuse and is used
  for rollouts. Both agree to ~1e-12.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import CapacityError, ContractError, DimensionError
from .rng import INIT, stream
from .tensor import Tensor

LN_EPS = 1e-5
MASK_VALUE = -1e30
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 256

    def __post_init__(self):
        for name, value in asdict(self).items():
            if int(value) < 1:
                raise ContractError(f"ModelConfig.{name} must be >= 1, got {value}")
        if self.vocab_size < 4:
            raise ContractError("vocab_size must be >= 4 to hold the special tokens")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes = {"tok_emb": (v, d), "pos_emb": (cfg.max_seq_len, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.wk": (d, d), p + "attn.wv": (d, d), p + "attn.wo": (d, d),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, f), p + "mlp.b1": (f,), p + "mlp.w2": (f, d), p + "mlp.b2": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "head": (d, v)})
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    @property
    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self.tensors.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray],
                    requires_grad: bool = True) -> "ModelParams":
        expected = param_shapes(config)
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ContractError(f"parameter names differ: missing={missing} extra={extra}")
        tensors = {}
        for name, shape in expected.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {arr.shape}")
            tensors[name] = Tensor(arr.copy(), requires_grad=requires_grad)
        return cls(config, tensors)


def init_params(cfg: ModelConfig, seed: int = 0, std: float = 0.02) -> ModelParams:
    """GPT-2 style init: N(0, 0.02) weights, residual projections scaled down."""
    rng = stream(seed, INIT)
    arrays = {}
    resid_std = std / math.sqrt(2 * cfg.n_layers)
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            arrays[name] = np.ones(shape)
        elif name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
            arrays[name] = np.zeros(shape)
        elif name.endswith("attn.wo") or name.endswith("mlp.w2"):
            arrays[name] = rng.normal(0.0, resid_std, size=shape)
        else:
            arrays[name] = rng.normal(0.0, std, size=shape)
    return ModelParams.from_arrays(cfg, arrays)


def snapshot_reference(params: ModelParams) -> ModelParams:
    """Deep, gradient-free copy used as the KL reference policy."""
    return ModelParams(params.config, {k: Tensor(t.data.copy()) for k, t in params.items()})


def frozen_view(params: ModelParams) -> ModelParams:
    """Gradient-free params sharing the same arrays (no tape is recorded)."""
    return ModelParams(params.config, {k: Tensor.wrap(t.data) for k, t in params.items()})


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

ORIGINS = ("prompt-token", "latent", "discrete-token")


@dataclass
class EmbeddingSequence:
    vectors: Tensor  # [T, d_model], positional embeddings already added
    origins: list[str]

    def __len__(self) -> int:
        return len(self.origins)

    def concat(self, other: "EmbeddingSequence") -> "EmbeddingSequence":
        if not len(self):
            return other
        if not len(other):
            return self
        return EmbeddingSequence(T.concat([self.vectors, other.vectors], axis=0),
                                 self.origins + other.origins)


def _check_capacity(cfg: ModelConfig, length: int) -> None:
    if length > cfg.max_seq_len:
        raise CapacityError(f"sequence length {length} exceeds max_seq_len {cfg.max_seq_len}")


def embed_tokens(params: ModelParams, ids, start: int = 0,
                 origin: str = "prompt-token") -> EmbeddingSequence:
    """Token-embedding rows plus positional embeddings from position ``start``."""
    cfg = params.config
    ids = np.asarray(ids, dtype=np.intp).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ContractError(f"token id out of range [0, {cfg.vocab_size})")
    if not ids.size:
        return EmbeddingSequence(Tensor(np.zeros((0, cfg.d_model))), [])
    _check_capacity(cfg, start + ids.size)
    vec = params["tok_emb"][ids] + params["pos_emb"][start:start + ids.size]
    return EmbeddingSequence(vec, [origin] * ids.size)


def check_simplex(z: np.ndarray, tol: float = 1e-6) -> None:
    z = np.asarray(z, dtype=np.float64)
    if (z < -tol).any() or np.any(np.abs(z.sum(axis=-1) - 1.0) > tol):
        raise ContractError("latent token is not on the probability simplex")


def expectation_embedding(params: ModelParams, z) -> Tensor:
    """Sum_k z_k e_k; ``z`` is a constant, gradients reach only the table."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (params.config.vocab_size,):
        raise DimensionError(f"latent token shape {z.shape} != ({params.config.vocab_size},)")
    check_simplex(z)
    return T.matmul(Tensor(z), params["tok_emb"])


def embed_latent(params: ModelParams, z, position: int) -> EmbeddingSequence:
    _check_capacity(params.config, position + 1)
    vec = expectation_embedding(params, z) + params["pos_emb"][position]
    return EmbeddingSequence(vec.reshape(1, -1), ["latent"])


def embed_soft(params: ModelParams, soft: np.ndarray) -> Tensor:
    """Batched embedding of rows that are one-hot (tokens) or simplex points (latents).

    ``soft`` has shape [..., T, V]; returns [..., T, d_model].
    """
    length = soft.shape[-2]
    _check_capacity(params.config, length)
    return T.matmul(Tensor(soft), params["tok_emb"]) + params["pos_emb"][:length]


# ---------------------------------------------------------------------------
# taped forward
# ---------------------------------------------------------------------------

def gelu(x: Tensor) -> Tensor:
    inner = T.tanh((x + x * x * x * 0.044715) * _GELU_C)
    return x * (inner + 1.0) * 0.5


def _causal_mask(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), MASK_VALUE), k=1)


def forward_logits(params: ModelParams, x: Tensor) -> Tensor:
    """Logits for every position of ``x`` ([..., T, d_model]) -> [..., T, V]."""
    cfg = params.config
    if x.shape[-1] != cfg.d_model:
        raise DimensionError(f"input width {x.shape[-1]} != d_model {cfg.d_model}")
    length = x.shape[-2]
    if length < 1:
        raise ContractError("empty input sequence")
    _check_capacity(cfg, length)
    lead = x.shape[:-2]
    h_, dh = cfg.n_heads, cfg.head_dim
    mask = _causal_mask(length)
    scale = 1.0 / math.sqrt(dh)

    def heads(t: Tensor) -> Tensor:
        nd = len(lead)
        return t.reshape(*lead, length, h_, dh).transpose(*range(nd), nd + 1, nd, nd + 2)

    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h = T.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"], LN_EPS)
        q, k, v = (heads(h @ params[p + f"attn.w{n}"]) for n in "qkv")
        nd = len(lead)
        kt = k.transpose(*range(nd + 1), nd + 2, nd + 1)
        att = T.softmax((q @ kt) * scale + mask, axis=-1)
        o = (att @ v).transpose(*range(nd), nd + 1, nd, nd + 2).reshape(*lead, length, cfg.d_model)
        x = x + o @ params[p + "attn.wo"]
        h = T.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"], LN_EPS)
        f = gelu(h @ params[p + "mlp.w1"] + params[p + "mlp.b1"])
        x = x + (f @ params[p + "mlp.w2"] + params[p + "mlp.b2"])
    x = T.layer_norm(x, params["ln_f.g"], params["ln_f.b"], LN_EPS)
    return x @ params["head"]


def forward_distribution(params: ModelParams, inputs: EmbeddingSequence,
                         sampling_temperature: float = 1.0) -> Tensor:
    """Next-token distribution after the last input position."""
    if sampling_temperature <= 0:
        raise ContractError(f"sampling temperature must be positive, got {sampling_temperature}")
    if not len(inputs):
        raise ContractError("forward_distribution needs a nonempty sequence")
    logits = forward_logits(params, inputs.vectors)[-1]
    return T.softmax(logits * (1.0 / sampling_temperature))


# ---------------------------------------------------------------------------
# numpy incremental decoding
# ---------------------------------------------------------------------------

def _ln_np(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS) * g + b


def _gelu_np(x):
    return x * (np.tanh((x + x * x * x * 0.044715) * _GELU_C) + 1.0) * 0.5


class DecodeCache:
    """Per-layer key/value cache for a batch of sequences sharing positions.

    ``prefill`` consumes a [B, n, d] block of input embeddings; ``step``
    appends one [B, d] input per row. Both return last-position logits [B, V].
    """

    def __init__(self, params: ModelParams, batch: int):
        self.params = params
        self.cfg = params.config
        self.w = params.arrays()
        self.batch = batch
        self.length = 0
        self.keys: list[np.ndarray | None] = [None] * self.cfg.n_layers
        self.values: list[np.ndarray | None] = [None] * self.cfg.n_layers

    def embed(self, soft: np.ndarray, position: int) -> np.ndarray:
        """Input vectors for one position from one-hot / simplex rows [B, V]."""
        return soft @ self.w["tok_emb"] + self.w["pos_emb"][position]

    def prefill(self, x: np.ndarray) -> np.ndarray:
        return self._run(np.asarray(x, dtype=np.float64))

    def step(self, x: np.ndarray) -> np.ndarray:
        return self._run(np.asarray(x, dtype=np.float64)[:, None, :])

    def _run(self, x: np.ndarray) -> np.ndarray:
        cfg, w = self.cfg, self.w
        b, n, d = x.shape
        if b != self.batch:
            raise DimensionError(f"batch {b} != cache batch {self.batch}")
        start = self.length
        _check_capacity(cfg, start + n)
        h_, dh = cfg.n_heads, cfg.head_dim
        mask = np.triu(np.full((n, start + n), MASK_VALUE), k=start + 1)
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            h = _ln_np(x, w[p + "ln1.g"], w[p + "ln1.b"])
            q, k, v = ((h @ w[p + f"attn.w{c}"]).reshape(b, n, h_, dh).transpose(0, 2, 1, 3)
                       for c in "qkv")
            if self.keys[i] is not None:
                k = np.concatenate([self.keys[i], k], axis=2)
                v = np.concatenate([self.values[i], v], axis=2)
            self.keys[i], self.values[i] = k, v
            att = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)) + mask
            att = T.softmax_np(att, axis=-1)
            o = (att @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
            x = x + o @ w[p + "attn.wo"]
            h = _ln_np(x, w[p + "ln2.g"], w[p + "ln2.b"])
            x = x + (_gelu_np(h @ w[p + "mlp.w1"] + w[p + "mlp.b1"]) @ w[p + "mlp.w2"] + w[p + "mlp.b2"])
        self.length = start + n
        return _ln_np(x[:, -1], w["ln_f.g"], w["ln_f.b"]) @ w["head"]


def logits_np(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """All-position logits without building a tape ([..., T, d] -> [..., T, V])."""
    x = np.asarray(x, dtype=np.float64)
    return forward_logits(frozen_view(params), Tensor.wrap(x)).data


def kl_categorical(p_log: np.ndarray, q_log: np.ndarray) -> np.ndarray:
    """KL(p || q) along the last axis from log-probabilities."""
    return (np.exp(p_log) * (p_log - q_log)).sum(axis=-1)


def save_model(params: ModelParams, path, extra_meta: dict | None = None) -> None:
    from .checkpoint import write_container
    meta = {"kind": "model", "model_config": asdict(params.config), **(extra_meta or {})}
    write_container(path, meta, params.arrays())


def load_model(path) -> ModelParams:
    from .checkpoint import read_container
    meta, arrays = read_container(path)
    cfg = ModelConfig(**meta["model_config"])
    return ModelParams.from_arrays(cfg, {k: v for k, v in arrays.items() if "/" not in k})
