"""Latent and discrete token sampling.

Latent tokens are points on the vocabulary simplex. The main sampler perturbs
``log pi`` with standard Gumbel noise and applies a tempered softmax; the
Gaussian and Dirichlet samplers are alternative noise families, and ``none``
returns ``pi`` itself (deterministic latent reasoning).

Discrete answer tokens use top-k then top-p truncation. Ties always resolve
to the lowest token index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

PROB_FLOOR = 1e-12
U_CLAMP = 1e-12
NOISE_KINDS = ("gumbel", "gaussian", "dirichlet", "none")


@dataclass(frozen=True)
class SamplerConfig:
    tau_g: float = 0.5
    top_k: int = 30
    top_p: float = 0.95
    noise_kind: str = "gumbel"
    temperature: float = 1.0
    gaussian_sigma: float = 1.0
    dirichlet_alpha: float = 1.0
    dirichlet_mix: float = 0.5

    def __post_init__(self):
        if self.noise_kind not in NOISE_KINDS:
            raise ContractError(f"noise_kind must be one of {NOISE_KINDS}, got {self.noise_kind!r}")
        if self.noise_kind in ("gumbel", "gaussian") and not self.tau_g > 0:
            raise ContractError(f"tau_g must be positive, got {self.tau_g}")
        if self.top_k < 1:
            raise ContractError(f"top_k must be >= 1, got {self.top_k}")
        if not 0 < self.top_p <= 1:
            raise ContractError(f"top_p must be in (0, 1], got {self.top_p}")
        if not self.temperature > 0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")
        if not 0 <= self.dirichlet_mix <= 1:
            raise ContractError(f"dirichlet_mix must be in [0, 1], got {self.dirichlet_mix}")
        if not self.dirichlet_alpha > 0:
            raise ContractError(f"dirichlet_alpha must be positive, got {self.dirichlet_alpha}")


@dataclass(frozen=True)
class GumbelNoise:
    epsilon: np.ndarray
    uniforms: np.ndarray


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def gumbel_from_uniform(u) -> GumbelNoise:
    u = np.clip(np.asarray(u, dtype=np.float64), U_CLAMP, 1.0 - U_CLAMP)
    return GumbelNoise(-np.log(-np.log(u)), u)


def sample_gumbel_noise(rng: np.random.Generator, size) -> GumbelNoise:
    """I.i.d. standard Gumbel draws ``-log(-log(u))``, ``u ~ U(0, 1)``."""
    return gumbel_from_uniform(rng.random(size))


def gumbel_softmax(pi, noise, tau_g: float) -> np.ndarray:
    """``softmax((log pi + eps) / tau_g)`` along the last axis.

    ``noise`` may be a :class:`GumbelNoise` or a raw epsilon array.
    """
    if not tau_g > 0:
        raise ContractError(f"tau_g must be positive, got {tau_g}")
    eps = noise.epsilon if isinstance(noise, GumbelNoise) else np.asarray(noise, dtype=np.float64)
    logp = np.log(np.maximum(np.asarray(pi, dtype=np.float64), PROB_FLOOR))
    return _softmax((logp + eps) / tau_g)


def alternate_noise_latent(pi, cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    """Gaussian, Dirichlet or noise-free latent token from ``pi``."""
    pi = np.asarray(pi, dtype=np.float64)
    kind = cfg.noise_kind
    if kind == "none":
        return pi.copy()
    if kind == "gaussian":
        logp = np.log(np.maximum(pi, PROB_FLOOR))
        n = rng.standard_normal(pi.shape)
        return _softmax((logp + cfg.gaussian_sigma * n) / cfg.tau_g)
    if kind == "dirichlet":
        d = rng.dirichlet(np.full(pi.shape[-1], cfg.dirichlet_alpha))
        z = cfg.dirichlet_mix * pi + (1.0 - cfg.dirichlet_mix) * d
        return z / z.sum()
    raise ContractError(f"alternate_noise_latent does not handle noise_kind {kind!r}")


def sample_latent(pi, cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    """One latent token from ``pi`` under ``cfg.noise_kind``."""
    if cfg.noise_kind == "gumbel":
        pi = np.asarray(pi, dtype=np.float64)
        return gumbel_softmax(pi, sample_gumbel_noise(rng, pi.shape), cfg.tau_g)
    return alternate_noise_latent(pi, cfg, rng)


def truncate(pi, top_k: int, top_p: float) -> np.ndarray:
    """Top-k then nucleus truncation, renormalised. Ties keep the lower index."""
    pi = np.asarray(pi, dtype=np.float64)
    order = np.argsort(-pi, kind="stable")
    kept = order[:min(top_k, pi.size)]
    probs = pi[kept]
    if top_p < 1.0:
        cum = np.cumsum(probs) / probs.sum()
        n = int(np.searchsorted(cum, top_p - 1e-12, side="left")) + 1
        kept = kept[:n]
    out = np.zeros_like(pi)
    out[kept] = pi[kept]
    total = out.sum()
    if total <= 0:
        out = np.zeros_like(pi)
        out[order[0]] = 1.0
        return out
    return out / total


def sample_discrete(pi, cfg: SamplerConfig, rng: np.random.Generator) -> int:
    """Draw one token id after top-k / top-p truncation."""
    q = truncate(pi, cfg.top_k, cfg.top_p)
    cum = np.cumsum(q)
    u = rng.random() * cum[-1]
    idx = int(np.searchsorted(cum, u, side="right"))
    # Guard against u landing on the final edge or on a zero-mass tail.
    idx = min(idx, q.size - 1)
    while q[idx] == 0.0:
        idx -= 1
    return idx


def entropy(pi, axis: int = -1) -> np.ndarray:
    """Shannon entropy in nats; ``0 log 0 = 0``."""
    pi = np.asarray(pi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pi > 0, pi * np.log(pi), 0.0)
    return -terms.sum(axis=axis)
