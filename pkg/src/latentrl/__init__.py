"""Latent-exploration policy optimisation for small decoder models, in numpy."""
from .errors import (CapacityError, CheckpointError, ConfigError, ContractError, DimensionError,
                     LatentRLError, NonFiniteError, NumericAbort)
from .evaluation import (DifficultyBins, EvalReport, difficulty_shift, eval_sampler, evaluate,
                         pass_at_1, pass_at_k, rollout_entropy_profile)
from .model import ModelConfig, ModelParams, forward_distribution, forward_logits, init_params
from .objective import ObjectiveConfig, lepo_loss
from .rollout import RolloutGroup, Trajectory, compute_advantages, rollout_batch, rollout_group
from .sampler import SamplerConfig, gumbel_softmax, sample_discrete, sample_latent
from .tasks import DEFAULT_VOCAB, TaskInstance, Vocabulary, make_dataset
from .tensor import Tensor
from .trainer import OptimizerState, TrainConfig, Trainer, cosine_lr, train_step

__version__ = "0.1.0"
