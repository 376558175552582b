"""Language-guided semantic adversarial attacks through diffusion guidance factors."""

from i2a.attack import (
    AttackConfig,
    AttackResult,
    BenignEdit,
    I2A,
    ProjectionResult,
    benign_edit,
    i2a_attack,
    pgd_update,
    project,
    search_scales,
)
from i2a.baselines import FGSM, MIM, PGD, AdaptiveAttack, EOTClassifier, NoiseAttackConfig, adaptive, register_attack
from i2a.errors import ConfigurationError, InstructionParseError, OfflineError, RequestRejected, TransportError
from i2a.harness import EvalSettings, ReportTable, RunRecord, ablate, evaluate_transfer, evaluate_whitebox
from i2a.instructions import InstructionGenerator, PromptTemplate, builtin_prompts
from i2a.models import Backend, MockBackend, ScoreFromEpsilon, TorchClassifier, classify
from i2a.perceptual import AlexNetFeatures, RandomConvFeatures, lpips_distance, objective
from i2a.sampler import (
    ConditionPair,
    GuidanceFactors,
    GuidanceScales,
    NoiseSchedule,
    NoiseSequence,
    adv_score,
    cfg_score,
    denoise_step,
    initial_noise,
    sample,
)

__version__ = "0.1.0"
