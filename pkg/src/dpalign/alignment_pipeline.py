"""Multi-phase private alignment: SFT -> DPO, or SFT -> reward model -> PPO.

Each phase trains on its own disjoint slice of the data with its own DP
optimizer; because the slices are disjoint every phase gets the full budget
and the overall guarantee is their maximum.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import losses
from . import tensor_core as tc
from .data_pipeline import AlignmentDataset, PreferenceTriple, partition_disjoint
from .dp_optimizers import DPOptimizerConfig, OptimizerState, step_with_info
from .models import ModelConfig, RewardNet, TinyPolicy, ValueNet, encode, trim_at_eos
from .privacy_accounting import (
    AccountantConfig,
    BudgetReport,
    PrivacyBudget,
    format_epsilon,
    phase_budget_report,
    sigma_for_budget,
)

log = logging.getLogger(__name__)

LossKind = Literal["sft", "rm", "dpo", "ppo"]
PipelineKind = Literal["dpo_pipeline", "rlhf_pipeline"]

PIPELINE_PHASES = {"dpo_pipeline": ("sft", "dpo"), "rlhf_pipeline": ("sft", "rm", "ppo")}
DEFAULT_FRACTIONS = {"dpo_pipeline": (0.5, 0.5), "rlhf_pipeline": (0.4, 0.3, 0.3)}


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhaseSpec:
    loss_kind: LossKind
    optimizer: DPOptimizerConfig
    epochs: int
    batch_size: int
    budget: PrivacyBudget

    def __post_init__(self):
        if self.loss_kind not in ("sft", "rm", "dpo", "ppo"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        sigma = sigma_for_budget(self.budget, AccountantConfig(self.epochs))
        if math.isinf(sigma):
            if not self.optimizer.pure_noise:
                raise ValueError("zero budget requires an optimizer in pure-noise mode")
        elif self.optimizer.pure_noise or not math.isclose(
            self.optimizer.noise_multiplier, sigma, rel_tol=1e-12, abs_tol=0.0
        ):
            raise ValueError(
                f"noise multiplier {self.optimizer.noise_multiplier} inconsistent with "
                f"budget eps={format_epsilon(self.budget.epsilon)} (expected {sigma})"
            )

    @classmethod
    def build(
        cls,
        loss_kind: LossKind,
        optimizer: DPOptimizerConfig,
        epochs: int,
        batch_size: int,
        budget: PrivacyBudget,
        pure_noise_sigma: float = 1.0,
    ) -> "PhaseSpec":
        """Calibrate the optimizer's noise multiplier from ``budget``."""
        sigma = sigma_for_budget(budget, AccountantConfig(epochs))
        if math.isinf(sigma):
            opt = optimizer.replace(noise_multiplier=pure_noise_sigma, pure_noise=True)
        else:
            opt = optimizer.replace(noise_multiplier=sigma, pure_noise=False)
        return cls(loss_kind, opt, epochs, batch_size, budget)

    def with_budget(self, budget: PrivacyBudget, pure_noise_sigma: float = 1.0) -> "PhaseSpec":
        return PhaseSpec.build(self.loss_kind, self.optimizer, self.epochs, self.batch_size, budget, pure_noise_sigma)


@dataclass(frozen=True)
class PPOSettings:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    rollout_batch: int = 64
    max_response_len: int = 8
    value_coef: float = 0.5
    temperature: float = 1.0


@dataclass(frozen=True)
class PipelineSpec:
    kind: PipelineKind
    phases: tuple[PhaseSpec, ...]
    partition_fractions: tuple[float, ...]
    seed: int = 0
    model: ModelConfig = ModelConfig()
    ppo: PPOSettings = PPOSettings()
    pure_noise_sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))
        object.__setattr__(self, "partition_fractions", tuple(float(f) for f in self.partition_fractions))
        if self.kind not in PIPELINE_PHASES:
            raise ValueError(f"unknown pipeline kind {self.kind!r}")
        kinds = tuple(p.loss_kind for p in self.phases)
        if kinds != PIPELINE_PHASES[self.kind]:
            raise ValueError(f"{self.kind} requires phases {PIPELINE_PHASES[self.kind]}, got {kinds}")
        if len(self.partition_fractions) != len(self.phases):
            raise ValueError("partition_fractions must have one weight per phase")

    def with_budget(self, budget: PrivacyBudget) -> "PipelineSpec":
        phases = tuple(p.with_budget(budget, self.pure_noise_sigma) for p in self.phases)
        return dataclasses.replace(self, phases=phases)

    def with_seed(self, seed: int) -> "PipelineSpec":
        return dataclasses.replace(self, seed=int(seed))

    def with_variant(self, variant: str) -> "PipelineSpec":
        phases = tuple(dataclasses.replace(p, optimizer=p.optimizer.replace(variant=variant)) for p in self.phases)
        return dataclasses.replace(self, phases=phases)


def make_pipeline_spec(
    kind: PipelineKind,
    optimizer: DPOptimizerConfig,
    budget: PrivacyBudget,
    epochs: int = 3,
    batch_size: int = 32,
    seed: int = 0,
    model: ModelConfig = ModelConfig(),
    ppo: PPOSettings = PPOSettings(),
    partition_fractions: Sequence[float] | None = None,
    pure_noise_sigma: float = 1.0,
    phase_overrides: dict | None = None,
) -> PipelineSpec:
    """Build a PipelineSpec with one shared optimizer template; ``phase_overrides``
    maps a loss kind to {"optimizer": {...}, "epochs": .., "batch_size": ..}."""
    phase_overrides = phase_overrides or {}
    phases = []
    for kind_ in PIPELINE_PHASES[kind]:
        ov = phase_overrides.get(kind_, {})
        opt = optimizer.replace(**ov.get("optimizer", {}))
        phases.append(
            PhaseSpec.build(
                kind_, opt, ov.get("epochs", epochs), ov.get("batch_size", batch_size), budget, pure_noise_sigma
            )
        )
    fractions = tuple(partition_fractions) if partition_fractions is not None else DEFAULT_FRACTIONS[kind]
    return PipelineSpec(kind, tuple(phases), fractions, seed, model, ppo, pure_noise_sigma)


# ---------------------------------------------------------------------------
# phases


@dataclass
class PhaseMetrics:
    loss_kind: str
    epochs: int
    batch_size: int
    steps: int = 0
    examples: int = 0
    epoch_losses: list[float] = field(default_factory=list)
    clip_rate: float = 0.0
    mean_grad_norm: float = 0.0
    noise_multiplier: float = 0.0
    noise_std: float = 0.0
    pure_noise: bool = False
    budget: dict = field(default_factory=dict)
    visits_min: int = 0
    visits_max: int = 0
    extra: dict = field(default_factory=dict)
    seconds: float = 0.0

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class PPOModels:
    policy: TinyPolicy
    value: ValueNet
    reward_model: RewardNet


def _loss_fn(kind: str, model, ppo: PPOSettings | None = None):
    if kind == "sft":
        return lambda p, b: losses.sft_loss(model, b, params=p, reduce=False)
    if kind == "dpo":
        return lambda p, b: losses.dpo_loss(model, b, params=p, reduce=False)
    if kind == "rm":
        return lambda p, b: losses.rm_loss(model, b, params=p, reduce=False)
    if kind == "ppo":
        return lambda p, b: losses.ppo_objective(
            model.policy, model.value, b, ppo.clip_eps, ppo.value_coef, params=p, reduce=False
        )
    raise ValueError(kind)


def _grads(loss_fn, params, batch, size: int, config: DPOptimizerConfig):
    if config.clipping_mode == "per_sample":
        per_example, g = tc.per_sample_gradients(loss_fn, params, batch, size)
        return float(np.mean(per_example)), g
    return tc.gradient(loss_fn, params, batch)


class _Trainer:
    """Runs DP steps for one phase and accumulates metrics."""

    def __init__(self, phase: PhaseSpec, params, rng: np.random.Generator):
        self.phase = phase
        self.params = params
        self.state = OptimizerState.zeros(params)
        self.rng = rng
        self.clip_hits = 0.0
        self.grad_norms = 0.0
        self.noise_std = 0.0
        self.steps = 0

    def step(self, loss_fn, batch, size: int) -> float:
        cfg = self.phase.optimizer
        loss, g = _grads(loss_fn, self.params, batch, size, cfg)
        if not np.isfinite(loss):
            raise PipelineError(f"non-finite loss at step {self.steps}")
        self.params, self.state, info = step_with_info(self.params, g, self.state, cfg, self.rng)
        self.clip_hits += info.clip_fraction
        self.grad_norms += info.grad_norm
        self.noise_std = info.noise_std
        self.steps += 1
        return loss


def _finish(metrics: PhaseMetrics, trainer: _Trainer, phase: PhaseSpec, visits: np.ndarray, start: float):
    metrics.steps = trainer.steps
    metrics.clip_rate = trainer.clip_hits / max(trainer.steps, 1)
    metrics.mean_grad_norm = trainer.grad_norms / max(trainer.steps, 1)
    metrics.noise_multiplier = phase.optimizer.noise_multiplier
    metrics.noise_std = trainer.noise_std
    metrics.pure_noise = phase.optimizer.pure_noise
    metrics.budget = phase.budget.to_json()
    metrics.visits_min = int(visits.min())
    metrics.visits_max = int(visits.max())
    metrics.seconds = time.perf_counter() - start
    if metrics.visits_min != phase.epochs or metrics.visits_max != phase.epochs:
        raise PipelineError(f"examples visited {metrics.visits_min}..{metrics.visits_max} times, expected {phase.epochs}")


def run_phase(model, dataset_part: Sequence[PreferenceTriple], phase: PhaseSpec, rng: np.random.Generator, ppo: PPOSettings | None = None):
    """Train ``model`` for ``phase.epochs`` shuffled passes over ``dataset_part``.

    ``model`` is a TinyPolicy for sft/dpo, a RewardNet for rm and a
    :class:`PPOModels` for ppo. Returns the updated model and metrics.
    """
    if len(dataset_part) == 0:
        raise PipelineError("empty dataset part")
    if phase.loss_kind in ("sft", "dpo") and not isinstance(model, TinyPolicy):
        raise PipelineError(f"{phase.loss_kind} phase needs a TinyPolicy")
    if phase.loss_kind == "rm" and not isinstance(model, RewardNet):
        raise PipelineError("rm phase needs a RewardNet")
    if phase.loss_kind == "ppo":
        if not isinstance(model, PPOModels):
            raise PipelineError("ppo phase needs PPOModels")
        return _run_ppo_phase(model, dataset_part, phase, rng, ppo or PPOSettings())

    start = time.perf_counter()
    n = len(dataset_part)
    metrics = PhaseMetrics(phase.loss_kind, phase.epochs, phase.batch_size, examples=n)
    batch_all = losses.collate(dataset_part, model.config.context_window)
    trainer = _Trainer(phase, model.params, rng)
    visits = np.zeros(n, dtype=np.int64)
    for _ in range(phase.epochs):
        perm = rng.permutation(n)
        total, count = 0.0, 0
        for lo in range(0, n, phase.batch_size):
            idx = perm[lo : lo + phase.batch_size]
            visits[idx] += 1
            batch = losses.PreferenceBatch(batch_all.chosen.take(idx), batch_all.rejected.take(idx))
            loss_fn = _loss_fn(phase.loss_kind, model.with_params(trainer.params))
            loss = trainer.step(loss_fn, batch, len(idx))
            total += loss * len(idx)
            count += len(idx)
        metrics.epoch_losses.append(total / count)
    _finish(metrics, trainer, phase, visits, start)
    return model.with_params(trainer.params), metrics


def collect_rollouts(
    models: PPOModels, prompts: np.ndarray, ppo: PPOSettings, rng: np.random.Generator
) -> tuple[losses.RolloutBatch, np.ndarray]:
    """Sample responses, score them with the frozen reward model, run GAE.

    The reward arrives on the last response token; every other step gets 0.
    """
    policy, value, rm = models.policy, models.value, models.reward_model
    responses = policy.sample(prompts, ppo.max_response_len, ppo.temperature, rng)
    resp_list = [trim_at_eos(r, policy.config.eos_token) for r in responses]
    seqs = encode([list(p) for p in prompts], resp_list, policy.config.context_window)
    scores = rm.scores(encode([list(p) for p in prompts], resp_list, rm.config.context_window)).data.copy()
    mask = seqs.target_mask
    old_lp = policy.token_logprobs(seqs).data * mask
    T1 = mask.shape[1]
    last = T1 - 1 - np.argmax(mask[:, ::-1], axis=1)
    rewards = np.zeros_like(mask)
    rewards[np.arange(len(prompts)), last] = scores
    v = value.values(seqs.tokens).data[:, :T1] * mask
    values_ext = np.concatenate([v, np.zeros((len(prompts), 1))], axis=1)
    adv, ret = losses.gae_batch(rewards, values_ext, mask, ppo.gamma, ppo.gae_lambda)
    return losses.RolloutBatch(seqs, old_lp, adv, ret, mask), scores


def _run_ppo_phase(models: PPOModels, part, phase: PhaseSpec, rng, ppo: PPOSettings):
    start = time.perf_counter()
    n = len(part)
    metrics = PhaseMetrics(phase.loss_kind, phase.epochs, phase.batch_size, examples=n)
    prompts_all = [t.prompt for t in part]
    if len({len(p) for p in prompts_all}) != 1:
        raise PipelineError("ppo phase expects equal-length prompts")
    prompts_all = np.asarray(prompts_all, dtype=np.int64)
    params = models.policy.params.merged(models.value.params, prefix="value.")
    trainer = _Trainer(phase, params, rng)
    visits = np.zeros(n, dtype=np.int64)
    rollout_rewards = []
    policy, value = models.policy, models.value
    for _ in range(phase.epochs):
        perm = rng.permutation(n)
        total, count = 0.0, 0
        for lo in range(0, n, ppo.rollout_batch):
            chunk = perm[lo : lo + ppo.rollout_batch]
            current = PPOModels(policy, value, models.reward_model)
            rollouts, scores = collect_rollouts(current, prompts_all[chunk], ppo, rng)
            rollout_rewards.append(float(np.mean(scores)))
            order = rng.permutation(len(chunk))
            for mlo in range(0, len(chunk), phase.batch_size):
                sub = order[mlo : mlo + phase.batch_size]
                visits[chunk[sub]] += 1
                loss_fn = _loss_fn("ppo", PPOModels(policy, value, models.reward_model), ppo)
                loss = trainer.step(loss_fn, rollouts.take(sub), len(sub))
                policy = policy.with_params({k: v for k, v in trainer.params.items() if not k.startswith("value.")})
                value = value.with_params(trainer.params.select("value."))
                total += loss * len(sub)
                count += len(sub)
        metrics.epoch_losses.append(total / count)
    metrics.extra["mean_rollout_reward_first"] = rollout_rewards[0]
    metrics.extra["mean_rollout_reward_last"] = rollout_rewards[-1]
    _finish(metrics, trainer, phase, visits, start)
    return PPOModels(policy, value, models.reward_model), metrics


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class PipelineResult:
    policy: TinyPolicy
    report: dict
    initial_policy: TinyPolicy
    sft_policy: TinyPolicy
    reward_model: RewardNet | None = None
    partition: object = None


def _seeds(seed: int, count: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def run_pipeline(spec: PipelineSpec, dataset: AlignmentDataset) -> PipelineResult:
    """Partition, then run every phase in order on its own slice."""
    start = time.perf_counter()
    partition = partition_disjoint(dataset, spec.partition_fractions, seed=spec.seed)
    partition.verify()
    init_rng, rm_rng, value_rng, *phase_rngs = _seeds(spec.seed, 3 + len(spec.phases))

    model_cfg = dataclasses.replace(spec.model, vocab_size=max(spec.model.vocab_size, dataset.vocab_size))
    policy = TinyPolicy.init(model_cfg, init_rng)
    initial = policy
    sft_policy = policy
    reward_model = None
    phase_reports = []
    for phase, part_idx, rng in zip(spec.phases, partition.parts, phase_rngs):
        part = dataset.subset(part_idx)
        log.info("phase %s: %d examples, sigma=%.4g", phase.loss_kind, len(part), phase.optimizer.noise_multiplier)
        if phase.loss_kind in ("sft", "dpo"):
            policy, metrics = run_phase(policy, part, phase, rng)
            if phase.loss_kind == "sft":
                sft_policy = policy
        elif phase.loss_kind == "rm":
            reward_model, metrics = run_phase(RewardNet.init(model_cfg, rm_rng), part, phase, rng)
        else:
            if reward_model is None:
                raise PipelineError("ppo phase requires a preceding rm phase")
            models = PPOModels(policy, ValueNet.init(model_cfg, value_rng), reward_model)
            models, metrics = run_phase(models, part, phase, rng, ppo=spec.ppo)
            policy = models.policy
        phase_reports.append(metrics.to_json())

    budget = phase_budget_report([p.budget for p in spec.phases], partitions_disjoint=True)
    report = {
        "pipeline": spec.kind,
        "seed": spec.seed,
        "n_examples": len(dataset),
        "partition_sizes": partition.sizes(),
        "partition_disjoint": True,
        "pure_noise": any(p.optimizer.pure_noise for p in spec.phases),
        "phases": phase_reports,
        "budget_report": budget.to_json(),
        "seconds": time.perf_counter() - start,
    }
    return PipelineResult(policy, report, initial, sft_policy, reward_model, partition)


def budget_report_for(spec: PipelineSpec) -> BudgetReport:
    return phase_budget_report([p.budget for p in spec.phases], partitions_disjoint=True)
