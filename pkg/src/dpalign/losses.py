"""SFT, reward-model, DPO and PPO objectives plus GAE.

Each loss takes the model, a batch, and optionally a mapping of parameter
Tensors (so ``tensor_core.gradient`` can differentiate through it). With
``reduce=False`` the per-example vector is returned instead of the mean.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .data_pipeline import PreferenceTriple
from .models import RewardNet, SequenceBatch, TinyPolicy, ValueNet, encode
from .tensor_core import Tensor


@dataclass(frozen=True)
class PreferenceBatch:
    chosen: SequenceBatch
    rejected: SequenceBatch

    @property
    def size(self) -> int:
        return self.chosen.size


def collate(triples: Sequence[PreferenceTriple] | PreferenceBatch, context_window: int) -> PreferenceBatch:
    if isinstance(triples, PreferenceBatch):
        return triples
    if not triples:
        raise ValueError("empty batch")
    prompts = [t.prompt for t in triples]
    return PreferenceBatch(
        encode(prompts, [t.chosen for t in triples], context_window),
        encode(prompts, [t.rejected for t in triples], context_window),
    )


def _reduce(per_example: Tensor, reduce: bool) -> Tensor:
    return tc.mean(per_example) if reduce else per_example


def sft_loss(policy: TinyPolicy, batch, params: Mapping | None = None, reduce: bool = True) -> Tensor:
    """Negative log-likelihood of the preferred response given the prompt."""
    batch = collate(batch, policy.config.context_window)
    return _reduce(-policy.sequence_logprobs(batch.chosen, params), reduce)


def rm_loss(rm: RewardNet, batch, params: Mapping | None = None, reduce: bool = True) -> Tensor:
    """Bradley-Terry loss -log sigmoid(R(x, y+) - R(x, y-)) as softplus(-margin)."""
    batch = collate(batch, rm.config.context_window)
    margin = rm.scores(batch.chosen, params) - rm.scores(batch.rejected, params)
    return _reduce(tc.softplus(-margin), reduce)


def dpo_loss(policy: TinyPolicy, batch, params: Mapping | None = None, reduce: bool = True) -> Tensor:
    """-log pi(y+|x) / (pi(y+|x) + pi(y-|x)), i.e. logsumexp(0, l- - l+).

    No reference policy and no temperature.
    """
    batch = collate(batch, policy.config.context_window)
    lp_pos = policy.sequence_logprobs(batch.chosen, params)
    lp_neg = policy.sequence_logprobs(batch.rejected, params)
    return _reduce(tc.softplus(lp_neg - lp_pos), reduce)


def dpo_from_logprobs(lp_pos, lp_neg) -> Tensor:
    return tc.softplus(tc.as_tensor(lp_neg) - tc.as_tensor(lp_pos))


def rm_from_rewards(r_pos, r_neg) -> Tensor:
    return tc.softplus(tc.as_tensor(r_neg) - tc.as_tensor(r_pos))


# ---------------------------------------------------------------------------
# GAE


@dataclass(frozen=True)
class Trajectory:
    rewards: np.ndarray
    values: np.ndarray  # length len(rewards) + 1, last entry is the bootstrap value
    states: tuple = ()
    actions: tuple = ()
    old_logprobs: np.ndarray | None = None

    def __post_init__(self):
        r = np.asarray(self.rewards, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "rewards", r)
        object.__setattr__(self, "values", v)
        if v.shape != (r.shape[0] + 1,):
            raise ValueError(f"values must have length {r.shape[0] + 1}, got {v.shape[0]}")
        if self.actions and len(self.actions) != r.shape[0]:
            raise ValueError("actions and rewards differ in length")
        if self.old_logprobs is not None:
            lp = np.asarray(self.old_logprobs, dtype=np.float64)
            if lp.shape != r.shape:
                raise ValueError("old_logprobs and rewards differ in length")
            if np.any(lp > 0):
                raise ValueError("old_logprobs must be <= 0")


@dataclass(frozen=True)
class AdvantageEstimate:
    advantages: np.ndarray
    returns: np.ndarray


def gae(trajectory: Trajectory, gamma: float, lam: float) -> AdvantageEstimate:
    """Backward recursion A_t = delta_t + gamma lam A_{t+1}; returns_t = A_t + V(s_t)."""
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError("gamma and lambda must lie in [0, 1]")
    r, v = trajectory.rewards, trajectory.values
    adv = np.zeros_like(r)
    running = 0.0
    for t in range(len(r) - 1, -1, -1):
        delta = r[t] + gamma * v[t + 1] - v[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return AdvantageEstimate(adv, adv + v[:-1])


def gae_batch(rewards: np.ndarray, values: np.ndarray, mask: np.ndarray, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """GAE over (B, T) steps with a validity mask; values are (B, T + 1).

    Masked steps contribute nothing and cut the recursion.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (rewards.shape[0], rewards.shape[1] + 1) or mask.shape != rewards.shape:
        raise ValueError("gae_batch: shape mismatch")
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[0])
    for t in range(rewards.shape[1] - 1, -1, -1):
        delta = rewards[:, t] + gamma * values[:, t + 1] - values[:, t]
        running = (delta + gamma * lam * running) * mask[:, t]
        adv[:, t] = running
    return adv, (adv + values[:, :-1]) * mask


# ---------------------------------------------------------------------------
# PPO


@dataclass(frozen=True)
class RolloutBatch:
    """Sampled sequences plus everything PPO needs, aligned with next-token targets.

    ``old_logprobs``, ``advantages``, ``returns`` and ``action_mask`` are
    (B, T-1): entry t refers to the action at token position t + 1.
    """

    sequences: SequenceBatch
    old_logprobs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    action_mask: np.ndarray

    @property
    def size(self) -> int:
        return self.sequences.size

    def take(self, idx) -> "RolloutBatch":
        return RolloutBatch(
            self.sequences.take(idx), self.old_logprobs[idx], self.advantages[idx], self.returns[idx], self.action_mask[idx]
        )


def clipped_surrogate(new_logprobs, old_logprobs, advantages, clip_eps: float) -> Tensor:
    """min(r A, clip(r, 1 - eps, 1 + eps) A) with r = exp(new - old), elementwise."""
    if not 0.0 < clip_eps < 1.0:
        raise ValueError("clip_eps must lie in (0, 1)")
    ratio = tc.exp(tc.as_tensor(new_logprobs) - np.asarray(old_logprobs, dtype=np.float64))
    adv = np.asarray(advantages, dtype=np.float64)
    return tc.minimum(ratio * adv, tc.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)


def _masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    counts = np.maximum(mask.sum(axis=-1), 1.0)
    return tc.sum(x * mask, axis=-1) / counts


def ppo_loss(
    policy: TinyPolicy,
    rollouts: RolloutBatch,
    clip_eps: float,
    params: Mapping | None = None,
    reduce: bool = True,
) -> Tensor:
    """Negated clipped surrogate averaged over each trajectory's actions."""
    new_lp = policy.token_logprobs(rollouts.sequences, params)
    surr = clipped_surrogate(new_lp, rollouts.old_logprobs, rollouts.advantages, clip_eps)
    return _reduce(-_masked_mean(surr, rollouts.action_mask), reduce)


def value_loss(value_net: ValueNet, rollouts: RolloutBatch, params: Mapping | None = None, reduce: bool = True) -> Tensor:
    """Squared error between V(s_t) and the GAE returns, per trajectory."""
    T = rollouts.sequences.tokens.shape[1]
    v = value_net.values(rollouts.sequences.tokens, params)
    v = tc.index_select(v, (Ellipsis, slice(0, T - 1)))
    return _reduce(_masked_mean(tc.square(v - rollouts.returns), rollouts.action_mask), reduce)


def ppo_objective(
    policy: TinyPolicy,
    value_net: ValueNet,
    rollouts: RolloutBatch,
    clip_eps: float,
    value_coef: float = 0.5,
    params: Mapping | None = None,
    reduce: bool = True,
) -> Tensor:
    """PPO policy loss + value_coef * value loss over a joint parameter map.

    Value parameters are looked up under the ``value.`` prefix.
    """
    policy_params = value_params = None
    if params is not None:
        policy_params = {k: v for k, v in params.items() if not k.startswith("value.")}
        value_params = {k[len("value."):]: v for k, v in params.items() if k.startswith("value.")}
    pl = ppo_loss(policy, rollouts, clip_eps, policy_params, reduce=False)
    vl = value_loss(value_net, rollouts, value_params, reduce=False)
    return _reduce(pl + value_coef * vl, reduce)
