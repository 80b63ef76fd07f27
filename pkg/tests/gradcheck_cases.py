"""Finite-difference gradient checks for every alignment loss on tiny random models."""

import numpy as np

from dpalign import tensor_core as tc
from dpalign.alignment_pipeline import PPOModels, PPOSettings, collect_rollouts
from dpalign.data_pipeline import PreferenceTriple
from dpalign.losses import dpo_loss, ppo_loss, ppo_objective, rm_loss, sft_loss
from dpalign.models import ModelConfig, RewardNet, TinyPolicy, ValueNet

from conftest import central_diff, rel_err

CFG = ModelConfig(vocab_size=5, context_window=6, embed_dim=3, hidden_dim=4)
LOSSES = ("sft", "rm", "dpo", "ppo", "ppo_gae_objective")


def _jitter(model, rng, scale=0.5):
    return model.with_params({k: v + scale * rng.normal(size=v.shape) for k, v in model.params.items()})


def _triples(rng, n=3):
    return [
        PreferenceTriple(rng.integers(0, 5, 2), rng.integers(0, 5, int(rng.integers(1, 4))), rng.integers(0, 5, 3))
        for _ in range(n)
    ]


def build_case(name: str, seed: int):
    """(loss of a parameter mapping, starting parameters) for one loss and seed."""
    rng = np.random.default_rng(seed)
    policy = _jitter(TinyPolicy.init(CFG, rng), rng)
    if name in ("sft", "dpo"):
        batch = _triples(rng)
        fn = sft_loss if name == "sft" else dpo_loss
        return (lambda p: fn(policy, batch, params=p)), dict(policy.params)
    if name == "rm":
        rm = _jitter(RewardNet.init(CFG, rng, zero_head=False), rng)
        batch = _triples(rng)
        return (lambda p: rm_loss(rm, batch, params=p)), dict(rm.params)
    value = _jitter(ValueNet.init(CFG, rng), rng)
    rm = _jitter(RewardNet.init(CFG, rng, zero_head=False), rng)
    ppo = PPOSettings(max_response_len=3)
    rollouts, _ = collect_rollouts(PPOModels(policy, value, rm), rng.integers(0, 5, (4, 2)), ppo, rng)
    # move away from the sampling policy so ratios differ from 1
    moved = _jitter(policy, rng, 0.05)
    if name == "ppo":
        return (lambda p: ppo_loss(moved, rollouts, 0.2, params=p)), dict(moved.params)
    joint = moved.params.merged(value.params, prefix="value.")
    return (lambda p: ppo_objective(moved, value, rollouts, 0.2, 0.5, params=p)), dict(joint)


def gradcheck(name: str, seed: int) -> float:
    """Relative error between the tape gradient and central differences (step 1e-5)."""
    loss_of, params = build_case(name, seed)
    _, grads = tc.gradient(lambda p, _b: loss_of(p), params)
    numeric = central_diff(lambda p: float(tc.as_tensor(loss_of(p)).data), params, h=1e-5)
    keys = sorted(params)
    return rel_err([grads[k] for k in keys], [numeric[k] for k in keys])
