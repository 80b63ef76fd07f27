import math

import numpy as np
import pytest
from scipy import stats

from dpalign.models import (
    ContextOverflow,
    ModelConfig,
    RewardNet,
    TinyPolicy,
    ValueNet,
    load_checkpoint,
    model_meta,
    reward_score,
    sample_response,
    save_checkpoint,
    sequence_logprob,
)


def _hidden(params, tokens, cfg):
    # per-position loop, no shared code with the model
    acc = params["h0.b"][0].copy()
    hs = []
    for j, tok in enumerate(tokens):
        acc = acc + params["tok_emb"][tok] @ params["pos_proj"][j]
        h = np.tanh(acc)
        if cfg.n_hidden_layers == 2:
            h = np.tanh(h @ params["h1.w"] + params["h1.b"][0])
        hs.append(h)
    return hs


def _oracle_logprob(policy, x, y):
    p = policy.params
    seq = list(x) + list(y)
    hs = _hidden(p, seq, policy.config)
    total = 0.0
    for i, tok in enumerate(y):
        logits = hs[len(x) + i - 1] @ p["out.w"] + p["out.b"][0]
        logits = logits - logits.max()
        total += logits[tok] - math.log(np.exp(logits).sum())
    return total


def _randomized(policy, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    return policy.with_params({k: v + scale * rng.normal(size=v.shape) for k, v in policy.params.items()})


def test_parameter_count_in_range():
    p = TinyPolicy.init(ModelConfig(), 0)
    assert 10**3 <= sum(v.size for v in p.params.values()) <= 10**5


@pytest.mark.parametrize("layers", [1, 2])
def test_distributions_sum_to_one(layers):
    cfg = ModelConfig(vocab_size=16, context_window=12, n_hidden_layers=layers)
    pol = _randomized(TinyPolicy.init(cfg, 1), 2, 2.0)
    tokens = np.random.default_rng(3).integers(0, 16, size=(20, 12))
    probs = np.exp(pol.log_probs(tokens).data)
    assert np.abs(probs.sum(axis=-1) - 1).max() < 1e-9


def test_empty_response_logprob_is_zero():
    assert sequence_logprob(TinyPolicy.init(ModelConfig(), 0), [1, 2, 3], []) == 0.0


def test_uniform_policy_logprob():
    pol = TinyPolicy.uniform(ModelConfig(vocab_size=16))
    assert sequence_logprob(pol, [1, 2], [3, 4, 5]) == pytest.approx(-3 * math.log(16), abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("layers", [1, 2])
def test_logprob_matches_stepwise_oracle(seed, layers):
    cfg = ModelConfig(vocab_size=16, context_window=10, n_hidden_layers=layers)
    pol = _randomized(TinyPolicy.init(cfg, seed), seed + 100)
    rng = np.random.default_rng(seed)
    x, y = rng.integers(0, 16, 3).tolist(), rng.integers(0, 16, 5).tolist()
    got = sequence_logprob(pol, x, y)
    assert got <= 0
    assert abs(got - _oracle_logprob(pol, x, y)) < 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_logprob_additivity(seed):
    pol = _randomized(TinyPolicy.init(ModelConfig(), seed), seed)
    rng = np.random.default_rng(seed)
    x, y1, y2 = (rng.integers(0, 16, n).tolist() for n in (3, 2, 4))
    whole = sequence_logprob(pol, x, y1 + y2)
    assert abs(whole - sequence_logprob(pol, x, y1) - sequence_logprob(pol, x + y1, y2)) < 1e-10


def test_context_overflow():
    pol = TinyPolicy.init(ModelConfig(context_window=4), 0)
    with pytest.raises(ContextOverflow):
        sequence_logprob(pol, [1, 2, 3], [1, 2])
    with pytest.raises(ContextOverflow):
        sample_response(pol, [1, 2, 3], 2, 1.0, np.random.default_rng(0))


def test_sampling_deterministic_given_seed():
    pol = TinyPolicy.init(ModelConfig(), 0)
    a = sample_response(pol, [1, 2, 3], 8, 1.0, np.random.default_rng(42))
    b = sample_response(pol, [1, 2, 3], 8, 1.0, np.random.default_rng(42))
    assert a == b and len(a) == 8


def test_low_temperature_is_greedy():
    pol = _randomized(TinyPolicy.init(ModelConfig(), 0), 1, 1.0)
    x = [4, 5, 6]
    got = sample_response(pol, x, 6, 1e-4, np.random.default_rng(0))
    seq = list(x)
    for _ in range(6):
        seq.append(int(np.argmax(pol.next_token_probs(np.asarray([seq]))[0])))
    assert got == seq[3:]


def test_stops_at_end_token():
    cfg = ModelConfig(eos_token=0)
    pol = TinyPolicy.uniform(cfg)
    pol = pol.with_params({**pol.params, "out.b": np.eye(16)[:1] * 50.0})
    assert sample_response(pol, [1, 2], 8, 1.0, np.random.default_rng(0)) == [0]


def test_temperature_must_be_positive():
    with pytest.raises(ValueError):
        sample_response(TinyPolicy.init(ModelConfig(), 0), [1], 2, 0.0, np.random.default_rng(0))


def test_sample_frequencies_chi_square():
    pol = _randomized(TinyPolicy.init(ModelConfig(), 3), 4, 1.0)
    x = np.asarray([[2, 7, 9]])
    probs = pol.next_token_probs(x)[0]
    draws = pol.sample(np.repeat(x, 100_000, axis=0), 1, 1.0, np.random.default_rng(9))[:, 0]
    counts = np.bincount(draws, minlength=16)
    assert stats.chisquare(counts, probs * counts.sum()).pvalue > 0.001


def test_zero_head_reward_is_zero():
    rm = RewardNet.init(ModelConfig(), 5)
    rng = np.random.default_rng(0)
    for _ in range(10):
        assert reward_score(rm, rng.integers(0, 16, 3).tolist(), rng.integers(0, 16, 4).tolist()) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_reward_matches_manual_forward(seed):
    cfg = ModelConfig()
    rm = RewardNet.init(cfg, seed, zero_head=False)
    rng = np.random.default_rng(seed)
    x, y = rng.integers(0, 16, 3).tolist(), rng.integers(0, 16, 5).tolist()
    p = rm.params
    hs = _hidden(p, x + y, cfg)
    pooled = np.mean(hs[len(x) :], axis=0)
    expected = float(pooled @ p["head.w"][:, 0] + p["head.b"][0, 0])
    got = reward_score(rm, x, y)
    assert np.isfinite(got) and abs(got - expected) < 1e-10


def test_value_net_shape_and_zero_init():
    v = ValueNet.init(ModelConfig(), 0)
    out = v.values(np.zeros((3, 5), dtype=np.int64)).data
    assert out.shape == (3, 5) and not out.any()


def test_checkpoint_round_trip_and_byte_stability(tmp_path):
    pol = TinyPolicy.init(ModelConfig(), 7)
    meta = model_meta("policy", pol.config, seed=7)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, pol.params, meta)
    save_checkpoint(b, TinyPolicy.init(ModelConfig(), 7).params, meta)
    assert a.read_bytes() == b.read_bytes()
    params, loaded_meta = load_checkpoint(a)
    assert params.equal(pol.params) and loaded_meta == meta


def test_checkpoint_rejects_foreign_file(tmp_path):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"not a checkpoint\n")
    with pytest.raises(ValueError):
        load_checkpoint(bad)
