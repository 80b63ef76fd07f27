"""Tiny autoregressive policy, reward net and value net.

All three share one body. Token ``j`` contributes ``E[tok_j] @ U_j`` (a
per-position projection), contributions are summed over the causal prefix and
passed through tanh. Because each position has its own projection the body
knows *where* a token sits, which a plain mean of embeddings does not.

Parameters may carry a leading per-example axis (see
``tensor_core.per_sample_gradients``); every index below uses ellipses so the
same code serves both layouts.
"""

from __future__ import annotations

import json
import struct
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .tensor_core import ParamSet, Tensor

CHECKPOINT_MAGIC = b"dpalign-checkpoint"
CHECKPOINT_VERSION = 1


class ContextOverflow(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 16
    context_window: int = 16
    embed_dim: int = 8
    hidden_dim: int = 32
    n_hidden_layers: int = 1
    eos_token: int | None = None

    def __post_init__(self):
        if not 2 <= self.vocab_size <= 64:
            raise ValueError("vocab_size must lie in [2, 64]")
        if not 2 <= self.context_window <= 32:
            raise ValueError("context_window must lie in [2, 32]")
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise ValueError("embed_dim and hidden_dim must be positive")
        if self.n_hidden_layers not in (1, 2):
            raise ValueError("n_hidden_layers must be 1 or 2")
        if self.eos_token is not None and not 0 <= self.eos_token < self.vocab_size:
            raise ValueError("eos_token outside the vocabulary")


# ---------------------------------------------------------------------------
# token batches


@dataclass(frozen=True)
class SequenceBatch:
    """Right-padded ``prompt || response`` token rows.

    ``prompt_mask`` / ``response_mask`` flag which positions hold prompt and
    response tokens; padding is neither.
    """

    tokens: np.ndarray
    prompt_mask: np.ndarray
    response_mask: np.ndarray

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def target_mask(self) -> np.ndarray:
        """Mask over next-token targets (positions 1..T-1) that are response tokens."""
        return self.response_mask[:, 1:]

    def take(self, idx) -> "SequenceBatch":
        return SequenceBatch(self.tokens[idx], self.prompt_mask[idx], self.response_mask[idx])


def encode(
    prompts: Sequence[Sequence[int]], responses: Sequence[Sequence[int]], context_window: int
) -> SequenceBatch:
    if len(prompts) != len(responses):
        raise ValueError("prompts and responses differ in length")
    lengths = [len(x) + len(y) for x, y in zip(prompts, responses)]
    if any(n > context_window for n in lengths):
        raise ContextOverflow(f"sequence length {max(lengths)} exceeds context window {context_window}")
    T = max(max(lengths, default=1), 2)
    B = len(prompts)
    tokens = np.zeros((B, T), dtype=np.int64)
    pmask = np.zeros((B, T))
    rmask = np.zeros((B, T))
    for i, (x, y) in enumerate(zip(prompts, responses)):
        if len(x) == 0:
            raise ValueError("prompt must be nonempty")
        tokens[i, : len(x)] = x
        tokens[i, len(x) : len(x) + len(y)] = y
        pmask[i, : len(x)] = 1.0
        rmask[i, len(x) : len(x) + len(y)] = 1.0
    return SequenceBatch(tokens, pmask, rmask)


# ---------------------------------------------------------------------------
# shared body


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_body(config: ModelConfig, rng: np.random.Generator, prefix: str = "") -> dict[str, np.ndarray]:
    V, W, d, H = config.vocab_size, config.context_window, config.embed_dim, config.hidden_dim
    p = {
        prefix + "tok_emb": _uniform(rng, (V, d), V),
        prefix + "pos_proj": _uniform(rng, (W, d, H), d),
        prefix + "h0.b": np.zeros((1, H)),
    }
    if config.n_hidden_layers == 2:
        p[prefix + "h1.w"] = _uniform(rng, (H, H), H)
        p[prefix + "h1.b"] = np.zeros((1, H))
    return p


def _causal_sum(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T)))


def body_forward(params: Mapping, tokens: np.ndarray, n_layers: int, prefix: str = "") -> Tensor:
    """Hidden features (B, T, H); position t sees tokens 0..t."""
    B, T = tokens.shape
    e = tc.embed(params[prefix + "tok_emb"], tokens)  # (B, T, d)
    e = tc.reshape(e, e.shape[:-1] + (1, e.shape[-1]))  # (B, T, 1, d)
    proj = tc.index_select(params[prefix + "pos_proj"], (Ellipsis, slice(0, T), slice(None), slice(None)))
    contrib = tc.matmul(e, proj)  # (B, T, 1, H)
    contrib = tc.reshape(contrib, (B, T, contrib.shape[-1]))
    pre = tc.matmul(_causal_sum(T), contrib) + params[prefix + "h0.b"]
    h = tc.tanh(pre)
    if n_layers == 2:
        h = tc.tanh(tc.matmul(h, params[prefix + "h1.w"]) + params[prefix + "h1.b"])
    return h


def _param_view(params: Mapping | None, default: ParamSet) -> Mapping:
    return default if params is None else params


# ---------------------------------------------------------------------------
# policy


@dataclass(frozen=True)
class TinyPolicy:
    config: ModelConfig
    params: ParamSet

    @classmethod
    def init(cls, config: ModelConfig, seed: int | np.random.Generator = 0) -> "TinyPolicy":
        rng = np.random.default_rng(seed)
        p = init_body(config, rng)
        H, V = config.hidden_dim, config.vocab_size
        p["out.w"] = _uniform(rng, (H, V), H)
        p["out.b"] = np.zeros((1, V))
        return cls(config, ParamSet(p))

    @classmethod
    def uniform(cls, config: ModelConfig) -> "TinyPolicy":
        """All-zero parameters: every next-token distribution is uniform."""
        proto = cls.init(config, 0)
        return cls(config, proto.params.map(np.zeros_like))

    def with_params(self, params: Mapping[str, np.ndarray]) -> "TinyPolicy":
        return TinyPolicy(self.config, ParamSet(params))

    def log_probs(self, tokens: np.ndarray, params: Mapping | None = None) -> Tensor:
        """Next-token log-distributions (B, T, V) at every position."""
        p = _param_view(params, self.params)
        h = body_forward(p, tokens, self.config.n_hidden_layers)
        logits = tc.matmul(h, p["out.w"]) + p["out.b"]
        return tc.log_softmax(logits, axis=-1)

    def token_logprobs(self, batch: SequenceBatch, params: Mapping | None = None) -> Tensor:
        """log p(token_t | tokens_<t) for t = 1..T-1, shape (B, T-1), unmasked."""
        logp = self.log_probs(batch.tokens, params)
        T = batch.tokens.shape[1]
        logp = tc.index_select(logp, (Ellipsis, slice(0, T - 1), slice(None)))
        return tc.gather(logp, batch.tokens[:, 1:])

    def sequence_logprobs(self, batch: SequenceBatch, params: Mapping | None = None) -> Tensor:
        """Sum of response-token log-probs per row, shape (B,)."""
        lp = self.token_logprobs(batch, params)
        return tc.sum(lp * batch.target_mask, axis=-1)

    def sequence_logprob(self, x: Sequence[int], y: Sequence[int]) -> float:
        if len(x) + len(y) > self.config.context_window:
            raise ContextOverflow(
                f"len(x) + len(y) = {len(x) + len(y)} exceeds context window {self.config.context_window}"
            )
        if len(y) == 0:
            return 0.0
        return float(self.sequence_logprobs(encode([x], [y], self.config.context_window)).data[0])

    def next_token_probs(self, prefixes: np.ndarray, temperature: float = 1.0) -> np.ndarray:
        """Sampling distribution at the last position of each (equal-length) prefix."""
        p = self.params
        h = body_forward(p, prefixes, self.config.n_hidden_layers).data[:, -1, :]
        logits = (h @ p["out.w"] + p["out.b"][0]) / temperature
        logits = logits - logits.max(axis=-1, keepdims=True)
        probs = np.exp(logits)
        return probs / probs.sum(axis=-1, keepdims=True)

    def sample(
        self, prompts: np.ndarray, max_len: int, temperature: float, rng: np.random.Generator
    ) -> np.ndarray:
        """Autoregressive sampling for a (B, Lp) block of equal-length prompts.

        Returns (B, max_len) tokens; after an end token a row is padded with
        the end token (callers trim with :func:`trim_at_eos`).
        """
        if not temperature > 0:
            raise ValueError("temperature must be positive")
        prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
        if prompts.shape[1] + max_len > self.config.context_window:
            raise ContextOverflow("prompt + max_len exceeds the context window")
        B = prompts.shape[0]
        seq = prompts
        done = np.zeros(B, dtype=bool)
        eos = self.config.eos_token
        for _ in range(max_len):
            probs = self.next_token_probs(seq, temperature)
            u = rng.random(B)
            cdf = np.cumsum(probs, axis=-1)
            nxt = np.minimum((cdf < u[:, None]).sum(axis=-1), probs.shape[-1] - 1)
            if eos is not None:
                nxt = np.where(done, eos, nxt)
                done |= nxt == eos
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
            if eos is not None and done.all():
                pad = np.full((B, max_len - (seq.shape[1] - prompts.shape[1])), eos)
                seq = np.concatenate([seq, pad], axis=1)
                break
        return seq[:, prompts.shape[1] :]


def trim_at_eos(response: Sequence[int], eos: int | None) -> list[int]:
    out = []
    for tok in response:
        out.append(int(tok))
        if eos is not None and tok == eos:
            break
    return out


def sample_response(
    policy: TinyPolicy, x: Sequence[int], max_len: int, temperature: float, rng: np.random.Generator
) -> list[int]:
    """One autoregressive sample; stops at the end token or ``max_len``."""
    out = policy.sample(np.asarray([x]), max_len, temperature, rng)[0]
    return trim_at_eos(out, policy.config.eos_token)


def sequence_logprob(policy: TinyPolicy, x: Sequence[int], y: Sequence[int]) -> float:
    return policy.sequence_logprob(x, y)


# ---------------------------------------------------------------------------
# reward and value nets


@dataclass(frozen=True)
class RewardNet:
    """Scores (x, y): body features averaged over response positions, then a linear head."""

    config: ModelConfig
    params: ParamSet

    @classmethod
    def init(cls, config: ModelConfig, seed: int | np.random.Generator = 0, zero_head: bool = True) -> "RewardNet":
        rng = np.random.default_rng(seed)
        p = init_body(config, rng)
        H = config.hidden_dim
        p["head.w"] = np.zeros((H, 1)) if zero_head else _uniform(rng, (H, 1), H)
        p["head.b"] = np.zeros((1, 1))
        return cls(config, ParamSet(p))

    def with_params(self, params: Mapping[str, np.ndarray]) -> "RewardNet":
        return RewardNet(self.config, ParamSet(params))

    def scores(self, batch: SequenceBatch, params: Mapping | None = None) -> Tensor:
        p = _param_view(params, self.params)
        h = body_forward(p, batch.tokens, self.config.n_hidden_layers)  # (B, T, H)
        counts = np.maximum(batch.response_mask.sum(axis=1, keepdims=True), 1.0)
        weights = (batch.response_mask / counts)[:, None, :]  # (B, 1, T)
        pooled = tc.matmul(weights, h)  # (B, 1, H)
        out = tc.matmul(pooled, p["head.w"]) + p["head.b"]  # (B, 1, 1)
        return tc.reshape(out, (batch.size,))

    def score(self, x: Sequence[int], y: Sequence[int]) -> float:
        return float(self.scores(encode([x], [y], self.config.context_window)).data[0])

    def score_batch(self, prompts: np.ndarray, responses: np.ndarray) -> np.ndarray:
        return self.scores(encode(list(prompts), list(responses), self.config.context_window)).data.copy()


def reward_score(rm: RewardNet, x: Sequence[int], y: Sequence[int]) -> float:
    return rm.score(x, y)


@dataclass(frozen=True)
class ValueNet:
    """Per-position state values; position t values the state after tokens 0..t."""

    config: ModelConfig
    params: ParamSet

    @classmethod
    def init(cls, config: ModelConfig, seed: int | np.random.Generator = 0) -> "ValueNet":
        rng = np.random.default_rng(seed)
        p = init_body(config, rng)
        p["head.w"] = np.zeros((config.hidden_dim, 1))
        p["head.b"] = np.zeros((1, 1))
        return cls(config, ParamSet(p))

    def with_params(self, params: Mapping[str, np.ndarray]) -> "ValueNet":
        return ValueNet(self.config, ParamSet(params))

    def values(self, tokens: np.ndarray, params: Mapping | None = None) -> Tensor:
        p = _param_view(params, self.params)
        h = body_forward(p, tokens, self.config.n_hidden_layers)
        out = tc.matmul(h, p["head.w"]) + p["head.b"]  # (B, T, 1)
        return tc.reshape(out, tokens.shape)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float64 tensors behind a versioned header.

    Layout: magic + version line, one JSON metadata line (sorted keys), then
    per tensor ``name<TAB>d0,d1,...`` followed by raw little-endian float64.
    Identical parameters give identical bytes.
    """
    chunks = [CHECKPOINT_MAGIC + b" " + str(CHECKPOINT_VERSION).encode() + b"\n"]
    chunks.append(json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode() + b"\n")
    chunks.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        header = f"{name}\t{','.join(str(d) for d in arr.shape)}\n".encode()
        chunks.append(header)
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[ParamSet, dict]:
    raw = Path(path).read_bytes()
    line_end = raw.index(b"\n")
    magic, _, version = raw[:line_end].partition(b" ")
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a dpalign checkpoint")
    if int(version) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {int(version)}")
    pos = line_end + 1
    meta_end = raw.index(b"\n", pos)
    meta = json.loads(raw[pos:meta_end])
    pos = meta_end + 1
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    params = {}
    for _ in range(count):
        end = raw.index(b"\n", pos)
        name, dims = raw[pos:end].decode().split("\t")
        shape = tuple(int(d) for d in dims.split(",")) if dims else ()
        pos = end + 1
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(raw[pos : pos + nbytes], dtype="<f8").reshape(shape).copy()
        pos += nbytes
    return ParamSet(params), meta


def model_meta(kind: str, config: ModelConfig, **extra) -> dict:
    return {"kind": kind, "model_config": asdict(config), **extra}
