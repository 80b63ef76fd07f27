"""Synthetic preference data, JSONL persistence and disjoint phase splits."""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_NAME = "dpalign-preferences"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class PreferenceTriple:
    prompt: tuple[int, ...]
    chosen: tuple[int, ...]
    rejected: tuple[int, ...]

    def __post_init__(self):
        for name in ("prompt", "chosen", "rejected"):
            seq = tuple(int(t) for t in getattr(self, name))
            if not seq:
                raise ValueError(f"{name} must be nonempty")
            object.__setattr__(self, name, seq)

    def to_json(self) -> dict:
        return {"prompt": list(self.prompt), "chosen": list(self.chosen), "rejected": list(self.rejected)}


class LatentReward:
    """Ground-truth scorer r*(x, y) = mean_i A[x_0, y_i].

    ``A = base_scale * q[y] + prompt_scale * P[x_0, y]`` with ``q`` and ``P``
    standard normal draws from ``seed``: a global per-token quality plus a
    prompt-specific affinity keyed on the first prompt token.
    """

    def __init__(self, vocab_size: int, seed: int, base_scale: float = 1.0, prompt_scale: float = 0.5):
        self.vocab_size = int(vocab_size)
        self.seed = int(seed)
        self.base_scale = float(base_scale)
        self.prompt_scale = float(prompt_scale)
        rng = np.random.default_rng([self.seed, 0x5EED])
        quality = rng.standard_normal(self.vocab_size)
        affinity = rng.standard_normal((self.vocab_size, self.vocab_size))
        self.table = self.base_scale * quality[None, :] + self.prompt_scale * affinity

    def __call__(self, x: Sequence[int], y: Sequence[int]) -> float:
        if len(y) == 0:
            return 0.0
        return float(np.mean(self.table[int(x[0]), np.asarray(y, dtype=np.int64)]))

    def score_batch(self, prompts: np.ndarray, responses: np.ndarray) -> np.ndarray:
        prompts = np.asarray(prompts, dtype=np.int64)
        responses = np.asarray(responses, dtype=np.int64)
        return self.table[prompts[:, :1], responses].mean(axis=1)

    def describe(self) -> dict:
        return {
            "kind": "prompt_token_affinity",
            "description": "mean over response tokens of A[prompt[0], token]; "
            "A = base_scale*q[token] + prompt_scale*P[prompt[0], token], q,P ~ N(0,1) from seed",
            "seed": self.seed,
            "vocab_size": self.vocab_size,
            "base_scale": self.base_scale,
            "prompt_scale": self.prompt_scale,
        }

    @classmethod
    def from_metadata(cls, metadata: dict) -> "LatentReward":
        d = metadata["latent_reward"]
        return cls(d["vocab_size"], d["seed"], d["base_scale"], d["prompt_scale"])


@dataclass(frozen=True)
class AlignmentDataset:
    triples: tuple[PreferenceTriple, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "triples", tuple(self.triples))
        if not self.triples:
            raise ValueError("dataset must be nonempty")

    def __len__(self) -> int:
        return len(self.triples)

    def __getitem__(self, i):
        return self.triples[i]

    def subset(self, indices: Sequence[int]) -> list[PreferenceTriple]:
        return [self.triples[i] for i in indices]

    @property
    def vocab_size(self) -> int:
        if "vocab_size" in self.metadata:
            return int(self.metadata["vocab_size"])
        return 1 + max(max(t.prompt + t.chosen + t.rejected) for t in self.triples)

    def latent_reward(self) -> LatentReward:
        return LatentReward.from_metadata(self.metadata)


def generate_synthetic_preferences(
    n: int,
    vocab: int,
    seed: int,
    prompt_len: int = 3,
    response_len: int = 4,
    base_scale: float = 1.0,
    prompt_scale: float = 0.5,
) -> AlignmentDataset:
    """Uniform prompts, two uniform candidate responses, labelled by r*.

    Pairs with equal r* are redrawn, so every triple has a strict preference.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if vocab < 2:
        raise ValueError("vocab must be >= 2")
    reward = LatentReward(vocab, seed, base_scale, prompt_scale)
    rng = np.random.default_rng(seed)
    triples = []
    while len(triples) < n:
        x = rng.integers(0, vocab, size=prompt_len)
        a = rng.integers(0, vocab, size=response_len)
        b = rng.integers(0, vocab, size=response_len)
        ra, rb = reward(x, a), reward(x, b)
        if ra == rb:
            continue
        chosen, rejected = (a, b) if ra > rb else (b, a)
        triples.append(PreferenceTriple(tuple(x), tuple(chosen), tuple(rejected)))
    metadata = {
        "generator": "synthetic_affinity",
        "seed": int(seed),
        "n": int(n),
        "vocab_size": int(vocab),
        "prompt_len": int(prompt_len),
        "response_len": int(response_len),
        "latent_reward": reward.describe(),
    }
    return AlignmentDataset(tuple(triples), metadata)


def heldout_prompts(dataset: AlignmentDataset, n: int, seed: int) -> np.ndarray:
    """``n`` fresh prompts that never occur in ``dataset`` (same length/vocab)."""
    vocab = dataset.vocab_size
    prompt_len = int(dataset.metadata.get("prompt_len", len(dataset[0].prompt)))
    seen = {t.prompt for t in dataset.triples}
    if vocab**prompt_len - len(seen) < n:
        raise ValueError("not enough unseen prompts for the requested held-out set")
    rng = np.random.default_rng([seed, 0xE7A1])
    out: list[tuple[int, ...]] = []
    taken = set(seen)
    while len(out) < n:
        x = tuple(int(t) for t in rng.integers(0, vocab, size=prompt_len))
        if x in taken:
            continue
        taken.add(x)
        out.append(x)
    return np.asarray(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# partitions


@dataclass(frozen=True)
class PhasePartition:
    parts: tuple[tuple[int, ...], ...]
    n: int

    def __post_init__(self):
        self.verify()

    def verify(self) -> None:
        """Raise unless the parts are pairwise disjoint and cover range(n)."""
        seen: set[int] = set()
        for k, part in enumerate(self.parts):
            s = set(part)
            if len(s) != len(part):
                raise ValueError(f"partition part {k} repeats an index")
            overlap = seen & s
            if overlap:
                raise ValueError(f"partition part {k} overlaps earlier parts at {sorted(overlap)[:5]}")
            seen |= s
        if seen != set(range(self.n)):
            raise ValueError("partition parts do not cover the dataset")

    def sizes(self) -> list[int]:
        return [len(p) for p in self.parts]


def _allocate(n: int, fractions: Sequence[float]) -> list[int]:
    raw = np.asarray(fractions, dtype=np.float64) * n
    sizes = np.floor(raw).astype(int)
    remainder = n - int(sizes.sum())
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[:remainder]] += 1
    return sizes.tolist()


def partition_disjoint(dataset: AlignmentDataset | int, fractions: Sequence[float], seed: int = 0) -> PhasePartition:
    """Shuffle indices with ``seed`` and cut them into consecutive disjoint parts."""
    n = dataset if isinstance(dataset, int) else len(dataset)
    if not fractions or any(not w > 0 for w in fractions):
        raise ValueError("fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    sizes = _allocate(n, fractions)
    if any(s == 0 for s in sizes):
        raise ValueError(f"partition would produce an empty part (sizes {sizes})")
    perm = np.random.default_rng([seed, 0xD15]).permutation(n)
    bounds = np.cumsum([0] + sizes)
    parts = tuple(tuple(int(i) for i in perm[bounds[k] : bounds[k + 1]]) for k in range(len(sizes)))
    return PhasePartition(parts, n)


# ---------------------------------------------------------------------------
# JSONL


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def save_jsonl(dataset: AlignmentDataset, path: str | Path) -> None:
    lines = [_dumps({"format": FORMAT_NAME, "version": FORMAT_VERSION, "metadata": dataset.metadata})]
    lines.extend(_dumps(t.to_json()) for t in dataset.triples)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _token_list(value, lineno: int, key: str) -> tuple[int, ...]:
    if not isinstance(value, list) or not value or not all(isinstance(t, int) and not isinstance(t, bool) for t in value):
        raise DatasetFormatError(f"line {lineno}: field {key!r} must be a nonempty list of integers")
    if any(t < 0 for t in value):
        raise DatasetFormatError(f"line {lineno}: field {key!r} has a negative token")
    return tuple(value)


def load_jsonl(path: str | Path) -> AlignmentDataset:
    """Read a dataset; the header line is optional, triples are required."""
    text = Path(path).read_text(encoding="utf-8")
    metadata: dict = {}
    triples = []
    linenos = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise DatasetFormatError(f"line {lineno}: expected a JSON object")
        if lineno == 1 and "format" in obj:
            if obj["format"] != FORMAT_NAME:
                raise DatasetFormatError(f"line 1: unknown format {obj['format']!r}")
            metadata = obj.get("metadata", {})
            continue
        missing = {"prompt", "chosen", "rejected"} - set(obj)
        if missing:
            raise DatasetFormatError(f"line {lineno}: missing fields {sorted(missing)}")
        linenos.append(lineno)
        triples.append(
            PreferenceTriple(
                _token_list(obj["prompt"], lineno, "prompt"),
                _token_list(obj["chosen"], lineno, "chosen"),
                _token_list(obj["rejected"], lineno, "rejected"),
            )
        )
    if not triples:
        raise DatasetFormatError(f"{path}: no preference triples found")
    vocab = metadata.get("vocab_size")
    if vocab is not None:
        for lineno, t in zip(linenos, triples):
            if max(t.prompt + t.chosen + t.rejected) >= vocab:
                raise DatasetFormatError(f"line {lineno}: token outside vocabulary of size {vocab}")
    return AlignmentDataset(tuple(triples), metadata)
