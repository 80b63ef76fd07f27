"""Reward-based evaluation of policies and epsilon sweeps."""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment_pipeline import PipelineSpec, run_pipeline
from .data_pipeline import AlignmentDataset, LatentReward, heldout_prompts
from .models import RewardNet, TinyPolicy, trim_at_eos
from .privacy_accounting import AccountantConfig, PrivacyBudget, format_epsilon, parse_epsilon, sigma_for_budget

Scorer = Callable[[np.ndarray, list], np.ndarray]


def _as_scorer(scorer) -> Scorer:
    if isinstance(scorer, LatentReward):
        return lambda prompts, responses: np.array([scorer(x, y) for x, y in zip(prompts, responses)])
    if isinstance(scorer, RewardNet):
        return lambda prompts, responses: np.array([scorer.score(list(x), y) for x, y in zip(prompts, responses)])
    if callable(scorer):
        return lambda prompts, responses: np.array([float(scorer(x, y)) for x, y in zip(prompts, responses)])
    raise TypeError(f"unsupported scorer {type(scorer).__name__}")


def sample_rewards(
    policy: TinyPolicy,
    scorer,
    prompts: np.ndarray,
    n_samples: int,
    rng: np.random.Generator,
    max_len: int,
    temperature: float = 1.0,
) -> np.ndarray:
    """One sampled response per prompt (cycling the prompt list), scored."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    chosen = prompts[np.arange(n_samples) % len(prompts)]
    raw = policy.sample(chosen, max_len, temperature, rng)
    responses = [trim_at_eos(r, policy.config.eos_token) for r in raw]
    if isinstance(scorer, LatentReward) and policy.config.eos_token is None:
        return scorer.score_batch(chosen, np.asarray(responses))
    return _as_scorer(scorer)(chosen, responses)


def evaluate_alignment(
    policy: TinyPolicy,
    scorer,
    prompts: np.ndarray,
    n_samples: int,
    rng: np.random.Generator | int,
    max_len: int = 4,
    temperature: float = 1.0,
) -> tuple[float, float]:
    """Mean reward over ``n_samples`` sampled responses and its standard error."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    r = sample_rewards(policy, scorer, prompts, n_samples, rng, max_len, temperature)
    se = float(np.std(r, ddof=1) / np.sqrt(len(r))) if len(r) > 1 else 0.0
    return float(np.mean(r)), se


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class EvalSettings:
    n_prompts: int = 300
    n_samples: int = 1000
    temperature: float = 1.0
    max_len: int | None = None
    seed: int = 12345


@dataclass
class CurvePoint:
    epsilon: float
    mean_reward: float
    std_err: float
    seeds: int
    per_seed: list[float] = field(default_factory=list)
    sigma: float = 0.0

    def to_json(self) -> dict:
        return {
            "epsilon": format_epsilon(self.epsilon),
            "mean_reward": self.mean_reward,
            "std_err": self.std_err,
            "seeds": self.seeds,
            "per_seed": list(self.per_seed),
            "sigma": "inf" if math.isinf(self.sigma) else self.sigma,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CurvePoint":
        sigma = d.get("sigma", 0.0)
        return cls(
            parse_epsilon(d["epsilon"]),
            float(d["mean_reward"]),
            float(d.get("std_err", 0.0)),
            int(d.get("seeds", 1)),
            [float(v) for v in d.get("per_seed", [])],
            math.inf if sigma == "inf" else float(sigma),
        )


@dataclass
class SweepCurve:
    points: list[CurvePoint]
    untrained: list[float] = field(default_factory=list)
    post_sft: dict[str, list[float]] = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        eps = [p.epsilon for p in self.points]
        if any(b <= a for a, b in zip(eps, eps[1:])):
            raise ValueError("curve epsilons must be strictly increasing")
        if any(p.seeds < 1 for p in self.points):
            raise ValueError("every curve point needs at least one seed")

    def point(self, epsilon: float) -> CurvePoint:
        for p in self.points:
            if p.epsilon == epsilon:
                return p
        raise KeyError(epsilon)

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "points": [p.to_json() for p in self.points],
            "untrained": list(self.untrained),
            "post_sft": {k: list(v) for k, v in self.post_sft.items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "SweepCurve":
        return cls(
            [CurvePoint.from_json(p) for p in d["points"]],
            [float(v) for v in d.get("untrained", [])],
            {k: [float(x) for x in v] for k, v in d.get("post_sft", {}).items()},
            d.get("label", ""),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SweepCurve":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class _Cell:
    spec: PipelineSpec
    dataset: AlignmentDataset
    prompts: np.ndarray
    settings: EvalSettings
    max_len: int


def _run_cell(cell: _Cell) -> tuple[float, float, float]:
    result = run_pipeline(cell.spec, cell.dataset)
    r_star = cell.dataset.latent_reward()
    s = cell.settings

    def score(policy):
        # common random numbers: the same evaluation stream for every epsilon
        rng = np.random.default_rng([s.seed, cell.spec.seed])
        return evaluate_alignment(policy, r_star, cell.prompts, s.n_samples, rng, cell.max_len, s.temperature)[0]

    return score(result.policy), score(result.initial_policy), score(result.sft_policy)


def sweep(
    template: PipelineSpec,
    epsilons: Sequence[float],
    seeds: Sequence[int],
    dataset: AlignmentDataset,
    settings: EvalSettings = EvalSettings(),
    delta: float | None = None,
    workers: int = 1,
    label: str = "",
) -> SweepCurve:
    """Re-calibrate sigma for every epsilon, train one pipeline per seed, evaluate.

    Evaluation uses held-out prompts absent from ``dataset`` and the
    generator's ground-truth reward.
    """
    if not epsilons or not seeds:
        raise ValueError("epsilons and seeds must be nonempty")
    epsilons = sorted(set(parse_epsilon(e) for e in epsilons))
    delta = template.phases[0].budget.delta if delta is None else delta
    prompts = heldout_prompts(dataset, settings.n_prompts, settings.seed)
    max_len = settings.max_len or int(dataset.metadata.get("response_len", len(dataset[0].chosen)))
    cells = []
    for eps in epsilons:
        spec_eps = template.with_budget(PrivacyBudget(eps, delta))
        for seed in seeds:
            cells.append(_Cell(spec_eps.with_seed(seed), dataset, prompts, settings, max_len))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_cell, cells))
    else:
        outputs = [_run_cell(c) for c in cells]

    points = []
    k = 0
    untrained: list[float] = []
    post_sft: dict[str, list[float]] = {}
    for i, eps in enumerate(epsilons):
        vals, sfts = [], []
        for _ in seeds:
            final, init, sft = outputs[k]
            k += 1
            vals.append(final)
            sfts.append(sft)
            if i == 0:
                # initialization depends only on the seed
                untrained.append(init)
        post_sft[format_epsilon(eps)] = sfts
        arr = np.asarray(vals)
        se = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
        sigma = sigma_for_budget(PrivacyBudget(eps, delta), AccountantConfig(template.phases[-1].epochs))
        points.append(CurvePoint(eps, float(arr.mean()), se, len(arr), vals, sigma))
    return SweepCurve(points, untrained, post_sft, label)
