"""``dpalign`` command line: generate-data, train, sweep, analyze, accountant.

Exit codes: 0 success, 1 usage, 2 invalid configuration, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import analysis
from .alignment_pipeline import PipelineError, run_pipeline
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .data_pipeline import AlignmentDataset, DatasetFormatError, generate_synthetic_preferences, load_jsonl, save_jsonl
from .evaluation import SweepCurve, sweep
from .models import ContextOverflow, model_meta, save_checkpoint
from .privacy_accounting import AccountantConfig, PrivacyBudget, epsilon_for_sigma, format_epsilon, parse_epsilon, sigma_for_budget
from .tensor_core import NonFiniteError

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _epsilon_arg(text: str) -> float:
    try:
        return parse_epsilon(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _epsilon_list(text: str) -> list[float]:
    return [_epsilon_arg(t) for t in text.split(",") if t.strip()]


def dataset_for(config: RunConfig) -> AlignmentDataset:
    d = config.data
    if d.path is not None:
        return load_jsonl(d.path)
    return generate_synthetic_preferences(
        d.n, d.vocab, d.seed, d.prompt_len, d.response_len, base_scale=d.base_scale, prompt_scale=d.prompt_scale
    )


def _config_with_flags(args, mapping: dict[str, str]) -> RunConfig:
    cfg = load_config(args.config)
    return apply_overrides(cfg, {key: getattr(args, attr) for attr, key in mapping.items()})


# ---------------------------------------------------------------------------
# commands


def cmd_generate_data(args) -> int:
    ds = generate_synthetic_preferences(
        args.n, args.vocab, args.seed, args.prompt_len, args.response_len, prompt_scale=args.prompt_scale
    )
    save_jsonl(ds, args.out)
    print(f"wrote {len(ds)} triples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config_with_flags(args, {"epsilon": "privacy.epsilon", "seed": "seed"})
    dataset = dataset_for(cfg)
    result = run_pipeline(cfg.pipeline_spec(), dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = model_meta("policy", result.policy.config, pipeline=cfg.pipeline, seed=cfg.seed)
    save_checkpoint(out / "policy.ckpt", result.policy.params, meta)
    if result.reward_model is not None:
        save_checkpoint(out / "reward_model.ckpt", result.reward_model.params, model_meta("reward", result.reward_model.config))
    report = dict(result.report, config=cfg.to_json())
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    budget = report["budget_report"]
    print(f"{cfg.pipeline}: {len(report['phases'])} phases, overall epsilon {budget['overall']['epsilon']}")
    if report["pure_noise"]:
        print("pure-noise mode: zero budget, gradients replaced by noise")
    print(f"checkpoint: {out / 'policy.ckpt'}")
    return EXIT_OK


def _method(pipeline: str) -> str:
    return "DPO" if pipeline == "dpo_pipeline" else "PPO"


def cmd_sweep(args) -> int:
    cfg = _config_with_flags(args, {"epsilons": "sweep.epsilons", "seeds": "sweep.seeds", "workers": "sweep.workers"})
    dataset = dataset_for(cfg)
    curve = sweep(
        cfg.pipeline_spec(),
        cfg.sweep.epsilons,
        cfg.sweep.seeds,
        dataset,
        cfg.evaluation.build(),
        delta=cfg.privacy.delta,
        workers=cfg.sweep.workers,
        label=f"{cfg.pipeline}/{cfg.optimizer.variant}",
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curve.save(out / "curve.json")
    key = (f"tiny-h{cfg.model.hidden_dim}", cfg.optimizer.variant.upper().replace("_", "-"), _method(cfg.pipeline))
    analysis.emit_results_table(analysis.curves_to_rows({key: curve}), out / "results.csv")
    for p in curve.points:
        print(f"eps={format_epsilon(p.epsilon):>4}  f={p.mean_reward:+.4f} +- {p.std_err:.4f}  (seeds={p.seeds})")
    print(f"wrote {out / 'curve.json'} and {out / 'results.csv'}")
    return EXIT_OK


def _analysis_inputs(args) -> dict[str, SweepCurve]:
    source = args.input
    if source is None or source in analysis.BUNDLED_TABLES:
        path = analysis.bundled_path(source or "llama-gpt2")
    else:
        path = Path(source)
    if path.suffix == ".json":
        return {path.stem: SweepCurve.load(path)}
    rows = analysis.load_results_table(path)
    rows = [
        r
        for r in rows
        if (args.model is None or r.model == args.model)
        and (args.optimizer is None or r.optimizer == args.optimizer)
        and (args.method is None or r.method == args.method)
    ]
    if not rows:
        raise analysis.ResultsTableError(f"{path}: no rows match the selection")
    return {"/".join(r.key): r.curve() for r in rows}


def cmd_analyze(args) -> int:
    reports = {name: analysis.marginal_gains(c) for name, c in _analysis_inputs(args).items()}
    print("\n\n".join(analysis.render_report(rep, name) for name, rep in reports.items()))
    if args.csv_out:
        Path(args.csv_out).write_text(analysis.report_csv(reports), encoding="utf-8")
    return EXIT_OK


def cmd_accountant(args) -> int:
    acct = AccountantConfig(args.epochs)
    if args.epsilon is not None:
        sigma = sigma_for_budget(PrivacyBudget(args.epsilon, args.delta), acct)
        print("inf" if math.isinf(sigma) else f"{sigma:.12g}")
    else:
        if args.sigma < 0:
            raise UsageError("--sigma must be >= 0")
        eps = epsilon_for_sigma(args.sigma, args.delta, acct)
        print("inf" if math.isinf(eps) else f"{eps:.12g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dpalign", description="Differentially private alignment at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log phase progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-data", help="write a synthetic preference dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--vocab", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--prompt-len", type=int, default=3)
    g.add_argument("--response-len", type=int, default=4)
    g.add_argument("--prompt-scale", type=float, default=0.5)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="run one alignment pipeline")
    t.add_argument("--config")
    t.add_argument("--epsilon", type=_epsilon_arg, help="overrides privacy.epsilon ('inf' and '0' allowed)")
    t.add_argument("--seed", type=int, help="overrides seed")
    t.add_argument("--out", default="run")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="train and evaluate across privacy budgets")
    s.add_argument("--config")
    s.add_argument("--epsilons", type=_epsilon_list, help="e.g. 0,1,2,3,4,5,10,inf")
    s.add_argument("--seeds", type=_int_list, help="e.g. 0,1,2,3,4")
    s.add_argument("--workers", type=int)
    s.add_argument("--out", default="sweep")
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("analyze", help="marginal gains of reward-vs-epsilon curves")
    a.add_argument("input", nargs="?", help="curve JSON, results CSV, or a bundled table name (default llama-gpt2)")
    a.add_argument("--model")
    a.add_argument("--optimizer")
    a.add_argument("--method")
    a.add_argument("--csv-out")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("accountant", help="noise multiplier for a budget, or the reverse")
    which = c.add_mutually_exclusive_group(required=True)
    which.add_argument("--epsilon", type=_epsilon_arg)
    which.add_argument("--sigma", type=float)
    c.add_argument("--delta", type=float, default=1e-5)
    c.add_argument("--epochs", type=int, default=3)
    c.set_defaults(func=cmd_accountant)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dpalign: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"dpalign: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (
        PipelineError,
        DatasetFormatError,
        analysis.ResultsTableError,
        ContextOverflow,
        NonFiniteError,
        ValueError,
        OSError,
    ) as exc:
        print(f"dpalign: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
