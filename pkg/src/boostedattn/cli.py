"""Command-line entry point: ``boostedattn <subcommand> [flags]``.

Exit codes: 0 success, 1 a checked property failed (``props`` and
``gradcheck``), 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path


from . import __version__
from .report import ExperimentReport

SUBCOMMANDS = ("props", "negative", "rounds", "gates", "scaling", "hull-survey", "lm", "norm-study", "gradcheck")
COMMON_KEYS = {"seeds", "jobs", "out", "format"}
LM_KEYS = {"model", "train", "corpus", "max_chars"}
SCHEMA = {
    "props": set(),
    "gradcheck": {"instances"},
    "negative": {"recipe", "configs", "bayes_queries"},
    "rounds": {"recipe", "rounds", "task", "gate_kind", "bayes_queries"},
    "gates": {"recipe", "task", "gates"},
    "scaling": {"recipe", "sizes", "sigmas", "bayes_queries"},
    "lm": LM_KEYS,
    "norm-study": LM_KEYS,
    "hull-survey": LM_KEYS | {"samples_per_layer", "position_cap", "windows"},
}
SURVEY_MODEL = {"mechanism": "boosted"}
SURVEY_TRAIN = {"epochs": 1}


class ConfigError(ValueError):
    pass


def _dataclass_from(cls, values: dict, where: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid {where}: {err}") from err


def parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as err:
        raise ConfigError(f"bad seed list {text!r}") from err
    if not seeds:
        raise ConfigError("empty seed list")
    return seeds


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the JSON config file, then command-line flags."""
    cfg: dict = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {args.config}: {err}") from err
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(cfg) - COMMON_KEYS - SCHEMA[args.command]
        if unknown:
            raise ConfigError(f"unknown key(s) for {args.command}: {sorted(unknown)}")
    if args.seeds is not None:
        cfg["seeds"] = parse_seeds(args.seeds)
    elif args.seed is not None:
        cfg["seeds"] = [args.seed]
    cfg.setdefault("seeds", [0] if args.command in ("props", "gradcheck", "lm", "hull-survey") else [0, 1, 2])
    if not isinstance(cfg["seeds"], list) or not all(isinstance(s, int) for s in cfg["seeds"]) or not cfg["seeds"]:
        raise ConfigError("seeds must be a non-empty list of integers")
    if args.jobs is not None:
        cfg["jobs"] = args.jobs
    cfg.setdefault("jobs", os.cpu_count() or 1)
    if args.out is not None:
        cfg["out"] = args.out
    cfg.setdefault("out", os.environ.get("BOOSTEDATTN_OUT", "results"))
    if args.format is not None:
        cfg["format"] = args.format
    cfg.setdefault("format", "both")
    if cfg["format"] not in ("csv", "json", "both"):
        raise ConfigError(f"format must be csv, json or both, got {cfg['format']!r}")
    if getattr(args, "corpus", None):
        cfg["corpus"] = args.corpus
    cfg["command"] = args.command
    return cfg


def _formats(cfg: dict) -> tuple:
    return ("csv", "json") if cfg["format"] == "both" else (cfg["format"],)


def _retrieval_kwargs(cfg: dict) -> dict:
    from .retrieval import TrainRecipe

    kw = {"seeds": tuple(cfg["seeds"]), "jobs": int(cfg["jobs"]),
          "recipe": _dataclass_from(TrainRecipe, cfg.get("recipe", {}), "recipe")}
    for key in ("bayes_queries", "gate_kind"):
        if key in cfg:
            kw[key] = cfg[key]
    for key in ("rounds", "gates", "sigmas"):
        if key in cfg:
            kw[key] = tuple(cfg[key])
    if "task" in cfg:
        kw["task"] = tuple(cfg["task"])
    if "configs" in cfg:
        kw["configs"] = tuple(tuple(c) for c in cfg["configs"])
    if "sizes" in cfg:
        kw["sizes"] = tuple(tuple(s) for s in cfg["sizes"])
    return kw


def _lm_setup(cfg: dict, model_defaults: dict | None = None, train_defaults: dict | None = None):
    from .lm import Corpus, LmConfig, LmRecipe

    if "corpus" in cfg:
        try:
            text = Path(cfg["corpus"]).read_text(encoding="utf-8")
        except OSError as err:
            raise ConfigError(f"cannot read corpus {cfg['corpus']}: {err}") from err
        if "max_chars" in cfg:
            text = text[:int(cfg["max_chars"])]
        corpus = Corpus.from_text(text)
    else:
        corpus = Corpus.bundled(cfg.get("max_chars"))
    model = {**(model_defaults or {}), **cfg.get("model", {}), "vocab_size": corpus.vocab_size}
    train = {**(train_defaults or {}), **cfg.get("train", {})}
    return corpus, _dataclass_from(LmConfig, model, "model"), _dataclass_from(LmRecipe, train, "train")


def _checks_report(name: str, results, cfg: dict, seed: int, report: ExperimentReport | None):
    report = report or ExperimentReport(name, cfg)
    for r in results:
        report.add(seed=seed, check=r.name, value=r.value, limit=r.limit, passed=r.passed)
        print(r.line())
    return report


def _validate(cfg: dict):
    """Build every typed object up front so bad configs fail before any work."""
    cmd = cfg["command"]
    if cmd in ("negative", "rounds", "gates", "scaling"):
        _retrieval_kwargs(cfg)
    elif cmd in ("lm", "norm-study", "hull-survey"):
        from .lm import LmConfig, LmRecipe

        _dataclass_from(LmConfig, cfg.get("model", {}), "model")
        _dataclass_from(LmRecipe, cfg.get("train", {}), "train")
        if "corpus" in cfg and not Path(cfg["corpus"]).is_file():
            raise ConfigError(f"corpus file not found: {cfg['corpus']}")


def run(cfg: dict) -> tuple[list[ExperimentReport], int]:
    cmd = cfg["command"]
    provenance = {k: v for k, v in cfg.items() if k not in ("out", "jobs", "format")}
    if cmd in ("props", "gradcheck"):
        from .checks import run_gradcheck_suite, run_proposition_suite

        report, ok = None, True
        for seed in cfg["seeds"]:
            results = (run_proposition_suite(seed) if cmd == "props"
                       else run_gradcheck_suite(seed, int(cfg.get("instances", 10))))
            report = _checks_report(cmd, results, provenance, seed, report)
            ok &= all(r.passed for r in results)
        return [report], 0 if ok else 1

    if cmd in ("negative", "rounds", "gates", "scaling"):
        from . import experiments as ex

        driver = {"negative": ex.run_negative_suite, "rounds": ex.run_rounds_ablation,
                  "gates": ex.run_gate_ablation, "scaling": ex.run_scaling_ablation}[cmd]
        report = driver(**_retrieval_kwargs(cfg))
        report.config = provenance
        by = ("d", "K", "sigma", "condition") if cmd in ("negative", "scaling") else ("condition",)
        print(report.table(by=by))
        if cmd == "scaling":
            report.reference = {f"{d},{K},{s}": g for (d, K, s), g in ex.scaling_gains(report).items()}
            for key, gain in report.reference.items():
                print(f"gain (d,K,sigma)=({key}): {100 * gain:+.2f} pp")
        if report.reference and cmd == "rounds":
            print(f"Bayes ceiling: {100 * report.reference['bayes']:.2f}")
        return [report], 0

    if cmd == "lm":
        from .lm import eval_ppl, train_lm

        corpus, config, recipe = _lm_setup(cfg)
        report = ExperimentReport("lm", provenance)
        for seed in cfg["seeds"]:
            model, curve = train_lm(corpus, config, recipe, seed)
            for epoch, (tr, va) in enumerate(zip(curve.train_loss, curve.val_loss), 1):
                report.add(seed=seed, epoch=epoch, train_loss=tr, val_loss=float(va))
            ppl = eval_ppl(model, corpus.test, limit=recipe.eval_windows)
            report.reference[f"test_ppl_seed{seed}"] = ppl
            print(f"seed {seed}: initial val loss {curve.initial_loss:.4f}, test ppl {ppl:.3f}")
        print(report.table("val_loss", by=("epoch",), scale=1.0))
        return [report], 0

    if cmd == "norm-study":
        from .lm import run_norm_placement_study

        corpus, config, recipe = _lm_setup(cfg)
        report = run_norm_placement_study(corpus, tuple(cfg["seeds"]), config, recipe, int(cfg["jobs"]))
        report.config = provenance
        print(report.table("ppl", scale=1.0))
        return [report], 0

    if cmd == "hull-survey":
        from .analysis import boosted_hull_escape_survey
        from .lm import lm_diagnostics, train_lm, windows

        corpus, config, recipe = _lm_setup(cfg, SURVEY_MODEL, SURVEY_TRAIN)
        report = ExperimentReport("hull_survey", provenance)
        for seed in cfg["seeds"]:
            model, _ = train_lm(corpus, config, recipe, seed)
            x, _ = windows(corpus.test, config.seq_len, int(cfg.get("windows", 8)))
            survey = boosted_hull_escape_survey(lambda t: lm_diagnostics(model, t), x,
                                                int(cfg.get("samples_per_layer", 200)),
                                                int(cfg.get("position_cap", 64)), seed=seed)
            for layer, head, pos, dist in survey.rows:
                report.add(seed=seed, layer=layer, head=head, position=pos, distance=dist)
            for layer in survey.layer_mean:
                report.reference[f"seed{seed}_layer{layer}"] = {
                    "mean_distance": survey.layer_mean[layer], "escape_fraction": survey.escape_fraction[layer]}
                print(f"seed {seed} layer {layer}: mean distance {survey.layer_mean[layer]:.4f}, "
                      f"escape fraction {survey.escape_fraction[layer]:.3f}")
        return [report], 0

    raise ConfigError(f"unknown subcommand {cmd!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boostedattn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        seeds = p.add_mutually_exclusive_group()
        seeds.add_argument("--seed", type=int, help="single seed")
        seeds.add_argument("--seeds", help="comma-separated seed list")
        p.add_argument("--out", help="output directory (default $BOOSTEDATTN_OUT or ./results)")
        p.add_argument("--config", help="JSON config file (unknown keys are rejected)")
        p.add_argument("--jobs", type=int, help="worker processes (default: logical cores)")
        p.add_argument("--format", choices=("csv", "json", "both"))
        if name in ("lm", "norm-study", "hull-survey"):
            p.add_argument("--corpus", help="plain-text corpus (default: bundled text)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        _validate(cfg)
        reports, code = run(cfg)
    except ConfigError as err:
        print(f"boostedattn {args.command}: configuration error: {err}", file=sys.stderr)
        return 2
    for report in reports:
        for path in report.write(cfg["out"], _formats(cfg)):
            print(f"wrote {path}")
    return code


if __name__ == "__main__":
    sys.exit(main())
