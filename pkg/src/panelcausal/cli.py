"""Command-line entry point.

Every subcommand except ``simulate`` and ``report`` reads a pipeline
config (``--config``), runs the stages it needs, and writes a report to
``--out`` (default: the config's ``output`` or ``./out``). Exit codes:
0 success, 2 config error, 3 data error, 4 estimation error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigError, PanelCausalError
from .pipeline import PipelineConfig, prepare_panel, run_pipeline
from .report import ReportBundle, emit_report
from .synth import PRESETS, DgpConfig, generate_panel, write_panel

logger = logging.getLogger("panelcausal")

# subcommand -> (stages to run, robustness toggle forced on with defaults)
COMMANDS = {
    "wash": ((), None),
    "did": (("describe", "baseline"), None),
    "event": (("event",), "event_study"),
    "placebo": (("placebo",), "placebo"),
    "match": (("match",), "psm"),
    "balance": (("balance",), "eb"),
    "heckman": (("heckman",), "heckman"),
    "moderate": (("moderate",), None),
    "split": (("split",), None),
    "sur": (("sur",), None),
    "pipeline": (None, None),
}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config file (YAML or JSON)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="panelcausal", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="draw a synthetic panel")
    s.add_argument("--preset", choices=PRESETS)
    s.add_argument("--n-firms", type=int)
    sub.add_parser("clean", parents=[common], help="load and screen; write cleaned panel.csv")
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=f"run the {name} stage(s)")
        if name == "placebo":
            sp.add_argument("--n-perm", type=int)
        if name == "moderate":
            sp.add_argument("--moderator", action="append", help="moderator column (repeatable)")
        if name == "split":
            sp.add_argument("--split", action="append", help="split column (repeatable)")
            sp.add_argument("--n-perm", type=int)
    r = sub.add_parser("report", parents=[common], help="re-emit files from a report.json")
    r.add_argument("report_json", help="path to an existing report.json")
    return p


def _load_config(args, overrides: dict | None = None) -> PipelineConfig:
    if not args.config:
        raise ConfigError(["--config is required"])
    path = Path(args.config)
    base = PipelineConfig.from_file(path)  # validates the file as written
    raw = dict(base.raw)
    if args.seed is not None:
        raw["seed"] = args.seed
        if "synthetic" in (raw.get("input") or {}) and "seed" not in raw["input"]["synthetic"]:
            raw["input"] = {"synthetic": {**raw["input"]["synthetic"], "seed": args.seed}}
    if args.threads is not None:
        raw["threads"] = args.threads
    for key, value in (overrides or {}).items():
        raw[key] = value
    return PipelineConfig.from_dict(raw, base_dir=path.parent)


def _outdir(args, cfg: PipelineConfig | None = None) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.output:
        return cfg.base_dir / cfg.output
    return Path("out")


def _cmd_simulate(args) -> int:
    syn = {}
    if args.config:
        cfg = _load_config(args)
        if "synthetic" not in cfg.input:
            raise ConfigError(["simulate needs a config with input.synthetic"])
        syn = dict(cfg.input["synthetic"])
    if args.preset:
        syn["preset"] = args.preset
    if args.n_firms:
        syn["n_firms"] = args.n_firms
    if args.seed is not None:
        syn["seed"] = args.seed
    panel, truth = generate_panel(DgpConfig.from_dict(syn))
    csv_path, truth_path = write_panel(panel, truth, _outdir(args))
    print(f"wrote {csv_path} ({panel.n_rows} rows) and {truth_path}")
    return 0


def _cmd_clean(args) -> int:
    cfg = _load_config(args)
    data, bundle = prepare_panel(cfg, wash=False)
    out = _outdir(args, cfg)
    try:
        out.mkdir(parents=True, exist_ok=True)
        data.to_csv(out / "panel.csv")
    except OSError as exc:
        raise ConfigError([f"cannot write to {out}: {exc}"]) from exc
    emit_report(bundle, out, ("json",))
    print(f"wrote {out / 'panel.csv'} ({data.n_rows} rows)")
    return 0


def _cmd_report(args) -> int:
    src = Path(args.report_json)
    try:
        bundle = ReportBundle.from_json(src.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError([f"cannot read report {str(src)!r}: {exc}"]) from exc
    out = Path(args.out) if args.out else src.parent
    for p in emit_report(bundle, out):
        print(p)
    return 0


def _cmd_stage(args) -> int:
    stages, toggle = COMMANDS[args.command]
    overrides = {}
    if toggle is not None or args.command in ("placebo", "moderate", "split"):
        probe = _load_config(args)
        rob = dict(probe.raw.get("robustness") or {})
        if toggle is not None and not rob.get(toggle):
            rob[toggle] = True
        if args.command == "placebo" and args.n_perm:
            rob["placebo"] = args.n_perm
        overrides["robustness"] = rob
        if args.command == "moderate" and args.moderator:
            overrides["moderation"] = args.moderator
        if args.command == "split":
            het = probe.raw.get("heterogeneity") or {}
            het = {"splits": het} if isinstance(het, list) else dict(het)
            if args.split:
                het["splits"] = args.split
            if args.n_perm is not None:
                het["n_perm"] = args.n_perm
            overrides["heterogeneity"] = het
    cfg = _load_config(args, overrides)
    if args.command == "sur" and cfg.sur is None:
        raise ConfigError(["the sur command needs a sur section in the config"])
    if args.command == "moderate" and not cfg.moderation:
        raise ConfigError(["the moderate command needs moderation columns"])
    if args.command == "split" and not (cfg.heterogeneity and cfg.heterogeneity["splits"]):
        raise ConfigError(["the split command needs heterogeneity splits"])
    bundle = run_pipeline(cfg, stages)
    out = _outdir(args, cfg)
    for p in emit_report(bundle, out):
        print(p)
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "clean":
            return _cmd_clean(args)
        if args.command == "report":
            return _cmd_report(args)
        return _cmd_stage(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return exc.exit_code
    except PanelCausalError as exc:
        cause = getattr(exc, "cause", None)
        if isinstance(cause, ConfigError):
            for problem in cause.problems:
                print(f"config error [{exc.stage}]: {problem}", file=sys.stderr)
        else:
            print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
