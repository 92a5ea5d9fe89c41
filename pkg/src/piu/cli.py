"""Command-line entry point: ``piu <subcommand> --config cfg.json [--out DIR] [--seed N]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import diffusion as df
from . import harness as hz
from . import idspace as ids
from . import unlearn as ul
from .errors import ConfigError, PiuError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4


def _load(args) -> hz.ExperimentConfig:
    cfg = hz.parse_config(args.config) if args.config else hz.config_from_dict({})
    if args.out is not None:
        cfg = cfg.replace(("output_dir",), args.out)
    if args.seed is not None:
        cfg = cfg.replace(("seed",), args.seed)
    if getattr(args, "method", None):
        cfg = cfg.replace(("method",), args.method)
    return cfg


def _write(path: Path, text: str) -> None:
    hz._atomic_write(path, text.encode())


def cmd_train_base(args) -> int:
    cfg = _load(args)
    out = hz.prepare_output(cfg.output_dir)
    setting = hz.build_setting(cfg)
    params, trace, key = hz.base_model(cfg, setting, not args.no_cache)
    df.save_checkpoint(params, out / "model.ckpt")
    _write(out / "resolved_config.json", cfg.to_json())
    if trace is not None:
        _write(out / "base_train_log.txt", "".join(f"step={i + 1} loss={v!r}\n" for i, v in enumerate(trace)))
    print(f"base model {key} ({params.num_params()} parameters) -> {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_analyze_layers(args) -> int:
    cfg = _load(args)
    prep = hz.prepare(cfg, not args.no_cache)
    rows = hz.layers_table(prep.scores)
    print(f"{'block':>6s} {'S_kv':>10s} {'S_q':>10s} {'combined':>10s} {'rank':>5s}")
    for r in rows:
        print(f"{r['tag']:>6s} {r['s_kv']:10.6f} {r['s_q']:10.6f} {r['combined']:10.6f} {r['rank']:5d}")
    if args.out is not None:
        out = hz.prepare_output(cfg.output_dir)
        _write(out / "layers.json", hz.dump_json(rows).decode())
    return EXIT_OK


def cmd_select_anchor(args) -> int:
    cfg = _load(args)
    setting = hz.build_setting(cfg)
    f = hz.choose_forget_identity(cfg, setting.dataset)
    ds = setting.dataset.with_forget(f)
    q = ids.AnchorQuery(f, cfg["anchor"]["tau"], cfg["anchor"]["tolerance"], cfg.seed)
    anchor = ids.select_anchor(ds, q)
    sims = ids.anchor_similarities(ds, f)
    info = {
        "forget_identity": f,
        "anchor": anchor,
        "similarity": sims[anchor],
        "candidates": ids.anchor_candidates(ds, q),
    }
    print(json.dumps(info, indent=2))
    if args.out is not None:
        out = hz.prepare_output(cfg.output_dir)
        _write(out / "anchor.json", hz.dump_json(info).decode())
    return EXIT_OK


def cmd_unlearn(args) -> int:
    cfg = _load(args)
    out = hz.prepare_output(cfg.output_dir)
    prep = hz.prepare(cfg, not args.no_cache)
    result = hz.run_method(prep.config, prep.setting, prep.frozen, prep.forget_identity,
                           prep.anchor, prep.scores)
    df.save_checkpoint(result.params, out / "model.ckpt")
    _write(out / "train_log.txt", ul.format_log(result.log))
    _write(out / "resolved_config.json", prep.config.to_json())
    print(f"{cfg.method}: forget {prep.forget_identity} -> anchor {prep.anchor}, "
          f"{len(result.log)} steps, checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    out = hz.prepare_output(cfg.output_dir)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    params = df.load_checkpoint(ckpt)
    setting = hz.build_setting(cfg)
    f = hz.choose_forget_identity(cfg, setting.dataset)
    setting.dataset = setting.dataset.with_forget(f)
    probe = hz.make_probe(cfg, setting, f)
    report = hz.evaluate_params(cfg, setting, params, f, probe)
    _write(out / "metrics.json", report.to_json())
    print(report.to_json(), end="")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _load(args)
    out = hz.run_pipeline(cfg, not args.no_cache)
    m = json.loads((out / "metrics.json").read_text())
    print(f"ism_forget={m['ism_forget']:.4f} ism_retain={m['ism_retain']:.4f} srk={m['srk']:.4f} -> {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    if not args.config:
        raise ConfigError("sweep needs --config <sweep.json>")
    spec = hz.parse_sweep(args.config)
    if args.out is not None:
        spec.base = spec.base.replace(("output_dir",), args.out)
    if args.seed is not None:
        spec.base = spec.base.replace(("seed",), args.seed)
    if args.jobs is not None:
        spec.jobs = args.jobs
    path, ok = hz.run_sweep(spec, not args.no_cache)
    print((path.parent / "sweep_table.txt").read_text(), end="")
    if not ok:
        print("some sweep runs failed; see sweep_summary.json", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {
    "train-base": cmd_train_base,
    "analyze-layers": cmd_analyze_layers,
    "select-anchor": cmd_select_anchor,
    "unlearn": cmd_unlearn,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="piu", description="Identity unlearning experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config (sweep spec for 'sweep')")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="experiment seed (overrides seed)")
        p.add_argument("--no-cache", action="store_true", help=f"ignore ${hz.CACHE_ENV}")
        if name in ("unlearn", "pipeline"):
            p.add_argument("--method", choices=hz.METHODS)
        if name == "evaluate":
            p.add_argument("--checkpoint", help="model to score (default: <out>/model.ckpt)")
        if name == "sweep":
            p.add_argument("--jobs", type=int, help="parallel worker processes")
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, hz.StageFailed):
        exc = exc.cause
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_RUNTIME


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (PiuError, OSError, ValueError) as exc:
        print(f"piu {args.command}: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
