"""Command-line entry point: ``hmoe-isac {train,eval,sweep,plot,selftest}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .baselines import POLICIES

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_METRICS = 3


def _int_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("empty seed list")
    return out


def _float_list(text: str) -> list[float]:
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hmoe-isac", description="Train and evaluate ISAC scheduling/beamforming policies.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, policy=True):
        sp.add_argument("--config", type=Path, help="YAML experiment file (default: packaged config)")
        if policy:
            sp.add_argument("--policy", choices=sorted(POLICIES))
        sp.add_argument("--seeds", type=_int_list, help="e.g. 0,1,2 or 0-9")
        sp.add_argument("--episodes", type=int, help="training episodes")
        sp.add_argument("--out", type=Path, help="output directory")
        sp.add_argument("--workers", type=int, help="parallel seed workers")

    common(sub.add_parser("train", help="train, evaluate and write traces, checkpoints and a summary"))
    common(sub.add_parser("eval", help="re-evaluate saved checkpoints"))
    sw = sub.add_parser("sweep", help="retrain and evaluate at every SNR point")
    common(sw)
    sw.add_argument("--snr-grid", type=_float_list, help="comma-separated SNR values in dB")
    pl = sub.add_parser("plot", help="draw charts from summaries under --out")
    pl.add_argument("--config", type=Path)
    pl.add_argument("--out", type=Path)
    sub.add_parser("selftest", help="fast numerical self-checks")
    return p


def _load(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(getattr(args, "config", None))
    data = cfg.model_dump()
    for key, attr in (("policy", "policy"), ("seeds", "seeds"), ("train_episodes", "episodes"),
                      ("out", "out"), ("workers", "workers"), ("snr_grid", "snr_grid")):
        val = getattr(args, attr, None)
        if val is not None:
            data[key] = str(val) if key == "out" else val
    return harness.parse_config(data)


def _report(summaries) -> int:
    code = EXIT_OK
    for s in summaries:
        m, sd = s.mean, s.std
        print(f"{s.policy:12s} snr={s.snr_db:5.1f}dB  E_total={m['e_total']:.3f}±{sd['e_total']:.3f} J  "
              f"E_comp={m['e_comp']:.3f}  E_sweep={m['e_sweep']:.3f}  BMP={m['avg_bmp']:.3f}  "
              f"MAE={m['mae_deg']:.3f}°  act={m['activation_rate']:.3f}  violations={s.violations}")
        if not s.finite:
            print(f"error: non-finite metric in {s.policy} summary", file=sys.stderr)
            code = EXIT_METRICS
        if not s.hardware_ok:
            print(f"error: {s.violations['hardware']} hardware constraint failures in {s.policy}", file=sys.stderr)
            code = EXIT_METRICS
    return code


def cmd_train(args) -> int:
    cfg = _load(args)
    summary = harness.run_experiment(cfg)
    code = _report([summary])
    if cfg.plots:
        _plot_dir(Path(cfg.out))
    return code


def cmd_eval(args) -> int:
    cfg = _load(args)
    return _report([harness.run_experiment(cfg, train=False)])


def cmd_sweep(args) -> int:
    cfg = _load(args)
    pts = harness.snr_sweep(cfg)
    code = _report(pts)
    if cfg.plots:
        _plot_dir(Path(cfg.out))
    return code


def _plot_dir(out: Path) -> list[Path]:
    summaries, sweeps = harness.load_summaries(out)
    return harness.emit_plots(summaries, out, sweeps)


def cmd_plot(args) -> int:
    out = args.out if args.out is not None else Path(harness.load_config(args.config).out)
    for f in _plot_dir(out):
        print(f)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    results = run_selftest()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_METRICS


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "plot": cmd_plot, "selftest": cmd_selftest}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_METRICS


if __name__ == "__main__":
    sys.exit(main())
