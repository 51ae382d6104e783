"""Command-line entry point: ``himemformer {generate,train,eval,ablate,gradcheck}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import Config, ConfigError, load_config, override
from .evaluate import AXES, EvaluationError, ablation_grid, evaluate, scenario_data, write_config_echo
from .synthetic import SCENARIOS, FormatError, read_dataset, write_dataset
from .tensor import NumericError
from .train import CheckpointError, DataError, load_checkpoint, save_checkpoint, train, write_curve

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4

log = logging.getLogger("himemformer")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> Config:
    cfg = load_config(args.config) if getattr(args, "config", None) else Config()
    if getattr(args, "set", None):
        cfg = override(cfg, args.set)
    return cfg


def _split_dir(root: Path, split: str) -> Path:
    sub = root / split
    return sub if sub.is_dir() else root


def cmd_generate(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.replace(data_seed=args.seed)
    out = Path(args.out)
    train_eps, eval_eps = scenario_data(cfg, args.scenario)
    write_dataset(train_eps, out / "train")
    write_dataset(eval_eps, out / "eval")
    write_config_echo(cfg.replace(scenario=args.scenario), out)
    print(f"wrote {len(train_eps)} train and {len(eval_eps)} eval {args.scenario} episodes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    episodes = read_dataset(_split_dir(Path(args.data), "train"))
    ckpt = Path(args.out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    result = train(episodes, cfg, max_steps=args.max_steps)
    save_checkpoint(result.params, cfg, ckpt)
    curve_path = ckpt.with_suffix(".loss.csv")
    write_curve(result.curve, curve_path)
    write_config_echo(cfg, ckpt.parent)
    if args.emit_plot:
        _plot_curve(result.curve, ckpt.with_suffix(".loss.svg"))
    last = result.curve[-1] if result.curve else (0, 0.0, 0.0, 0.0)
    print(f"trained {last[0]} steps, final loss {last[3]:.4f}; checkpoint {ckpt}, curve {curve_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, cfg = load_checkpoint(args.ckpt)
    if args.stride is not None:
        cfg = cfg.replace(eval_stride=args.stride)
    episodes = read_dataset(_split_dir(Path(args.data), "eval"))
    report = evaluate(params, episodes, cfg)
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(path)
    report.write_offsets_csv(path.with_suffix(".offsets.csv"))
    write_config_echo(cfg, path.parent)
    print(report.table())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    scenarios = args.scenarios or list(SCENARIOS)
    rows = ablation_grid(cfg, args.axis, scenarios, out_csv=out, max_steps=args.max_steps)
    write_config_echo(cfg, out.parent)
    for r in rows:
        cells = "  ".join(f"{s}={r[s]:.3f}" if r[s] != "" else f"{s}=-" for s in scenarios)
        print(f"{args.axis}={r['value']}: {cells} {r['reason']}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    report = run_suite(args.seed)
    worst = max(report.values())
    for block, err in report.items():
        print(f"{block:<28} {err:.3e}")
    print(f"{'max':<28} {worst:.3e}")
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_NUMERIC


def _plot_curve(curve, path) -> None:
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [c[0] for c in curve]
    for idx, label in ((1, "coarse"), (2, "fine"), (3, "total")):
        ax.plot(steps, [c[idx] for c in curve], label=label, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="himemformer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    g = sub.add_parser("generate", help="write synthetic HME1 episodes")
    g.add_argument("--scenario", choices=sorted(SCENARIOS), required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    with_config(g)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on DIR/train")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--emit-plot", action="store_true", help="also write an SVG loss plot")
    with_config(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-frame mAP on DIR/eval")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="CSV output path")
    e.add_argument("--stride", type=int, help="evaluate every n-th anchor frame")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="memory-size / sampling-rate / context ablation grid")
    a.add_argument("--axis", choices=sorted(AXES), required=True)
    a.add_argument("--out", default="ablation.csv")
    a.add_argument("--scenarios", nargs="+", choices=sorted(SCENARIOS))
    a.add_argument("--max-steps", type=int)
    with_config(a)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, EvaluationError, FormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
