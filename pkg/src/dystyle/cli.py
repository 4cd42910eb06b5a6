"""Command-line entry point.

Exit codes: 0 success, 1 user error (bad flag, config or input file),
2 internal error or a failed gradient check.
"""

from __future__ import annotations

import argparse
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from . import evalbench as E
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .gradsuite import run_suite
from .net import forward
from .trainer import run_two_stage
from .world import BINARY, DEFAULT_ATTRIBUTES, AttributeSpec, UnknownAttributeError, sample_latent, world_build

COMMANDS = ("train", "eval", "ablate", "gradcheck", "edit", "cost")


class UsageError(Exception):
    def __init__(self, message: str, parser: argparse.ArgumentParser | None = None):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self)


def _u64(text: str) -> int:
    value = int(text, 10)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed out of range: {text}")
    return value


def _bit(text: str) -> int:
    if text not in ("0", "1"):
        raise argparse.ArgumentTypeError(f"expected 0 or 1, got {text!r}")
    return int(text)


def build_parser() -> _Parser:
    parser = _Parser(prog="dystyle", description="Dynamic multi-attribute latent editing on a synthetic frozen generator.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=Path, help="run config file (key = value)")
        p.add_argument("--seed", type=_u64, help="seed override")
        p.add_argument("--out", type=Path, help="output directory")
        return p

    p = command("train", "train the editor in two stages and write checkpoints")
    p.add_argument("--stage1-steps", type=int, help="single-attribute steps")
    p.add_argument("--stage2-steps", type=int, help="multi-attribute steps")
    p.add_argument("--world-seed", type=_u64, help="seed of the frozen world")

    p = command("eval", "evaluate a checkpoint on the held-out set")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint file")
    p.add_argument("--eval-size", type=int, help="number of eval pairs")

    p = command("ablate", "train and compare ablation variants")
    p.add_argument("--variants", help="comma-separated variant tags")
    p.add_argument("--stage1-steps", type=int, help="single-attribute steps")
    p.add_argument("--stage2-steps", type=int, help="multi-attribute steps")
    p.add_argument("--world-seed", type=_u64, help="seed of the frozen world")
    p.add_argument("--eval-size", type=int, help="number of eval pairs")

    p = command("gradcheck", "finite-difference check of every loss and the forward pass")
    p.add_argument("--configs", type=int, default=50, help="random configurations per check")

    p = command("edit", "edit one sampled latent and report measured changes")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint file")
    for attr in DEFAULT_ATTRIBUTES:
        if attr.kind == BINARY:
            p.add_argument(f"--{attr.name}", type=_bit, help=f"target {attr.name} state (0 or 1)")
        else:
            p.add_argument(f"--{attr.name}", type=float, help=f"{attr.name} change in [{attr.low:g}, {attr.high:g}]")

    command("cost", "forward cost of every attribute mask against the static network")
    return parser


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for flag, key in (
        ("stage1_steps", "stage1_steps"),
        ("stage2_steps", "stage2_steps"),
        ("world_seed", "world_seed"),
        ("eval_size", "eval_size"),
        ("variants", "variants"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if args.out is not None:
        overrides["out_dir"] = str(args.out)
    if args.seed is not None:
        overrides["eval_seed" if args.command == "eval" else "seed"] = args.seed
    for key in ("stage1_steps", "stage2_steps", "eval_size"):
        if key in overrides and overrides[key] < (1 if key == "eval_size" else 0):
            raise UsageError(f"--{key.replace('_', '-')} must be positive, got {overrides[key]}")
    return RunConfig(**{**vars(cfg), **overrides})


def _world(cfg: RunConfig):
    return world_build(cfg.world_seed, cfg.world_config())


def _load(path: Path):
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    bundle = load_checkpoint(path)
    world = world_build(bundle.world_seed, bundle.world_config)
    if world.manifest_digest() != bundle.manifest_digest:
        raise E.ManifestMismatchError(f"{path} does not match the world it names")
    return bundle, world


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = _world(cfg)
    (out / "run.cfg").write_text(cfg.to_text())
    (out / "world_manifest.txt").write_text(world.manifest())
    bundle = run_two_stage(cfg.train_config(), world, out_dir=out)
    last = bundle.metrics[-1] if bundle.metrics else {}
    print(f"steps={bundle.state.step}")
    if last:
        print(f"final_total={last['total']!r}")
    print(f"checkpoint={out / 'final.dys'}")
    return 0


def _print_rows(rows):
    for r in rows:
        print(f"{r['group']},{r['attribute']},{r['metric']},{r['value']!r},{r['count']}")


def cmd_eval(args, cfg: RunConfig) -> int:
    bundle, world = _load(args.checkpoint)
    evalset = E.build_evalset(world, cfg.eval_seed, cfg.eval_size)
    rows = E.eval_control_accuracy(bundle, evalset, world)
    ident = E.eval_identity(bundle, evalset, world)
    table = E.control_table_rows(rows, ident)
    print("group,attribute,metric,value,count")
    _print_rows(table)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        E.write_rows(table, args.out / "control.csv")
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    variants = cfg.variant_list()
    for tag in variants:
        if tag not in E.VARIANTS:
            raise UsageError(f"unknown variant {tag!r}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(cfg.to_text())
    world = _world(cfg)
    evalset = E.build_evalset(world, cfg.eval_seed, cfg.eval_size)
    valset = E.build_evalset(world, cfg.eval_seed, cfg.val_size, stream=E.VAL_STREAM)
    result = E.run_ablation(variants, cfg.train_config(), world, evalset, valset, cfg.curve_every, out_dir=out)
    E.write_rows(result.table(), out / "ablation.csv")
    E.write_rows(result.curves(), out / "curves.csv")
    for row in result.table():
        print(
            f"variant={row['variant']} multi_glasses_accuracy={row.get('multi_glasses_accuracy', float('nan')):.4f} "
            f"identity={row.get('all_identity', float('nan')):.4f} val_id_plus_attr={row['val_id_plus_attr']:.4f}"
        )
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    if args.configs < 1:
        raise UsageError("--configs must be positive")

    def show(r):
        status = "PASS" if r.ok else "FAIL"
        print(f"{r.name}: {status} {r.passed}/{r.total} worst_rel_error={r.worst:.3e} seconds={r.seconds:.1f}", flush=True)

    results = run_suite(seed=cfg.seed, configs=args.configs, progress=show)
    return 0 if all(r.ok for r in results) else 2


def cmd_edit(args, cfg: RunConfig) -> int:
    bundle, world = _load(args.checkpoint)
    wc = world.config
    requested = {a.name: getattr(args, a.name, None) for a in wc.attributes}
    for name, value in requested.items():
        if value is None:
            continue
        attr = wc.attribute(name)
        if attr.kind != BINARY and not attr.low <= value <= attr.high:
            raise UsageError(f"--{name} {value:g} outside [{attr.low:g}, {attr.high:g}]")
    spec = AttributeSpec.of(wc, **requested)
    w = sample_latent(np.random.default_rng([cfg.seed, 41]), 1, wc.layers, wc.dim)
    res = forward(bundle.params, w, [spec], wc, bundle.config.net)
    f_u = E.features(world, w)
    f_m = E.features(world, res.w_hat.data)
    for attr in wc.numeric:
        delta = float(E.measure_numeric(world, attr.name, f_m)[0] - E.measure_numeric(world, attr.name, f_u)[0])
        if attr.name in spec.numeric:
            print(f"{attr.name}_target={spec.numeric[attr.name]!r}")
        print(f"{attr.name}_delta={delta!r}")
    p_u, p_m = E.measure_binary(world, f_u)[0], E.measure_binary(world, f_m)[0]
    for j, attr in enumerate(wc.binary):
        if attr.name in spec.binary:
            print(f"{attr.name}_target={spec.binary[attr.name]}")
        print(f"{attr.name}_before={int(p_u[j] > E.BINARY_THRESHOLD)}")
        print(f"{attr.name}_after={int(p_m[j] > E.BINARY_THRESHOLD)}")
        print(f"{attr.name}_prob={float(p_m[j])!r}")
    sim, _ = E.identity_similarity(world, f_u, f_m)
    print(f"identity_similarity={float(sim[0])!r}")
    return 0


def cmd_cost(args, cfg: RunConfig) -> int:
    rows = E.cost_report(cfg.world_config(), cfg.train_config().net)
    print("mask,active,cost,static_cost,ratio")
    for r in rows:
        print(f"{r['mask']},{r['active']},{r['cost']},{r['static_cost']},{r['ratio']:.6f}")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        E.write_rows(rows, args.out / "cost.csv")
    return 0


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "edit": cmd_edit,
    "cost": cmd_cost,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        cfg = _run_config(args)
        return HANDLERS[args.command](args, cfg)
    except UsageError as exc:
        (exc.parser or parser).print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, IsADirectoryError) as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, E.ManifestMismatchError, UnknownAttributeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        print("internal error:", file=sys.stderr)
        traceback.print_exc(file=sys.stderr)
        return 2


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
