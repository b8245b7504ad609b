"""Command-line runner.

Exit codes: 0 when every hard invariant holds, 2 for configuration or argument
problems, 3 for solver and precondition failures, 4 when an invariant fails.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..errors import ForwardFbsdeError
from ..fbsde.export import write_json
from . import config as C
from .pipeline import Context, finalize, run

EXIT = {"schema": 2, "solver": 3, "invariant": 4}

# what each subcommand runs, in order; ``report`` follows task.operations
PLANS = {
    "ergodic": ["ergodic"],
    "primal": ["ergodic", "primal"],
    "dual": ["ergodic", "primal", "dual"],
    "oce": ["ergodic", "oce"],
    "verify": ["ergodic", "primal", "verify"],
}
COMMANDS = [*PLANS, "report"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="forward-fbsde", description="Forward performance FBSDE solvers and checks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="scenario JSON file or bundled scenario name")
        s.add_argument("--out-dir", default="out", type=Path)
        s.add_argument("--seed", type=int, default=None, help="overrides numerics.seed")
        s.add_argument("--threads", type=int, default=1)
    p.add_argument("--list-scenarios", action="version", version="\n".join(C.bundled_names()),
                   help="print bundled scenario names and exit")
    return p


def _operations(command: str, cfg: dict) -> list[str]:
    if command == "report":
        ops = list(cfg["task"]["operations"])
        order = ["ergodic", "primal", "dual", "oce", "verify"]
        return sorted(set(ops), key=order.index)
    plan = PLANS[command]
    if command == "oce" or cfg["task"]["regime"] != "decoupling":
        return plan
    # the decoupling field comes from a named family; the ergodic solve is only needed for the exponential one
    fam = cfg["numerics"]["decoupling"]["family"]
    return [op for op in plan if op != "ergodic" or fam == "exponential"]


def _envelope(cfg: dict, command: str, ops: list[str], ctx: Context | None) -> dict:
    out = {
        "scenario": cfg.get("name", cfg["_meta"]["label"]),
        "command": command,
        "operations": ops,
        "seed": C.np_seed(cfg),
        "config_hash": C.config_hash(cfg),
        "input_hashes": C.input_hashes(cfg),
    }
    if ctx is not None:
        out["results"] = ctx.results
        out["failures"] = [f.to_dict() for f in ctx.failures]
        out["passed"] = not ctx.failures
    return out


def execute(command: str, config: str, out_dir: Path, seed: int | None = None, threads: int = 1) -> int:
    cfg = None
    ctx = None
    ops: list[str] = []
    try:
        cfg = C.load(config, seed)
        ops = _operations(command, cfg)
        ctx = Context(cfg, out_dir, threads=threads)
        run(ctx, ops)
        write_json(_envelope(cfg, command, ops, ctx), ctx.out / f"{command}.json")
        finalize(ctx)
    except ForwardFbsdeError as exc:
        code = EXIT.get(exc.category, 3)
        if ctx is not None and cfg is not None:
            env = _envelope(cfg, command, ops, ctx)
            env["error"] = {"category": exc.category, "where": exc.where(), "message": str(exc)}
            if exc.category == "invariant":
                env["error"]["statistic"] = exc.statistic
            write_json(env, ctx.out / f"{command}.json")
        if exc.category == "schema":
            print(f"configuration error:\n{exc}", file=sys.stderr)
        elif exc.category == "invariant":
            print(f"invariant failure in {exc.where()}: {exc}; statistic = {exc.statistic!r}", file=sys.stderr)
            for f in ctx.failures if ctx is not None else []:
                print(f"  {f.check}: statistic={f.statistic!r} threshold={f.threshold!r}", file=sys.stderr)
        else:
            print(f"solver error in {exc.where()}: {exc}", file=sys.stderr)
        return code
    except (ArithmeticError, ValueError, MemoryError) as exc:
        stage = ops[len(ctx.results)] if ctx is not None and len(ctx.results) < len(ops) else "run"
        print(f"solver error in cli.{stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    print(f"{command}: ok ({', '.join(ops)}) -> {out_dir / (command + '.json')}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("forward-fbsde: error: --threads must be positive", file=sys.stderr)
        return 2
    return execute(args.command, args.config, args.out_dir, args.seed, args.threads)


__all__ = ["main", "execute", "build_parser", "EXIT"]
