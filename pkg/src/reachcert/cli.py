"""Command-line front end for synthesis, verification, and analysis runs.

Heavy modules are imported inside the command handlers so that thread-count
environment variables can take effect before the numerics stack loads.  All
file outputs land under the directory given by ``--out``; paths are never
written anywhere else.

Exit codes: 0 on success (Verified / Synthesized), 2 when verification or
synthesis fails or times out, 1 for usage and I/O faults.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

THREADS_ENV = "REACHCERT_THREADS"
_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

# per-dimension default resolution for export-grid, chosen to keep files small
_GRID_RES = {1: 1001, 2: 101, 3: 31, 4: 15}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _apply_threads(threads: int | None) -> None:
    n = threads if threads is not None else os.environ.get(THREADS_ENV)
    if n is None:
        return
    for var in _THREAD_VARS:
        os.environ.setdefault(var, str(n))


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config_file(path: str) -> dict:
    text = Path(path).read_text()
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib

        return tomllib.loads(text)
    return json.loads(text)


def _make_runconfig(args):
    """Profile defaults, overlaid by the config file, overlaid by flags."""
    from .certificate import CertMode
    from .orchestrator import RunConfig, desk_profile, paper_profile

    over: dict = {}
    if getattr(args, "config", None):
        over.update(_load_config_file(args.config))
    system = over.pop("system", None)
    if getattr(args, "system", None):
        system = args.system
    if system is None:
        raise UsageError("the --system flag (or a config file naming one) is required")
    known = set(RunConfig.__dataclass_fields__)
    for key in over:
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
    if "mode" in over:
        over["mode"] = CertMode(over["mode"])
    for key in ("v_hidden", "pi_hidden"):
        if key in over:
            over[key] = tuple(over[key])
    for flag in ("rho", "seed", "timeout", "mesh"):
        value = getattr(args, flag, None)
        if value is not None:
            over[flag] = value
    if getattr(args, "mode", None) is not None:
        over["mode"] = CertMode(args.mode)
    profile = paper_profile if getattr(args, "profile", "desk") == "paper" else desk_profile
    return profile(system, **over)


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_trace(path: Path, trace) -> None:
    from .learner import LossTraceRow

    lines = [LossTraceRow.CSV_HEADER]
    lines += [row.csv_row() for row in trace]
    path.write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# command handlers


def _cmd_list_systems(args) -> int:
    from .systems import benchmarks

    for name in benchmarks():
        print(name)
    return 0


def _cmd_pretrain(args) -> int:
    import numpy as np

    from . import nets
    from .orchestrator import pretrain_policy
    from .systems import get_system

    cfg = _make_runconfig(args)
    out = _outdir(args)
    system = get_system(cfg.system)
    # same stream layout as the synthesis loop, so a standalone pretrain
    # reproduces the policy an end-to-end run would have trained
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(4)[0])
    steps = args.steps if args.steps is not None else cfg.pretrain_steps
    horizon = args.horizon if args.horizon is not None else cfg.pretrain_horizon
    pi = pretrain_policy(
        system,
        steps,
        horizon,
        rng,
        hidden=cfg.pi_hidden,
        batch=cfg.pretrain_batch,
        lr=cfg.pretrain_lr,
        lip_target=cfg.policy_lip_target,
    )
    nets.save(pi, out / "policy.json")
    print(f"wrote {out / 'policy.json'}")
    return 0


def _cmd_synthesize(args) -> int:
    from . import nets
    from .orchestrator import Outcome, cegis, run_manifest

    cfg = _make_runconfig(args)
    out = _outdir(args)
    policy = nets.load(args.policy) if args.policy else None
    certificate = nets.load(args.certificate) if args.certificate else None
    res = cegis(cfg, policy=policy, certificate=certificate)
    _write_json(out / "manifest.json", run_manifest(cfg, res))
    if res.certificate is not None:
        nets.save(res.certificate, out / "certificate.json")
    if res.policy is not None:
        nets.save(res.policy, out / "policy.json")
    _write_trace(out / "loss_trace.csv", res.trace)
    print(
        f"{res.outcome.value}: {res.iterations} iterations, "
        f"{res.wall_time:.1f}s wall"
    )
    if res.estimate is not None:
        print(f"empirical reach-avoid: {res.estimate:.4f} +- {res.ci:.4f}")
    return 0 if res.outcome is Outcome.SYNTHESIZED else 2


def _cmd_verify(args) -> int:
    from dataclasses import asdict

    from . import nets
    from .certificate import Spec
    from .systems import get_system, make_partition
    from .verifier import Verdict, verify

    cfg = _make_runconfig(args)
    out = _outdir(args)
    V = nets.load(args.certificate)
    pi = nets.load(args.policy)
    system = get_system(cfg.system)
    spec = Spec(cfg.rho, cfg.mode)
    noise = make_partition(system.noise_dim, cfg.noise_cells)
    with open(out / "verdicts.jsonl", "w") as fh:
        outcome = verify(
            V,
            pi,
            system,
            noise,
            spec,
            cfg.verifier_config(cfg.timeout),
            verdict_sink=lambda line: fh.write(line + "\n"),
        )
    report = {
        "system": cfg.system,
        "rho": cfg.rho,
        "mode": cfg.mode.value,
        "verdict": outcome.verdict.value,
        "counterexamples": outcome.counterexamples.total,
        "stats": asdict(outcome.stats),
    }
    _write_json(out / "verify_report.json", report)
    print(f"{outcome.verdict.value}: {outcome.stats.cells_checked} cells checked")
    return 0 if outcome.verdict is Verdict.VERIFIED else 2


def _cmd_lipschitz(args) -> int:
    import numpy as np

    from . import nets
    from .bounds import LipschitzReport, lipschitz_report
    from .systems import get_system

    cfg = _make_runconfig(args)
    out = _outdir(args)
    system = get_system(cfg.system)
    rng = np.random.default_rng(cfg.seed)
    lines = [LipschitzReport.CSV_HEADER]
    for path in args.models:
        net = nets.load(path)
        report = lipschitz_report(
            net, system.X, args.trials, rng, net_id=Path(path).stem
        )
        lines.append(report.csv_row())
    (out / "lipschitz.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {out / 'lipschitz.csv'}")
    return 0


def _cmd_simulate(args) -> int:
    import numpy as np

    from . import nets
    from .certificate import Spec
    from .orchestrator import simulate_reach_avoid
    from .systems import get_system

    cfg = _make_runconfig(args)
    pi = nets.load(args.policy)
    system = get_system(cfg.system)
    spec = Spec(cfg.rho, cfg.mode)
    rng = np.random.default_rng(cfg.seed)
    est, ci = simulate_reach_avoid(
        system, pi, spec, args.episodes, args.horizon, rng
    )
    print(f"estimate {est:.6f} +- {ci:.6f} over {args.episodes} episodes")
    if args.out:
        out = _outdir(args)
        _write_json(
            out / "simulate.json",
            {
                "system": cfg.system,
                "rho": cfg.rho,
                "episodes": args.episodes,
                "horizon": args.horizon,
                "seed": cfg.seed,
                "estimate": est,
                "ci_half_width": ci,
            },
        )
    return 0


def _cmd_export_grid(args) -> int:
    import numpy as np

    from . import nets
    from .nets import forward
    from .systems import get_system

    system = get_system(args.system) if args.system else None
    if system is None:
        raise UsageError("the --system flag is required")
    net = nets.load(args.certificate)
    out = _outdir(args)
    dim = system.state_dim
    res = args.resolution if args.resolution is not None else _GRID_RES[dim]
    axes = [np.linspace(system.X.lo[i], system.X.hi[i], res) for i in range(dim)]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    values = forward(net, pts)[:, 0]
    header = ",".join(f"x{i + 1}" for i in range(dim)) + ",v"
    lines = [header]
    for row, v in zip(pts, values):
        lines.append(",".join(repr(float(c)) for c in row) + f",{float(v)!r}")
    (out / "grid.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {out / 'grid.csv'} ({len(pts)} points)")
    return 0


# --------------------------------------------------------------------------
# parser


def _add_common(p, *, system=True, rho=True, config=True, out_required=True):
    if system:
        p.add_argument("--system", help="benchmark name (see list-systems)")
    if rho:
        p.add_argument("--rho", type=float, help="reach-avoid probability bound")
        p.add_argument(
            "--mode", choices=["log-rasm", "rasm"], help="certificate flavor"
        )
    p.add_argument("--seed", type=int, help="run seed")
    if config:
        p.add_argument("--config", help="TOML or JSON config file")
        p.add_argument(
            "--profile",
            choices=["desk", "paper"],
            default="desk",
            help="hyperparameter profile the config and flags override",
        )
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--timeout", type=float, help="wall-clock budget in seconds")


def build_parser() -> _Parser:
    root = _Parser(prog="reachcert", description=__doc__.split("\n\n")[0])
    root.add_argument(
        "--threads",
        type=int,
        help=f"cap worker threads (default from ${THREADS_ENV})",
    )
    sub = root.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("list-systems", help="print the available benchmarks")
    p.set_defaults(handler=_cmd_list_systems)

    p = sub.add_parser("pretrain", help="train an input policy through the dynamics")
    _add_common(p, rho=False)
    p.add_argument("--steps", type=int, help="gradient steps")
    p.add_argument("--horizon", type=int, help="rollout length")
    p.set_defaults(handler=_cmd_pretrain)

    p = sub.add_parser("synthesize", help="run the full learner-verifier loop")
    _add_common(p)
    p.add_argument("--policy", help="initial policy model file")
    p.add_argument("--certificate", help="initial certificate model file")
    p.set_defaults(handler=_cmd_synthesize)

    p = sub.add_parser("verify", help="check a certificate/policy pair formally")
    _add_common(p)
    p.add_argument("--policy", required=True, help="policy model file")
    p.add_argument("--certificate", required=True, help="certificate model file")
    p.add_argument("--mesh", type=float, help="initial grid mesh")
    p.set_defaults(handler=_cmd_verify)

    p = sub.add_parser("lipschitz", help="write a Lipschitz bound report CSV")
    _add_common(p, rho=False)
    p.add_argument("models", nargs="+", help="model files to report on")
    p.add_argument("--trials", type=int, default=10_000, help="sampling trials")
    p.set_defaults(handler=_cmd_lipschitz)

    p = sub.add_parser("simulate", help="estimate the reach-avoid probability")
    _add_common(p, out_required=False)
    p.add_argument("--policy", required=True, help="policy model file")
    p.add_argument("--episodes", type=int, default=10_000)
    p.add_argument("--horizon", type=int, default=500)
    p.set_defaults(handler=_cmd_simulate)

    p = sub.add_parser(
        "export-grid", help="evaluate a certificate on a regular grid as CSV"
    )
    p.add_argument("--system", help="benchmark name")
    p.add_argument("--certificate", required=True, help="certificate model file")
    p.add_argument("--resolution", type=int, help="points per axis")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=_cmd_export_grid)

    return root


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    if getattr(args, "command", None) is None:
        print(build_parser().format_usage(), file=sys.stderr)
        return 1
    _apply_threads(args.threads)
    try:
        return args.handler(args)
    except UsageError as exc:
        print(f"{exc}\n{build_parser().format_usage()}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


run = main


if __name__ == "__main__":
    sys.exit(main())
