import argparse
import logging
import sys

from commands import EXIT_USAGE
from commands.cmd_capacity import cmd_capacity
from commands.cmd_reliability import cmd_reliability
from commands.cmd_simulate import cmd_simulate
from commands.cmd_verify_examples import cmd_verify_examples
from services.errors import ReliabilityError
from utils.config import DEFAULT_SETTINGS, RunConfig, SolverSettings
from utils.logs import configure_logging

logger = logging.getLogger(__name__)

COMMANDS = {
    "capacity": cmd_capacity,
    "reliability": cmd_reliability,
    "simulate": cmd_simulate,
    "verify-examples": cmd_verify_examples,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feedback-reliability",
        description="Capacity, reliability function and two-phase feedback simulation for cost-constrained DMCs.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG")
    parser.add_argument("--threads", type=int, default=None, help="simulator worker threads (overrides FE_THREADS)")
    parser.add_argument("--tol-ba", type=float, default=DEFAULT_SETTINGS.ba_tol, help="Blahut-Arimoto duality gap")
    parser.add_argument("--tol-golden", type=float, default=DEFAULT_SETTINGS.golden_tol, help="eta search bracket width")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=None, help="output file (stdout when omitted)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("--seed", type=int, default=0)

    channel = argparse.ArgumentParser(add_help=False)
    channel.add_argument(
        "--channel", required=True, help="JSON channel file or built-in: bsc(a), example1(a), example2, zchannel(a)"
    )

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("capacity", parents=[common, channel], help="solve C(P) and its landmarks")

    rel = sub.add_parser("reliability", parents=[common, channel], help="E(r, P) over a rate grid")
    rel.add_argument("--power", type=float, required=True)
    rel.add_argument("--rate", type=float, default=None)
    rel.add_argument("--rate-grid", default=None, help="lo:hi:n")
    rel.add_argument("--append-limit", action="store_true", help="append the r = C(P) limit point")

    sim = sub.add_parser("simulate", parents=[common, channel], help="simulate the two-phase scheme")
    sim.add_argument("--power", type=float, required=True)
    sim.add_argument("--rate", type=float, required=True)
    sim.add_argument("--ell", type=int, required=True)
    sim.add_argument("--eta", type=float, default=None, help="phase split; the optimal split when omitted")
    sim.add_argument("--trials", type=int, default=10_000)
    sim.add_argument("--kappa", type=float, default=0.1, help="confirmation threshold slack")
    sim.add_argument("--m-cap", type=int, default=4096)
    sim.add_argument("--verify", action="store_true", help="attach the converse report")

    ver = sub.add_parser("verify-examples", parents=[common], help="recompute the worked examples")
    ver.add_argument("--alpha", type=float, default=0.1)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    solver = SolverSettings(ba_tol=args.tol_ba, golden_tol=args.tol_golden)
    fields = {
        name: getattr(args, name)
        for name in (
            "power",
            "rate",
            "rate_grid",
            "ell",
            "eta",
            "trials",
            "kappa",
            "m_cap",
            "verify",
            "alpha",
            "append_limit",
        )
        if hasattr(args, name)
    }
    return RunConfig(
        command=args.command,
        channel=getattr(args, "channel", "example1"),
        seed=args.seed,
        out=args.out,
        format=args.format,
        threads=args.threads,
        solver=solver,
        **fields,
    )


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        config = config_from_args(args)
        return COMMANDS[config.command](config)
    except (ReliabilityError, OSError) as exc:
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
