"""
Command-line entry point.
Builds the argument parser, configures logging and maps every engine error
to a JSON message on stderr and a process exit code.
"""
import argparse
import json
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

from .commands import routes
from .commands.dependencies import LOG_FORMAT, config_error
from .config import settings
from .errors import DataError, OscillatorError

logger = logging.getLogger(__name__)


_console_handler: Optional[logging.Handler] = None


def configure_logging(level: str = settings.log_level) -> None:
    """Console logging on stderr; stdout carries only command results.

    Each call replaces the console handler of the previous one, so the
    handler always writes to the current ``sys.stderr``.
    """
    global _console_handler
    root = logging.getLogger()
    if _console_handler is not None:
        root.removeHandler(_console_handler)
    _console_handler = logging.StreamHandler(sys.stderr)
    _console_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(_console_handler)
    root.setLevel(getattr(logging, level.upper(), logging.INFO))
    logging.captureWarnings(True)


def _add_output(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", default=settings.output_dir, help="Output directory (default: %(default)s)")


def _add_experiment(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Flat JSON run configuration")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="Override one configuration key; repeatable")
    _add_output(parser)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oscgnn", description=settings.app_name)
    parser.add_argument("--log-level", default=settings.log_level)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="Integrate Stuart-Landau, Kuramoto or harmonic dynamics")
    sim.add_argument("--system", choices=["sl", "kuramoto", "harmonic"], required=True)
    sim.add_argument("--graph", default="none", help="none | ring:N | complete:N | file:PATH")
    sim.add_argument("--params", required=True, help="alpha,beta,omega,gamma[,kappa] | omega | zeta,omega0")
    sim.add_argument("--tmax", type=float, default=20.0)
    sim.add_argument("--dt", type=float, default=settings.sim_dt, help="Sample spacing and fixed step size")
    sim.add_argument("--solver", choices=["rk45", "imex", "euler", "symplectic"], default="rk45")
    sim.add_argument("--cubic-method", choices=["newton", "cardano"], default="newton")
    sim.add_argument("--nodes", type=int, default=1, help="Node count when --graph none")
    sim.add_argument("--r0", type=float, default=1.0, help="Initial magnitude (sl)")
    sim.add_argument("--seed", type=int, default=0)
    _add_output(sim)
    sim.set_defaults(handler=routes.cmd_simulate)

    train = sub.add_parser("train", help="Train one model and save metrics and a checkpoint")
    _add_experiment(train)
    train.set_defaults(handler=routes.cmd_train)

    ev = sub.add_parser("eval", help="Evaluate a saved checkpoint")
    ev.add_argument("--checkpoint", required=True)
    _add_experiment(ev)
    ev.set_defaults(handler=routes.cmd_eval)

    grad = sub.add_parser("gradcheck", help="Finite-difference check of end-to-end gradients")
    grad.add_argument("--family", choices=["baseline", "graphcon", "kuramoto", "slgnn"], default="slgnn")
    grad.add_argument("--coupling", choices=["gcn", "gat", "tran"], default="gcn")
    grad.add_argument("--nodes", type=int, default=12)
    grad.add_argument("--features", type=int, default=3)
    grad.add_argument("--classes", type=int, default=3)
    grad.add_argument("--hidden", type=int, default=4)
    grad.add_argument("--heads", type=int, default=2)
    grad.add_argument("--attn-dim", type=int, default=2)
    grad.add_argument("--layers", type=int, default=2)
    grad.add_argument("--dt", type=float, default=settings.train_dt)
    grad.add_argument("--train-oscillator", action="store_true")
    grad.add_argument("--seed", type=int, default=0)
    _add_output(grad)
    grad.set_defaults(handler=routes.cmd_gradcheck)

    depth = sub.add_parser("sweep-depth", help="Train one model per depth")
    depth.add_argument("--depths", required=True, help="Comma-separated layer counts")
    _add_experiment(depth)
    depth.set_defaults(handler=routes.cmd_sweep_depth)

    perturb = sub.add_parser("perturb", help="Accuracy under random fake edges")
    perturb.add_argument("--edges", required=True, help="Comma-separated fake-edge counts")
    perturb.add_argument("--trials", type=int, default=10)
    perturb.add_argument("--jobs", type=int, default=settings.jobs)
    _add_experiment(perturb)
    perturb.set_defaults(handler=routes.cmd_perturb)

    tt = sub.add_parser("ttest", help="One-tailed t-score between two result summaries")
    tt.add_argument("--mu1", type=float, required=True)
    tt.add_argument("--s1", type=float, required=True)
    tt.add_argument("--mu2", type=float, required=True)
    tt.add_argument("--s2", type=float, required=True)
    tt.add_argument("--n", type=int, required=True)
    _add_output(tt)
    tt.set_defaults(handler=routes.cmd_ttest)

    sbm = sub.add_parser("make-sbm", help="Write a synthetic stochastic-block-model bundle")
    sbm.add_argument("--blocks", type=int, default=2)
    sbm.add_argument("--nodes-per-block", type=int, default=50)
    sbm.add_argument("--p-in", type=float, default=0.2)
    sbm.add_argument("--p-out", type=float, default=0.02)
    sbm.add_argument("--noise", type=float, default=0.5)
    sbm.add_argument("--train-per-class", type=int, default=20)
    sbm.add_argument("--val-count", type=int, default=20)
    sbm.add_argument("--seed", type=int, default=0)
    _add_output(sbm)
    sbm.set_defaults(handler=routes.cmd_make_sbm)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        result = args.handler(args)
    except OscillatorError as exc:
        logger.error("%s: %s", type(exc).__name__, exc.message)
        print(json.dumps(exc.to_dict(), sort_keys=True), file=sys.stderr)
        return exc.exit_code
    except ValidationError as exc:
        err = config_error(exc)
        print(json.dumps(err.to_dict(), sort_keys=True), file=sys.stderr)
        return err.exit_code
    except OSError as exc:
        err = DataError(f"I/O failure: {exc}", path=getattr(exc, "filename", None))
        print(json.dumps(err.to_dict(), sort_keys=True), file=sys.stderr)
        return err.exit_code
    except Exception as exc:
        logger.error("Unhandled exception: %s", exc, exc_info=True)
        print(json.dumps({"error": "InternalError", "message": str(exc), "details": {}}), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
