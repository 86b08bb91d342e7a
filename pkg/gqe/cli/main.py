"""Command-line entry point.

Every subcommand accepts ``--config FILE`` (``key=value`` lines whose keys are
flag names), ``--seed``, ``--threads``, ``--log-level`` and ``--manifest``.
Flags given on the command line override config-file values, which override
the ``GQE_*`` settings. Exit codes: 0 success, 1 usage error, 2 data error.
"""
import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from pydantic import ValidationError

from gqe import __version__
from gqe.cli import commands
from gqe.core.config import settings
from gqe.core.errors import DataError, GQEError, UsageError
from gqe.core.logging import configure_logging
from gqe.models.qe import QEMethod
from gqe.services import run_service

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

# flags naming files read by a run; their digests go into the manifest
INPUT_FLAGS = ("input", "labels", "store", "queries", "graph", "model", "level_store", "val", "dba_store", "relevance")
NO_MANIFEST = ("replay", "history")
METHODS = [m.value for m in QEMethod]
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


class ArgumentParser(argparse.ArgumentParser):
    """Raises :class:`UsageError` instead of exiting with argparse's status 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common_flags() -> argparse.ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file; keys are flag names")
    common.add_argument("--seed", type=int, default=settings.seed, help="seed for every random draw")
    common.add_argument("--threads", type=int, default=settings.threads, help="worker threads")
    common.add_argument("--log-level", default=settings.log_level, help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--manifest", help="where to write the run manifest")
    return common


def _method_flags(parser: argparse.ArgumentParser, multi_k: bool = False) -> None:
    parser.add_argument("--method", choices=METHODS, default=QEMethod.NONE.value, help="expansion method")
    if multi_k:
        parser.add_argument("--k", type=int, nargs="+", help="neighbors per expansion; several values sweep")
    else:
        parser.add_argument("--k", type=int, help="neighbors per expansion")
    parser.add_argument("--alpha", type=float, help="similarity exponent of alphaqe and alphaqe-g")
    parser.add_argument("--levels", type=int, help="hierarchy depth of aqe-g and alphaqe-g")
    parser.add_argument("--model", help="GQE model file (gqe)")
    parser.add_argument("--graph", help="kNN graph cache; built on the fly when omitted")
    parser.add_argument("--collapsed", action="store_true", help="replace the first gqe level by the identity on the node")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="gqe", description="Query expansion over embedding stores.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    common = _common_flags()

    p = sub.add_parser("ingest", parents=[common], help="text embeddings to a binary store")
    p.add_argument("--input", required=True, help="one comma-separated embedding per line")
    p.add_argument("--labels", help="id,label file")
    p.add_argument("--out", required=True, help="binary store to write")
    p.add_argument("--raw", action="store_true", help="keep vectors unnormalized")
    p.set_defaults(handler=commands.ingest)

    p = sub.add_parser("synth", parents=[common], help="seeded clustered dataset")
    p.add_argument("--clusters", type=int, default=16)
    p.add_argument("--points-per-cluster", type=int, default=100)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--sigma", type=float, default=settings.synth_noise_sigma, help="noise standard deviation")
    p.add_argument("--queries-per-cluster", type=int, default=5, help="external queries per cluster; 0 for none")
    p.add_argument("--out", required=True, help="database store to write")
    p.add_argument("--queries-out", help="query store to write (default: <out stem>.queries<suffix>)")
    p.set_defaults(handler=commands.synth)

    p = sub.add_parser("build-graph", parents=[common], help="exact kNN graph cache")
    p.add_argument("--store", required=True)
    p.add_argument("--k", type=int, help=f"neighbors per item (default min({settings.default_k}, N-1))")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=commands.build_graph_cmd)

    p = sub.add_parser("expand", parents=[common], help="expand one query and print the vector")
    p.add_argument("--store", required=True, help="database store")
    p.add_argument("--queries", help="query store (default: the database)")
    p.add_argument("--query-id", type=int, default=0, help="row of the query store")
    p.add_argument("--query-vector", help="comma-separated query instead of a stored row")
    _method_flags(p)
    p.add_argument("--fast", action="store_true", help="precomputed-level inference (gqe)")
    p.add_argument("--level-store", help="precomputed levels for --fast")
    p.add_argument("--out", help="JSON file (default: stdout)")
    p.set_defaults(handler=commands.expand)

    p = sub.add_parser("precompute", parents=[common], help="cache per-level database embeddings")
    p.add_argument("--store", required=True)
    p.add_argument("--graph", help="kNN graph cache; built with the model's k when omitted")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=commands.precompute)

    p = sub.add_parser("dba", parents=[common], help="database-side augmentation")
    p.add_argument("--store", required=True)
    p.add_argument("--graph", help="kNN graph cache; built with --k-dba (and the model's k with --val) when omitted")
    p.add_argument("--model", required=True)
    p.add_argument("--t1", type=float, nargs="+", required=True, help="softmax temperature of level 1")
    p.add_argument("--t2", type=float, nargs="+", required=True, help="softmax temperature of every later level")
    p.add_argument("--k-dba", type=int, nargs="+", required=True, help="neighbors per database expansion")
    p.add_argument("--val", help="labelled validation queries; selects the best (t1, t2, k-dba) by gqe mAP")
    p.add_argument("--relevance", help="relevance file of the validation queries")
    p.add_argument("--report", help="where to write the grid results (default <out>.dba.json)")
    p.add_argument("--out", required=True, help="augmented store to write")
    p.set_defaults(handler=commands.dba)

    p = sub.add_parser("train", parents=[common], help="train a GQE model")
    p.add_argument("--store", required=True, help="labelled training store")
    p.add_argument("--graph", help="kNN graph cache; built with --k when omitted")
    p.add_argument("--levels", "--l", dest="levels", type=int, default=settings.default_levels)
    p.add_argument("--k", type=int, help=f"neighbors per aggregation (default min({settings.default_k}, N-1))")
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--ff-dim", type=int, default=64)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3, help="learning rate")
    p.add_argument("--weight-decay", type=float, default=1.5e-6)
    p.add_argument("--margin", type=float, default=0.71)
    p.add_argument("--negatives", type=int, default=5, help="negatives per positive")
    p.add_argument("--pool-size", type=int, default=500)
    p.add_argument("--pool-refresh", type=int, default=50, help="iterations between negative pool refreshes")
    p.add_argument("--queries-per-epoch", type=int)
    p.add_argument("--val", help="labelled validation query store; selects the best epoch")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--history", help="JSON-lines loss history (default: <out>.history.jsonl)")
    p.set_defaults(handler=commands.train_cmd)

    p = sub.add_parser("eval", parents=[common], help="mAP of a method over a query store")
    p.add_argument("--store", required=True, help="database store")
    p.add_argument("--queries", required=True, help="query store")
    _method_flags(p, multi_k=True)
    p.add_argument("--fast", action="store_true", help="precomputed-level inference (gqe)")
    p.add_argument("--dba-store", help="augmented database to rank against")
    p.add_argument("--relevance", help="one line per query of relevant database ids")
    p.add_argument("--out", help="JSON report file (default: stdout)")
    p.set_defaults(handler=commands.eval_cmd)

    p = sub.add_parser("metrics", parents=[common], help="Agreement and Diversity of expansions")
    p.add_argument("--store", required=True, help="labelled database store")
    p.add_argument("--queries", help="labelled query store (default: database rows, each without its own weight)")
    p.add_argument("--query-id", type=int, nargs="+", help="query rows (default: all)")
    _method_flags(p)
    p.set_defaults(method=QEMethod.GQE.value)
    p.add_argument("--out", help="JSON file (default: stdout)")
    p.set_defaults(handler=commands.metrics)

    p = sub.add_parser("replay", parents=[common], help="re-run the command recorded in a manifest")
    p.add_argument("manifest_file", metavar="MANIFEST")
    p.set_defaults(handler=replay)

    p = sub.add_parser("history", parents=[common], help="list runs recorded in the registry")
    p.add_argument("--command-name", dest="command_name", help="only runs of this subcommand")
    p.add_argument("--limit", type=int, default=20)
    p.set_defaults(handler=commands.history)
    return parser


def read_config(path: str) -> Dict[str, str]:
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"--config: cannot read {path}: {exc.strerror}")
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("_", "-")] = value
    return values


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise UsageError(f"unknown command {command}")


def _config_tokens(sub: argparse.ArgumentParser, values: Dict[str, str], path: str) -> List[str]:
    """Turn config entries into flag tokens placed before the command-line flags."""
    options = {}
    for action in sub._actions:
        for option in action.option_strings:
            options[option.lstrip("-")] = action
    tokens: List[str] = []
    for key, value in values.items():
        action = options.get(key)
        if action is None or key in ("config", "help"):
            raise UsageError(f"{path}: unknown key {key!r}")
        flag = f"--{key}"
        if action.nargs == 0:
            if value.lower() in ("1", "true", "yes", "on"):
                tokens.append(flag)
            elif value.lower() not in ("0", "false", "no", "off"):
                raise UsageError(f"{path}: {key} expects true or false, got {value!r}")
        elif action.nargs in ("+", "*"):
            tokens += [flag] + value.split()
        else:
            tokens += [flag, value]
    return tokens


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        tokens = _config_tokens(_subparser(parser, args.command), read_config(args.config), args.config)
        args = parser.parse_args([args.command] + tokens + list(argv[1:]))
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    if args.seed < 0:
        raise UsageError("--seed must be >= 0")
    if args.log_level.upper() not in LOG_LEVELS:
        raise UsageError(f"--log-level must be one of {', '.join(LOG_LEVELS)}")
    return args


def _flags(args: argparse.Namespace) -> Dict[str, object]:
    return {k: v for k, v in sorted(vars(args).items()) if k != "handler"}


def _run(args: argparse.Namespace, argv: List[str]) -> int:
    if args.command in NO_MANIFEST:
        return args.handler(args) or EXIT_OK
    inputs = [getattr(args, name, None) for name in INPUT_FLAGS]
    manifest = run_service.start_manifest(args.command, argv, _flags(args), inputs)
    started = time.perf_counter()
    error: Optional[BaseException] = None
    outputs: List[str] = []
    try:
        outputs = args.handler(args) or []
    except BaseException as exc:
        error = exc
        raise
    finally:
        manifest = run_service.finish_manifest(manifest, started, outputs, None if error is None else str(error))
        path = run_service.manifest_path(args.command, getattr(args, "out", None), args.manifest)
        try:
            run_service.write_manifest(manifest, path)
        except OSError as exc:
            logger.warning("could not write manifest %s: %s", path, exc)
        run_service.record_run(manifest, settings.registry_url)
    logger.info("%s finished in %.2fs", args.command, manifest.duration_seconds)
    return EXIT_OK


def cli_dispatch(argv: Sequence[str]) -> int:
    """Run one command; returns the process exit code."""
    argv = list(argv)
    try:
        args = parse_args(argv)
        configure_logging(args.log_level)
        return _run(args, argv)
    except SystemExit as exc:
        # --help and --version
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    except UsageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except ValidationError as exc:
        details = "; ".join(f"{'.'.join(str(p) for p in e['loc']) or 'value'}: {e['msg']}" for e in exc.errors())
        sys.stderr.write(f"error: invalid {exc.title}: {details}\n")
        return EXIT_USAGE
    except (GQEError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA


def replay(args: argparse.Namespace) -> int:
    manifest = run_service.load_manifest(args.manifest_file)
    logger.info("replaying %s recorded %s", manifest.subcommand, manifest.started_at.isoformat())
    code = cli_dispatch(manifest.argv)
    if code != EXIT_OK:
        raise DataError(f"replayed {manifest.subcommand} exited with {code}")
    return EXIT_OK


def main() -> int:
    return cli_dispatch(sys.argv[1:])
