"""``fldm`` command line.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
failure (including sweeps that finished with error rows). Failures print a
one-line JSON record to stderr and, when the output directory is known,
write it to ``<out>/error.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config, parse_seeds, validate
from .runner import COMMANDS

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("fldm")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fldm", description="Latent-fusion video editing experiments on a toy world.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "edit": "invert, fuse and score the source video of every seed",
        "sweep-alpha": "vary the initial fusion ratio",
        "sweep-tau": "vary the fusion start step",
        "ablate-schedule": "fixed vs linear-to-one alpha update",
        "baselines": "video-only, image-only and fused rows",
        "train": "train the toy denoisers and save weights",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", type=Path, help="JSON experiment config (defaults when omitted)")
        sp.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        sp.add_argument("--seeds", help='seed list, e.g. "0-19" or "1,4,9"')
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for sweep cells")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def _emit_error(kind: str, exc: BaseException, command: str | None, out: Path | None, code: int) -> int:
    record = {"error": kind, "type": type(exc).__name__, "message": str(exc),
              "command": command, "exit_code": code}
    line = json.dumps(record)
    print(line, file=sys.stderr)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(line + "\n")
        except OSError:
            pass
    return code


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else validate(ExperimentConfig())
    if args.seeds:
        cfg = validate(cfg.with_seeds(parse_seeds(args.seeds)))
    if args.out:
        cfg = cfg.with_output_dir(args.out)
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    return cfg


def main(argv: list[str] | None = None) -> int:
    out: Path | None = None
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        out = args.out
        cfg = resolve_config(args)
        out = Path(cfg.output_dir)
    except ConfigError as exc:
        return _emit_error("validation", exc, command, out, EXIT_VALIDATION)

    try:
        result = COMMANDS[command](cfg, jobs=args.jobs)
    except ConfigError as exc:
        return _emit_error("validation", exc, command, out, EXIT_VALIDATION)
    except Exception as exc:  # noqa: BLE001 - every failure gets a record
        log.debug("command failed", exc_info=True)
        return _emit_error("runtime", exc, command, out, EXIT_RUNTIME)

    for f in result.files:
        log.info("wrote %s", f)
    if result.n_errors:
        err = RuntimeError(f"{result.n_errors} cell(s) failed; see the error column")
        return _emit_error("cells", err, command, out, EXIT_RUNTIME)
    print(json.dumps({"command": command, "fingerprint": cfg.fingerprint(),
                      "out": str(out), "files": len(result.files)}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
