"""Command line entry point: ``qmmm-defects {fit,reference,converge,ghostforce,decay} --config C --out D``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from . import experiments as ex

log = logging.getLogger("qmmm_defects")


def _reference(cfg, out):
    problem, u, info = ex.run_reference(cfg, out)
    np.save(out / "reference_u.npy", u)
    summary = {"experiment": "reference", **info}
    ex._write_summary(out, summary)
    return summary


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="qmmm-defects", description=__doc__)
    parser.add_argument("command", choices=["fit", "reference", "converge", "ghostforce", "decay"])
    parser.add_argument("--config", required=True, type=Path)
    parser.add_argument("--out", required=True, type=Path)
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    try:
        cfg = ExperimentConfig.load(args.config)
    except (OSError, ValueError, TypeError) as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return 2
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.json").write_text(cfg.to_json())

    try:
        if args.command == "fit":
            summary = ex.run_fit(cfg, args.out)[2]
            ok = True
        elif args.command == "reference":
            summary = _reference(cfg, args.out)
            ok = summary["converged"]
        elif args.command == "converge":
            _, summary = ex.run_converge(cfg, args.out, log=log.info)
            ok = summary["all_converged"] and summary.get("pass", True)
        elif args.command == "ghostforce":
            summary = ex.run_ghostforce(cfg, args.out)[0]
            ok = True
        else:
            summary = ex.run_decay(cfg, args.out)[0]
            ok = summary["reference"]["converged"] and summary.get("pass", True)
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({k: v for k, v in summary.items() if k != "rows"}, default=str, sort_keys=True))
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
