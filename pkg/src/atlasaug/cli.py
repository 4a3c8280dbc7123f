"""Command-line front end for the toy experiment pipeline.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import pipeline, synth, vtf
from .engine import NumericError
from .pipeline import ExperimentConfig, Workspace, format_report

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class UsageError(Exception):
    pass


def _build_parser() -> _Parser:
    p = _Parser(prog="atlasaug", description="one-shot segmentation via learned augmentation")
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", type=Path, default=Path("out"), help="workspace directory")
    p.add_argument("--threads", type=int, default=1)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-toy", help="generate the procedural toy corpus")
    sub.add_parser("train-spatial", help="train the spatial transform model")
    sub.add_parser("train-appearance", help="train the appearance transform model")
    sp = sub.add_parser("synth", help="synthesis utilities")
    spsub = sp.add_subparsers(dest="synth_command", required=True)
    dump = spsub.add_parser("dump", help="write synthesized examples to disk")
    dump.add_argument("--count", type=int, default=10)
    dump.add_argument("--mode", default="indep",
                      choices=["indep", "coupled", "rand-aug", "indep+rand"])
    ts = sub.add_parser("train-seg", help="train a segmenter and predict the test set")
    ts.add_argument("--mode", required=True,
                    choices=["indep", "coupled", "rand-aug", "indep+rand",
                             "sas-aug", "atlas-only", "supervised"])
    sub.add_parser("baseline-sas", help="predict the test set by label propagation")
    ev = sub.add_parser("evaluate", help="compute Dice metrics for predicted methods")
    ev.add_argument("--methods", nargs="*", default=None)
    rp = sub.add_parser("report", help="print the summary table")
    rp.add_argument("--methods", nargs="*", default=None)
    return p


def _load_config(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = ExperimentConfig()
    cfg.seed = args.seed
    cfg.threads = args.threads
    return cfg


def run_cli(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = _load_config(args)
        ws = Workspace(args.out, cfg)
        return _dispatch(args, ws)
    except (UsageError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, ValueError, vtf.VtfError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def _dispatch(args, ws: Workspace) -> int:
    cmd = args.command
    if cmd == "gen-toy":
        m = ws.gen_data()
        print(f"wrote corpus with {len(m.unlabeled)} unlabeled subjects to {ws.data_dir}")
    elif cmd == "train-spatial":
        model = ws.train_spatial()
        last = model.loss_history[-1] if model.loss_history else None
        print(f"spatial model trained; final losses {last}")
    elif cmd == "train-appearance":
        model = ws.train_appearance()
        last = model.loss_history[-1] if model.loss_history else None
        print(f"appearance model trained; final loss {last}")
    elif cmd == "synth":
        _synth_dump(args, ws)
    elif cmd == "train-seg":
        method = pipeline.MODE_TO_METHOD[args.mode]
        ws.predict_method(method)
        print(f"predictions for {method} written to {ws.pred_dir / method}")
    elif cmd == "baseline-sas":
        ws.predict_method("SAS")
        print(f"SAS predictions written to {ws.pred_dir / 'SAS'}")
    elif cmd == "evaluate":
        report = ws.evaluate(args.methods)
        print(f"metrics written to {ws.report_dir}")
        print(format_report(report))
    elif cmd == "report":
        report = ws.evaluate(args.methods)
        print(format_report(report))
    return EXIT_OK


def _synth_dump(args, ws: Workspace) -> None:
    cfg = ws.cfg
    atlas, atlas_labels, unlabeled, *_ = ws.load_corpus()
    spatial, appearance = ws.load_models()
    synthesizer = synth.Synthesizer(atlas, atlas_labels, spatial, appearance,
                                    unlabeled, cfg.rand_aug)
    mode = pipeline.MODE_TO_STREAM[args.mode]
    plans = synth.enumerate_plans(mode, len(unlabeled), cfg.seed, args.count)
    out = ws.root / "synth"
    out.mkdir(parents=True, exist_ok=True)
    for k, plan in enumerate(plans):
        ex = synthesizer.synthesize(plan)
        vtf.write_vtf(out / f"synth_{k:04d}_image.vtf", ex.image)
        vtf.write_vtf(out / f"synth_{k:04d}_labels.vtf", ex.labels.astype(np.int32))
        with open(out / f"synth_{k:04d}_provenance.json", "w") as fh:
            json.dump(asdict(ex.provenance), fh, indent=2, sort_keys=True)
            fh.write("\n")
    ws.write_config_snapshot(out)
    print(f"wrote {len(plans)} examples to {out}")


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
