"""Command-line entry point: ``deepsup <subcommand> [--config PATH] [--seed N] [--out DIR] [--workers N]``.

On failure the last line on stderr is a JSON object
``{"error": <kind>, "message": <text>}`` and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Optional, Sequence

from ..autodiff import load_checkpoint
from ..data import Dataset
from ..network import init_network, make_scheme, predict, train
from ..shapefit import PCAShapeModel
from .config import RunConfig, load_config
from .runner import (
    _atomic_write,
    build_dataset,
    compare_schemes,
    curve_svg_from_rows,
    evaluate,
    format_rows,
    load_splits,
    quotas_for,
    read_rows,
    restrict,
    run_matrix,
)
from .tasks import build_shape_model, fit_dataset, genprob_report

log = logging.getLogger("deepsup")


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seeds=(args.seed,), data_seed=args.seed if args.cmd == "gen-data" else cfg.data_seed)
    return cfg


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    splits = build_dataset(cfg, args.out, args.workers)
    for name, ds in splits.items():
        print(f"{name}: {len(ds)} samples -> {os.path.join(args.out, name + '.dsd')}")


def cmd_train(args) -> None:
    cfg = _config(args)
    os.makedirs(args.out, exist_ok=True)
    splits = load_splits(cfg, args.out, args.workers)
    h = cfg.hierarchy()
    seed = cfg.seeds[0]
    scheme = make_scheme(args.scheme, h, cfg.arch.conv_layers)
    net = init_network(cfg.arch, scheme, h, seed)
    variant = cfg.variants[0]
    tc = replace(cfg.train, seed=seed, quotas=quotas_for(cfg.train, variant.types),
                 checkpoint_path=os.path.join(args.out, "checkpoint.bin"))
    net, hist = train(net, restrict(splits["train"], variant.types), splits.get("val"), h, tc)
    hist.write_csv(os.path.join(args.out, "history.csv"))
    print(f"trained {args.scheme} seed {seed}: {hist.steps} steps, lr drops at epochs {hist.lr_drops}")


def cmd_eval(args) -> None:
    cfg = _config(args)
    h = cfg.hierarchy()
    scheme = make_scheme(args.scheme, h, cfg.arch.conv_layers)
    net = init_network(cfg.arch, scheme, h, 0)
    net.load_state(load_checkpoint(args.checkpoint))
    test = Dataset.load(args.data)
    rows = [dict(r, scheme=args.scheme, seed=cfg.seeds[0]) for r in evaluate(predict(net, test.images), scheme, test, cfg)]
    text = format_rows(rows)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _atomic_write(os.path.join(args.out, "metrics.csv"), text)
    sys.stdout.write(text)


def cmd_run_matrix(args) -> None:
    cfg = _config(args)
    res = run_matrix(cfg, args.out, args.workers)
    print(f"{len(res.cells)} cells ({sum(c.status == 'trained' for c in res.cells)} trained, "
          f"{sum(c.status == 'skipped' for c in res.cells)} resumed, {len(res.failures)} failed)")
    print(f"results: {res.csv_path}")
    with open(res.report_path) as fh:
        sys.stdout.write(fh.read())
    if res.failures:
        raise RuntimeError(f"{len(res.failures)} cells failed; see {res.report_path}")


def cmd_fit_shape(args) -> None:
    data = Dataset.load(args.data)
    if args.model and os.path.exists(args.model):
        model = PCAShapeModel.load(args.model)
    else:
        if not args.train_data:
            raise UsageError("no shape model: pass --model FILE or --train-data DATASET to build one")
        model = build_shape_model(Dataset.load(args.train_data), args.components)
        if args.model:
            model.save(args.model)
    text = fit_dataset(data, model, args.limit)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _atomic_write(os.path.join(args.out, "fits.csv"), text)
    sys.stdout.write(text)


def cmd_genprob(args) -> None:
    table, verdict, ok = genprob_report()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _atomic_write(os.path.join(args.out, "genprob.csv"), table)
        _atomic_write(os.path.join(args.out, "genprob.txt"), verdict)
    sys.stdout.write(verdict)
    if not ok:
        raise RuntimeError("monotonicity or null-effect check failed")


def cmd_plot(args) -> None:
    rows = read_rows(args.results)
    svg = curve_svg_from_rows(rows, args.metric, args.occlusion_type)
    path = args.out if args.out.endswith(".svg") else os.path.join(args.out, "pck_curve.svg")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    _atomic_write(path, svg)
    print(path)


def cmd_report(args) -> None:
    rows = read_rows(args.results)
    cmp = compare_schemes(rows, args.metric, args.alpha, args.occlusion_type, not args.lower_is_better)
    text = cmp.text()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _atomic_write(os.path.join(args.out, "report.txt"), text)
    sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deepsup", description="Deep supervision experiments on synthetic keypoint data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="run configuration file")
        sp.add_argument("--seed", type=int, help="override the seed list with a single seed")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--workers", type=int, default=1)
        return sp

    common(sub.add_parser("gen-data", help="generate train/val/test dataset files")).set_defaults(fn=cmd_gen_data)
    sp = common(sub.add_parser("train", help="train one scheme for one seed"))
    sp.add_argument("--scheme", default="ladder")
    sp.set_defaults(fn=cmd_train)
    common(sub.add_parser("run-matrix", help="train and evaluate every scheme x seed cell")).set_defaults(fn=cmd_run_matrix)
    sp = common(sub.add_parser("eval", help="evaluate a checkpoint on a dataset file"), out_required=False)
    sp.add_argument("--scheme", default="ladder")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.set_defaults(fn=cmd_eval)
    sp = common(sub.add_parser("fit-shape", help="fit the PCA structure model to 2D keypoints"), out_required=False)
    sp.add_argument("--data", required=True, help="dataset file whose fully visible samples are fitted")
    sp.add_argument("--model", help="shape model file (.npz); built and saved when missing")
    sp.add_argument("--train-data", help="dataset used to build the shape model")
    sp.add_argument("--components", type=int, default=5)
    sp.add_argument("--limit", type=int)
    sp.set_defaults(fn=cmd_fit_shape)
    common(sub.add_parser("genprob", help="enumerate hypothesis spaces and check the probability chain"),
           out_required=False).set_defaults(fn=cmd_genprob)
    sp = common(sub.add_parser("plot", help="draw a PCK curve from a results CSV"))
    sp.add_argument("--results", required=True)
    sp.add_argument("--metric", default="pck2d_curve")
    sp.add_argument("--occlusion-type", default="all")
    sp.set_defaults(fn=cmd_plot)
    sp = common(sub.add_parser("report", help="median ordering report from a results CSV"), out_required=False)
    sp.add_argument("--results", required=True)
    sp.add_argument("--metric", default="pck2d")
    sp.add_argument("--alpha", type=float, default=0.1)
    sp.add_argument("--occlusion-type", default="all")
    sp.add_argument("--lower-is-better", action="store_true")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except Exception as e:
        if args.verbose:
            log.exception("command failed")
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e)}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
