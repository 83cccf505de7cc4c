"""Command-line entry point.

Subcommands: ``phantom``, ``train``, ``predict``, ``uncertainty``,
``evaluate``, ``calibrate-postproc`` and ``rerun``.  Every run writes a
``manifest.json`` into its output directory recording the exact argv, the
resolved configuration, the seed and the package version; ``rerun`` replays
a manifest.

Exit codes: 0 success, 1 usage error, 2 runtime error.  The compute device
is taken from the ``TUMORSEG_DEVICE`` environment variable (default cpu).
"""

from __future__ import annotations

import argparse
import ast
import configparser
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import __version__
from .errors import TumorSegError
from .inference import (
    DEFAULT_RATIO_THRESHOLD,
    calibrate_ratio_threshold,
    ensemble_mean,
    labels_from_softmax,
    postprocess_components,
    predict_volume,
    relabel_small_et,
)
from .metrics import DEFAULT_THRESHOLDS, auc_sweep, evaluate_case
from .nets import NetConfig, build_network
from .preprocess import normalize_case
from .sampling import class_distribution
from .trainer import TrainConfig, load_checkpoint, split_cases, train
from .uncertainty import MEASURES, SOURCES, collect, mean_prediction, uncertainty_maps
from .volume import (
    REGIONS,
    PhantomSpec,
    list_cases,
    load_case,
    load_labelmap,
    load_uncertainty,
    make_phantom,
    region_mask,
    save_case,
    save_labelmap,
    save_uncertainty,
    uncertainty_path,
)
from . import plotting

log = logging.getLogger("tumorseg")

MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _triple(text: str):
    parts = [int(p) for p in text.replace("x", ",").split(",") if p]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected N or D,H,W, got {text!r}")
    return tuple(parts)


def _device() -> torch.device:
    return torch.device(os.environ.get("TUMORSEG_DEVICE", "cpu"))


def _parse_value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def read_config(path) -> Dict[str, dict]:
    """Read an INI-style config with ``[net]`` and ``[train]`` sections.

    Values are Python literals (``1e-4``, ``(32, 32, 32)``, ``None``); bare
    words are strings.  Keys must name :class:`NetConfig` / :class:`TrainConfig`
    fields.
    """
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(f"config file {path} not found")
    allowed = {"net": {f.name for f in fields(NetConfig)}, "train": {f.name for f in fields(TrainConfig)}}
    out = {"net": {}, "train": {}}
    for section in parser.sections():
        if section not in allowed:
            raise TumorSegError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in allowed[section]:
                raise TumorSegError(f"unknown key {key!r} in [{section}]")
            out[section][key] = _parse_value(value)
    return out


def _load_cases(data: Path, fmt: str, normalize: bool = True):
    dirs = list_cases(data) if fmt == "raw" else sorted(p for p in data.iterdir() if p.is_dir())
    if not dirs:
        raise FileNotFoundError(f"no cases found under {data}")
    cases = [load_case(d, fmt) for d in dirs]
    return [normalize_case(c) for c in cases] if normalize else cases


def _write_manifest(out: Path, command: str, argv: Sequence[str], config: dict, seed) -> Path:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "version": __version__,
        "device": str(_device()),
    }
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


def _write_csv(rows: Sequence[dict], path: Path):
    if not rows:
        path.write_text("")
        return
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _load_networks(paths: Sequence[str]):
    nets = []
    for p in paths:
        net, _ = load_checkpoint(p)
        nets.append(net.to(_device()))
    return nets


def _pred_path(out: Path, case_id: str) -> Path:
    return out / f"{case_id}_pred"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_phantom(args, argv) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(args.seed).generate_state(args.n)
    counts = []
    specs = []
    for i, s in enumerate(seeds):
        spec = PhantomSpec(shape=args.shape, n_tumors=args.n_tumors, radii=args.radii, seed=int(s), id=f"phantom_{i:03d}")
        case = make_phantom(spec)
        save_case(case, out)
        c = class_distribution(case.labels)
        counts.append(c)
        specs.append({"id": spec.id, "seed": spec.seed})
    rows = [{"id": s["id"], **{f"label_{k}": v for k, v in c.items()}} for s, c in zip(specs, counts)]
    _write_csv(rows, out / "class_distribution.csv")
    plotting.plot_class_distribution(counts, out / "class_distribution.png")
    config = {"shape": list(args.shape), "n_tumors": args.n_tumors, "radii": args.radii, "cases": specs}
    _write_manifest(out, "phantom", argv, config, args.seed)
    print(f"wrote {args.n} cases to {out}")
    return 0


def cmd_train(args, argv) -> int:
    cfg_dict = read_config(args.config) if args.config else {"net": {}, "train": {}}
    if args.seed is not None:
        cfg_dict["train"]["seed"] = args.seed
    net_cfg = NetConfig(**cfg_dict["net"])
    train_cfg = TrainConfig.from_dict(cfg_dict["train"])
    cases = _load_cases(Path(args.data), args.format, not args.no_normalize)
    train_cases, val_cases = split_cases(cases, args.val_fraction, train_cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(train_cfg.seed)
    net = build_network(net_cfg).to(_device())
    result = train(net, train_cases, train_cfg, out, val_cases)
    plotting.plot_training_curves(result.history, out / "training_curves.png")
    config = {
        "net": net_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "train_cases": [c.id for c in train_cases],
        "val_cases": [c.id for c in val_cases],
    }
    _write_manifest(out, "train", argv, config, train_cfg.seed)
    print(f"trained {len(result.history)} epochs; checkpoints in {out}")
    return 0


def _postprocess(labels, args):
    if args.postprocess:
        labels = postprocess_components(labels, args.ratio_threshold)
    if args.et_threshold:
        labels = relabel_small_et(labels, args.et_threshold)
    return labels


def cmd_predict(args, argv) -> int:
    nets = _load_networks(args.checkpoint)
    cases = _load_cases(Path(args.data), args.format, not args.no_normalize)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for case in cases:
        softmax = ensemble_mean([predict_volume(n, case, args.patch_size, args.overlap) for n in nets])
        labels = _postprocess(labels_from_softmax(softmax), args)
        save_labelmap(labels, _pred_path(out, case.id))
    config = {
        "checkpoints": list(args.checkpoint),
        "patch_size": list(args.patch_size),
        "overlap": args.overlap,
        "postprocess": args.postprocess,
        "ratio_threshold": args.ratio_threshold,
        "et_threshold": args.et_threshold,
    }
    _write_manifest(out, "predict", argv, config, None)
    print(f"wrote {len(cases)} predictions to {out}")
    return 0


def cmd_uncertainty(args, argv) -> int:
    (net,) = _load_networks([args.checkpoint])
    cases = _load_cases(Path(args.data), args.format, not args.no_normalize)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, case in enumerate(cases):
        stack = collect(
            args.mode, net, case, B=args.B, dropout_p=args.dropout_p, sigma=args.sigma,
            seed=args.seed + i, patch_size=args.patch_size, overlap=args.overlap,
        )
        labels = _postprocess(mean_prediction(stack), args)
        save_labelmap(labels, _pred_path(out, case.id))
        maps = uncertainty_maps(stack, args.measure)
        for region, values in maps.items():
            save_uncertainty(values, uncertainty_path(out, case.id, region))
        if args.figures:
            shown = {"global": maps["global"]} if args.measure == "entropy" else maps
            plotting.plot_case_overview(case.modalities, labels, shown, out / f"{case.id}_overview.png")
    config = {
        "checkpoint": args.checkpoint,
        "mode": args.mode,
        "measure": args.measure,
        "B": args.B,
        "dropout_p": args.dropout_p,
        "sigma": args.sigma,
        "patch_size": list(args.patch_size),
        "overlap": args.overlap,
        "postprocess": args.postprocess,
        "ratio_threshold": args.ratio_threshold,
    }
    _write_manifest(out, "uncertainty", argv, config, args.seed)
    print(f"wrote predictions and {args.measure} maps for {len(cases)} cases to {out}")
    return 0


def _aggregate(rows: List[dict]) -> dict:
    keys = [k for k in rows[0] if k != "id"]
    agg = {}
    for k in keys:
        values = np.asarray([r[k] for r in rows], dtype=np.float64)
        agg[k] = {
            "mean": float(values.mean()),
            "std": float(values.std()),
            "median": float(np.median(values)),
            "q25": float(np.percentile(values, 25)),
            "q75": float(np.percentile(values, 75)),
        }
    return agg


def cmd_evaluate(args, argv) -> int:
    cases = _load_cases(Path(args.data), args.format, normalize=False)
    pred_dir = Path(args.pred)
    unc_dir = Path(args.unc) if args.unc else None
    thresholds = tuple(range(0, 101, args.threshold_step))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, curves = [], {r: [] for r in REGIONS}
    for case in cases:
        if case.labels is None:
            raise TumorSegError(f"case {case.id} has no ground truth")
        pred = load_labelmap(_pred_path(pred_dir, case.id).with_suffix(".raw"))
        maps = None
        if unc_dir is not None:
            maps = {r: load_uncertainty(uncertainty_path(unc_dir, case.id, r)) for r in REGIONS}
            for r in REGIONS:
                _, points = auc_sweep(region_mask(pred, r), region_mask(case.labels, r), maps[r],
                                      thresholds, case.brain_mask, return_curve=True)
                curves[r].append(points)
        row = evaluate_case(pred, case.labels, maps, case.spacing, case.brain_mask, thresholds)
        rows.append({"id": case.id, **row})
    _write_csv(rows, out / "per_case.csv")
    aggregate = {"n_cases": len(rows), "metrics": _aggregate(rows)}
    (out / "aggregate.json").write_text(json.dumps(aggregate, indent=2, sort_keys=True))
    plotting.plot_region_scores(rows, out / "dice.png", "dice")
    plotting.plot_region_scores(rows, out / "hd95.png", "hd95")
    if unc_dir is not None:
        mean_curves = {
            r: [
                {
                    "threshold": t,
                    "dice": float(np.mean([c[i].dice for c in curves[r]])),
                    "ftp": float(np.mean([c[i].ftp for c in curves[r]])),
                    "ftn": float(np.mean([c[i].ftn for c in curves[r]])),
                }
                for i, t in enumerate(thresholds)
            ]
            for r in REGIONS
        }
        plotting.plot_uncertainty_curves(mean_curves, out / "uncertainty_curves.png")
    config = {"pred": args.pred, "data": args.data, "unc": args.unc, "thresholds": list(thresholds)}
    _write_manifest(out, "evaluate", argv, config, None)
    for r in REGIONS:
        m = aggregate["metrics"]
        line = f"{r.upper()}: dice {m[f'dice_{r}']['mean']:.4f} hd95 {m[f'hd95_{r}']['mean']:.2f}"
        if unc_dir is not None:
            line += f" score {m[f'score_{r}']['mean']:.4f}"
        print(line)
    return 0


def cmd_calibrate(args, argv) -> int:
    cases = _load_cases(Path(args.data), args.format, normalize=False)
    preds = [load_labelmap(_pred_path(Path(args.pred), c.id).with_suffix(".raw")) for c in cases]
    thresholds = [round(float(t), 4) for t in np.arange(args.step, 1.0 + 1e-9, args.step)]
    result = calibrate_ratio_threshold(preds, [c.labels for c in cases], thresholds, args.region)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(result["table"], out / "calibration.csv")
    (out / "calibration.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    plotting.plot_calibration(result["table"], out / "calibration.png", f"mean_dice_{args.region}")
    _write_manifest(out, "calibrate-postproc", argv, {"pred": args.pred, "region": args.region, "thresholds": thresholds}, None)
    print(f"best ratio threshold {result['best_threshold']}")
    return 0


def replay_argv(manifest_path, replacements: Optional[Dict[str, str]] = None) -> List[str]:
    """The argv stored in a manifest with every ``old`` substring replaced by ``new``."""
    manifest = json.loads(Path(manifest_path).read_text())
    argv = list(manifest["argv"])
    for old, new in (replacements or {}).items():
        argv = [a.replace(old, new) for a in argv]
    return argv


def cmd_rerun(args, argv) -> int:
    replacements = {}
    for item in args.replace:
        if "=" not in item:
            raise UsageError(f"--replace expects OLD=NEW, got {item!r}")
        old, new = item.split("=", 1)
        replacements[old] = new
    return main(replay_argv(args.manifest, replacements))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_data(p):
    p.add_argument("--data", required=True, help="directory of case subdirectories")
    p.add_argument("--format", choices=("raw", "nifti"), default="raw")


def _add_inference(p):
    p.add_argument("--patch-size", type=_triple, default=(64, 64, 64))
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--postprocess", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--ratio-threshold", type=float, default=DEFAULT_RATIO_THRESHOLD)
    p.add_argument("--et-threshold", type=int, default=0, help="relabel ET as NCR below this many voxels (0 = off)")
    p.add_argument("--no-normalize", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tumorseg", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate synthetic phantom cases")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--shape", type=_triple, default=(64, 64, 64))
    p.add_argument("--n-tumors", type=int, default=2)
    p.add_argument("--radii", type=lambda s: tuple(float(v) for v in s.split(",")), default=None,
                   help="wt,tc,et sphere radii in voxels")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train a network on cases")
    p.add_argument("--config", help="INI config with [net] and [train] sections")
    _add_data(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment cases with one or more checkpoints (ensemble mean)")
    p.add_argument("--checkpoint", nargs="+", required=True)
    _add_data(p)
    p.add_argument("--out", required=True)
    _add_inference(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("uncertainty", help="prediction plus voxel-wise uncertainty maps")
    p.add_argument("--checkpoint", required=True)
    _add_data(p)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=SOURCES, default="tta")
    p.add_argument("--measure", choices=MEASURES, default="variance")
    p.add_argument("--B", type=int, default=20)
    p.add_argument("--dropout-p", type=float, default=0.5)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--figures", action=argparse.BooleanOptionalAction, default=True)
    _add_inference(p)
    p.set_defaults(func=cmd_uncertainty)

    p = sub.add_parser("evaluate", help="score predictions (and uncertainty maps) against ground truth")
    p.add_argument("--pred", required=True)
    _add_data(p)
    p.add_argument("--unc", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold-step", type=int, default=5)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("calibrate-postproc", help="sweep the connected-component ratio threshold")
    p.add_argument("--pred", required=True, help="predictions made without post-processing")
    _add_data(p)
    p.add_argument("--out", required=True)
    p.add_argument("--step", type=float, default=0.05)
    p.add_argument("--region", choices=REGIONS, default="wt")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("rerun", help="replay the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--replace", action="append", default=[], metavar="OLD=NEW",
                   help="substitute a substring in the recorded argv (repeatable)")
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (TumorSegError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
