"""``ucbs`` command line: build-data, train, explain-local, explain-global, evaluate, rank, report.

Every command writes ``run.json`` (resolved parameters, tool version, config
hash) into its output directory. Errors print one line to stderr of the form
``ucbs: error code=<name> msg=<text>`` and exit with the code below.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .concepts import extract_global, extract_local, global_from_dict, rank_scores, render_score_map, score_concepts
from .dataset import (
    build_auxiliary_dataset,
    load_image_dir,
    load_manifest,
    load_split,
    make_validation_scenarios,
    save_manifest,
)
from .errors import FormatVersionError, TrainingDivergedError
from .metrics import RankedItem, evaluate_dataset, friedman_test
from .report import misclassification_report, write_html_report
from .segmentation import extract_superpixel_images, load_image, resize_image, slic_segment
from .surrogate import (
    TrainingConfig,
    adapt_to_binary,
    evaluate_validation,
    fine_tune,
    load_checkpoint,
    make_base_model,
    save_checkpoint,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_VERSION = 4
EXIT_INVALID = 5
EXIT_IO = 6
EXIT_DIVERGED = 7
EXIT_LOCKED = 8

REPORT_FORMAT = "ucbs-metric-report"
REPORT_VERSION = 1
METRIC_NAMES = ("insertion", "deletion", "sensn", "faith", "ssc", "sdc", "completeness")


class CliError(Exception):
    def __init__(self, code, name, msg):
        super().__init__(msg)
        self.code = code
        self.name = name


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", message)


def _dump(obj, path):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _params(args):
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def _provenance(args):
    params = _params(args)
    blob = json.dumps(params, sort_keys=True, separators=(",", ":")).encode()
    return {"config_hash": hashlib.sha256(blob).hexdigest(), "seed": args.seed,
            "tool": "ucbs", "tool_version": __version__}


@contextmanager
def _locked(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".ucbs.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(EXIT_LOCKED, "locked", f"output directory {out_dir} is in use ({lock} exists)")
    os.close(fd)
    try:
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


def _write_run(args, out_dir, outputs):
    _dump({"command": args.command, "parameters": _params(args), "outputs": sorted(outputs),
           **_provenance(args)}, Path(out_dir) / "run.json")


def _other_classes(data_dir: Path, target: str):
    if not data_dir.is_dir():
        raise FileNotFoundError(f"data directory not found: {data_dir}")
    return sorted(p.name for p in data_dir.iterdir() if p.is_dir() and p.name != target
                  and (p / "train").is_dir())


def _load_training_images(args):
    data_dir = Path(args.data_dir)
    target = load_split(data_dir, args.target_class, "train", args.input_size)
    others = []
    for c in _other_classes(data_dir, args.target_class):
        others.extend(load_split(data_dir, c, "train", args.input_size))
    return target, others


def _build(args):
    target, others = _load_training_images(args)
    return build_auxiliary_dataset(target, others, args.m, args.k, args.n_ood, args.seed,
                                   target_class=args.target_class)


def cmd_build_data(args):
    out = Path(args.out_dir)
    with _locked(out):
        aux = _build(args)
        manifest = out / f"aux_{args.target_class}.json"
        save_manifest(aux, manifest)
        _write_run(args, out, [manifest.name])


def _validation(args):
    data_dir = Path(args.data_dir)
    tdir = data_dir / args.target_class / "val"
    if not tdir.is_dir():
        return [], None
    pos = load_split(data_dir, args.target_class, "val", args.input_size)
    neg = []
    for c in _other_classes(data_dir, args.target_class):
        if (data_dir / c / "val").is_dir():
            neg.extend(load_split(data_dir, c, "val", args.input_size))
    if len(neg) < len(pos):
        return [], None
    n_neg = min(args.n_neg, len(neg))
    return list(make_validation_scenarios(pos, neg, n_neg, args.seed)), n_neg


def train_from_args(args):
    """Programmatic core of ``ucbs train``; returns (model, log, scenarios, n_neg)."""
    aux = load_manifest(args.manifest) if args.manifest else _build(args)
    if args.base_checkpoint:
        base = load_checkpoint(args.base_checkpoint)
    else:
        channels = aux.originals[0].pixels.shape[2]
        base = make_base_model(10, channels, args.input_size, seed=args.seed)
    surrogate = adapt_to_binary(base, args.target_class, seed=args.seed)
    cfg = TrainingConfig(lambda1=args.lambda1, lambda2=args.lambda2, epochs=args.epochs,
                         learning_rate=args.lr, batch_size=args.batch_size, seed=args.seed)
    scenarios, n_neg = _validation(args)
    model, log = fine_tune(surrogate, aux, cfg, validation=scenarios)
    return model, log, scenarios, n_neg


def cmd_train(args):
    out = Path(args.out_dir)
    with _locked(out):
        model, log, scenarios, n_neg = train_from_args(args)
        save_checkpoint(model, out / "checkpoint.pt")
        doc = {"log": log.to_dict(), "provenance": _provenance(args), "n_neg": n_neg,
               "validation": {sc.kind: vars(evaluate_validation(model, sc)) for sc in scenarios}}
        _dump(doc, out / "training_log.json")
        _write_run(args, out, ["checkpoint.pt", "training_log.json"])


def _prep(model, image):
    return resize_image(image, model.input_size)


def cmd_explain_local(args):
    out = Path(args.out_dir)
    with _locked(out):
        model = load_checkpoint(args.checkpoint)
        image = _prep(model, load_image(args.image))
        mask = slic_segment(image, args.k, args.compactness, args.iterations, args.seed)
        local = extract_local(model, image, mask, args.p)
        heat = out / f"{image.id}_heatmap.png"
        render_score_map(image, mask, local.all_scores, heat)
        doc = {**local.to_dict(), "p": args.p, "provenance": _provenance(args)}
        _dump(doc, out / f"{image.id}_local.json")
        _write_run(args, out, [heat.name, f"{image.id}_local.json"])


def _crop(pixels, mask):
    ys, xs = np.nonzero(mask)
    return pixels[ys.min():ys.max() + 1, xs.min():xs.max() + 1]


def _save_crop(pixels, path):
    from PIL import Image as PILImage

    px = np.clip(np.rint(pixels * 255), 0, 255).astype(np.uint8)
    PILImage.fromarray(px[:, :, 0] if px.shape[2] == 1 else px).save(path)


def cmd_explain_global(args):
    out = Path(args.out_dir)
    with _locked(out):
        model = load_checkpoint(args.checkpoint)
        images = load_image_dir(args.images_dir, input_size=model.input_size)
        if args.limit:
            images = images[: args.limit]
        masks = [slic_segment(im, args.k, args.compactness, args.iterations, args.seed) for im in images]
        gexp = extract_global(model, images, args.p, args.K, args.g, args.r, args.seed, masks=masks)
        by_id = {im.id: (im, mk) for im, mk in zip(images, masks)}
        outputs = ["global.json"]
        crop_dir = out / "representatives"
        crop_dir.mkdir(exist_ok=True)
        for rank, reps in enumerate(gexp.representatives):
            for j, m in enumerate(reps):
                im, mk = by_id[m.image_id]
                sp = extract_superpixel_images(im, mk)[m.segment_index]
                name = f"cluster{rank}_rep{j}_{m.image_id}_seg{m.segment_index}.png"
                _save_crop(_crop(sp.pixels, sp.mask), crop_dir / name)
                outputs.append(f"representatives/{name}")
        _dump({**gexp.to_dict(), "provenance": _provenance(args)}, out / "global.json")
        _write_run(args, out, outputs)


def _ranked_items(model, images, args, is_target=True):
    items = []
    for im in images:
        mask = slic_segment(im, args.k, args.compactness, args.iterations, args.seed)
        items.append(RankedItem(im, mask, rank_scores(score_concepts(model, im, mask)), is_target))
    return items


def cmd_evaluate(args):
    out_path = Path(args.out)
    out = out_path.parent
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = sorted(set(metrics) - set(METRIC_NAMES))
    if unknown:
        raise ValueError(f"unknown metrics {unknown}; choose from {list(METRIC_NAMES)}")
    with _locked(out):
        model = load_checkpoint(args.checkpoint)
        images = load_image_dir(args.images_dir, input_size=model.input_size)
        if args.limit:
            images = images[: args.limit]
        items = _ranked_items(model, images, args)
        sizes = [int(s) for s in args.completeness_sizes.split(",")]
        rows, rep = evaluate_dataset(model, items, metrics, args.samples, args.seed, sizes)
        doc = {"format": REPORT_FORMAT, "version": REPORT_VERSION, "metrics": metrics,
               "summary": rep.to_dict(), "rows": rows, "provenance": _provenance(args)}
        _dump(doc, out_path)
        csv_path = out_path.with_suffix(".csv")
        fields = ["image_id", "k", "insertion_auc", "deletion_auc", "faithfulness", "ssc", "sdc"]
        with open(csv_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: r.get(k, "") for k in fields})
        _write_run(args, out, [out_path.name, csv_path.name])


def _read_matrix(path):
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r]
    if not rows:
        raise ValueError(f"{path} is empty")

    def _num(v):
        try:
            float(v)
            return True
        except ValueError:
            return False

    header = None if all(_num(v) for v in rows[0]) else rows[0]
    body = rows[1:] if header else rows
    label_col = any(not _num(r[0]) for r in body)
    data = [[float(v) for v in (r[1:] if label_col else r)] for r in body]
    names = (header[1:] if label_col else header) if header else None
    return np.asarray(data), names


def cmd_rank(args):
    out_path = Path(args.out)
    with _locked(out_path.parent):
        matrix, names = _read_matrix(args.matrix)
        res = friedman_test(matrix, args.alpha, names)
        doc = {"mean_ranks": {str(k): v for k, v in res.mean_ranks.items()}, "statistic": res.statistic,
               "p_value": res.p_value, "alpha": res.alpha, "reject_h0": res.reject_h0,
               "blocks": int(matrix.shape[0]), "treatments": int(matrix.shape[1]),
               "provenance": _provenance(args)}
        _dump(doc, out_path)
        _write_run(args, out_path.parent, [out_path.name])
        print(json.dumps({k: doc[k] for k in ("statistic", "p_value", "reject_h0")}, sort_keys=True))


def cmd_report(args):
    out = Path(args.out_dir)
    with _locked(out):
        model = load_checkpoint(args.checkpoint)
        if args.image:
            images = [_prep(model, load_image(args.image))]
        else:
            images = load_image_dir(args.images_dir, input_size=model.input_size)
        if args.ground_truth == "infer":
            src = Path(args.image or args.images_dir).resolve()
            is_target = str(model.target_class) in src.parts
        else:
            is_target = args.ground_truth == "target"
        gexp = None
        if args.global_json:
            gexp = global_from_dict(json.loads(Path(args.global_json).read_text()))
        records, heatmaps, outputs = [], {}, ["report.json", "report.html"]
        for im in images:
            mask = slic_segment(im, args.k, args.compactness, args.iterations, args.seed)
            rec = misclassification_report(model, im, mask, args.p, gexp, is_target=is_target)
            if args.mode == "misclassification" and not rec["misclassified"] and not args.all:
                continue
            heat = out / f"{im.id}_top{args.p}.png"
            top = {c["segment_index"] for c in rec["top_concepts"]}
            scores = score_concepts(model, im, mask)
            render_score_map(im, mask, [s.score if s.segment_index in top else min(x.score for x in scores)
                                        for s in scores], heat)
            heatmaps[im.id] = heat
            outputs.append(heat.name)
            records.append(rec)
        counts = {o: sum(r["outcome"] == o for r in records) for o in ("TP", "TN", "FP", "FN")}
        _dump({"mode": args.mode, "records": records, "counts": counts, "provenance": _provenance(args)},
              out / "report.json")
        write_html_report(records, heatmaps, out / "report.html",
                          title=f"UCBS {args.mode} report ({model.target_class})")
        _write_run(args, out, outputs)


def _add_seg(p, k=50):
    p.add_argument("--k", type=int, default=k, help="requested superpixels per image")
    p.add_argument("--compactness", type=float, default=10.0)
    p.add_argument("--iterations", type=int, default=10)


def build_parser():
    parser = _Parser(prog="ucbs", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ucbs {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("build-data", help="assemble and save the auxiliary dataset")
    common(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--target-class", required=True)
    p.add_argument("--m", type=int, default=50)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--n-ood", type=int, default=1300)
    p.add_argument("--input-size", type=int, default=64)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_build_data)

    p = sub.add_parser("train", help="fine-tune a binary surrogate")
    common(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--target-class", required=True)
    p.add_argument("--manifest")
    p.add_argument("--base-checkpoint")
    p.add_argument("--m", type=int, default=50)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--n-ood", type=int, default=1300)
    p.add_argument("--lambda1", type=float, default=1.0)
    p.add_argument("--lambda2", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--input-size", type=int, default=64)
    p.add_argument("--n-neg", type=int, default=1000)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explain-local", help="score and rank one image's concepts")
    common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--p", type=int, default=3)
    _add_seg(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_explain_local)

    p = sub.add_parser("explain-global", help="cluster local concepts into global ones")
    common(p)
    p.add_argument("--images-dir", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--p", type=int, default=3)
    p.add_argument("--K", type=int, default=5)
    p.add_argument("--g", type=int, default=3)
    p.add_argument("--r", type=int, default=3)
    p.add_argument("--limit", type=int, default=20, help="use the first N images (0 = all)")
    _add_seg(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_explain_global)

    p = sub.add_parser("evaluate", help="run the metric suite over a directory of target images")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images-dir", required=True)
    p.add_argument("--metrics", default=",".join(METRIC_NAMES))
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--completeness-sizes", default="1,3")
    p.add_argument("--limit", type=int, default=0)
    _add_seg(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rank", help="Friedman test over a classes x models accuracy CSV")
    common(p)
    p.add_argument("--matrix", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", default="rank.json")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("report", help="outcome (TP/TN/FP/FN) report with top concepts")
    common(p)
    p.add_argument("--mode", choices=["misclassification", "all"], default="misclassification")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image")
    src.add_argument("--images-dir")
    p.add_argument("--ground-truth", choices=["infer", "target", "non-target"], default="infer")
    p.add_argument("--global-json")
    p.add_argument("--p", type=int, default=3)
    p.add_argument("--all", action="store_true", help="keep correctly classified images too")
    _add_seg(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def _configure_threads():
    import torch

    torch.set_num_threads(int(os.environ.get("UCBS_THREADS", "1")))


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _configure_threads()
        args.func(args)
        return EXIT_OK
    except CliError as exc:
        err = exc
    except FileNotFoundError as exc:
        err = CliError(EXIT_MISSING_INPUT, "missing-input", str(exc))
    except FormatVersionError as exc:
        err = CliError(EXIT_VERSION, "version-mismatch", str(exc))
    except TrainingDivergedError as exc:
        err = CliError(EXIT_DIVERGED, "diverged", str(exc))
    except ValueError as exc:
        err = CliError(EXIT_INVALID, "invalid-argument", str(exc))
    except OSError as exc:
        err = CliError(EXIT_IO, "io-error", str(exc))
    msg = " ".join(str(err).split())
    print(f"ucbs: error code={err.name} msg={msg}", file=sys.stderr)
    return err.code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
