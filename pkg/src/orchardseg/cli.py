"""Command line: synthgen, train, segment, detect, evaluate, yieldmap.

Exit codes: 0 success, 1 runtime failure, 2 usage error or missing input.
``ORCHARDSEG_THREADS`` caps the BLAS thread count.
"""

from __future__ import annotations

import os
import sys

_threads = os.environ.get("ORCHARDSEG_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _threads

import argparse  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

log = logging.getLogger("orchardseg")


class UsageError(Exception):
    pass


def _config_hash(d):
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _require(path, what):
    if not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _dump_json(path, obj):
    from .io import atomic_write
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


# ---------------------------------------------------------------------------


def cmd_synthgen(a):
    from . import synthgen as sg
    from .io import DatasetDescriptor, write_dataset
    out = Path(a.out)
    if a.kind == "orchard":
        spec = sg.OrchardSpec(rows=a.rows)
        world = sg.orchard_world(spec, a.seed)
        items = [(iid, img, truth, pose) for iid, img, truth, pose in sg.orchard_frames(spec, a.seed)]
        sc = spec.scene
        half = spec.px_per_m * a.roi_spacing / 2
        centre = (sc.width - 1) / 2
        desc = DatasetDescriptor(out, sc.height, sc.width, kind="orchard", n_rows=spec.rows, split=(0.0, 0.0, 1.0),
                                 roi=(-0.5, centre - half, sc.height - 0.5, centre + half),
                                 extra={"frame_spacing_m": spec.frame_spacing_m, "px_per_m": spec.px_per_m})
        harvest = dict(enumerate(sg.row_truths(world)))
        write_dataset(desc, items, harvest)
    else:
        spec = {"default": sg.SceneSpec, "orchard": lambda: sg.OrchardSpec().scene,
                "metadata": sg.metadata_correlated_spec}[a.preset]()
        items = [(iid, img, truth, None) for iid, img, truth in sg.segmentation_set(spec, a.n, a.seed, a.rows)]
        desc = DatasetDescriptor(out, spec.height, spec.width, n_rows=a.rows, split_seed=a.seed,
                                 frame_height=spec.frame_h, frame_width=spec.frame_w, azimuth_range=(-180.0, 180.0))
        write_dataset(desc, items)
    log.info("wrote %d images to %s", len(items), out)
    return 0


def _metadata_fields(s):
    if not s:
        return ()
    fields = tuple(f.strip() for f in s.split(",") if f.strip())
    from .metadata import FIELD_ORDER
    bad = [f for f in fields if f not in FIELD_ORDER]
    if bad:
        raise UsageError(f"unknown metadata fields {bad}; choose from {','.join(FIELD_ORDER)}")
    return fields


def cmd_train(a):
    from .evaluate import select_threshold
    from .io import load_dataset, save_model
    from .nn import TrainConfig
    ds = load_dataset(_require(a.data, "dataset"))
    spec = ds.desc.encoder(_metadata_fields(a.metadata)) if a.metadata else None
    _, timgs, tmasks, tmetas = ds.load("train")
    _, vimgs, vmasks, vmetas = ds.load("val")
    val = (vimgs, vmasks, vmetas) if vimgs else None
    history = []
    if a.arch == "cnn":
        from .cnn import CnnArch, CnnTraining, cnn_infer_image, train_cnn
        cfg = TrainConfig(learning_rate=a.lr or 0.02, epochs=a.epochs or 8, batch_size=a.batch or 64,
                          seed=a.seed, dtype=a.dtype)
        st = CnnTraining(train=cfg)
        model = train_cnn(timgs, tmasks, tmetas, CnnArch(metadata=spec), a.instances or 4000, st, val=val,
                          seed=a.seed, history=history)
        infer = cnn_infer_image
    else:
        from .msmlp import MsMlpTraining, ms_mlp_2, ms_mlp_3, msmlp_infer_image, train_msmlp
        cfg = TrainConfig(learning_rate=a.lr or 0.1, epochs=a.epochs or 10, batch_size=a.batch or 100,
                          seed=a.seed, dtype=a.dtype)
        st = MsMlpTraining(train=cfg)
        arch = (ms_mlp_2 if a.layers == 2 else ms_mlp_3)(metadata=spec)
        model = train_msmlp(timgs, tmasks, tmetas, arch, a.instances or 20000, st, val=val, seed=a.seed,
                            history=history)
        infer = msmlp_infer_image
    threshold, val_f1 = 0.5, None
    if val is not None:
        probs = [infer(im, mt, model) for im, mt in zip(vimgs, vmetas)]
        threshold, val_f1 = select_threshold(probs, vmasks)
    cfg_d = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    prov = {"config_hash": _config_hash({"train": cfg_d, "arch": model.arch.to_dict(),
                                         "instances": a.instances}),
            "seed": a.seed, "epochs": len(history), "threshold": threshold, "val_f1": val_f1}
    save_model(a.out, model, prov)
    if a.log:
        _dump_json(a.log, {"history": history, "provenance": prov})
    log.info("saved %s (threshold %.2f, val F1 %s)", a.out, threshold, val_f1)
    return 0


def _subset_ids(ds, subset, spacing=None):
    from .yieldmap import select_frames
    ids = ds.ids if subset == "all" else ds.split[subset]
    if spacing:
        keep = {p.image_id for p in select_frames([ds.pose(i) for i in ids], spacing)}
        ids = [i for i in ids if i in keep]
    return ids


def cmd_segment(a):
    from .cnn import Cnn, cnn_infer_image
    from .io import load_dataset, load_model, write_prob
    from .msmlp import msmlp_infer_image
    ds = load_dataset(_require(a.data, "dataset"))
    model = load_model(_require(a.model, "model"))
    infer = cnn_infer_image if isinstance(model, Cnn) else msmlp_infer_image
    out = Path(a.out)
    ids = _subset_ids(ds, a.subset, a.spacing)
    for k, iid in enumerate(ids):
        write_prob(out / f"{iid}.png", infer(ds.image(iid), ds.meta(iid), model))
        if k % 50 == 0:
            log.info("segmented %d/%d", k + 1, len(ids))
    _dump_json(out / "threshold.json", {"threshold": model.provenance.get("threshold", 0.5)})
    return 0


def _detect_params(a):
    kw = {k: v for k, v in dict(min_distance=a.min_distance, radius_min=a.radius_min, radius_max=a.radius_max,
                                acc_threshold=a.acc_threshold, morph_radius=a.morph_radius,
                                min_center_distance=a.min_center_distance).items() if v is not None}
    return kw


def cmd_detect(a):
    from .detect import DetectParams, detect
    from .io import load_dataset, read_prob, write_detections
    probs = _require(a.probs, "probability map directory")
    ds = load_dataset(_require(a.data, "dataset"))
    t = a.threshold
    if t is None:
        tf = probs / "threshold.json"
        t = json.loads(tf.read_text())["threshold"] if tf.exists() else 0.5
    params = DetectParams(threshold=t, margin=a.margin, **_detect_params(a))
    ids = [i for i in ds.ids if (probs / f"{i}.png").exists()]
    if not ids:
        raise UsageError(f"no probability maps in {probs}")
    rows = []
    for iid in ids:
        dets = detect(read_prob(probs / f"{iid}.png"), a.method, params)
        rows += [(iid, d) for d in dets]
        if a.overlays:
            _write_overlay(Path(a.overlays) / f"{iid}.png", ds.image(iid), dets)
    write_detections(a.out, rows)
    log.info("%d detections in %d images", len(rows), len(ids))
    return 0


def _write_overlay(path, img, dets):
    from skimage.draw import circle_perimeter
    from .io import write_image
    out = np.array(img)
    h, w = out.shape[:2]
    for d in dets:
        rr, cc = circle_perimeter(int(round(d.row)), int(round(d.col)), max(int(round(d.radius)), 1), shape=(h, w))
        out[rr, cc] = (0.1, 0.3, 1.0)
    write_image(path, out)


def cmd_evaluate(a):
    from . import evaluate as ev
    from .io import load_dataset, read_detections, read_prob
    ds = load_dataset(_require(a.data, "dataset"))
    ids = _subset_ids(ds, a.subset)
    report = {"mode": a.mode, "subset": a.subset, "images": len(ids)}
    if a.mode == "pixel":
        probs = _require(a.probs, "probability map directory")
        t = a.threshold
        if t is None:
            vids = [i for i in ds.split["val"] if (probs / f"{i}.png").exists()]
            if vids:
                t, _ = ev.select_threshold([read_prob(probs / f"{i}.png") for i in vids], [ds.mask(i) for i in vids])
            else:
                t = 0.5
        P = np.concatenate([read_prob(probs / f"{i}.png").ravel() for i in ids])
        G = np.concatenate([ds.mask(i).ravel() for i in ids])
        s = ev.pixel_prf(P, G, t)
        report.update(threshold=t, precision=s.precision, recall=s.recall, f1=s.f1)
    else:
        dets = read_detections(_require(a.detections, "detection table"))
        h, w = ds.desc.height, ds.desc.width
        m = a.margin

        def inside(r, c):
            return m <= r <= h - 1 - m and m <= c <= w - 1 - m

        if a.mode == "detection":
            tp = fp = fn = 0
            for i in ids:
                truth = [t for t in ds.annotations(i) if inside(t[0], t[1])]
                res = ev.match_detections([d for d in dets.get(i, []) if inside(d.row, d.col)], truth, a.order)
                tp, fp, fn = tp + res.tp, fp + res.fp, fn + res.fn
            report.update(tp=tp, fp=fp, fn=fn, f1=ev.f1_from_counts(tp, fp, fn))
        else:
            est = [sum(inside(d.row, d.col) for d in dets.get(i, [])) for i in ids]
            tru = [sum(inside(t[0], t[1]) for t in ds.annotations(i)) for i in ids]
            report.update(r2=ev.r_squared(est, tru), yield_error_percent=ev.yield_error_percent(est, tru))
    if a.out:
        _dump_json(a.out, report)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_yieldmap(a):
    from . import yieldmap as ym
    from .evaluate import r_squared, yield_error_percent
    from .io import atomic_write, load_dataset, read_detections, write_table
    ds = load_dataset(_require(a.data, "dataset"))
    dets = read_detections(_require(a.detections, "detection table"))
    roi = tuple(float(v) for v in a.roi.split(",")) if a.roi else ds.desc.roi
    if roi is None:
        raise UsageError("dataset has no ROI; pass --roi row0,col0,row1,col1")
    frames = ym.select_frames([ds.pose(i) for i in ds.ids], a.spacing)
    counts, rows_of, samples = {}, {}, []
    for p in frames:
        n = ym.roi_count(dets.get(p.image_id, []), roi)
        counts[p.image_id] = n
        rows_of[p.image_id] = p.row_id
        samples.append((p.easting, p.northing, n))
    rows = ym.accumulate_rows(counts, rows_of)
    truth = ds.harvest()
    for r in rows:
        r.truth = truth.get(r.row_id)
    a_, b_, r2 = ym.calibrate_linear(rows)
    est = [r.estimate for r in rows]
    tru = [r.truth for r in rows]
    summary = {"slope": a_, "intercept": b_, "r2": r2, "r2_check": r_squared(est, tru),
               "yield_error_percent": yield_error_percent(est, tru), "frames": len(frames), "rows": len(rows)}
    out = Path(a.out)
    write_table(out / "rows.csv", ["row_id", "count", "truth", "estimate"],
                [(r.row_id, r.count, r.truth, float(r.estimate)) for r in rows])
    raster = ym.rasterize_yield(samples, cell=a.cell)
    atomic_write(out / "yield.asc", raster.to_ascii_grid().encode("ascii"))
    _dump_json(out / "fit.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="orchardseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthgen", help="write a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=("scenes", "orchard"), default="scenes")
    s.add_argument("--preset", choices=("default", "orchard", "metadata"), default="default")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--rows", type=int, default=15)
    s.add_argument("--roi-spacing", type=float, default=0.5, help="ROI band width in metres")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synthgen)

    s = sub.add_parser("train", help="train a pixel classifier")
    s.add_argument("arch", choices=("msmlp", "cnn"))
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--metadata", default="", help="comma list of p_i,p_j,r_n,s_psi,noise")
    s.add_argument("--instances", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch", type=int)
    s.add_argument("--layers", type=int, choices=(2, 3), default=3, help="ms-MLP depth")
    s.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--log")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("segment", help="write probability maps")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--subset", choices=("all", "train", "val", "test"), default="all")
    s.add_argument("--spacing", type=float, help="only frames selected at this along-row spacing (m)")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("detect", help="detect individual fruit")
    s.add_argument("method", choices=("ws", "cht"))
    s.add_argument("--data", required=True)
    s.add_argument("--probs", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float)
    s.add_argument("--margin", type=int, default=0)
    s.add_argument("--overlays")
    for name, typ in (("min-distance", int), ("radius-min", int), ("radius-max", int), ("acc-threshold", float),
                      ("morph-radius", int), ("min-center-distance", float)):
        s.add_argument(f"--{name}", type=typ)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("evaluate", help="score predictions")
    s.add_argument("mode", choices=("pixel", "detection", "count"))
    s.add_argument("--data", required=True)
    s.add_argument("--probs")
    s.add_argument("--detections")
    s.add_argument("--subset", choices=("all", "train", "val", "test"), default="test")
    s.add_argument("--threshold", type=float)
    s.add_argument("--margin", type=int, default=0)
    s.add_argument("--order", choices=("distance", "detection"), default="distance")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("yieldmap", help="row counts, calibration and yield raster")
    s.add_argument("--data", required=True)
    s.add_argument("--detections", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--spacing", type=float, default=0.5)
    s.add_argument("--cell", type=float, default=2.0)
    s.add_argument("--roi")
    s.set_defaults(func=cmd_yieldmap)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"orchardseg: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"orchardseg: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
