"""From synthetic orchard frames to a calibrated yield map.

Trains a small ms-MLP-2 on labelled scenes, segments every 0.5 m frame of a
five-row orchard, counts watershed detections inside the central band of
each frame, then fits harvest counts against detected counts per row.

    python demos/orchard_yield.py
"""

import numpy as np

from orchardseg.detect import DetectParams, detect
from orchardseg.evaluate import select_threshold, yield_error_percent
from orchardseg.msmlp import MsMlpTraining, ms_mlp_2, msmlp_infer_image, train_msmlp
from orchardseg.nn import TrainConfig
from orchardseg.synthgen import OrchardSpec, orchard_frames, orchard_world, row_truths, segmentation_set
from orchardseg.yieldmap import NODATA, accumulate_rows, calibrate_linear, rasterize_yield, roi_count, select_frames


def main():
    spec = OrchardSpec(rows=5)
    data = segmentation_set(spec.scene, 60, seed=1)
    imgs = [d[1] for d in data]
    masks = [d[2].mask for d in data]
    metas = [d[2].meta for d in data]
    st = MsMlpTraining(train=TrainConfig(learning_rate=0.1, epochs=4, batch_size=100, dtype="float32"))
    model = train_msmlp(imgs[:50], masks[:50], metas[:50], ms_mlp_2(), 6000, st)
    t, f1 = select_threshold([msmlp_infer_image(i, m, model) for i, m in zip(imgs[50:], metas[50:])], masks[50:])
    print(f"validation pixel F1 {f1:.3f} at threshold {t:.2f}")

    frames = {iid: (img, pose) for iid, img, _, pose in orchard_frames(spec, 2)}
    kept = select_frames([pose for _, pose in frames.values()], 0.5)
    half = spec.px_per_m * 0.25
    centre = (spec.scene.width - 1) / 2
    roi = (-0.5, centre - half, spec.scene.height - 0.5, centre + half)
    counts, rows_of, samples = {}, {}, []
    for pose in kept:
        img, _ = frames[pose.image_id]
        dets = detect(msmlp_infer_image(img, None, model), "ws", DetectParams(threshold=t))
        counts[pose.image_id] = roi_count(dets, roi)
        rows_of[pose.image_id] = pose.row_id
        samples.append((pose.easting, pose.northing, counts[pose.image_id]))

    rows = accumulate_rows(counts, rows_of)
    for r, truth in zip(rows, row_truths(orchard_world(spec, 2))):
        r.truth = truth
    a, b, r2 = calibrate_linear(rows)
    err = yield_error_percent([r.estimate for r in rows], [r.truth for r in rows])
    for r in rows:
        print(f"row {r.row_id}: detected {r.count:3d}  harvest {r.truth:3d}  calibrated {r.estimate:6.1f}")
    print(f"truth = {a:.2f} * count {b:+.1f}, r2 {r2:.3f}, yield error {err:.1f}%")
    raster = rasterize_yield(samples, cell=1.0)
    print(f"yield raster {raster.values.shape}, {np.sum(raster.values != NODATA)} cells with data")


if __name__ == "__main__":
    main()
