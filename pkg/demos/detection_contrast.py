"""Watershed versus circular Hough on the two classic hard cases.

A touching pair of fruit should give two detections; a single fruit cut in
half by a branch should give one. Watershed gets the first right and the
second wrong, Hough voting the other way round.

    python demos/detection_contrast.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np
from skimage.draw import circle_perimeter

from orchardseg.detect import cht_detect, morph_clean, watershed_detect
from orchardseg.io import write_image
from orchardseg.synthgen import cluster_mask, split_disk_mask


def overlay(mask, dets, colour):
    img = np.repeat(mask[..., None].astype(float) * 0.6, 3, axis=2)
    for d in dets:
        rr, cc = circle_perimeter(int(round(d.row)), int(round(d.col)), int(round(d.radius)), shape=mask.shape)
        img[rr, cc] = colour
    return img


def main(out=None):
    rng = np.random.default_rng(0)
    pair, members = cluster_mask(rng, 2)
    split, truth = split_disk_mask(rng)
    cases = {"pair": (morph_clean(pair, 2), 2), "split": (morph_clean(split, 2), 1)}
    for name, (mask, expected) in cases.items():
        ws, cht = watershed_detect(mask), cht_detect(mask)
        print(f"{name:6s} expected {expected}: watershed {len(ws)}, hough {len(cht)}")
        if out:
            panel = np.concatenate([overlay(mask, ws, (1, 0.2, 0.2)), overlay(mask, cht, (0.2, 0.6, 1))], axis=1)
            write_image(Path(out) / f"{name}.png", panel)

    # rates over many random scenes
    ws2 = sum(len(watershed_detect(morph_clean(cluster_mask(np.random.default_rng(s), 2)[0], 2))) == 2
              for s in range(50))
    cht1 = sum(len(cht_detect(morph_clean(split_disk_mask(np.random.default_rng(s))[0], 2))) == 1
               for s in range(50))
    print(f"watershed splits {ws2}/50 pairs; hough merges {cht1}/50 split disks")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
