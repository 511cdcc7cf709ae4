#!/usr/bin/env python3
"""Regenerates the bundled fixtures. Output is deterministic.

counts/   400 synthetic 640x512 frames whose labels carry exactly the
          per-class annotation counts of the reference thermal dataset.
micro/    6 frames, 10 boxes and a hand-checkable detection file.
"""

import json
import random
from pathlib import Path

ROOT = Path(__file__).resolve().parent
CLASSES = ["bicycle", "bike", "bus", "car", "dog", "person", "pole"]
COUNTS = [848, 960, 760, 13456, 390, 12168, 4133]
W, H = 640, 512


def label_line(cls, x0, y0, x1, y1):
    xc = (x0 + x1) / 2 / W
    yc = (y0 + y1) / 2 / H
    return f"{cls} {xc:.6f} {yc:.6f} {(x1 - x0) / W:.6f} {(y1 - y0) / H:.6f}"


def counts(n_images=400):
    rng = random.Random(20150)
    pool = [c for c, n in enumerate(COUNTS) for _ in range(n)]
    rng.shuffle(pool)
    out = ROOT / "counts"
    (out / "labels").mkdir(parents=True, exist_ok=True)
    images = []
    for i in range(n_images):
        share = pool[i::n_images]
        lines = []
        for cls in share:
            w = rng.randint(8, 120)
            h = rng.randint(8, 120)
            x0 = rng.randint(0, W - w)
            y0 = rng.randint(0, H - h)
            lines.append(label_line(cls, x0, y0, x0 + w, y0 + h))
        name = f"frame_{i:04d}"
        (out / "labels" / f"{name}.txt").write_text("\n".join(lines) + "\n")
        images.append({"id": name, "width": W, "height": H, "labels": f"counts/labels/{name}.txt", "tags": ["lwir"]})
    doc = {"classes": CLASSES, "images": images}
    (ROOT / "counts.json").write_text(json.dumps(doc, indent=2) + "\n")


# (image, class, box) ground truth of the micro set
MICRO_GT = [
    ("m0", 3, (100, 100, 200, 180)),
    ("m0", 5, (300, 120, 340, 220)),
    ("m1", 3, (50, 60, 150, 140)),
    ("m1", 3, (400, 300, 520, 390)),
    ("m2", 5, (200, 200, 240, 300)),
    ("m2", 6, (600, 40, 612, 300)),
    ("m3", 0, (10, 300, 90, 380)),
    ("m4", 3, (220, 220, 330, 300)),
    ("m4", 5, (500, 100, 540, 200)),
    ("m5", 2, (100, 50, 400, 250)),
]

# (image, class, score, box); see tests for the expected tallies
MICRO_DETS = [
    ("m0", 3, 0.95, (102, 98, 203, 182)),
    ("m0", 5, 0.80, (298, 125, 341, 218)),
    ("m0", 5, 0.40, (302, 118, 338, 222)),
    ("m1", 3, 0.90, (52, 58, 148, 142)),
    ("m1", 3, 0.60, (250, 250, 300, 300)),
    ("m2", 5, 0.70, (205, 210, 245, 305)),
    ("m2", 6, 0.30, (600, 40, 612, 300)),
    ("m3", 0, 0.85, (12, 302, 88, 378)),
    ("m4", 3, 0.55, (400, 400, 450, 450)),
    ("m4", 5, 0.65, (500, 100, 540, 200)),
    ("m5", 2, 0.99, (105, 55, 395, 245)),
]


def micro():
    out = ROOT / "micro"
    (out / "labels").mkdir(parents=True, exist_ok=True)
    images = []
    for i in range(6):
        name = f"m{i}"
        lines = [label_line(c, *b) for img, c, b in MICRO_GT if img == name]
        (out / "labels" / f"{name}.txt").write_text("".join(l + "\n" for l in lines))
        images.append({"id": name, "width": W, "height": H, "labels": f"labels/{name}.txt"})
    (out / "manifest.json").write_text(json.dumps({"classes": CLASSES, "images": images}, indent=2) + "\n")
    with open(out / "detections.jsonl", "w") as f:
        for img, c, s, b in MICRO_DETS:
            f.write(json.dumps({"image_id": img, "class_id": c, "score": s, "bbox": list(b)}) + "\n")


if __name__ == "__main__":
    counts()
    micro()
