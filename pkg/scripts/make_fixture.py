"""Regenerate the small fixture corpus bundled under src/rsvlts/data/fixture."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from rsvlts.geom import BinaryMask, RotatedBox, rasterize_polygon
from rsvlts.maskio import write_mask

OUT = Path(__file__).resolve().parents[1] / "src" / "rsvlts" / "data" / "fixture"


def square(cx, cy, half):
    return [[cx - half, cy - half], [cx + half, cy - half], [cx + half, cy + half], [cx - half, cy + half]]


def obj(scene, oid, category, corners, w, h, mask=True, **extra):
    d = {"id": oid, "category": category, "corners": corners}
    if mask:
        rel = f"masks/{scene}_{oid}.pbm"
        write_mask(rasterize_polygon(RotatedBox(tuple(map(tuple, corners))), w, h), OUT / rel)
        d["mask"] = rel
    d.update(extra)
    return d


def main():
    (OUT / "masks").mkdir(parents=True, exist_ok=True)
    scenes = []

    w = h = 100
    scenes.append({
        "id": "airport", "image": "images/airport.png", "width": w, "height": h, "north_angle": 0,
        "caption": "An airfield split by a river with three parked planes.",
        "objects": [
            obj("airport", 0, "river", [[45, 0], [55, 0], [55, 100], [45, 100]], w, h, mask=False, role="river"),
            obj("airport", 1, "plane", square(20, 30, 4), w, h, attributes={"color": "white", "size": "small"},
                expressions=["the plane on the west bank of the river"]),
            obj("airport", 2, "plane", square(60, 40, 5), w, h, attributes={"color": "white", "size": "large"}),
            obj("airport", 3, "plane", [[64, 66], [76, 66], [76, 74], [64, 74]], w, h, attributes={"color": "gray", "size": "large"},
                expressions=["find the largest plane on the east bank of the river"]),
            obj("airport", 4, "ship", [[48, 18], [52, 18], [52, 28], [48, 28]], w, h, attributes={"color": "red"},
                expressions=["the red ship"]),
        ],
    })

    w = h = 400
    scenes.append({
        "id": "ponds", "image": "images/ponds.png", "width": w, "height": h,
        "caption": "Farmland with two ponds.",
        "objects": [
            obj("ponds", 0, "pond", [[100, 100], [100, 200], [200, 200], [200, 100]], w, h,
                expressions=["What's the location of the largest pond in this image?"]),
            obj("ponds", 1, "pond", square(325, 325, 25), w, h, expressions=["the smallest pond"]),
        ],
    })

    w, h = 160, 120
    scenes.append({
        "id": "harbor", "image": "images/harbor.png", "width": w, "height": h, "north_angle": 90,
        "objects": [
            obj("harbor", 0, "harbor", [[0, 80], [160, 80], [160, 120], [0, 120]], w, h, mask=False, role="harbor"),
            obj("harbor", 1, "ship", [[20, 40], [44, 34], [46, 42], [22, 48]], w, h, attributes={"color": "red", "size": "large"},
                expressions=["find the largest red ship"]),
            obj("harbor", 2, "ship", [[90, 50], [104, 50], [104, 56], [90, 56]], w, h, attributes={"color": "blue", "size": "small"},
                expressions=["the blue ship near the harbor"]),
            obj("harbor", 3, "storage tank", square(130, 20, 6), w, h, attributes={"color": "white"}),
            obj("harbor", 4, "storage tank", square(145, 20, 5), w, h, attributes={"color": "white"}),
        ],
    })

    with open(OUT / "scenes.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for s in scenes:
            fh.write(json.dumps(s, sort_keys=True) + "\n")

    # bi-temporal change masks, stored as P5 to cover both formats
    m = np.zeros((64, 64), dtype=bool)
    m[8:20, 10:26] = True
    m[30:50, 36:44] = True
    m[40:46, 44:56] = True
    m[60, 2] = True  # isolated noise pixel
    write_mask(BinaryMask.from_array(m), OUT / "masks/change_0.pgm")
    m2 = np.zeros((64, 64), dtype=bool)
    yy, xx = np.mgrid[:64, :64]
    m2[(yy - 32) ** 2 + (xx - 30) ** 2 <= 120] = True
    write_mask(BinaryMask.from_array(m2), OUT / "masks/change_1.pbm")
    changes = [
        {"id": "change_0", "image_a": "images/c0_a.png", "image_b": "images/c0_b.png", "mask": "masks/change_0.pgm",
         "caption": "Two new buildings appear next to the road."},
        {"id": "change_1", "image_a": "images/c1_a.png", "image_b": "images/c1_b.png", "mask": "masks/change_1.pbm"},
    ]
    with open(OUT / "change.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for c in changes:
            fh.write(json.dumps(c, sort_keys=True) + "\n")

    geo = [
        {"id": "geo_hangzhou", "image": "images/hz.png", "city": "Hangzhou", "lat": 30.25, "lon": 120.17},
        {"id": "geo_paris", "image": "images/paris.png", "city": "Paris", "lat": 48.8566, "lon": 2.3522},
        {"id": "geo_nairobi", "image": "images/nbo.png", "city": "Nairobi", "lat": -1.2921, "lon": 36.8219},
    ]
    with open(OUT / "geoloc.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for g in geo:
            fh.write(json.dumps(g, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
