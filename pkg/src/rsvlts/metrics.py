"""Scoring of predicted records against ground truth.

Conventions: precision is 1 when nothing was predicted and recall is 1 when
there was nothing to find, so an empty prediction for an empty answer scores
perfectly. Box matching is greedy by descending rotated IoU. Predictions
whose answer text does not parse count as parse failures and are scored as
empty predictions; for geolocation they are left out of the distance
statistics instead.
"""

from __future__ import annotations

import json
import math
import re
import statistics
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from rsvlts.convert import SCHEMA, InstructionRecord
from rsvlts.geom import HorizontalBox, Polygon, haversine_km, rasterize_union, rotated_iou
from rsvlts.textcodec import (
    Caption,
    CoordSpace,
    GeoLoc,
    ParseFailure,
    PolyList,
    RboxList,
    SegPrompt,
    TaskTag,
    parse_answer,
)

REPORT_SCHEMA = "rsvlts-report/1"


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class Matching:
    pairs: tuple[tuple[int, int, float], ...]
    tp: int
    fp: int
    fn: int


def match_boxes(gt, pred, iou_thresh: float = 0.5) -> Matching:
    """Greedy one-to-one matching; ties go to the lower (gt, pred) index."""
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1], got {iou_thresh}")
    gt = gt.boxes if isinstance(gt, RboxList) else tuple(gt)
    pred = pred.boxes if isinstance(pred, RboxList) else tuple(pred)
    cands = []
    for i, g in enumerate(gt):
        for j, p in enumerate(pred):
            iou = rotated_iou(g, p)
            if iou >= iou_thresh:
                cands.append((-iou, i, j))
    cands.sort()
    used_g, used_p, pairs = set(), set(), []
    for neg, i, j in cands:
        if i in used_g or j in used_p:
            continue
        used_g.add(i)
        used_p.add(j)
        pairs.append((i, j, -neg))
    tp = len(pairs)
    return Matching(tuple(pairs), tp, len(pred) - tp, len(gt) - tp)


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _pixel_counts(gt_bits: np.ndarray, pred_bits: np.ndarray) -> tuple[int, int, int]:
    tp = int(np.count_nonzero(gt_bits & pred_bits))
    fp = int(np.count_nonzero(pred_bits & ~gt_bits))
    fn = int(np.count_nonzero(gt_bits & ~pred_bits))
    return tp, fp, fn


def score_change(gt_polys, pred_polys, dims: tuple[int, int]) -> dict:
    """Pixel precision/recall/F1 of two polygon sets rasterized on ``dims``."""
    w, h = dims
    if w <= 0 or h <= 0:
        raise ValueError("dims must be positive")
    g = rasterize_union(_polys(gt_polys), w, h).bits
    p = rasterize_union(_polys(pred_polys), w, h).bits
    tp, fp, fn = _pixel_counts(g, p)
    precision, recall, f1 = prf(tp, fp, fn)
    return {"tp": tp, "fp": fp, "fn": fn, "precision": precision, "recall": recall, "f1": f1}


def _polys(x) -> tuple:
    return x.polygons if isinstance(x, PolyList) else tuple(x)


def score_geoloc(gt: GeoLoc, pred: GeoLoc) -> tuple[float, bool]:
    km = haversine_km((gt.lat, gt.lon), (pred.lat, pred.lon))
    return km, gt.city.strip().casefold() == pred.city.strip().casefold()


def normalize_text(s: str) -> str:
    s = re.sub(r"[^\w\s]", " ", s.casefold())
    return " ".join(s.split())


def _hbb_rect(b: HorizontalBox) -> Polygon:
    # box corners are inclusive cell indices
    x0, y0 = b.min
    x1, y1 = b.max[0] + 1, b.max[1] + 1
    return Polygon(((x0, y0), (x1, y0), (x1, y1), (x0, y1)))


def _seg_canvas(space: CoordSpace, *payloads: SegPrompt) -> tuple[int, int]:
    try:
        return space.canvas()
    except ValueError:
        xs = [t.box.max[0] for p in payloads for t in p.targets] + [0]
        ys = [t.box.max[1] for p in payloads for t in p.targets] + [0]
        return int(math.ceil(max(xs))) + 2, int(math.ceil(max(ys))) + 2


def score_seg(gt: SegPrompt, pred: SegPrompt, space: CoordSpace) -> tuple[float, int, int]:
    """(mask IoU of the box unions, keypoint hits, keypoint denominator)."""
    w, h = _seg_canvas(space, gt, pred)
    g = rasterize_union([_hbb_rect(t.box) for t in gt.targets], w, h).bits
    p = rasterize_union([_hbb_rect(t.box) for t in pred.targets], w, h).bits
    union = int(np.count_nonzero(g | p))
    iou = int(np.count_nonzero(g & p)) / union if union else 1.0
    pred_pts = [pt for t in pred.targets for pt in t.points]
    gt_n = sum(len(t.points) for t in gt.targets)
    hits = sum(1 for pt in pred_pts if any(t.box.contains(pt) for t in gt.targets))
    return iou, hits, max(len(pred_pts), gt_n)


# --- corpus evaluation -----------------------------------------------------


def _empty(tag: TaskTag):
    return {
        TaskTag.DETECTION: RboxList(()),
        TaskTag.GROUNDING: RboxList(()),
        TaskTag.SEG: SegPrompt(()),
        TaskTag.CHANGE: PolyList(()),
        TaskTag.CAPTION: Caption(""),
        TaskTag.IDENTIFY: Caption(""),
    }.get(tag)


def _pred_answer(gt: InstructionRecord, pred):
    """Parsed prediction payload, or None on a parse failure."""
    if isinstance(pred, InstructionRecord):
        if not isinstance(pred.answer, str):
            if pred.tag is not gt.tag:
                return None
            return pred.answer
        text, space = pred.answer, pred.space
    else:
        text, space = pred, gt.space
    try:
        return parse_answer(text, gt.tag, space)
    except ParseFailure:
        return None


def read_predictions(path) -> dict[str, object]:
    """Prediction file rows keyed by id.

    Rows are either full records or ``{"id", "answer"}`` pairs whose answer
    text is read in the ground truth's tag and space. Full records keep an
    unparseable answer as raw text.
    """
    out: dict[str, object] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            if d.get("schema") == SCHEMA:
                out[d["id"]] = InstructionRecord.from_dict(d, lenient=True)
            else:
                out[str(d["id"])] = str(d["answer"])
    return out


def _rate(num: float, den: float) -> float:
    return num / den if den else 1.0


def evaluate(gt_records: Iterable[InstructionRecord], preds: dict, iou_thresh: float = 0.5) -> dict:
    gt_records = list(gt_records)
    gt_ids = [r.id for r in gt_records]
    missing = sorted(set(gt_ids) - set(preds))
    extra = sorted(set(preds) - set(gt_ids))
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"missing predictions for: {', '.join(missing)}")
        if extra:
            parts.append(f"predictions without ground truth: {', '.join(extra)}")
        raise EvalError("; ".join(parts))

    acc: dict[TaskTag, dict] = {}
    for gt in gt_records:
        tag = gt.tag
        a = acc.setdefault(tag, {"samples": 0, "parse_failures": 0})
        a["samples"] += 1
        ans = _pred_answer(gt, preds[gt.id])
        if ans is None:
            a["parse_failures"] += 1
        if tag in (TaskTag.DETECTION, TaskTag.GROUNDING):
            m = match_boxes(gt.answer, ans or _empty(tag), iou_thresh)
            for k in ("tp", "fp", "fn"):
                a[k] = a.get(k, 0) + getattr(m, k)
            a.setdefault("ious", []).extend(p[2] for p in m.pairs)
            a["boxes"] = a.get("boxes", 0) + len(gt.answer.boxes) + len((ans or _empty(tag)).boxes)
        elif tag is TaskTag.SEG:
            iou, hits, den = score_seg(gt.answer, ans or _empty(tag), gt.space)
            a.setdefault("ious", []).append(iou)
            a["kp_hits"] = a.get("kp_hits", 0) + hits
            a["kp_den"] = a.get("kp_den", 0) + den
        elif tag is TaskTag.CHANGE:
            s = score_change(gt.answer, ans or _empty(tag), gt.space.canvas())
            for k in ("tp", "fp", "fn"):
                a[k] = a.get(k, 0) + s[k]
        elif tag is TaskTag.GEOLOC:
            a.setdefault("km", [])
            a.setdefault("city", 0)
            if ans is not None:
                km, same = score_geoloc(gt.answer, ans)
                a["km"].append(km)
                a["city"] += int(same)
        else:
            pred_text = (ans or _empty(tag)).text
            a["exact"] = a.get("exact", 0) + int(pred_text == gt.answer.text)
            a["norm"] = a.get("norm", 0) + int(normalize_text(pred_text) == normalize_text(gt.answer.text))

    tasks = {}
    for tag in TaskTag:
        if tag not in acc:
            continue
        a = acc[tag]
        t = {"samples": a["samples"], "parse_failures": a["parse_failures"]}
        if tag in (TaskTag.DETECTION, TaskTag.GROUNDING, TaskTag.CHANGE):
            precision, recall, f1 = prf(a["tp"], a["fp"], a["fn"])
            t.update({"tp": a["tp"], "fp": a["fp"], "fn": a["fn"], "precision": precision, "recall": recall, "f1": f1})
            if tag is not TaskTag.CHANGE:
                ious = a["ious"]
                t["mean_iou"] = sum(ious) / len(ious) if ious else (1.0 if a["boxes"] == 0 else 0.0)
        elif tag is TaskTag.SEG:
            t["mean_mask_iou"] = sum(a["ious"]) / len(a["ious"])
            t["keypoint_hit_rate"] = _rate(a["kp_hits"], a["kp_den"])
        elif tag is TaskTag.GEOLOC:
            km = a["km"]
            t["scored"] = len(km)
            t["mean_km"] = sum(km) / len(km) if km else None
            t["median_km"] = statistics.median(km) if km else None
            t["city_match_rate"] = a["city"] / a["samples"]
        else:
            t["exact_match_rate"] = a["exact"] / a["samples"]
            t["normalized_match_rate"] = a["norm"] / a["samples"]
        tasks[tag.value] = t
    return {
        "schema": REPORT_SCHEMA,
        "samples": len(gt_records),
        "parse_failures": sum(a["parse_failures"] for a in acc.values()),
        "iou_thresh": iou_thresh,
        "tasks": tasks,
    }


def evaluate_files(gt_path, pred_path, iou_thresh: float = 0.5) -> dict:
    from rsvlts.convert import read_records

    return evaluate(read_records(gt_path), read_predictions(pred_path), iou_thresh)


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def report_table(report: dict) -> str:
    rows = [("task", "metric", "value")]
    for task, metrics in report["tasks"].items():
        for k in sorted(metrics):
            rows.append((task, k, _fmt(metrics[k])))
    rows.append(("all", "samples", str(report["samples"])))
    rows.append(("all", "parse_failures", str(report["parse_failures"])))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = [f"{r[0]:<{widths[0]}}  {r[1]:<{widths[1]}}  {r[2]:>{widths[2]}}" for r in rows]
    return "\n".join(lines) + "\n"


def rates(report: dict) -> dict[str, float]:
    """Every rate-valued metric, keyed ``task.metric``."""
    names = {
        "precision", "recall", "f1", "mean_iou", "mean_mask_iou", "keypoint_hit_rate",
        "city_match_rate", "exact_match_rate", "normalized_match_rate",
    }
    return {f"{t}.{k}": v for t, m in report["tasks"].items() for k, v in m.items() if k in names}
