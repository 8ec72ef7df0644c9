"""Clean vs. attacked AP measurement and Table-style reports."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .boxes import iou
from .metrics import IOU_THRESHOLDS, Detection, ap_range, average_precision
from .pattern import AdversarialPattern
from .training import attack_image

__all__ = ["iou", "average_precision", "ap_range", "Detection", "MetricsReport", "evaluate_attack",
           "collect_detections", "format_ap_table", "format_resolution_table"]

WITHOUT_ATTACK = "without_attack"
WITH_ATTACK = "with_attack"
METRICS = ("ap_50_95", "ap_50", "ap_75")
METRIC_TITLES = {"ap_50_95": "AP@IoU=0.50:0.95", "ap_50": "AP@0.50", "ap_75": "AP@0.75"}


@dataclass
class MetricsReport:
    """``rows[detector][condition]`` holds the three AP figures."""

    rows: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for det, conds in self.rows.items():
            for cond, vals in conds.items():
                for k, v in vals.items():
                    if not 0.0 <= v <= 1.0:
                        raise ValueError(f"{det}/{cond}/{k} = {v} is outside [0, 1]")

    @property
    def detectors(self) -> list:
        return list(self.rows)

    @property
    def conditions(self) -> list:
        seen = []
        for conds in self.rows.values():
            for c in conds:
                if c not in seen:
                    seen.append(c)
        if WITHOUT_ATTACK in seen:
            seen.remove(WITHOUT_ATTACK)
            seen.insert(0, WITHOUT_ATTACK)
        return seen

    def get(self, detector: str, condition: str, metric: str = "ap_50") -> float:
        return self.rows[detector][condition][metric]

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        rows = {d: {c: dict(v) for c, v in conds.items()} for d, conds in self.rows.items()}
        for d, conds in other.rows.items():
            rows.setdefault(d, {}).update({c: dict(v) for c, v in conds.items()})
        meta = dict(self.metadata)
        for k, v in other.metadata.items():
            if k not in meta or meta[k] == v:
                meta[k] = v
            else:
                meta[k] = {"conflict": [meta[k], v]}
        return MetricsReport(rows, meta)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "metadata": self.metadata}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1, sort_keys=True)
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, doc) -> "MetricsReport":
        return cls(doc.get("rows", {}), doc.get("metadata", {}))

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def table(self) -> str:
        return format_ap_table(self)


def collect_detections(adapter, entries, pattern=None):
    """Run the detector over (optionally attacked) images.

    Returns ``(detections, ground_truths)`` in the form expected by
    :func:`average_precision`.
    """
    dets, gts = [], {}
    for k, e in enumerate(entries):
        gts[k] = [b.as_array() for b in e.person_boxes]
        if pattern is not None and e.garments:
            with torch.no_grad():
                image = attack_image(e, pattern).numpy()
        else:
            image = e.image
        boxes, scores = adapter.detect(image)
        dets += [Detection(tuple(map(float, b)), float(np.clip(s, 0, 1)), k) for b, s in zip(boxes, scores)]
    return dets, gts


def evaluate_attack(adapter, dataset, pattern: AdversarialPattern | None = None, condition: str | None = None,
                    metadata: dict | None = None) -> MetricsReport:
    """AP@0.50:0.95, AP@0.50 and AP@0.75 of ``adapter`` on clean or attacked images.

    Without a pattern the row is filed under ``without_attack``; with one it
    defaults to ``with_attack`` unless ``condition`` names it.
    """
    entries = list(getattr(dataset, "entries", dataset))
    if not any(e.person_boxes for e in entries):
        raise ValueError("evaluation needs ground-truth person boxes")
    dets, gts = collect_detections(adapter, entries, pattern)
    cond = condition or (WITHOUT_ATTACK if pattern is None else WITH_ATTACK)
    per_thresh = {t: average_precision(dets, gts, t) for t in IOU_THRESHOLDS}
    values = {"ap_50_95": float(np.mean(list(per_thresh.values()))),
              "ap_50": per_thresh[0.5], "ap_75": per_thresh[0.75]}
    meta = {"images": len(entries), "ground_truths": sum(len(g) for g in gts.values())}
    if pattern is not None:
        meta["pattern_resolution"] = int(pattern.pixels.shape[0])
    meta.update(metadata or {})
    return MetricsReport({adapter.name: {cond: values}}, meta)


def _label(cond: str) -> str:
    return {WITHOUT_ATTACK: "w/o attack", WITH_ATTACK: "attack"}.get(cond, cond)


def format_ap_table(report: MetricsReport, conditions=None) -> str:
    """Detector rows; for each AP metric one column per condition."""
    conds = conditions or report.conditions
    header1 = ["Target model"] + [METRIC_TITLES[m] if i == 0 else "" for m in METRICS for i in range(len(conds))]
    header2 = [""] + [_label(c) for _ in METRICS for c in conds]
    body = []
    for det in report.detectors:
        row = [det]
        for m in METRICS:
            for c in conds:
                v = report.rows[det].get(c, {}).get(m)
                row.append("-" if v is None else f"{v:.3f}")
        body.append(row)
    return _align([header1, header2] + body, group=len(conds))


def format_resolution_table(report: MetricsReport, conditions, metric: str = "ap_50") -> str:
    """Conditions as rows (e.g. w/o attack, p 200, p 100, p 50), detectors as columns."""
    header = [METRIC_TITLES[metric]] + report.detectors
    body = []
    for c in conditions:
        body.append([_label(c)] + [f"{report.rows[d][c][metric]:.3f}" if c in report.rows[d] else "-"
                                   for d in report.detectors])
    return _align([header] + body)


def _align(rows, group: int | None = None) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for r in rows:
        cells = [str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(r, widths))]
        if group:
            parts = [cells[0]] + ["  ".join(cells[1 + g * group: 1 + (g + 1) * group])
                                  for g in range((len(cells) - 1) // group)]
            lines.append(" | ".join(parts))
        else:
            lines.append(" | ".join(cells))
    rule = "-" * max(len(line) for line in lines)
    return "\n".join([lines[0], *(lines[1:2] if group else []), rule,
                      *(lines[2:] if group else lines[1:])])
