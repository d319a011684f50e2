"""Metric tables and histogram outlines written as CSV."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .blank import blank_region_deviation
from .divergence import sample_js
from .fid import activation_stats, fid
from .texture import FEATURES, FeatureStats, extract_nuclei_crops, feature_stats, histogram, pooled_edges

log = logging.getLogger(__name__)

INSUFFICIENT = "insufficient data"
REFERENCE = "permanent"
HIST_BINS = 64

METRIC_COLUMNS = (["dataset", "method", "n_images", "n_crops", "fid"]
                  + [f"{f}_{s}" for f in FEATURES for s in ("mean", "std")]
                  + [f"js_{f}" for f in FEATURES] + ["js_average", "blank_deviation"])


@dataclass
class ImageSet:
    name: str
    images: List[np.ndarray]
    masks: Optional[List[np.ndarray]] = None  # boolean nucleus masks; segmenter used when absent


@dataclass
class MetricsReport:
    rows: List[Dict[str, object]]
    stats: Dict[str, Optional[FeatureStats]] = field(default_factory=dict)

    def row(self, method: str) -> Dict[str, object]:
        for r in self.rows:
            if r["method"] == method:
                return r
        raise KeyError(method)


def _crop_stats(s: ImageSet, segmenter) -> Optional[FeatureStats]:
    crops = []
    for i, img in enumerate(s.images):
        mask = s.masks[i] if s.masks is not None else segmenter(img).binary
        crops += extract_nuclei_crops(img, mask)
    if len(crops) < 2:
        return None
    return feature_stats(crops)


def evaluate_sets(real: ImageSet, methods: Sequence[ImageSet], extractor: Callable,
                  segmenter: Callable, frozen: Optional[ImageSet] = None,
                  dataset: str = "dataset") -> MetricsReport:
    """One row for the real permanent set, then one per method compared against it.

    ``frozen`` enables the blank-region column for methods whose images are
    translations of it (same count and order).
    """
    real_act = activation_stats(real.images, extractor) if len(real.images) >= 2 else None
    stats = {REFERENCE: _crop_stats(real, segmenter)}
    rows = [_row(dataset, REFERENCE, real, stats[REFERENCE], real_act, real_act, stats[REFERENCE], None)]
    for m in methods:
        act = activation_stats(m.images, extractor) if len(m.images) >= 2 else None
        stats[m.name] = _crop_stats(m, segmenter)
        blank = None
        if frozen is not None and len(frozen.images) == len(m.images):
            blank = float(np.mean([blank_region_deviation(a, b).value
                                   for a, b in zip(frozen.images, m.images)]))
        rows.append(_row(dataset, m.name, m, stats[m.name], act, real_act, stats[REFERENCE], blank))
    return MetricsReport(rows, stats)


def _row(dataset, method, s, st, act, real_act, real_st, blank):
    row: Dict[str, object] = {"dataset": dataset, "method": method, "n_images": len(s.images),
                              "n_crops": st.n if st is not None else 0}
    row["fid"] = fid(act, real_act) if act is not None and real_act is not None else INSUFFICIENT
    for k, name in enumerate(FEATURES):
        row[f"{name}_mean"] = float(st.mean[k]) if st is not None else INSUFFICIENT
        row[f"{name}_std"] = float(st.std[k]) if st is not None else INSUFFICIENT
    js = []
    for name in FEATURES:
        if st is None or real_st is None:
            row[f"js_{name}"] = INSUFFICIENT
        else:
            v = sample_js(st.feature(name), real_st.feature(name), bins=HIST_BINS)
            row[f"js_{name}"] = v
            js.append(v)
    row["js_average"] = float(np.mean(js)) if len(js) == len(FEATURES) else INSUFFICIENT
    row["blank_deviation"] = "" if blank is None else blank
    return row


def write_metrics_csv(path, report: MetricsReport) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in report.rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def read_metrics_csv(path) -> List[Dict[str, object]]:
    """Numbers come back as int/float; text cells (blank or insufficient) stay strings."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for raw in csv.DictReader(fh):
            row: Dict[str, object] = {}
            for k, v in raw.items():
                if k in ("dataset", "method") or v in ("", INSUFFICIENT):
                    row[k] = v
                elif k in ("n_images", "n_crops"):
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            rows.append(row)
    return rows


def write_histograms(out_dir, stats: Mapping[str, Optional[FeatureStats]],
                     bins: int = HIST_BINS) -> List[Path]:
    """``hist_<feature>.csv``: bin_center then one density column per method.

    Methods without enough crops keep their column, with empty cells.
    """
    out_dir = Path(out_dir)
    present = {k: v for k, v in stats.items() if v is not None}
    paths = []
    if not present:
        return paths
    for name in FEATURES:
        edges = pooled_edges(*(s.feature(name) for s in present.values()), bins=bins)
        width = np.diff(edges)
        empty = [""] * bins
        cols = {k: empty if s is None else [repr(float(v)) for v in histogram(s.feature(name), edges).probs / width]
                for k, s in stats.items()}
        centers = 0.5 * (edges[:-1] + edges[1:])
        path = out_dir / f"hist_{name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_center"] + [f"density_{k}" for k in cols])
            for i, c in enumerate(centers):
                writer.writerow([repr(float(c))] + [v[i] for v in cols.values()])
        paths.append(path)
    return paths
