"""Grouped bar charts with error bars, written as parseable SVG.

Geometry encodes the plotted values exactly: the vertical scale is 256 px
per unit, so value = height / 256 round-trips through float arithmetic
without loss. Every bar also carries ``data-*`` attributes with the exact
repr of its mean and standard deviation.

One SVG per mask; each file holds two panels (pca left, dice right), bars
grouped by adaptation frame count with one bar per model, an error line of
plus/minus one standard deviation, and a horizontal matched-condition line.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Mapping, Sequence

from .errors import DataError
from .metrics import AggregateRecord

VALUE_SCALE = 256.0  # px per metric unit; power of two so height/scale is exact

_BAR_WIDTH = 18
_BAR_GAP = 6
_GROUP_GAP = 28
_MARGIN_LEFT = 56
_MARGIN_TOP = 40
_MARGIN_BOTTOM = 56
_PANEL_GAP = 64

_PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860")


def _panel(
    parent: ET.Element,
    origin_x: float,
    metric: str,
    mask_id: int,
    records: Sequence[AggregateRecord],
    matched_value: float,
    model_order: Sequence[str],
    k_order: Sequence[int],
) -> float:
    """Draw one metric panel; returns the x coordinate after the panel."""
    baseline = _MARGIN_TOP + VALUE_SCALE
    group_width = len(model_order) * (_BAR_WIDTH + _BAR_GAP) - _BAR_GAP
    panel_width = len(k_order) * (group_width + _GROUP_GAP)

    # Axes
    ET.SubElement(
        parent, "line",
        {"class": "axis", "x1": str(origin_x), "y1": str(baseline),
         "x2": str(origin_x + panel_width), "y2": str(baseline),
         "stroke": "#000000"},
    )
    ET.SubElement(
        parent, "line",
        {"class": "axis", "x1": str(origin_x), "y1": str(_MARGIN_TOP),
         "x2": str(origin_x), "y2": str(baseline), "stroke": "#000000"},
    )
    title = ET.SubElement(
        parent, "text",
        {"x": str(origin_x + panel_width / 2), "y": str(_MARGIN_TOP - 12),
         "text-anchor": "middle", "font-size": "14"},
    )
    title.text = f"{metric.upper()} - mask {mask_id}"

    by_key = {(r.model_name, r.k): r for r in records}
    for gi, k in enumerate(k_order):
        gx = origin_x + _GROUP_GAP / 2 + gi * (group_width + _GROUP_GAP)
        label = ET.SubElement(
            parent, "text",
            {"x": str(gx + group_width / 2), "y": str(baseline + 18),
             "text-anchor": "middle", "font-size": "12", "class": "k-label"},
        )
        label.text = f"k={k}"
        for mi, model in enumerate(model_order):
            rec = by_key.get((model, k))
            if rec is None:
                continue
            mean = rec.mean_pca if metric == "pca" else rec.mean_dice
            std = rec.std_pca if metric == "pca" else rec.std_dice
            height = mean * VALUE_SCALE
            x = gx + mi * (_BAR_WIDTH + _BAR_GAP)
            ET.SubElement(
                parent, "rect",
                {
                    "class": "bar",
                    "data-model": model,
                    "data-k": str(k),
                    "data-mask": str(mask_id),
                    "data-metric": metric,
                    "data-mean": repr(mean),
                    "data-std": repr(std),
                    "x": repr(x),
                    "y": repr(baseline - height),
                    "width": str(_BAR_WIDTH),
                    "height": repr(height),
                    "fill": _PALETTE[mi % len(_PALETTE)],
                },
            )
            cx = x + _BAR_WIDTH / 2
            ET.SubElement(
                parent, "line",
                {
                    "class": "errbar",
                    "data-model": model,
                    "data-k": str(k),
                    "data-mask": str(mask_id),
                    "data-metric": metric,
                    "x1": repr(cx), "x2": repr(cx),
                    "y1": repr(baseline - (mean + std) * VALUE_SCALE),
                    "y2": repr(baseline - (mean - std) * VALUE_SCALE),
                    "stroke": "#000000",
                },
            )
    ET.SubElement(
        parent, "line",
        {
            "class": "matched",
            "data-mask": str(mask_id),
            "data-metric": metric,
            "data-value": repr(matched_value),
            "x1": str(origin_x),
            "x2": str(origin_x + panel_width),
            "y1": repr(_MARGIN_TOP + VALUE_SCALE - matched_value * VALUE_SCALE),
            "y2": repr(_MARGIN_TOP + VALUE_SCALE - matched_value * VALUE_SCALE),
            "stroke": "#888888",
            "stroke-dasharray": "6,3",
        },
    )
    return origin_x + panel_width + _PANEL_GAP


def write_mask_figure(
    path: Path,
    mask_id: int,
    aggregates: Sequence[AggregateRecord],
    matched_values: Mapping[str, float],
) -> Path:
    """Write the two-panel (pca, dice) chart for one mask."""
    records = [a for a in aggregates if a.mask_id == mask_id]
    if not records:
        raise DataError(f"no aggregate records for mask {mask_id}")
    for metric in ("pca", "dice"):
        if metric not in matched_values:
            raise DataError(f"missing matched {metric} value for mask {mask_id}")
    model_order = sorted({r.model_name for r in records})
    k_order = sorted({r.k for r in records})

    group_width = len(model_order) * (_BAR_WIDTH + _BAR_GAP) - _BAR_GAP
    panel_width = len(k_order) * (group_width + _GROUP_GAP)
    total_width = _MARGIN_LEFT + 2 * panel_width + _PANEL_GAP + _MARGIN_LEFT
    total_height = _MARGIN_TOP + VALUE_SCALE + _MARGIN_BOTTOM

    svg = ET.Element(
        "svg",
        {
            "xmlns": "http://www.w3.org/2000/svg",
            "width": str(total_width),
            "height": str(total_height),
            "viewBox": f"0 0 {total_width} {total_height}",
        },
    )
    x = float(_MARGIN_LEFT)
    for metric in ("pca", "dice"):
        x = _panel(
            svg, x, metric, mask_id, records,
            matched_values[metric], model_order, k_order,
        )

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ET.ElementTree(svg).write(path, encoding="unicode", xml_declaration=True)
    return path


def write_report_figures(
    out_dir: Path,
    aggregates: Sequence[AggregateRecord],
    matched_by_mask: Mapping[int, Mapping[str, float]],
) -> list[Path]:
    """One figure per mask id present in the aggregates."""
    out_dir = Path(out_dir)
    paths = []
    for mask_id in sorted({a.mask_id for a in aggregates}):
        if mask_id not in matched_by_mask:
            raise DataError(f"missing matched baseline for mask {mask_id}")
        paths.append(
            write_mask_figure(
                out_dir / f"mask{mask_id}.svg",
                mask_id,
                aggregates,
                matched_by_mask[mask_id],
            )
        )
    return paths
