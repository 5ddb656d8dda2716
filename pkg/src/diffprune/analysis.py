"""Attention diagnostics: allocation by role, per-token efficiency,
aggregation concentration, and heatmap export."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pruning import QUERY_SETS
from .sequence import IMAGE, ROLES, AttentionRecord, SequenceLayout

CLIP_FLOOR = 1e-6
ROLE_COLORS = {
    "system": "#9e9e9e",
    "image": "#1f77b4",
    "instruction": "#2ca02c",
    "response": "#d62728",
}


@dataclass
class AllocationProfile:
    layers: list[int]
    shares: list[dict[str, float]]
    counts: list[dict[str, int]]

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"layer": l, "shares": s, "counts": c}
                for l, s, c in zip(self.layers, self.shares, self.counts)
            ]
        }


@dataclass
class EfficiencyProfile:
    layers: list[int]
    multipliers: list[dict[str, float]]

    def to_dict(self) -> dict:
        return {"layers": [{"layer": l, "multipliers": m} for l, m in zip(self.layers, self.multipliers)]}


def _query_rows(roles: list[str], queries: str) -> list[int]:
    allowed = QUERY_SETS[queries]
    rows = [i for i, r in enumerate(roles) if allowed is None or r in allowed]
    if not rows:
        raise ValueError(f"no live {queries!r} queries")
    return rows


def allocation_by_role(
    records: list[AttentionRecord], layout: SequenceLayout, queries: str = "all"
) -> AllocationProfile:
    """Share of attention mass landing on each key role, per captured layer.

    Mass is summed over the selected query rows and divided by their number
    (each row sums to one).
    """
    if not records:
        raise ValueError("no attention records to analyse")
    layers, shares, counts = [], [], []
    for rec in sorted(records, key=lambda r: r.layer):
        roles = rec.roles(layout)
        rows = _query_rows(roles, queries)
        col_mass = rec.weights[rows].sum(axis=0)
        total = col_mass.sum()
        share = {r: 0.0 for r in ROLES}
        count = {r: 0 for r in ROLES}
        for j, r in enumerate(roles):
            share[r] += float(col_mass[j])
            count[r] += 1
        layers.append(rec.layer)
        shares.append({r: share[r] / total for r in ROLES})
        counts.append(count)
    return AllocationProfile(layers, shares, counts)


def efficiency_multiplier(share: float, count: int, image_share: float, image_count: int) -> float:
    """Per-token share of a role relative to the per-token share of image tokens."""
    if image_share <= 0 or image_count <= 0:
        raise ValueError("image share is zero; the efficiency baseline is undefined")
    return (share / count) / (image_share / image_count)


def attention_efficiency(profile: AllocationProfile) -> EfficiencyProfile:
    """Per-token attention multipliers with the image role pinned at 1.0.

    Roles with no live tokens at a layer are left out of that layer.
    """
    out = []
    for share, count in zip(profile.shares, profile.counts):
        s_img, n_img = share[IMAGE], count[IMAGE]
        row = {}
        for r in ROLES:
            if count[r] == 0:
                continue
            row[r] = 1.0 if r == IMAGE else efficiency_multiplier(share[r], count[r], s_img, n_img)
        if IMAGE not in row or s_img <= 0:
            raise ValueError("image share is zero; the efficiency baseline is undefined")
        out.append(row)
    return EfficiencyProfile(list(profile.layers), out)


def _top_count(n: int, top_frac: float) -> int:
    # round first so 0.05 * 20 counts as exactly one key
    return max(1, math.ceil(round(top_frac * n, 9)))


def concentration_of(mass, top_frac: float = 0.05) -> float:
    """Fraction of total ``mass`` held by the top ceil(top_frac * n) entries."""
    mass = np.asarray(mass, dtype=np.float64)
    if not 0 < top_frac <= 1:
        raise ValueError("top_frac must lie in (0, 1]")
    if len(mass) < math.ceil(round(1.0 / top_frac, 9)):
        raise ValueError(f"need at least ceil(1/top_frac) keys, got {len(mass)}")
    total = mass.sum()
    if total <= 0:
        raise ValueError("no attention mass to concentrate")
    k = _top_count(len(mass), top_frac)
    if mass.min() == mass.max():
        # flat input: the ratio is exactly k/n, avoid summation rounding
        return k / len(mass)
    return float(np.sort(mass)[::-1][:k].sum() / total)


def aggregation_concentration(
    record: AttentionRecord,
    layout: SequenceLayout,
    top_frac: float = 0.05,
    queries: str = "text",
) -> float:
    """Band brightness proxy: share of text-to-image mass held by the top image keys."""
    roles = record.roles(layout)
    rows = _query_rows(roles, queries)
    cols = [j for j, r in enumerate(roles) if r == IMAGE]
    return concentration_of(record.weights[np.ix_(rows, cols)].sum(axis=0), top_frac)


# -- export ------------------------------------------------------------------


def heatmap_csv(record: AttentionRecord) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["query"] + list(record.live_index_map))
    for p, row in zip(record.live_index_map, record.weights):
        w.writerow([p] + [repr(float(v)) for v in row])
    return buf.getvalue()


def read_heatmap_csv(path) -> tuple[list[int], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    positions = [int(v) for v in rows[0][1:]]
    return positions, np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def _brightness(v: np.ndarray) -> np.ndarray:
    v = np.clip(v, 0.0, None)
    top = np.log1p(v.max() / CLIP_FLOOR) if v.max() > 0 else 1.0
    return np.log1p(v / CLIP_FLOOR) / top


def heatmap_svg(record: AttentionRecord, layout: SequenceLayout | None = None, cell: int = 8) -> str:
    n = len(record.live_index_map)
    band = 6 if layout is not None else 0
    pad = 2 + band
    size = pad + n * cell
    b = _brightness(record.weights)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f"<desc>layer {record.layer}; log intensity log(1+v/{CLIP_FLOOR:g}); "
        f"rows are queries, columns keys</desc>",
        f'<rect width="{size}" height="{size}" fill="#000000"/>',
    ]
    if layout is not None:
        for i, p in enumerate(record.live_index_map):
            color = ROLE_COLORS[layout.roles[p]]
            out.append(f'<rect x="{pad + i * cell}" y="0" width="{cell}" height="{band}" fill="{color}"/>')
            out.append(f'<rect x="0" y="{pad + i * cell}" width="{band}" height="{cell}" fill="{color}"/>')
    for i in range(n):
        for j in range(n):
            g = int(round(255 * float(b[i, j])))
            if g == 0:
                continue
            out.append(
                f'<rect x="{pad + j * cell}" y="{pad + i * cell}" width="{cell}" height="{cell}" '
                f'fill="rgb({g},{g},{g})"/>'
            )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export_heatmap(
    record: AttentionRecord, path, layout: SequenceLayout | None = None, csv_dir=None
) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (raw weights) and ``<path>.svg`` (log-scaled raster).

    ``csv_dir`` redirects the CSV into another directory.
    """
    path = Path(path)
    svg_path = path.with_suffix(".svg")
    csv_path = (Path(csv_dir) / path.name if csv_dir else path).with_suffix(".csv")
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    svg_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        fh.write(heatmap_csv(record))
    svg_path.write_text(heatmap_svg(record, layout))
    return csv_path, svg_path
