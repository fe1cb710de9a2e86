"""Segmentation evaluation: overlap, protocol surface distance, line
straightness, and paired nonparametric testing.

PASD (protocol-aligned surface distance) is a one-way mean nearest
neighbor distance: from each ground-truth voxel center on a protocol
boundary surface to the closest predicted voxel of the structure on the
matching anatomical side.  It is deliberately asymmetric; swapping the
arguments answers a different question.

Separation lines capture the 2D behavior of a boundary inside single
slices: the line is the coordinate of the first neighbor-label voxel
met when scanning each in-slice row from the structure's side.  MAE
compares the predicted line to the reference one; sigma_y is the
population spread of the predicted line itself, 0 for a perfectly
straight boundary.

The Wilcoxon signed-rank test uses the exact permutation null for
n <= 20 (zero differences dropped) and a tie-corrected normal
approximation above; Benjamini-Hochberg controls the FDR across
columns.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import norm

from .labels import FINE_HEMISPHERE, FINE_NAME, LandmarkSet
from .nifti import Volume, reorient_to_canonical
from .refine import coronal_slice_index

logger = logging.getLogger("hoarefine.metrics")


class MetricError(Exception):
    """Inputs unsuitable for evaluation (misaligned grids etc.)."""


class MetricUndefinedError(MetricError):
    """The metric has no value on these inputs (empty sets, too few pairs)."""


# ---------------------------------------------------------------------------
# overlap

def dice(pred: Volume, gt: Volume, label: int) -> float:
    """Dice overlap of one label: 2|P&G| / (|P|+|G|); both-empty = 1.0."""
    p = np.asarray(pred.data) == label
    g = np.asarray(gt.data) == label
    if p.shape != g.shape:
        raise MetricError(f"dimension mismatch: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        logger.warning("dice(label=%d): both masks empty, returning 1.0", label)
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


# ---------------------------------------------------------------------------
# protocol boundaries

@dataclass(frozen=True)
class BoundarySide:
    side: str            # left | right | mid
    label: int           # fine id of the structure on this side
    neighbor: int        # fine id across the boundary
    landmark: int | None  # defining landmark (None for lateral surfaces)
    exclusive: bool      # structure starts one slice beyond the landmark


@dataclass(frozen=True)
class BoundarySpec:
    region: str
    surface: str         # anterior | posterior | lateral
    sides: tuple[BoundarySide, ...]

    def side(self, name: str) -> BoundarySide:
        for s in self.sides:
            if s.side == name:
                return s
        raise MetricError(f"{self.region} ({self.surface}) has no side {name!r}")


def _bilateral(region, surface, labels, neighbors, landmarks, exclusive):
    return BoundarySpec(region, surface, (
        BoundarySide("left", labels[0], neighbors[0],
                     landmarks[0] if landmarks else None, exclusive),
        BoundarySide("right", labels[1], neighbors[1],
                     landmarks[1] if landmarks else None, exclusive),
    ))


DEFAULT_BOUNDARIES: tuple[BoundarySpec, ...] = (
    _bilateral("IH", "posterior", (17, 18), (1, 2), (13, 14), exclusive=True),
    _bilateral("NAcc", "lateral", (6, 7), (10, 11), None, exclusive=False),
    _bilateral("NAcc", "posterior", (6, 7), (10, 11), (7, 8), exclusive=False),
    _bilateral("Put", "anterior", (10, 11), (6, 7), (1, 2), exclusive=False),
    _bilateral("Put", "lateral", (10, 11), (6, 7), None, exclusive=False),
    BoundarySpec("3V", "anterior", (
        BoundarySide("mid", 4, 3, 9, exclusive=False),)),
    _bilateral("VDC_A", "posterior", (23, 24), (25, 26), (11, 12), exclusive=True),
    _bilateral("VDC_P", "anterior", (25, 26), (23, 24), (11, 12), exclusive=False),
)


def _surface_slice(vol: Volume, bside: BoundarySide, surface: str,
                   lms: LandmarkSet) -> int:
    if bside.landmark is None:
        raise MetricError(f"surface {surface!r} has no landmark plane")
    if bside.landmark not in lms:
        raise MetricUndefinedError(f"landmark #{bside.landmark} missing")
    j = coronal_slice_index(vol, lms[bside.landmark])
    if not bside.exclusive:
        return j
    # structure holds no voxels on the plane slice itself; its face is
    # one slice beyond, toward the structure
    return j + 1 if surface == "posterior" else j - 1


def extract_protocol_surface(gt: Volume, spec: BoundarySpec, lms: LandmarkSet,
                             side: str) -> np.ndarray:
    """World-mm voxel centers of the GT label's protocol boundary face.

    Coronal surfaces are the label's voxels on the landmark plane slice
    (shifted one slice toward the structure for exclusive boundaries).
    Lateral surfaces are, per coronal slice containing both the label
    and its neighbor, the row-wise label voxel closest to the separator:
    the most lateral voxel of a medial structure and vice versa.
    """
    bside = spec.side(side)
    can, _ = reorient_to_canonical(gt)
    data = can.data
    if spec.surface in ("anterior", "posterior"):
        j = _surface_slice(can, bside, spec.surface, lms)
        if not 0 <= j < data.shape[1]:
            raise MetricUndefinedError(
                f"{spec.region} ({spec.surface}, {side}): plane slice {j} "
                "outside the volume")
        ii, kk = np.nonzero(data[:, j, :] == bside.label)
        if ii.size == 0:
            raise MetricUndefinedError(
                f"{spec.region} ({spec.surface}, {side}): label {bside.label} "
                f"absent at plane slice {j}")
        idx = (ii, np.full(ii.shape, j), kk)
        return can.voxel_to_world(np.stack(idx, axis=1).astype(np.float64))

    if spec.surface != "lateral":
        raise MetricError(f"unknown surface kind {spec.surface!r}")
    pts = []
    nx = data.shape[0]
    xs_axis = can.voxel_to_world(
        np.column_stack([np.arange(nx, dtype=np.float64),
                         np.zeros(nx), np.zeros(nx)]))[:, 0]
    for j in range(data.shape[1]):
        sl_label = data[:, j, :] == bside.label
        if not sl_label.any() or not (data[:, j, :] == bside.neighbor).any():
            continue
        for k in np.unique(np.nonzero(sl_label)[1]):
            col = np.nonzero(sl_label[:, k])[0]
            absx = np.abs(xs_axis[col])
            pick = col[np.argmax(absx)] if _is_medial(bside) else col[np.argmin(absx)]
            pts.append((pick, j, int(k)))
    if not pts:
        raise MetricUndefinedError(
            f"{spec.region} (lateral, {side}): no slice contains both label "
            f"{bside.label} and neighbor {bside.neighbor}")
    return can.voxel_to_world(np.asarray(pts, dtype=np.float64))


def _is_medial(bside: BoundarySide) -> bool:
    # NAcc sits medial to Put; the medial structure's separator face is
    # its most lateral row voxel
    return bside.label in (6, 7)


def pasd(gt: Volume, pred: Volume, spec: BoundarySpec, lms: LandmarkSet,
         side: str, side_filter: bool = True) -> float:
    """One-way mean distance (mm) from the GT protocol surface to the
    predicted structure's voxels on the matching side.

    side_filter keeps predicted voxels on the structure's side of the
    landmark plane (plane slice included); pass False to use every
    predicted voxel of the label.  Lateral surfaces always use the
    whole label.  Undefined (raises) when either set is empty.
    """
    _check_aligned(pred, gt)
    bside = spec.side(side)
    surface = extract_protocol_surface(gt, spec, lms, side)
    can, _ = reorient_to_canonical(pred)
    mask = can.data == bside.label
    if side_filter and spec.surface in ("anterior", "posterior") \
            and bside.landmark in lms:
        j_lm = coronal_slice_index(can, lms[bside.landmark])
        jgrid = np.arange(mask.shape[1], dtype=np.int64)[None, :, None]
        keep = jgrid >= j_lm if spec.surface == "posterior" else jgrid <= j_lm
        mask = mask & keep
    idx = np.nonzero(mask)
    if idx[0].size == 0:
        raise MetricUndefinedError(
            f"{spec.region} ({spec.surface}, {side}): no predicted voxels of "
            f"label {bside.label} on the evaluation side")
    pred_pts = can.voxel_to_world(np.stack(idx, axis=1).astype(np.float64))
    dists, _ = cKDTree(pred_pts).query(surface, k=1)
    return float(np.mean(dists))


def _check_aligned(a: Volume, b: Volume) -> None:
    if a.dims != b.dims:
        raise MetricError(f"volume dims differ: {a.dims} vs {b.dims}")
    if not np.allclose(a.affine, b.affine, atol=1e-6):
        raise MetricError("volume affines differ beyond 1e-6")


# ---------------------------------------------------------------------------
# separation lines

def line_metrics(pred_y, gt_y) -> tuple[float, float]:
    """MAE between paired line positions and sigma_y of the predicted line.

    sigma_y is the population standard deviation (divisor N), so a
    constant line scores exactly 0.
    """
    pred_y = np.asarray(pred_y, dtype=np.float64)
    gt_y = np.asarray(gt_y, dtype=np.float64)
    if pred_y.shape != gt_y.shape or pred_y.ndim != 1:
        raise MetricError("line positions must be equal-length 1D sequences")
    if pred_y.size == 0:
        raise MetricUndefinedError("empty line")
    mae = float(np.mean(np.abs(pred_y - gt_y)))
    if np.all(pred_y == pred_y[0]):
        sigma = 0.0  # constant line; keep the mean's rounding dust out
    else:
        sigma = float(np.sqrt(np.mean((pred_y - pred_y.mean()) ** 2)))
    return mae, sigma


def extract_separation_line(vol: Volume, slice_axis: int, slice_index: int,
                            labels: tuple[int, int], scan_axis: int,
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Boundary line between labels A and B inside one slice.

    Returns (row indices, world mm positions along the scan axis) of the
    first B voxel met scanning from the A side, one entry per in-slice
    row containing both labels.  The scan direction comes from the two
    labels' mean positions within the slice.  Assumes a canonical-frame
    volume (axis-aligned affine).
    """
    if slice_axis == scan_axis:
        raise MetricError("scan axis must differ from slice axis")
    a_id, b_id = labels
    data = np.asarray(vol.data)
    if not 0 <= slice_index < data.shape[slice_axis]:
        raise MetricError(f"slice {slice_index} outside axis {slice_axis}")
    sl = np.take(data, slice_index, axis=slice_axis)
    # axes of sl: the two volume axes != slice_axis, in ascending order
    kept = [ax for ax in range(3) if ax != slice_axis]
    scan_pos = kept.index(scan_axis)
    if scan_pos != 0:
        sl = sl.T
    row_axis = kept[1 - kept.index(scan_axis)]

    a_mask = sl == a_id
    b_mask = sl == b_id
    if not a_mask.any() or not b_mask.any():
        missing = a_id if not a_mask.any() else b_id
        raise MetricUndefinedError(f"slice {slice_index} lacks label {missing}")
    scan_idx = np.arange(sl.shape[0], dtype=np.float64)[:, None]
    mean_a = float((scan_idx * a_mask).sum() / a_mask.sum())
    mean_b = float((scan_idx * b_mask).sum() / b_mask.sum())
    if mean_a == mean_b:
        raise MetricUndefinedError("labels interleave symmetrically; no scan side")
    ascending = mean_a < mean_b

    rows = []
    positions = []
    for r in range(sl.shape[1]):
        col_a = a_mask[:, r]
        col_b = b_mask[:, r]
        if not col_a.any() or not col_b.any():
            continue
        hits = np.nonzero(col_b)[0]
        first = hits[0] if ascending else hits[-1]
        rows.append(r)
        positions.append(first)
    if not rows:
        raise MetricUndefinedError(
            f"slice {slice_index}: no row contains both labels {labels}")
    pts = np.zeros((len(rows), 3), dtype=np.float64)
    pts[:, scan_axis] = positions
    pts[:, slice_axis] = slice_index
    pts[:, row_axis] = rows
    world = vol.voxel_to_world(pts)[:, scan_axis]
    return np.asarray(rows, dtype=np.int64), world


# ---------------------------------------------------------------------------
# paired testing

def wilcoxon_signed_rank(a, b) -> tuple[float, float]:
    """Two-sided paired Wilcoxon signed-rank test: (W+, p).

    Zero differences are dropped (the original method).  Exact
    permutation p for n <= 20 nonzero pairs via the full sign-flip null
    (computed by subset-sum counting, identical to enumerating all 2^n
    assignments); tie-corrected normal approximation beyond.  Fewer than
    5 nonzero pairs is an error.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d[d != 0.0]
    n = d.size
    if n < 5:
        raise MetricUndefinedError(f"need >= 5 nonzero pairs, got {n}")
    absd = np.abs(d)
    order = np.argsort(absd, kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    sorted_abs = absd[order]
    i = 0
    rank_of_sorted = np.empty(n, dtype=np.float64)
    while i < n:
        j = i
        while j + 1 < n and sorted_abs[j + 1] == sorted_abs[i]:
            j += 1
        rank_of_sorted[i:j + 1] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    ranks[order] = rank_of_sorted
    w_plus = float(ranks[d > 0].sum())

    if n <= 20:
        # doubled ranks are integers even with ties
        r2 = np.rint(2.0 * ranks).astype(np.int64)
        total2 = int(r2.sum())
        counts = np.zeros(total2 + 1, dtype=np.float64)
        counts[0] = 1.0
        for r in r2:
            counts[r:] += counts[:counts.size - r].copy()
        mu2 = total2 / 2.0
        dev = abs(2.0 * w_plus - mu2)
        sums = np.arange(total2 + 1, dtype=np.float64)
        extreme = np.abs(sums - mu2) >= dev - 1e-9
        p = float(counts[extreme].sum() / counts.sum())
        return w_plus, min(p, 1.0)

    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(absd, return_counts=True)
    var -= float(np.sum(tie_counts**3 - tie_counts)) / 48.0
    if var <= 0:
        raise MetricUndefinedError("zero variance after tie correction")
    z = (w_plus - mu) / np.sqrt(var)
    return w_plus, float(2.0 * norm.sf(abs(z)))


def benjamini_hochberg(pvalues, q: float) -> np.ndarray:
    """BH step-up: boolean significance flags at FDR level q."""
    p = np.asarray(pvalues, dtype=np.float64)
    m = p.size
    flags = np.zeros(m, dtype=bool)
    if m == 0:
        return flags
    order = np.argsort(p, kind="stable")
    thresh = q * (np.arange(1, m + 1) / m)
    passing = np.nonzero(p[order] <= thresh)[0]
    if passing.size:
        cutoff = passing[-1]
        flags[order[:cutoff + 1]] = True
    return flags


@dataclass(frozen=True)
class PairedSampleTable:
    """Per-subject values for two methods over named columns."""

    subjects: tuple[str, ...]
    columns: tuple[str, ...]
    a: np.ndarray  # (n_subjects, n_columns)
    b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        want = (len(self.subjects), len(self.columns))
        if a.shape != want or b.shape != want:
            raise MetricError(
                f"table shapes {a.shape}/{b.shape} do not match "
                f"{len(self.subjects)} subjects x {len(self.columns)} columns")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)


def wilcoxon_fdr(table: PairedSampleTable, q: float = 0.05):
    """Per-column Wilcoxon tests with BH correction across columns.

    Returns a list of dicts (column, statistic, p_value, significant).
    Columns with fewer than 5 nonzero differences get NaN p-values and
    are excluded from the BH family.
    """
    stats, pvals = [], []
    for c in range(len(table.columns)):
        try:
            w, p = wilcoxon_signed_rank(table.a[:, c], table.b[:, c])
        except MetricUndefinedError:
            w, p = float("nan"), float("nan")
        stats.append(w)
        pvals.append(p)
    defined = [i for i, p in enumerate(pvals) if not np.isnan(p)]
    flags = [False] * len(pvals)
    if defined:
        sub = benjamini_hochberg([pvals[i] for i in defined], q)
        for i, f in zip(defined, sub):
            flags[i] = bool(f)
    return [
        {"column": col, "statistic": stats[i], "p_value": pvals[i],
         "significant": flags[i]}
        for i, col in enumerate(table.columns)
    ]


# ---------------------------------------------------------------------------
# full report

@dataclass(frozen=True)
class MetricRow:
    metric: str   # dice | pasd | mae | sigma_y
    region: str
    surface: str  # "" for dice
    side: str     # left | right | mid
    value: float


@dataclass
class MetricReport:
    subject: str
    rows: list[MetricRow] = field(default_factory=list)

    def mean(self, metric: str) -> float:
        vals = [r.value for r in self.rows if r.metric == metric]
        if not vals:
            raise MetricUndefinedError(f"no {metric} rows in report")
        return float(np.mean(vals))

    def to_json(self) -> str:
        doc = {
            "subject": self.subject,
            "rows": [vars(r) for r in self.rows],
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        doc = json.loads(text)
        return cls(doc["subject"], [MetricRow(**r) for r in doc["rows"]])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["subject", "metric", "region", "surface", "side", "value"])
        for r in self.rows:
            w.writerow([self.subject, r.metric, r.region, r.surface, r.side,
                        repr(r.value)])
        return buf.getvalue()


def _region_side(fine_id: int) -> tuple[str, str]:
    name = FINE_NAME[fine_id]
    hemi = FINE_HEMISPHERE[fine_id]
    if hemi in ("left", "right") and name.endswith(("_L", "_R")):
        return name[:-2], hemi
    return name, "mid"


def evaluate_pair(pred26: Volume, gt26: Volume, lms: LandmarkSet,
                  boundaries: tuple[BoundarySpec, ...] = DEFAULT_BOUNDARIES,
                  subject: str = "subject") -> MetricReport:
    """Full per-subject report: Dice per label, PASD and line metrics
    per protocol boundary side.  Boundaries undefined on these volumes
    (absent labels) are skipped.
    """
    _check_aligned(pred26, gt26)
    report = MetricReport(subject)
    present = sorted(
        set(np.unique(gt26.data).tolist()) | set(np.unique(pred26.data).tolist()))
    for label in present:
        if label == 0:
            continue
        region, side = _region_side(int(label))
        report.rows.append(MetricRow(
            "dice", region, "", side, dice(pred26, gt26, int(label))))

    pred_can, _ = reorient_to_canonical(pred26)
    gt_can, _ = reorient_to_canonical(gt26)
    for spec in boundaries:
        for bside in spec.sides:
            try:
                value = pasd(gt_can, pred_can, spec, lms, bside.side)
            except MetricUndefinedError:
                continue
            report.rows.append(MetricRow(
                "pasd", spec.region, spec.surface, bside.side, value))
    for spec in boundaries:
        for bside in spec.sides:
            agg = _line_metrics_for_boundary(pred_can, gt_can, spec, bside)
            if agg is None:
                continue
            mae, sigma = agg
            report.rows.append(MetricRow(
                "mae", spec.region, spec.surface, bside.side, mae))
            report.rows.append(MetricRow(
                "sigma_y", spec.region, spec.surface, bside.side, sigma))
    return report


def _line_metrics_for_boundary(pred_can, gt_can, spec, bside):
    """Mean per-slice (MAE, sigma_y) for one boundary side, or None.

    Coronal boundaries are read in sagittal slices scanning along y;
    lateral boundaries in coronal slices scanning along x.  A slice
    contributes when both volumes yield a line and share rows.
    """
    if spec.surface in ("anterior", "posterior"):
        slice_axis, scan_axis = 0, 1
        # scan from the posterior label's side toward anterior
        if spec.surface == "posterior":
            pair = (bside.neighbor, bside.label)
        else:
            pair = (bside.label, bside.neighbor)
    else:
        slice_axis, scan_axis = 1, 0
        pair = (bside.label, bside.neighbor)
    maes, sigmas = [], []
    n_slices = pred_can.dims[slice_axis]
    for s in range(n_slices):
        try:
            rows_p, ys_p = extract_separation_line(
                pred_can, slice_axis, s, pair, scan_axis)
            rows_g, ys_g = extract_separation_line(
                gt_can, slice_axis, s, pair, scan_axis)
        except MetricUndefinedError:
            continue
        common, ip, ig = np.intersect1d(rows_p, rows_g, return_indices=True)
        if common.size == 0:
            continue
        mae, sigma = line_metrics(ys_p[ip], ys_g[ig])
        maes.append(mae)
        sigmas.append(sigma)
    if not maes:
        return None
    return float(np.mean(maes)), float(np.mean(sigmas))
