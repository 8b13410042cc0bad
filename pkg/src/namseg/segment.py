"""From activation map to final mask.

Stages: watershed scoping on the map, multi-phase ICM labeling of the
image window around the scope, candidate extraction from the brightest
phase, and residual-map screening to pick the candidate that actually
drives the activation.

Pixel coordinates in Scope/Candidate pixel sets and bboxes are (x, y)
with x = column; ndarray masks index as mask[y, x].
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import model as M
from .errors import (DegenerateMapError, DomainError, GeometryError,
                     SelectionError)
from .nam import Nam, compute_nam, compute_rnam, nam_distance

FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])

ONE_GAP_C1 = "one_gap_C1"
MULTI_GAP_CMULTI = "multi_gap_Cmulti"

# fraction of the blob peak a pixel must reach to stay in the scope
DEFAULT_SCOPE_TAU = 0.4
# ICM smoothness auto-rule: beta = 0.25 * (window intensity range)^2, capped
BETA_CAP = 0.25
MIN_CANDIDATE_AREA = 4


def _bbox_of(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


@dataclass
class Scope:
    """Connected pixel region constraining candidate screening."""
    mask: np.ndarray
    origin_kind: str = ONE_GAP_C1

    @property
    def pixels(self) -> set[tuple[int, int]]:
        ys, xs = np.nonzero(self.mask)
        return {(int(x), int(y)) for x, y in zip(xs, ys)}

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        return _bbox_of(self.mask)


@dataclass
class Candidate:
    """4-connected bright region proposed by coarse segmentation."""
    mask: np.ndarray

    @property
    def pixels(self) -> set[tuple[int, int]]:
        ys, xs = np.nonzero(self.mask)
        return {(int(x), int(y)) for x, y in zip(xs, ys)}

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        return _bbox_of(self.mask)


@dataclass
class IcmConfig:
    phases: int = 4
    beta: float | None = None        # None -> auto from window intensity range
    max_iters: int = 30
    window_margin: int = 8

    def validate(self):
        if self.phases < 2:
            raise DomainError("phases must be >= 2")
        if self.beta is not None and self.beta < 0:
            raise DomainError("beta must be >= 0")
        if self.max_iters < 1:
            raise DomainError("max_iters must be >= 1")


# -- watershed ---------------------------------------------------------------

def _watershed_basins(v: np.ndarray):
    """Flood the map downhill from its regional maxima (4-connectivity).

    Returns (labels, peaks) where labels[y,x] is a basin id and peaks is
    a list of (peak_value, (peak_y, peak_x)) indexed by id, ordered by
    descending peak value (scan order breaks ties). Every pixel gets a
    basin; ties during flooding go to the earliest-queued neighbor.
    """
    h, w = v.shape
    labels = np.full((h, w), -1, dtype=np.int32)

    # regional maxima: equal-value plateaus with no strictly greater neighbor
    plateau = _equal_plateaus(v)
    nplat = int(plateau.max())
    is_max = np.ones(nplat + 1, bool)
    is_max[0] = False
    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        # compare each pixel with its (dy,dx) neighbor on the overlap region
        src = v[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)]
        dst = v[max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)]
        ids = plateau[max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)]
        is_max[np.unique(ids[src > dst])] = False

    seeds = []
    for pid in range(1, nplat + 1):
        if not is_max[pid]:
            continue
        ys, xs = np.nonzero(plateau == pid)
        peak_val = v[ys[0], xs[0]]
        seeds.append((float(peak_val), (int(ys[0]), int(xs[0])), ys, xs))
    seeds.sort(key=lambda s: (-s[0], s[1]))

    heap = []
    counter = 0
    peaks = []
    for label_id, (val, peak, ys, xs) in enumerate(seeds):
        peaks.append((val, peak))
        labels[ys, xs] = label_id
        for y, x in zip(ys, xs):
            heapq.heappush(heap, (-v[y, x], counter, int(y), int(x)))
            counter += 1
    while heap:
        _, _, y, x = heapq.heappop(heap)
        lab = labels[y, x]
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and labels[ny, nx] < 0:
                labels[ny, nx] = lab
                heapq.heappush(heap, (-v[ny, nx], counter, ny, nx))
                counter += 1
    return labels, peaks


def _equal_plateaus(v: np.ndarray) -> np.ndarray:
    """Label 4-connected components of equal value."""
    h, w = v.shape
    plateau = np.zeros((h, w), dtype=np.int32)
    next_id = 0
    for y in range(h):
        for x in range(w):
            if plateau[y, x]:
                continue
            next_id += 1
            val = v[y, x]
            stack = [(y, x)]
            plateau[y, x] = next_id
            while stack:
                cy, cx = stack.pop()
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    ny, nx = cy + dy, cx + dx
                    if 0 <= ny < h and 0 <= nx < w and not plateau[ny, nx] \
                            and v[ny, nx] == val:
                        plateau[ny, nx] = next_id
                        stack.append((ny, nx))
    return plateau


def _component_containing(mask: np.ndarray, pixel: tuple[int, int]) -> np.ndarray:
    comps, _ = ndimage.label(mask, structure=FOUR_CONN)
    lab = comps[pixel]
    if lab == 0:
        return np.zeros_like(mask)
    return comps == lab


def _threshold_basin(v, labels, peaks, basin_id, tau):
    """Crop a basin to its above-threshold component around the peak."""
    peak_val, peak = peaks[basin_id]
    thr = tau * peak_val if peak_val > 0 else peak_val
    region = (labels == basin_id) & (v >= thr)
    return _component_containing(region, peak)


def extract_scope(nam: Nam, tau: float = DEFAULT_SCOPE_TAU) -> Scope:
    """Catchment basin of the map's global maximum, cropped to >= tau * max.

    Raises DegenerateMapError on a constant map (no distinct maximum).
    """
    v = np.asarray(nam.map, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise DegenerateMapError("non-finite map")
    if v.max() == v.min():
        raise DegenerateMapError("constant map has no distinct maximum")
    labels, peaks = _watershed_basins(v)
    argmax = np.unravel_index(np.argmax(v), v.shape)
    basin_id = int(labels[argmax])
    mask = _threshold_basin(v, labels, peaks, basin_id, tau)
    return Scope(mask=mask, origin_kind=ONE_GAP_C1)


def extract_top_scopes(nam: Nam, n: int, tau: float = DEFAULT_SCOPE_TAU) -> list[Scope]:
    """Up to n scopes from the basins with the highest peaks.

    Each basin is cropped at tau times its own peak (for the top basin
    that equals the extract_scope rule). Scopes are pairwise disjoint.
    """
    if n < 1:
        raise DomainError("n must be >= 1")
    v = np.asarray(nam.map, dtype=np.float64)
    if not np.all(np.isfinite(v)) or v.max() == v.min():
        raise DegenerateMapError("degenerate map")
    labels, peaks = _watershed_basins(v)
    scopes = []
    for basin_id in range(min(n, len(peaks))):
        mask = _threshold_basin(v, labels, peaks, basin_id, tau)
        if mask.any():
            scopes.append(Scope(mask=mask, origin_kind=ONE_GAP_C1))
    return scopes


# -- ICM multi-phase segmentation -------------------------------------------------

@dataclass
class IcmResult:
    labels: np.ndarray               # phase index per window pixel
    window: tuple[int, int, int, int]  # y0, x0, y1, x1 (half-open) in image coords
    mus: np.ndarray                  # final phase means
    energies: list[float] = field(default_factory=list)
    beta: float = 0.0


def _scope_window(image_shape, scope: Scope, margin: int):
    xmin, ymin, xmax, ymax = scope.bbox
    y0 = max(0, ymin - margin)
    x0 = max(0, xmin - margin)
    y1 = min(image_shape[0], ymax + 1 + margin)
    x1 = min(image_shape[1], xmax + 1 + margin)
    return y0, x0, y1, x1


def icm_energy(labels: np.ndarray, window: np.ndarray, mus: np.ndarray, beta: float) -> float:
    """Potts energy: sum (I - mu_label)^2 + beta * (# disagreeing 4-neighbor pairs)."""
    unary = float(np.sum((window - mus[labels]) ** 2))
    pairs = int(np.sum(labels[1:, :] != labels[:-1, :])) + \
        int(np.sum(labels[:, 1:] != labels[:, :-1]))
    return unary + beta * pairs


def icm_segment(image, scope: Scope, cfg: IcmConfig | None = None) -> IcmResult:
    """Iterated-conditional-modes labeling of the window around the scope.

    Phase means start at the window's intensity quantiles ((2i+1)/(2*phases));
    raster-order sweeps with immediate updates alternate with re-estimating
    each mean as its phase average, until a sweep changes nothing or
    max_iters is hit. The recorded energy sequence never increases.
    """
    cfg = cfg or IcmConfig()
    cfg.validate()
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    y0, x0, y1, x1 = _scope_window(img.shape, scope, cfg.window_margin)
    win = img[y0:y1, x0:x1]
    h, w = win.shape
    if h < 2 or w < 2:
        raise GeometryError(f"ICM window {h}x{w} smaller than 2x2")

    p = cfg.phases
    qs = (2 * np.arange(p) + 1) / (2 * p)
    mus = np.quantile(win, qs)
    beta = cfg.beta if cfg.beta is not None else min(BETA_CAP * float(np.ptp(win)) ** 2, BETA_CAP)

    # initial labeling: nearest mean (lowest index wins ties)
    labels = np.argmin((win[:, :, None] - mus[None, None, :]) ** 2, axis=2).astype(np.int32)
    energies = [icm_energy(labels, win, mus, beta)]

    for _ in range(cfg.max_iters):
        changed = _icm_sweep(labels, win, mus, beta)
        for k in range(p):
            sel = labels == k
            if sel.any():
                mus[k] = win[sel].mean()
        energies.append(icm_energy(labels, win, mus, beta))
        if not changed:
            break
    return IcmResult(labels=labels, window=(y0, x0, y1, x1), mus=mus,
                     energies=energies, beta=beta)


def _icm_sweep(labels, win, mus, beta) -> bool:
    """One raster-order sweep with immediate updates; returns True if any label moved."""
    h, w = labels.shape
    p = len(mus)
    changed = False
    for y in range(h):
        for x in range(w):
            val = win[y, x]
            best_k = labels[y, x]
            best_cost = None
            for k in range(p):
                cost = (val - mus[k]) ** 2
                if beta:
                    if y > 0 and labels[y - 1, x] != k:
                        cost += beta
                    if y < h - 1 and labels[y + 1, x] != k:
                        cost += beta
                    if x > 0 and labels[y, x - 1] != k:
                        cost += beta
                    if x < w - 1 and labels[y, x + 1] != k:
                        cost += beta
                if best_cost is None or cost < best_cost:
                    best_cost = cost
                    best_k = k
            if best_k != labels[y, x]:
                labels[y, x] = best_k
                changed = True
    return changed


# -- candidates ---------------------------------------------------------------------

def extract_candidates(result: IcmResult, scope: Scope,
                       min_area: int = MIN_CANDIDATE_AREA) -> list[Candidate]:
    """Brightest-phase 4-connected components that touch the scope.

    Components smaller than min_area are dropped; the list is ordered by
    decreasing area (ties by bbox xmin then ymin).
    """
    bright = int(np.argmax(result.mus))
    comps, ncomp = ndimage.label(result.labels == bright, structure=FOUR_CONN)
    y0, x0, y1, x1 = result.window
    scope_win = scope.mask[y0:y1, x0:x1]

    cands = []
    for cid in range(1, ncomp + 1):
        sel = comps == cid
        if int(sel.sum()) < min_area:
            continue
        if not (sel & scope_win).any():
            continue
        full = np.zeros_like(scope.mask)
        full[y0:y1, x0:x1] = sel
        cands.append(Candidate(mask=full))
    cands.sort(key=lambda c: (-c.area, c.bbox[0], c.bbox[1]))
    return cands


# -- fine selection -------------------------------------------------------------------

def _min_pixel(mask: np.ndarray) -> tuple[int, int]:
    ys, xs = np.nonzero(mask)
    return int(ys[0]), int(xs[0])


def select_candidate(model, image, nam_i: Nam, scope_c1: Scope,
                     candidates: list[Candidate], fill: float) -> Candidate:
    """Pick the candidate whose masking changes the map most inside the scope.

    Score_j = sum over scope of (map_I - map_{I minus R_j})^2; ties break
    to the larger area, then smaller bbox xmin, then first pixel, so the
    result is independent of list order.
    """
    if not candidates:
        raise SelectionError("no candidates to select from")
    scored = []
    for cand in candidates:
        rnam = compute_rnam(model, image, cand.mask, fill=fill)
        d = nam_distance(nam_i, rnam, scope_c1)
        xmin = cand.bbox[0]
        scored.append((d, cand.area, -xmin, tuple(-c for c in _min_pixel(cand.mask)), cand))
    scored.sort(key=lambda s: s[:4], reverse=True)
    return scored[0][4]


# -- full pipeline ------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    tau: float = DEFAULT_SCOPE_TAU
    icm: IcmConfig = field(default_factory=IcmConfig)
    min_area: int = MIN_CANDIDATE_AREA
    fill: float = 0.2                # dataset background level for candidate masking
    coarse_only: bool = False


@dataclass
class SegmentResult:
    outcome: str                     # "nodule" | "no_nodule" | "failed"
    masks: list[np.ndarray] = field(default_factory=list)
    prob: float = 0.0
    scope_origin: str = ""
    n_candidates: int = 0
    selected_index: int = -1
    note: str = ""


def _multi_scope(nam_multi: Nam, c1: Scope, tau: float) -> Scope | None:
    """Most prominent multi-GAP blob whose peak lies inside C1, clipped to C1."""
    v = np.asarray(nam_multi.map, dtype=np.float64)
    if not np.all(np.isfinite(v)) or v.max() == v.min():
        return None
    labels, peaks = _watershed_basins(v)
    inside = [(val, bid) for bid, (val, peak) in enumerate(peaks) if c1.mask[peak]]
    if not inside:
        return None
    _, basin_id = max(inside, key=lambda t: t[0])
    mask = _threshold_basin(v, labels, peaks, basin_id, tau)
    mask &= c1.mask
    if not mask.any():
        return None
    mask = _component_containing(mask, peaks[basin_id][1])
    if not mask.any():
        return None
    return Scope(mask=mask, origin_kind=MULTI_GAP_CMULTI)


def segment_slice(one_gap_model, image, multi_gap_model=None,
                  cfg: PipelineConfig | None = None) -> SegmentResult:
    """Classify, scope, coarsely segment, and fine-select one nodule mask.

    Returns outcome "no_nodule" without touching segmentation when the
    one-GAP classifier votes negative; "failed" (detection failed) when
    scoping or candidate extraction comes up empty on a positive vote.
    """
    cfg = cfg or PipelineConfig()
    label, prob = M.classify(one_gap_model, image)
    if label == M.NO_NODULE:
        return SegmentResult(outcome="no_nodule", prob=prob)

    nam_i = compute_nam(one_gap_model, image)
    try:
        c1 = extract_scope(nam_i, cfg.tau)
    except DegenerateMapError as exc:
        return SegmentResult(outcome="failed", prob=prob, note=str(exc))

    scope = c1
    if multi_gap_model is not None:
        nam_m = compute_nam(multi_gap_model, image)
        refined = _multi_scope(nam_m, c1, cfg.tau)
        if refined is not None:
            scope = refined

    try:
        icm_res = icm_segment(image, scope, cfg.icm)
    except GeometryError as exc:
        return SegmentResult(outcome="failed", prob=prob,
                             scope_origin=scope.origin_kind, note=str(exc))
    cands = extract_candidates(icm_res, scope, cfg.min_area)
    if not cands:
        return SegmentResult(outcome="failed", prob=prob,
                             scope_origin=scope.origin_kind, note="no candidates")

    if cfg.coarse_only or len(cands) == 1:
        chosen = cands[0]
    else:
        chosen = select_candidate(one_gap_model, image, nam_i, c1, cands, cfg.fill)
    idx = next(i for i, c in enumerate(cands) if c is chosen)
    return SegmentResult(outcome="nodule", masks=[chosen.mask], prob=prob,
                         scope_origin=scope.origin_kind,
                         n_candidates=len(cands), selected_index=idx)


def segment_slice_two_nodule(one_gap_model, image, multi_gap_model=None,
                             cfg: PipelineConfig | None = None,
                             n_blobs: int = 2) -> SegmentResult:
    """Segment the top activation blobs independently (two-nodule mode).

    The blob map comes from the multi-GAP model when given (its maps are
    sharper), the classification gate and residual maps from the one-GAP
    model; each blob's scope plays the role C1 plays in the single path.
    """
    cfg = cfg or PipelineConfig()
    label, prob = M.classify(one_gap_model, image)
    if label == M.NO_NODULE:
        return SegmentResult(outcome="no_nodule", prob=prob)

    blob_model = multi_gap_model if multi_gap_model is not None else one_gap_model
    nam_blob = compute_nam(blob_model, image)
    nam_fine = nam_blob if blob_model is one_gap_model else compute_nam(one_gap_model, image)
    try:
        scopes = extract_top_scopes(nam_blob, n_blobs, cfg.tau)
    except DegenerateMapError as exc:
        return SegmentResult(outcome="failed", prob=prob, note=str(exc))

    masks = []
    n_cands = 0
    for scope in scopes:
        try:
            icm_res = icm_segment(image, scope, cfg.icm)
        except GeometryError:
            continue
        cands = extract_candidates(icm_res, scope, cfg.min_area)
        n_cands += len(cands)
        if not cands:
            continue
        if cfg.coarse_only or len(cands) == 1:
            masks.append(cands[0].mask)
        else:
            masks.append(select_candidate(one_gap_model, image, nam_fine,
                                          scope, cands, cfg.fill).mask)
    if not masks:
        return SegmentResult(outcome="failed", prob=prob, n_candidates=n_cands,
                             note="no candidates in any blob")
    return SegmentResult(outcome="nodule", masks=masks, prob=prob,
                         scope_origin=ONE_GAP_C1, n_candidates=n_cands,
                         selected_index=0)
