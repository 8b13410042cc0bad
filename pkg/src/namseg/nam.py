"""Nodule activation maps, residual maps, and the score identity.

A map is the FC-weighted combination of the tap activation maps for the
nodule class. Under the mean-GAP convention the per-tap raw map means
sum (plus the FC bias) exactly to the nodule logit; the upsampled map
applies the same 1/(h*w) normalizer per tap so the identity carries the
constant through.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, DomainError, NumericError
from .model import Model, forward


@dataclass
class Nam:
    """map: input-resolution combined map; raw_maps: per-tap pre-upsampling maps;
    score: nodule logit minus FC bias."""
    map: np.ndarray
    raw_maps: list[np.ndarray] = field(default_factory=list)
    score: float = 0.0


def bilinear_upsample(a: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2-d array."""
    h, w = a.shape
    oh, ow = out_shape
    if (h, w) == (oh, ow):
        return a.copy()
    ys = np.linspace(0.0, h - 1.0, oh) if h > 1 else np.zeros(oh)
    xs = np.linspace(0.0, w - 1.0, ow) if w > 1 else np.zeros(ow)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = a[np.ix_(y0, x0)] * (1 - fx) + a[np.ix_(y0, x1)] * fx
    bot = a[np.ix_(y1, x0)] * (1 - fx) + a[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def _as_image(image) -> np.ndarray:
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 2:
        return a[None]
    if a.ndim == 3 and a.shape[0] == 1:
        return a
    raise DimensionError(f"expected (H,W) or (1,H,W) image, got {a.shape}")


def compute_nam(model: Model, image) -> Nam:
    """Weighted activation map for the nodule class, upsampled to input size.

    Per tap: raw_map = sum_k w[k] * a_k(x,y) using that tap's slice of the
    FC nodule row. The combined map sums per-tap bilinear upsamplings,
    each scaled by its GAP normalizer 1/(h_t*w_t); score = sum of raw-map
    means, so score + fc_bias[nodule] equals the nodule logit.
    """
    img = _as_image(image)
    with T.no_grad():
        _, acts = forward(model, img)
    return nam_from_activations(model, [a.data for a in acts])


def nam_from_activations(model: Model, act_maps: list[np.ndarray]) -> Nam:
    """Build the map from already-computed tap activations (one forward pass
    can serve both classification and map construction)."""
    k = model.config.head_channels
    w_row = model.fc_w.data[1]
    out_shape = model.config.input_size

    raw_maps = []
    combined = np.zeros(out_shape)
    score = 0.0
    for t_i, act in enumerate(act_maps):
        w_t = w_row[t_i * k:(t_i + 1) * k]
        raw = np.einsum("k,khw->hw", w_t, act)
        if not np.all(np.isfinite(raw)):
            raise NumericError("non-finite activation map (degenerate model weights)")
        raw_maps.append(raw)
        h_t, w_t_sz = raw.shape
        combined += bilinear_upsample(raw, out_shape) / (h_t * w_t_sz)
        score += raw.mean()
    return Nam(map=combined, raw_maps=raw_maps, score=float(score))


def compute_rnam(model: Model, image, mask: np.ndarray, fill: float) -> Nam:
    """Map of the image with `mask` pixels replaced by the background fill.

    An empty mask reproduces compute_nam(model, image) exactly. The fill
    should be the dataset's declared background level, not zero, so the
    masked patch does not itself read as a dark blob.
    """
    img = _as_image(image).copy()
    m = np.asarray(mask, dtype=bool)
    if m.shape != img.shape[1:]:
        raise DimensionError(f"mask shape {m.shape} != image shape {img.shape[1:]}")
    img[0][m] = float(fill)
    return compute_nam(model, img)


def nam_distance(nam_a: Nam, nam_b: Nam, scope) -> float:
    """Sum over scope pixels of the squared map difference (upsampled maps)."""
    a, b = nam_a.map, nam_b.map
    if a.shape != b.shape:
        raise DimensionError(f"map shapes differ: {a.shape} vs {b.shape}")
    mask = scope.mask if hasattr(scope, "mask") else np.asarray(scope, dtype=bool)
    if mask.shape != a.shape:
        raise DimensionError(f"scope shape {mask.shape} != map shape {a.shape}")
    if not mask.any():
        raise DomainError("empty scope")
    d = a[mask] - b[mask]
    return float(np.dot(d, d))


def dump_map(nam_map: np.ndarray, path):
    """Plain-text matrix dump: one row per line, space-separated floats."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in np.atleast_2d(nam_map):
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_map(path) -> np.ndarray:
    return np.loadtxt(path, ndmin=2)
