"""Synthetic dataset generation, image I/O, and stratified splitting.

Images are float64 in [0, 1] with shape (1, H, W). Positives carry one
soft-edged bright disc (two with probability two_nodule_rate); both
classes may carry a bright non-disc decoy (ring or bar) so the classifier
has to learn disc-ness rather than brightness. Ground-truth masks ride
along for evaluation only; the training surface takes (image, label)
pairs and nothing else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .model import NO_NODULE, NODULE
from .nam import bilinear_upsample


@dataclass(frozen=True)
class SyntheticConfig:
    image_size: tuple[int, int] = (64, 64)
    background_level: float = 0.2
    noise_sigma: float = 0.05
    lung_texture: float = 0.06          # low-frequency amplitude
    nodule_radius_range: tuple[float, float] = (3.0, 9.0)
    nodule_contrast_range: tuple[float, float] = (0.25, 0.6)
    decoy_rate: float = 0.5
    two_nodule_rate: float = 0.01
    seed: int = 0
    # optional band of decoy-center distances from the nodule center;
    # None places decoys anywhere non-overlapping
    decoy_distance_range: tuple[float, float] | None = None

    def validate(self):
        r_min, r_max = self.nodule_radius_range
        c_min, _ = self.nodule_contrast_range
        if r_min < 2:
            raise ConfigError("minimum nodule radius must be >= 2 px")
        if c_min <= 0:
            raise ConfigError("minimum contrast must be positive")
        for rate in (self.decoy_rate, self.two_nodule_rate):
            if not (0 <= rate <= 1):
                raise ConfigError("rates must lie in [0, 1]")
        h, w = self.image_size
        if 2 * (math.ceil(r_max) + 3) >= min(h, w):
            raise ConfigError(f"r_max {r_max} too large for {h}x{w} image")


@dataclass
class Sample:
    image: np.ndarray                   # (1, H, W)
    label: int                          # NODULE or NO_NODULE
    truth_masks: list[np.ndarray] = field(default_factory=list)  # eval only


def as_pairs(samples) -> list[tuple[np.ndarray, int]]:
    """Strip samples down to the weak-supervision surface: (image, label)."""
    return [(s.image, s.label) for s in samples]


# -- drawing helpers ---------------------------------------------------------

def _disc(shape, cy, cx, radius, contrast):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    soft = contrast * np.clip(radius + 0.5 - d, 0.0, 1.0)
    return soft, d <= radius


def _ring(shape, cy, cx, radius, thickness, contrast):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return contrast * np.clip(thickness / 2 + 0.5 - np.abs(d - radius), 0.0, 1.0)


def _bar(shape, cy, cx, length, width, angle, contrast):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    u = (xx - cx) * math.cos(angle) + (yy - cy) * math.sin(angle)
    v = -(xx - cx) * math.sin(angle) + (yy - cy) * math.cos(angle)
    along = np.clip(length / 2 + 0.5 - np.abs(u), 0.0, 1.0)
    across = np.clip(width / 2 + 0.5 - np.abs(v), 0.0, 1.0)
    return contrast * along * across


def _texture(rng, shape, amplitude):
    coarse = rng.uniform(-1.0, 1.0, size=(5, 5))
    return amplitude * bilinear_upsample(coarse, shape)


def _place_nodules(rng, shape, radii, tries=500):
    """Joint placement of nodule centers with pairwise separation."""
    h, w = shape
    min_dist = 0.0 if len(radii) < 2 else max(20.0, sum(radii) + 4)
    for _ in range(tries):
        centers = []
        for r in radii:
            margin = math.ceil(r) + 2
            centers.append((rng.uniform(margin, h - 1 - margin),
                            rng.uniform(margin, w - 1 - margin)))
        ok = all(math.hypot(a[0] - b[0], a[1] - b[1]) >= min_dist
                 for i, a in enumerate(centers) for b in centers[:i])
        if ok:
            return centers
    raise ConfigError("could not place nodules; image too small for the config")


def _place_decoy(rng, shape, extent, nodules, dist_range, tries=400):
    """Decoy center that cannot overlap any nodule; None when placement fails."""
    h, w = shape
    margin = min(math.ceil(extent) + 1, min(h, w) // 2 - 1)
    if nodules and dist_range is not None:
        (ay, ax), r0 = nodules[0]
        lo = max(dist_range[0], r0 + extent + 1)
        hi = max(dist_range[1], lo + 1)
        for _ in range(tries):
            ang = rng.uniform(0, 2 * math.pi)
            dist = rng.uniform(lo, hi)
            cy, cx = ay + dist * math.sin(ang), ax + dist * math.cos(ang)
            if margin <= cy <= h - 1 - margin and margin <= cx <= w - 1 - margin:
                return cy, cx
        return None
    for _ in range(tries):
        cy = rng.uniform(margin, h - 1 - margin)
        cx = rng.uniform(margin, w - 1 - margin)
        if all(math.hypot(cy - ny, cx - nx) >= r + extent + 2
               for (ny, nx), r in nodules):
            return cy, cx
    return None


def _synthesize(cfg: SyntheticConfig, index: int, positive: bool) -> Sample:
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, index)))
    h, w = cfg.image_size
    img = np.full((h, w), cfg.background_level)
    img += _texture(rng, (h, w), cfg.lung_texture)
    img += rng.normal(0.0, cfg.noise_sigma, size=(h, w))

    truth = []
    nodules = []       # ((cy, cx), radius) per placed nodule
    if positive:
        n_nodules = 2 if rng.random() < cfg.two_nodule_rate else 1
        r_lo, r_hi = cfg.nodule_radius_range
        c_lo, c_hi = cfg.nodule_contrast_range
        radii = [rng.uniform(r_lo, r_hi) for _ in range(n_nodules)]
        contrasts = [rng.uniform(c_lo, c_hi) for _ in range(n_nodules)]
        for (cy, cx), radius, contrast in zip(
                _place_nodules(rng, (h, w), radii), radii, contrasts):
            soft, mask = _disc((h, w), cy, cx, radius, contrast)
            img += soft
            truth.append(mask)
            nodules.append(((cy, cx), radius))

    if rng.random() < cfg.decoy_rate:
        kind = int(rng.integers(0, 2))
        contrast = rng.uniform(*cfg.nodule_contrast_range)
        if kind == 0:
            radius = rng.uniform(4.0, 8.0)
            thickness = rng.uniform(1.2, 2.2)
            extent = radius + thickness / 2 + 1
        else:
            length = rng.uniform(10.0, 22.0)
            width = rng.uniform(1.5, 2.5)
            angle = rng.uniform(0, math.pi)
            extent = length / 2 + 1
        spot = _place_decoy(rng, (h, w), extent, nodules, cfg.decoy_distance_range)
        if spot is not None:
            cy, cx = spot
            if kind == 0:
                img += _ring((h, w), cy, cx, radius, thickness, contrast)
            else:
                img += _bar((h, w), cy, cx, length, width, angle, contrast)

    np.clip(img, 0.0, 1.0, out=img)
    return Sample(image=img[None], label=NODULE if positive else NO_NODULE,
                  truth_masks=truth)


def generate(cfg: SyntheticConfig, n_pos: int, n_neg: int) -> list[Sample]:
    """Deterministic dataset: positives at indices [0, n_pos), then negatives.

    Per-sample RNG streams are keyed by (seed, index), so any slice of the
    dataset is reproducible independently of the rest.
    """
    cfg.validate()
    if n_pos < 0 or n_neg < 0:
        raise ConfigError("sample counts must be >= 0")
    out = [_synthesize(cfg, i, positive=True) for i in range(n_pos)]
    out += [_synthesize(cfg, n_pos + i, positive=False) for i in range(n_neg)]
    return out


# -- splitting ------------------------------------------------------------------

def split(samples: list[Sample], seed: int,
          ratio: tuple[int, int, int] = (4, 1, 1)):
    """Stratified train/val/test partition at the given ratio.

    Proportions per class land within one sample of the exact ratio.
    Requires at least 6 samples of each class so every split sees both.
    """
    total = sum(ratio)
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.label, []).append(i)
    if len(by_class) < 2:
        raise DataError("both classes must be present")
    if any(len(idx) < total for idx in by_class.values()):
        raise DataError(f"too few samples per class for a {ratio} split")

    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5117)))
    train_idx, val_idx, test_idx = [], [], []
    for label in sorted(by_class):
        idx = np.array(by_class[label])
        idx = idx[rng.permutation(len(idx))]
        n = len(idx)
        n_test = round(n * ratio[2] / total)
        n_val = round((n - n_test) * ratio[1] / (ratio[0] + ratio[1]))
        test_idx += idx[:n_test].tolist()
        val_idx += idx[n_test:n_test + n_val].tolist()
        train_idx += idx[n_test + n_val:].tolist()

    def pick(ids):
        return [samples[i] for i in sorted(ids)]

    return pick(train_idx), pick(val_idx), pick(test_idx)


def split_assignments(samples, seed, ratio=(4, 1, 1)) -> list[str]:
    """Per-sample split tag ("train"/"val"/"test"), aligned with `samples`."""
    train, val, test = split(samples, seed, ratio)
    tags = {}
    for part, name in ((train, "train"), (val, "val"), (test, "test")):
        for s in part:
            tags[id(s)] = name
    return [tags[id(s)] for s in samples]


# -- netpbm I/O --------------------------------------------------------------------

def _read_pnm_header(blob: bytes, magics: tuple[bytes, ...]):
    """Parse magic + whitespace/comment-separated header tokens."""
    if blob[:2] not in magics:
        raise FormatError(f"bad magic {blob[:2]!r}; expected one of "
                          f"{[m.decode() for m in magics]}")
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            nl = blob.find(b"\n", pos)
            if nl < 0:
                raise FormatError("unterminated comment in header")
            pos = nl + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated header")
        tokens.append(blob[start:pos])
    return blob[:2], tokens, pos + 1     # one whitespace byte after header


def read_pgm(path) -> np.ndarray:
    """Read a P2/P5 PGM into a float image in [0, 1] (shape (H, W))."""
    blob = Path(path).read_bytes()
    magic, tokens, data_at = _read_pnm_header(blob, (b"P2", b"P5"))
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"non-numeric header fields: {exc}") from exc
    if maxval < 1 or maxval > 65535:
        raise FormatError(f"maxval {maxval} outside [1, 65535]")
    if magic == b"P2":
        try:
            vals = np.array(blob[data_at - 1:].split(), dtype=np.int64)
        except ValueError as exc:
            raise FormatError(f"bad ASCII sample: {exc}") from exc
    else:
        raw = blob[data_at:]
        if maxval > 255:
            expect = h * w * 2
            if len(raw) < expect:
                raise FormatError("truncated P5 payload")
            vals = np.frombuffer(raw[:expect], dtype=">u2").astype(np.int64)
        else:
            expect = h * w
            if len(raw) < expect:
                raise FormatError("truncated P5 payload")
            vals = np.frombuffer(raw[:expect], dtype=np.uint8).astype(np.int64)
    if vals.size != h * w:
        raise FormatError(f"expected {h * w} samples, found {vals.size}")
    if vals.min() < 0 or vals.max() > maxval:
        raise FormatError("sample outside [0, maxval]")
    return (vals.astype(np.float64) / maxval).reshape(h, w)


def write_pgm(image, path, maxval: int = 65535):
    """Write a [0, 1] image as binary P5 (big-endian 2-byte samples when >255)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise FormatError(f"expected 2-d image, got shape {img.shape}")
    if maxval < 1 or maxval > 65535:
        raise FormatError(f"maxval {maxval} outside [1, 65535]")
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval).astype(np.uint16)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode()
    payload = q.astype(">u2").tobytes() if maxval > 255 else q.astype(np.uint8).tobytes()
    Path(path).write_bytes(header + payload)


def read_pbm(path) -> np.ndarray:
    """Read a P1 ASCII bitmap as a bool mask (1 = foreground)."""
    blob = Path(path).read_bytes()
    if blob[:2] != b"P1":
        raise FormatError(f"bad magic {blob[:2]!r}; expected P1")
    tokens = []
    for line in blob[2:].decode("ascii").splitlines():
        line = line.split("#", 1)[0]
        tokens += line.split()
    if len(tokens) < 2:
        raise FormatError("truncated bitmap header")
    w, h = int(tokens[0]), int(tokens[1])
    bits = "".join(tokens[2:])
    if len(bits) != h * w or set(bits) - {"0", "1"}:
        raise FormatError("bitmap payload malformed")
    return (np.frombuffer(bits.encode(), dtype="S1") == b"1").reshape(h, w)


def write_pbm(mask, path):
    m = np.asarray(mask, dtype=bool)
    lines = [f"P1\n{m.shape[1]} {m.shape[0]}"]
    for row in m:
        lines.append("".join("1" if v else "0" for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


# -- run-length mask files ------------------------------------------------------------

def masks_to_runlength(masks: list[np.ndarray], shape) -> str:
    """Header "H W n", then one line per mask of start:length runs over
    row-major flat indices."""
    h, w = shape
    lines = [f"{h} {w} {len(masks)}"]
    for m in masks:
        flat = np.asarray(m, dtype=bool).ravel()
        runs = []
        idx = np.flatnonzero(np.diff(np.concatenate(([0], flat.view(np.int8), [0]))))
        for start, stop in zip(idx[0::2], idx[1::2]):
            runs.append(f"{start}:{stop - start}")
        lines.append(" ".join(runs))
    return "\n".join(lines) + "\n"


def runlength_to_masks(text: str) -> list[np.ndarray]:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()                 # trailing newline, not an empty mask
    try:
        h, w, n = (int(t) for t in lines[0].split())
    except ValueError as exc:
        raise FormatError(f"bad run-length header: {exc}") from exc
    if len(lines) != n + 1:
        raise FormatError(f"expected {n} mask lines, found {len(lines) - 1}")
    masks = []
    for line in lines[1:]:
        flat = np.zeros(h * w, dtype=bool)
        for run in line.split():
            start, length = (int(t) for t in run.split(":"))
            if start < 0 or start + length > h * w:
                raise FormatError(f"run {run} outside image")
            flat[start:start + length] = True
        masks.append(flat.reshape(h, w))
    return masks


# -- dataset directory --------------------------------------------------------------------

def sample_id(index: int) -> str:
    return f"{index:06d}"


def save_dataset(samples: list[Sample], cfg: SyntheticConfig, out_dir,
                 splits: list[str] | None = None):
    """Write images/, labels.csv, truth/, manifest.txt (and splits.csv)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(exist_ok=True)
    rows = ["id,label"]
    for i, s in enumerate(samples):
        sid = sample_id(i)
        write_pgm(s.image, out / "images" / f"{sid}.pgm")
        rows.append(f"{sid},{'nodule' if s.label == NODULE else 'no_nodule'}")
        if s.truth_masks:
            text = masks_to_runlength(s.truth_masks, s.image.shape[1:])
            (out / "truth" / f"{sid}.masks").write_text(text, encoding="ascii")
    (out / "labels.csv").write_text("\n".join(rows) + "\n", encoding="ascii")
    manifest = {
        "image_size": f"{cfg.image_size[0]},{cfg.image_size[1]}",
        "background_level": repr(cfg.background_level),
        "noise_sigma": repr(cfg.noise_sigma),
        "lung_texture": repr(cfg.lung_texture),
        "nodule_radius_range": f"{cfg.nodule_radius_range[0]},{cfg.nodule_radius_range[1]}",
        "nodule_contrast_range": f"{cfg.nodule_contrast_range[0]},{cfg.nodule_contrast_range[1]}",
        "decoy_rate": repr(cfg.decoy_rate),
        "two_nodule_rate": repr(cfg.two_nodule_rate),
        "seed": str(cfg.seed),
        "n_samples": str(len(samples)),
        "split_ratio": "4:1:1",
    }
    write_manifest(out / "manifest.txt", manifest)
    if splits is not None:
        lines = ["id,split"] + [f"{sample_id(i)},{tag}" for i, tag in enumerate(splits)]
        (out / "splits.csv").write_text("\n".join(lines) + "\n", encoding="ascii")


def load_dataset(dataset_dir):
    """Read a dataset directory back: (samples, manifest, splits-or-None)."""
    root = Path(dataset_dir)
    labels_file = root / "labels.csv"
    if not labels_file.exists():
        raise DataError(f"no dataset at {root} (missing labels.csv)")
    samples = []
    lines = labels_file.read_text(encoding="ascii").strip().split("\n")
    for line in lines[1:]:
        sid, name = line.split(",")
        img = read_pgm(root / "images" / f"{sid}.pgm")[None]
        truth_file = root / "truth" / f"{sid}.masks"
        masks = runlength_to_masks(truth_file.read_text(encoding="ascii")) \
            if truth_file.exists() else []
        label = NODULE if name == "nodule" else NO_NODULE
        samples.append(Sample(image=img, label=label, truth_masks=masks))
    manifest = read_manifest(root / "manifest.txt") if (root / "manifest.txt").exists() else {}
    splits = None
    split_file = root / "splits.csv"
    if split_file.exists():
        splits = [line.split(",")[1]
                  for line in split_file.read_text(encoding="ascii").strip().split("\n")[1:]]
    return samples, manifest, splits


def write_manifest(path, entries: dict):
    lines = [f"{k}={v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").strip().split("\n"):
        if line and "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out
