"""GAP-headed classifier: architecture, training loop, weight persistence.

The backbone is a small trainable CNN: per stage [conv3x3 -> relu ->
conv3x3 -> relu -> maxpool2]. A Conv+GAP head (conv3x3 -> relu -> gap)
taps the output of each stage listed in `gap_taps`; tap feature vectors
are concatenated and fed to one FC layer with two outputs. Class index
1 is "nodule", 0 is "no_nodule".
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError, FormatError, GeometryError

LABEL_NAMES = ("no_nodule", "nodule")
NODULE = 1
NO_NODULE = 0

WEIGHT_MAGIC = b"NAMSEG01"


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (64, 64)
    stage_channels: tuple[int, ...] = (16, 32, 64)
    gap_taps: tuple[int, ...] = (2,)
    head_channels: int = 32
    num_classes: int = 2
    head_lr_multiplier: float = 10.0

    def validate(self):
        n = len(self.stage_channels)
        if n < 1 or any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"bad stage_channels {self.stage_channels}")
        if not self.gap_taps:
            raise ConfigError("need at least one GAP tap")
        if list(self.gap_taps) != sorted(set(self.gap_taps)):
            raise ConfigError(f"gap_taps must be strictly increasing, got {self.gap_taps}")
        if self.gap_taps[0] < 0 or self.gap_taps[-1] >= n:
            raise ConfigError(f"tap index out of range for {n} stages: {self.gap_taps}")
        if self.num_classes != 2:
            raise ConfigError("binary classifier only (num_classes must be 2)")
        if self.head_channels < 1:
            raise ConfigError("head_channels must be positive")
        h, w = self.input_size
        if h % (2 ** n) or w % (2 ** n):
            raise ConfigError(f"input {h}x{w} not divisible by 2^{n} for {n} pooling stages")

    @property
    def feature_len(self) -> int:
        return self.head_channels * len(self.gap_taps)


@dataclass
class TrainConfig:
    initial_lr: float = 1e-2
    lr_decay_per_epoch: float = 0.99
    momentum: float = 0.9
    batch_size: int = 30
    epochs: int = 8
    seed: int = 0
    backbone_lr_multiplier: float = 1.0   # 0 freezes the backbone, heads still move

    def validate(self):
        if self.initial_lr <= 0:
            raise ConfigError("initial_lr must be > 0")
        if not (0 < self.lr_decay_per_epoch <= 1):
            raise ConfigError("lr_decay_per_epoch must lie in (0, 1]")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")


# per-tap-count defaults from the training protocol
INITIAL_LR_BY_TAPS = {1: 1e-2, 2: 2e-3, 3: 1e-3}


@dataclass
class LabeledSet:
    """(image, label) pairs only: ground-truth masks never enter training."""
    train: list[tuple[np.ndarray, int]]
    val: list[tuple[np.ndarray, int]] = field(default_factory=list)


class Model:
    """Weight container plus forward pass. Parameters are float64 tensors."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.stages: list[dict] = []      # each: conv1_w/b, conv2_w/b
        self.heads: list[dict] = []       # per tap: w, b
        self.fc_w = T.Tensor(np.zeros((2, config.feature_len)), requires_grad=True)
        self.fc_b = T.Tensor(np.zeros(2), requires_grad=True)

    def parameters(self):
        """(name, tensor, is_head) in declaration order; order is the save format order."""
        out = []
        for i, st in enumerate(self.stages):
            for key in ("conv1_w", "conv1_b", "conv2_w", "conv2_b"):
                out.append((f"stage{i}.{key}", st[key], False))
        for i, hd in enumerate(self.heads):
            out.append((f"head{i}.w", hd["w"], True))
            out.append((f"head{i}.b", hd["b"], True))
        out.append(("fc.w", self.fc_w, True))
        out.append(("fc.b", self.fc_b, True))
        return out

    def clone(self) -> "Model":
        other = build(self.config, seed=0)
        for (_, p, _), (_, q, _) in zip(other.parameters(), self.parameters()):
            p.data = q.data.copy()
        return other


def build(config: ModelConfig, seed: int) -> Model:
    """Deterministically initialize a model: fan-in-scaled uniform weights, zero biases."""
    model = Model(config)
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xC0DE)))

    def uniform(shape, fan_in):
        lim = np.sqrt(6.0 / fan_in)
        return T.Tensor(rng.uniform(-lim, lim, size=shape), requires_grad=True)

    cin = 1
    for c in config.stage_channels:
        st = {
            "conv1_w": uniform((c, cin, 3, 3), cin * 9),
            "conv1_b": T.Tensor(np.zeros(c), requires_grad=True),
            "conv2_w": uniform((c, c, 3, 3), c * 9),
            "conv2_b": T.Tensor(np.zeros(c), requires_grad=True),
        }
        model.stages.append(st)
        cin = c
    for tap in config.gap_taps:
        c = config.stage_channels[tap]
        model.heads.append({
            "w": uniform((config.head_channels, c, 3, 3), c * 9),
            "b": T.Tensor(np.zeros(config.head_channels), requires_grad=True),
        })
    k = config.feature_len
    model.fc_w = uniform((2, k), k)
    model.fc_b = T.Tensor(np.zeros(2), requires_grad=True)
    return model


def _check_image_shape(model: Model, images: np.ndarray) -> tuple[np.ndarray, bool]:
    h, w = model.config.input_size
    a = np.asarray(images, dtype=np.float64)
    if a.shape == (1, h, w):
        return a[None], True
    if a.ndim == 4 and a.shape[1:] == (1, h, w):
        return a, False
    raise GeometryError(f"expected image shape (1,{h},{w}) or (N,1,{h},{w}), got {a.shape}")


def forward(model: Model, image) -> tuple[T.Tensor, list[T.Tensor]]:
    """Run the network; returns (logits, per-tap activation maps).

    image: (1,H,W) -> logits (2,), tap maps (K,h_t,w_t); a leading batch
    axis is carried through when present. Tap maps are the post-head
    relu(conv) activations that feed each GAP, kept for map construction.
    """
    xb, squeeze = _check_image_shape(model, image.data if isinstance(image, T.Tensor) else image)
    x = image if isinstance(image, T.Tensor) else T.Tensor(xb if not squeeze else xb[0])

    feats = []
    acts = []
    cur = x
    tap_set = set(model.config.gap_taps)
    for i, st in enumerate(model.stages):
        cur = T.relu(T.conv2d(cur, st["conv1_w"], st["conv1_b"], pad=1))
        cur = T.relu(T.conv2d(cur, st["conv2_w"], st["conv2_b"], pad=1))
        cur = T.maxpool2(cur)
        if i in tap_set:
            hd = model.heads[model.config.gap_taps.index(i)]
            a = T.relu(T.conv2d(cur, hd["w"], hd["b"], pad=1))
            acts.append(a)
            feats.append(T.gap(a))
    # taps are visited in gap_taps order because the loop is in stage order
    feat = feats[0] if len(feats) == 1 else T.concat(feats)
    logits = T.fc(feat, model.fc_w, model.fc_b)
    return logits, acts


def classify(model: Model, image) -> tuple[int, float]:
    """Predicted label (ties break to no_nodule) and nodule probability."""
    with T.no_grad():
        logits, _ = forward(model, image)
    z = logits.data - logits.data.max()
    p = np.exp(z) / np.exp(z).sum()
    label = NODULE if logits.data[1] > logits.data[0] else NO_NODULE
    return label, float(p[1])


def _accuracy(model: Model, pairs, chunk=64) -> float:
    if not pairs:
        return 0.0
    hits = 0
    with T.no_grad():
        for i in range(0, len(pairs), chunk):
            batch = pairs[i:i + chunk]
            xs = np.stack([im for im, _ in batch])
            logits, _ = forward(model, xs)
            pred = np.where(logits.data[:, 1] > logits.data[:, 0], NODULE, NO_NODULE)
            hits += int(np.sum(pred == [lb for _, lb in batch]))
    return hits / len(pairs)


def train(model: Model, dataset: LabeledSet, tcfg: TrainConfig) -> tuple[Model, list[dict]]:
    """SGD with momentum; heads and FC run at lr * head_lr_multiplier.

    Trains a private copy of `model`; per epoch the learning rate is
    initial_lr * decay^epoch and batches are reshuffled from the seeded
    RNG. Returns (best-validation-accuracy snapshot, per-epoch log).
    Without a validation set the final weights are returned.
    """
    tcfg.validate()
    labels = {lb for _, lb in dataset.train}
    if not dataset.train or labels != {0, 1}:
        raise DataError("training set must be non-empty and contain both classes")

    net = model.clone()
    params = net.parameters()
    velocity = {name: np.zeros_like(p.data) for name, p, _ in params}
    mult = net.config.head_lr_multiplier

    best_acc = -1.0
    best_weights = None
    log = []
    n = len(dataset.train)
    for epoch in range(tcfg.epochs):
        lr = tcfg.initial_lr * tcfg.lr_decay_per_epoch ** epoch
        order = np.random.default_rng(
            np.random.SeedSequence((tcfg.seed, 0x5F0F, epoch))).permutation(n)
        total_loss = 0.0
        for start in range(0, n, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            xs = np.stack([dataset.train[i][0] for i in idx])
            ys = np.array([dataset.train[i][1] for i in idx])
            for _, p, _ in params:
                p.zero_grad()
            logits, _ = forward(net, xs)
            loss = T.softmax_xent(logits, ys)
            T.backward(loss)
            total_loss += loss.item() * len(idx)
            for name, p, is_head in params:
                eff_lr = lr * (mult if is_head else tcfg.backbone_lr_multiplier)
                v = velocity[name]
                v *= tcfg.momentum
                v -= eff_lr * p.grad
                p.data = p.data + v
        train_loss = total_loss / n
        val_acc = _accuracy(net, dataset.val) if dataset.val else float("nan")
        log.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_acc": val_acc})
        if dataset.val and val_acc > best_acc:
            best_acc = val_acc
            best_weights = [p.data.copy() for _, p, _ in params]

    if best_weights is not None:
        for (_, p, _), w in zip(params, best_weights):
            p.data = w
    return net, log


# -- persistence -----------------------------------------------------------

def _config_header(config: ModelConfig) -> bytes:
    lines = [
        f"input_size={config.input_size[0]},{config.input_size[1]}",
        "stage_channels=" + ",".join(str(c) for c in config.stage_channels),
        "gap_taps=" + ",".join(str(t) for t in config.gap_taps),
        f"head_channels={config.head_channels}",
        f"num_classes={config.num_classes}",
        f"head_lr_multiplier={config.head_lr_multiplier!r}",
    ]
    return ("\n".join(lines) + "\n\n").encode("utf-8")


def _parse_header(text: str) -> ModelConfig:
    kv = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"bad header line: {line!r}")
        key, val = line.split("=", 1)
        kv[key.strip()] = val.strip()
    try:
        return ModelConfig(
            input_size=tuple(int(v) for v in kv["input_size"].split(",")),
            stage_channels=tuple(int(v) for v in kv["stage_channels"].split(",")),
            gap_taps=tuple(int(v) for v in kv["gap_taps"].split(",")),
            head_channels=int(kv["head_channels"]),
            num_classes=int(kv["num_classes"]),
            head_lr_multiplier=float(kv["head_lr_multiplier"]),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"incomplete or malformed weight header: {exc}") from exc


def save(model: Model, path):
    """Write magic, text header, then every tensor as little-endian f64."""
    buf = io.BytesIO()
    buf.write(WEIGHT_MAGIC + b"\n")
    buf.write(_config_header(model.config))
    for _, p, _ in model.parameters():
        buf.write(p.data.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:9] != WEIGHT_MAGIC + b"\n":
        raise FormatError(f"bad magic; expected {WEIGHT_MAGIC.decode()!r}")
    end = blob.find(b"\n\n", 9)
    if end < 0:
        raise FormatError("truncated header: no blank-line terminator")
    try:
        config = _parse_header(blob[9:end].decode("utf-8"))
        config.validate()
    except ConfigError as exc:
        raise FormatError(f"invalid config in header: {exc}") from exc
    model = build(config, seed=0)

    offset = end + 2
    for name, p, _ in model.parameters():
        nbytes = p.data.size * 8
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"truncated weights at {name}")
        p.data = np.frombuffer(chunk, dtype="<f8").reshape(p.data.shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after weights")
    return model


__all__ = [
    "LABEL_NAMES", "NODULE", "NO_NODULE", "INITIAL_LR_BY_TAPS", "WEIGHT_MAGIC",
    "ModelConfig", "TrainConfig", "LabeledSet", "Model",
    "build", "forward", "classify", "train", "save", "load",
]
