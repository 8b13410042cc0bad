"""Command-line entry point: synth, train, segment, eval subcommands.

Every run is deterministic given its flags and seed, and writes a
manifest.txt echoing the effective configuration next to its outputs.
Exit codes: 0 success, 1 runtime/data failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics as E
from . import model as M
from . import nam as N
from . import segment as S
from .errors import NamsegError


def _add_common(p):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key=value file; explicit flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="namseg",
                                     description="weakly-supervised bright-blob "
                                                 "localization and segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    _add_common(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--pos", type=int, default=2000, help="positive slice count")
    p.add_argument("--neg", type=int, default=2000, help="negative slice count")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--background-level", type=float, default=0.2)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--lung-texture", type=float, default=0.06)
    p.add_argument("--radius-min", type=float, default=3.0)
    p.add_argument("--radius-max", type=float, default=9.0)
    p.add_argument("--contrast-min", type=float, default=0.25)
    p.add_argument("--contrast-max", type=float, default=0.6)
    p.add_argument("--decoy-rate", type=float, default=0.5)
    p.add_argument("--two-nodule-rate", type=float, default=0.01)
    p.add_argument("--decoy-distance", default="",
                   help="'LO,HI' band of decoy distance from the nodule (optional)")

    p = sub.add_parser("train", help="train a GAP-headed classifier")
    _add_common(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--data", required=True, help="dataset directory from synth")
    p.add_argument("--gap-taps", default="2",
                   help="comma-separated stage indices, e.g. '2', '1,2', '0,1,2'")
    p.add_argument("--stage-channels", default="16,32,64")
    p.add_argument("--head-channels", type=int, default=32)
    p.add_argument("--head-lr-mult", type=float, default=10.0)
    p.add_argument("--lr", type=float, default=None,
                   help="default depends on tap count: 1e-2 / 2e-3 / 1e-3")
    p.add_argument("--decay", type=float, default=0.99)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=30)
    p.add_argument("--epochs", type=int, default=8)

    p = sub.add_parser("segment", help="segment test slices with trained weights")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True, help="one-GAP weight file")
    p.add_argument("--multi-weights", default=None, help="optional multi-GAP weights")
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--coarse-only", action="store_true", help="skip residual-map screening")
    p.add_argument("--two-nodule", action="store_true", help="segment the top two blobs")
    p.add_argument("--dump-nam", action="store_true", help="write activation-map text files")
    p.add_argument("--tau", type=float, default=S.DEFAULT_SCOPE_TAU)
    p.add_argument("--fill", type=float, default=None,
                   help="mask fill level; defaults to the dataset background_level")

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    _add_common(p)
    p.add_argument("--pred", required=True, help="segment output directory")
    p.add_argument("--data", required=True, help="dataset directory with truth")
    p.add_argument("--px-to-mm2", type=float, default=1.0)
    p.add_argument("--name", default="run", help="config label for metrics.csv")
    return parser


def _apply_config_file(argv: list[str]) -> list[str]:
    """Prepend key=value file entries as flags so explicit flags win."""
    if "--config" in argv:
        idx = argv.index("--config")
        if idx + 1 >= len(argv):
            return argv
        path = Path(argv[idx + 1])
        if not path.exists():
            raise NamsegError(f"config file not found: {path}")
        extra = []
        for line in path.read_text(encoding="utf-8").splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            extra.append(f"--{key.strip().replace('_', '-')}={val.strip()}")
        return argv[:1] + extra + argv[1:]
    return argv


# path-valued flags are omitted from manifests so identical seeds produce
# byte-identical output trees regardless of where they are written
_PATH_KEYS = {"out", "config", "data", "weights", "multi_weights", "pred"}


def _write_manifest(out_dir: Path, ns: argparse.Namespace, base: dict | None = None):
    entries = dict(base or {})
    for k, v in sorted(vars(ns).items()):
        if k in _PATH_KEYS or k == "command":
            continue
        entries.setdefault(k, v)
    entries["command"] = ns.command
    D.write_manifest(out_dir / "manifest.txt", entries)


def cmd_synth(ns) -> int:
    band = None
    if ns.decoy_distance:
        lo, hi = (float(t) for t in ns.decoy_distance.split(","))
        band = (lo, hi)
    cfg = D.SyntheticConfig(
        image_size=(ns.image_size, ns.image_size),
        background_level=ns.background_level,
        noise_sigma=ns.noise_sigma,
        lung_texture=ns.lung_texture,
        nodule_radius_range=(ns.radius_min, ns.radius_max),
        nodule_contrast_range=(ns.contrast_min, ns.contrast_max),
        decoy_rate=ns.decoy_rate,
        two_nodule_rate=ns.two_nodule_rate,
        seed=ns.seed,
        decoy_distance_range=band,
    )
    samples = D.generate(cfg, ns.pos, ns.neg)
    tags = D.split_assignments(samples, seed=ns.seed)
    out = Path(ns.out)
    D.save_dataset(samples, cfg, out, splits=tags)
    _write_manifest(out, ns, base=D.read_manifest(out / "manifest.txt"))
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def _load_pairs(data_dir):
    samples, manifest, splits = D.load_dataset(data_dir)
    if splits is None:
        raise NamsegError(f"dataset {data_dir} has no splits.csv")
    parts = {"train": [], "val": [], "test": []}
    for s, tag in zip(samples, splits):
        parts[tag].append(s)
    return samples, manifest, splits, parts


def cmd_train(ns) -> int:
    _, manifest, _, parts = _load_pairs(ns.data)
    taps = tuple(int(t) for t in ns.gap_taps.split(","))
    stage_channels = tuple(int(c) for c in ns.stage_channels.split(","))
    size = tuple(int(t) for t in manifest.get("image_size", "64,64").split(","))
    mcfg = M.ModelConfig(input_size=size, stage_channels=stage_channels,
                         gap_taps=taps, head_channels=ns.head_channels,
                         head_lr_multiplier=ns.head_lr_mult)
    lr = ns.lr if ns.lr is not None else M.INITIAL_LR_BY_TAPS[len(taps)]
    ns.lr = lr                      # manifest echoes the effective value
    tcfg = M.TrainConfig(initial_lr=lr, lr_decay_per_epoch=ns.decay,
                         momentum=ns.momentum, batch_size=ns.batch_size,
                         epochs=ns.epochs, seed=ns.seed)
    ds = M.LabeledSet(train=D.as_pairs(parts["train"]), val=D.as_pairs(parts["val"]))

    net = M.build(mcfg, seed=ns.seed)
    net, log = M.train(net, ds, tcfg)

    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    M.save(net, out / "weights.namseg")
    lines = ["epoch,lr,train_loss,val_acc"]
    for row in log:
        lines.append(f"{row['epoch']},{row['lr']!r},{row['train_loss']!r},{row['val_acc']!r}")
    (out / "train_log.csv").write_text("\n".join(lines) + "\n", encoding="ascii")
    _write_manifest(out, ns)
    best = max((r["val_acc"] for r in log), default=float("nan"))
    print(f"trained {len(taps)}-GAP model; best val acc {best:.4f}; "
          f"weights at {out / 'weights.namseg'}")
    return 0


def cmd_segment(ns) -> int:
    samples, manifest, splits, parts = _load_pairs(ns.data)
    one_gap = M.load(ns.weights)
    multi = M.load(ns.multi_weights) if ns.multi_weights else None
    fill = ns.fill if ns.fill is not None else float(manifest.get("background_level", 0.2))
    ns.fill = fill                  # manifest echoes the effective value
    cfg = S.PipelineConfig(tau=ns.tau, fill=fill, coarse_only=ns.coarse_only)

    out = Path(ns.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    if ns.dump_nam:
        (out / "nams").mkdir(exist_ok=True)

    rows = ["id,classified,prob,scope_origin,n_candidates,selected_index,outcome,mask_files"]
    for i, (sample, tag) in enumerate(zip(samples, splits)):
        if ns.split != "all" and tag != ns.split:
            continue
        sid = D.sample_id(i)
        if ns.two_nodule:
            res = S.segment_slice_two_nodule(one_gap, sample.image, multi, cfg)
        else:
            res = S.segment_slice(one_gap, sample.image, multi, cfg)
        names = []
        for j, mask in enumerate(res.masks):
            name = f"{sid}.pbm" if len(res.masks) == 1 else f"{sid}_{j}.pbm"
            D.write_pbm(mask, out / "masks" / name)
            names.append(name)
        if ns.dump_nam and res.outcome != "no_nodule":
            N.dump_map(N.compute_nam(one_gap, sample.image).map,
                       out / "nams" / f"{sid}.nam.txt")
        classified = "no_nodule" if res.outcome == "no_nodule" else "nodule"
        rows.append(f"{sid},{classified},{res.prob!r},{res.scope_origin},"
                    f"{res.n_candidates},{res.selected_index},{res.outcome},"
                    f"{';'.join(names)}")
    (out / "decisions.csv").write_text("\n".join(rows) + "\n", encoding="ascii")
    _write_manifest(out, ns)
    print(f"segmented {len(rows) - 1} slices into {out}")
    return 0


def cmd_eval(ns) -> int:
    samples, _, _, _ = _load_pairs(ns.data)
    pred_dir = Path(ns.pred)
    decisions = pred_dir / "decisions.csv"
    if not decisions.exists():
        raise NamsegError(f"no decisions.csv under {pred_dir}")

    preds, truth, labels = {}, {}, {}
    for line in decisions.read_text(encoding="ascii").strip().split("\n")[1:]:
        fields = line.split(",")
        sid, mask_files = fields[0], fields[7]
        idx = int(sid)
        if idx >= len(samples):
            raise NamsegError(f"decision id {sid} not present in dataset")
        sample = samples[idx]
        labels[sid] = sample.label
        truth[sid] = sample.truth_masks
        preds[sid] = [D.read_pbm(pred_dir / "masks" / name)
                      for name in mask_files.split(";") if name]

    outcomes = E.detection_outcomes(preds, truth, labels)
    rep = E.report(outcomes, px_to_mm2=ns.px_to_mm2)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    E.write_metrics_csv(out / "metrics.csv", [(ns.name, rep)])
    E.write_size_bins_csv(out / "size_bins.csv", rep)
    both, one, none = E.two_nodule_tally(outcomes)
    if both + one + none:
        (out / "two_nodule.csv").write_text(
            f"both,one,none\n{both},{one},{none}\n", encoding="ascii")
    _write_manifest(out, ns)
    print(f"TPR={rep.tpr:.3f} FPR={rep.fpr:.3f} FPR_nodule={rep.fpr_nodule:.3f} "
          f"Dice={rep.dice_mean:.3f} TP_Dice={rep.tp_dice_mean:.3f}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train,
            "segment": cmd_segment, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(argv)
        ns = parser.parse_args(argv)
        return COMMANDS[ns.command](ns)
    except NamsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
