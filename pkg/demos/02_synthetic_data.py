"""Generate a synthetic dataset and look at what is in it.

Writes a dataset directory under ./demo_out/dataset and a contact-sheet
PNG of positives, negatives, and decoys.
"""

from pathlib import Path

import numpy as np

from namseg import data as D

out = Path("demo_out")
out.mkdir(exist_ok=True)

cfg = D.SyntheticConfig(seed=7, decoy_rate=0.7, two_nodule_rate=0.1)
samples = D.generate(cfg, n_pos=24, n_neg=24)
tags = D.split_assignments(samples, seed=7)
D.save_dataset(samples, cfg, out / "dataset", splits=tags)
print(f"wrote {len(samples)} samples to {out / 'dataset'}")

pos = [s for s in samples if s.label == 1]
two = [s for s in pos if len(s.truth_masks) == 2]
areas = [int(m.sum()) for s in pos for m in s.truth_masks]
print(f"positives: {len(pos)}, with two nodules: {len(two)}")
print(f"nodule areas: min {min(areas)} px, max {max(areas)} px")

inside = [s.image[0][s.truth_masks[0]].mean() for s in pos]
print(f"mean intensity inside nodules: {np.mean(inside):.3f} "
      f"(background level {cfg.background_level})")

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    print("matplotlib not available; skipping contact sheet")
else:
    fig, axes = plt.subplots(4, 8, figsize=(12, 6))
    for ax, s in zip(axes.ravel(), samples[::2]):
        ax.imshow(s.image[0], cmap="gray", vmin=0, vmax=1)
        for m in s.truth_masks:
            ax.contour(m, colors="r", linewidths=0.6)
        ax.set_title("nodule" if s.label else "clear", fontsize=7)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out / "contact_sheet.png", dpi=120)
    print(f"saved {out / 'contact_sheet.png'}")
