"""Train a small one-tap classifier and inspect its activation maps.

Demonstrates the score identity (map mean + bias reproduces the logit)
and saves a heat-map overlay for a few test slices. Runs in about a
minute on a laptop CPU.
"""

from pathlib import Path

import numpy as np

from namseg import data as D
from namseg import model as M
from namseg import nam as N

out = Path("demo_out")
out.mkdir(exist_ok=True)

cfg = D.SyntheticConfig(image_size=(32, 32), nodule_radius_range=(3.0, 6.0), seed=3)
samples = D.generate(cfg, 300, 300)
train, val, test = D.split(samples, seed=3)

mcfg = M.ModelConfig(input_size=(32, 32), stage_channels=(8, 16), gap_taps=(1,),
                     head_channels=8)
tcfg = M.TrainConfig(initial_lr=1e-2, epochs=6, seed=3)
net, log = M.train(M.build(mcfg, seed=3), M.LabeledSet(D.as_pairs(train),
                                                       D.as_pairs(val)), tcfg)
for row in log:
    print(f"epoch {row['epoch']}: train loss {row['train_loss']:.4f} "
          f"val acc {row['val_acc']:.3f}")

acc = sum(M.classify(net, s.image)[0] == s.label for s in test) / len(test)
print(f"test accuracy: {acc:.3f}")

# the map's mean plus the FC bias is exactly the nodule logit
s = next(s for s in test if s.label == 1)
logits, _ = M.forward(net, s.image)
nam = N.compute_nam(net, s.image)
print(f"nodule logit        : {logits.data[1]:+.9f}")
print(f"map score + fc bias : {nam.score + net.fc_b.data[1]:+.9f}")

N.dump_map(nam.map, out / "activation_map.txt")
print(f"dumped {out / 'activation_map.txt'}")

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    pass
else:
    shown = [s for s in test if s.label == 1][:6]
    fig, axes = plt.subplots(2, 6, figsize=(12, 4.2))
    for col, s in enumerate(shown):
        nam = N.compute_nam(net, s.image)
        axes[0, col].imshow(s.image[0], cmap="gray", vmin=0, vmax=1)
        axes[0, col].contour(s.truth_masks[0], colors="r", linewidths=0.6)
        axes[1, col].imshow(nam.map, cmap="magma")
        for ax in (axes[0, col], axes[1, col]):
            ax.axis("off")
    axes[0, 0].set_title("slice + truth", fontsize=8)
    axes[1, 0].set_title("activation map", fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "activation_maps.png", dpi=120)
    print(f"saved {out / 'activation_maps.png'}")
