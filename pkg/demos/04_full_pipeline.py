"""End-to-end: train, then walk one slice through the whole pipeline.

Shows each stage's intermediate product: classification, activation map,
watershed scope, ICM phase labels, candidates, and the residual-map
screening scores that pick the final mask.
"""

from pathlib import Path

import numpy as np

from namseg import data as D
from namseg import metrics as E
from namseg import model as M
from namseg import nam as N
from namseg import segment as S

out = Path("demo_out")
out.mkdir(exist_ok=True)

cfg = D.SyntheticConfig(image_size=(32, 32), nodule_radius_range=(3.0, 6.0),
                        decoy_rate=1.0, decoy_distance_range=(8.0, 14.0), seed=5)
samples = D.generate(cfg, 300, 300)
train, val, test = D.split(samples, seed=5)

mcfg = M.ModelConfig(input_size=(32, 32), stage_channels=(8, 16), gap_taps=(1,),
                     head_channels=8)
net, _ = M.train(M.build(mcfg, seed=5),
                 M.LabeledSet(D.as_pairs(train), D.as_pairs(val)),
                 M.TrainConfig(initial_lr=1e-2, epochs=6, seed=5))

pcfg = S.PipelineConfig(fill=cfg.background_level)

# pick a positive test slice where the decoy creates a real contest
slice_ = next(s for s in test if s.label == 1)
label, prob = M.classify(net, slice_.image)
print(f"classified: {'nodule' if label else 'no_nodule'} (p={prob:.3f})")

nam = N.compute_nam(net, slice_.image)
scope = S.extract_scope(nam, pcfg.tau)
print(f"scope: {scope.area} px, bbox {scope.bbox}")

icm_res = S.icm_segment(slice_.image, scope, pcfg.icm)
print(f"ICM: window {icm_res.window}, beta {icm_res.beta:.4f}, "
      f"{len(icm_res.energies) - 1} sweeps, energy {icm_res.energies[0]:.2f} -> "
      f"{icm_res.energies[-1]:.2f}")

cands = S.extract_candidates(icm_res, scope)
print(f"candidates: {[c.area for c in cands]} px")
for j, cand in enumerate(cands):
    rnam = N.compute_rnam(net, slice_.image, cand.mask, fill=pcfg.fill)
    score = N.nam_distance(nam, rnam, scope)
    print(f"  candidate {j}: area {cand.area:3d}, residual score {score:.5f}")

res = S.segment_slice(net, slice_.image, cfg=pcfg)
d = E.dice(res.masks[0], slice_.truth_masks[0]) if res.masks else 0.0
print(f"final: outcome {res.outcome}, picked candidate {res.selected_index}, "
      f"Dice vs truth {d:.3f}")

# a small batch evaluation for context
preds, truths, labels = {}, {}, {}
for i, s in enumerate(test[:120]):
    sid = D.sample_id(i)
    r = S.segment_slice(net, s.image, cfg=pcfg)
    preds[sid], truths[sid], labels[sid] = r.masks, s.truth_masks, s.label
rep = E.report(E.detection_outcomes(preds, truths, labels))
print(f"\nover {len(labels)} test slices: TPR {rep.tpr:.3f} FPR {rep.fpr:.3f} "
      f"Dice {rep.dice_mean:.3f} TP Dice {rep.tp_dice_mean:.3f}")

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    pass
else:
    y0, x0, y1, x1 = icm_res.window
    fig, axes = plt.subplots(1, 5, figsize=(14, 3))
    panels = [
        ("slice + truth", slice_.image[0], slice_.truth_masks[0]),
        ("activation map", nam.map, None),
        ("watershed scope", slice_.image[0], scope.mask),
        ("ICM phases", None, None),
        ("selected mask", slice_.image[0], res.masks[0] if res.masks else None),
    ]
    for ax, (title, img, overlay) in zip(axes, panels):
        if title == "ICM phases":
            full = np.full(slice_.image[0].shape, -1)
            full[y0:y1, x0:x1] = icm_res.labels
            ax.imshow(full, cmap="viridis")
        else:
            ax.imshow(img, cmap="gray" if img is not nam.map else "magma")
            if overlay is not None:
                ax.contour(overlay, colors="r", linewidths=0.7)
        ax.set_title(title, fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out / "pipeline_stages.png", dpi=120)
    print(f"saved {out / 'pipeline_stages.png'}")
