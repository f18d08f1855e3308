"""Synthetic labeled phantoms: smooth healthy volumes with plantable lesions.

Run:  python3 demos/02_synthetic_phantoms.py
Writes phantom_views.png when matplotlib is available.
"""

import numpy as np

from radfp import PhantomConfig, gen_cohort, gen_phantom
from radfp.dataset import VIEWS

config = PhantomConfig(dims=(16, 32, 32), grid_n=2, acl_prob=0.45, men_prob=0.45)

# Deterministic per seed: the same (seed, config) always yields the same subject.
a = gen_phantom(123, config)
b = gen_phantom(123, config)
assert all(np.array_equal(a.views[v].data, b.views[v].data) for v in VIEWS)
print(f"subject seed=123 labels: {a.labels}")
for view in VIEWS:
    print(f"  {view}: lesions {a.lesion_spec[view] or 'none'}")

cohort = gen_cohort(2026, 300, config)
counts = {task: sum(r.labels[task] for r in cohort) for task in ("abn", "acl", "men")}
rates = {task: round(n / len(cohort), 2) for task, n in counts.items()}
print(f"\ncohort of {len(cohort)}: positives {counts} (rates {rates})")

# Lesions change only the designated patch of the designated view.
healthy = gen_phantom(5, PhantomConfig(dims=(16, 32, 32), acl_prob=0.0, men_prob=0.0))
with_acl = gen_phantom(5, PhantomConfig(dims=(16, 32, 32), acl_prob=1.0, men_prob=0.0))
diff = with_acl.views["sagittal"].data - healthy.views["sagittal"].data
changed = np.argwhere(diff != 0)
print(f"\nacl lesion touches {len(changed)} voxels, "
      f"z {changed[:, 0].min()}..{changed[:, 0].max()}, "
      f"y {changed[:, 1].min()}..{changed[:, 1].max()}, "
      f"x {changed[:, 2].min()}..{changed[:, 2].max()} "
      f"(designated patch {with_acl.lesion_spec['sagittal'][0][0]})")

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    print("matplotlib not installed; skipping the montage")
else:
    fig, axes = plt.subplots(2, 3, figsize=(9, 5))
    subject = gen_phantom(9, PhantomConfig(dims=(16, 32, 32), acl_prob=1.0, men_prob=1.0))
    for col, view in enumerate(VIEWS):
        vol = subject.views[view].data
        axes[0, col].imshow(vol[vol.shape[0] // 2], cmap="gray")
        axes[0, col].set_title(f"{view} (mid z)")
        axes[1, col].imshow(vol[3 * vol.shape[0] // 4], cmap="gray")
        axes[1, col].set_title(f"{view} (posterior z)")
        for ax in axes[:, col]:
            ax.axis("off")
    fig.suptitle(f"labels {subject.labels}")
    fig.tight_layout()
    fig.savefig("phantom_views.png", dpi=120)
    print("wrote phantom_views.png")
