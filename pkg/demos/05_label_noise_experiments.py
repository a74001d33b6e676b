"""Label-noise and transfer experiments on one seed.

Runs four recipes of the desk bench and prints their macro-F1 side by side:
clean versus noisy supervision at equal volume, a small clean baseline, and
domain transfer with and without fine-tuning.  For the medianized multi-seed
version of these comparisons, see tests/test_acceptance.py (criterion 7).
"""

import time
from pathlib import Path

from mapseg.pipeline import RECIPES, run_recipe
from mapseg.train import desk_config

OUT = Path(__file__).parent / "output" / "05"
ROOT = OUT / "bench"
config = desk_config(max_iterations=900, eval_interval=50, patience=3)

names = (
    "gold_standard",          # 21 clean tiles
    "complete_substitution",  # 21 noisy tiles, evaluated on clean truth
    "baseline_clean_small",   # 3 clean tiles
    "partial_substitution",   # pre-train noisy-large, fine-tune 3 clean tiles
    "no_adaptation",          # noisy-large model applied to the other domain
)

results = {}
for name in names:
    t0 = time.time()
    res = run_recipe(name, ROOT, seed=0, train_config=config)
    results[name] = res
    print(f"{name:24s} avg F1 {res.avg_f1:.3f}   "
          f"(building {res.class_scores.f1[1]:.3f}, road {res.class_scores.f1[2]:.3f})"
          f"  [{time.time()-t0:.0f}s]")

print()
gold = results["gold_standard"].avg_f1
noisy = results["complete_substitution"].avg_f1
print(f"label noise at equal volume costs {gold - noisy:+.3f} avg F1")
small = results["baseline_clean_small"].avg_f1
print(f"21 noisy tiles vs 3 clean tiles: {noisy - small:+.3f}")
tuned = results["partial_substitution"].avg_f1
raw = results["no_adaptation"].avg_f1
print(f"fine-tuning on 3 clean tiles recovers {tuned - raw:+.3f} over no adaptation")
print(f"\nresult directories under {ROOT / 'results'}")
