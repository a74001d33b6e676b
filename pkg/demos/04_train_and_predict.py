"""Training the desk model on a synthetic scene and predicting from it.

Stages a small scene (image + clean labels + tile splits), trains the
reduced network with the momentum/early-stopping schedule, then predicts
the whole scene and writes label and road-probability overlays.
"""

import time
from pathlib import Path

from mapseg.pipeline import SceneBinding, overlay, predict, save_rgba_png, select_training_patches, stage_scene, TrainingStage
from mapseg.labelgen import save_label_png
from mapseg.metrics import format_scores_table
from mapseg.net import build_desk_network
from mapseg.train import desk_config, evaluate_f1, train_loop

OUT = Path(__file__).parent / "output" / "04"
OUT.mkdir(parents=True, exist_ok=True)

binding = SceneBinding("A", 0)
staged = stage_scene(binding, run_seed=0, root=OUT / "bench", extent_px=320)
stage = TrainingStage(binding, "clean", tiles=9)
patches = select_training_patches(staged, stage, run_seed=0)
print(f"training on {sum(p.split_tag == 'train' for p in patches)} tiles, "
      f"validating on {sum(p.split_tag == 'val' for p in patches)}")

config = desk_config(max_iterations=400, eval_interval=50, patience=3, seed=0)
net = build_desk_network(64, dropout_rate=config.dropout_rate, seed=0)
t0 = time.time()
best, history, _ = train_loop(net, patches, config, checkpoint_dir=OUT / "checkpoint",
                              checkpoint_meta={"tile_size": 64, "gsd_m": staged.image.georef.gsd_m})
print(f"trained for {history.points[-1].iteration} iterations in {time.time()-t0:.0f}s")
for p in history.points:
    print(f"  iter {p.iteration:4d}  loss {p.train_loss:9.1f}  val F1 {p.val_f1:.3f}  lr {p.lr:.2e}")

test = [p for p in staged.patches["clean"] if p.split_tag == "test"]
f1, scores = evaluate_f1(best, test)
print("\ntest-tile scores:")
print(format_scores_table(scores))

labels, probs = predict(OUT / "checkpoint", staged.image)
save_label_png(labels, OUT / "prediction.png")
save_rgba_png(overlay(staged.image, labels=labels), OUT / "overlay_prediction.png")
save_rgba_png(overlay(staged.image, probabilities=probs[2]), OUT / "overlay_road_probability.png")
print(f"\nwrote prediction rasters to {OUT}")
