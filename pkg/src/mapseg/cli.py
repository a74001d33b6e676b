"""Command-line interface.

Subcommands: ingest, rasterize, tile, synth, train, finetune, predict, eval,
overlay, recipe run, params-count.  All flags are long-form; every run
records its configuration and seed into its output directory.  Exit code 0
on success; failures print a stage-tagged diagnostic and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import pipeline
from .dataset import load_dataset, load_image_png, split, store_dataset, tile
from .errors import MapsegError
from .geo import read_georef
from .labelgen import (
    NoiseParams,
    RoadWidthTable,
    label_stats,
    load_label_png,
    perturb_labels,
    rasterize_scene,
    save_label_png,
)
from .metrics import ConfusionMatrix, accumulate, format_scores_table, scores, write_scores_json
from .net import build_desk_network, build_network, count_parameters, save_checkpoint
from .osm import extract_buildings, extract_roads, parse_osm, write_diagnostics
from .synth import SceneParams, export_osm, generate_scene
from .train import TrainConfig, desk_config, fine_tune, train_loop


def _load_widths(path: str | None) -> RoadWidthTable:
    return RoadWidthTable.from_json(path) if path else RoadWidthTable()


def _load_train_config(path: str | None, seed: int | None) -> TrainConfig:
    if path:
        raw = json.loads(Path(path).read_text())
        if seed is not None:
            raw["seed"] = seed
        return TrainConfig(**raw)
    return desk_config(seed=seed or 0)


def cmd_ingest(args) -> int:
    data = Path(args.input).read_bytes()
    nodes, ways, diags = parse_osm(data)
    buildings = extract_buildings(nodes, ways, diags)
    roads = extract_roads(nodes, ways, diags)
    print(f"nodes: {len(nodes)}  ways: {len(ways)}  buildings: {len(buildings)}  roads: {len(roads)}")
    if args.diagnostics:
        with open(args.diagnostics, "w") as sink:
            write_diagnostics(diags, sink)
    elif diags:
        write_diagnostics(diags, sys.stderr)
    return 0


def cmd_rasterize(args) -> int:
    data = Path(args.input).read_bytes()
    nodes, ways, diags = parse_osm(data)
    buildings = extract_buildings(nodes, ways, diags)
    roads = extract_roads(nodes, ways, diags)
    georef = read_georef(args.georef_of)
    widths = _load_widths(args.widths)
    if args.noise:
        noise = NoiseParams.from_json(args.noise)
        labels = perturb_labels(buildings, roads, widths, noise, georef, diags)
    else:
        labels = rasterize_scene(buildings, roads, widths, georef, diags)
    save_label_png(labels, args.output)
    stats = label_stats(labels)
    print(f"wrote {args.output}  class fractions: {[round(f, 4) for f in stats.fractions]}")
    return 0


def cmd_tile(args) -> int:
    image = load_image_png(args.image)
    labels = load_label_png(args.labels)
    patches = tile(image, labels, args.tile_size)
    fractions = tuple(float(x) for x in args.fractions.split(","))
    tagged, manifest = split(patches, fractions, seed=args.seed)
    store_dataset(tagged, manifest, args.output, georef=image.georef)
    print(f"wrote {len(tagged)} patches to {args.output}  splits: {manifest.split_counts()}")
    return 0


def cmd_synth(args) -> int:
    params = SceneParams(seed=args.seed, extent_px=args.extent, style=args.style)
    widths = _load_widths(args.widths)
    image, buildings, roads = generate_scene(params, widths)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    from .dataset import save_image_png

    save_image_png(image, out / "image.png")
    (out / "scene.osm").write_bytes(export_osm(buildings, roads, image.georef))
    labels = rasterize_scene(buildings, roads, widths, image.georef)
    save_label_png(labels, out / "labels_clean.png")
    if args.noise:
        noise = NoiseParams.from_json(args.noise)
        save_label_png(perturb_labels(buildings, roads, widths, noise, image.georef), out / "labels_noisy.png")
    (out / "scene_params.json").write_text(json.dumps(asdict(params), indent=2, sort_keys=True) + "\n")
    print(f"wrote scene with {len(buildings)} buildings, {len(roads)} roads to {out}")
    return 0


def cmd_train(args) -> int:
    patches, manifest = load_dataset(args.dataset)
    config = _load_train_config(args.config, args.seed)
    net = build_desk_network(manifest.tile_size, dropout_rate=config.dropout_rate, seed=config.seed)
    best, history, ck = train_loop(net, patches, config, checkpoint_dir=args.output,
                                   checkpoint_meta={"tile_size": manifest.tile_size})
    history.write_csv(Path(args.output) / "history.csv")
    (Path(args.output) / "train_config.json").write_text(json.dumps(asdict(config), indent=2, sort_keys=True) + "\n")
    last = history.points[-1] if history.points else None
    print(f"checkpoint: {ck}  best val F1: {max((p.val_f1 for p in history.points), default=float('nan')):.4f}")
    return 0


def cmd_finetune(args) -> int:
    patches, manifest = load_dataset(args.dataset)
    config = _load_train_config(args.config, args.seed)
    best, history, ck = fine_tune(args.checkpoint, patches, config,
                                  out_checkpoint_dir=args.output,
                                  checkpoint_meta={"tile_size": manifest.tile_size})
    history.write_csv(Path(args.output) / "history.csv")
    (Path(args.output) / "train_config.json").write_text(json.dumps(asdict(config), indent=2, sort_keys=True) + "\n")
    print(f"checkpoint: {ck}")
    return 0


def cmd_predict(args) -> int:
    image = load_image_png(args.image)
    labels, probs = pipeline.predict(args.checkpoint, image, tile_size=args.tile_size)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    save_label_png(labels, out / "prediction.png")
    for k in range(probs.shape[0]):
        rgba = pipeline.overlay(image, probabilities=probs[k])
        pipeline.save_rgba_png(rgba, out / f"prob_class{k}.png")
    print(f"wrote prediction and {probs.shape[0]} probability maps to {out}")
    return 0


def cmd_eval(args) -> int:
    predicted = load_label_png(args.prediction)
    truth = load_label_png(args.truth)
    cm = accumulate(ConfusionMatrix.zeros(3), predicted.classes, truth.classes)
    cs = scores(cm)
    print(format_scores_table(cs))
    if args.output:
        write_scores_json(cs, args.output)
    return 0


def cmd_overlay(args) -> int:
    image = load_image_png(args.image) if args.image else None
    if args.probability is not None:
        from PIL import Image as PilImage

        with PilImage.open(args.probability) as im:
            prob = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        rgba = pipeline.overlay(image, probabilities=prob)
    elif args.labels:
        rgba = pipeline.overlay(image, labels=load_label_png(args.labels))
    else:
        print("error [overlay]: pass --labels or --probability", file=sys.stderr)
        return 1
    pipeline.save_rgba_png(rgba, args.output)
    print(f"wrote {args.output}")
    return 0


def cmd_recipe(args) -> int:
    config = _load_train_config(args.config, None)
    result = pipeline.run_recipe(args.name, args.root, seed=args.seed, train_config=config)
    print(f"{result.name} (seed {result.seed}): average F1 = {result.avg_f1:.4f}")
    print(f"results: {result.result_dir}")
    return 0


def cmd_params_count(args) -> int:
    if args.variant == "desk":
        net = build_desk_network(64)
    else:
        net = build_network(args.variant, class_count=3, input_size=512, init="zeros")
    print(count_parameters(net))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mapseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse an OSM XML file and report entity counts")
    p.add_argument("--input", required=True)
    p.add_argument("--diagnostics", help="write diagnostics to this file")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("rasterize", help="rasterize OSM geometry into a label PNG")
    p.add_argument("--input", required=True, help="OSM XML file")
    p.add_argument("--georef-of", required=True, help="raster file whose georef sidecar defines the grid")
    p.add_argument("--output", required=True, help="label PNG path")
    p.add_argument("--widths", help="road width table JSON")
    p.add_argument("--noise", help="noise params JSON; applies the perturbation model")
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("tile", help="cut an image/label pair into split patch sets")
    p.add_argument("--image", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--tile-size", type=int, default=64)
    p.add_argument("--fractions", default="0.75,0.125,0.125")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("synth", help="generate a synthetic scene directory")
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extent", type=int, default=768)
    p.add_argument("--style", default="A", choices=("A", "B", "C"))
    p.add_argument("--widths", help="road width table JSON")
    p.add_argument("--noise", help="noise params JSON for a noisy label variant")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the desk-scale network on a patch dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--output", required=True, help="checkpoint directory")
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="continue training from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("predict", help="predict labels and probability maps for an image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--tile-size", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score a predicted label raster against truth")
    p.add_argument("--prediction", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--output", help="scores JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("overlay", help="render an RGBA overlay for labels or probabilities")
    p.add_argument("--labels")
    p.add_argument("--probability", help="8-bit grayscale probability PNG")
    p.add_argument("--image", help="image for dimension checking")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_overlay)

    recipe = sub.add_parser("recipe", help="named experiment recipes")
    recipe_sub = recipe.add_subparsers(dest="recipe_command", required=True)
    p = recipe_sub.add_parser("run", help="run a named recipe end to end")
    p.add_argument("name", choices=sorted(pipeline.RECIPES))
    p.add_argument("--root", required=True, help="working directory for scenes/checkpoints/results")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="TrainConfig JSON")
    p.set_defaults(func=cmd_recipe)

    p = sub.add_parser("params-count", help="parameter count of a network variant")
    p.add_argument("variant", choices=("fcn_2skip_original", "fcn_3skip_ours", "desk"))
    p.set_defaults(func=cmd_params_count)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MapsegError as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
