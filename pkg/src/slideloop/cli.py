"""Command-line entry point: the iterative annotate -> train -> predict ->
correct loop over a project directory.

    slideloop --option new      --project P [--transfer OTHER] [--set k=v ...]
    slideloop --option train    --project P [--one_network true] [--set k=v ...]
    slideloop --option predict  --project P            ("test" is an alias)
    slideloop --option validate --project P

Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
import time
from pathlib import Path

from .analytics import AnalyticsError, report_table, validate_iterations
from .annotations import ClassBinding, ClassMap, parse_annotations, serialize_annotations
from .augment import write_training_set
from .backends import BackendError, CentroidBackend, load_backend, save_backend
from .pipeline import PredictOptions, chop_slide, predict_slide_report, train_backend
from .project import (DEFAULT_CONFIG, ProjectError, ProjectLayout,
                      apply_overrides)
from .raster import RasterError
from .slide_io import SlideError, open_slide

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_BACKEND = 3


class UsageError(Exception):
    pass


def _predict_options(config: dict) -> PredictOptions:
    return PredictOptions(
        tile_size=int(config["tile_size"]),
        overlap_fraction=float(config["overlap_fraction"]),
        lowres_scale=int(config["lowres_scale"]),
        luminance_threshold=float(config["luminance_threshold"]),
        min_tissue_fraction=float(config["min_tissue_fraction"]),
        hotspot_dilation=int(config["hotspot_dilation"]),
        hotspot_margin=int(config["hotspot_margin"]),
        workers=int(config["workers"]),
    )


def _default_classmap() -> ClassMap:
    return ClassMap([ClassBinding(layer_id=1, class_index=1, color=(0, 255, 0))])


def run_new(layout: ProjectLayout, config: dict, transfer: str | None) -> None:
    layout.create()
    layout.save_config(config)
    if transfer:
        source = ProjectLayout(Path(transfer))
        source.require_exists()
        if source.classmap_path.is_file():
            shutil.copy(source.classmap_path, layout.classmap_path)
        iterations = source.iterations()
        if iterations:
            layout.transfer_dir.mkdir(exist_ok=True)
            latest = source.models_dir(iterations[-1])
            for item in sorted(latest.iterdir()):
                shutil.copy(item, layout.transfer_dir / item.name)
            print(f"Copied warm-start state from {source.root} "
                  f"(iteration {iterations[-1]}).")
    if not layout.classmap_path.is_file():
        _default_classmap().save(layout.classmap_path)
    print(f"Created project at {layout.root}.")
    print("Drop slides into WSI/ and matching annotation XML into REGIONS/, "
          "then run --option train.")


def _warm_start(layout: ProjectLayout, name: str, n_classes: int, scale: int,
                window_radius: int) -> CentroidBackend:
    """Latest trained state, else transferred state, else a fresh backend."""
    iterations = layout.iterations()
    for source in ([layout.models_dir(iterations[-1])] if iterations else []) + \
                  [layout.transfer_dir]:
        if (Path(source) / f"{name}.json").is_file():
            backend = load_backend(source, name)
            if backend.n_classes == n_classes and backend.scale == scale:
                return backend
            print(f"Ignoring saved {name} state ({source}): class space or "
                  f"scale differs from this project.")
    return CentroidBackend(n_classes=n_classes, scale=scale,
                           window_radius=window_radius)


def run_train(layout: ProjectLayout, config: dict) -> None:
    layout.require_exists()
    annotated = layout.annotated_slides()
    if not annotated:
        raise ProjectError(
            "empty training set: no slide in WSI/ has annotation XML in REGIONS/")
    class_map = ClassMap.load(layout.classmap_path)
    n_classes = class_map.n_classes
    if n_classes < 2:
        raise ProjectError("classmap.json binds no classes")

    iteration = layout.next_iteration()
    seed = int(config["seed"]) + iteration
    one_network = bool(config["one_network"])
    scales = {"highres": 1} if one_network else \
             {"highres": 1, "lowres": int(config["lowres_scale"])}

    t0 = time.perf_counter()
    for name, scale in scales.items():
        pairs = []
        for slide_path, xml_path in annotated:
            handle = open_slide(slide_path)
            doc = parse_annotations(xml_path.read_text(encoding="utf-8"))
            pairs.extend(chop_slide(handle, doc, class_map,
                                    tile_size=int(config["tile_size"]),
                                    overlap_fraction=float(config["overlap_fraction"]),
                                    scale=scale, name=slide_path.stem))
        out_dir = layout.training_dir(iteration) / name
        plan = write_training_set(
            pairs, out_dir, base=int(config["augment_base"]),
            cap_factor=int(config["augment_cap_factor"]), seed=seed,
            hue_delta=float(config["hue_delta"]),
            lightness_delta=float(config["lightness_delta"]),
            affine_grid=int(config["affine_grid"]),
            affine_disp=float(config["affine_disp"]))
        print(f"[{name}] chopped {len(pairs)} blocks from {len(annotated)} "
              f"slide(s); wrote {plan.total} augmented pairs to {out_dir}")

        backend = _warm_start(layout, name, n_classes, scale,
                              int(config["window_radius"]))
        backend = train_backend(backend, out_dir, budget=int(config["epochs"]),
                                seed=seed)
        save_backend(backend, layout.models_dir(iteration), name)
        print(f"[{name}] trained and saved to MODELS/{iteration}/")

    print(f"Training iteration {iteration} finished in "
          f"{time.perf_counter() - t0:.1f}s.")
    print("Upload new WSIs to WSI/ and run --option predict to get "
          "annotations to correct.")


def run_predict(layout: ProjectLayout, config: dict) -> None:
    layout.require_exists()
    iterations = layout.iterations()
    if not iterations:
        raise ProjectError("no trained iteration: run --option train first")
    slides = layout.unannotated_slides()
    if not slides:
        print("Nothing to predict: every slide in WSI/ already has XML in REGIONS/.")
        return
    class_map = ClassMap.load(layout.classmap_path)
    models = layout.models_dir(iterations[-1])
    highres = load_backend(models, "highres")
    lowres = None
    if (models / "lowres.json").is_file():
        lowres = load_backend(models, "lowres")
    mode = "full" if (bool(config["one_network"]) or lowres is None) else "deepzoom"
    options = _predict_options(config)

    layout.predictions_dir.mkdir(exist_ok=True)
    for slide_path in slides:
        handle = open_slide(slide_path)
        report = predict_slide_report(handle, highres, class_map, mode=mode,
                                      lowres_backend=lowres, options=options)
        out = layout.predictions_dir / (slide_path.stem + ".xml")
        out.write_text(serialize_annotations(report.document), encoding="utf-8")
        print(f"{slide_path.stem}: {mode} evaluated "
              f"{report.highres_tiles_evaluated}/{report.highres_tiles_total} "
              f"high-res tiles in {report.seconds:.1f}s -> {out}")
    print("Correct the XML in your viewer, move it to REGIONS/, "
          "then run --option train for the next iteration.")


def run_validate(layout: ProjectLayout, config: dict) -> None:
    layout.require_exists()
    report = validate_iterations(layout, config)
    json_path = layout.root / "validation_report.json"
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    table = report_table(report)
    (layout.root / "validation_report.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    print(f"Report written to {json_path}")


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise UsageError(f"--one_network expects true or false, got {value!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slideloop",
        description="Iterative human-in-the-loop segmentation of whole-slide images.")
    parser.add_argument("--option", required=True,
                        choices=["new", "train", "predict", "test", "validate"],
                        help="iterative step to run ('test' is an alias of 'predict')")
    parser.add_argument("--project", required=True, help="project directory")
    parser.add_argument("--one_network", default=None, metavar="true|false",
                        help="skip the low-res pass and run full resolution only")
    parser.add_argument("--transfer", default=None, metavar="PROJECT",
                        help="existing project to pull warm-start state from (new)")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config value")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK

    layout = ProjectLayout(Path(args.project))
    try:
        if args.option == "new":
            config = apply_overrides(dict(DEFAULT_CONFIG), args.overrides)
            if args.one_network is not None:
                config["one_network"] = _parse_bool(args.one_network)
            run_new(layout, config, args.transfer)
            return EXIT_OK

        layout.require_exists()
        config = apply_overrides(layout.load_config(), args.overrides)
        if args.one_network is not None:
            config["one_network"] = _parse_bool(args.one_network)

        with layout.lock():
            if args.option == "train":
                run_train(layout, config)
            elif args.option in ("predict", "test"):
                run_predict(layout, config)
            elif args.option == "validate":
                run_validate(layout, config)
        return EXIT_OK
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ProjectError, SlideError, RasterError, AnalyticsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
