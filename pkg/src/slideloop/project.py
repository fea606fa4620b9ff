"""Project folder structure, configuration and locking.

A project is a directory the user drops data into:

    WSI/            incoming slides (.tif/.tiff/.png)
    REGIONS/        annotation XML, same stem as its slide
    TRAINING/<i>/   chopped + augmented pairs for iteration i
    MODELS/<i>/     backend state saved after training iteration i
    PREDICTIONS/    predicted XML awaiting human correction
    HOLDOUT/        evaluation slides plus ground-truth XML
    TRANSFER/       optional warm-start state copied from another project
    classmap.json   layer -> class bindings
    config.json     hyperparameters

Corrected predictions re-enter the loop when the human moves the XML from
PREDICTIONS/ into REGIONS/; the tool never guesses which predictions were
reviewed. Training appends TRAINING/<i> and MODELS/<i> and never mutates
earlier iterations, which is what lets validation sweep every model.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

SLIDE_SUFFIXES = (".tif", ".tiff", ".png")

DEFAULT_CONFIG: dict = {
    "tile_size": 500,
    "overlap_fraction": 0.5,
    "lowres_scale": 16,
    "epochs": 2,
    "augment_base": 10,
    "augment_cap_factor": 4,
    "f1_threshold": 0.88,
    "one_network": False,
    "luminance_threshold": 224.0,
    "min_tissue_fraction": 0.01,
    "hotspot_dilation": 1,
    "hotspot_margin": 16,
    "window_radius": 1,
    "hue_delta": 10.0,
    "lightness_delta": 0.08,
    "affine_grid": 4,
    "affine_disp": 5.0,
    "seed": 1234,
    "workers": 1,
}


class ProjectError(Exception):
    """Layout violations and on-disk state problems (exit code 2)."""


@dataclass
class ProjectLayout:
    root: Path

    def __post_init__(self) -> None:
        self.root = Path(self.root)

    # -- paths ---------------------------------------------------------------
    @property
    def wsi_dir(self) -> Path:
        return self.root / "WSI"

    @property
    def regions_dir(self) -> Path:
        return self.root / "REGIONS"

    @property
    def predictions_dir(self) -> Path:
        return self.root / "PREDICTIONS"

    @property
    def holdout_dir(self) -> Path:
        return self.root / "HOLDOUT"

    @property
    def transfer_dir(self) -> Path:
        return self.root / "TRANSFER"

    def training_dir(self, iteration: int) -> Path:
        return self.root / "TRAINING" / str(iteration)

    def models_dir(self, iteration: int) -> Path:
        return self.root / "MODELS" / str(iteration)

    @property
    def classmap_path(self) -> Path:
        return self.root / "classmap.json"

    @property
    def config_path(self) -> Path:
        return self.root / "config.json"

    @property
    def lock_path(self) -> Path:
        return self.root / ".lock"

    # -- lifecycle -------------------------------------------------------------
    def create(self) -> None:
        if self.root.exists() and any(self.root.iterdir()):
            raise ProjectError(f"project exists: {self.root}")
        for d in (self.wsi_dir, self.regions_dir, self.predictions_dir,
                  self.holdout_dir, self.root / "TRAINING", self.root / "MODELS"):
            d.mkdir(parents=True, exist_ok=True)

    def require_exists(self) -> None:
        if not self.root.is_dir() or not self.config_path.is_file():
            raise ProjectError(
                f"not a project (missing config.json): {self.root}; "
                f"create one with --option new")

    # -- discovery -------------------------------------------------------------
    def iterations(self) -> list[int]:
        """Completed model iterations, validated to be consecutive from 0."""
        models = self.root / "MODELS"
        if not models.is_dir():
            return []
        found = sorted(int(p.name) for p in models.iterdir()
                       if p.is_dir() and p.name.isdigit())
        if found and found != list(range(len(found))):
            raise ProjectError(
                f"MODELS iterations must be consecutive from 0, found {found}")
        for i in found:
            if not self.training_dir(i).is_dir():
                raise ProjectError(f"MODELS/{i} has no matching TRAINING/{i}")
        return found

    def next_iteration(self) -> int:
        return len(self.iterations())

    def _slides_in(self, directory: Path) -> list[Path]:
        if not directory.is_dir():
            return []
        return sorted(p for p in directory.iterdir()
                      if p.suffix.lower() in SLIDE_SUFFIXES)

    def slides(self) -> list[Path]:
        return self._slides_in(self.wsi_dir)

    def xml_for(self, slide: Path, directory: Path | None = None) -> Path:
        return (directory or self.regions_dir) / (slide.stem + ".xml")

    def annotated_slides(self) -> list[tuple[Path, Path]]:
        out = []
        for slide in self.slides():
            xml = self.xml_for(slide)
            if xml.is_file():
                out.append((slide, xml))
        return out

    def unannotated_slides(self) -> list[Path]:
        return [s for s in self.slides() if not self.xml_for(s).is_file()]

    def holdout_slides(self) -> list[tuple[Path, Path]]:
        out = []
        for slide in self._slides_in(self.holdout_dir):
            xml = self.xml_for(slide, self.holdout_dir)
            if not xml.is_file():
                raise ProjectError(f"holdout slide {slide.name} has no truth XML")
            out.append((slide, xml))
        return out

    # -- config ----------------------------------------------------------------
    def load_config(self) -> dict:
        config = dict(DEFAULT_CONFIG)
        if self.config_path.is_file():
            config.update(json.loads(self.config_path.read_text(encoding="utf-8")))
        return config

    def save_config(self, config: dict) -> None:
        self.config_path.write_text(
            json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    # -- locking -----------------------------------------------------------------
    def lock(self) -> "ProjectLock":
        return ProjectLock(self.lock_path)


class ProjectLock:
    """Exclusive per-invocation lock (O_CREAT | O_EXCL on a root lock file)."""

    def __init__(self, path: Path):
        self.path = path
        self._fd: int | None = None

    def __enter__(self) -> "ProjectLock":
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ProjectError(
                f"project is locked by another invocation ({self.path}); "
                f"remove the lock file if that run crashed") from None
        os.write(self._fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass


def apply_overrides(config: dict, assignments: list[str]) -> dict:
    """Apply ``--set key=value`` pairs; values parse as JSON when possible so
    numbers and booleans come through typed."""
    out = dict(config)
    for item in assignments:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in DEFAULT_CONFIG:
            raise ValueError(f"unknown config key {key!r}; "
                             f"known keys: {', '.join(sorted(DEFAULT_CONFIG))}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out[key] = value
    return out
