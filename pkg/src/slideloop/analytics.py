"""Segmentation metrics, per-iteration validation, and the annotation
time-savings model.

Metrics are one-vs-rest pixel counts with the 0/0 -> 1 convention, so
holdout slides that legitimately contain none of a class score as perfect
vacuous agreement instead of poisoning averages.

The time-savings model fits normalized per-region annotation time A(r)
(per-slide averages, normalized by the iteration-0 mean) with an
exponential decay exp(-r/tau). The decay constant tau then gives the loop's
total annotation cost H = tau * (1 - exp(-R/tau)) against the manual
baseline B = R, and the savings percentage
P = (1 - H/B) * 100 = (1 + (tau/R) * (exp(-R/tau) - 1)) * 100.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize

from .raster import MaskTile

TAU_CAP_FACTOR = 100.0  # tau capped at 100 * R: "no measurable improvement"


class AnalyticsError(Exception):
    pass


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class Metrics:
    sensitivity: float
    specificity: float
    precision: float
    accuracy: float
    f1: float

    def as_dict(self) -> dict[str, float]:
        return {"sensitivity": self.sensitivity, "specificity": self.specificity,
                "precision": self.precision, "accuracy": self.accuracy,
                "f1": self.f1}


def _ratio(num: int, denom: int) -> float:
    """Pixel-count ratio with the vacuous-agreement convention 0/0 -> 1."""
    if denom == 0:
        return 1.0
    return num / denom


def compute_metrics(pred: MaskTile | np.ndarray, truth: MaskTile | np.ndarray,
                    positive_class: int) -> tuple[ConfusionCounts, Metrics]:
    """One-vs-rest confusion counts and metrics for one class."""
    p = pred.values if isinstance(pred, MaskTile) else np.asarray(pred)
    t = truth.values if isinstance(truth, MaskTile) else np.asarray(truth)
    if p.shape != t.shape:
        raise AnalyticsError(f"dimension mismatch: pred {p.shape} vs truth {t.shape}")
    if isinstance(pred, MaskTile) and isinstance(truth, MaskTile):
        if pred.scale != truth.scale:
            raise AnalyticsError("scale mismatch between pred and truth")

    pp = p == positive_class
    tt = t == positive_class
    tp = int(np.count_nonzero(pp & tt))
    fp = int(np.count_nonzero(pp & ~tt))
    fn = int(np.count_nonzero(~pp & tt))
    tn = int(np.count_nonzero(~pp & ~tt))
    counts = ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)

    sens = _ratio(tp, tp + fn)
    spec = _ratio(tn, tn + fp)
    prec = _ratio(tp, tp + fp)
    acc = _ratio(tp + tn, counts.total)
    f1 = 2 * prec * sens / (prec + sens) if (prec + sens) > 0 else 0.0
    return counts, Metrics(sensitivity=sens, specificity=spec, precision=prec,
                           accuracy=acc, f1=f1)


def mean_foreground_metrics(pred, truth, n_classes: int) -> dict:
    """Per-foreground-class metrics plus their unweighted mean."""
    per_class = {}
    for cls in range(1, n_classes):
        _, m = compute_metrics(pred, truth, cls)
        per_class[cls] = m
    mean_f1 = float(np.mean([m.f1 for m in per_class.values()])) if per_class else 1.0
    return {"per_class": per_class, "mean_f1": mean_f1}


def correction_burden(f1_scores, threshold: float = 0.88) -> float:
    """Fraction of items at or below the acceptability threshold, i.e. the
    share of new items an expert still has to correct."""
    scores = list(f1_scores)
    if not scores:
        raise AnalyticsError("empty F1 list")
    if not 0.0 <= threshold < 1.0:
        raise AnalyticsError(f"threshold must be in [0, 1), got {threshold}")
    return sum(1 for s in scores if s <= threshold) / len(scores)


# ---------------------------------------------------------------------------
# Annotation-economics model
# ---------------------------------------------------------------------------

@dataclass
class TimingRecord:
    wsi_id: str
    iteration: int
    region_index: int  # cumulative count of regions annotated so far
    seconds: float


@dataclass
class HailSeries:
    """Per-slide averaged normalized annotation times.

    ``points`` are (r, A) pairs: r is the cumulative region count at the end
    of a slide, A the slide's mean per-region seconds divided by the
    iteration-0 mean t0.
    """

    t0: float
    points: list[tuple[float, float]] = field(default_factory=list)

    @property
    def total_regions(self) -> float:
        return max((r for r, _ in self.points), default=0.0)


@dataclass
class HailFit:
    tau: float
    total_regions: float
    loop_time: float  # H, normalized
    baseline_time: float  # B = R
    savings_percent: float  # P
    capped: bool = False  # tau hit the cap: no measurable improvement


def series_from_records(records) -> HailSeries:
    """Group timing records into per-slide points and normalize by the
    iteration-0 mean per-region time."""
    records = sorted(records, key=lambda rec: rec.region_index)
    iter0 = [rec.seconds for rec in records if rec.iteration == 0]
    if not iter0:
        raise AnalyticsError("no iteration-0 records: baseline t0 is undefined")
    if any(rec.seconds <= 0 for rec in records):
        raise AnalyticsError("non-positive annotation time in records")
    t0 = sum(iter0) / len(iter0)

    by_slide: dict[tuple[int, str], list[TimingRecord]] = {}
    for rec in records:
        by_slide.setdefault((rec.iteration, rec.wsi_id), []).append(rec)
    points = []
    for key in sorted(by_slide, key=lambda k: max(r.region_index for r in by_slide[k])):
        group = by_slide[key]
        r = max(rec.region_index for rec in group)
        mean_t = sum(rec.seconds for rec in group) / len(group)
        points.append((float(r), mean_t / t0))
    return HailSeries(t0=t0, points=points)


def load_timing_csv(path: str | Path) -> HailSeries:
    """Ingest the timing log format: CSV ``wsi_id,iteration,region_index,seconds``
    (header optional)."""
    text = Path(path).read_text(encoding="utf-8")
    records = []
    for row in csv.reader(io.StringIO(text)):
        if not row or row[0].strip() == "wsi_id":
            continue
        records.append(TimingRecord(wsi_id=row[0].strip(), iteration=int(row[1]),
                                    region_index=int(row[2]), seconds=float(row[3])))
    return series_from_records(records)


def _decay_sse(log_tau: float, rs: np.ndarray, As: np.ndarray) -> float:
    tau = math.exp(log_tau)
    return float(((As - np.exp(-rs / tau)) ** 2).sum())


def fit_hail_curve(series: HailSeries) -> HailFit:
    """Least-squares fit of A(r) = exp(-r/tau) over the series points.

    The minimization runs over log(tau) (bracketed, relative tolerance 1e-6);
    tau is capped at 100 * R and a capped fit is flagged as showing no
    measurable improvement.
    """
    if len(series.points) < 2:
        raise AnalyticsError("need at least 2 per-slide points to fit")
    rs = np.array([p[0] for p in series.points], dtype=np.float64)
    As = np.array([p[1] for p in series.points], dtype=np.float64)
    if (rs <= 0).any():
        raise AnalyticsError("region counts must be positive")

    R = float(rs.max())
    tau_max = TAU_CAP_FACTOR * R
    lo, hi = math.log(1e-6 * R), math.log(tau_max)
    res = optimize.minimize_scalar(_decay_sse, bounds=(lo, hi), args=(rs, As),
                                   method="bounded",
                                   options={"xatol": 1e-7, "maxiter": 500})
    tau = math.exp(res.x)
    capped = tau >= 0.99 * tau_max
    if capped:
        tau = tau_max
    H = tau * (1.0 - math.exp(-R / tau))
    B = R
    P = time_savings(tau, R)
    return HailFit(tau=tau, total_regions=R, loop_time=H, baseline_time=B,
                   savings_percent=P, capped=capped)


def time_savings(tau: float, total_regions: float) -> float:
    """Closed-form savings percentage P = (1 + (tau/R)(e^(-R/tau) - 1)) * 100."""
    if tau <= 0 or total_regions <= 0:
        raise AnalyticsError("tau and total_regions must be positive")
    ratio = tau / total_regions
    return (1.0 + ratio * (math.exp(-total_regions / tau) - 1.0)) * 100.0


# ---------------------------------------------------------------------------
# Per-iteration validation on the holdout set
# ---------------------------------------------------------------------------

def validate_iterations(layout, config: dict | None = None) -> dict:
    """Evaluate every saved model iteration on the holdout slides.

    For each iteration the latest models are pulled from MODELS/<i> and every
    holdout slide is predicted; metrics are computed against the rasterized
    truth XML per class plus an unweighted mean. When both a low-res and a
    high-res model exist, deepzoom and full mode are both run so their
    accuracy and wall-clock cost can be compared; the project's default mode
    supplies the headline numbers. Report ordering is deterministic.
    """
    from .annotations import ClassMap, parse_annotations
    from .backends import load_backend
    from .pipeline import PredictOptions, predict_slide_report
    from .project import ProjectError
    from .raster import rasterize_window
    from .slide_io import open_slide

    config = config or layout.load_config()
    iterations = layout.iterations()
    if not iterations:
        raise ProjectError("no trained iteration: run --option train first")
    holdout = layout.holdout_slides()
    if not holdout:
        raise ProjectError("HOLDOUT/ is empty: add slides plus truth XML")
    class_map = ClassMap.load(layout.classmap_path)
    n_classes = class_map.n_classes
    threshold = float(config["f1_threshold"])

    options = PredictOptions(
        tile_size=int(config["tile_size"]),
        overlap_fraction=float(config["overlap_fraction"]),
        lowres_scale=int(config["lowres_scale"]),
        luminance_threshold=float(config["luminance_threshold"]),
        min_tissue_fraction=float(config["min_tissue_fraction"]),
        hotspot_dilation=int(config["hotspot_dilation"]),
        hotspot_margin=int(config["hotspot_margin"]),
        workers=int(config["workers"]),
    )

    report: dict = {"f1_threshold": threshold, "iterations": []}
    for iteration in iterations:
        models = layout.models_dir(iteration)
        highres = load_backend(models, "highres")
        lowres = None
        if (models / "lowres.json").is_file():
            lowres = load_backend(models, "lowres")
        default_mode = "full" if (config["one_network"] or lowres is None) else "deepzoom"

        entry = {"iteration": iteration, "slides": []}
        slide_f1 = []
        for slide_path, xml_path in holdout:
            handle = open_slide(slide_path)
            truth_doc = parse_annotations(xml_path.read_text(encoding="utf-8"))
            truth = rasterize_window(truth_doc, class_map, (0, 0),
                                     (handle.width, handle.height), 1)
            modes = ["full"] if lowres is None else ["deepzoom", "full"]
            per_mode = {}
            for mode in modes:
                rep = predict_slide_report(handle, highres, class_map, mode=mode,
                                           lowres_backend=lowres, options=options)
                scored = mean_foreground_metrics(rep.mask, truth, n_classes)
                per_mode[mode] = {
                    "per_class": {str(c): m.as_dict()
                                  for c, m in scored["per_class"].items()},
                    "mean_f1": scored["mean_f1"],
                    "tiles_evaluated": rep.highres_tiles_evaluated,
                    "seconds": rep.seconds,
                }
            headline = per_mode[default_mode]
            slide_f1.append(headline["mean_f1"])
            entry["slides"].append({
                "slide": slide_path.stem,
                "mode": default_mode,
                "mean_f1": headline["mean_f1"],
                "per_class": headline["per_class"],
                "modes": per_mode,
            })
        entry["mean_f1"] = float(np.mean(slide_f1))
        entry["correction_burden"] = correction_burden(slide_f1, threshold)
        report["iterations"].append(entry)
    return report


def report_table(report: dict) -> str:
    """Flat text rendering of a validation report."""
    lines = [f"{'iter':>4}  {'slide':<24} {'mode':<8} {'mean F1':>8}  seconds"]
    for entry in report["iterations"]:
        for slide in entry["slides"]:
            secs = slide["modes"][slide["mode"]]["seconds"]
            lines.append(f"{entry['iteration']:>4}  {slide['slide']:<24} "
                         f"{slide['mode']:<8} {slide['mean_f1']:>8.4f}  {secs:.2f}")
        lines.append(f"{entry['iteration']:>4}  {'<all slides>':<24} "
                     f"{'':<8} {entry['mean_f1']:>8.4f}  "
                     f"burden={entry['correction_burden']:.3f}")
    return "\n".join(lines) + "\n"
