"""Pixel-level F1 and image-level AUC protocols, and the dataset harness."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ComprintError, InputError
from .imageio import IMAGE_EXTENSIONS, list_images, load_gray, load_mask
from .localization import LocalizationConfig, localize, make_providers

log = logging.getLogger(__name__)

MASK_SUFFIX = "_mask"
PERCENTILE = 0.995


def _check_dims(heatmap, mask):
    heatmap = np.asarray(heatmap, dtype=np.float64)
    mask = np.asarray(mask) != 0
    if heatmap.shape != mask.shape:
        raise InputError(f"heatmap {heatmap.shape} and mask {mask.shape} differ in size")
    return heatmap, mask


def f1_at_threshold(heatmap, mask, t):
    """F1 of the binarization ``heatmap >= t`` against `mask`."""
    heatmap, mask = _check_dims(heatmap, mask)
    pred = heatmap >= t
    tp = np.count_nonzero(pred & mask)
    fp = np.count_nonzero(pred & ~mask)
    fn = np.count_nonzero(~pred & mask)
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def _f1_curve(scores, truth):
    """F1 at every distinct value of `scores` used as a ``>=`` threshold."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.cumsum(truth[order])
    k = np.arange(1, len(s) + 1)
    # last index of each run of equal values: everything >= s there is predicted positive
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = tp[last]
    fp = k[last] - tp
    fn = truth.sum() - tp
    return s[last], 2.0 * tp / (2 * tp + fp + fn)


def max_f1(heatmap, mask):
    """Best F1 over all thresholds and both mask orientations.

    Every distinct heatmap value is tried as a threshold, which covers
    every possible binarization. Returns ``(f1, threshold, orientation)``
    with orientation ``"regular"`` or ``"inverted"``; ties prefer the
    regular mask and then the higher threshold. Returns None for a mask
    with a single class.
    """
    heatmap, mask = _check_dims(heatmap, mask)
    n_pos = np.count_nonzero(mask)
    if n_pos == 0 or n_pos == mask.size:
        return None
    scores = heatmap.ravel()
    best = (-1.0, None, None)
    for orientation, truth in (("regular", mask.ravel()), ("inverted", ~mask.ravel())):
        thresholds, f1 = _f1_curve(scores, truth.astype(np.int64))
        i = int(np.argmax(f1))
        if f1[i] > best[0]:
            best = (float(f1[i]), float(thresholds[i]), orientation)
    return best


def detection_statistic(heatmap):
    """Nearest-rank 99.5th percentile of the heatmap values."""
    v = np.sort(np.asarray(heatmap, dtype=np.float64).ravel())
    if v.size == 0:
        raise InputError("detection statistic of an empty heatmap")
    return float(v[math.ceil(PERCENTILE * v.size) - 1])


def roc_auc(scores_fake, scores_real):
    """AUC as P(fake > real) + 0.5 P(fake == real), and the ROC points.

    The points are (FPR, TPR) pairs for the thresholds ``score >= t`` at
    every distinct score, starting from (0, 0) and ending at (1, 1).
    """
    f = np.asarray(scores_fake, dtype=np.float64).ravel()
    r = np.asarray(scores_real, dtype=np.float64).ravel()
    if f.size == 0 or r.size == 0:
        raise InputError("AUC needs at least one fake and one real score")
    allv = np.concatenate([f, r])
    # midranks handle ties as one half
    order = np.argsort(allv, kind="stable")
    ranks = np.empty(allv.size)
    sv = allv[order]
    starts = np.flatnonzero(np.r_[True, sv[1:] != sv[:-1]])
    ends = np.r_[starts[1:], sv.size]
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = 0.5 * (a + b + 1)
    u = ranks[:f.size].sum() - f.size * (f.size + 1) / 2.0
    auc = u / (f.size * r.size)

    thresholds = np.unique(allv)[::-1]
    tpr = [(f >= t).mean() for t in thresholds]
    fpr = [(r >= t).mean() for t in thresholds]
    points = [(0.0, 0.0)] + [(float(x), float(y)) for x, y in zip(fpr, tpr)]
    return float(auc), points


@dataclass
class ImageRecord:
    name: str
    kind: str                 # "fake" or "real"
    status: str               # "ok", "skipped" or "failed"
    f1: float = float("nan")
    threshold: float = float("nan")
    orientation: str = ""
    score: float = float("nan")
    reason: str = ""


@dataclass
class EvalReport:
    records: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    roc_points: list = field(default_factory=list)

    def _select(self, kind=None, status=None):
        return [r for r in self.records
                if (kind is None or r.kind == kind) and (status is None or r.status == status)]

    @property
    def total(self):
        return len(self.records)

    @property
    def counts(self):
        return {s: len(self._select(status=s)) for s in ("ok", "skipped", "failed")}

    @property
    def mean_f1(self):
        """Unweighted mean max-F1 over scored fakes; NaN when there are none."""
        f1 = [r.f1 for r in self._select("fake", "ok") if not math.isnan(r.f1)]
        return float(np.mean(f1)) if f1 else float("nan")

    def scores(self, kind):
        return [r.score for r in self._select(kind) if not math.isnan(r.score)]

    @property
    def auc(self):
        fake, real = self.scores("fake"), self.scores("real")
        if not fake or not real:
            return float("nan")
        return roc_auc(fake, real)[0]

    def summary(self):
        c = self.counts
        mean = self.mean_f1
        return {
            "total": self.total,
            "ok": c["ok"],
            "skipped": c["skipped"],
            "failed": c["failed"],
            "fakes_scored_f1": len([r for r in self._select("fake", "ok")
                                    if not math.isnan(r.f1)]),
            "mean_max_f1": "undefined" if math.isnan(mean) else f"{mean:.6f}",
            "auc": "undefined" if math.isnan(self.auc) else f"{self.auc:.6f}",
        }

    def write(self, path):
        """Tab-separated records, followed by a ``#``-prefixed summary block."""
        cols = ["name", "kind", "status", "max_f1", "threshold", "orientation", "score", "reason"]
        lines = ["\t".join(cols)]
        for r in self.records:
            lines.append("\t".join([r.name, r.kind, r.status, _fmt(r.f1), _fmt(r.threshold),
                                    r.orientation, _fmt(r.score),
                                    r.reason.replace("\t", " ").replace("\n", " ")]))
        lines.append("")
        for k, v in self.summary().items():
            lines.append(f"# {k}\t{v}")
        Path(path).write_text("\n".join(lines) + "\n")

    def write_roc(self, path):
        lines = ["fpr\ttpr"] + [f"{x:.6f}\t{y:.6f}" for x, y in self.roc_points]
        Path(path).write_text("\n".join(lines) + "\n")

    def table(self):
        """Human-readable per-image table and summary."""
        out = [f"{'image':<28}{'kind':<6}{'status':<9}{'max-F1':>8}{'score':>9}"]
        for r in self.records:
            out.append(f"{r.name[:27]:<28}{r.kind:<6}{r.status:<9}{_fmt(r.f1, 3):>8}"
                       f"{_fmt(r.score, 4):>9}" + (f"  {r.reason}" if r.reason else ""))
        s = self.summary()
        out.append(f"{s['total']} images: {s['ok']} ok, {s['skipped']} skipped, "
                   f"{s['failed']} failed; mean max-F1 {s['mean_max_f1']}; AUC {s['auc']}")
        return "\n".join(out)


def _fmt(x, digits=6):
    return "nan" if x is None or math.isnan(x) else f"{x:.{digits}f}"


def pair_images(fake_dir, mask_dir, mask_suffix=MASK_SUFFIX):
    """Pair each image with its mask by file stem.

    The mask of ``name.ext`` is ``name<suffix>.<any image ext>`` in `mask_dir`,
    or failing that ``name.<any image ext>``. Images without a mask come back
    with None.
    """
    masks = {}
    for p in list_images(mask_dir, IMAGE_EXTENSIONS):
        masks.setdefault(p.stem, p)
    pairs = []
    for img in list_images(fake_dir, IMAGE_EXTENSIONS):
        if mask_dir and Path(mask_dir).resolve() == Path(fake_dir).resolve() \
                and img.stem.endswith(mask_suffix):
            continue
        pairs.append((img, masks.get(img.stem + mask_suffix, masks.get(img.stem))))
    return pairs


@dataclass
class Pipeline:
    """What to run per image: providers, model files and localization options."""

    providers: tuple = ("comprint",)
    model_paths: tuple = ()
    localization: LocalizationConfig = field(default_factory=LocalizationConfig)


_worker_cache = {}


def _providers_for(pipeline):
    key = (tuple(pipeline.providers), tuple(str(p) for p in pipeline.model_paths))
    if key not in _worker_cache:
        _worker_cache.clear()
        _worker_cache[key] = make_providers(pipeline.providers, pipeline.model_paths)
    return _worker_cache[key]


def evaluate_image(job):
    """Evaluate one (image, mask-or-None, kind) job; never raises on bad data."""
    image_path, mask_path, kind, pipeline = job
    name = Path(image_path).name
    try:
        img = load_gray(image_path)
        mask = None
        if kind == "fake":
            if mask_path is None:
                return ImageRecord(name, kind, "skipped", reason="no mask found")
            mask = load_mask(mask_path)
            if mask.shape != img.shape:
                return ImageRecord(name, kind, "skipped",
                                   reason=f"mask {mask.shape} does not match image {img.shape}")
            if mask.all() or not mask.any():
                return ImageRecord(name, kind, "skipped", reason="mask has a single class")
        hm = localize(img, _providers_for(pipeline), pipeline.localization)
        score = detection_statistic(hm.scores)
        if mask is None:
            return ImageRecord(name, kind, "ok", score=score)
        f1, t, orientation = max_f1(hm.scores, mask)
        return ImageRecord(name, kind, "ok", f1, t, orientation, score)
    except ComprintError as exc:
        log.warning("%s failed: %s", name, exc)
        return ImageRecord(name, kind, "failed", reason=f"{type(exc).__name__}: {exc}")


def evaluate_dataset(fake_dir, mask_dir, pipeline, real_dir=None, workers=None,
                     mask_suffix=MASK_SUFFIX):
    """Localize every fake (and real) image and collect max-F1, scores and AUC.

    `workers` > 1 uses a process pool; records keep directory order either
    way, so the report does not depend on the worker count.
    """
    pairs = pair_images(fake_dir, mask_dir, mask_suffix)
    if not any(m is not None for _, m in pairs):
        raise InputError(f"no (image, mask) pairs found in {fake_dir} / {mask_dir}")
    jobs = [(img, m, "fake", pipeline) for img, m in pairs]
    if real_dir is not None:
        jobs += [(p, None, "real", pipeline) for p in list_images(real_dir, IMAGE_EXTENSIONS)]
    workers = workers or os.cpu_count() or 1
    if workers > 1 and len(jobs) > 1:
        from multiprocessing import get_context

        with get_context("spawn").Pool(min(workers, len(jobs))) as pool:
            records = pool.map(evaluate_image, jobs)
    else:
        records = [evaluate_image(j) for j in jobs]
    report = EvalReport(records)
    fake, real = report.scores("fake"), report.scores("real")
    if fake and real:
        report.roc_points = roc_auc(fake, real)[1]
    assert report.total == sum(report.counts.values())
    return report
