"""From fingerprints to a forgery heatmap.

A fingerprint is normalized, quantized to three symbols, and summarized
per sliding window by a histogram of 4-tap co-occurrence patterns. The
window features (optionally stacked across several fingerprints) are
clustered into two classes by a Gaussian-mixture EM, and the per-window
posteriors are spread back to pixels.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import (ComprintError, DegenerateClusteringError, DegenerateInputError,
                     InputError)

log = logging.getLogger(__name__)

TAPS = 4
TRUNCATION = 1


def _orbit_table(taps=TAPS, t=TRUNCATION):
    """Map each pattern code to the index of its reversal/negation orbit."""
    symbols = range(-t, t + 1)
    base = 2 * t + 1
    orbit_of = {}
    index = np.empty(base ** taps, dtype=np.int64)
    for pattern in itertools.product(symbols, repeat=taps):
        rev = pattern[::-1]
        neg = tuple(-s for s in pattern)
        key = min(pattern, rev, neg, tuple(-s for s in rev))
        if key not in orbit_of:
            orbit_of[key] = len(orbit_of)
        code = 0
        for s in pattern:
            code = code * base + (s + t)
        index[code] = orbit_of[key]
    return index, len(orbit_of)


PATTERN_TO_ORBIT, N_ORBITS = _orbit_table()


@dataclass
class LocalizationConfig:
    window: int = 128
    stride: int = 8
    quant_step: float = 1.0
    truncation: int = TRUNCATION
    pca_dims: int = 25
    em_tol: float = 1e-6
    em_max_iter: int = 200
    em_restarts: int = 0
    em_reg: float = 1e-6
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class FeatureField:
    """Per-window feature vectors on a (rows, cols) grid."""

    features: np.ndarray            # (rows, cols, F)
    window: int
    stride: int
    image_shape: tuple
    provenance: list = field(default_factory=list)
    dims: list = field(default_factory=list)

    @property
    def grid(self):
        return self.features.shape[:2]

    @property
    def dim(self):
        return self.features.shape[2]


@dataclass
class EmModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    loglik_trace: list
    converged: bool = False
    pca_mean: np.ndarray = None     # feature-space centre of the projection
    pca_basis: np.ndarray = None    # (F, dims) orthonormal columns

    @property
    def feature_means(self):
        """Component means mapped back to the original feature space."""
        return self.pca_mean + self.means @ self.pca_basis.T


def normalize_fingerprint(fp):
    """Zero mean, unit variance over the whole field."""
    fp = np.asarray(fp, dtype=np.float64)
    if not np.all(np.isfinite(fp)):
        raise DegenerateInputError("fingerprint contains non-finite values")
    mean = fp.mean()
    std = fp.std()
    if std == 0 or np.all(fp == fp.flat[0]):
        raise DegenerateInputError("cannot normalize a constant fingerprint")
    return (fp - mean) / std


def quantize(fp_norm, step=1.0, t=TRUNCATION):
    return np.clip(np.round(fp_norm / step), -t, t).astype(np.int64)


def _pattern_codes(q, t=TRUNCATION):
    """Codes of the horizontal and vertical 4-tap patterns anchored at each pixel."""
    base = 2 * t + 1
    s = q + t
    h = np.zeros((q.shape[0], q.shape[1] - TAPS + 1), dtype=np.int64)
    v = np.zeros((q.shape[0] - TAPS + 1, q.shape[1]), dtype=np.int64)
    for k in range(TAPS):
        h = h * base + s[:, k:k + h.shape[1]]
        v = v * base + s[k:k + v.shape[0], :]
    return h, v


def _box_sums(indicator, rows, cols, size_y, size_x, stride):
    """Sums of `indicator` over boxes of size (size_y, size_x) on the window grid."""
    ii = np.zeros((indicator.shape[0] + 1, indicator.shape[1] + 1))
    ii[1:, 1:] = indicator.cumsum(0).cumsum(1)
    y0 = np.arange(rows) * stride
    x0 = np.arange(cols) * stride
    y1, x1 = y0 + size_y, x0 + size_x
    return (ii[y1][:, x1] - ii[y0][:, x1] - ii[y1][:, x0] + ii[y0][:, x0])


def window_grid(shape, window, stride):
    h, w = shape
    if h < window or w < window:
        raise InputError(f"image {h}x{w} is smaller than the {window}x{window} window")
    return (h - window) // stride + 1, (w - window) // stride + 1


def cooccurrence_histograms(fp_norm, window, stride, step=1.0, t=TRUNCATION):
    """Per-window orbit histograms, L1-normalized (before the square root).

    A pattern belongs to a window when all four of its taps lie inside it;
    horizontal and vertical patterns share one histogram.
    """
    if t != TRUNCATION:
        raise InputError(f"only truncation T={TRUNCATION} is supported")
    if window < TAPS:
        raise InputError(f"window must be at least {TAPS} pixels")
    rows, cols = window_grid(fp_norm.shape, window, stride)
    q = quantize(fp_norm, step, t)
    hc, vc = _pattern_codes(q, t)
    ho, vo = PATTERN_TO_ORBIT[hc], PATTERN_TO_ORBIT[vc]
    hist = np.zeros((rows, cols, N_ORBITS))
    for k in range(N_ORBITS):
        hist[..., k] = (_box_sums(ho == k, rows, cols, window, window - TAPS + 1, stride)
                        + _box_sums(vo == k, rows, cols, window - TAPS + 1, window, stride))
    total = 2 * window * (window - TAPS + 1)
    return hist / total


def cooccurrence_features(fp_norm, window=128, stride=8, step=1.0, t=TRUNCATION, name="fp"):
    """Square-root mapped co-occurrence histograms on the sliding-window grid."""
    fp_norm = np.asarray(fp_norm, dtype=np.float64)
    hist = cooccurrence_histograms(fp_norm, window, stride, step, t)
    return FeatureField(np.sqrt(hist), window, stride, tuple(fp_norm.shape), [name], [N_ORBITS])


def stack_features(fields):
    """Concatenate feature vectors cell by cell (fusion by feature stacking)."""
    fields = list(fields)
    if not fields:
        raise InputError("nothing to stack")
    ref = fields[0]
    for i, f in enumerate(fields[1:], start=1):
        if (f.grid != ref.grid or f.window != ref.window or f.stride != ref.stride
                or tuple(f.image_shape) != tuple(ref.image_shape)):
            raise InputError(f"feature field {i} ({', '.join(f.provenance)}) does not share "
                             f"grid/window geometry with field 0")
    if len(fields) == 1:
        return ref
    return FeatureField(np.concatenate([f.features for f in fields], axis=2),
                        ref.window, ref.stride, ref.image_shape,
                        [p for f in fields for p in f.provenance],
                        [d for f in fields for d in f.dims])


def _pca(x, dims):
    """Project onto the top `dims` principal axes; returns (scores, mean, basis)."""
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / len(x)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:dims]
    evecs = evecs[:, order]
    # deterministic sign: largest-magnitude loading positive
    idx = np.argmax(np.abs(evecs), axis=0)
    evecs = evecs * np.sign(evecs[idx, np.arange(evecs.shape[1])])
    return centered @ evecs, mean, evecs


def _log_gauss(x, mean, cov):
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise DegenerateClusteringError("covariance is not positive definite") from exc
    z = np.linalg.solve(chol, (x - mean).T)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    d = x.shape[1]
    return -0.5 * (np.sum(z * z, axis=0) + logdet + d * np.log(2 * np.pi)), chol


def _objective(x, weights, means, covs, prior):
    """Log-likelihood plus the covariance-prior term, and responsibilities."""
    logp = np.empty((len(x), len(weights)))
    penalty = 0.0
    for k in range(len(weights)):
        logp[:, k], chol = _log_gauss(x, means[k], covs[k])
        logp[:, k] += np.log(weights[k])
        inv_chol = np.linalg.inv(chol)
        penalty -= 0.5 * prior * np.sum(inv_chol * inv_chol)
    norm = logsumexp(logp, axis=1)
    resp = np.exp(logp - norm[:, None])
    return float(norm.sum()) + penalty, resp


def _m_step(x, resp, prior, d):
    nk = resp.sum(axis=0)
    if np.any(nk < 1e-10 * len(x)):
        raise DegenerateClusteringError("a mixture component lost all its cells")
    weights = nk / nk.sum()
    means = (resp.T @ x) / nk[:, None]
    covs = np.empty((len(nk), d, d))
    for k in range(len(nk)):
        xc = x - means[k]
        covs[k] = (resp[:, k, None] * xc).T @ xc
        covs[k] += prior * np.eye(d)
        covs[k] /= nk[k]
        covs[k] = 0.5 * (covs[k] + covs[k].T)
    return weights, means, covs


def _run_em(x, resp, prior, tol, max_iter):
    n, d = x.shape
    weights, means, covs = _m_step(x, resp, prior, d)
    trace = []
    converged = False
    for _ in range(max_iter):
        obj, resp = _objective(x, weights, means, covs, prior)
        trace.append(obj)
        if len(trace) > 1 and (trace[-1] - trace[-2]) / n < tol:
            converged = True
            break
        weights, means, covs = _m_step(x, resp, prior, d)
    return EmModel(weights, means, covs, trace, converged), resp


def em_segment(features, opts=None, init=None):
    """Two-component full-covariance Gaussian mixture fitted by EM.

    Features are PCA-reduced to at most ``opts.pca_dims`` dimensions. The
    covariance regularization is the MAP form of adding
    ``em_reg * trace / dim`` to the diagonal, which keeps every iteration
    monotone; `loglik_trace` records that regularized objective.

    `init` optionally gives initial responsibilities (n_cells, 2); the
    default splits the cells at the median of the first principal component.
    Identical feature vectors yield two identical components and a uniform
    posterior of 0.5.

    Returns the fitted model and the posterior of component 1 per cell.
    """
    opts = opts or LocalizationConfig()
    if isinstance(features, FeatureField):
        grid = features.grid
        x = features.features.reshape(-1, features.dim)
    else:
        x = np.asarray(features, dtype=np.float64)
        grid = (x.shape[0],)
    n, f = x.shape
    dims = min(f, opts.pca_dims)
    if n < 2 * dims:
        raise InputError(f"EM needs at least {2 * dims} cells for {dims} dimensions, got {n}")
    z, pca_mean, basis = _pca(x, dims)
    scale = np.trace(z.T @ z) / n / dims
    if not scale > 1e-300:
        # no spread at all: any positive load gives the symmetric solution
        scale = 1.0
    # prior strength such that the diagonal load is em_reg * trace/dim at balanced weights
    prior = opts.em_reg * scale * n / 2.0

    if init is None:
        pc1 = z[:, 0]
        upper = pc1 > np.median(pc1)
        if upper.all() or not upper.any():
            upper = np.arange(n) >= n // 2
        resp0 = np.stack([~upper, upper], axis=1).astype(np.float64)
    else:
        resp0 = np.asarray(init, dtype=np.float64)
        if resp0.shape != (n, 2) or np.any(resp0 < 0):
            raise InputError(f"initial responsibilities must be a non-negative ({n}, 2) array")
        resp0 = resp0 / resp0.sum(axis=1, keepdims=True)
    best, best_resp = _run_em(z, resp0, prior, opts.em_tol, opts.em_max_iter)

    rng = np.random.default_rng(opts.seed)
    for r in range(opts.em_restarts):
        start = rng.dirichlet([1.0, 1.0], size=n)
        try:
            model, resp = _run_em(z, start, prior, opts.em_tol, opts.em_max_iter)
        except DegenerateClusteringError:
            log.info("EM restart %d degenerate, skipped", r)
            continue
        if model.loglik_trace[-1] > best.loglik_trace[-1]:
            best, best_resp = model, resp
    best.pca_mean, best.pca_basis = pca_mean, basis
    return best, best_resp[:, 1].reshape(grid)


def posterior_to_heatmap(posteriors, window, stride, image_shape, flip=False):
    """Average the posterior of every window covering each pixel.

    Pixels no window reaches (right/bottom margins) copy the nearest covered
    pixel. With `flip`, scores are ``1 - posterior``.
    """
    post = np.asarray(posteriors, dtype=np.float64)
    if flip:
        post = 1.0 - post
    rows, cols = post.shape
    h, w = image_shape
    if window_grid((h, w), window, stride) != (rows, cols):
        raise InputError(f"posterior grid {post.shape} does not match image {h}x{w} "
                         f"with window {window}, stride {stride}")
    ch = (rows - 1) * stride + window
    cw = (cols - 1) * stride + window
    # 2-D difference arrays: +value at window start, -value past its end
    acc = np.zeros((ch + 1, cw + 1))
    cnt = np.zeros((ch + 1, cw + 1))
    y0 = np.repeat(np.arange(rows) * stride, cols)
    x0 = np.tile(np.arange(cols) * stride, rows)
    v = post.reshape(-1)
    for dy, dx, sgn in ((0, 0, 1), (window, 0, -1), (0, window, -1), (window, window, 1)):
        np.add.at(acc, (y0 + dy, x0 + dx), sgn * v)
        np.add.at(cnt, (y0 + dy, x0 + dx), sgn)
    acc = acc.cumsum(0).cumsum(1)[:ch, :cw]
    cnt = cnt.cumsum(0).cumsum(1)[:ch, :cw]
    covered = acc / np.rint(cnt)
    return np.pad(covered, ((0, h - ch), (0, w - cw)), mode="edge")


def highpass_residual_provider(img):
    """Third-order horizontal derivative residual, zero where undefined."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 4:
        raise InputError(f"high-pass residual needs an image of at least 4x4, got {img.shape}")
    r = np.zeros_like(img)
    r[:, 2:-1] = img[:, 3:] - 3 * img[:, 2:-1] + 3 * img[:, 1:-2] - img[:, :-3]
    return r


@dataclass
class Heatmap:
    scores: np.ndarray
    provenance: list
    em: EmModel = None
    posteriors: np.ndarray = None
    flipped: bool = False


def _stage(name, fn, *args, **kwargs):
    """Run one pipeline stage, naming the stage in any error it raises."""
    try:
        return fn(*args, **kwargs)
    except ComprintError as exc:
        exc.args = (f"[{name}] {exc.args[0] if exc.args else exc}",) + exc.args[1:]
        raise
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise DegenerateClusteringError(f"[{name}] {exc}") from exc


def localize(img, providers, opts=None):
    """Fingerprints -> normalized -> co-occurrence features -> stacked -> EM -> heatmap.

    `providers` is a list of ``(name, callable)`` pairs; each callable maps
    the grayscale image to a fingerprint of the same size. One provider
    gives a single-method heatmap, several give the feature-stacking fusion.
    """
    opts = opts or LocalizationConfig()
    if not providers:
        raise InputError("localize needs at least one fingerprint provider")
    img = np.asarray(img, dtype=np.float64)
    fields = []
    for name, provider in providers:
        fp = _stage(f"fingerprint:{name}", provider, img)
        if fp.shape != img.shape:
            raise InputError(f"[fingerprint:{name}] provider returned {fp.shape}, "
                             f"image is {img.shape}")
        fpn = _stage(f"normalize:{name}", normalize_fingerprint, fp)
        fields.append(_stage(f"features:{name}", cooccurrence_features, fpn, opts.window,
                             opts.stride, opts.quant_step, opts.truncation, name))
    stacked = _stage("stack", stack_features, fields)
    em, post = _stage("em", em_segment, stacked, opts)
    # minority component -> high scores
    flip = bool(em.weights[1] > em.weights[0])
    scores = _stage("heatmap", posterior_to_heatmap, post, opts.window, opts.stride,
                    img.shape, flip)
    return Heatmap(scores, stacked.provenance, em, post, flip)


PROVIDER_NAMES = ("comprint", "highpass")


def make_providers(names, model_paths=()):
    """Build ``(name, callable)`` providers from names and model files.

    Each ``comprint`` entry consumes the next model path in order; a single
    model path is reused when several comprint providers are requested.
    """
    from .fingerprint import FingerprintModel, extract

    model_paths = list(model_paths)
    providers = []
    used = 0
    for name in names:
        if name == "highpass":
            providers.append(("highpass", highpass_residual_provider))
        elif name == "comprint":
            if not model_paths:
                raise InputError("the comprint provider needs a model file")
            path = model_paths[min(used, len(model_paths) - 1)]
            used += 1
            model = FingerprintModel.load(path)
            label = "comprint" if used == 1 else f"comprint{used}"
            providers.append((label, lambda img, m=model: extract(m, img)))
        else:
            raise InputError(f"unknown provider {name!r}; choose from {', '.join(PROVIDER_NAMES)}")
    return providers
