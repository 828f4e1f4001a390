"""Compression-fingerprint network: definition, training and extraction.

The extractor is a DnCNN-style stack of `depth` layer groups: conv+ReLU,
then ``depth - 2`` groups of conv+BN+ReLU, then a single-channel conv.
Training has two stages: regression of the JPEG compression residual,
then Siamese training on patch pairs where the pair distances of a batch
go through one softmax and a cross-entropy against the same-history pairs.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import mannwhitneyu

from . import nn_core
from .errors import (DegenerateBatchError, InputError, StateError,
                     TrainingDivergenceError)
from .jpeg_sim import CompressionClassRegistry, compress
from .nn_core import AdamState, BatchNorm2D, Conv2D, Network, ReLU

log = logging.getLogger(__name__)

STAGES = ("initialized", "denoiser-pretrained", "siamese-trained")
SAME, DIFFERENT = -1, +1
# network inputs are pixel values scaled to [0, 1]
INPUT_SCALE = 1.0 / 255.0
MIN_EXTRACT_SIZE = 48
# the output conv starts near zero so the untrained network predicts a
# residual of about the right size (JPEG residuals are ~1e-2 in input units)
OUTPUT_INIT_SCALE = 0.01


@dataclass(frozen=True)
class ModelSpec:
    depth: int = 20
    channels: int = 64
    kernel_size: int = 3
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9

    def __post_init__(self):
        if self.depth < 2:
            raise InputError("depth must be at least 2 (first and last group)")
        if self.kernel_size % 2 != 1:
            raise InputError("kernel size must be odd")


@dataclass
class TrainingConfig:
    epochs: int = 50
    batches_per_epoch: int = 4000
    pairs_per_batch: int = 200
    crop: int = 48
    p_same: float = 0.5
    registry: list = field(default_factory=lambda: ["QF20", "QF25", "QF30", "QF35", "QF40",
                                                    "QF50", "QF60", "QF70", "QF80", "QF90",
                                                    "PS4", "PS5", "PS6", "PS7", "PS8",
                                                    "PS9", "PS10", "PS11", "PS12"])
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    val_pairs_per_image: int = 4

    def validate(self):
        for name in ("epochs", "batches_per_epoch"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be non-negative")
        if self.pairs_per_batch < 1:
            raise InputError("pairs_per_batch must be positive")
        if self.crop < 8 or self.crop % 8:
            raise InputError("crop must be a positive multiple of 8")
        if not 0.0 <= self.p_same <= 1.0:
            raise InputError("p_same must lie in [0, 1]")
        return self

    def to_dict(self):
        return asdict(self)


PRESETS = {
    "full": (ModelSpec(depth=20, channels=64), TrainingConfig()),
    "desk": (ModelSpec(depth=5, channels=8),
             TrainingConfig(epochs=10, batches_per_epoch=200, pairs_per_batch=32,
                            registry=["QF30", "QF90"])),
}
# residual pretraining schedule used with the desk preset
DESK_PRETRAIN = TrainingConfig(epochs=1, batches_per_epoch=500, pairs_per_batch=16,
                               registry=["QF30", "QF90"])


class FingerprintModel:
    """Extraction network plus the metadata stored alongside it."""

    def __init__(self, spec=ModelSpec(), stage="initialized", registry=(),
                 param_dtype=np.float32):
        if stage not in STAGES:
            raise InputError(f"unknown training stage {stage!r}")
        self.spec = spec
        self.stage = stage
        self.registry = list(registry)
        self.network = _build_network(spec, param_dtype)

    @property
    def depth(self):
        return self.spec.depth

    def init(self, rng):
        self.network.init(rng)
        return self

    def forward(self, pixels, train=False):
        """Fingerprints of an (N, H, W) stack of pixel arrays -> (N, H, W)."""
        x = np.asarray(pixels, dtype=np.float64)[None] * INPUT_SCALE
        out = self.network.forward_cm(x, train)
        if not np.all(np.isfinite(out)):
            raise TrainingDivergenceError(self.network.meta.get("step", -1),
                                          "non-finite network output")
        return out[0]

    def backward(self, grad_out):
        self.network.backward_cm(np.asarray(grad_out, dtype=np.float64)[None],
                                 need_input_grad=False)
        return self.network.grads()

    def copy(self):
        clone = FingerprintModel.__new__(FingerprintModel)
        clone.spec, clone.stage, clone.registry = self.spec, self.stage, list(self.registry)
        clone.network = self.network.copy()
        return clone

    def header(self):
        return {
            "kind": "comprint-fingerprint",
            "depth": self.spec.depth,
            "channels": self.spec.channels,
            "kernel_size": self.spec.kernel_size,
            "bn_eps": self.spec.bn_eps,
            "bn_momentum": self.spec.bn_momentum,
            "stage": self.stage,
            "registry": self.registry,
        }

    def save(self, path):
        nn_core.save_network(self.network, path, self.header())

    @classmethod
    def load(cls, path):
        header, arrays = nn_core.read_model_file(path)
        if header.get("kind") != "comprint-fingerprint":
            raise InputError(f"{path}: not a fingerprint model")
        spec = ModelSpec(header["depth"], header["channels"], header["kernel_size"],
                         header["bn_eps"], header["bn_momentum"])
        dtype = np.dtype(header["blocks"][0]["dtype"]).newbyteorder("=")
        model = cls(spec, header["stage"], header.get("registry", ()), param_dtype=dtype)
        nn_core.load_into(model.network, arrays)
        return model


def _build_network(spec, param_dtype):
    ch, k = spec.channels, spec.kernel_size
    layers = [("g0.conv", Conv2D(1, ch, k, bias=True, param_dtype=param_dtype)),
              ("g0.relu", ReLU())]
    for g in range(1, spec.depth - 1):
        layers += [
            (f"g{g}.conv", Conv2D(ch, ch, k, bias=False, param_dtype=param_dtype)),
            (f"g{g}.bn", BatchNorm2D(ch, spec.bn_eps, spec.bn_momentum, param_dtype)),
            (f"g{g}.relu", ReLU()),
        ]
    last = spec.depth - 1
    layers.append((f"g{last}.conv", Conv2D(ch, 1, k, bias=True, param_dtype=param_dtype,
                                                        init_scale=OUTPUT_INIT_SCALE)))
    return Network(layers)


def new_model(spec, registry_labels=(), seed=0, param_dtype=np.float32):
    model = FingerprintModel(spec, "initialized", registry_labels, param_dtype)
    return model.init(np.random.default_rng(seed))


@dataclass
class PatchPair:
    k1: np.ndarray
    k2: np.ndarray
    label: int
    classes: tuple


def _random_crop(img, size, rng):
    h, w = img.shape
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return img[y:y + size, x:x + size]


def make_pair(source, registry, rng, p_same=0.5, crop=48, same=None):
    """Two crops of `source`, compressed with the same or different classes.

    `same` forces the branch; by default it is drawn with probability
    `p_same`.
    """
    source = np.asarray(source, dtype=np.float64)
    if source.ndim != 2 or min(source.shape) < crop:
        raise InputError(f"source image {source.shape} is smaller than the {crop}x{crop} crop")
    if len(registry) < 2:
        raise InputError("the compression-class registry needs at least two classes")
    a = _random_crop(source, crop, rng)
    b = _random_crop(source, crop, rng)
    n = len(registry)
    c1 = int(rng.integers(n))
    if same is None:
        same = bool(rng.random() < p_same)
    if same:
        c2 = c1
    else:
        c2 = int(rng.integers(n - 1))
        if c2 >= c1:
            c2 += 1
    t1, t2 = registry[c1], registry[c2]
    return PatchPair(compress(a, t1), compress(b, t2), SAME if same else DIFFERENT,
                     (t1.label, t2.label))


def pair_distance(model, pair):
    """Sum of squared differences between the two patch fingerprints."""
    f = model.forward(np.stack([pair.k1, pair.k2]))
    return float(np.sum((f[0] - f[1]) ** 2))


def batch_softmax(distances):
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0 or not np.all(np.isfinite(d)):
        raise InputError("softmax needs at least one finite distance")
    z = -d - np.max(-d)
    e = np.exp(z)
    return e / e.sum()


def siamese_loss(probabilities, labels):
    """Cross-entropy against a target uniform over the same-history pairs."""
    p = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    if p.shape != labels.shape:
        raise InputError("probabilities and labels differ in length")
    same = labels == SAME
    s = int(same.sum())
    if s == 0:
        raise DegenerateBatchError("batch contains no same-history pair")
    with np.errstate(divide="ignore"):
        return float(-np.sum(np.log(p[same])) / s)


def _siamese_loss_from_distances(d, labels):
    """Loss and dLoss/dd computed in log space (robust for large distances)."""
    same = labels == SAME
    s = int(same.sum())
    if s == 0:
        raise DegenerateBatchError("batch contains no same-history pair")
    z = -d
    zmax = z.max()
    lse = zmax + np.log(np.sum(np.exp(z - zmax)))
    loss = float(np.sum(d[same] + lse) / s)
    p = np.exp(z - lse)
    grad = same / s - p
    return loss, grad


@dataclass
class TrainingResult:
    model: FingerprintModel
    step_losses: list
    epoch_losses: list
    validation: list = field(default_factory=list)

    @property
    def final_validation(self):
        return self.validation[-1] if self.validation else None


def _check_images(images, crop):
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise InputError("training needs at least one image")
    for i, im in enumerate(images):
        if im.ndim != 2 or min(im.shape) < crop:
            raise InputError(f"training image {i} has shape {im.shape}, smaller than the crop")
    return images


def _registry(config, ps_tables=None):
    reg = CompressionClassRegistry.from_labels(config.registry, ps_tables)
    if len(reg) < 2:
        raise InputError("the compression-class registry needs at least two classes")
    return reg


def pretrain_denoiser(images, config, spec=ModelSpec(), ps_tables=None, model=None):
    """Train the network to predict ``compress(x) - x`` from ``compress(x)``.

    Each batch holds ``2 * pairs_per_batch`` crops, each compressed with a
    class drawn uniformly from the registry. Loss is the mean squared error.
    """
    config.validate()
    images = _check_images(images, config.crop)
    registry = _registry(config, ps_tables)
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = new_model(spec, registry.labels, seed=config.seed)
    else:
        model = model.copy()
    adam = AdamState(config.lr, config.beta1, config.beta2, config.adam_eps)
    params = model.network.params()
    n_patches = 2 * config.pairs_per_batch
    step_losses, epoch_losses = [], []
    step = 0
    for epoch in range(config.epochs):
        losses = []
        for _ in range(config.batches_per_epoch):
            x = np.empty((n_patches, config.crop, config.crop))
            clean = np.empty_like(x)
            for i in range(n_patches):
                src = images[int(rng.integers(len(images)))]
                clean[i] = _random_crop(src, config.crop, rng)
                x[i] = compress(clean[i], registry[int(rng.integers(len(registry)))])
            target = (x - clean) * INPUT_SCALE
            model.network.meta["step"] = step
            out = model.forward(x, train=True)
            err = out - target
            loss = float(np.mean(err * err))
            if not np.isfinite(loss):
                raise TrainingDivergenceError(step, "loss is not finite")
            grads = model.backward(2.0 * err / err.size)
            nn_core.adam_step(adam, params, grads)
            losses.append(loss)
            step += 1
        step_losses.extend(losses)
        epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
        log.info("pretrain epoch %d/%d  mse %.6g", epoch + 1, config.epochs, epoch_losses[-1])
    model.stage = "denoiser-pretrained"
    model.registry = registry.labels
    return TrainingResult(model, step_losses, epoch_losses)


def make_validation_pairs(images, registry, config, seed):
    """Fixed held-out pairs, alternating same / different history."""
    rng = np.random.default_rng(seed)
    pairs = []
    for im in images:
        for j in range(config.val_pairs_per_image):
            pairs.append(make_pair(im, registry, rng, config.p_same, config.crop,
                                   same=(j % 2 == 0)))
    return pairs


def validation_statistics(model, pairs, chunk=64):
    """Separation (mean different - mean same distance) and a one-sided U test."""
    d = []
    for s in range(0, len(pairs), chunk):
        block = pairs[s:s + chunk]
        f = model.forward(np.stack([p.k1 for p in block] + [p.k2 for p in block]))
        n = len(block)
        d.extend(np.sum((f[:n] - f[n:]) ** 2, axis=(1, 2)).tolist())
    d = np.asarray(d)
    labels = np.array([p.label for p in pairs])
    same, diff = d[labels == SAME], d[labels == DIFFERENT]
    out = {"separation": float(diff.mean() - same.mean()),
           "mean_same": float(same.mean()), "mean_different": float(diff.mean())}
    out["mannwhitney_p"] = float(mannwhitneyu(same, diff, alternative="less").pvalue)
    return out


def train_siamese(pretrained, images, config, val_images=None, ps_tables=None):
    """Siamese training started from a residual-pretrained model.

    Every step draws `pairs_per_batch` same-source pairs, runs all 2B
    patches through the one network, turns pair distances into a batch
    softmax and takes the cross-entropy against a target that is uniform
    over the same-history pairs.
    """
    config.validate()
    if pretrained.stage != "denoiser-pretrained":
        raise StateError(f"Siamese training starts from a denoiser-pretrained model, "
                         f"got stage {pretrained.stage!r}")
    images = _check_images(images, config.crop)
    registry = _registry(config, ps_tables)
    model = pretrained.copy()
    rng = np.random.default_rng(config.seed)
    adam = AdamState(config.lr, config.beta1, config.beta2, config.adam_eps)
    params = model.network.params()
    val_pairs = None
    if val_images:
        val_pairs = make_validation_pairs(_check_images(val_images, config.crop), registry,
                                          config, seed=config.seed + 1)
    b = config.pairs_per_batch
    step_losses, epoch_losses, validation = [], [], []
    step = 0
    for epoch in range(config.epochs):
        losses = []
        for _ in range(config.batches_per_epoch):
            while True:
                pairs = [make_pair(images[int(rng.integers(len(images)))], registry, rng,
                                   config.p_same, config.crop) for _ in range(b)]
                labels = np.array([p.label for p in pairs])
                if np.any(labels == SAME):
                    break
                log.info("step %d: batch without same-history pairs, resampling", step)
            x = np.stack([p.k1 for p in pairs] + [p.k2 for p in pairs])
            model.network.meta["step"] = step
            f = model.forward(x, train=True)
            diff = f[:b] - f[b:]
            d = np.sum(diff * diff, axis=(1, 2))
            loss, gd = _siamese_loss_from_distances(d, labels)
            if not np.isfinite(loss):
                raise TrainingDivergenceError(step, "loss is not finite")
            g1 = 2.0 * diff * gd[:, None, None]
            grads = model.backward(np.concatenate([g1, -g1]))
            nn_core.adam_step(adam, params, grads)
            losses.append(loss)
            step += 1
        step_losses.extend(losses)
        epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
        if val_pairs:
            validation.append(validation_statistics(model, val_pairs))
            log.info("siamese epoch %d/%d  loss %.5g  separation %.5g", epoch + 1,
                     config.epochs, epoch_losses[-1], validation[-1]["separation"])
        else:
            log.info("siamese epoch %d/%d  loss %.5g", epoch + 1, config.epochs, epoch_losses[-1])
    model.stage = "siamese-trained"
    model.registry = registry.labels
    return TrainingResult(model, step_losses, epoch_losses, validation)


def extract(model, img, tile_rows=None, require_trained=True):
    """Comprint of a grayscale image (same size as the input).

    Large images are processed in horizontal strips with a halo of `depth`
    rows, which gives results identical to a single pass.
    """
    if require_trained and model.stage != "siamese-trained":
        raise StateError(f"extraction needs a Siamese-trained model, got stage {model.stage!r}")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise InputError(f"expected a 2-D grayscale image, got shape {img.shape}")
    h, w = img.shape
    if h < MIN_EXTRACT_SIZE or w < MIN_EXTRACT_SIZE:
        raise InputError(f"image {h}x{w} is smaller than {MIN_EXTRACT_SIZE}x{MIN_EXTRACT_SIZE}")
    if tile_rows is None:
        # keep one im2col buffer around 64 MB
        per_row = w * model.spec.channels * model.spec.kernel_size ** 2 * 8
        tile_rows = max(64, (64 << 20) // per_row)
    if tile_rows >= h:
        return model.forward(img[None])[0]
    halo = model.depth * (model.spec.kernel_size // 2)
    out = np.empty((h, w))
    for top in range(0, h, tile_rows):
        bottom = min(h, top + tile_rows)
        lo, hi = max(0, top - halo), min(h, bottom + halo)
        f = model.forward(img[None, lo:hi])[0]
        out[top:bottom] = f[top - lo:top - lo + bottom - top]
    return out
