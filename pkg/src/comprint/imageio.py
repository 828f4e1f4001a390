"""Image, mask and float-map file I/O."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import InputError

CORPUS_EXTENSIONS = (".png", ".bmp", ".tif", ".tiff", ".ppm", ".pgm")
IMAGE_EXTENSIONS = CORPUS_EXTENSIONS + (".jpg", ".jpeg")


def _open(path):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such image file: {path}")
    try:
        im = Image.open(path)
        im.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc
    return im


def load_gray(path, size=None):
    """Load an image as float64 luminance in [0, 255].

    Color images go through the BT.601 luma transform (Pillow's "L" mode).
    With `size` the image is resized to (size, size) bilinearly.
    """
    im = _open(path)
    if im.mode in ("I;16", "I;16B", "I"):
        arr = np.asarray(im, dtype=np.float64)
        im = Image.fromarray(np.clip(arr / 257.0, 0, 255).astype(np.uint8))
    if im.mode != "L":
        im = im.convert("RGB").convert("L")
    if size is not None:
        im = im.resize((size, size), Image.BILINEAR)
    return np.asarray(im, dtype=np.float64)


def load_mask(path):
    """Binary mask (1 = forged); any nonzero sample counts as forged."""
    im = _open(path)
    arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., :3].max(axis=-1) if arr.shape[-1] >= 3 else arr[..., 0]
    return (arr != 0).astype(np.uint8)


def save_gray_png(path, img):
    arr = np.clip(np.round(np.asarray(img, dtype=np.float64)), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "L").save(path, format="PNG")


def save_mask_png(path, mask):
    Image.fromarray((np.asarray(mask) != 0).astype(np.uint8) * 255, "L").save(path, format="PNG")


def write_pfm(path, field):
    """Write a single-channel little-endian PFM (rows stored bottom-to-top)."""
    arr = np.asarray(field, dtype="<f4")
    if arr.ndim != 2:
        raise InputError("PFM writer expects a 2-D field")
    h, w = arr.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path):
    data = Path(path).read_bytes()
    parts = []
    pos = 0
    while len(parts) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        parts.append(data[pos:end].decode("ascii"))
        pos = end
    pos += 1
    kind, w, h, scale = parts[0], int(parts[1]), int(parts[2]), float(parts[3])
    if kind != "Pf":
        raise InputError(f"{path}: only single-channel PFM ('Pf') is supported")
    dt = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(data, dtype=dt, count=w * h, offset=pos).reshape(h, w)
    return arr[::-1].astype(np.float32)


def _viridis_table():
    from matplotlib import colormaps

    rgb = colormaps["viridis"](np.linspace(0.0, 1.0, 256))[:, :3]
    return np.round(rgb * 255).astype(np.uint8)


VIRIDIS = _viridis_table()


def render_heatmap(heatmap, vmin=0.0, vmax=1.0):
    """Map a heatmap to an RGB uint8 array with the 256-entry viridis table."""
    h = np.asarray(heatmap, dtype=np.float64)
    idx = np.clip(np.round((h - vmin) / (vmax - vmin) * 255), 0, 255).astype(np.int64)
    return VIRIDIS[idx]


def save_heatmap_png(path, heatmap, vmin=0.0, vmax=1.0):
    Image.fromarray(render_heatmap(heatmap, vmin, vmax), "RGB").save(path, format="PNG")


def list_images(directory, extensions=IMAGE_EXTENSIONS):
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"no such directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in extensions)
