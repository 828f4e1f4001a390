"""JPEG compression simulation and quantization-table utilities.

Compression is simulated as level shift, 8x8 DCT, quantize/dequantize and
inverse DCT. Entropy coding is lossless and therefore skipped. Everything
is single-channel luminance.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import _islow
from .errors import InputError, MalformedStreamError, NotAJpegError

# ITU-T T.81 Annex K, table K.1
STD_LUMINANCE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)

ORIGINS = ("standard-qf", "photoshop", "parsed", "user")

DEFAULT_QFS = (20, 25, 30, 35, 40, 50, 60, 70, 80, 90)
PHOTOSHOP_QUALITIES = tuple(range(4, 13))


def _zigzag_order():
    order = []
    for s in range(15):
        rows = range(max(0, s - 7), min(s, 7) + 1)
        if s % 2 == 0:
            rows = reversed(rows)
        order.extend(r * 8 + (s - r) for r in rows)
    return np.array(order, dtype=np.int64)


# ZIGZAG[k] is the natural (row-major) index of the k-th zigzag coefficient.
ZIGZAG = _zigzag_order()


def _dct_matrix(n=8):
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    m = np.sqrt(2.0 / n) * np.cos((2 * x + 1) * k * np.pi / (2 * n))
    m[0] /= np.sqrt(2.0)
    return m


DCT8 = _dct_matrix()


@dataclass(frozen=True, eq=False)
class QuantTable:
    """An 8x8 quantization matrix with the compression class it defines."""

    values: np.ndarray
    label: str
    origin: str = "user"

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != (8, 8):
            raise InputError(f"quantization table must be 8x8, got {v.shape}")
        if not np.all(np.equal(np.mod(v, 1), 0)):
            raise InputError("quantization table entries must be integers")
        v = v.astype(np.int64)
        if v.min() < 1:
            raise InputError(f"table {self.label!r} has zero or negative entries")
        # 16-bit precision tables in real files may exceed 255
        upper = 65535 if self.origin == "parsed" else 255
        if v.max() > upper:
            raise InputError(f"table {self.label!r} has entries above {upper}")
        if self.origin not in ORIGINS:
            raise InputError(f"unknown table origin {self.origin!r}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __eq__(self, other):
        if not isinstance(other, QuantTable):
            return NotImplemented
        return (self.label == other.label and self.origin == other.origin
                and np.array_equal(self.values, other.values))

    def __hash__(self):
        return hash((self.label, self.origin, self.values.tobytes()))

    def __repr__(self):
        return f"QuantTable({self.label!r}, origin={self.origin!r})"


@dataclass(frozen=True)
class CompressionClassRegistry:
    """Immutable ordered list of compression classes used for training."""

    tables: tuple = field(default_factory=tuple)

    def __post_init__(self):
        tables = tuple(self.tables)
        labels = [t.label for t in tables]
        dupes = sorted({l for l in labels if labels.count(l) > 1})
        if dupes:
            raise InputError(f"duplicate registry labels: {dupes}")
        object.__setattr__(self, "tables", tables)

    def __len__(self):
        return len(self.tables)

    def __iter__(self):
        return iter(self.tables)

    def __getitem__(self, i):
        return self.tables[i]

    @property
    def labels(self):
        return [t.label for t in self.tables]

    def by_label(self, label):
        for t in self.tables:
            if t.label == label:
                return t
        raise KeyError(label)

    @classmethod
    def from_labels(cls, labels, ps_tables=None):
        """Build a registry from labels such as ``["QF30", "PS7"]``."""
        ps = None
        out = []
        for lab in labels:
            lab = lab.strip()
            if lab.upper().startswith("QF"):
                out.append(qf_to_table(int(lab[2:])))
            elif lab.upper().startswith("PS"):
                if ps is None:
                    ps = {t.label: t for t in load_photoshop_tables(ps_tables)}
                if lab.upper() not in ps:
                    raise InputError(f"no Photoshop table {lab!r} in table file")
                out.append(ps[lab.upper()])
            else:
                raise InputError(f"cannot interpret compression class {lab!r}")
        return cls(tuple(out))


def qf_to_table(qf):
    """Luminance table for quality factor `qf` using the IJG scaling law."""
    if isinstance(qf, bool) or int(qf) != qf or not 1 <= qf <= 100:
        raise InputError(f"quality factor must be an integer in [1, 100], got {qf!r}")
    qf = int(qf)
    # integer division as in libjpeg's jpeg_quality_scaling
    scale = 5000 // qf if qf < 50 else 200 - 2 * qf
    values = np.clip((STD_LUMINANCE * scale + 50) // 100, 1, 255)
    return QuantTable(values, f"QF{qf}", "standard-qf")


def parse_table_file(text, origin="photoshop"):
    """Parse the plain-text table format: a label followed by 64 integers."""
    tables = []
    label, nums = None, []

    def flush():
        if label is None:
            return
        if len(nums) != 64:
            raise InputError(f"table {label!r} has {len(nums)} values, expected 64")
        tables.append(QuantTable(np.array(nums).reshape(8, 8), label, origin))

    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if not tokens[0].lstrip("-").isdigit():
            flush()
            label, nums = tokens[0], []
            tokens = tokens[1:]
        if label is None:
            raise InputError("table values found before any label")
        nums.extend(int(t) for t in tokens)
    flush()
    return tables


def load_photoshop_tables(path=None):
    if path is None:
        text = resources.files("comprint.data").joinpath("photoshop_tables.txt").read_text()
    else:
        text = Path(path).read_text()
    return parse_table_file(text, origin="photoshop")


def default_registry(ps_tables=None):
    """The 19-class registry: 10 standard quality factors and Photoshop 4..12."""
    tables = [qf_to_table(q) for q in DEFAULT_QFS]
    tables.extend(load_photoshop_tables(ps_tables))
    return CompressionClassRegistry(tuple(tables))


def _round_half_away(x):
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def _check_image(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise InputError(f"expected a 2-D grayscale image, got shape {img.shape}")
    h, w = img.shape
    if h < 8 or w < 8 or h % 8 or w % 8:
        raise InputError(f"image dimensions must be multiples of 8, got {h}x{w}")
    if not np.all(np.isfinite(img)):
        raise InputError("image contains non-finite samples")
    return img


def block_dct(img):
    """Orthonormal 2-D DCT-II of every 8x8 block; returns (H/8, W/8, 8, 8)."""
    h, w = img.shape
    blocks = img.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)
    return DCT8 @ blocks @ DCT8.T


def block_idct(coeffs):
    hb, wb = coeffs.shape[:2]
    blocks = DCT8.T @ coeffs @ DCT8
    return blocks.transpose(0, 2, 1, 3).reshape(hb * 8, wb * 8)


def _compress_float(img, q, integer_output):
    coeffs = block_dct(img - 128.0)
    coeffs = _round_half_away(coeffs / q) * q
    out = block_idct(coeffs) + 128.0
    if integer_output:
        out = _round_half_away(out)
    return np.clip(out, 0.0, 255.0)


def _compress_islow(img, q):
    h, w = img.shape
    samples = np.clip(_round_half_away(img), 0, 255).astype(np.int64) - 128
    blocks = samples.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)
    coeffs = _islow.fdct_islow(blocks)
    # the forward transform leaves coefficients scaled by 8
    div = q * 8
    quant = np.sign(coeffs) * ((np.abs(coeffs) + div // 2) // div)
    out = _islow.idct_islow(quant * q) + 128
    out = out.transpose(0, 2, 1, 3).reshape(h, w)
    return np.clip(out, 0, 255).astype(np.float64)


def compress(img, table, dct="islow", integer_output=True):
    """Simulate one baseline JPEG compression of `img` with `table`.

    ``dct="islow"`` (default) reproduces the fixed-point arithmetic of the
    IJG codec, so the result equals an actual encode/decode round trip with
    libjpeg; input samples are rounded to 8 bits first, as an encoder would.
    ``dct="float"`` runs the same pipeline with an exact float64 DCT; with
    `integer_output` the decoded samples are rounded like an 8-bit decoder.
    """
    img = _check_image(img)
    if dct == "islow":
        return _compress_islow(img, table.values)
    if dct == "float":
        return _compress_float(img, table.values.astype(np.float64), integer_output)
    raise InputError(f"unknown DCT method {dct!r}")


def compression_noise(img, table, dct="islow", integer_output=True):
    """Residual added by compression: ``compress(img, table) - img``."""
    img = _check_image(img)
    return compress(img, table, dct, integer_output) - img


def center_crop8(img):
    """Center-crop so both dimensions are multiples of 8."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    h8, w8 = h - h % 8, w - w % 8
    if h8 < 8 or w8 < 8:
        raise InputError(f"image {h}x{w} is smaller than one 8x8 block")
    top, left = (h - h8) // 2, (w - w8) // 2
    return img[top:top + h8, left:left + w8]


def compress_any(img, table, dct="islow"):
    """`compress` for arbitrary dimensions: center-crop to the 8x8 grid first."""
    return compress(center_crop8(img), table, dct)


_STANDALONE = {0x01, 0xD8} | set(range(0xD0, 0xD8))


def parse_dqt(data):
    """Return every quantization table in the DQT segments of a JPEG stream."""
    data = bytes(data)
    if len(data) < 2 or data[0] != 0xFF or data[1] != 0xD8:
        raise NotAJpegError("input does not start with the JPEG SOI marker 0xFFD8")
    tables = []
    pos = 2
    n = len(data)
    while pos < n:
        if data[pos] != 0xFF:
            raise MalformedStreamError("expected a marker", pos)
        while pos < n and data[pos] == 0xFF:
            pos += 1
        if pos >= n:
            raise MalformedStreamError("stream ends inside a marker", pos)
        marker = data[pos]
        marker_pos = pos - 1
        pos += 1
        if marker == 0xD9:
            break
        if marker in _STANDALONE:
            continue
        if pos + 2 > n:
            raise MalformedStreamError(f"truncated length of marker 0xFF{marker:02X}", pos)
        (length,) = struct.unpack(">H", data[pos:pos + 2])
        if length < 2 or pos + length > n:
            raise MalformedStreamError(
                f"segment 0xFF{marker:02X} declares {length} bytes, stream too short", marker_pos)
        payload = data[pos + 2:pos + length]
        if marker == 0xDB:
            tables.extend(_parse_dqt_payload(payload, pos + 2, len(tables)))
        pos += length
        if marker == 0xDA:
            pos = _skip_entropy_data(data, pos)
    return tables


def _parse_dqt_payload(payload, offset, count):
    out = []
    i = 0
    while i < len(payload):
        pq, tq = payload[i] >> 4, payload[i] & 0x0F
        if pq not in (0, 1):
            raise MalformedStreamError(f"invalid DQT precision {pq}", offset + i)
        size = 64 * (pq + 1)
        if i + 1 + size > len(payload):
            raise MalformedStreamError("truncated DQT table", offset + i)
        raw = payload[i + 1:i + 1 + size]
        zz = np.frombuffer(raw, dtype=">u2" if pq else "u1").astype(np.int64)
        if zz.min() == 0:
            raise MalformedStreamError("DQT table contains a zero divisor", offset + i)
        natural = np.empty(64, dtype=np.int64)
        natural[ZIGZAG] = zz
        label = f"T{tq}" if count + len(out) == 0 else f"T{tq}#{count + len(out)}"
        out.append(QuantTable(natural.reshape(8, 8), label, "parsed"))
        i += 1 + size
    return out


def _skip_entropy_data(data, pos):
    n = len(data)
    while pos < n - 1:
        if data[pos] == 0xFF and data[pos + 1] != 0x00 and not 0xD0 <= data[pos + 1] <= 0xD7:
            return pos
        pos += 1
    return n


def dqt_segment(tables, ids=None):
    """Serialize tables into a single DQT segment (marker included)."""
    body = bytearray()
    for k, t in enumerate(tables):
        tq = k if ids is None else ids[k]
        zz = t.values.reshape(-1)[ZIGZAG]
        if zz.max() > 255:
            body.append(0x10 | tq)
            body += zz.astype(">u2").tobytes()
        else:
            body.append(tq)
            body += zz.astype(np.uint8).tobytes()
    return b"\xff\xdb" + struct.pack(">H", len(body) + 2) + bytes(body)


def nearest_standard_qf(table):
    """Most similar standard quality factor by L1 distance (ties -> larger QF)."""
    best_qf, best_d = None, None
    for qf in range(100, 0, -1):
        d = float(np.abs(table.values - qf_to_table(qf).values).sum())
        if best_d is None or d < best_d:
            best_qf, best_d = qf, d
    return best_qf, best_d
