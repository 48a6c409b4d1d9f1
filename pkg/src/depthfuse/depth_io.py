"""Depth maps, the 3-channel log-normalized depth encoding, and image/depth file I/O.

File formats: binary PPM (P6, 8-bit) for RGB, binary PGM (P5) for depth
(16-bit big-endian, millimeters; 0 marks invalid pixels) and for label maps
(8-bit). A `r,c,value` CSV fallback carries float depths for tests.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParseError, ShapeError


@dataclass
class DepthMap:
    """Dense per-pixel metric depth with a validity mask."""

    values: np.ndarray
    valid_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise ShapeError(f"depth map must be (h, w) with h,w >= 1, got {self.values.shape}")
        if self.valid_mask is None:
            self.valid_mask = np.ones(self.values.shape, dtype=bool)
        else:
            self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
            if self.valid_mask.shape != self.values.shape:
                raise ShapeError("valid_mask shape must match values")
        if np.any(self.values[self.valid_mask] <= 0):
            raise DataError("depth must be strictly positive where valid")

    @property
    def shape(self):
        return self.values.shape


class EncodedDepthImage:
    """Three identical uint8-range channels holding log-normalized depth codes."""

    def __init__(self, channels, d_min, d_max):
        channels = np.asarray(channels)
        if channels.shape[0] != 3:
            raise ShapeError("encoded depth image needs 3 channels")
        self.channels = channels.astype(np.int64)
        self.d_min = float(d_min)
        self.d_max = float(d_max)

    @property
    def shape(self):
        return self.channels.shape


def encode_depth(depth: DepthMap) -> EncodedDepthImage:
    """Log-normalize valid depths to integer codes in [0, 255], duplicated into
    three channels. Invalid pixels encode to 0; a constant map encodes to 128."""
    if not depth.valid_mask.any():
        raise DataError("cannot encode an all-invalid depth map")
    valid = depth.valid_mask
    logd = np.zeros(depth.shape)
    logd[valid] = np.log(depth.values[valid])
    lo, hi = logd[valid].min(), logd[valid].max()
    codes = np.zeros(depth.shape)
    if hi - lo <= 0:
        codes[valid] = 128.0
    else:
        codes[valid] = np.rint(255.0 * (logd[valid] - lo) / (hi - lo))
    one = codes.astype(np.int64)
    return EncodedDepthImage(np.stack([one, one, one]), np.exp(lo), np.exp(hi))


def decode_depth(codes, d_min, d_max):
    """Invert encode_depth up to quantization (codes -> meters)."""
    codes = np.asarray(codes, dtype=np.float64)
    lo, hi = np.log(d_min), np.log(d_max)
    if hi - lo <= 0:
        return np.full(codes.shape, d_min)
    return np.exp(lo + codes / 255.0 * (hi - lo))


# ---------------------------------------------------------------------------
# Netpbm parsing. A tiny tokenizer keeps track of byte offsets so malformed
# files report where they broke.
# ---------------------------------------------------------------------------


class _Tokens:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def _skip_space(self):
        while self.pos < len(self.blob):
            ch = self.blob[self.pos : self.pos + 1]
            if ch.isspace():
                self.pos += 1
            elif ch == b"#":
                nl = self.blob.find(b"\n", self.pos)
                self.pos = len(self.blob) if nl < 0 else nl + 1
            else:
                return

    def word(self, what):
        self._skip_space()
        start = self.pos
        while self.pos < len(self.blob) and not self.blob[self.pos : self.pos + 1].isspace():
            self.pos += 1
        if self.pos == start:
            raise ParseError(f"expected {what}", offset=start)
        return self.blob[start : self.pos]

    def integer(self, what):
        w = self.word(what)
        try:
            return int(w)
        except ValueError:
            raise ParseError(f"expected integer {what}, got {w!r}", offset=self.pos - len(w)) from None

    def raster(self, nbytes):
        # exactly one whitespace byte separates the header from the raster
        if self.pos >= len(self.blob) or not self.blob[self.pos : self.pos + 1].isspace():
            raise ParseError("expected single whitespace before raster", offset=self.pos)
        self.pos += 1
        data = self.blob[self.pos : self.pos + nbytes]
        if len(data) != nbytes:
            raise ParseError(
                f"raster truncated: wanted {nbytes} bytes, got {len(data)}", offset=self.pos
            )
        self.pos += nbytes
        return data


def _read_pnm(path, magic_wanted):
    with open(path, "rb") as fh:
        blob = fh.read()
    toks = _Tokens(blob)
    magic = toks.word("magic number")
    if magic != magic_wanted:
        raise ParseError(f"bad magic number {magic!r}, wanted {magic_wanted!r}", offset=0)
    width = toks.integer("width")
    height = toks.integer("height")
    maxval = toks.integer("maxval")
    return toks, width, height, maxval


def save_ppm(path, rgb):
    """Write an 8-bit binary PPM. Accepts float [0,1] or uint8 (h, w, 3)."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"expected (h, w, 3), got {rgb.shape}")
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def load_ppm(path):
    toks, w, h, maxval = _read_pnm(path, b"P6")
    if maxval != 255:
        raise ParseError(f"only maxval 255 PPM supported, got {maxval}", offset=toks.pos)
    data = toks.raster(h * w * 3)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def save_depth_pgm(path, depth: DepthMap):
    """16-bit big-endian PGM in millimeters; invalid pixels stored as 0."""
    mm = np.zeros(depth.shape, dtype=np.uint16)
    vals = np.clip(np.rint(depth.values * 1000.0), 1, 65535)
    mm[depth.valid_mask] = vals[depth.valid_mask].astype(np.uint16)
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(mm.astype(">u2").tobytes())


def load_depth_pgm(path) -> DepthMap:
    toks, w, h, maxval = _read_pnm(path, b"P5")
    if maxval != 65535:
        raise ParseError(f"depth PGM must have maxval 65535, got {maxval}", offset=toks.pos)
    data = toks.raster(h * w * 2)
    mm = np.frombuffer(data, dtype=">u2").reshape(h, w).astype(np.float64)
    valid = mm > 0
    values = np.where(valid, mm / 1000.0, 1.0)
    return DepthMap(values=values, valid_mask=valid)


def save_label_pgm(path, labels):
    """8-bit PGM for label maps (255 is the conventional ignore value)."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise DataError("labels must fit in [0, 255]")
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(labels.astype(np.uint8).tobytes())


def load_label_pgm(path):
    toks, w, h, maxval = _read_pnm(path, b"P5")
    if maxval != 255:
        raise ParseError(f"label PGM must have maxval 255, got {maxval}", offset=toks.pos)
    data = toks.raster(h * w)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).astype(np.int64)


def save_depth_csv(path, depth: DepthMap):
    with open(path, "w", encoding="ascii") as fh:
        fh.write("r,c,value\n")
        for r in range(depth.shape[0]):
            for c in range(depth.shape[1]):
                if depth.valid_mask[r, c]:
                    fh.write(f"{r},{c},{float(depth.values[r, c])!r}\n")


def load_depth_csv(path, shape=None) -> DepthMap:
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != "r,c,value":
            raise ParseError(f"bad CSV header {header!r}", offset=0)
        for line in fh:
            line = line.strip()
            if not line:
                continue
            r, c, v = line.split(",")
            rows.append((int(r), int(c), float(v)))
    if not rows:
        raise DataError("empty depth CSV")
    if shape is None:
        shape = (max(r for r, _, _ in rows) + 1, max(c for _, c, _ in rows) + 1)
    values = np.ones(shape)
    valid = np.zeros(shape, dtype=bool)
    for r, c, v in rows:
        values[r, c] = v
        valid[r, c] = True
    return DepthMap(values=values, valid_mask=valid)
