"""Silhouette / RGB sequence containers, pack-file I/O and size normalization.

Pack layout (little-endian)::

    magic   4 bytes   b"GSP1" (silhouette) or b"GRP1" (RGB)
    header  4 x uint32  H, W, T, channels
    payload silhouettes: T*H*W bits, packed row-major (numpy ``packbits`` order)
            RGB:         T*H*W*3 float32
    boxes   T x 4 int32 (top, left, box_h, box_w)
"""
from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

SIL_MAGIC = b"GSP1"
RGB_MAGIC = b"GRP1"
CHIP = 64


class PackFormatError(ValueError):
    def __init__(self, msg, offset):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


class EmptySequenceError(ValueError):
    pass


@dataclass
class SilhouetteSequence:
    masks: np.ndarray  # (T, H, W) uint8 in {0, 1}
    raw_boxes: np.ndarray  # (T, 4) int32: top, left, box_h, box_w in source pixels
    frame_index: np.ndarray = None  # source frame of each row; differs from arange(T) once empties are dropped

    def __post_init__(self):
        self.masks = np.ascontiguousarray(self.masks, dtype=np.uint8)
        self.raw_boxes = np.asarray(self.raw_boxes, dtype=np.int32).reshape(-1, 4)
        if self.masks.ndim != 3:
            raise ValueError(f"masks must be (T, H, W), got {self.masks.shape}")
        if len(self.raw_boxes) != len(self.masks):
            raise ValueError(f"{len(self.raw_boxes)} boxes for {len(self.masks)} frames")
        if self.frame_index is None:
            self.frame_index = np.arange(len(self.masks))

    @property
    def T(self):
        return self.masks.shape[0]

    @property
    def H(self):
        return self.masks.shape[1]

    @property
    def W(self):
        return self.masks.shape[2]

    @property
    def is_normalized(self):
        return self.H == CHIP and self.W == CHIP

    def __len__(self):
        return self.T

    def slice(self, start, end):
        return SilhouetteSequence(self.masks[start:end], self.raw_boxes[start:end], self.frame_index[start:end])


@dataclass
class RgbSequence:
    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1]
    raw_boxes: np.ndarray
    frame_index: np.ndarray = None

    def __post_init__(self):
        self.frames = np.clip(np.ascontiguousarray(self.frames, dtype=np.float32), 0.0, 1.0)
        self.raw_boxes = np.asarray(self.raw_boxes, dtype=np.int32).reshape(-1, 4)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be (T, H, W, 3), got {self.frames.shape}")
        if self.frame_index is None:
            self.frame_index = np.arange(len(self.frames))

    @property
    def T(self):
        return self.frames.shape[0]

    def __len__(self):
        return self.T

    def slice(self, start, end):
        return RgbSequence(self.frames[start:end], self.raw_boxes[start:end], self.frame_index[start:end])


@dataclass
class RatioTrack:
    """Per-frame (box_h / 64, box_w / 64) taken before normalization."""

    values: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.float32))

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32).reshape(-1, 2)

    def __len__(self):
        return len(self.values)

    @classmethod
    def from_boxes(cls, boxes, target=(CHIP, CHIP)):
        boxes = np.asarray(boxes).reshape(-1, 4)
        return cls(np.stack([boxes[:, 2] / target[0], boxes[:, 3] / target[1]], axis=1))

    def slice(self, start, end):
        return RatioTrack(self.values[start:end])


def tight_box(mask):
    """(top, left, h, w) of the foreground, or None for an empty plane."""
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1)


def boxes_of(masks):
    out = np.zeros((len(masks), 4), np.int32)
    for t, m in enumerate(masks):
        b = tight_box(m)
        if b is not None:
            out[t] = b
    return out


# -- normalization -------------------------------------------------------------
def _frame_geometry(mask, box, target):
    """Source sampling coordinates for one frame.

    Returns (src_rows, src_cols_f, dst_offset) where ``src_rows`` has one float
    source row per output row, ``src_cols_f`` one float source column per
    content column, and ``dst_offset`` is where content column 0 lands.
    """
    th, tw = target
    top, left, bh, bw = box
    scale = th / bh
    cw = max(1, int(round(bw * scale)))
    rows = top + (np.arange(th) + 0.5) * (bh / th) - 0.5
    cols = left + (np.arange(cw) + 0.5) * (bw / cw) - 0.5
    return rows, cols, cw


def _place(cw, centroid, tw):
    """Offset of content column 0 in the output so the centroid sits at the center.

    Content that fits is never cut; wider content is cropped around the centroid.
    """
    off = int(round((tw - 1) / 2.0 - centroid))
    if cw <= tw:
        return min(max(off, 0), tw - cw)
    return min(max(off, tw - cw), 0)


def normalize(seq: SilhouetteSequence, target=(CHIP, CHIP), rgb: RgbSequence | None = None):
    """Crop each frame to its tight box, scale to height 64, center on the centroid column.

    Masks use nearest-neighbour sampling, RGB bilinear. Empty frames are dropped
    (and logged). Returns ``(normalized, ratios)`` or ``(normalized, ratios, rgb)``
    when ``rgb`` is given.
    """
    th, tw = target
    keep = []
    out_m = []
    out_rgb = []
    boxes = []
    for t in range(seq.T):
        m = seq.masks[t]
        box = tight_box(m)
        if box is None:
            continue
        rows, cols, cw = _frame_geometry(m, box, target)
        ri = np.clip(np.floor(rows + 0.5).astype(int), 0, seq.H - 1)
        ci = np.clip(np.floor(cols + 0.5).astype(int), 0, seq.W - 1)
        content = m[np.ix_(ri, ci)]
        colmass = content.sum(axis=0).astype(np.float64)
        centroid = float((colmass * np.arange(cw)).sum() / colmass.sum()) if colmass.sum() else (cw - 1) / 2.0
        off = _place(cw, centroid, tw)
        lo, hi = max(0, -off), min(cw, tw - off)
        frame = np.zeros((th, tw), np.uint8)
        frame[:, off + lo:off + hi] = content[:, lo:hi]
        out_m.append(frame)
        boxes.append(box)
        keep.append(t)
        if rgb is not None:
            chip = np.zeros((th, tw, 3), np.float32)
            chip[:, off + lo:off + hi] = _bilinear(rgb.frames[t], rows, cols[lo:hi])
            out_rgb.append(chip)
    dropped = seq.T - len(keep)
    if not keep:
        raise EmptySequenceError("every frame of the sequence is empty")
    if dropped:
        log.warning("normalize: dropped %d empty frame(s) of %d", dropped, seq.T)
    keep = np.asarray(keep)
    norm = SilhouetteSequence(np.stack(out_m), np.asarray(boxes, np.int32), seq.frame_index[keep])
    ratios = RatioTrack.from_boxes(norm.raw_boxes, target)
    if rgb is None:
        return norm, ratios
    return norm, ratios, RgbSequence(np.stack(out_rgb), norm.raw_boxes, norm.frame_index)


def _bilinear(img, rows, cols):
    h, w = img.shape[:2]
    r = np.clip(rows, 0, h - 1)
    c = np.clip(cols, 0, w - 1)
    r0 = np.floor(r).astype(int)
    c0 = np.floor(c).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (r - r0)[:, None, None]
    fc = (c - c0)[None, :, None]
    top = img[np.ix_(r0, c0)] * (1 - fc) + img[np.ix_(r0, c1)] * fc
    bot = img[np.ix_(r1, c0)] * (1 - fc) + img[np.ix_(r1, c1)] * fc
    return (top * (1 - fr) + bot * fr).astype(np.float32)


# -- pack files ------------------------------------------------------------------
def save_pack(seq, path):
    """Write a silhouette or RGB sequence; the file is replaced atomically."""
    if isinstance(seq, SilhouetteSequence):
        t, h, w = seq.masks.shape
        header = SIL_MAGIC + struct.pack("<4I", h, w, t, 1)
        payload = np.packbits(seq.masks.reshape(-1).astype(bool)).tobytes()
    elif isinstance(seq, RgbSequence):
        t, h, w, c = seq.frames.shape
        header = RGB_MAGIC + struct.pack("<4I", h, w, t, c)
        payload = np.ascontiguousarray(seq.frames, dtype="<f4").tobytes()
    else:
        raise TypeError(f"cannot pack {type(seq).__name__}")
    boxes = np.ascontiguousarray(seq.raw_boxes, dtype="<i4").tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header + payload + boxes)
    os.replace(tmp, path)


def loads_pack(blob):
    magic = blob[:4]
    if magic not in (SIL_MAGIC, RGB_MAGIC):
        raise PackFormatError(f"bad magic {magic!r}", 0)
    if len(blob) < 20:
        raise PackFormatError(f"truncated header: {len(blob)} bytes", len(blob))
    h, w, t, c = struct.unpack("<4I", blob[4:20])
    pos = 20
    if magic == SIL_MAGIC:
        if c != 1:
            raise PackFormatError(f"silhouette pack with {c} channels", 16)
        nbytes = (t * h * w + 7) // 8
        frame_bits = h * w
        avail = len(blob) - pos
        if avail < nbytes:
            found = (avail * 8) // frame_bits if frame_bits else 0
            raise PackFormatError(f"truncated payload: header T={t} but {found} frames present", len(blob))
        bits = np.unpackbits(np.frombuffer(blob, np.uint8, nbytes, pos), count=t * h * w)
        vol = bits.reshape(t, h, w)
    else:
        if c != 3:
            raise PackFormatError(f"RGB pack with {c} channels", 16)
        frame_bytes = h * w * c * 4
        nbytes = t * frame_bytes
        avail = len(blob) - pos
        if avail < nbytes:
            found = avail // frame_bytes if frame_bytes else 0
            raise PackFormatError(f"truncated payload: header T={t} but {found} frames present", len(blob))
        vol = np.frombuffer(blob, "<f4", t * h * w * c, pos).reshape(t, h, w, c).astype(np.float32)
    pos += nbytes
    if len(blob) - pos != 16 * t:
        raise PackFormatError(f"box table holds {len(blob) - pos} bytes, expected {16 * t} for T={t}", pos)
    boxes = np.frombuffer(blob, "<i4", 4 * t, pos).reshape(t, 4).astype(np.int32)
    if magic == SIL_MAGIC:
        return SilhouetteSequence(vol, boxes)
    return RgbSequence(vol, boxes)


def load_pack(path):
    with open(path, "rb") as fh:
        return loads_pack(fh.read())


# -- PGM -----------------------------------------------------------------------------
def load_pgm_dir(directory, threshold=128):
    """Masks from a directory of P5 PGM frames, ordered by filename."""
    from PIL import Image

    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".pgm"))
    if not names:
        raise EmptySequenceError(f"no .pgm frames in {directory}")
    frames = []
    for n in names:
        with Image.open(os.path.join(directory, n)) as im:
            frames.append((np.asarray(im.convert("L")) >= threshold).astype(np.uint8))
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ValueError(f"PGM frames disagree in size: {sorted(shapes)}")
    masks = np.stack(frames)
    return SilhouetteSequence(masks, boxes_of(masks))


def save_pgm(plane, path):
    from PIL import Image

    arr = np.asarray(plane)
    if arr.dtype != np.uint8 or arr.max() <= 1:
        arr = (arr > 0).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path, format="PPM")
