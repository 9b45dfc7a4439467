"""On-disk formats: PGM frames, utterance manifests, label files, feature files.

All readers validate eagerly and raise :class:`FormatError` (a ``ValueError``)
with enough context to locate the problem.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VIEWS = (0, 30, 45, 60, 90)
N_CLASSES = 28
FEATURE_MAGIC = b"LIPFEAT1"
_FEATURE_HEADER = struct.Struct("<8sII")


class FormatError(ValueError):
    """Malformed or inconsistent input file."""

    def __init__(self, message, path=None, offset=None):
        self.path = None if path is None else str(path)
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


# --------------------------------------------------------------------------
# images

@dataclass(frozen=True)
class GrayImage:
    pixels: np.ndarray  # (height, width), float64 in [0, 1]

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.pixels if dtype is None else self.pixels.astype(dtype)


def _pgm_token(data, pos, path):
    """Read one whitespace-delimited header token, skipping comments."""
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PGM header", path, start)
    return data[start:pos], start, pos


def decode_pgm(data, path=None):
    """Parse binary PGM (P5, maxval 255) bytes into a uint8 array."""
    if data[:2] != b"P5":
        raise FormatError(f"unsupported PGM variant {data[:2]!r}, expected P5", path, 0)
    pos = 2
    values = []
    for name in ("width", "height", "maxval"):
        tok, start, pos = _pgm_token(data, pos, path)
        if not tok.isdigit():
            raise FormatError(f"bad PGM {name} {tok!r}", path, start)
        values.append(int(tok))
    width, height, maxval = values
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval}", path, start)
    if width < 1 or height < 1:
        raise FormatError(f"empty PGM dimensions {width}x{height}", path, 3)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after PGM maxval", path, pos)
    pos += 1
    need = width * height
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise FormatError(
            f"truncated PGM payload: {len(payload)} of {need} bytes", path, pos + len(payload))
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width)


def encode_pgm(pixels):
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise ValueError("PGM needs a 2-D array")
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    h, w = arr.shape
    return b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes()


def load_image(path) -> GrayImage:
    data = Path(path).read_bytes()
    raw = decode_pgm(data, path)
    return GrayImage(raw.astype(np.float64) / 255.0)


def write_image(path, pixels):
    """Write a uint8 (or 0..255 real) array as P5."""
    Path(path).write_bytes(encode_pgm(pixels))


def normalize_frame(pixels, eps=1e-8):
    """Per-frame zero-mean, unit-variance normalization."""
    p = np.asarray(pixels, dtype=np.float64)
    return (p - p.mean()) / (p.std() + eps)


# --------------------------------------------------------------------------
# labels and class maps

def load_labels(path, n_classes=N_CLASSES):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            try:
                v = int(s)
            except ValueError:
                raise FormatError(f"line {lineno}: non-integer label {s!r}", path) from None
            if not 0 <= v < n_classes:
                raise FormatError(
                    f"line {lineno}: label {v} out of range [0, {n_classes})", path)
            out.append(v)
    return out


def write_labels(path, labels):
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{int(v)}\n" for v in labels)


def load_viseme_map(path, n_phonemes=N_CLASSES, n_visemes=12):
    """Read ``phoneme<TAB>viseme`` lines into an index array (phoneme -> viseme)."""
    mapping = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise FormatError(f"line {lineno}: expected 2 tab-separated fields", path)
            try:
                p, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise FormatError(f"line {lineno}: non-integer field", path) from None
            if not 0 <= p < n_phonemes or not 0 <= v < n_visemes:
                raise FormatError(f"line {lineno}: index out of range", path)
            if p in mapping:
                raise FormatError(f"line {lineno}: phoneme class {p} mapped twice", path)
            mapping[p] = v
    missing = sorted(set(range(n_phonemes)) - set(mapping))
    if missing:
        raise FormatError(f"unmapped phoneme classes {missing}", path)
    return np.array([mapping[p] for p in range(n_phonemes)], dtype=np.int64)


def write_viseme_map(path, vmap):
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{p}\t{int(v)}\n" for p, v in enumerate(vmap))


def load_class_names(path):
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


# --------------------------------------------------------------------------
# manifests

FRAME_PATTERN = "frame_%06d.pgm"


@dataclass
class Utterance:
    id: str
    speaker: str
    view: int
    frames_dir: str
    frame_paths: list
    transcript: list
    frame_labels: list | None = None
    label_path: str | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.frame_paths:
            raise ValueError(f"utterance {self.id}: no frames")
        if self.frame_labels is not None and len(self.frame_labels) != len(self.frame_paths):
            raise ValueError(
                f"utterance {self.id}: {len(self.frame_labels)} labels for "
                f"{len(self.frame_paths)} frames")

    @property
    def n_frames(self):
        return len(self.frame_paths)

    def to_line(self):
        fields = [self.id, self.speaker, str(self.view), self.frames_dir, " ".join(self.transcript)]
        if self.label_path is not None:
            fields.append(self.label_path)
        return "\t".join(fields)

    def load_frames(self, normalize=False):
        """Stack all frames into a (T, height, width) float64 array."""
        frames = [load_image(p).pixels for p in self.frame_paths]
        shapes = {f.shape for f in frames}
        if len(shapes) != 1:
            raise FormatError(f"utterance {self.id}: mixed frame sizes {sorted(shapes)}")
        out = np.stack(frames)
        if normalize:
            out = np.stack([normalize_frame(f) for f in out])
        return out


def _list_frames(frames_dir, uid):
    d = Path(frames_dir)
    if not d.is_dir():
        raise FormatError(f"utterance {uid}: missing frames directory {d}")
    indices = []
    for name in os.listdir(d):
        if name.startswith("frame_") and name.endswith(".pgm"):
            digits = name[6:-4]
            if len(digits) == 6 and digits.isdigit():
                indices.append(int(digits))
    indices.sort()
    if not indices:
        raise FormatError(f"utterance {uid}: no frame_%06d.pgm files in {d}")
    expected = list(range(indices[0], indices[0] + len(indices)))
    if indices != expected:
        gap = next(e for e, i in zip(expected, indices) if e != i)
        raise FormatError(f"utterance {uid}: non-contiguous frame indices (missing {gap}) in {d}")
    return [str(d / (FRAME_PATTERN % i)) for i in indices]


def parse_manifest_line(line, base_dir=".", n_classes=N_CLASSES, lineno=None):
    where = f"line {lineno}: " if lineno is not None else ""
    parts = line.rstrip("\n").split("\t")
    if len(parts) not in (5, 6):
        raise FormatError(f"{where}expected 5 or 6 tab-separated fields, got {len(parts)}")
    uid, speaker, view_s, frames_dir, transcript = parts[:5]
    try:
        view = int(view_s)
    except ValueError:
        raise FormatError(f"{where}unknown view {view_s!r}") from None
    if view not in VIEWS:
        raise FormatError(f"{where}unknown view {view}")
    words = transcript.split(" ") if transcript else []
    if not words or any(not w for w in words):
        raise FormatError(f"{where}empty transcript or empty word in {transcript!r}")
    base = Path(base_dir)
    frame_paths = _list_frames(base / frames_dir, uid)
    labels = label_path = None
    if len(parts) == 6:
        label_path = parts[5]
        labels = load_labels(base / label_path, n_classes)
        if len(labels) != len(frame_paths):
            raise FormatError(
                f"{where}utterance {uid}: label length mismatch, {len(labels)} labels "
                f"for {len(frame_paths)} frames")
    return Utterance(uid, speaker, view, frames_dir, frame_paths, words, labels, label_path)


def load_manifest(path, n_classes=N_CLASSES, view=None):
    """Parse a manifest; relative paths resolve against the manifest's directory.

    If ``view`` is given, only lines for that view are returned.
    """
    base = Path(path).parent
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            utt = parse_manifest_line(line, base, n_classes, lineno)
            if view is None or utt.view == view:
                out.append(utt)
    return out


def write_manifest(path, utterances):
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(u.to_line() + "\n" for u in utterances)


# --------------------------------------------------------------------------
# feature files

def write_features(path, frames):
    arr = np.asarray(frames)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError("features must be a list of equal-length vectors")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, arr.shape[0], arr.shape[1]))
        fh.write(payload.tobytes())


def read_features(path):
    """Return a (frame_count, dim) float32 array."""
    data = Path(path).read_bytes()
    if len(data) < _FEATURE_HEADER.size:
        raise FormatError("truncated feature header", path, len(data))
    magic, count, dim = _FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}", path, 0)
    need = 4 * count * dim
    have = len(data) - _FEATURE_HEADER.size
    if have != need:
        raise FormatError(
            f"payload size mismatch: header says {count}x{dim} ({need} bytes), found {have}",
            path, _FEATURE_HEADER.size + min(have, need))
    arr = np.frombuffer(data, dtype="<f4", offset=_FEATURE_HEADER.size)
    return arr.reshape(count, dim).astype(np.float32)


# --------------------------------------------------------------------------
# key=value sidecar headers

def write_meta(path, meta):
    with open(path, "w", encoding="utf-8") as fh:
        for k in sorted(meta):
            fh.write(f"{k}={meta[k]}\n")


def read_meta(path):
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                k, _, v = line.partition("=")
                meta[k] = v
    return meta
