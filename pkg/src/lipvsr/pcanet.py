"""Two-stage PCA convolutional network with binary hashing and block histograms.

A frame goes through L1 first-stage eigenfilters, each response map through
L2 second-stage eigenfilters, and every group of L2 maps sharing a parent is
binarized at zero, packed into one integer hash image, max-pooled, and
summarized by per-block histograms.  With the default configuration
(8 + 8 filters, 4x4 blocks, 256 bins) a frame maps to 8 * 16 * 256 = 32768
raw counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dataio import FormatError


@dataclass(frozen=True)
class PcanetConfig:
    patch_side: int = 7
    filters: int = 8
    pool_window: int = 2
    pool_stride: int = 2
    blocks: int = 4
    frame_cap: int = 200
    normalize: bool = False

    @property
    def bins(self):
        return 2 ** self.filters

    def feature_dim(self):
        return self.filters * self.blocks ** 2 * self.bins

    def pooled_shape(self, height, width):
        return (_pool_len(height, self.pool_window, self.pool_stride),
                _pool_len(width, self.pool_window, self.pool_stride))

    def input_scaling(self, height, width):
        """Factor that gives every histogram block unit mean mass.

        Each block holds about pooled_pixels / blocks**2 counts, so a
        60x90 frame (30x45 pooled, 16 blocks) scales by 16 / 1350.
        """
        ph, pw = self.pooled_shape(height, width)
        return self.blocks ** 2 / (ph * pw)


@dataclass(frozen=True)
class FilterBank:
    stage: int
    k: int
    filters: np.ndarray       # (L, k*k), rows orthonormal
    eigenvalues: np.ndarray   # (L,), descending
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def n_filters(self):
        return self.filters.shape[0]

    @property
    def kernels(self):
        return self.filters.reshape(-1, self.k, self.k)

    def save(self, path):
        extra = "".join(f" {k}={v}" for k, v in sorted(self.meta.items()))
        header = f"LIPBANK stage={self.stage} k={self.k} L={self.n_filters}{extra}\n"
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(np.ascontiguousarray(self.filters, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.eigenvalues, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        data = Path(path).read_bytes()
        nl = data.find(b"\n")
        if nl < 0 or not data.startswith(b"LIPBANK "):
            raise FormatError("not a filter bank file", path, 0)
        fields = dict(tok.split("=", 1) for tok in data[8:nl].decode("ascii").split())
        try:
            stage, k, n = int(fields.pop("stage")), int(fields.pop("k")), int(fields.pop("L"))
        except (KeyError, ValueError):
            raise FormatError("filter bank header lacks stage/k/L", path, 0) from None
        need = 8 * (n * k * k + n)
        payload = data[nl + 1:]
        if len(payload) != need:
            raise FormatError(f"filter bank payload is {len(payload)} bytes, expected {need}",
                              path, nl + 1)
        vals = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        return cls(stage, k, vals[:n * k * k].reshape(n, k * k), vals[n * k * k:], fields)


def _pool_len(n, window, stride):
    return -(-max(n - window, 0) // stride) + 1


# --------------------------------------------------------------------------
# patches and PCA

def _windows(image, k, mode):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("expected a 2-D image")
    if k < 1 or k % 2 == 0:
        raise ValueError(f"patch side must be odd, got {k}")
    if mode == "same":
        r = (k - 1) // 2
        img = np.pad(img, r)
    elif mode != "valid":
        raise ValueError(f"unknown patch mode {mode!r}")
    if img.shape[0] < k or img.shape[1] < k:
        raise ValueError(f"patch side {k} larger than image {img.shape}")
    return sliding_window_view(img, (k, k))


def extract_patches(image, k, mode="valid"):
    """Row-major vectorized k x k patches with each patch's mean removed."""
    win = _windows(image, k, mode)
    patches = win.reshape(-1, k * k)
    return patches - patches.mean(axis=1, keepdims=True)


def patch_scatter(images, k):
    """Sum of outer products of mean-removed same-mode patches, in input order."""
    scatter = np.zeros((k * k, k * k))
    for img in images:
        p = extract_patches(img, k, "same")
        scatter += p.T @ p
    return scatter


def filters_from_scatter(scatter, n_filters, stage=1):
    """Top eigenvectors of a patch scatter matrix as a FilterBank."""
    dim = scatter.shape[0]
    k = int(round(np.sqrt(dim)))
    if k * k != dim:
        raise ValueError("scatter matrix side must be a perfect square")
    if n_filters > dim:
        raise ValueError(f"cannot learn {n_filters} filters from {dim}-dim patches")
    evals, evecs = np.linalg.eigh(scatter)
    # stable sort keeps solver order among equal eigenvalues
    order = np.argsort(-evals, kind="stable")
    evals, evecs = evals[order], evecs[:, order]
    tol = max(evals[0], 0.0) * dim * np.finfo(np.float64).eps * 16
    rank = int(np.sum(evals > tol))
    if rank < n_filters:
        raise ValueError(f"patch scatter has rank {rank}, fewer than {n_filters} filters")
    filt = evecs[:, :n_filters].T.copy()
    for row in filt:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return FilterBank(stage, k, filt, evals[:n_filters].copy())


def learn_filters(patch_matrix, n_filters=8, stage=1):
    """PCA filters from an (n_patches, k*k) matrix of already mean-removed patches."""
    p = np.asarray(patch_matrix, dtype=np.float64)
    if p.shape[0] < n_filters:
        raise ValueError(f"need at least {n_filters} patches, got {p.shape[0]}")
    return filters_from_scatter(p.T @ p, n_filters, stage)


# --------------------------------------------------------------------------
# forward pass

def filter_image(image, bank):
    """Same-size zero-padded correlation of one image with every filter -> (L, h, w)."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    win = _windows(img, bank.k, "same").reshape(h * w, bank.k * bank.k)
    return (win @ bank.filters.T).T.reshape(bank.n_filters, h, w)


def stage_forward(images, bank):
    return [filter_image(img, bank) for img in images]


def binarize_and_stack(maps, n_maps=None):
    """Pack the signs of L maps into one integer image: sum 2^l [map_l > 0]."""
    m = np.asarray(maps)
    expected = n_maps if n_maps is not None else 8
    if m.shape[0] != expected:
        raise ValueError(f"expected {expected} maps, got {m.shape[0]}")
    out = np.zeros(m.shape[1:], dtype=np.int64)
    for bit in range(m.shape[0]):
        out |= (m[bit] > 0).astype(np.int64) << bit
    return out


def max_pool(img, window=2, stride=2):
    """Max over window x window tiles; ragged edges pool over partial windows."""
    a = np.asarray(img)
    h, w = a.shape
    oh, ow = _pool_len(h, window, stride), _pool_len(w, window, stride)
    ph = max((oh - 1) * stride + window, h)
    pw = max((ow - 1) * stride + window, w)
    if np.issubdtype(a.dtype, np.integer):
        fill = np.iinfo(a.dtype).min
    else:
        fill = -np.inf
    padded = np.full((ph, pw), fill, dtype=a.dtype)
    padded[:h, :w] = a
    out = None
    for dy in range(window):
        for dx in range(window):
            tile = padded[dy:dy + (oh - 1) * stride + 1:stride,
                          dx:dx + (ow - 1) * stride + 1:stride]
            out = tile.copy() if out is None else np.maximum(out, tile)
    return out


def block_index(height, width, grid):
    """Block id per pixel; last block row/column absorbs the remainder."""
    if height < grid or width < grid:
        raise ValueError(f"image {height}x{width} smaller than {grid}x{grid} block grid")
    rows = np.minimum(np.arange(height) // (height // grid), grid - 1)
    cols = np.minimum(np.arange(width) // (width // grid), grid - 1)
    return rows[:, None] * grid + cols[None, :]


def block_histograms(img, grid=4, bins=256):
    """Raw per-block histograms concatenated block-row-major."""
    a = np.asarray(img)
    if a.size and (a.min() < 0 or a.max() >= bins):
        raise ValueError(f"hash value outside [0, {bins})")
    idx = block_index(a.shape[0], a.shape[1], grid) * bins + a
    return np.bincount(idx.ravel(), minlength=grid * grid * bins).astype(np.float64)


def extract_feature(frame, bank1, bank2, cfg=PcanetConfig()):
    """Full frame -> histogram feature path (stage 1, stage 2, hash, pool, histograms)."""
    maps1 = filter_image(frame, bank1)
    n1, h, w = maps1.shape
    k = bank2.k
    r = (k - 1) // 2
    padded = np.pad(maps1, ((0, 0), (r, r), (r, r)))
    win = sliding_window_view(padded, (k, k), axis=(1, 2)).reshape(n1 * h * w, k * k)
    maps2 = (win @ bank2.filters.T).reshape(n1, h, w, bank2.n_filters)
    weights = np.left_shift(1, np.arange(bank2.n_filters, dtype=np.int64))
    hashes = (maps2 > 0).astype(np.int64) @ weights            # (n1, h, w)
    bins = 2 ** bank2.n_filters
    parts = []
    for group in hashes:
        pooled = max_pool(group, cfg.pool_window, cfg.pool_stride)
        parts.append(block_histograms(pooled, cfg.blocks, bins))
    return np.concatenate(parts)


def extract_features(frames, bank1, bank2, cfg=PcanetConfig()):
    """Stack :func:`extract_feature` over a (T, h, w) frame array."""
    return np.stack([extract_feature(f, bank1, bank2, cfg) for f in frames])


# --------------------------------------------------------------------------
# learning both stages

def subsample_frames(n_frames, cap):
    """Evenly spaced frame indices, at most ``cap`` of them."""
    if cap is None or n_frames <= cap:
        return np.arange(n_frames)
    return np.unique(np.linspace(0, n_frames - 1, cap).round().astype(np.int64))


def learn_banks(frames, cfg=PcanetConfig()):
    """Learn the stage-1 bank from frames, then the stage-2 bank from all stage-1 maps."""
    frames = list(frames)
    sel = [frames[i] for i in subsample_frames(len(frames), cfg.frame_cap)]
    k, n = cfg.patch_side, cfg.filters
    bank1 = filters_from_scatter(patch_scatter(sel, k), n, stage=1)
    scatter2 = np.zeros((k * k, k * k))
    for img in sel:
        scatter2 += patch_scatter(filter_image(img, bank1), k)
    bank2 = filters_from_scatter(scatter2, n, stage=2)
    return bank1, bank2
