"""Synthetic matrix-sequence generators and noise injectors.

Every generator is a pure function of its config: sequence ``i`` draws from
its own stream derived from ``(seed, i)`` so output does not depend on
generation order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError
from .models import SequenceDataset

IDX3_MAGIC = 0x00000803
IDX1_MAGIC = 0x00000801


def _rng(seed: int, *index: int) -> np.random.Generator:
    return np.random.default_rng([seed, *index])


def outlier_count(n: int, ratio: float) -> int:
    """``round(ratio * n)`` with halves rounded up."""
    return int(math.floor(ratio * n + 0.5))


def _pick_outliers(n: int, ratio: float, seed: int) -> np.ndarray:
    labels = np.zeros(n, dtype=np.int8)
    k = outlier_count(n, ratio)
    if k:
        labels[_rng(seed, 2**31 - 1).choice(n, size=k, replace=False)] = 1
    return labels


# ------------------------------------------------------------------ binary data


@dataclass(frozen=True)
class SynthConfig:
    n_r: int = 10
    n_c: int = 10
    T: int = 20
    n_sequences: int = 5000
    outlier_ratio: float = 0.05
    shift_min: int = 1
    shift_max: int = 5
    fixed_shift: bool = False
    fixed_permutation: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.outlier_ratio <= 1.0:
            raise ContractError("outlier_ratio must be in [0, 1]")
        if not 1 <= self.shift_min <= self.shift_max <= self.n_c:
            raise ContractError(f"shift range {self.shift_min}..{self.shift_max} invalid for n_c={self.n_c}")
        if self.T < 2 or self.n_r < 1 or self.n_c < 1 or self.n_sequences < 1:
            raise ContractError("T >= 2 and positive sizes required")


def circshift(X: np.ndarray, c: int) -> np.ndarray:
    """Rotate columns right by ``c``: column ``j`` of the result is column ``(j - c) mod n_c``."""
    if c < 0:
        raise ContractError("shift must be non-negative")
    return np.roll(X, c, axis=-1)


def _normal_sequence(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    frames = np.empty((cfg.T, cfg.n_r, cfg.n_c))
    frames[0] = rng.random((cfg.n_r, cfg.n_c)) < 0.5
    shift = int(rng.integers(cfg.shift_min, cfg.shift_max + 1))
    for t in range(1, cfg.T):
        if not cfg.fixed_shift:
            shift = int(rng.integers(cfg.shift_min, cfg.shift_max + 1))
        frames[t] = circshift(frames[t - 1], shift)
    return frames


def _anomalous_sequence(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    frames = np.empty((cfg.T, cfg.n_r, cfg.n_c))
    frames[0] = rng.random((cfg.n_r, cfg.n_c)) < 0.5
    perm = rng.permutation(cfg.n_c)
    for t in range(1, cfg.T):
        if not cfg.fixed_permutation:
            perm = rng.permutation(cfg.n_c)
        frames[t] = frames[t - 1][:, perm]
    return frames


def gen_synthetic(cfg: SynthConfig) -> SequenceDataset:
    """Binary column-rotation sequences with column-permutation anomalies."""
    labels = _pick_outliers(cfg.n_sequences, cfg.outlier_ratio, cfg.seed)
    frames = np.empty((cfg.n_sequences, cfg.T, cfg.n_r, cfg.n_c))
    for i in range(cfg.n_sequences):
        rng = _rng(cfg.seed, i)
        frames[i] = _anomalous_sequence(cfg, rng) if labels[i] else _normal_sequence(cfg, rng)
    return SequenceDataset(frames, labels, [f"synth-{cfg.seed}-{i}" for i in range(cfg.n_sequences)])


# ------------------------------------------------------------------ noise


def inject_zero_noise(frames: np.ndarray, p: float = 0.2, seed: int = 0) -> np.ndarray:
    """Zero each entry independently with probability ``p`` (fresh mask per frame).

    ``frames`` may be a single sequence ``(T, r, c)`` or a dataset array
    ``(N, T, r, c)``; for datasets every sequence gets its own stream.
    """
    if not 0.0 <= p <= 1.0:
        raise ContractError("p must be in [0, 1]")
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 4:
        return np.stack([inject_zero_noise(f, p, _seed_for(seed, i)) for i, f in enumerate(frames)])
    keep = np.random.default_rng(seed).random(frames.shape) >= p
    return frames * keep


def inject_salt_pepper(frames: np.ndarray, p: float = 0.1, seed: int = 0, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    """Set each pixel to ``high`` w.p. ``p`` and to ``low`` w.p. ``p``."""
    if not 0.0 <= 2 * p <= 1.0:
        raise ContractError("salt-and-pepper needs 0 <= 2p <= 1")
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 4:
        return np.stack([inject_salt_pepper(f, p, _seed_for(seed, i), low, high) for i, f in enumerate(frames)])
    u = np.random.default_rng(seed).random(frames.shape)
    out = frames.copy()
    out[u < p] = high
    out[(u >= p) & (u < 2 * p)] = low
    return out


def _seed_for(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0])


def noisy_dataset(ds: SequenceDataset, kind: str, p: float, seed: int) -> SequenceDataset:
    if kind == "zero":
        frames = inject_zero_noise(ds.frames, p, seed)
    elif kind == "salt_pepper":
        frames = inject_salt_pepper(ds.frames, p, seed)
    else:
        raise ContractError(f"unknown noise kind {kind!r}")
    return SequenceDataset(frames, ds.labels.copy(), list(ds.ids), dict(ds.meta))


# ------------------------------------------------------------------ permutations


def _check_perm(perm, n, what):
    perm = np.asarray(perm)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ContractError(f"{what} is not a permutation of 0..{n - 1}")
    return perm


def permute_rows_cols(frames: np.ndarray, row_perm, col_perm) -> np.ndarray:
    """Apply the same row and column permutation to every frame ``(..., r, c)``."""
    frames = np.asarray(frames)
    rp = _check_perm(row_perm, frames.shape[-2], "row permutation")
    cp = _check_perm(col_perm, frames.shape[-1], "column permutation")
    return frames[..., rp, :][..., :, cp]


def inverse_permutation(perm) -> np.ndarray:
    perm = np.asarray(perm)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


# ------------------------------------------------------------------ sprites


@dataclass(frozen=True)
class SpriteConfig:
    canvas: tuple[int, int] = (28, 28)
    sprite_size: int = 8
    T: int = 20
    n_sequences: int = 1000
    outlier_ratio: float = 0.05
    speed: float = 1.5
    curvature: float = 0.05
    trajectory_jitter: int = 0
    permute: bool = True
    permutation_scope: str = "dataset"
    noise: str = "none"
    noise_p: float = 0.1
    seed: int = 0
    perm_seed: int | None = None  # dataset-scope permutation; defaults to ``seed``

    def __post_init__(self):
        if self.trajectory_jitter < 0:
            raise ContractError("jitter must be >= 0")
        if self.sprite_size > min(self.canvas):
            raise ContractError("sprite does not fit the canvas")
        if self.permutation_scope not in ("dataset", "sequence"):
            raise ContractError("permutation_scope must be 'dataset' or 'sequence'")
        if self.noise not in ("none", "salt_pepper"):
            raise ContractError(f"unknown noise {self.noise!r}")


def blob_sprite(size: int, rng: np.random.Generator) -> np.ndarray:
    """A soft elliptical blob with random radii and orientation, intensities in [0, 1]."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size] - c
    ang = rng.uniform(0, math.pi)
    ra, rb = rng.uniform(0.35, 0.5) * size, rng.uniform(0.15, 0.35) * size
    u = xx * math.cos(ang) + yy * math.sin(ang)
    v = -xx * math.sin(ang) + yy * math.cos(ang)
    d = (u / ra) ** 2 + (v / rb) ** 2
    return np.clip(1.5 - d, 0.0, 1.0)


def crop_glyph(img: np.ndarray, max_size: int) -> np.ndarray:
    """Crop an image to its non-zero bounding box, halving until it fits ``max_size``."""
    img = np.asarray(img, dtype=np.float64)
    rows = np.flatnonzero(img.any(axis=1))
    cols = np.flatnonzero(img.any(axis=0))
    if len(rows) == 0:
        return np.zeros((1, 1))
    g = img[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    while max(g.shape) > max_size:
        h, w = (g.shape[0] + 1) // 2 * 2, (g.shape[1] + 1) // 2 * 2
        pad = np.zeros((h, w))
        pad[: g.shape[0], : g.shape[1]] = g
        g = pad.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    return g


def trajectory(
    start: tuple[float, float], heading: float, T: int, speed: float, curvature: float,
    bounds: tuple[float, float],
) -> np.ndarray:
    """Positions ``(T, 2)`` (row, col) with constant turn rate, reflecting at the bounds."""
    pos = np.array(start, dtype=np.float64)
    out = np.empty((T, 2))
    out[0] = pos
    for t in range(1, T):
        heading += curvature
        pos = pos + speed * np.array([math.sin(heading), math.cos(heading)])
        for axis in (0, 1):
            hi = bounds[axis]
            if pos[axis] < 0 or pos[axis] > hi:
                pos[axis] = -pos[axis] if pos[axis] < 0 else 2 * hi - pos[axis]
                pos[axis] = min(max(pos[axis], 0.0), hi)
                heading = -heading if axis == 0 else math.pi - heading
        out[t] = pos
    return out


def render(sprite: np.ndarray, positions: np.ndarray, canvas: tuple[int, int]) -> np.ndarray:
    frames = np.zeros((len(positions),) + tuple(canvas))
    h, w = sprite.shape
    for t, (r, c) in enumerate(positions):
        r0 = int(min(max(round(r), 0), canvas[0] - h))
        c0 = int(min(max(round(c), 0), canvas[1] - w))
        frames[t, r0:r0 + h, c0:c0 + w] = np.maximum(frames[t, r0:r0 + h, c0:c0 + w], sprite)
    return frames


@dataclass
class SpriteDataset:
    data: SequenceDataset
    row_perms: np.ndarray  # (N, canvas_r)
    col_perms: np.ndarray  # (N, canvas_c)


def gen_moving_sprites(cfg: SpriteConfig, glyphs: list[np.ndarray] | None = None) -> SpriteDataset:
    """Moving sprites: straight trajectories are normal, curved ones anomalous."""
    n = cfg.n_sequences
    labels = _pick_outliers(n, cfg.outlier_ratio, cfg.seed)
    H, W = cfg.canvas
    frames = np.empty((n, cfg.T, H, W))
    row_perms = np.tile(np.arange(H), (n, 1))
    col_perms = np.tile(np.arange(W), (n, 1))
    if cfg.permute and cfg.permutation_scope == "dataset":
        prng = _rng(cfg.seed if cfg.perm_seed is None else cfg.perm_seed, 2**31 - 2)
        row_perms[:] = prng.permutation(H)
        col_perms[:] = prng.permutation(W)
    for i in range(n):
        rng = _rng(cfg.seed, i)
        if glyphs:
            sprite = crop_glyph(glyphs[int(rng.integers(len(glyphs)))], cfg.sprite_size)
        else:
            sprite = blob_sprite(cfg.sprite_size, rng)
        h, w = sprite.shape
        bounds = (float(H - h), float(W - w))
        start = (rng.uniform(0, bounds[0]), rng.uniform(0, bounds[1]))
        heading = rng.uniform(0, 2 * math.pi)
        turn = 1.0 if rng.random() < 0.5 else -1.0  # drawn for every sequence to keep streams aligned
        kappa = cfg.curvature * turn if labels[i] else 0.0
        pos = trajectory(start, heading, cfg.T, cfg.speed, kappa, bounds)
        if cfg.trajectory_jitter:
            j = cfg.trajectory_jitter
            pos = pos + rng.integers(-j, j + 1, size=pos.shape)
        seq = render(sprite, pos, cfg.canvas)
        if cfg.noise == "salt_pepper":
            seq = inject_salt_pepper(seq, cfg.noise_p, int(rng.integers(2**31)))
        if cfg.permute:
            if cfg.permutation_scope == "sequence":
                row_perms[i] = rng.permutation(H)
                col_perms[i] = rng.permutation(W)
            seq = permute_rows_cols(seq, row_perms[i], col_perms[i])
        frames[i] = seq
    ids = [f"sprite-{cfg.seed}-{i}" for i in range(n)]
    return SpriteDataset(SequenceDataset(frames, labels, ids), row_perms, col_perms)


# ------------------------------------------------------------------ IDX


def parse_idx_images(buf: bytes) -> list[np.ndarray]:
    """Decode an IDX3 unsigned-byte image file into ``[0, 1]`` matrices."""
    if len(buf) < 16:
        raise ParseError(f"IDX header needs 16 bytes, got {len(buf)}", offset=len(buf))
    magic, n, rows, cols = struct.unpack(">IIII", buf[:16])
    if magic != IDX3_MAGIC:
        hint = " (label file)" if magic == IDX1_MAGIC else ""
        raise ParseError(f"bad IDX3 magic 0x{magic:08x}{hint}", offset=0)
    expected = 16 + n * rows * cols
    if len(buf) < expected:
        raise ParseError(
            f"truncated IDX3 payload: expected {expected} bytes, got {len(buf)}", offset=len(buf)
        )
    arr = np.frombuffer(buf, dtype=np.uint8, count=n * rows * cols, offset=16)
    return list(arr.reshape(n, rows, cols).astype(np.float64) / 255.0)


def read_idx_images(path) -> list[np.ndarray]:
    return parse_idx_images(Path(path).read_bytes())


def write_idx_images(images: list[np.ndarray]) -> bytes:
    """Encode ``[0, 1]`` images as IDX3 bytes (used for fixtures)."""
    imgs = np.asarray(images)
    n, rows, cols = imgs.shape
    payload = np.clip(np.rint(imgs * 255.0), 0, 255).astype(np.uint8).tobytes()
    return struct.pack(">IIII", IDX3_MAGIC, n, rows, cols) + payload
