"""ECG ingestion and preprocessing into labelled multi-beat matrix units.

Pipeline per recording and channel: polynomial detrend, Butterworth
bandpass, z-score, then fixed-length beat windows around annotated R-peaks.
Consecutive beats are stacked row-wise into ``N x window`` units.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.polynomial import Polynomial
from scipy import signal as sps

from .errors import ContractError, ParseError

log = logging.getLogger(__name__)

BEAT_CLASSES = ("N", "V", "S", "F", "Q")
ABNORMAL = frozenset({"V", "S", "F"})
SAMPLING_RATE = 360


@dataclass
class EcgRecording:
    subject: str
    channels: dict[str, np.ndarray]
    sampling_rate: float = SAMPLING_RATE

    def __post_init__(self):
        if self.sampling_rate <= 0:
            raise ContractError("sampling_rate must be positive")
        lengths = {len(v) for v in self.channels.values()}
        if len(lengths) > 1:
            raise ContractError(f"channels of {self.subject} differ in length: {sorted(lengths)}")

    @property
    def n_samples(self) -> int:
        return len(next(iter(self.channels.values()))) if self.channels else 0


@dataclass(frozen=True)
class BeatAnnotation:
    sample_index: int
    symbol: str

    def __post_init__(self):
        if self.symbol not in BEAT_CLASSES:
            raise ContractError(f"unknown beat class {self.symbol!r}")


@dataclass
class BeatUnit:
    matrix: np.ndarray  # N x window
    label: int
    subject: str = ""
    start_beat: int = 0


@dataclass
class Header:
    record: str
    n_channels: int
    n_samples: int
    channel_names: list[str] = field(default_factory=list)
    sampling_rate: float = SAMPLING_RATE


# ------------------------------------------------------------------ WFDB I/O


def read_wfdb_212(data: bytes, n_channels: int = 2, n_samples: int | None = None) -> np.ndarray:
    """Decode format-212 samples; returns an ``(n_channels, n_samples)`` int array.

    Every 3 bytes hold two 12-bit two's-complement samples; samples are
    interleaved across channels.  ``n_samples`` is per channel; by default
    every complete sample in ``data`` is decoded.
    """
    if n_channels < 1:
        raise ContractError("n_channels must be >= 1")
    total_avail = (len(data) // 3) * 2
    if n_samples is None:
        n_samples = total_avail // n_channels
    total = n_samples * n_channels
    need = math.ceil(total * 1.5)
    if len(data) < need:
        raise ParseError(
            f"format 212 data truncated: need {need} bytes for {n_samples} samples x {n_channels} channels, "
            f"got {len(data)}",
            offset=len(data),
        )
    n_groups = (total + 1) // 2
    raw = np.frombuffer(data, dtype=np.uint8, count=min(len(data), n_groups * 3))
    if raw.size < n_groups * 3:  # odd total: last group may be two bytes
        raw = np.concatenate([raw, np.zeros(n_groups * 3 - raw.size, dtype=np.uint8)])
    g = raw.reshape(n_groups, 3).astype(np.int32)
    s1 = g[:, 0] | ((g[:, 1] & 0x0F) << 8)
    s2 = g[:, 2] | ((g[:, 1] & 0xF0) << 4)
    flat = np.empty(n_groups * 2, dtype=np.int32)
    flat[0::2], flat[1::2] = s1, s2
    flat = flat[:total]
    flat = np.where(flat >= 2048, flat - 4096, flat)
    return flat.reshape(n_samples, n_channels).T.copy()


def write_wfdb_212(samples: np.ndarray) -> bytes:
    """Encode ``(n_channels, n_samples)`` 12-bit integers in format 212."""
    samples = np.asarray(samples)
    if samples.ndim != 2:
        raise ContractError("samples must be (n_channels, n_samples)")
    if samples.size and (samples.min() < -2048 or samples.max() > 2047):
        raise ContractError("format 212 holds 12-bit values in [-2048, 2047]")
    flat = samples.T.reshape(-1).astype(np.int32) & 0xFFF
    if flat.size % 2:
        flat = np.append(flat, 0)
    a, b = flat[0::2], flat[1::2]
    out = np.empty((a.size, 3), dtype=np.uint8)
    out[:, 0] = a & 0xFF
    out[:, 1] = ((a >> 8) & 0x0F) | ((b >> 4) & 0xF0)
    out[:, 2] = b & 0xFF
    buf = out.tobytes()
    total = samples.size
    return buf[: math.ceil(total * 1.5)]


def parse_header(text: str) -> Header:
    """Minimal ``.hea`` parsing: record name, channel count, samples, channel names."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ParseError("empty header")
    first = lines[0].split()
    if len(first) < 2:
        raise ParseError(f"malformed record line: {lines[0]!r}")
    try:
        n_channels = int(first[1])
        fs = float(first[2].split("/")[0]) if len(first) > 2 else SAMPLING_RATE
        n_samples = int(first[3]) if len(first) > 3 else 0
    except ValueError as exc:
        raise ParseError(f"malformed record line: {lines[0]!r}") from exc
    names = []
    for ln in lines[1: 1 + n_channels]:
        parts = ln.split()
        if len(parts) < 2 or parts[1] != "212":
            raise ParseError(f"unsupported signal line {ln!r}; only format 212 is read")
        names.append(parts[8] if len(parts) > 8 else f"ch{len(names)}")
    if len(names) != n_channels:
        raise ParseError(f"header lists {len(names)} signal lines for {n_channels} channels")
    return Header(first[0], n_channels, n_samples, names, fs)


def load_record(record_dir, record: str) -> EcgRecording:
    """Read ``<record>.hea`` and ``<record>.dat`` from ``record_dir``."""
    base = Path(record_dir) / record
    hdr = parse_header(base.with_suffix(".hea").read_text())
    data = base.with_suffix(".dat").read_bytes()
    samples = read_wfdb_212(data, hdr.n_channels, hdr.n_samples or None)
    channels = {name: samples[i].astype(np.float64) for i, name in enumerate(hdr.channel_names)}
    return EcgRecording(record, channels, hdr.sampling_rate)


def read_annotation_csv(path) -> list[BeatAnnotation]:
    """Rows ``sample,symbol`` (header optional), returned sorted by sample."""
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if len(row) < 2:
                raise ParseError(f"{path}:{lineno}: expected 'sample,symbol', got {row!r}")
            sample, symbol = row[0].strip(), row[1].strip()
            if lineno == 1 and not sample.lstrip("-").isdigit():
                continue  # header
            try:
                idx = int(sample)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad sample index {sample!r}") from exc
            if symbol not in BEAT_CLASSES:
                raise ParseError(f"{path}:{lineno}: unknown beat symbol {symbol!r}")
            out.append(BeatAnnotation(idx, symbol))
    return sorted(out, key=lambda a: a.sample_index)


# ------------------------------------------------------------------ signal


def detrend_poly(x: np.ndarray, order: int = 6) -> np.ndarray:
    """Subtract the least-squares polynomial of ``order`` (time mapped to [-1, 1])."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) <= order:
        raise ContractError(f"detrend needs a 1-D signal longer than order {order}, got {x.shape}")
    t = np.linspace(-1.0, 1.0, len(x))
    fit = Polynomial.fit(t, x, order, domain=[-1.0, 1.0], window=[-1.0, 1.0])
    return x - fit(t)


def butterworth_sos(low: float = 5.0, high: float = 15.0, order: int = 6, fs: float = SAMPLING_RATE) -> np.ndarray:
    """Second-order sections of a digital Butterworth bandpass.

    ``order`` is the order of the lowpass prototype; the bandpass has twice
    as many poles.  Band edges are prewarped, so the gain at ``low`` and
    ``high`` is exactly -3 dB.
    """
    if not 0.0 < low < high < fs / 2.0:
        raise ContractError(f"need 0 < low < high < fs/2, got low={low}, high={high}, fs={fs}")
    if order < 1:
        raise ContractError("order must be >= 1")
    return sps.butter(order, [low, high], btype="bandpass", fs=fs, output="sos")


def butterworth_bandpass(
    x: np.ndarray,
    low: float = 5.0,
    high: float = 15.0,
    order: int = 6,
    fs: float = SAMPLING_RATE,
    zero_phase: bool = False,
) -> np.ndarray:
    sos = butterworth_sos(low, high, order, fs)
    x = np.asarray(x, dtype=np.float64)
    return sps.sosfiltfilt(sos, x) if zero_phase else sps.sosfilt(sos, x)


def zscore(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sd = x.std()
    if not sd > 0.0:
        raise ContractError("zscore of a constant signal")
    return (x - x.mean()) / sd


@dataclass(frozen=True)
class PipelineConfig:
    detrend_order: int = 6
    low: float = 5.0
    high: float = 15.0
    filter_order: int = 6
    zero_phase: bool = False
    window: int = 360
    offset: int | None = None  # samples before the R-peak; default window // 2
    channel: str = "MLII"


def preprocess(x: np.ndarray, cfg: PipelineConfig = PipelineConfig(), fs: float = SAMPLING_RATE) -> np.ndarray:
    """Detrend, bandpass and z-score one channel."""
    y = detrend_poly(x, cfg.detrend_order)
    y = butterworth_bandpass(y, cfg.low, cfg.high, cfg.filter_order, fs, cfg.zero_phase)
    return zscore(y)


def extract_beats(
    x: np.ndarray, annotations: Iterable[BeatAnnotation], window: int = 360, offset: int | None = None
) -> list[tuple[np.ndarray, str]]:
    """Windows around each R-peak; out-of-bounds and unknown-class beats are dropped."""
    if window < 2 or window % 2:
        raise ContractError("window must be a positive even number")
    before = window // 2 if offset is None else offset
    out, dropped = [], 0
    for ann in annotations:
        if ann.symbol == "Q":
            continue
        start = ann.sample_index - before
        if start < 0 or start + window > len(x):
            dropped += 1
            continue
        out.append((np.asarray(x[start:start + window], dtype=np.float64), ann.symbol))
    if dropped:
        log.info("dropped %d beats whose window leaves the recording", dropped)
    return out


def beats_to_units(
    beats: Sequence[tuple[np.ndarray, str]], N: int, stride: int | None = None, subject: str = ""
) -> list[BeatUnit]:
    """Stack ``N`` consecutive beats per unit; abnormal if any member is V, S or F."""
    stride = N if stride is None else stride
    if N < 1 or stride < 1:
        raise ContractError("N and stride must be >= 1")
    units = []
    for s in range(0, len(beats) - N + 1, stride):
        group = beats[s:s + N]
        label = int(any(sym in ABNORMAL for _, sym in group))
        units.append(BeatUnit(np.stack([b for b, _ in group]), label, subject, s))
    return units


def split_by_subject(units: Sequence[BeatUnit], test_fraction: float = 0.2, seed: int = 0):
    """Subject-disjoint split; ``round(test_fraction * n_subjects)`` test subjects (at least one)."""
    subjects = sorted({u.subject for u in units})
    if len(subjects) < 2:
        raise ContractError(f"need at least 2 subjects to split, got {len(subjects)}")
    n_test = min(max(int(round(test_fraction * len(subjects))), 1), len(subjects) - 1)
    rng = np.random.default_rng(seed)
    test = {subjects[i] for i in rng.choice(len(subjects), size=n_test, replace=False)}
    return [u for u in units if u.subject not in test], [u for u in units if u.subject in test]


def record_units(
    rec: EcgRecording, annotations: Sequence[BeatAnnotation], N: int, stride: int | None = None,
    cfg: PipelineConfig = PipelineConfig(),
) -> list[BeatUnit]:
    if cfg.channel not in rec.channels:
        raise ContractError(f"record {rec.subject} has no channel {cfg.channel!r}; has {sorted(rec.channels)}")
    x = preprocess(rec.channels[cfg.channel], cfg, rec.sampling_rate)
    beats = extract_beats(x, annotations, cfg.window, cfg.offset)
    return beats_to_units(beats, N, stride, rec.subject)


def read_manifest(path) -> list[str]:
    """Record ids, one per line; blank lines and ``#`` comments ignored."""
    ids = []
    for ln in Path(path).read_text().splitlines():
        ln = ln.split("#", 1)[0].strip()
        if ln:
            ids.append(ln)
    return ids


def prepare_records(
    record_dir, manifest: Sequence[str], annotation_dir, N: int, stride: int | None = None,
    cfg: PipelineConfig = PipelineConfig(),
) -> tuple[list[BeatUnit], list[str]]:
    """Units for every manifest record in id order, plus the ids that were missing."""
    units, missing = [], []
    for rid in sorted(manifest):
        hea = os.path.join(record_dir, rid + ".hea")
        ann = os.path.join(annotation_dir, rid + ".csv")
        if not (os.path.exists(hea) and os.path.exists(ann)):
            log.warning("record %s: missing header/data or annotations; skipped", rid)
            missing.append(rid)
            continue
        rec = load_record(record_dir, rid)
        got = record_units(rec, read_annotation_csv(ann), N, stride, cfg)
        log.info("record %s: %d units (%d abnormal)", rid, len(got), sum(u.label for u in got))
        units.extend(got)
    return units, missing
