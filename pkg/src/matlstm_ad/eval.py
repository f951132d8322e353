"""Metrics, multi-seed experiments and parameter-budget sweeps."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import io as mio
from .config import RunConfig, derive_seed
from .errors import ContractError
from .models import Model, SequenceDataset, model_losses
from .synthgen import SpriteConfig, SynthConfig, gen_moving_sprites, gen_synthetic, noisy_dataset, read_idx_images
from .train import train

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ metrics


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ContractError(f"{s.size} scores for {y.size} labels")
    if not np.all(np.isin(y, (0, 1))):
        raise ContractError("labels must be 0 or 1")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise ContractError("need at least one positive and one negative example")
    if not np.all(np.isfinite(s)):
        raise ContractError("scores must be finite")
    return s, y.astype(bool)


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative; ties count one half.

    Computed from midranks: ``(R_pos - n_pos (n_pos + 1) / 2) / (n_pos n_neg)``.
    """
    s, y = _check_binary(scores, labels)
    ranks = rankdata(s)  # average ranks for ties
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def best_f1(scores, labels) -> tuple[float, float]:
    """Best F1 over thresholds at each distinct score (anomalous iff ``score >= t``).

    Ties in F1 go to the lowest threshold.
    """
    s, y = _check_binary(scores, labels)
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    # a threshold at a distinct value includes every entry with that value
    last = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tp, fp, thr = tp[last], fp[last], s_sorted[last]
    fn = y.sum() - tp
    f1 = 2.0 * tp / (2.0 * tp + fp + fn)
    best = f1.max()
    # thresholds run high to low, so the last maximiser is the lowest threshold
    i = np.flatnonzero(f1 == best)[-1]
    return float(best), float(thr[i])


def f1_at(scores, labels, threshold: float) -> float:
    s, y = _check_binary(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    denom = 2 * tp + int(np.sum(pred & ~y)) + int(np.sum(~pred & y))
    return 2.0 * tp / denom if denom else 0.0


@dataclass
class MetricReport:
    auc: float
    f1: float
    threshold: float
    n_pos: int
    n_neg: int
    param_count: int
    seed: int
    f1_mode: str = "eval"

    def __post_init__(self):
        for name in ("auc", "f1"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


METRICS = ("auc", "f1")


@dataclass
class AggregateReport:
    mean: dict[str, float]
    std: dict[str, float]
    fingerprint: str
    seeds: list[int]
    runs: list[MetricReport] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def partial(self) -> bool:
        return bool(self.failures)

    @property
    def param_count(self) -> int:
        return self.runs[0].param_count if self.runs else 0

    @classmethod
    def from_runs(cls, runs: Sequence[MetricReport], fingerprint: str, failures=(), config=None) -> "AggregateReport":
        if not runs:
            raise ContractError("an aggregate needs at least one successful run")
        runs = sorted(runs, key=lambda r: r.seed)
        mean, std = {}, {}
        for m in METRICS:
            vals = np.array([getattr(r, m) for r in runs])
            mean[m] = float(vals.mean())
            std[m] = float(vals.std())  # population formula over the seed set
        return cls(mean, std, fingerprint, [r.seed for r in runs], list(runs), list(failures), dict(config or {}))

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "fingerprint": self.fingerprint,
            "seeds": self.seeds,
            "partial": self.partial,
            "param_count": self.param_count,
            "runs": [r.to_dict() for r in self.runs],
            "failures": self.failures,
            "config": self.config,
        }

    def summary(self) -> str:
        parts = [f"{m.upper()} {100 * self.mean[m]:.1f} ± {100 * self.std[m]:.1f}" for m in METRICS]
        tail = f" (partial: {len(self.failures)} failed)" if self.partial else ""
        return f"{', '.join(parts)} over seeds {self.seeds}, {self.param_count} params{tail}"


def evaluate_scores(
    scores, labels, param_count: int, seed: int, val_scores=None, val_labels=None
) -> MetricReport:
    """Metrics on labelled entries; the F1 threshold comes from validation scores when given."""
    scores, labels = np.asarray(scores), np.asarray(labels)
    keep = labels >= 0
    s, y = scores[keep], labels[keep]
    auc = roc_auc(s, y)
    if val_scores is not None:
        vs, vl = np.asarray(val_scores), np.asarray(val_labels)
        vk = vl >= 0
        _, thr = best_f1(vs[vk], vl[vk])
        f1, mode = f1_at(s, y, thr), "validation"
    else:
        f1, thr = best_f1(s, y)
        mode = "eval"
    return MetricReport(auc, f1, thr, int(y.sum()), int((y == 0).sum()), int(param_count), int(seed), mode)


# ------------------------------------------------------------------ experiments


def make_datasets(cfg: RunConfig, seed: int) -> tuple[SequenceDataset, SequenceDataset]:
    """Train and test sets for one run; generated sets are redrawn per seed."""
    kind = cfg["data.kind"]
    if kind == "file":
        train_ds, _ = mio.read_dataset(cfg["data.train_path"])
        test_ds, _ = mio.read_dataset(cfg["data.test_path"] or cfg["data.train_path"])
        return train_ds, test_ds
    base = cfg["data.seed"]
    seeds = (derive_seed(base, seed, 0), derive_seed(base, seed, 1))
    if kind == "synth":
        sets = [gen_synthetic(synth_config(cfg, s)) for s in seeds]
    else:
        glyphs = read_idx_images(cfg["data.glyphs"]) if cfg["data.glyphs"] else None
        perm_seed = derive_seed(base, seed, 2)
        sets = [gen_moving_sprites(sprite_config(cfg, s, perm_seed), glyphs).data for s in seeds]
    noise = cfg["data.noise"]
    if noise != "none" and not (kind == "sprites" and noise == "salt_pepper"):
        sets = [noisy_dataset(ds, noise, cfg["data.noise_p"], derive_seed(s, 3)) for ds, s in zip(sets, seeds)]
    return sets[0], sets[1]


def synth_config(cfg: RunConfig, seed: int) -> SynthConfig:
    return SynthConfig(
        n_r=cfg["data.n_r"], n_c=cfg["data.n_c"], T=cfg["data.T"], n_sequences=cfg["data.n_sequences"],
        outlier_ratio=cfg["data.outlier_ratio"], shift_min=cfg["data.shift_min"], shift_max=cfg["data.shift_max"],
        fixed_shift=cfg["data.fixed_shift"], fixed_permutation=cfg["data.fixed_permutation"], seed=seed,
    )


def sprite_config(cfg: RunConfig, seed: int, perm_seed: int | None = None) -> SpriteConfig:
    return SpriteConfig(
        canvas=tuple(cfg["data.canvas"]), sprite_size=cfg["data.sprite_size"], T=cfg["data.T"],
        n_sequences=cfg["data.n_sequences"], outlier_ratio=cfg["data.outlier_ratio"], speed=cfg["data.speed"],
        curvature=cfg["data.curvature"], trajectory_jitter=cfg["data.jitter"], permute=cfg["data.permute"],
        permutation_scope=cfg["data.permutation_scope"],
        noise="salt_pepper" if cfg["data.noise"] == "salt_pepper" else "none",
        noise_p=cfg["data.noise_p"], seed=seed, perm_seed=perm_seed,
    )


def is_unit_range(frames: np.ndarray) -> bool:
    return bool(np.all((frames >= 0.0) & (frames <= 1.0)))


def run_seed(cfg: RunConfig, seed: int, out_dir=None) -> tuple[MetricReport, Model, np.ndarray]:
    train_ds, test_ds = make_datasets(cfg, seed)
    if train_ds.frame_shape != test_ds.frame_shape or train_ds.T != test_ds.T:
        raise ContractError(
            f"train frames {train_ds.frame_shape}x{train_ds.T} differ from test {test_ds.frame_shape}x{test_ds.T}"
        )
    spec = cfg.model_spec(train_ds.frame_shape, binary=is_unit_range(train_ds.frames))
    model, _ = train(spec, train_ds, cfg.train_config(seed))
    scores = model_losses(model, test_ds.frames)
    val = None
    if cfg["eval.f1_threshold"] == "validation":
        val = (model_losses(model, train_ds.frames), train_ds.labels)
    report = evaluate_scores(scores, test_ds.labels, model.n_params, seed, *(val or (None, None)))
    if out_dir is not None:
        d = Path(out_dir) / f"seed{seed}"
        mio.atomic_write(d / "scores.csv", mio.scores_csv(test_ds.ids, scores, test_ds.labels))
        mio.atomic_write(d / "report.json", mio.dump_json(report.to_dict()))
        mio.save_model(d / "model.bin", model, {"fingerprint": cfg.fingerprint(),
                                                "data_fingerprint": cfg.data_fingerprint(), "seed": seed})
    return report, model, scores


def run_experiment(cfg: RunConfig, seeds: Sequence[int] | None = None, out_dir=None) -> AggregateReport:
    """Train, score and evaluate once per seed; failed seeds make the report partial."""
    seeds = list(cfg["eval.seeds"] if seeds is None else seeds)
    runs, failures = [], []
    for seed in seeds:
        try:
            report, _, _ = run_seed(cfg, seed, out_dir)
            runs.append(report)
            log.info("seed %d: AUC %.4f F1 %.4f", seed, report.auc, report.f1)
        except Exception as exc:  # recorded, the remaining seeds still run
            log.warning("seed %d failed: %s", seed, exc)
            failures.append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})
    if not runs:
        raise RuntimeError(f"every seed failed: {failures}")
    agg = AggregateReport.from_runs(runs, cfg.fingerprint(), failures, cfg.to_dict())
    if out_dir is not None:
        mio.atomic_write(Path(out_dir) / "report.json", mio.dump_json(agg.to_dict()))
    return agg


def sweep_hidden_sizes(
    cfg: RunConfig, grid: Sequence[Sequence[int]], seeds: Sequence[int] | None = None, out_dir=None
) -> list[tuple[int, AggregateReport]]:
    """One experiment per hidden size, ordered by parameter count."""
    if not grid:
        raise ContractError("hidden-size grid is empty")
    results = []
    for hidden in grid:
        point = cfg.with_values(model__hidden=list(hidden))
        sub = None if out_dir is None else Path(out_dir) / ("h" + "x".join(str(h) for h in hidden))
        agg = run_experiment(point, seeds, sub)
        results.append((agg.param_count, agg))
    results.sort(key=lambda r: r[0])
    return results


SWEEP_HEADER = ["param_count", "auc_mean", "auc_std", "f1_mean", "f1_std"]


def sweep_csv(results: Sequence[tuple[int, AggregateReport]]) -> str:
    table = mio.Table(list(SWEEP_HEADER))
    for count, agg in results:
        table.rows.append([count, agg.mean["auc"], agg.std["auc"], agg.mean["f1"], agg.std["f1"]])
    return table.to_csv()

