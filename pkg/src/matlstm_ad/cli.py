"""Command-line entry point: ``matlstm-ad <command> ...``.

Commands: ``gen``, ``ecg-prep``, ``train``, ``score``, ``eval``, ``sweep``.
Exit status is 0 on success, 2 for user or input errors and 3 when training
diverges.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import ecgpipe
from . import io as mio
from .config import RunConfig, derive_seed, fingerprint
from .errors import ContractError, NumericalError, ParseError, ShapeError
from .eval import evaluate_scores, run_experiment, sprite_config, sweep_csv, sweep_hidden_sizes, synth_config
from .eval import is_unit_range
from .models import Model, SequenceDataset, model_losses
from .synthgen import gen_moving_sprites, gen_synthetic, noisy_dataset, read_idx_images
from .train import train

log = logging.getLogger("matlstm_ad")

EXIT_OK, EXIT_USER, EXIT_NUMERICAL = 0, 2, 3


class UserError(Exception):
    """A problem with the command's inputs, reported with exit status 2."""


def _config(args) -> RunConfig:
    overrides = list(getattr(args, "set", None) or [])
    return RunConfig.load(getattr(args, "config", None), overrides)


def _summary(ds: SequenceDataset) -> dict:
    labelled = ds.labels >= 0
    n_out = int(np.sum(ds.labels == 1))
    return {
        "n_sequences": len(ds),
        "T": ds.T,
        "frame_shape": list(ds.frame_shape),
        "n_outliers": n_out,
        "n_unlabelled": int(np.sum(~labelled)),
        "outlier_fraction": n_out / max(int(labelled.sum()), 1),
    }


def _print_summary(path, s: dict) -> None:
    r, c = s["frame_shape"]
    print(
        f"wrote {path}: {s['n_sequences']} sequences of {s['T']} x {r}x{c} frames, "
        f"{s['n_outliers']} anomalous ({100 * s['outlier_fraction']:.1f}%)"
    )


# ------------------------------------------------------------------ commands


def cmd_gen(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.with_values(data__seed=args.seed)
    seed = cfg["data.seed"]
    if args.kind == "synth":
        cfg = cfg.with_values(data__kind="synth")
        ds = gen_synthetic(synth_config(cfg, seed))
    else:
        cfg = cfg.with_values(data__kind="sprites")
        glyphs = read_idx_images(cfg["data.glyphs"]) if cfg["data.glyphs"] else None
        ds = gen_moving_sprites(sprite_config(cfg, seed, perm_seed=seed), glyphs).data
    noise = cfg["data.noise"]
    if noise != "none" and not (args.kind == "sprites" and noise == "salt_pepper"):
        ds = noisy_dataset(ds, noise, cfg["data.noise_p"], derive_seed(seed, 3))
    summary = _summary(ds)
    meta = {
        "format": "MSEQ1",
        "source": args.kind,
        "fingerprint": cfg.fingerprint(),
        "data_fingerprint": cfg.data_fingerprint(),
        "config": cfg.namespace("data"),
        "summary": summary,
    }
    mio.write_dataset(args.out, ds, meta)
    _print_summary(args.out, summary)
    return EXIT_OK


def cmd_ecg_prep(args) -> int:
    pcfg = ecgpipe.PipelineConfig(channel=args.channel, zero_phase=args.zero_phase)
    manifest = ecgpipe.read_manifest(args.manifest)
    units, missing = ecgpipe.prepare_records(args.records, manifest, args.annotations, args.N, args.stride, pcfg)
    for rid in missing:
        print(f"missing record {rid}: skipped", file=sys.stderr)
    if not units:
        raise UserError("no units were produced")
    n_abnormal = int(sum(u.label for u in units))
    print(f"{len(units)} units: {len(units) - n_abnormal} normal / {n_abnormal} abnormal")
    frames = np.stack([u.matrix for u in units])
    ds = _units_to_sequences(units, frames, args.context)
    settings = {
        "N": args.N, "stride": args.stride or args.N, "context": args.context,
        "pipeline": {k: getattr(pcfg, k) for k in pcfg.__dataclass_fields__},
    }
    meta = {
        "format": "MSEQ1",
        "source": "ecg",
        "data_fingerprint": fingerprint({"ecg": settings}),
        "fingerprint": fingerprint({"ecg": settings, "records": sorted(set(manifest) - set(missing))}),
        "config": settings,
        "units": {"normal": len(units) - n_abnormal, "abnormal": n_abnormal},
        "summary": _summary(ds),
    }
    mio.write_dataset(args.out, ds, meta, dtype=mio.DTYPE_F32)
    _print_summary(args.out, meta["summary"])
    return EXIT_OK


def _units_to_sequences(units, frames: np.ndarray, context: int) -> SequenceDataset:
    """Sliding windows of ``context + 1`` consecutive units of one subject.

    Each window is labelled by its last unit, the one a predictor with
    ``context`` past units is scored on.  ``context=0`` stores every unit as
    a one-step sequence.
    """
    if context < 0:
        raise UserError("--context must be >= 0")
    out, labels, ids = [], [], []
    by_subject: dict[str, list[int]] = {}
    for i, u in enumerate(units):
        by_subject.setdefault(u.subject, []).append(i)
    for subject in sorted(by_subject):
        idx = by_subject[subject]
        for s in range(0, len(idx) - context):
            sel = idx[s:s + context + 1]
            out.append(frames[sel])
            labels.append(units[sel[-1]].label)
            ids.append(f"{subject}:{units[sel[-1]].start_beat}")
    if not out:
        raise UserError(f"no subject has the {context + 1} units one sequence needs")
    return SequenceDataset(np.stack(out), np.array(labels, dtype=np.int8), ids)


def _load_data(path) -> tuple[SequenceDataset, dict]:
    if not Path(path).exists():
        raise UserError(f"data file {path} does not exist")
    return mio.read_dataset(path)


def _check_compatible(model: Model, ds: SequenceDataset, model_meta: dict, data_meta: dict, force: bool) -> None:
    want = tuple(model.spec.input_shape)
    have = tuple(ds.frame_shape)
    if want[0] != have[0]:
        raise UserError(f"data.n_r mismatch: model expects {want[0]} rows, data has {have[0]}")
    if want[1] != have[1]:
        raise UserError(f"data.n_c mismatch: model expects {want[1]} columns, data has {have[1]}")
    mf, df = model_meta.get("data_fingerprint"), data_meta.get("data_fingerprint")
    if mf and df and mf != df and not force:
        raise UserError(
            f"fingerprint mismatch: model trained on data {mf}, this data is {df} (use --force to override)"
        )


def cmd_train(args) -> int:
    cfg = _config(args)
    ds, meta = _load_data(args.data)
    spec = cfg.model_spec(ds.frame_shape, binary=is_unit_range(ds.frames))
    model, hist = train(spec, ds, cfg.train_config(args.seed))
    hists = hist if isinstance(hist, list) else [hist]
    mmeta = {
        "fingerprint": cfg.fingerprint(),
        "data_fingerprint": meta.get("data_fingerprint", ""),
        "seed": args.seed,
        "config": cfg.to_dict(),
        "history": [{"best_epoch": h.best_epoch, "best_val_loss": h.best_val_loss, "epochs": len(h.records)}
                    for h in hists],
    }
    mio.save_model(args.out, model, mmeta)
    best = ", ".join(f"{h['best_val_loss']:.6f}@{h['best_epoch']}" for h in mmeta["history"])
    print(f"wrote {args.out}: {model.n_params} parameters, best validation loss {best}")
    return EXIT_OK


def _scores_for(args) -> tuple[Model, SequenceDataset, np.ndarray]:
    if not Path(args.model).exists():
        raise UserError(f"model file {args.model} does not exist")
    model, mmeta = mio.load_model(args.model)
    ds, dmeta = _load_data(args.data)
    _check_compatible(model, ds, mmeta, dmeta, args.force)
    return model, ds, model_losses(model, ds.frames)


def cmd_score(args) -> int:
    _, ds, scores = _scores_for(args)
    mio.atomic_write(args.out, mio.scores_csv(ds.ids, scores, ds.labels))
    print(f"wrote {args.out}: {len(scores)} scores")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.scores:
        _, scores, labels = mio.read_scores_csv(args.scores)
        report = evaluate_scores(scores, labels, 0, 0)
        doc = report.to_dict()
        print(f"AUC {100 * report.auc:.1f} ± 0.0, F1 {100 * report.f1:.1f} ± 0.0 (threshold {report.threshold:.6g})")
    elif args.model:
        if not args.data:
            raise UserError("--model needs --data")
        model, ds, scores = _scores_for(args)
        report = evaluate_scores(scores, ds.labels, model.n_params, 0)
        doc = report.to_dict()
        print(f"AUC {100 * report.auc:.1f} ± 0.0, F1 {100 * report.f1:.1f} ± 0.0, {model.n_params} params")
    else:
        cfg = _config(args)
        seeds = [args.seed] if args.seed is not None else None
        agg = run_experiment(cfg, seeds, args.artifacts)
        doc = agg.to_dict()
        print(agg.summary())
        for f in agg.failures:
            print(f"seed {f['seed']} failed: {f['error']}", file=sys.stderr)
    if args.out:
        mio.atomic_write(args.out, mio.dump_json(doc))
    return EXIT_OK


def _parse_grid(text: str) -> list[list[int]]:
    grid = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            grid.append([int(v) for v in item.lower().split("x")])
        except ValueError as exc:
            raise UserError(f"bad grid entry {item!r}; use e.g. 10x20,10x50 (or 64,128 for vector cells)") from exc
    if not grid:
        raise UserError("empty --grid")
    return grid


def cmd_sweep(args) -> int:
    cfg = _config(args)
    grid = _parse_grid(args.grid)
    seeds = [args.seed] if args.seed is not None else None
    results = sweep_hidden_sizes(cfg, grid, seeds, args.artifacts)
    text = sweep_csv(results)
    mio.atomic_write(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="matlstm-ad", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="flat JSON config document")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("kind", choices=("synth", "sprites"))
    with_config(g)
    g.add_argument("--seed", type=int, help="data seed (overrides data.seed)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("ecg-prep", help="preprocess WFDB records into beat units")
    e.add_argument("--records", required=True, help="directory with <id>.hea/<id>.dat")
    e.add_argument("--manifest", required=True, help="record ids, one per line")
    e.add_argument("--annotations", required=True, help="directory with <id>.csv (sample,symbol)")
    e.add_argument("--N", type=int, default=5, help="beats per unit")
    e.add_argument("--stride", type=int, default=None, help="beats between unit starts (default N)")
    e.add_argument("--context", type=int, default=9,
                   help="past units per sequence; each sequence holds context + 1 units (0: one unit each)")
    e.add_argument("--channel", default="MLII")
    e.add_argument("--zero-phase", action="store_true", help="forward-backward filtering")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_ecg_prep)

    t = sub.add_parser("train", help="train a model on an MSEQ file")
    with_config(t)
    t.add_argument("--data", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="write per-sequence anomaly scores")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true", help="ignore fingerprint mismatches")
    s.set_defaults(func=cmd_score)

    v = sub.add_parser("eval", help="AUC/F1 of a scores file, a model, or a full multi-seed experiment")
    with_config(v)
    v.add_argument("--scores", help="scores CSV to evaluate")
    v.add_argument("--model")
    v.add_argument("--data")
    v.add_argument("--seed", type=int, help="run a single seed instead of eval.seeds")
    v.add_argument("--force", action="store_true", help="ignore fingerprint mismatches")
    v.add_argument("--artifacts", help="directory for per-seed scores, reports and models")
    v.add_argument("--out", help="write the report as JSON")
    v.set_defaults(func=cmd_eval)

    w = sub.add_parser("sweep", help="AUC against parameter count over hidden sizes")
    with_config(w)
    w.add_argument("--grid", required=True, help="hidden sizes, e.g. 10x10,10x20,10x50")
    w.add_argument("--seed", type=int)
    w.add_argument("--artifacts")
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UserError, ContractError, ShapeError, ParseError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
