"""Command line: ``jointcodes generate|train|eval|modify``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as A
from . import data as D
from . import training as T
from .models import load_checkpoint, save_checkpoint

log = logging.getLogger("jointcodes")

SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
METRIC_NAMES = (
    "val_rec",
    "retrieval_top1",
    "alignment",
    "probe_appearance_on_z_a",
    "probe_appearance_on_z_s",
    "probe_structure_on_z_a",
    "probe_structure_on_z_s",
)


class UsageError(Exception):
    """Bad input reported to the user with exit code 2."""


# ---------------------------------------------------------------------------
# config handling


def _type_name(t) -> str:
    return {int: "integer", float: "number", bool: "boolean", str: "string"}[t]


def parse_config(raw: dict, source: str = "config") -> T.TrainConfig:
    """Validate a flat JSON config dict; errors name the offending key path."""
    if not isinstance(raw, dict):
        raise UsageError(f"{source}: top level must be a JSON object")
    types = {f.name: f.type for f in fields(T.TrainConfig)}
    problems = []
    for key, value in raw.items():
        path = f"{source}.{key}"
        if key == "preset":
            if value not in T.PRESETS:
                problems.append(f"{path}: must be one of {sorted(T.PRESETS)}, got {value!r}")
            continue
        if key not in types:
            problems.append(f"{path}: unknown key")
            continue
        want = {"int": int, "float": float, "bool": bool, "str": str}[types[key]]
        ok = isinstance(value, want) and not (want is int and isinstance(value, bool))
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            ok = True
        if not ok:
            problems.append(f"{path}: expected {_type_name(want)}, got {type(value).__name__} {value!r}")
    if problems:
        raise UsageError("invalid config:\n  " + "\n  ".join(problems))
    cleaned = {k: (float(v) if types.get(k) == "float" else v) for k, v in raw.items()}
    try:
        return T.TrainConfig.from_dict(cleaned)
    except ValueError as exc:
        raise UsageError(f"{source}: {exc}") from exc


def load_samples(path) -> list:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"dataset not found: {path}")
    if path.is_dir():
        return D.load_tsr_pairs(path)
    return D.load_dataset(path)


def split_arrays(samples, seed: int):
    parts = D.split(samples, SPLIT_FRACTIONS, seed)
    if any(len(p) == 0 for p in parts):
        raise UsageError(f"dataset of {len(samples)} samples is too small for an 80/10/10 split")
    return [D.to_arrays(p) for p in parts]


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    if args.n < args.palettes * args.layouts:
        log.warning("n=%d is below palettes*layouts=%d: some classes will be missing", args.n, args.palettes * args.layouts)
    if args.palettes < 2 or args.layouts < 2 or args.size < 16:
        raise UsageError("need --palettes >= 2, --layouts >= 2 and --size >= 16")
    samples = D.generate_dataset(args.n, args.palettes, args.layouts, args.size, args.seed)
    D.save_dataset(samples, args.out)
    counts = D.class_balance(samples)
    print(f"wrote {len(samples)} samples to {args.out}")
    print("appearance\\structure " + " ".join(f"{s:>5d}" for s in range(args.layouts)))
    for a in range(args.palettes):
        print(f"{a:>20d} " + " ".join(f"{counts.get((a, s), 0):>5d}" for s in range(args.layouts)))
    return 0


def build_manifest(config: T.TrainConfig, data_path) -> dict:
    """Run manifest with every config default materialized."""
    resolved = config.resolved()
    data_path = Path(data_path)
    return {
        "tool": "jointcodes",
        "version": __version__,
        "config": resolved.to_dict(),
        "seed": resolved.seed,
        "data": str(data_path.resolve()),
        "data_sha256": _sha256(data_path) if data_path.is_file() else None,
        "outputs": {"checkpoint": "model.ckpt", "history": "history.csv"},
        "timings": {},
    }


def run_training(config: T.TrainConfig, data_path, out_dir) -> dict:
    """Train from a config and write checkpoint, history and manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = config.resolved()
    manifest = build_manifest(resolved, data_path)
    _write_json(out / "manifest.json", manifest)

    t0 = time.perf_counter()
    samples = load_samples(data_path)
    train, val, _ = split_arrays(samples, resolved.seed)
    t1 = time.perf_counter()
    result = T.fit(resolved, train, val)
    t2 = time.perf_counter()
    meta = {"config": resolved.to_dict(), "best_epoch": result.best_epoch, "stop_reason": result.stop_reason}
    save_checkpoint(result.params, out / "model.ckpt", meta)
    T.write_history_csv(result.history, out / "history.csv")

    manifest["timings"] = {"load_seconds": round(t1 - t0, 3), "fit_seconds": round(t2 - t1, 3)}
    manifest["result"] = {
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
        "stop_reason": result.stop_reason,
        "checkpoint_sha256": _sha256(out / "model.ckpt"),
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def cmd_train(args) -> int:
    if args.manifest:
        prior = json.loads(Path(args.manifest).read_text())
        config = parse_config(prior["config"], "manifest.config")
        data_path = args.data or prior["data"]
    else:
        if not args.data:
            raise UsageError("--data is required unless --manifest is given")
        raw = json.loads(Path(args.config).read_text()) if args.config else {}
        config = parse_config(raw, "config")
        data_path = args.data
    if args.mode:
        config = parse_config({**config.to_dict(), "mode": args.mode}, "config")
    manifest = run_training(config, data_path, args.out)
    r = manifest["result"]
    print(f"best epoch {r['best_epoch']} of {r['epochs_run']} ({r['stop_reason']}); checkpoint sha256 {r['checkpoint_sha256']}")
    return 0


def _checkpoint_and_split(ckpt_path, data_path):
    params, meta = load_checkpoint(ckpt_path)
    seed = int(meta.get("config", {}).get("seed", 0))
    train, val, _ = split_arrays(load_samples(data_path), seed)
    return params, meta, train, val


def _probe(table, label):
    try:
        return A.linear_probe(table, label)
    except ValueError as exc:
        log.warning("probe on %s skipped: %s", label, exc)
        return None


def evaluate(params, val) -> tuple:
    """The seven metrics plus the embedding tables they came from."""
    baseline = params.config.lookup_rows > 0
    z_s = A.extract_embeddings(params, val, "structure_A")
    z_b = A.extract_embeddings(params, val, "structure_B")
    tables = {"structure_A": z_s, "structure_B": z_b}
    metrics = {"val_rec": T.validation_rec(params, val), "retrieval_top1": A.retrieval_accuracy(z_s, z_b)}
    metrics["probe_appearance_on_z_s"] = _probe(z_s, "appearance")
    metrics["probe_structure_on_z_s"] = _probe(z_s, "structure")
    if baseline:
        # the lookup model has no appearance encoder for unseen images
        metrics.update(alignment=None, probe_appearance_on_z_a=None, probe_structure_on_z_a=None)
    else:
        z_a = A.extract_embeddings(params, val, "appearance")
        tables["appearance"] = z_a
        metrics["alignment"] = A.alignment(z_a, z_s)
        metrics["probe_appearance_on_z_a"] = _probe(z_a, "appearance")
        metrics["probe_structure_on_z_a"] = _probe(z_a, "structure")
    return {k: metrics[k] for k in METRIC_NAMES}, tables


def cmd_eval(args) -> int:
    params, _, _, val = _checkpoint_and_split(args.ckpt, args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics, tables = evaluate(params, val)
    _write_json(out / "metrics.json", metrics)
    for name, table in tables.items():
        coords, frac = A.pca_project(table, 2)
        A.write_embedding_csv(out / f"pca_{name}.csv", table, coords)
        for label in ("appearance", "structure"):
            title = f"{name} PCA colored by {label} class (explained {frac[0]:.2f}, {frac[1]:.2f})"
            (out / f"pca_{name}_{label}.svg").write_text(A.scatter_svg(coords, table.labels(label), title))
    for k, v in metrics.items():
        print(f"{k:>26s}  {'n/a' if v is None else f'{v:.4f}'}")
    return 0


def swap_metrics(params, train, val, source: int, target: int) -> dict:
    """Swap appearance of source-class validation images to the target-class mean.

    Returns the edited images, the plain reconstructions and probe-based rates.
    With ``source == target`` each image keeps its own appearance code.
    """
    if params.config.lookup_rows > 0:
        raise UsageError("modify needs an appearance encoder; baseline-lookup checkpoints have none")
    if not np.any(train.appearance == target):
        raise UsageError(f"target class {target} does not occur in the train split")
    src = np.flatnonzero(val.appearance == source)
    if src.size == 0:
        raise UsageError(f"source class {source} does not occur in the validation split")
    rgb = val.rgb[src]
    train_a = A.extract_embeddings(params, train, "appearance")
    train_s = A.extract_embeddings(params, train, "structure_A")
    own = A.encode_mu(params, "appearance", rgb)
    plain = A.swap_decode(params, rgb, own)
    override = own if source == target else A.mean_appearance(train_a, target)
    edited = A.swap_decode(params, rgb, override)

    app_probe = A.fit_probe(train_a, train_a.appearance)
    struct_probe = A.fit_probe(train_s, train_s.structure)
    flipped = app_probe.predict(A.encode_mu(params, "appearance", edited)) == target
    before = struct_probe.predict(A.encode_mu(params, "structure_A", rgb))
    after = struct_probe.predict(A.encode_mu(params, "structure_A", edited))
    rates = {
        "source_class": int(source),
        "target_class": int(target),
        "n_images": int(src.size),
        "appearance_flip_rate": float(np.mean(flipped)),
        "structure_retention_rate": float(np.mean(before == after)),
    }
    return {"indices": src, "original": rgb, "plain": plain, "edited": edited, "rates": rates}


def cmd_modify(args) -> int:
    params, _, train, val = _checkpoint_and_split(args.ckpt, args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = swap_metrics(params, train, val, args.source_class, args.target_class)
    for k, idx in enumerate(res["indices"]):
        D.write_ppm(out / f"val{idx:04d}_before.ppm", res["original"][k])
        D.write_ppm(out / f"val{idx:04d}_after.ppm", res["edited"][k])
    shown = min(len(res["indices"]), 8)
    grid = D.image_grid(list(res["original"][:shown]) + list(res["edited"][:shown]), ncols=shown)
    D.write_ppm(out / "grid.ppm", grid)
    _write_json(out / "swap_metrics.json", res["rates"])
    print(json.dumps(res["rates"], indent=2))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointcodes", description=__doc__)
    p.add_argument("--version", action="version", version=f"jointcodes {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic MMD1 dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--palettes", type=int, default=4)
    g.add_argument("--layouts", type=int, default=4)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model with early stopping")
    t.add_argument("--data", help="MMD1 file or directory of TSR1 pairs")
    t.add_argument("--config", help="flat JSON config; unknown keys are errors")
    t.add_argument("--mode", choices=T.MODES + tuple(T._MODE_ALIASES))
    t.add_argument("--manifest", help="rerun the exact configuration recorded in a manifest")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="latent-space metrics and PCA plots")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("modify", help="decode validation images with a class-mean appearance code")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--source-class", type=int, required=True)
    m.add_argument("--target-class", type=int, required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_modify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError, KeyError, OSError) as exc:
        print(f"jointcodes {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
