"""Command-line entry point: gen-synthetic, train, score, eval, explain.

Every subcommand reads an optional JSON config file; explicit flags override
it and built-in defaults fill the rest. Exit codes: 0 success, 2 usage or
configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DatasetContainer, FormatError, ManifestError, SyntheticSpec, generate_synthetic
from .evaluation import CAPRI_KS, SUCCESS_KS, UndefinedMetricError, evaluate
from .explain import export_overlay, explain_sample, write_relevance_csv
from .model import CHANNELS, GROUP_NAMES, config_from_dict, config_to_dict, init_params, score
from .training import AdamW, ComplexBatchSampler, LossWeights, fit
from .vim import ConfigError

log = logging.getLogger("pumba")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3

DEFAULTS: dict = {
    "seed": 0,
    "model": config_to_dict(config_from_dict({})),
    "loss": asdict(LossWeights()),
    "optim": {"lr": 1e-4, "weight_decay": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "train": {"steps": 400, "complexes_per_batch": 2, "decoys_per_complex": 7, "augment": True,
              "held_out_complexes": 0, "log_every": 50},
    "synthetic": {k: v for k, v in asdict(SyntheticSpec()).items() if k != "seed"},
    "eval": {"threshold": 0.5, "k_list": list(SUCCESS_KS), "capri_k_list": list(CAPRI_KS),
             "held_out_only": False},
    "explain": {"format": "P6", "complex_id": None, "model_id": None},
}


class DataError(Exception):
    pass


# ---------------------------------------------------------------- configuration

def merge(base: dict, over: dict, path: str = "") -> dict:
    """Recursive merge; keys absent from ``base`` are configuration errors."""
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown configuration key '{where}'")
        if isinstance(base[k], dict) and k != "groups":
            if not isinstance(v, dict):
                raise ConfigError(f"configuration key '{where}' must be an object")
            out[k] = merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


def parse_k_list(text: str) -> list[int]:
    try:
        ks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--k-list expects comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("--k-list values must be positive")
    return ks


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults <- config file <- flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        cfg = merge(cfg, file_cfg)
    flags: dict = {}
    if args.seed is not None:
        flags["seed"] = args.seed
    for attr, section, key in FLAG_TARGETS:
        val = getattr(args, attr, None)
        if val is not None:
            flags.setdefault(section, {})[key] = val
    return merge(cfg, flags)


FLAG_TARGETS = [
    ("threshold", "eval", "threshold"),
    ("k_list", "eval", "k_list"),
    ("held_out_only", "eval", "held_out_only"),
    ("steps", "train", "steps"),
    ("held_out_complexes", "train", "held_out_complexes"),
    ("strength", "synthetic", "strength"),
    ("complexes", "synthetic", "complexes"),
    ("decoys", "synthetic", "decoys_per_complex"),
    ("complex_id", "explain", "complex_id"),
    ("model_id", "explain", "model_id"),
    ("format", "explain", "format"),
]


def thread_count() -> int:
    raw = os.environ.get("PUMBA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"PUMBA_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"PUMBA_THREADS must be >= 1, got {n}")
    return n


# ---------------------------------------------------------------- helpers

def open_container(path):
    if path is None:
        raise ConfigError("--data is required")
    try:
        container = DatasetContainer.open(path)
    except FileNotFoundError as exc:
        raise DataError(f"no container at {path}: {exc}") from None
    if len(container) == 0:
        raise DataError(f"container {path} holds no samples")
    return container


def out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def score_arrays(images, energies, params, cfg, chunk: int = 32) -> np.ndarray:
    """Batched inference, spread over PUMBA_THREADS workers."""
    starts = list(range(0, len(images), chunk))

    def run(i):
        return score(images[i:i + chunk], energies[i:i + chunk], params, cfg).score.data

    workers = min(thread_count(), max(len(starts), 1))
    if workers == 1:
        parts = [run(i) for i in starts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    return np.concatenate(parts).astype(np.float64)


def held_out_ids(complex_ids: list[str], n: int) -> list[str]:
    ordered = sorted(dict.fromkeys(complex_ids))
    if n >= len(ordered) and n > 0:
        raise ConfigError(f"cannot hold out {n} of {len(ordered)} complexes")
    return ordered[len(ordered) - n:] if n else []


# ---------------------------------------------------------------- subcommands

def cmd_gen_synthetic(args, cfg) -> int:
    spec = SyntheticSpec(seed=cfg["seed"], **cfg["synthetic"])
    root = out_dir(args)
    container = generate_synthetic(spec, root)
    print(f"wrote {len(container)} samples to {root}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    model_cfg = config_from_dict(cfg["model"])
    weights = LossWeights(**cfg["loss"])
    tr = cfg["train"]
    data = open_container(args.data).load_all()
    held = held_out_ids(data.complex_ids, tr["held_out_complexes"])
    train_set, _ = data.split_by_complex(held)
    out = out_dir(args)
    ckpt = out / "model.ckpt"
    if args.resume:
        state = load_checkpoint(args.resume)
        params, opt = state.params, state.optimizer
        sampler = ComplexBatchSampler(train_set.labels, train_set.complex_ids, tr["complexes_per_batch"],
                                      tr["decoys_per_complex"], cfg["seed"])
        sampler.set_state(state.extra["sampler_state"])
        steps = tr["steps"] - opt.step_count
    else:
        params = init_params(model_cfg, cfg["seed"])
        opt = AdamW(**cfg["optim"])
        sampler = ComplexBatchSampler(train_set.labels, train_set.complex_ids, tr["complexes_per_batch"],
                                      tr["decoys_per_complex"], cfg["seed"])
        steps = tr["steps"]
    log_path = out / "train_log.csv"
    mode = "a" if args.resume else "w"
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if not args.resume:
            writer.writerow(["step", "total", "bce", "supcon", "rank"])
        fit(train_set, params, model_cfg, max(steps, 0), weights, opt, sampler,
            log_every=tr["log_every"], augment=tr["augment"],
            callback=lambda step, br: writer.writerow(
                [step, f"{br.total:.9g}", f"{br.bce:.9g}", f"{br.supcon:.9g}", f"{br.rank:.9g}"]))
    save_checkpoint(ckpt, params, opt, {"model": config_to_dict(model_cfg), "held_out": held,
                                        "sampler_state": sampler.state(), "config": cfg})
    (out / "config.json").write_text(json.dumps(cfg, indent=1) + "\n")
    print(f"trained {opt.step_count} steps; checkpoint {ckpt}")
    return EXIT_OK


def _load_model(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    state = load_checkpoint(args.checkpoint)
    return state, config_from_dict(state.extra["model"])


def cmd_score(args, cfg) -> int:
    state, model_cfg = _load_model(args)
    data = open_container(args.data).load_all()
    if cfg["eval"]["held_out_only"]:
        data = data.subset([i for i, c in enumerate(data.complex_ids) if c in set(state.extra["held_out"])])
        if len(data) == 0:
            raise DataError("checkpoint records no held-out complexes present in this container")
    scores = score_arrays(data.images, data.energies, state.params, model_cfg)
    path = out_dir(args) / "scores.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["complex_id", "model_id", "score"])
        for c, m, s in zip(data.complex_ids, data.model_ids, scores):
            w.writerow([c, m, repr(float(s))])
    print(f"scored {len(scores)} models -> {path}")
    return EXIT_OK


def read_scores(path) -> dict[tuple[str, str], float]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError:
        raise DataError(f"scores file not found: {path}") from None
    out = {}
    for n, row in enumerate(rows, start=2):
        try:
            key = (row["complex_id"], row["model_id"])
            value = float(row["score"])
        except (KeyError, TypeError, ValueError):
            raise DataError(f"{path}:{n}: expected columns complex_id,model_id,score") from None
        if key in out:
            raise DataError(f"{path}:{n}: duplicate row for {key}")
        out[key] = value
    if not out:
        raise DataError(f"{path}: no scores")
    return out


def cmd_eval(args, cfg) -> int:
    if not args.scores:
        raise ConfigError("--scores is required")
    scores = read_scores(args.scores)
    container = open_container(args.data)
    records = [r for r in container.records if (r.complex_id, r.model_id) in scores]
    if len(records) != len(scores):
        known = {(r.complex_id, r.model_id) for r in container.records}
        stray = sorted(set(scores) - known)[:5]
        raise DataError(f"scores reference models missing from the manifest, e.g. {stray}")
    ev = cfg["eval"]
    try:
        report = evaluate([r.complex_id for r in records], [r.model_id for r in records],
                          [scores[(r.complex_id, r.model_id)] for r in records],
                          [r.label for r in records], [r.capri_category for r in records],
                          ev["threshold"], ev["k_list"], ev["capri_k_list"])
    except UndefinedMetricError as exc:
        raise DataError(str(exc)) from None
    out = out_dir(args)
    (out / "report.txt").write_text(report.to_text())
    (out / "report.csv").write_text(report.to_csv())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_explain(args, cfg) -> int:
    state, model_cfg = _load_model(args)
    container = open_container(args.data)
    ex = cfg["explain"]
    recs = container.records
    if ex["complex_id"] is not None:
        recs = [r for r in recs if r.complex_id == ex["complex_id"]]
    if ex["model_id"] is not None:
        recs = [r for r in recs if r.model_id == ex["model_id"]]
    elif ex["complex_id"] is not None:
        recs = sorted(recs, key=lambda r: -r.label)
    if not recs:
        raise DataError(f"no sample matches complex_id={ex['complex_id']} model_id={ex['model_id']}")
    rec = recs[0]
    sample = container.read_sample(rec)
    result = explain_sample(sample.image, sample.energies, state.params, model_cfg)
    out = out_dir(args)
    stem = f"{rec.complex_id}_{rec.model_id}"
    ext = "ppm" if ex["format"] == "P6" else "pgm"
    for g in GROUP_NAMES:
        for ch in model_cfg.groups.channels[g]:
            name = CHANNELS[ch] if model_cfg.groups.num_channels == len(CHANNELS) else f"ch{ch}"
            export_overlay(result.maps[g], sample.image[ch], out / f"{stem}_{g}_{name}.{ext}", ex["format"])
    write_relevance_csv(out / f"{stem}_relevance.csv", result.maps)
    with open(out / f"{stem}_importance.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "raw", "z"])
        for g, raw, z in zip(result.importance.groups, result.importance.raw, result.importance.z):
            w.writerow([g, f"{raw:.9g}", f"{z:.9g}"])
    print(f"score {result.score:.4f}; top feature group: {result.importance.top()}; outputs in {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON configuration file")
    common.add_argument("--seed", type=int, metavar="U64", help="random seed")
    common.add_argument("--out", metavar="DIR", help="output directory (default: current)")
    common.add_argument("--k-list", type=parse_k_list, metavar="K,K,...", help="top-k cutoffs for success rates")
    common.add_argument("--threshold", type=float, help="score threshold for BA/F1/precision/recall")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    p = argparse.ArgumentParser(prog="pumba", description="Interface-image docking model scorer.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-synthetic", parents=[common], help="write a planted-signal container")
    g.add_argument("--strength", type=float, help="planted-signal strength in [0, 1]")
    g.add_argument("--complexes", type=int, help="number of complexes")
    g.add_argument("--decoys", type=int, help="decoys per complex")

    t = sub.add_parser("train", parents=[common], help="train a model on a container")
    t.add_argument("--data", metavar="DIR", help="dataset container")
    t.add_argument("--steps", type=int, help="total optimizer steps")
    t.add_argument("--held-out-complexes", type=int, help="exclude the last N complexes from training")
    t.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")

    s = sub.add_parser("score", parents=[common], help="score every model in a container")
    s.add_argument("--data", metavar="DIR")
    s.add_argument("--checkpoint", metavar="CKPT")
    s.add_argument("--held-out-only", action="store_const", const=True,
                   help="score only complexes held out during training")

    e = sub.add_parser("eval", parents=[common], help="metrics report from a scores CSV")
    e.add_argument("--scores", metavar="CSV")
    e.add_argument("--data", metavar="DIR")

    x = sub.add_parser("explain", parents=[common], help="attention overlays for one sample")
    x.add_argument("--data", metavar="DIR")
    x.add_argument("--checkpoint", metavar="CKPT")
    x.add_argument("--complex-id")
    x.add_argument("--model-id")
    x.add_argument("--format", choices=["P5", "P6"])
    return p


COMMANDS = {"gen-synthetic": cmd_gen_synthetic, "train": cmd_train, "score": cmd_score,
            "eval": cmd_eval, "explain": cmd_explain}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, TypeError) as exc:
        print(f"pumba {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ManifestError, FormatError, CheckpointError) as exc:
        print(f"pumba {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"pumba {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"pumba {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
