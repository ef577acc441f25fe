"""Command-line entry point.

    laddervat train --variant lvan-lw --labels 50 --seed 1 --desk-scale
    laddervat eval --checkpoint runs/x/checkpoint.npz --test /path/to/mnist
    laddervat attack --checkpoint c.npz --norms l1,l2,linf
    laddervat introspect --checkpoint c.npz --epsilon 5.0
    laddervat matrix --variant ladder,lvan-lw --labels 100 --seed 0,1,2 --desk-scale
    laddervat presets

Every command that touches data writes ``manifest.json`` to its output
directory; ``--config manifest.json`` replays it. Flags override values from
the config file, which override the preset.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

from . import __version__, attack, harness, ladder, variants
from .data import (DataError, Dataset, IdxFormatError, load_idx, load_mnist, make_split,
                   mnist_paths)
from .harness import NumericalError, TrainConfig
from .numerics import RngStream
from .variants import ConfigError, VariantConfig

log = logging.getLogger("laddervat")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST_FORMAT = "laddervat-manifest"
COMMANDS = ("train", "eval", "attack", "introspect", "matrix", "presets")

VARIANT_KEYS = tuple(f.name for f in fields(VariantConfig))
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
RUN_KEYS = ("labels", "desk_scale", "data_dir", "out_dir", "checkpoint", "test", "kinds",
            "label_counts", "seeds")
SLOT_KEYS = tuple(f"{p}{i}" for p in ("epsilon", "lambda") for i in range(3))
KNOWN_KEYS = frozenset(VARIANT_KEYS + TRAIN_KEYS + RUN_KEYS + SLOT_KEYS)


class UsageError(ValueError):
    pass


def default_data_dir() -> str:
    return os.environ.get("LADDERVAT_MNIST", "data/mnist")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _csv(text: str, conv=str) -> list:
    try:
        return [conv(t.strip()) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"bad list value {text!r}: {exc}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="laddervat", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"laddervat {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def common(p, data=True):
        p.add_argument("--config", help="flat JSON config or a run manifest to replay")
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--seed", help="integer seed (comma list for matrix)")
        p.add_argument("-q", "--quiet", action="store_true")
        if data:
            p.add_argument("--data-dir", dest="data_dir",
                           help="directory with MNIST IDX files (default $LADDERVAT_MNIST)")

    def model_flags(p):
        p.add_argument("--variant", help=f"one of {', '.join(variants.KINDS)}")
        p.add_argument("--labels", help="labeled examples: 50, 100 or 1000")
        p.add_argument("--epochs", type=int)
        p.add_argument("--desk-scale", dest="desk_scale", action="store_true", default=None,
                       help="784-256-128-10 encoder, 30 epochs, decay from epoch 20")
        p.add_argument("--eval-every", dest="eval_every", type=int)
        for i in range(3):
            p.add_argument(f"--epsilon{i}", type=float, help=f"VAT radius, slot {i}")
            p.add_argument(f"--lambda{i}", type=float, help=f"denoising weight, slot {i}")
        p.add_argument("--vat-norm", dest="vat_norm", choices=("l2", "linf"))
        p.add_argument("--power-iters", dest="power_iters", type=int)

    def attack_flags(p):
        p.add_argument("--norms", help="comma list of l1, l2, linf")
        for n in attack.ATTACK_NORMS:
            p.add_argument(f"--epsilon-{n}", dest=f"attack_eps_{n}", type=float,
                           help=f"FGM radius for {n} (default {attack.DEFAULT_ATTACK_EPS[n]})")

    def checkpoint_flags(p):
        p.add_argument("--checkpoint", help="checkpoint written by train")
        p.add_argument("--test", help="test IDX images file or MNIST directory")

    p = sub.add_parser("train", help="train one variant")
    common(p)
    model_flags(p)
    attack_flags(p)

    p = sub.add_parser("eval", help="clean test error of a checkpoint")
    common(p)
    checkpoint_flags(p)

    p = sub.add_parser("attack", help="FGM error rates of a checkpoint")
    common(p)
    checkpoint_flags(p)
    attack_flags(p)

    p = sub.add_parser("introspect", help="local smoothness of a checkpoint")
    common(p)
    checkpoint_flags(p)
    p.add_argument("--epsilon", dest="smoothness_eps", type=float, help="radius (default 5.0)")
    p.add_argument("--samples", dest="smoothness_samples", type=int)

    p = sub.add_parser("matrix", help="variants x label counts x seeds, mean +- s.e.")
    common(p)
    model_flags(p)
    attack_flags(p)

    p = sub.add_parser("presets", help="print the hyperparameter presets")
    p.add_argument("--format", choices=("tsv", "json"), default="tsv")
    return parser


# -- configuration -----------------------------------------------------------

def read_config(path) -> tuple[dict, str | None]:
    """Flat key/value JSON or a manifest; returns (values, manifest command)."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config {path}: expected a JSON object")
    command = None
    if doc.get("format") == MANIFEST_FORMAT:
        command = doc.get("command")
        doc = doc["config"]
    unknown = sorted(set(doc) - KNOWN_KEYS)
    if unknown:
        raise UsageError(f"config {path}: unknown keys {unknown}")
    return doc, command


def flag_values(args: argparse.Namespace) -> dict:
    """Command-line values under config-key names (None = not given)."""
    out = {}
    raw = vars(args)
    for key in TRAIN_KEYS + VARIANT_KEYS + RUN_KEYS:
        if raw.get(key) is not None:
            out[key] = raw[key]
    if raw.get("variant") is not None:
        out["kind"] = raw["variant"]
    if raw.get("norms") is not None:
        out["attack_norms"] = _csv(raw["norms"], str.lower)
    for name in ("epsilon", "lambda"):
        for i in range(3):
            if raw.get(f"{name}{i}") is not None:
                out[f"{name}{i}"] = raw[f"{name}{i}"]
    return out


def _slots(values: dict, merged: dict, field: str, prefix: str):
    vals = list(values[field])
    for i in range(3):
        if f"{prefix}{i}" in merged:
            vals[i] = merged[f"{prefix}{i}"]
    values[field] = vals


def resolve(command: str, file_cfg: dict, flags: dict) -> dict:
    """Fully resolved flat configuration for ``command``."""
    merged = {**file_cfg, **flags}
    out = {"data_dir": str(Path(merged.get("data_dir", default_data_dir())).resolve())}
    if command in ("train", "matrix"):
        desk = bool(merged.get("desk_scale", False))
        out["desk_scale"] = desk
        widths = merged.get("widths", variants.DESK_WIDTHS if desk else variants.FULL_WIDTHS)
        if command == "train":
            out["kind"] = variants.canonical_kind(merged.get("kind", "ladder"))
            out["labels"] = _int(merged.get("labels", 100), "labels")
            out["seed"] = _int(merged.get("seed", 0), "seed")
            label_counts = [out["labels"]]
            vc = variants.default_config(out["kind"], out["labels"], widths=widths).to_dict()
            for key in VARIANT_KEYS:
                if key in merged and key != "kind":
                    vc[key] = merged[key]
            _slots(vc, merged, "epsilons", "epsilon")
            _slots(vc, merged, "lambdas", "lambda")
            out.update(VariantConfig.from_dict(vc).to_dict())
        else:
            out["kinds"] = [variants.canonical_kind(k) for k in
                            _listish(merged.get("kinds", merged.get("kind", "ladder")))]
            out["label_counts"] = [_int(v, "labels") for v in
                                   _listish(merged.get("label_counts", merged.get("labels", 100)))]
            out["seeds"] = [_int(v, "seed") for v in
                            _listish(merged.get("seeds", merged.get("seed", 0)))]
            label_counts = out["label_counts"]
            out["widths"] = list(widths)
            for key in ("sigma", "xi", "power_iters", "vat_norm", "alphas"):
                if key in merged:
                    out[key] = merged[key]
            for prefix in ("epsilon", "lambda"):
                for i in range(3):
                    if f"{prefix}{i}" in merged:
                        out[f"{prefix}{i}"] = merged[f"{prefix}{i}"]
        preset = TrainConfig.desk if desk else TrainConfig.full
        tc = preset(label_counts[0]).to_dict()
    else:
        for key in ("checkpoint", "test"):
            if merged.get(key) is not None:
                out[key] = str(Path(merged[key]).resolve())
        if "checkpoint" not in out:
            raise UsageError(f"{command} needs --checkpoint")
        out["seed"] = _int(merged.get("seed", 0), "seed")
        tc = TrainConfig().to_dict()
    for key in TRAIN_KEYS:
        if key in merged and key != "seed":
            tc[key] = merged[key]
    if "seed" in out:
        tc["seed"] = out["seed"]
    if "epochs" in merged and "decay_start" not in merged:
        # keep the decay phase proportionate when only the length changes
        ratio = tc_preset_ratio(command, out)
        tc["decay_start"] = int(round(tc["epochs"] * ratio))
    tc = TrainConfig.from_dict(tc).to_dict()
    if command in ("train", "matrix"):
        out.update(tc)
    else:
        out.update({k: tc[k] for k in ("attack_norms", "attack_eps_l1", "attack_eps_l2",
                                       "attack_eps_linf", "smoothness_eps",
                                       "smoothness_samples")})
    out["out_dir"] = str(Path(merged.get("out_dir") or default_out_dir(command, out)).resolve())
    return out


def tc_preset_ratio(command: str, cfg: dict) -> float:
    if command in ("train", "matrix"):
        base = TrainConfig.desk(100) if cfg.get("desk_scale") else TrainConfig.full(100)
    else:
        base = TrainConfig()
    return base.decay_start / base.epochs


def _int(v, name) -> int:
    try:
        return int(v)
    except (TypeError, ValueError):
        raise UsageError(f"{name} must be an integer, got {v!r}") from None


def _listish(v) -> list:
    if isinstance(v, str):
        return _csv(v)
    if isinstance(v, (list, tuple)):
        return list(v)
    return [v]


def default_out_dir(command: str, cfg: dict) -> str:
    if command == "train":
        return f"runs/{cfg['kind']}-{cfg['labels']}-s{cfg['seed']}"
    if command == "matrix":
        return "runs/matrix"
    return str(Path(cfg["checkpoint"]).parent)


def variant_from(cfg: dict) -> VariantConfig:
    return VariantConfig.from_dict({k: cfg[k] for k in VARIANT_KEYS})


def train_config_from(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict({k: cfg[k] for k in TRAIN_KEYS})


def write_manifest(out_dir: Path, command: str, cfg: dict, inputs: dict, outputs: dict) -> Path:
    doc = {
        "format": MANIFEST_FORMAT,
        "version": __version__,
        "command": command,
        "config": cfg,
        "inputs": {str(p): sha256(p) for p in inputs.values()},
        "outputs": {k: str(v) for k, v in outputs.items()},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# -- data ----------------------------------------------------------------------

def load_train_data(cfg: dict) -> tuple[Dataset, Dataset, dict]:
    paths = mnist_paths(cfg["data_dir"])
    train, test = load_mnist(cfg["data_dir"])
    return train, test, paths


def load_test_data(cfg: dict) -> tuple[Dataset, dict]:
    target = Path(cfg.get("test") or cfg["data_dir"])
    if target.is_dir():
        paths = mnist_paths(target)
        paths = {"test_images": paths["test_images"], "test_labels": paths["test_labels"]}
    else:
        labels = Path(str(target).replace("images-idx3", "labels-idx1"))
        if labels == target or not labels.exists():
            raise DataError(f"no labels file next to {target} (expected *labels-idx1*)")
        paths = {"test_images": target, "test_labels": labels}
    return Dataset(load_idx(paths["test_images"]), load_idx(paths["test_labels"])), paths


def _checkpoint(cfg: dict):
    path = Path(cfg["checkpoint"])
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    params, meta = ladder.load_checkpoint(path)
    return params, meta, path


# -- commands ------------------------------------------------------------------

def cmd_train(cfg: dict) -> dict:
    variant, tconf = variant_from(cfg), train_config_from(cfg)
    train, test, paths = load_train_data(cfg)
    split = make_split(train, test, cfg["labels"], RngStream(tconf.seed).child("split"))
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"metrics": out / "metrics.tsv", "checkpoint": out / "checkpoint.npz",
               "summary": out / "summary.json"}
    write_manifest(out, "train", cfg, paths, outputs)
    res = harness.train(variant, tconf, split, metrics_path=outputs["metrics"],
                        checkpoint_path=outputs["checkpoint"],
                        metadata={"labels": cfg["labels"]})
    summary = res.records[-1].row()
    outputs["summary"].write_text(json.dumps(summary, indent=2) + "\n")
    print(f"{variant.kind} labels={cfg['labels']} seed={tconf.seed}: clean AER "
          f"{summary['clean_aer']:.2f}%  " + "  ".join(
              f"{n} {summary['aer_' + n]:.2f}%" for n in tconf.attack_norms)
          + f"  smoothness {summary['smoothness']:.4f}")
    return summary


def cmd_eval(cfg: dict) -> dict:
    params, meta, ckpt = _checkpoint(cfg)
    test, paths = load_test_data(cfg)
    aer = attack.error_rate(lambda x: ladder.predict_proba(params, x), test.images, test.labels)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    result = {"clean_aer": aer, "n": len(test)}
    (out / "eval.json").write_text(json.dumps(result, indent=2) + "\n")
    write_manifest(out, "eval", cfg, {**paths, "checkpoint": ckpt}, {"eval": out / "eval.json"})
    print(f"clean AER {aer:.2f}% on {len(test)} examples")
    return result


def _run_meta(meta: dict, cfg: dict) -> dict:
    v = meta.get("variant", {})
    t = meta.get("train", {})
    return {"variant": v.get("kind", ""), "labels": meta.get("labels", ""),
            "seed": t.get("seed", cfg.get("seed", ""))}


def cmd_attack(cfg: dict) -> list[dict]:
    params, meta, ckpt = _checkpoint(cfg)
    test, paths = load_test_data(cfg)
    eps = {n: cfg[f"attack_eps_{n}"] for n in attack.ATTACK_NORMS}
    rows = []
    for spec in attack.default_specs(cfg["attack_norms"], eps):
        t0 = time.perf_counter()
        aer = attack.adversarial_error_matrix(params, test.images, test.labels, [spec])
        rows.append({**_run_meta(meta, cfg), "norm": spec.norm, "epsilon": spec.epsilon,
                     "error_rate": aer[spec.norm], "runtime_s": time.perf_counter() - t0})
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"table": out / "attack.tsv", "report": out / "attack.json"}
    attack.write_table(rows, outputs["table"])
    attack.write_report(rows, outputs["report"], {"checkpoint": str(ckpt)})
    write_manifest(out, "attack", cfg, {**paths, "checkpoint": ckpt}, outputs)
    print("\t".join(attack.REPORT_COLUMNS))
    for r in rows:
        print("\t".join(f"{r[c]:.4g}" if isinstance(r[c], float) else str(r[c])
                        for c in attack.REPORT_COLUMNS))
    return rows


def cmd_introspect(cfg: dict) -> dict:
    params, meta, ckpt = _checkpoint(cfg)
    test, paths = load_test_data(cfg)
    x = test.images[:cfg["smoothness_samples"]]
    value = attack.smoothness_metric(params, x, cfg["smoothness_eps"],
                                     rng=RngStream(cfg["seed"]).child("smoothness"))
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    result = {"smoothness": value, "epsilon": cfg["smoothness_eps"], "n": len(x)}
    (out / "introspect.json").write_text(json.dumps(result, indent=2) + "\n")
    write_manifest(out, "introspect", cfg, {**paths, "checkpoint": ckpt},
                   {"introspect": out / "introspect.json"})
    print(f"smoothness {value:.6f} (epsilon {cfg['smoothness_eps']}, {len(x)} examples)")
    return result


def matrix_variant(cfg: dict, kind: str, labels: int) -> VariantConfig:
    vc = variants.default_config(kind, labels, widths=tuple(cfg["widths"])).to_dict()
    for key in ("sigma", "xi", "power_iters", "vat_norm", "alphas"):
        if key in cfg:
            vc[key] = cfg[key]
    _slots(vc, cfg, "epsilons", "epsilon")
    _slots(vc, cfg, "lambdas", "lambda")
    return VariantConfig.from_dict(vc)


def cmd_matrix(cfg: dict) -> list[dict]:
    train, test, paths = load_train_data(cfg)
    tconf = train_config_from(cfg)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"cells": out / "cells.tsv", "aggregate": out / "aggregate.tsv"}
    write_manifest(out, "matrix", cfg, paths, outputs)
    cells, agg = harness.run_matrix(cfg["kinds"], cfg["label_counts"], cfg["seeds"], tconf,
                                    train, test,
                                    variant_factory=lambda k, n: matrix_variant(cfg, k, n))
    harness.write_rows(harness.cell_rows(cells), outputs["cells"])
    harness.write_rows(agg, outputs["aggregate"])
    for row in agg:
        print(f"{row['kind']}\t{row['labels']}\tAER {row['clean_aer_mean']:.2f} +- "
              f"{row['clean_aer_se']:.2f}\t(n={row['runs']})")
    failed = [c for c in cells if c.error]
    if failed and len(failed) == len(cells):
        raise NumericalError(f"all {len(cells)} cells failed; first: {failed[0].error}")
    return agg


def cmd_presets(fmt: str):
    rows = variants.presets()
    if fmt == "json":
        print(json.dumps(rows, indent=2))
        return rows
    cols = list(rows[0])
    print("\t".join(cols))
    for r in rows:
        print("\t".join("" if r[c] is None else str(r[c]) for c in cols))
    return rows


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "attack": cmd_attack,
            "introspect": cmd_introspect, "matrix": cmd_matrix}


def _fail(code: int, exc: BaseException) -> int:
    module = type(exc).__module__
    where = module if module.startswith("laddervat") else "laddervat"
    print(f"laddervat: error [{where}]: {exc}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "presets":
        cmd_presets(args.format)
        return EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        file_cfg = {}
        if args.config:
            file_cfg, manifest_cmd = read_config(args.config)
            if manifest_cmd is not None and manifest_cmd != args.command:
                raise UsageError(f"manifest is for {manifest_cmd!r}, not {args.command!r}")
        flags = flag_values(args)
        if args.command == "matrix":
            for one, many in (("kind", "kinds"), ("labels", "label_counts"), ("seed", "seeds")):
                if one in flags:
                    flags[many] = _listish(flags.pop(one))
        cfg = resolve(args.command, file_cfg, flags)
        HANDLERS[args.command](cfg)
    except NumericalError as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (DataError, IdxFormatError, FileNotFoundError) as exc:
        return _fail(EXIT_DATA, exc)
    except (UsageError, ConfigError, ValueError, TypeError) as exc:
        return _fail(EXIT_USAGE, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
