"""``t1q`` command line: phantom -> fit-maps -> synthesize -> train -> ois -> evaluate -> stats/report.

Every subcommand merges its settings as CLI flags > ``--config`` JSON file >
built-in defaults and writes the effective result to ``run_config.json`` in its
output directory. Exit status: 0 success, 1 usage error, 2 data or validation
error.
"""
import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import CheckpointError
from .nifti import NiftiError, write_nifti
from .phantom import PhantomSpec, default_spec, make_phantom
from .pipeline import (ManifestError, load_manifest, load_maps, maps_dir, save_maps,
                       subject_sample, subject_stack, write_manifest, load_images)
from .relaxometry import fit_maps, preset, synthesize_series
from .saliency import OISConfig, compute_ois
from .segnet import (TrainConfig, UNetConfig, build_unet, load_model, make_folds, predict,
                     save_model, train)
from .stats import COLUMNS, compare_configs, subject_vwa, tpr_per_class, write_table
from .volume import NUCLEI, Volume3D

RUN_CONFIG = "run_config.json"
MODEL_FILE = "model.t1q"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- config merging

DEFAULTS = {
    "phantom": {"subjects": 8, "dims": [32, 32, 32], "noise": 0.0, "jitter": 1.5, "erosion": 1,
                "n_nuclei": 13, "fill": 0.3, "spec": None, "seed": 0},
    "fit-maps": {"magnitude": False, "bracket": [50.0, 10000.0], "normalize": True, "threads": 1},
    "synthesize": {"ti_start": 400.0, "ti_end": 1400.0, "step": 20.0},
    "train": {"config_preset": "config3", "seed": 0, "folds": 8, "fold": None, "n_val": 2,
              "depth": 2, "base_channels": 4, "dropout": 0.1, "lr": 1e-3, "weight_decay": 1e-4,
              "lr_decay": 0.9, "lr_patience": 5, "early_stop_patience": 15, "max_epochs": 100,
              "crop_size": [32, 32, 32], "augment": True, "normalize": True, "threads": 1},
    "ois": {"mc_runs": 100, "dropout": 0.1, "classes": None, "seed": 0, "normalize": True,
            "threads": 1},
    "evaluate": {"normalize": True, "threads": 1},
    "stats": {"reference": None, "alpha": 0.05},
    "report": {"reference": None, "alpha": 0.05},
}


def _merge(command, args):
    """Effective settings: defaults, then the config file, then explicit flags."""
    cfg = dict(DEFAULTS.get(command, {}))
    explicit = {k: v for k, v in vars(args).items() if k not in ("command", "config", "func")}
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config file {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise DataError(f"config file {args.config} must hold a JSON object")
        loaded = {k.replace("-", "_"): v for k, v in loaded.items()}
        known = set(cfg) | set(explicit) | _path_keys(command)
        unknown = sorted(set(loaded) - known)
        if unknown:
            raise DataError(f"config file {args.config}: unknown keys {unknown} for {command!r}")
        cfg.update(loaded)
    cfg.update(explicit)
    if "threads" in cfg and "threads" not in explicit and os.environ.get("T1Q_THREADS"):
        try:
            cfg["threads"] = int(os.environ["T1Q_THREADS"])
        except ValueError:
            raise UsageError(f"T1Q_THREADS must be an integer, got {os.environ['T1Q_THREADS']!r}") from None
    for key in ("threads", "subjects", "mc_runs", "folds", "max_epochs"):
        if key in cfg and cfg[key] is not None and int(cfg[key]) < 1:
            raise UsageError(f"--{key.replace('_', '-')} must be >= 1")
    return cfg


def _path_keys(command):
    return {"phantom": {"out"}, "fit-maps": {"manifest", "out"},
            "synthesize": {"manifest", "maps", "out"},
            "train": {"manifest", "maps", "out"}, "ois": {"manifest", "maps", "models", "out"},
            "evaluate": {"manifest", "maps", "models", "out"},
            "stats": {"results", "out"}, "report": {"results", "out"}}[command]


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) in (None, [], ""):
            raise UsageError(f"--{k.replace('_', '-')} is required (flag or config file)")


def _outdir(cfg, command):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "version": __version__, **cfg}
    (out / RUN_CONFIG).write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return out


def _log(msg):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------- subcommands


def cmd_phantom(cfg):
    _require(cfg, "out")
    if cfg["spec"]:
        try:
            spec = PhantomSpec.from_json(Path(cfg["spec"]).read_text())
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"cannot load phantom spec {cfg['spec']}: {exc}") from None
    else:
        spec = default_spec(cfg["dims"], cfg["n_nuclei"], cfg["fill"], cfg["noise"], cfg["erosion"],
                            cfg["jitter"], cfg["seed"])
    out = _outdir(cfg, "phantom")
    (out / "phantom_spec.json").write_text(spec.to_json() + "\n")
    entries = []
    for i in range(int(cfg["subjects"])):
        sid = f"sub{i:02d}"
        ph = make_phantom(spec, seed=_subject_seed(cfg["seed"], i))
        d = out / sid
        d.mkdir(exist_ok=True)
        write_nifti(ph.mprage, d / "mprage.nii", dtype="f8")
        write_nifti(ph.fgatir, d / "fgatir.nii", dtype="f8")
        write_nifti(ph.labels, d / "labels.nii")
        write_nifti(Volume3D(ph.wm_mask.astype(np.uint8)), d / "wm_mask.nii", dtype="u1")
        save_maps(ph.truth, d / "truth")
        entries.append({"id": sid, "mprage": f"{sid}/mprage.nii", "fgatir": f"{sid}/fgatir.nii",
                        "labels": f"{sid}/labels.nii", "wm_mask": f"{sid}/wm_mask.nii"})
    write_manifest(out / "manifest.json", entries, spec.acq)
    _log(f"wrote {len(entries)} phantom subjects and {out / 'manifest.json'}")


def _subject_seed(seed, i):
    return int(np.random.SeedSequence([int(seed), i]).generate_state(1)[0])


def cmd_fit_maps(cfg):
    _require(cfg, "manifest", "out")
    man = load_manifest(cfg["manifest"])
    out = _outdir(cfg, "fit-maps")
    lo, hi = (float(b) for b in cfg["bracket"])
    for s in man.subjects:
        mprage, fgatir = load_images(s, cfg["normalize"])
        maps = fit_maps(mprage, fgatir, man.acquisition, (lo, hi), magnitude=cfg["magnitude"],
                        threads=cfg["threads"])
        save_maps(maps, maps_dir(out, s.id))
        _log(f"{s.id}: {int(maps.ok.sum())}/{maps.ok.size} voxels fitted")


def cmd_synthesize(cfg):
    _require(cfg, "manifest", "maps", "out")
    man = load_manifest(cfg["manifest"])
    out = _outdir(cfg, "synthesize")
    for s in man.subjects:
        maps = load_maps(maps_dir(cfg["maps"], s.id))
        stack = synthesize_series(maps, cfg["ti_start"], cfg["ti_end"], cfg["step"], man.acquisition.tr)
        d = out / s.id
        d.mkdir(exist_ok=True)
        for vol, meta in zip(stack.channels, stack.meta):
            write_nifti(vol, d / f"{meta.name}.nii")
        _log(f"{s.id}: {len(stack)} synthesized volumes")


def _unet_config(cfg, n_channels):
    return UNetConfig(in_channels=n_channels, depth=cfg["depth"], base_channels=cfg["base_channels"],
                      dropout_p=cfg["dropout"])


def cmd_train(cfg):
    _require(cfg, "manifest", "maps", "out")
    man = load_manifest(cfg["manifest"], require_labels=True)
    config = preset(cfg["config_preset"])
    out = _outdir(cfg, "train")
    dataset = {}
    for s in man.subjects:
        maps = load_maps(maps_dir(cfg["maps"], s.id))
        _, dataset[s.id] = subject_sample(s, maps, config, man.acquisition, cfg["normalize"])
    folds = make_folds(man.ids, k=cfg["folds"], seed=cfg["seed"], n_val=cfg["n_val"])
    (out / "folds.json").write_text(json.dumps(
        [{"train": list(f.train), "val": list(f.val), "test": list(f.test)} for f in folds], indent=2) + "\n")
    selected = range(len(folds)) if cfg["fold"] is None else _as_list(cfg["fold"])
    tcfg = TrainConfig(lr=cfg["lr"], weight_decay=cfg["weight_decay"], lr_decay_factor=cfg["lr_decay"],
                       lr_patience=cfg["lr_patience"], early_stop_patience=cfg["early_stop_patience"],
                       crop_size=cfg["crop_size"], max_epochs=cfg["max_epochs"], seed=cfg["seed"],
                       augment=cfg["augment"])
    for f in selected:
        if not 0 <= f < len(folds):
            raise UsageError(f"--fold {f} outside [0, {len(folds)})")
        model = build_unet(_unet_config(cfg, config.n_channels), seed=cfg["seed"])
        model.config.check_dims(tcfg.crop_size or next(iter(dataset.values())).labels.shape)
        rep = train(model, dataset, folds[f], tcfg, log=lambda m, f=f: _log(f"fold {f} {m}"))
        d = out / f"fold{f}"
        d.mkdir(exist_ok=True)
        save_model(model, d / MODEL_FILE, {"config_preset": config.name, "fold": f, "seed": cfg["seed"],
                                           "best_epoch": rep.best_epoch, "stop_reason": rep.stop_reason})
        rep.write_csv(d / "train_log.csv")
        _log(f"fold {f}: best epoch {rep.best_epoch}, val loss {rep.initial_val_loss:.4f} -> "
             f"{rep.best_val_loss:.4f} ({rep.stop_reason})")


def _as_list(v):
    return [int(x) for x in (v if isinstance(v, (list, tuple)) else [v])]


def _fold_models(models_dir, ids):
    """Subject id -> (model, metadata) from the fold in which it was held out."""
    models_dir = Path(models_dir)
    try:
        folds = json.loads((models_dir / "folds.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {models_dir / 'folds.json'}: {exc}; run train first") from None
    assigned, cache = {}, {}
    for f, fold in enumerate(folds):
        path = models_dir / f"fold{f}" / MODEL_FILE
        if not path.exists():
            continue
        for sid in fold["test"]:
            if sid in ids:
                if f not in cache:
                    cache[f] = load_model(path)
                assigned[sid] = cache[f]
    if not assigned:
        raise DataError(f"no trained fold model in {models_dir} holds out any manifest subject")
    presets = {meta["config_preset"] for _, meta in assigned.values()}
    if len(presets) != 1:
        raise DataError(f"fold models disagree on the input configuration: {sorted(presets)}")
    return assigned, presets.pop()


def cmd_ois(cfg):
    _require(cfg, "manifest", "maps", "models", "out")
    man = load_manifest(cfg["manifest"])
    assigned, preset_name = _fold_models(cfg["models"], set(man.ids))
    config = preset(preset_name)
    dataset, models = {}, {}
    for s in man.subjects:
        if s.id not in assigned:
            continue
        maps = load_maps(maps_dir(cfg["maps"], s.id))
        dataset[s.id] = subject_stack(s, maps, config, man.acquisition, cfg["normalize"])
        models[s.id] = assigned[s.id][0]
    out = _outdir(cfg, "ois")
    ocfg = OISConfig(mc_runs=cfg["mc_runs"], dropout_p=cfg["dropout"],
                     classes=None if cfg["classes"] is None else tuple(_as_list(cfg["classes"])),
                     seed=cfg["seed"], threads=cfg["threads"])
    rep = compute_ois(models, dataset, ocfg)
    rep.meta["config_preset"] = preset_name
    rep.write_csv(out / "ois.csv")
    rep.write_json(out / "ois.json")
    best = rep.order[0]
    _log(f"OIS over {len(dataset)} subjects: top channel {rep.channels[best]['name']}")


def cmd_evaluate(cfg):
    _require(cfg, "manifest", "maps", "models", "out")
    man = load_manifest(cfg["manifest"], require_labels=True)
    assigned, preset_name = _fold_models(cfg["models"], set(man.ids))
    config = preset(preset_name)
    out = _outdir(cfg, "evaluate")
    rows = []
    for s in man.subjects:
        if s.id not in assigned:
            continue
        maps = load_maps(maps_dir(cfg["maps"], s.id))
        stack, sample = subject_sample(s, maps, config, man.acquisition, cfg["normalize"])
        model = assigned[s.id][0]
        _, pred = predict(model, sample.image)
        write_nifti(stack.channels[0].with_data(pred), out / f"{s.id}_pred.nii", dtype="u1")
        res = tpr_per_class(pred, sample.labels)
        tpr = res.tpr
        rows.append([s.id] + [tpr[c] for c in range(1, len(NUCLEI) + 1)] + [subject_vwa(res)])
    with open(out / "tpr.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject"] + COLUMNS)
        for r in rows:
            w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])
    with open(out / "vwa.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "vwa"])
        for r in rows:
            w.writerow([r[0], repr(float(r[-1]))])
    _log(f"evaluated {len(rows)} subjects; mean VWA {np.mean([r[-1] for r in rows]):.4f}")


def _load_results(specs):
    """``NAME=DIR`` pairs -> {config: {column: per-subject values}} on the shared subjects."""
    tables = {}
    for spec in specs:
        if "=" not in spec:
            raise UsageError(f"--results expects NAME=DIR, got {spec!r}")
        name, d = spec.split("=", 1)
        path = Path(d) / "tpr.csv"
        try:
            with open(path, newline="") as fh:
                rows = list(csv.DictReader(fh))
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc}; run evaluate first") from None
        if not rows or set(COLUMNS) - set(rows[0]):
            raise DataError(f"{path} is not an evaluate tpr.csv")
        tables[name] = {r["subject"]: r for r in rows}
    common = sorted(set.intersection(*(set(t) for t in tables.values())))
    if not common:
        raise DataError("result sets share no subjects")
    return {name: {c: [float(t[s][c]) for s in common] for c in COLUMNS} for name, t in tables.items()}


def _comparisons(cfg):
    _require(cfg, "results", "out")
    per_config = _load_results(cfg["results"])
    ref = cfg["reference"] or next(iter(per_config))
    if ref not in per_config:
        raise UsageError(f"--reference {ref!r} is not one of {sorted(per_config)}")
    return per_config, compare_configs(per_config, ref, cfg["alpha"]) if len(per_config) > 1 else []


def _write_comparisons(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        keys = ["config", "column", "W", "p", "p_holm", "method", "n", "reject", "mark"]
        w.writerow(keys)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in keys])


def cmd_stats(cfg):
    _, rows = _comparisons(cfg)
    out = _outdir(cfg, "stats")
    _write_comparisons(rows, out / "comparisons.csv")
    _log(f"{sum(r['reject'] for r in rows)} of {len(rows)} comparisons significant after Holm")


def cmd_report(cfg):
    per_config, rows = _comparisons(cfg)
    out = _outdir(cfg, "report")
    _write_comparisons(rows, out / "comparisons.csv")
    write_table(per_config, out / "table.csv", out / "marks.csv", rows)
    _log(f"wrote {out / 'table.csv'}")


COMMANDS = {"phantom": cmd_phantom, "fit-maps": cmd_fit_maps, "synthesize": cmd_synthesize,
            "train": cmd_train, "ois": cmd_ois, "evaluate": cmd_evaluate, "stats": cmd_stats,
            "report": cmd_report}


# ---------------------------------------------------------------- parser


def _bool_flag(p, name, help):
    p.add_argument(f"--{name}", dest=name.replace("-", "_"), action="store_true", default=argparse.SUPPRESS,
                   help=help)
    p.add_argument(f"--no-{name}", dest=name.replace("-", "_"), action="store_false",
                   default=argparse.SUPPRESS)


def build_parser():
    parser = _Parser(prog="t1q", description="T1 relaxometry, segmentation and channel saliency pipeline",
                     argument_default=argparse.SUPPRESS)
    parser.add_argument("--version", action="version", version=f"t1q {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, seed=False, threads=False, normalize=False):
        p.add_argument("--config", help="JSON file with default settings for this command")
        p.add_argument("--out", help="output directory")
        if seed:
            p.add_argument("--seed", type=int)
        if threads:
            p.add_argument("--threads", type=int, help="worker threads (env T1Q_THREADS); 1 is bit-exact")
        if normalize:
            _bool_flag(p, "normalize", "divide images by the white-matter mean (needs wm_mask)")

    p = sub.add_parser("phantom", help="write a synthetic phantom cohort and its manifest",
                       argument_default=argparse.SUPPRESS)
    common(p, seed=True)
    p.add_argument("--subjects", type=int)
    p.add_argument("--dims", type=int, nargs=3)
    p.add_argument("--noise", type=float)
    p.add_argument("--jitter", type=float)
    p.add_argument("--erosion", type=int)
    p.add_argument("--n-nuclei", type=int)
    p.add_argument("--fill", type=float)
    p.add_argument("--spec", help="phantom spec JSON (overrides the generated layout)")

    p = sub.add_parser("fit-maps", help="fit PD and T1 maps", argument_default=argparse.SUPPRESS)
    common(p, threads=True, normalize=True)
    p.add_argument("--manifest")
    p.add_argument("--bracket", type=float, nargs=2)
    _bool_flag(p, "magnitude", "inputs are magnitude images; restore the FGATIR polarity")

    p = sub.add_parser("synthesize", help="synthesize a series of TI-weighted volumes",
                       argument_default=argparse.SUPPRESS)
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--maps", help="fit-maps output directory")
    p.add_argument("--ti-start", type=float)
    p.add_argument("--ti-end", type=float)
    p.add_argument("--step", type=float)

    p = sub.add_parser("train", help="train cross-validation fold models", argument_default=argparse.SUPPRESS)
    common(p, seed=True, threads=True, normalize=True)
    p.add_argument("--manifest")
    p.add_argument("--maps")
    p.add_argument("--config-preset", help="input configuration, e.g. config5 or t1map")
    p.add_argument("--folds", type=int)
    p.add_argument("--fold", type=int, nargs="+", help="fold indices to train (default all)")
    p.add_argument("--n-val", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--lr-decay", type=float)
    p.add_argument("--lr-patience", type=int)
    p.add_argument("--early-stop-patience", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--crop-size", type=int, nargs=3)
    _bool_flag(p, "augment", "random flip, scale, rotation, translation and crop")

    p = sub.add_parser("ois", help="Monte-Carlo-dropout channel saliency", argument_default=argparse.SUPPRESS)
    common(p, seed=True, threads=True, normalize=True)
    p.add_argument("--manifest")
    p.add_argument("--maps")
    p.add_argument("--models", help="train output directory")
    p.add_argument("--mc-runs", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--classes", type=int, nargs="+")

    p = sub.add_parser("evaluate", help="per-subject TPR and VWA", argument_default=argparse.SUPPRESS)
    common(p, threads=True, normalize=True)
    p.add_argument("--manifest")
    p.add_argument("--maps")
    p.add_argument("--models")

    for name, text in (("stats", "Wilcoxon and Holm comparisons against a reference"),
                       ("report", "table of mean ± sd with significance marks")):
        p = sub.add_parser(name, help=text, argument_default=argparse.SUPPRESS)
        common(p)
        p.add_argument("--results", nargs="+", help="NAME=DIR pairs of evaluate outputs")
        p.add_argument("--reference", help="configuration name to compare against")
        p.add_argument("--alpha", type=float)
    return parser


def run(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError(f"choose a subcommand: {', '.join(COMMANDS)}")
        cfg = _merge(args.command, args)
        with threadpool_limits(limits=int(cfg.get("threads", 1))):
            COMMANDS[args.command](cfg)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ManifestError, NiftiError, CheckpointError, KeyError, ValueError,
            FileNotFoundError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
