"""``mmtrisk`` command line: generate, train, ensemble, eval, ablate, gradcheck.

Configuration is an INI file with the sections below. Values are layered as
built-in defaults < ``--config`` file < ``--set section.key=value``. Unknown
sections or keys are errors.

Exit codes: 0 success, 2 configuration error, 3 data error (missing or
malformed inputs), 4 numerical failure.
"""

import argparse
import configparser
import json
import logging
import os
import shutil
import sys
from dataclasses import fields


from . import cohort, evalkit, trainkit
from .numcore import NonFiniteError

log = logging.getLogger("mmtrisk")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# section -> key -> default. Every key is documented in README.md.
DEFAULTS = {
    "run": {"seed": 0},
    "cohort": {
        **{
            f.name: f.default
            for f in fields(cohort.SynthConfig)
            if f.name not in ("seed",)
        },
        "split_train": cohort.DEFAULT_SPLIT[0],
        "split_val": cohort.DEFAULT_SPLIT[1],
        "split_test": cohort.DEFAULT_SPLIT[2],
    },
    "tokenizer": {"k": 10},
    "encoder": {"d": 32, "n_layers": 2, "n_heads": 4, "dropout": 0.1},
    "train": {
        "lr": 1e-3,
        "epochs": 15,
        "batch_size": 32,
        "patience": 0,
        "head_offset": -3.0,
    },
    "ensemble": {"n_models": 10, "top_k": 5},
    "eval": {"strata": "age_bucket,density", "curves": False},
}


class ConfigError(ValueError):
    pass


def _coerce(default, text, where):
    try:
        if isinstance(default, bool):
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.replace("(", "").replace(")", "").split(","))
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {type(default).__name__}") from None
    return text.strip()


def load_config(path=None, overrides=()):
    """Merged configuration as nested dicts of typed values."""
    cfg = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    layers = []
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for sec in parser.sections():
            for key, value in parser.items(sec):
                layers.append((sec, key, value, path))
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        sec, key = lhs.split(".", 1)
        layers.append((sec.strip(), key.strip(), value, "--set"))
    for sec, key, value, where in layers:
        if sec not in cfg:
            raise ConfigError(f"{where}: unknown section [{sec}]")
        if key not in cfg[sec]:
            raise ConfigError(f"{where}: unknown key {sec}.{key}")
        cfg[sec][key] = _coerce(DEFAULTS[sec][key], value, f"{where}: {sec}.{key}")
    return cfg


def synth_config(cfg):
    c = {k: v for k, v in cfg["cohort"].items() if not k.startswith("split_")}
    try:
        return cohort.SynthConfig(seed=cfg["run"]["seed"], **c)
    except ValueError as exc:
        raise ConfigError(f"cohort: {exc}") from None


def split_fractions(cfg):
    c = cfg["cohort"]
    fr = (c["split_train"], c["split_val"], c["split_test"])
    if min(fr) < 0 or abs(sum(fr) - 1.0) > 0.01:
        raise ConfigError(f"cohort: split fractions {fr} must be non-negative and sum to 1")
    return fr


def train_config(cfg, **changes):
    values = dict(
        seed=cfg["run"]["seed"],
        k=cfg["tokenizer"]["k"],
        **cfg["encoder"],
        **cfg["train"],
    )
    values.update(changes)
    try:
        return trainkit.TrainConfig(**values)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _prepare_out(path, force, is_dir=True):
    if os.path.exists(path):
        if not force:
            raise FileExistsError(f"{path} exists; pass --force to overwrite")
        if is_dir and os.path.isdir(path):
            shutil.rmtree(path)
    if is_dir:
        os.makedirs(path)
    else:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)


def _load_split(data_dir, name):
    path = os.path.join(data_dir, f"{name}.jsonl")
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing data file {path}")
    return cohort.load_jsonl(path)


def _load_model(path):
    """A checkpoint file or an ensemble directory / ensemble.json."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing model {path}")
    if os.path.isdir(path):
        path = os.path.join(path, "ensemble.json")
    if path.endswith(".json"):
        with open(path, encoding="utf-8") as fh:
            spec = json.load(fh)
        base = os.path.dirname(os.path.abspath(path))
        ens = trainkit.Ensemble([os.path.join(base, m["file"]) for m in spec["members"]])
        ens.loaded()
        return ens
    return trainkit.load_checkpoint(path)


def _strata(cfg):
    return [s.strip() for s in cfg["eval"]["strata"].split(",") if s.strip()]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(cfg, args):
    sc = synth_config(cfg)
    fr = split_fractions(cfg)
    out = args.out or "data"
    _prepare_out(out, args.force)
    data = cohort.Dataset(*cohort.generate_cohort(sc))
    parts = cohort.split_by_patient(data, fr, seed=sc.seed)
    report = {}
    for name, part in parts.items():
        cohort.save_jsonl(part, os.path.join(out, f"{name}.jsonl"))
        report[name] = cohort.oracle_report(part) if len(part) else None
    with open(os.path.join(out, "oracle.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {', '.join(f'{k}={len(v)}' for k, v in parts.items())} sequences to {out}")
    return EXIT_OK


def cmd_train(cfg, args):
    tc = train_config(cfg)
    out = args.out or "model.ckpt"
    if os.path.exists(out) and not args.force:
        raise FileExistsError(f"{out} exists; pass --force to overwrite")
    train, val = _load_split(args.data, "train"), _load_split(args.data, "val")
    ckpt = trainkit.train(train, val, tc)
    _prepare_out(out, True, is_dir=False)
    trainkit.save_checkpoint(ckpt, out)
    print(f"best epoch {ckpt.history['best_epoch']}: "
          f"val diagnosis auroc {ckpt.validation_metrics['diagnosis']['auroc']}; saved {out}")
    return EXIT_OK


def cmd_ensemble(cfg, args):
    tc = train_config(cfg)
    n, k = cfg["ensemble"]["n_models"], cfg["ensemble"]["top_k"]
    if not 1 <= k <= n:
        raise ConfigError(f"ensemble: top_k={k} must lie in [1, n_models={n}]")
    out = args.out or "ensemble"
    if os.path.exists(out) and not args.force:
        raise FileExistsError(f"{out} exists; pass --force to overwrite")
    train, val = _load_split(args.data, "train"), _load_split(args.data, "val")
    ens = trainkit.train_ensemble(n, k, tc, train, val, jobs=args.jobs)
    _prepare_out(out, True)
    members = []
    for rank, ck in enumerate(ens.members):
        name = f"member_{rank:02d}.ckpt"
        trainkit.save_checkpoint(ck, os.path.join(out, name))
        members.append({
            "file": name,
            "seed": ck.config.seed,
            "n_layers": ck.config.n_layers,
            "n_heads": ck.config.n_heads,
            "val_auroc": ck.validation_metrics["diagnosis"]["auroc"],
        })
    with open(os.path.join(out, "ensemble.json"), "w", encoding="utf-8") as fh:
        json.dump({"n_models": n, "top_k": k, "members": members}, fh, indent=2)
        fh.write("\n")
    print(f"kept {k} of {n} models in {out}")
    return EXIT_OK


def _eval_rows(model, data, cfg, modes):
    rows = []
    for task in evalkit.TASKS.values():
        for mode in modes:
            rows.extend(evalkit.evaluate(model, data, task, mode))
    return rows


def cmd_eval(cfg, args):
    model = _load_model(args.model)
    test = _load_split(args.data, "test")
    out = args.out or "eval"
    _prepare_out(out, args.force)
    rows = []
    for task in evalkit.TASKS.values():
        rows.extend(evalkit.evaluate(model, test, task))
        for s in _strata(cfg):
            if s not in evalkit.STRATA:
                raise ConfigError(f"eval: unknown stratum {s!r}")
            rows.extend(evalkit.evaluate(model, test, task, strata=s)[1:])
        if cfg["eval"]["curves"]:
            _, scores, y = evalkit.predict_scores(model, test, task)
            evalkit.write_curves(scores, y, os.path.join(out, f"roc_{task.kind}.csv"),
                                 os.path.join(out, f"pr_{task.kind}.csv"))
    evalkit.write_metrics_csv(rows, os.path.join(out, "metrics.csv"))
    extra = {"oracle": cohort.oracle_report(test)} if test.oracle is not None else None
    evalkit.write_metrics_json(rows, os.path.join(out, "metrics.json"), extra)
    for r in rows:
        if r["stratum"] == "overall":
            print(f"{r['task']:<10} auroc {r['auroc']}  auprc {r['auprc']}")
    return EXIT_OK


def cmd_ablate(cfg, args):
    model = _load_model(args.model)
    test = _load_split(args.data, "test")
    out = args.out or "ablation"
    _prepare_out(out, args.force)
    rows = _eval_rows(model, test, cfg, evalkit.ABLATION_MODES)
    evalkit.write_metrics_csv(rows, os.path.join(out, "ablation.csv"))
    evalkit.write_metrics_json(rows, os.path.join(out, "ablation.json"))
    if args.retrain:
        # one model per mode, trained and validated on the filtered inputs
        train, val = _load_split(args.data, "train"), _load_split(args.data, "val")
        retrained = []
        for mode in evalkit.ABLATION_MODES:
            ck = trainkit.train(train, val, train_config(cfg, ablation=mode.name))
            for task in evalkit.TASKS.values():
                retrained.extend(evalkit.evaluate(ck, test, task, mode))
        evalkit.write_metrics_csv(retrained, os.path.join(out, "ablation_retrained.csv"))
    for r in rows:
        print(f"{r['task']:<10} {r['mode']:<15} auroc {r['auroc']}")
    return EXIT_OK


GRADCHECK_TOL = 1e-4


def cmd_gradcheck(cfg, args):
    err = trainkit.gradcheck_model(seed=cfg["run"]["seed"])
    ok = err < GRADCHECK_TOL
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAILED'}, tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "ensemble": cmd_ensemble,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def build_parser():
    p = argparse.ArgumentParser(prog="mmtrisk", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="INI configuration file")
        s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one configuration value (repeatable)")
        s.add_argument("--out", help="output file or directory")
        s.add_argument("--force", action="store_true", help="overwrite existing output")
        if name in ("train", "ensemble", "eval", "ablate"):
            s.add_argument("--data", default="data", help="directory with train/val/test.jsonl")
        if name in ("eval", "ablate"):
            s.add_argument("--model", default="model.ckpt",
                           help="checkpoint file or ensemble directory")
        if name == "ensemble":
            s.add_argument("--jobs", type=int, default=1, help="parallel member trainings")
        if name == "ablate":
            s.add_argument("--retrain", action="store_true",
                           help="also train one model per ablation mode")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (cohort.DataError, trainkit.CheckpointError, OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (trainkit.TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining validation failures come from configured values
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
