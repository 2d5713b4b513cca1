"""``emocaps`` command line: synth, train, eval, predict, ablate, gradcheck.

Exit codes: 0 success, 1 config/usage error, 2 data error, 3 numeric failure.
Progress goes to stdout as ``key=value`` lines; diagnostics to stderr.
"""
import argparse
import csv
import io
import json
import os
import sys
import time
from dataclasses import replace

from . import __version__, backend
from .capsule import ALL_MODALITIES, parse_modalities, setting_name
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig, RunConfig, TrainConfig, get_preset
from .data import SynthSpec, feature_dims, generate_synthetic, load_dataset, save_dataset, split
from .emof import atomic_write_text
from .errors import ConfigError, DataError, DimensionError, NumericError, UsageError
from .gradcheck import format_rows, run_gradcheck, worst
from .model import EmoCaps
from .tensor import Tensor
from .training import evaluate, predict_dialogues, probability_table, run_ablation, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _emit(**kv):
    print(" ".join(f"{k}={_fmt(v)}" for k, v in kv.items()), flush=True)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: invalid JSON ({exc})") from None


def load_run_config(args):
    """Merge preset < config file < flags into a RunConfig."""
    doc = _read_json(args.config) if getattr(args, "config", None) else {}
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    rc = RunConfig(**doc)
    if doc.get("manifest") and getattr(args, "config", None):
        rc.manifest = os.path.join(os.path.dirname(os.path.abspath(args.config)), doc["manifest"])
    for flag in ("manifest", "preset", "out", "seed", "threads"):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(rc, flag, value)
    if getattr(args, "modalities", None):
        rc.modalities = args.modalities
    return rc


def resolve_configs(rc, dims, n_classes):
    """TrainConfig and ModelConfig for a run; dims come from the data."""
    model = {}
    if rc.preset != "custom":
        preset = get_preset(rc.preset)
        train_cfg = preset.train_config()
        model.update(preset.model_overrides())
        if len(preset.labels) != n_classes:
            model["n_classes"] = n_classes
    else:
        train_cfg = TrainConfig()
    try:
        train_cfg = replace(train_cfg, **rc.train)
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from None
    train_cfg = replace(train_cfg, seed=rc.seed)
    model.update(rc.model)
    model.setdefault("dropout", train_cfg.dropout)
    data_dims = {"text_dim": dims[0], "audio_dim": dims[1], "visual_dim": dims[2],
                 "n_classes": n_classes}
    for k, v in data_dims.items():
        if k in rc.model and rc.model[k] != v:
            raise ConfigError(f"model.{k}={rc.model[k]} but the dataset has {v}")
        model[k] = v
    return train_cfg, ModelConfig.from_dict(model)


def _keep(spec):
    if spec is None or spec == ALL_MODALITIES:
        return ALL_MODALITIES
    if isinstance(spec, (list, tuple, frozenset, set)) and all(s in ALL_MODALITIES for s in spec):
        return frozenset(spec)
    return parse_modalities(str(spec))


# ---------------------------------------------------------------- subcommands

def cmd_synth(args):
    doc = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        spec = SynthSpec.from_dict(doc)
    except TypeError as exc:
        raise ConfigError(f"bad synth config: {exc}") from None
    dialogues, labels = generate_synthetic(spec)
    path = save_dataset(dialogues, labels, args.out)
    _emit(manifest=path, dialogues=len(dialogues),
          utterances=sum(len(d) for d in dialogues), classes=len(labels))
    return EXIT_OK


def cmd_train(args):
    rc = load_run_config(args)
    if not rc.manifest:
        raise ConfigError("no dataset manifest given (--manifest or config 'manifest')")
    dialogues, labels = load_dataset(rc.manifest)
    train_cfg, model_cfg = resolve_configs(rc, feature_dims(dialogues), len(labels))
    keep = _keep(rc.modalities)
    tr, dev, te = split(dialogues, rc.split, rc.seed)
    model = EmoCaps(model_cfg, seed=rc.seed)
    os.makedirs(rc.out, exist_ok=True)
    _emit(backend=backend(), train_dialogues=len(tr), dev_dialogues=len(dev),
          test_dialogues=len(te), params=model.n_parameters(), setting=setting_name(keep))

    def on_epoch(epoch, loss, dev_f1):
        _emit(epoch=epoch, loss=loss, dev_f1="nan" if dev_f1 is None else dev_f1)

    result = train(model, tr, train_cfg, dev=dev or None, keep=keep, on_epoch=on_epoch)
    log = io.StringIO()
    w = csv.writer(log, lineterminator="\n")
    w.writerow(["epoch", "loss", "dev_weighted_f1"])
    for i, loss in enumerate(result.loss_log):
        w.writerow([i + 1, repr(loss), repr(result.dev_f1[i]) if result.dev_f1 else ""])
    atomic_write_text(os.path.join(rc.out, "loss_log.csv"), log.getvalue())
    meta = {"train": train_cfg.to_dict(), "preset": rc.preset, "modalities": sorted(keep)}
    save_checkpoint(model, labels, os.path.join(rc.out, "checkpoint"), extra=meta)
    summary = {"final_epoch": train_cfg.epochs}
    if te:
        summary["final_test_weighted_f1"] = evaluate(model, te, labels.names, keep).weighted_f1
    if result.best_params is not None:
        best = EmoCaps(model_cfg, params={k: _copy_param(v, result.best_params[k])
                                          for k, v in model.params.items()})
        save_checkpoint(best, labels, os.path.join(rc.out, "best"),
                        extra={**meta, "best_epoch": result.best_epoch})
        summary["best_epoch"] = result.best_epoch
        summary["best_dev_weighted_f1"] = result.best_dev_f1
        if te:
            summary["best_test_weighted_f1"] = evaluate(best, te, labels.names, keep).weighted_f1
    atomic_write_text(os.path.join(rc.out, "summary.json"), json.dumps(summary, indent=1) + "\n")
    _emit(**{k: v for k, v in summary.items()})
    return EXIT_OK


def _copy_param(t, data):
    return Tensor(data.copy(), requires_grad=True, name=t.name)


def _checkpoint_and_data(args):
    model, labels = load_checkpoint(args.checkpoint)
    dialogues, data_labels = load_dataset(args.manifest)
    if tuple(data_labels.names) != tuple(labels.names):
        raise DimensionError(f"dataset labels {list(data_labels.names)} differ from checkpoint "
                             f"labels {list(labels.names)}")
    dims = feature_dims(dialogues)
    want = (model.config.text_dim, model.config.audio_dim, model.config.visual_dim)
    if tuple(dims) != want:
        raise DimensionError(f"dataset feature dims (text, audio, visual)={tuple(dims)} but "
                             f"checkpoint expects {want}")
    return model, labels, dialogues


def cmd_eval(args):
    model, labels, dialogues = _checkpoint_and_data(args)
    report = evaluate(model, dialogues, labels.names, _keep(args.modalities), threads=args.threads or 1)
    os.makedirs(args.out, exist_ok=True)
    atomic_write_text(os.path.join(args.out, "metrics.csv"), report.per_class_csv())
    atomic_write_text(os.path.join(args.out, "report.json"),
                      json.dumps(report.to_dict(), indent=1) + "\n")
    atomic_write_text(os.path.join(args.out, "probabilities.csv"), report.probability_csv())
    _emit(weighted_f1=report.weighted_f1, utterances=int(report.support.sum()))
    return EXIT_OK


def cmd_predict(args):
    model, labels, dialogues = _checkpoint_and_data(args)
    P, pred, dids, uids = predict_dialogues(model, dialogues, _keep(args.modalities),
                                            threads=args.threads or 1)
    text = probability_table(dids, uids, pred, P, labels.names)
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args):
    rc = load_run_config(args)
    if not rc.manifest:
        raise ConfigError("no dataset manifest given (--manifest or config 'manifest')")
    dialogues, labels = load_dataset(rc.manifest)
    train_cfg, model_cfg = resolve_configs(rc, feature_dims(dialogues), len(labels))
    tr, _, te = split(dialogues, rc.split, rc.seed)
    if not te:
        raise ConfigError("ablation needs a nonempty test split")
    settings = None
    if args.modalities:
        settings = [parse_modalities(s) for s in args.modalities.split(",") if s.strip()]
    seeds = list(range(rc.seed, rc.seed + args.n_seeds))

    def on_run(name, seed, f1):
        _emit(setting=name, seed=seed, test_f1=f1)

    rows = run_ablation(lambda s: EmoCaps(model_cfg, seed=s), tr, te, train_cfg, settings, seeds,
                        on_run=on_run)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["setting", "mean_weighted_f1"] + [f"seed_{s}" for s in seeds])
    for r in rows:
        w.writerow([r["setting"], repr(r["mean_f1"])] + [repr(x) for x in r["f1_per_seed"]])
    os.makedirs(rc.out, exist_ok=True)
    atomic_write_text(os.path.join(rc.out, "ablation.csv"), buf.getvalue())
    for r in rows:
        _emit(setting=r["setting"], mean_f1=r["mean_f1"])
    return EXIT_OK


def cmd_gradcheck(args):
    doc = _read_json(args.config) if args.config else {}
    overrides = doc.get("model", {})
    for k in ("text_dim", "audio_dim", "visual_dim"):
        if overrides.get(k, 16) > 16:
            raise ConfigError(f"gradcheck needs toy dims (<= 16); got {k}={overrides[k]}")
    t0 = time.perf_counter()
    rows = run_gradcheck(overrides, seed=args.seed or 0, corrupt=args.inject_grad_error)
    print(format_rows(rows), flush=True)
    bad = worst(rows)
    _emit(max_rel_error=f"{bad.max_rel_error:.3e}", seconds=time.perf_counter() - t0)
    if not bad.passed:
        print(f"gradcheck failed: {bad.component} ({bad.worst_param}) relative error "
              f"{bad.max_rel_error:.3e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="emocaps", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, help="worker threads (default 1)")
        if data:
            sp.add_argument("--manifest", help="dataset manifest JSON")
            sp.add_argument("--preset", choices=["iemocap", "meld", "custom"])
            sp.add_argument("--out", help="output directory")
            sp.add_argument("--modalities", help="modality setting, e.g. T+V+A")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--config", help="JSON SynthSpec")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train and write a checkpoint")
    common(sp)
    sp.set_defaults(func=cmd_train)

    for name, fn, helptext in (("eval", cmd_eval, "metrics for a labeled dataset"),
                               ("predict", cmd_predict, "per-utterance probabilities CSV")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--out", required=(name == "eval"))
        sp.add_argument("--modalities")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)
        sp.set_defaults(func=fn)

    sp = sub.add_parser("ablate", help="weighted F1 per modality setting")
    common(sp)
    sp.add_argument("--n-seeds", type=int, default=1)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient report")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--threads", type=int)
    sp.add_argument("--inject-grad-error", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, UsageError, DimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BrokenPipeError:
        # downstream closed early (e.g. piped into head)
        devnull = os.open(os.devnull, os.O_WRONLY)
        os.dup2(devnull, sys.stdout.fileno())
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
