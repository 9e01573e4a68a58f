"""Command-line interface: ``clsnn train|eval|trace``.

Runs are configured by flat ``key = value`` files (``#`` comments, blank
lines ignored).  ``train`` writes metrics.csv, confidence.csv,
run_config.txt, model.clsnn, and noise_manifest.csv (when labels were
corrupted) into the configured output directory.  ``eval`` prints one CSV
row of test metrics for a checkpoint.  ``trace`` summarizes per-epoch
confidence for clean versus flipped samples from a finished run.

Exit codes: 0 success, 2 configuration error, 3 non-finite loss abort.
"""

import argparse
import csv
import math
import sys
from pathlib import Path

from .curriculum import CurriculumConfig
from .data import inject_label_noise, load_idx_dataset, synth_rate_dataset, take
from .network import SpikingModel, load_model, parse_architecture, save_model
from .rng import derive
from .spiking import NeuronConfig
from .trainer import NonFiniteLossError, evaluate, macro_metrics, make_optimizer, train_epoch


class ConfigError(Exception):
    """Bad key, bad value, or missing requirement in a run config."""


def _positive(v):
    if v <= 0:
        raise ConfigError(f"must be positive, got {v}")
    return v


def _fraction(v):
    if not 0.0 <= v <= 1.0:
        raise ConfigError(f"must be in [0, 1], got {v}")
    return v


def _half_open_fraction(v):
    if not 0.0 <= v < 1.0:
        raise ConfigError(f"must be in [0, 1), got {v}")
    return v


def _choice(*options):
    def check(v):
        if v not in options:
            raise ConfigError(f"must be one of {options}, got {v!r}")
        return v

    return check


def _nonneg(v):
    if v < 0:
        raise ConfigError(f"must be >= 0, got {v}")
    return v


# key -> (parser, default); None default means the key is conditional
_SCHEMA = {
    "seed": (int, 0),
    "epochs": (int, 1),
    "batch_size": (int, 64),
    "out_dir": (str, None),
    "arch": (str, None),
    "timesteps": (int, 8),
    "dropout.p": (float, 0.5),
    "neuron.kind": (str, "plif"),
    "neuron.v_threshold": (float, 1.0),
    "neuron.v_rest": (float, 0.0),
    "neuron.alpha": (float, 2.0),
    "neuron.tau_m": (float, 2.0),
    "curriculum.epsilon": (str, "dynamic"),
    "curriculum.lambda": (float, 1.0),
    "optimizer.kind": (str, "adam"),
    "optimizer.lr": (float, 0.001),
    "optimizer.momentum": (float, 0.9),
    "dataset.kind": (str, "synth"),
    "dataset.classes": (int, 4),
    "dataset.features": (int, 64),
    "dataset.train_per_class": (int, 200),
    "dataset.test_per_class": (int, 50),
    "dataset.noise": (float, 0.1),
    "dataset.rho": (float, 0.0),
    "dataset.train_images": (str, ""),
    "dataset.train_labels": (str, ""),
    "dataset.test_images": (str, ""),
    "dataset.test_labels": (str, ""),
    "dataset.limit_train": (int, 0),
    "dataset.limit_test": (int, 0),
}

_CHECKS = {
    "epochs": _positive,
    "batch_size": _positive,
    "timesteps": _positive,
    "dropout.p": _half_open_fraction,
    "neuron.kind": _choice("plif", "lif"),
    "curriculum.epsilon": _choice("fixed", "dynamic"),
    "curriculum.lambda": _nonneg,
    "optimizer.kind": _choice("adam", "sgd"),
    "optimizer.lr": _positive,
    "dataset.kind": _choice("synth", "idx"),
    "dataset.noise": _fraction,
    "dataset.rho": _fraction,
}


def parse_config(text):
    """Parse flat ``key = value`` lines into a fully resolved, typed dict."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        raw[key] = value

    cfg = {}
    for key, (parse, default) in _SCHEMA.items():
        if key in raw:
            try:
                value = parse(raw[key])
            except ValueError:
                raise ConfigError(
                    f"{key}: cannot parse {raw[key]!r} as {parse.__name__}") from None
        else:
            value = default
        if value is not None and key in _CHECKS:
            try:
                value = _CHECKS[key](value)
            except ConfigError as err:
                raise ConfigError(f"{key}: {err}") from None
        cfg[key] = value
    return cfg


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    return parse_config(text)


def _require(cfg, *keys):
    for key in keys:
        if cfg[key] in (None, ""):
            raise ConfigError(f"missing required key {key!r}")


def build_datasets(cfg):
    """Train/test datasets plus the label-noise manifest (or None)."""
    seed = cfg["seed"]
    if cfg["dataset.kind"] == "synth":
        classes = cfg["dataset.classes"]
        train = synth_rate_dataset(cfg["dataset.train_per_class"], classes,
                                   cfg["dataset.features"],
                                   derive(seed, "train-data"),
                                   noise=cfg["dataset.noise"])
        test = synth_rate_dataset(cfg["dataset.test_per_class"], classes,
                                  cfg["dataset.features"],
                                  derive(seed, "test-data"),
                                  noise=cfg["dataset.noise"],
                                  id_offset=len(train))
    else:
        _require(cfg, "dataset.train_images", "dataset.train_labels",
                 "dataset.test_images", "dataset.test_labels")
        try:
            train = load_idx_dataset(cfg["dataset.train_images"],
                                     cfg["dataset.train_labels"],
                                     limit=cfg["dataset.limit_train"] or None)
            test = load_idx_dataset(cfg["dataset.test_images"],
                                    cfg["dataset.test_labels"],
                                    limit=cfg["dataset.limit_test"] or None)
        except (OSError, ValueError) as err:
            raise ConfigError(f"dataset: {err}") from None
        classes = max(train.num_classes, test.num_classes)
        train.num_classes = test.num_classes = classes
    manifest = None
    if cfg["dataset.rho"] > 0.0:
        train, manifest = inject_label_noise(train, cfg["dataset.rho"],
                                             derive(seed, "noise"))
    return train, test, manifest


def build_model(cfg, input_shape):
    neuron = NeuronConfig(kind=cfg["neuron.kind"],
                          v_threshold=cfg["neuron.v_threshold"],
                          v_rest=cfg["neuron.v_rest"],
                          alpha=cfg["neuron.alpha"],
                          tau_m=cfg["neuron.tau_m"])
    return SpikingModel.build(cfg["arch"], input_shape, cfg["timesteps"],
                              neuron, seed=derive(cfg["seed"], "model"),
                              dropout_p=cfg["dropout.p"])


def _f(x):
    return f"{x:.12f}"


METRICS_HEADER = ("epoch,base_loss,cal_loss,train_acc,test_acc,mean_omega,"
                  "macro_p,macro_r,macro_f1,seconds")
CONFIDENCE_HEADER = "epoch,sample_id,base_loss,omega,weighted_loss"
EVAL_HEADER = "accuracy,macro_precision,macro_recall,macro_f1"


def cmd_train(config_path):
    cfg = load_config(config_path)
    _require(cfg, "out_dir", "arch")
    try:
        parse_architecture(cfg["arch"])
        train_ds, test_ds, manifest = build_datasets(cfg)
        model = build_model(cfg, train_ds.inputs.shape[-3:])
        cur_cfg = CurriculumConfig(epsilon_mode=cfg["curriculum.epsilon"],
                                   lam=cfg["curriculum.lambda"],
                                   num_classes=train_ds.num_classes)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    opt = make_optimizer(cfg["optimizer.kind"], model.parameters(),
                         cfg["optimizer.lr"], cfg["optimizer.momentum"])

    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.txt").write_text(
        "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg)))
    if manifest is not None:
        with open(out_dir / "noise_manifest.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "original_label", "noisy_label"])
            writer.writerows(manifest.entries)

    with open(out_dir / "metrics.csv", "w") as mfh, \
         open(out_dir / "confidence.csv", "w") as cfh:
        mfh.write(METRICS_HEADER + "\n")
        cfh.write(CONFIDENCE_HEADER + "\n")
        for epoch in range(1, cfg["epochs"] + 1):
            report, records = train_epoch(model, train_ds, test_ds, cur_cfg,
                                          opt, epoch=epoch, seed=cfg["seed"],
                                          batch_size=cfg["batch_size"])
            mfh.write(",".join([
                str(report.epoch), _f(report.base_loss), _f(report.cal_loss),
                _f(report.train_acc), _f(report.test_acc),
                _f(report.mean_omega), _f(report.macro_p), _f(report.macro_r),
                _f(report.macro_f1), f"{report.seconds:.3f}"]) + "\n")
            mfh.flush()
            for rec in sorted(records, key=lambda r: r.sample_id):
                cfh.write(",".join([
                    str(rec.epoch), str(rec.sample_id), _f(rec.base_loss),
                    _f(rec.omega), _f(rec.weighted_loss)]) + "\n")
            cfh.flush()
            print(f"epoch {report.epoch}: base_loss {report.base_loss:.4f} "
                  f"cal_loss {report.cal_loss:.4f} train_acc {report.train_acc:.4f} "
                  f"test_acc {report.test_acc:.4f} mean_omega {report.mean_omega:.4f} "
                  f"({report.seconds:.1f}s)")

    save_model(model, out_dir / "model.clsnn")
    return 0


def cmd_eval(model_path, data_config_path, split):
    try:
        model = load_model(model_path)
    except (OSError, ValueError) as err:
        raise ConfigError(f"checkpoint: {err}") from None
    cfg = load_config(data_config_path)
    train_ds, test_ds, _ = build_datasets(cfg)
    ds = train_ds if split == "train" else test_ds
    result = evaluate(model, ds)
    macro_p, macro_r, macro_f1 = macro_metrics(result.confusion)
    print(EVAL_HEADER)
    print(",".join([_f(result.accuracy), _f(macro_p), _f(macro_r), _f(macro_f1)]))
    return 0


_CROSSING = 0.95 * math.e


def cmd_trace(run_dir):
    """Per-epoch mean confidence for clean vs. flipped training samples."""
    run = Path(run_dir)
    conf_path = run / "confidence.csv"
    manifest_path = run / "noise_manifest.csv"
    if not conf_path.exists():
        raise ConfigError(f"trace: {conf_path} not found")
    if not manifest_path.exists():
        raise ConfigError(f"trace: {manifest_path} not found; "
                          "run was trained without label noise")
    with open(manifest_path, newline="") as fh:
        flipped = {int(row["sample_id"]) for row in csv.DictReader(fh)}

    sums = {}  # epoch -> [clean_sum, clean_n, flipped_sum, flipped_n]
    with open(conf_path, newline="") as fh:
        for row in csv.DictReader(fh):
            epoch = int(row["epoch"])
            omega = float(row["omega"])
            acc = sums.setdefault(epoch, [0.0, 0, 0.0, 0])
            if int(row["sample_id"]) in flipped:
                acc[2] += omega
                acc[3] += 1
            else:
                acc[0] += omega
                acc[1] += 1

    lines = ["epoch,clean_mean_omega,flipped_mean_omega"]
    first_clean = first_flipped = None
    for epoch in sorted(sums):
        cs, cn, fs, fn = sums[epoch]
        clean = cs / cn if cn else float("nan")
        flip = fs / fn if fn else float("nan")
        lines.append(f"{epoch},{_f(clean)},{_f(flip)}")
        if first_clean is None and clean >= _CROSSING:
            first_clean = epoch
        if first_flipped is None and flip >= _CROSSING:
            first_flipped = epoch
    (run / "trace_summary.csv").write_text("\n".join(lines) + "\n")
    print(f"clean first crossing: "
          f"{first_clean if first_clean is not None else 'never'}")
    print(f"flipped first crossing: "
          f"{first_flipped if first_flipped is not None else 'never'}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="clsnn",
        description="Train and inspect confidence-weighted spiking classifiers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--data", required=True,
                        help="config file whose dataset.* keys define the data")
    p_eval.add_argument("--split", choices=("train", "test"), default="test")

    p_trace = sub.add_parser("trace", help="summarize confidence by noise group")
    p_trace.add_argument("--run", required=True, help="output directory of a train run")

    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args.config)
        if args.command == "eval":
            return cmd_eval(args.model, args.data, args.split)
        return cmd_trace(args.run)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NonFiniteLossError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
