"""Command-line surface: synth, train, detect, eval, inspect.

Configuration precedence is flags > config file > defaults.  Every command
is deterministic given the same inputs and seed; outputs are written through
temp files and renamed, and partial outputs are removed on failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from . import dataset, detection, metrics, pot, training
from .errors import ConfigMismatch, TranadError
from .model import ModelConfig, TranAD

FLOAT_FMT = "%.17g"


def derive_seed(seed, tag):
    """Per-module seed: base seed mixed with a stable hash of the module tag."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2 ** 31)


def _load_config(path):
    if path is None:
        return {}
    with open(path) as f:
        return json.load(f)


def _cfg_get(cfg, key, flag_value, default):
    if flag_value is not None:
        return flag_value
    return cfg.get(key, default)


class _OutputTracker:
    """Write-then-rename file creation with cleanup of partial outputs."""

    def __init__(self):
        self.written = []

    def write_text(self, path, text):
        tmp = str(path) + ".tmp"
        with open(tmp, "w") as f:
            f.write(text)
        os.replace(tmp, path)
        self.written.append(str(path))

    def write_binary(self, path, writer):
        tmp = str(path) + ".tmp"
        writer(tmp)
        os.replace(tmp, path)
        self.written.append(str(path))

    def cleanup(self):
        for p in self.written:
            try:
                os.remove(p)
            except OSError:
                pass


def _matrix_csv(values, fmt=FLOAT_FMT):
    return "\n".join(",".join(fmt % v for v in row) for row in values) + "\n"


# -- commands -----------------------------------------------------------------


def cmd_synth(args, cfg, out):
    spec_dict = dict(cfg.get("synth", {}))
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = dataset.SynthSpec.from_dict(spec_dict)
    series = dataset.synth_generate(spec)
    out.write_text(os.path.join(args.out, "values.csv"), _matrix_csv(series.values))
    out.write_text(os.path.join(args.out, "labels.csv"),
                   _matrix_csv(series.labels, fmt="%d"))
    out.write_text(os.path.join(args.out, "synth_spec.json"),
                   json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return 0


def _model_config_from(cfg, m, seed):
    fields = {k: cfg[k] for k in
              ("window_size", "context_cap", "n_heads", "d_model", "ff_hidden",
               "n_enc_layers", "dropout", "scale_mode", "focus_target")
              if k in cfg}
    return ModelConfig(m=m, init_seed=derive_seed(seed, "model-init"), **fields)


def _train_config_from(cfg, args, seed):
    fields = dict(cfg.get("train", {}))
    fields["seed"] = derive_seed(seed, "training")
    for flag, key in (("no_self_condition", "use_self_condition"),
                      ("no_adversarial", "use_adversarial"),
                      ("no_maml", "use_maml")):
        if getattr(args, flag, False):
            fields[key] = False
    return training.TrainConfig(**fields)


def cmd_train(args, cfg, out):
    seed = _cfg_get(cfg, "seed", args.seed, 0)
    raw = dataset.load_csv(args.data, has_header=args.header)
    normalized, stats = dataset.fit_normalize(raw, eps=cfg.get("eps", dataset.DEFAULT_EPS))
    model_cfg = _model_config_from(cfg, raw.m, seed)
    windows = dataset.make_windows(normalized, model_cfg.window_size,
                                   model_cfg.context_cap)
    train_b, val_b = dataset.split_train_val(windows, cfg.get("split_ratio", 0.8))
    train_cfg = _train_config_from(cfg, args, seed)
    model = TranAD(model_cfg)
    report = training.fit(model, train_b, val_b, train_cfg,
                          progress=not args.quiet)
    out.write_binary(os.path.join(args.out, "checkpoint.bin"),
                     lambda p: model.save(p, extra={"train_config": train_cfg.to_dict()}))
    out.write_text(os.path.join(args.out, "stats.json"), json.dumps({
        "min": stats.min.tolist(), "max": stats.max.tolist(), "eps": stats.eps,
    }, sort_keys=True) + "\n")
    out.write_text(os.path.join(args.out, "train_report.json"),
                   json.dumps(report.to_dict(include_timing=False),
                              indent=2, sort_keys=True) + "\n")
    return 0


def _load_stats(path):
    with open(path) as f:
        d = json.load(f)
    return dataset.NormStats(min=np.array(d["min"]), max=np.array(d["max"]),
                             eps=d["eps"])


def cmd_detect(args, cfg, out):
    model, _ = TranAD.load(args.checkpoint)
    stats = _load_stats(args.stats)
    train_raw = dataset.load_csv(args.data, has_header=args.header)
    test_raw = dataset.load_csv(args.test, has_header=args.header)
    for raw in (train_raw, test_raw):
        if raw.m != model.config.m:
            raise ConfigMismatch(
                f"checkpoint expects m={model.config.m}, data has m={raw.m}")
    train_ts = dataset.apply_normalize(train_raw, stats)
    test_ts = dataset.apply_normalize(test_raw, stats)
    score_reduce = cfg.get("score_reduce", "last_row")

    pot_fields = dict(cfg.get("pot", {}))
    if args.pot_q is not None:
        pot_fields["risk"] = args.pot_q
    if args.pot_low_quantile is not None:
        pot_fields["low_quantile"] = args.pot_low_quantile
    pot_cfg = pot.PotConfig(**pot_fields)

    train_scores = detection.score_series(model, train_ts, score_reduce)
    thresholds = pot.fit_thresholds(train_scores, pot_cfg)
    records = detection.detect_stream(model, test_ts, thresholds, score_reduce)

    m = model.config.m
    lines = ["# threshold_model " + json.dumps(thresholds.to_dict(), sort_keys=True)]
    cols = ["t"] + [f"s_{i + 1}" for i in range(m)] + \
           [f"y_{i + 1}" for i in range(m)] + ["y"]
    lines.append(",".join(cols))
    for rec in records:
        row = [str(rec.timestamp)]
        row += [FLOAT_FMT % s for s in rec.scores]
        row += [str(int(v)) for v in rec.labels]
        row.append(str(rec.label))
        lines.append(",".join(row))
    out.write_text(os.path.join(args.out, "detection.csv"), "\n".join(lines) + "\n")
    return 0


def read_detection_report(path):
    """Parse a detection.csv back into (threshold_model, scores, dim_labels,
    agg_labels)."""
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f]
    header_json = lines[0].split(" ", 2)[2]
    thresholds = pot.ThresholdModel.from_dict(json.loads(header_json))
    m = len(thresholds.dims)
    scores, dim_labels, agg = [], [], []
    for ln in lines[2:]:
        if not ln:
            continue
        parts = ln.split(",")
        scores.append([float(x) for x in parts[1:1 + m]])
        dim_labels.append([int(x) for x in parts[1 + m:1 + 2 * m]])
        agg.append(int(parts[-1]))
    return thresholds, np.array(scores), np.array(dim_labels, dtype=np.int8), \
        np.array(agg, dtype=np.int8)


def cmd_eval(args, cfg, out):
    _, scores, dim_pred, agg_pred = read_detection_report(args.report)
    result = {"detection": None}
    if args.labels:
        dim_truth = dataset.load_csv(args.labels).values.astype(np.int8)
        if dim_truth.shape[0] != scores.shape[0]:
            raise TranadError(
                f"label rows {dim_truth.shape[0]} != report rows {scores.shape[0]}")
        agg_truth = dim_truth.any(axis=1).astype(np.int8)
        agg_scores = scores.max(axis=1)
        records = [detection.ScoreRecord(timestamp=t, scores=scores[t],
                                         labels=dim_pred[t], label=int(agg_pred[t]))
                   for t in range(scores.shape[0])]
        rankings = detection.diagnose(records)
        raw = metrics.evaluate(agg_scores, agg_pred, agg_truth,
                               point_adjusted=False, rankings=rankings,
                               dim_truth=dim_truth)
        adjusted = metrics.evaluate(agg_scores, agg_pred, agg_truth,
                                    point_adjusted=True, rankings=rankings,
                                    dim_truth=dim_truth)
        result = {"raw": raw.to_dict(), "point_adjusted": adjusted.to_dict()}
    else:
        print("no labels given: detection metrics skipped", file=sys.stderr)
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    out.write_text(os.path.join(args.out, "eval.json"), text)
    if "raw" in result:
        keys = sorted(result["raw"])
        csv_lines = ["mode," + ",".join(keys)]
        for mode in ("raw", "point_adjusted"):
            csv_lines.append(mode + "," + ",".join(
                str(result[mode][k]) for k in keys))
        out.write_text(os.path.join(args.out, "eval.csv"), "\n".join(csv_lines) + "\n")
    return 0


def cmd_inspect(args, cfg, out):
    model, _ = TranAD.load(args.checkpoint)
    stats = _load_stats(args.stats)
    raw = dataset.load_csv(args.data, has_header=args.header)
    if raw.m != model.config.m:
        raise ConfigMismatch(
            f"checkpoint expects m={model.config.m}, data has m={raw.m}")
    ts = dataset.apply_normalize(raw, stats)
    batch = dataset.make_windows(ts, model.config.window_size, model.config.context_cap)
    K = model.config.window_size
    att_lines = [
        "# masked self-attention weights of the last window row; "
        f"one row per (timestamp, head) with K={K} weights",
        "t,head," + ",".join(f"w_{k + 1}" for k in range(K)),
    ]
    focus_lines = [
        "# phase-2 focus score at the last window row; one row per timestamp "
        f"with m={model.config.m} entries",
        "t," + ",".join(f"f_{d + 1}" for d in range(model.config.m)),
    ]
    with ad.no_grad():
        for W, C, idx in training.batch_groups(batch, 256):
            res = model.forward_two_phase(W, C, training=False, want_weights=True)
            weights = res.attention_maps["window_self_phase2"]  # (B, h, K, K)
            focus = res.focus.data
            for b, t in enumerate(idx):
                for h in range(weights.shape[1]):
                    att_lines.append(f"{t},{h}," + ",".join(
                        FLOAT_FMT % w for w in weights[b, h, -1]))
                focus_lines.append(f"{t}," + ",".join(
                    FLOAT_FMT % v for v in focus[b, -1]))
    out.write_text(os.path.join(args.out, "attention.csv"), "\n".join(att_lines) + "\n")
    out.write_text(os.path.join(args.out, "focus.csv"), "\n".join(focus_lines) + "\n")
    return 0


# -- argument parsing ---------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--header", action="store_true",
                   help="input CSVs carry a header row")
    p.add_argument("--quiet", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tranad",
        description="Multivariate time-series anomaly detection and diagnosis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic series")
    _add_common(p)

    p = sub.add_parser("train", help="train a model on a values CSV")
    _add_common(p)
    p.add_argument("--data", required=True, help="training values CSV")
    p.add_argument("--no-self-condition", dest="no_self_condition",
                   action="store_true")
    p.add_argument("--no-adversarial", dest="no_adversarial", action="store_true")
    p.add_argument("--no-maml", dest="no_maml", action="store_true")

    p = sub.add_parser("detect", help="score a test series against a checkpoint")
    _add_common(p)
    p.add_argument("--data", required=True, help="training values CSV (POT fit)")
    p.add_argument("--test", required=True, help="test values CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stats", required=True, help="normalization stats JSON")
    p.add_argument("--pot-q", type=float, default=None)
    p.add_argument("--pot-low-quantile", type=float, default=None)

    p = sub.add_parser("eval", help="metrics over a detection report")
    _add_common(p)
    p.add_argument("--report", required=True, help="detection.csv from `detect`")
    p.add_argument("--labels", default=None, help="ground-truth labels CSV")

    p = sub.add_parser("inspect", help="dump attention and focus scores")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--data", required=True)

    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    os.environ.setdefault("TRANAD_THREADS", "1")  # reference mode is sequential
    cfg = _load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    out = _OutputTracker()
    try:
        return COMMANDS[args.command](args, cfg, out)
    except TranadError as exc:
        out.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        out.cleanup()
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
