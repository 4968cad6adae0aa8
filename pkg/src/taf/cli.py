"""``taf`` command line: synth, train, segment, eval, inspect.

Settings resolve in the order defaults < ``--config`` file < ``TAF_*``
environment variables < command-line flags. Every command writes the
resolved settings to ``<out-dir>/config.txt``, which can be passed back via
``--config`` to reproduce the run.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import network as nw
from .datagen import SynthConfig, generate, load_dataset, read_labels, save_dataset
from .evaluation import evaluate
from .inference import DecodeConfig, segment_video
from .ot import SinkhornConfig, build_fixed_order_prior, build_permutation_prior, default_sigma
from .pseudo_labels import (alignment_pseudo_labels, estimate_transcript, frame_pseudo_labels,
                            segment_pseudo_labels)
from .svg import heatmap, segmentation_bands
from .training import TrainConfig, train
from .types import Transcript, ValidationError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5


class CLIError(Exception):
    def __init__(self, kind, message, code):
        super().__init__(message)
        self.kind = kind
        self.code = code


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    if text is None or str(text).strip().lower() in ("", "none", "auto"):
        return None
    return float(text)


# key -> (type, default, help); keys double as flag names (underscores -> dashes)
OPTIONS = {
    "out_dir": (str, None, "output directory"),
    "data_dir": (str, None, "dataset directory (manifest.json, features/, labels/)"),
    "checkpoint": (str, None, "model checkpoint path"),
    "pred_dir": (str, None, "directory of per-video prediction CSVs"),
    "activity": (str, None, "activity to train on when the dataset holds several"),
    # synthetic data
    "videos": (int, 20, "number of synthetic videos"),
    "k": (int, 5, "number of actions"),
    "input_dim": (int, 16, "feature dimension"),
    "min_frames": (int, 100, "shortest video"),
    "max_frames": (int, 200, "longest video"),
    "cluster_sep": (float, 6.0, "minimum distance between action centers"),
    "noise_sigma": (float, 1.0, "per-dimension feature noise"),
    "permute_prob": (float, 0.0, "probability a video uses a shuffled action order"),
    "missing_prob": (float, 0.0, "probability each non-first action is dropped"),
    "seed": (int, 0, "random seed"),
    # training
    "stage1_epochs": (int, 30, "frame-loss-only epochs"),
    "stage2_epochs": (int, 70, "combined-loss epochs"),
    "lr": (float, 1e-3, "Adam learning rate"),
    "weight_decay": (float, 1e-5, "decoupled weight decay"),
    "alpha": (float, 1.0, "segment loss weight"),
    "beta": (float, 1.0, "alignment loss weight"),
    "rho": (float, 0.07, "Sinkhorn regularisation"),
    "sinkhorn_iterations": (int, 3, "Sinkhorn sweeps per pseudo-label"),
    "sigma": (_opt_float, None, "prior band width in normalised time (default 0.75/K)"),
    "segment_order": (str, "T", "transcript for segment pseudo-labels: T or A"),
    "align_order": (str, "T", "transcript for alignment pseudo-labels: T or A"),
    "dim": (int, 30, "model width"),
    "tau": (float, 0.1, "frame softmax temperature"),
    "tau_align": (float, 1e-3, "alignment softmax temperature"),
    "encoder_dropout": (float, 0.3, "encoder dropout (stage 2)"),
    "decoder_dropout": (float, 0.1, "decoder dropout (stage 2)"),
    # decoding
    "source": (str, "align", "probabilities for Viterbi: align or frame"),
    "min_seg_frames": (int, 1, "minimum frames per decoded segment"),
    "workers": (int, 1, "worker processes for segmentation"),
    "svg": (_bool, True, "write SVG plots"),
    # inspect
    "frames": (int, 100, "frames for prior dumps"),
    "transcript": (str, None, "comma-separated transcript for prior dumps"),
    "video": (str, None, "video id for code/attention dumps"),
}

COMMAND_KEYS = {
    "synth": ["out_dir", "videos", "k", "input_dim", "min_frames", "max_frames", "cluster_sep",
              "noise_sigma", "permute_prob", "missing_prob", "seed"],
    "train": ["out_dir", "data_dir", "checkpoint", "activity", "seed", "stage1_epochs",
              "stage2_epochs", "lr", "weight_decay", "alpha", "beta", "rho",
              "sinkhorn_iterations", "sigma", "segment_order", "align_order", "dim", "tau",
              "tau_align", "encoder_dropout", "decoder_dropout"],
    "segment": ["out_dir", "data_dir", "checkpoint", "source", "min_seg_frames", "workers", "svg"],
    "eval": ["out_dir", "data_dir", "pred_dir"],
    "inspect": ["out_dir", "data_dir", "checkpoint", "frames", "k", "sigma", "transcript",
                "video", "svg"],
}
REQUIRED = {
    "synth": ["out_dir"],
    "train": ["out_dir", "data_dir"],
    "segment": ["out_dir", "data_dir", "checkpoint"],
    "eval": ["out_dir", "data_dir", "pred_dir"],
    "inspect": ["out_dir"],
}
INSPECT_WHAT = ("priors", "codes", "attention")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, keys in COMMAND_KEYS.items():
        p = sub.add_parser(cmd)
        if cmd == "inspect":
            p.add_argument("what", choices=INSPECT_WHAT)
        p.add_argument("--config", default=None, help="flat key=value settings file")
        for key in keys:
            _, default, help_text = OPTIONS[key]
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=argparse.SUPPRESS,
                           help=f"{help_text} (default: {default})")
    return parser


def _convert(key, raw, origin):
    conv = OPTIONS[key][0]
    try:
        return conv(raw)
    except (TypeError, ValueError) as exc:
        raise CLIError("invalid_config", f"{origin}: bad value for {key}: {raw!r} ({exc})",
                       EXIT_CONFIG) from None


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CLIError("missing_file", f"config file {path} not found", EXIT_MISSING)
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CLIError("invalid_config", f"{path}:{lineno}: expected key=value", EXIT_CONFIG)
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = (value, f"{path}:{lineno}")
    return out


def resolve_settings(command, args: argparse.Namespace, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    keys = COMMAND_KEYS[command]
    settings = {k: OPTIONS[k][1] for k in keys}
    if getattr(args, "config", None):
        for key, (raw, origin) in read_config_file(args.config).items():
            if key not in keys:
                raise CLIError("invalid_config", f"{origin}: unknown key {key!r} for {command}",
                               EXIT_CONFIG)
            settings[key] = None if raw == "None" else _convert(key, raw, origin)
    for name, raw in environ.items():
        if not name.startswith("TAF_"):
            continue
        key = name[4:].lower()
        if key not in OPTIONS:
            raise CLIError("invalid_config", f"unknown environment override {name}", EXIT_CONFIG)
        if key in keys:
            settings[key] = _convert(key, raw, name)
    for key in keys:
        if hasattr(args, key):
            settings[key] = _convert(key, getattr(args, key), "--" + key.replace("_", "-"))
    for key in REQUIRED[command]:
        if settings.get(key) in (None, ""):
            raise CLIError("invalid_config", f"missing required setting {key}", EXIT_CONFIG)
    return settings


def write_config_echo(out_dir: Path, command, settings: dict) -> None:
    lines = [f"# taf {command}"]
    lines += [f"{k}={settings[k]}" for k in sorted(settings)]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


# ----------------------------------------------------------------------------
# commands


def cmd_synth(s: dict) -> int:
    cfg = SynthConfig(num_videos=s["videos"], num_actions=s["k"], input_dim=s["input_dim"],
                      min_frames=s["min_frames"], max_frames=s["max_frames"],
                      cluster_sep=s["cluster_sep"], noise_sigma=s["noise_sigma"],
                      permute_prob=s["permute_prob"], missing_prob=s["missing_prob"],
                      seed=s["seed"])
    out = Path(s["out_dir"])
    save_dataset(generate(cfg), out)
    print(f"wrote {cfg.num_videos} videos to {out}")
    return EXIT_OK


def _select_activity(dataset, activity):
    acts = sorted({v.activity for v in dataset.videos})
    if activity is None:
        if len(acts) != 1:
            raise CLIError("invalid_config", f"dataset holds activities {acts}; pass --activity",
                           EXIT_CONFIG)
        activity = acts[0]
    if activity not in dataset.num_actions:
        raise CLIError("invalid_config", f"unknown activity {activity!r}", EXIT_CONFIG)
    return activity, [v for v in dataset.videos if v.activity == activity]


def _train_config(s) -> TrainConfig:
    return TrainConfig(stage1_epochs=s["stage1_epochs"], stage2_epochs=s["stage2_epochs"],
                       lr=s["lr"], weight_decay=s["weight_decay"], alpha=s["alpha"],
                       beta=s["beta"], seed=s["seed"], rho=s["rho"],
                       sinkhorn_iterations=s["sinkhorn_iterations"], sigma=s["sigma"],
                       segment_order=s["segment_order"], align_order=s["align_order"])


def cmd_train(s: dict) -> int:
    out = Path(s["out_dir"])
    dataset = load_dataset(s["data_dir"])
    activity, videos = _select_activity(dataset, s["activity"])
    k = dataset.num_actions[activity]
    model_cfg = nw.ModelConfig(input_dim=videos[0].features.dim, num_actions=k, dim=s["dim"],
                               tau=s["tau"], tau_align=s["tau_align"],
                               encoder_dropout=s["encoder_dropout"],
                               decoder_dropout=s["decoder_dropout"])
    cfg = _train_config(s)
    result = train([v.features for v in videos], cfg, model_cfg)
    ckpt = Path(s["checkpoint"]) if s["checkpoint"] else out / "model.ckpt"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    nw.save_checkpoint(ckpt, result.params, {
        "format": "taf-checkpoint", "activity": activity, "model": model_cfg.to_dict(),
        "train": cfg.to_dict()})
    with open(out / "loss_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "video_id", "L_f", "L_s", "L_a", "L"])
        for r in result.log:
            w.writerow([r.epoch, r.video_id, repr(r.L_f), repr(r.L_s), repr(r.L_a), repr(r.L)])
    means = result.epoch_means()
    print(f"trained {len(means)} epochs on {len(videos)} videos; "
          f"loss {means[0]:.4f} -> {means[-1]:.4f}; checkpoint {ckpt}")
    return EXIT_OK


def _load_model(path):
    path = Path(path)
    if not path.exists():
        raise CLIError("missing_file", f"checkpoint {path} not found", EXIT_MISSING)
    params, config = nw.load_checkpoint(path)
    model_cfg = nw.ModelConfig(**config["model"])
    train_cfg = TrainConfig(**config["train"])
    return params, model_cfg, train_cfg, config


def _segment_one(job):
    video, params, model_cfg, decode_cfg, train_cfg = job
    res = segment_video(video.features, params, model_cfg, decode_cfg, train_cfg.sinkhorn,
                        train_cfg.sigma_for(model_cfg.num_actions))
    return video.video_id, res.segmentation, res.transcript


def cmd_segment(s: dict) -> int:
    out = Path(s["out_dir"])
    params, model_cfg, train_cfg, config = _load_model(s["checkpoint"])
    dataset = load_dataset(s["data_dir"])
    videos = [v for v in dataset.videos if v.activity == config.get("activity", v.activity)]
    for v in videos:
        if v.features.dim != model_cfg.input_dim:
            raise ValidationError(f"dimension mismatch: {v.video_id} has {v.features.dim} "
                                  f"features, model expects {model_cfg.input_dim}")
    source = s["source"]
    if train_cfg.stage2_epochs == 0 and source == "align":
        source = "frame"
    decode_cfg = DecodeConfig(source=source, min_seg_frames=s["min_seg_frames"])
    jobs = [(v, params, model_cfg, decode_cfg, train_cfg) for v in videos]
    if s["workers"] > 1:
        with ProcessPoolExecutor(max_workers=s["workers"]) as pool:
            results = list(pool.map(_segment_one, jobs))
    else:
        results = [_segment_one(j) for j in jobs]
    by_id = {v.video_id: v for v in videos}
    for vid, seg, transcript in results:
        with open(out / f"{vid}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame_index", "label"])
            w.writerows(enumerate(seg.framewise.tolist()))
        payload = {"video_id": vid, "transcript": list(transcript),
                   "segments": [list(x) for x in seg.segments]}
        (out / f"{vid}.json").write_text(json.dumps(payload) + "\n")
        if s["svg"]:
            bands = []
            if by_id[vid].labels is not None:
                bands.append(("ground truth", by_id[vid].labels.framewise))
            bands.append(("prediction", seg.framewise))
            (out / f"{vid}.svg").write_text(segmentation_bands(bands))
    print(f"segmented {len(results)} videos into {out}")
    return EXIT_OK


def read_prediction_csv(path) -> np.ndarray:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["frame_index", "label"]:
        raise ValidationError(f"{path}: expected header frame_index,label")
    labels = np.empty(len(rows) - 1, dtype=np.int64)
    for n, row in enumerate(rows[1:], start=2):
        try:
            idx, lab = int(row[0]), int(row[1])
        except (ValueError, IndexError):
            raise ValidationError(f"{path}: line {n}: malformed row") from None
        if idx != n - 2:
            raise ValidationError(f"{path}: line {n}: frame index {idx} out of sequence")
        labels[idx] = lab
    return labels


def cmd_eval(s: dict) -> int:
    out = Path(s["out_dir"])
    dataset = load_dataset(s["data_dir"], require_labels=True)
    pred_dir = Path(s["pred_dir"])
    gts, preds, acts = [], [], []
    for v in dataset.videos:
        path = pred_dir / f"{v.video_id}.csv"
        if not path.exists():
            continue
        pred = read_prediction_csv(path)
        if len(pred) != len(v.labels):
            raise ValidationError(f"dimension mismatch: {v.video_id} has {len(v.labels)} frames, "
                                  f"prediction has {len(pred)}")
        gts.append(v.labels.framewise)
        preds.append(pred)
        acts.append(v.activity)
    if not gts:
        raise CLIError("missing_file", f"no predictions found in {pred_dir}", EXIT_MISSING)
    report = evaluate(gts, preds, acts, dataset.num_actions)
    (out / "report.json").write_text(report.to_json() + "\n")
    np.savetxt(out / "confusion.csv", report.confusion, fmt="%d", delimiter=",")
    print(f"{'activity':<16}{'videos':>8}{'MOF':>8}{'F1@50':>8}")
    for act, row in report.per_activity.items():
        print(f"{act:<16}{row['videos']:>8}{row['mof']:>8.3f}{row['f1']:>8.3f}")
    print(f"{'overall':<16}{len(gts):>8}{report.mof:>8.3f}{report.f1:>8.3f}")
    return EXIT_OK


def _dump(out: Path, name: str, matrix, write_svg: bool, title=None):
    np.savetxt(out / f"{name}.csv", matrix, delimiter=",", fmt="%.10g")
    if write_svg:
        (out / f"{name}.svg").write_text(heatmap(matrix, title or name))


def cmd_inspect(s: dict, what: str) -> int:
    out = Path(s["out_dir"])
    if what == "priors":
        k, frames = s["k"], s["frames"]
        sigma = s["sigma"] if s["sigma"] is not None else default_sigma(k)
        _dump(out, "prior_fixed", build_fixed_order_prior(frames, k, sigma).values, s["svg"])
        if s["transcript"]:
            t = Transcript(int(a) for a in s["transcript"].split(","))
            _dump(out, "prior_transcript",
                  build_permutation_prior(frames, k, sigma, t).values, s["svg"])
        print(f"wrote priors to {out}")
        return EXIT_OK
    for key in ("data_dir", "checkpoint", "video"):
        if not s[key]:
            raise CLIError("invalid_config", f"inspect {what} needs --{key.replace('_', '-')}",
                           EXIT_CONFIG)
    params, model_cfg, train_cfg, _ = _load_model(s["checkpoint"])
    dataset = load_dataset(s["data_dir"])
    matches = [v for v in dataset.videos if v.video_id == s["video"]]
    if not matches:
        raise CLIError("missing_file", f"video {s['video']} not in dataset", EXIT_MISSING)
    x = matches[0].features.frames
    if x.shape[1] != model_cfg.input_dim:
        raise ValidationError(f"dimension mismatch: {x.shape[1]} != {model_cfg.input_dim}")
    e, enc = nw.encode(x, params, model_cfg)
    k = model_cfg.num_actions
    sigma = train_cfg.sigma_for(k)
    vid = s["video"]
    if what == "codes":
        q_f = frame_pseudo_labels(e, params["proto.C"], train_cfg.sinkhorn, sigma)
        t = estimate_transcript(q_f)
        q_s = segment_pseudo_labels(t, k)
        q_a = alignment_pseudo_labels(e, params["proto.C"], t, train_cfg.sinkhorn, sigma)
        for name, m in (("Q_f", q_f.values), ("Q_s", q_s.values), ("Q_a", q_a.values)):
            _dump(out, f"{vid}_{name}", m, s["svg"], f"{vid} {name} (T={list(t)})")
    else:
        for layer, cache in enumerate(enc.layers):
            _dump(out, f"{vid}_encoder_attention_{layer}", cache[1]["a"], s["svg"])
        q_f = frame_pseudo_labels(e, params["proto.C"], train_cfg.sinkhorn, sigma)
        t = estimate_transcript(q_f)
        _, _, dec = nw.decode(t, e, params, model_cfg)
        for layer, cache in enumerate(dec.layers):
            _dump(out, f"{vid}_decoder_cross_attention_{layer}", cache[4]["a"].T, s["svg"])
    print(f"wrote {what} dumps for {vid} to {out}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "segment": cmd_segment, "eval": cmd_eval}


def run(argv=None, environ=None) -> int:
    args = build_parser().parse_args(argv)
    settings = resolve_settings(args.command, args, environ)
    out = Path(settings["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    header = f"{args.command} {args.what}" if args.command == "inspect" else args.command
    write_config_echo(out, header, settings)
    if args.command == "inspect":
        return cmd_inspect(settings, args.what)
    return COMMANDS[args.command](settings)


def main(argv=None) -> int:
    try:
        code = run(argv)
    except CLIError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except FileNotFoundError as exc:
        return _fail("missing_file", str(exc), EXIT_MISSING)
    except ValidationError as exc:
        return _fail("invalid_data", str(exc), EXIT_DATA)
    except (FloatingPointError, ArithmeticError, RuntimeError) as exc:
        return _fail("numerical", str(exc), EXIT_NUMERIC)
    return code


def _fail(kind, message, code) -> int:
    msg = " ".join(str(message).split())
    print(f"taf: error kind={kind} code={code} message={json.dumps(msg)}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
