"""Command-line interface.

Subcommands drive the two-step pipeline end to end:

  gen-synth     render a synthetic scene with labeled anomaly spans
  train-itae    step one: fit the reconstruction model on normal clips
  train-nf      step two: fit density models on frozen features
  score         write per-frame score CSVs for each video
  eval          AUC / EER from score CSVs
  sweep-lambda  re-fuse scores over a grid of fusion weights

Every RunConfig key is also a flag (--clip-len, --tau, ...) overriding the
config file. Exit codes: 0 success, 2 configuration error, 3 numeric abort.
"""

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from .autoencoder import AutoencoderConfig, TwoPathAutoencoder
from .checkpoint import checkpoint_hash, load_checkpoint, save_checkpoint
from .clips import ClipSpec, iter_clips, load_video
from .config import (
    PRESETS,
    RunConfig,
    apply_preset,
    parse_config,
    serialize_config,
    write_config,
)
from .errors import ConfigError, NumericError, TrainingAborted
from .flow import FlowConfig, FlowStack
from .pipeline import collect_flow_samples, score_video
from .scoring import fuse, minmax_normalize, roc_auc_eer
from .synthetic import (
    AnomalySpan,
    SceneConfig,
    generate_scene,
    read_labels,
    write_scene,
)
from .train import TrainConfig, train_autoencoder, train_flow

SCORE_HEADER = ["frame_index", "recon", "nll_static", "nll_dynamic", "fused", "label"]
LAMBDA_GRID = (0.1, 0.3, 0.5, 0.7, 0.9, 1.0)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except (TrainingAborted, NumericError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3


def build_parser():
    parser = argparse.ArgumentParser(
        prog="flowvad",
        description="Two-path video autoencoder with flow-based normality scoring.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="render a synthetic labeled scene")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-frames", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--objects", type=int, default=3)
    p.add_argument("--noise-sigma", type=float, default=0.01)
    p.add_argument(
        "--anomaly",
        action="append",
        default=[],
        metavar="START:END:MODE",
        help="labeled span, repeatable (modes: speed, shape, reverse)",
    )
    p.set_defaults(func=cmd_gen_synth)

    for name, func in (
        ("train-itae", cmd_train_itae),
        ("train-nf", cmd_train_nf),
        ("score", cmd_score),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--preset", choices=sorted(PRESETS))
        _add_config_flags(p)
        if name != "train-itae":
            p.add_argument("--itae-dir", help="reconstruction checkpoint directory")
        if name == "score":
            p.add_argument("--static-dir", help="static density checkpoint directory")
            p.add_argument("--dynamic-dir", help="dynamic density checkpoint directory")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="AUC/EER from score CSVs")
    p.add_argument("csvs", nargs="+")
    p.add_argument("--out", help="also write the metrics record here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-lambda", help="metrics over a fusion-weight grid")
    p.add_argument("csvs", nargs="+")
    p.add_argument("--grid", default=",".join(str(v) for v in LAMBDA_GRID))
    p.add_argument("--out", help="also write the per-weight table here")
    p.set_defaults(func=cmd_sweep)

    return parser


def _add_config_flags(parser):
    group = parser.add_argument_group("configuration overrides")
    for field in dataclasses.fields(RunConfig):
        group.add_argument(
            "--" + field.name.replace("_", "-"),
            dest=f"cfg_{field.name}",
            default=None,
            metavar=str(field.type).upper() if isinstance(field.type, str) else "V",
        )


def _resolve_config(args):
    overrides = {}
    for field in dataclasses.fields(RunConfig):
        value = getattr(args, f"cfg_{field.name}", None)
        if value is not None:
            overrides[field.name] = value
    if args.config:
        with open(args.config) as fh:
            text = fh.read()
    else:
        text = ""
    config = parse_config(text)
    if args.preset:
        config = apply_preset(config, args.preset)
    if overrides:
        config = parse_config(serialize_config(config), overrides=overrides)
    return config


def _ae_config(config):
    return AutoencoderConfig(
        in_channels=config.in_channels,
        tau=config.tau,
        dynamic_path=config.dynamic_path,
    )


def _flow_config(config, channels):
    return FlowConfig(
        channels=channels,
        levels=config.flow_levels,
        steps=config.flow_steps,
        hidden=config.flow_hidden,
    )


def _clip_spec(config, source=None, stride=None):
    return ClipSpec(
        source=source if source is not None else config.data_path,
        clip_len=config.clip_len,
        tau=config.tau,
        stride=stride if stride is not None else config.clip_stride,
        resize=config.resize,
        color=config.color,
    )


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def cmd_gen_synth(args):
    spans = []
    for text in args.anomaly:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"--anomaly wants START:END:MODE, got {text!r}")
        try:
            spans.append(AnomalySpan(int(parts[0]), int(parts[1]), parts[2]))
        except ValueError:
            raise ConfigError(f"--anomaly has non-integer bounds: {text!r}") from None
    scene = SceneConfig(
        canvas=args.canvas,
        n_objects=args.objects,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
    )
    frames, labels = generate_scene(scene, args.n_frames, spans)
    frame_dir = write_scene(args.out_dir, frames, labels)
    record = dataclasses.asdict(scene)
    record.update(n_frames=args.n_frames, anomalies=args.anomaly)
    with open(os.path.join(args.out_dir, "gen.json"), "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(frames)} frames to {frame_dir} ({int(labels.sum())} abnormal)")
    return 0


def cmd_train_itae(args):
    config = _resolve_config(args)
    if not config.data_path:
        raise ConfigError("data_path is required for train-itae")
    os.makedirs(config.out_dir, exist_ok=True)
    clips = []
    for source, _ in _video_sources(config.data_path):
        clips.extend(iter_clips(_clip_spec(config, source=source)))
    if not clips:
        raise ConfigError(f"no clips of length {config.clip_len} in {config.data_path}")
    model = TwoPathAutoencoder(_ae_config(config), np.random.default_rng(config.seed))
    curve = train_autoencoder(
        model,
        clips,
        TrainConfig(
            steps=config.itae_steps,
            batch_size=config.itae_batch,
            lr=config.itae_lr,
            seed=config.seed,
        ),
    )
    ckpt = os.path.join(config.out_dir, "itae")
    save_checkpoint(ckpt, model.named_parameters(), _ae_config(config), extra={"kind": "itae"})
    _write_rows(
        os.path.join(config.out_dir, "itae_loss.csv"),
        ["step", "l2", "ms_ssim", "gradient", "total"],
        [[r["step"], repr(r["l2"]), repr(r["ms_ssim"]), repr(r["gradient"]), repr(r["total"])]
         for r in curve],
    )
    write_config(os.path.join(config.out_dir, "config.cfg"), config)
    print(f"trained {config.itae_steps} steps; checkpoint at {ckpt}")
    print(f"final loss {curve[-1]['total']:.6f} (from {curve[0]['total']:.6f})")
    return 0


def _load_frozen_model(config, itae_dir):
    model = TwoPathAutoencoder(_ae_config(config), np.random.default_rng(config.seed))
    model.load_state(load_checkpoint(itae_dir, _ae_config(config)))
    model.freeze()
    return model


def cmd_train_nf(args):
    config = _resolve_config(args)
    if not config.data_path:
        raise ConfigError("data_path is required for train-nf")
    if not (config.use_static_flow or config.use_dynamic_flow):
        raise ConfigError("train-nf needs use_static_flow or use_dynamic_flow")
    itae_dir = args.itae_dir or os.path.join(config.out_dir, "itae")
    model = _load_frozen_model(config, itae_dir)
    hash_before = checkpoint_hash(itae_dir)

    statics = []
    dynamics = []
    for source, _ in _video_sources(config.data_path):
        video = load_video(_clip_spec(config, source=source))
        s, d = collect_flow_samples(
            model,
            video,
            config,
            need_static=config.use_static_flow,
            need_dynamic=config.use_dynamic_flow,
        )
        if s is not None:
            statics.append(s)
        if d is not None:
            dynamics.append(d)

    train_cfg = TrainConfig(
        steps=config.nf_steps,
        batch_size=config.nf_batch,
        lr=config.nf_lr,
        seed=config.seed,
    )
    os.makedirs(config.out_dir, exist_ok=True)
    for name, samples, channels, enabled in (
        ("static", statics, 3, config.use_static_flow),
        ("dynamic", dynamics, 2, config.use_dynamic_flow),
    ):
        if not enabled:
            continue
        if not samples:
            raise ConfigError(f"no {name} feature samples collected")
        data = np.concatenate(samples, axis=0)
        stack = FlowStack(
            _flow_config(config, channels), np.random.default_rng(config.seed + 1)
        )
        curve = train_flow(stack, data, train_cfg)
        ckpt = os.path.join(config.out_dir, f"nf_{name}")
        save_checkpoint(
            ckpt, stack.named_parameters(), _flow_config(config, channels),
            extra={"kind": f"nf_{name}"},
        )
        _write_rows(
            os.path.join(config.out_dir, f"nf_{name}_loss.csv"),
            ["step", "nll"],
            [[r["step"], repr(r["nll"])] for r in curve],
        )
        print(
            f"{name} density model: {len(data)} samples, final nll "
            f"{curve[-1]['nll']:.4f}; checkpoint at {ckpt}"
        )

    if checkpoint_hash(itae_dir) != hash_before:
        raise RuntimeError(f"frozen checkpoint {itae_dir} changed during step two")
    write_config(os.path.join(config.out_dir, "config.cfg"), config)
    return 0


def _video_sources(data_path):
    """Resolve a data path to a list of (frames source, labels path or None).

    Accepts: a packed tensor file; a directory of frames; a directory with a
    frames/ subdirectory (labels.txt beside it); or a directory of such video
    directories, one video each.
    """
    if os.path.isfile(data_path):
        return [(data_path, None)]
    entries = sorted(os.listdir(data_path))
    if any(e.lower().endswith((".pgm", ".ppm")) for e in entries):
        return [(data_path, None)]
    if "frames" in entries:
        labels = os.path.join(data_path, "labels.txt")
        return [(os.path.join(data_path, "frames"), labels if os.path.exists(labels) else None)]
    videos = []
    for entry in entries:
        sub = os.path.join(data_path, entry)
        if os.path.isdir(sub):
            videos.extend(
                (src, lab) for src, lab in _video_sources(sub)
            )
        elif entry.lower().endswith(".t5"):
            videos.append((sub, None))
    if not videos:
        raise ConfigError(f"no videos found under {data_path}")
    return videos


def _load_flow(config, directory, channels):
    stack = FlowStack(
        _flow_config(config, channels), np.random.default_rng(config.seed + 1)
    )
    stack.load_state(load_checkpoint(directory, _flow_config(config, channels)))
    return stack


def cmd_score(args):
    config = _resolve_config(args)
    if not config.data_path:
        raise ConfigError("data_path is required for score")
    itae_dir = args.itae_dir or os.path.join(config.out_dir, "itae")
    model = _load_frozen_model(config, itae_dir)
    static_flow = None
    dynamic_flow = None
    if config.use_static_flow:
        static_dir = args.static_dir or os.path.join(config.out_dir, "nf_static")
        static_flow = _load_flow(config, static_dir, 3)
    if config.use_dynamic_flow:
        dynamic_dir = args.dynamic_dir or os.path.join(config.out_dir, "nf_dynamic")
        dynamic_flow = _load_flow(config, dynamic_dir, 2)

    score_dir = os.path.join(config.out_dir, "scores")
    os.makedirs(score_dir, exist_ok=True)
    written = []
    for source, label_path in _video_sources(config.data_path):
        if config.label_path:
            label_path = config.label_path
        video = load_video(_clip_spec(config, source=source))
        series = score_video(
            model, video, config, static_flow=static_flow, dynamic_flow=dynamic_flow
        )
        total = video.shape[2]
        if label_path:
            labels = read_labels(label_path)
            if len(labels) != total:
                raise ConfigError(
                    f"{label_path}: {len(labels)} labels for {total} frames"
                )
        else:
            labels = np.full(total, -1, dtype=int)
        name = _video_name(source)
        path = os.path.join(score_dir, f"{name}.csv")
        rows = [
            [
                t,
                repr(float(series["recon"][t])),
                repr(float(series["nll_static"][t])),
                repr(float(series["nll_dynamic"][t])),
                repr(float(series["fused"][t])),
                int(labels[t]),
            ]
            for t in range(total)
        ]
        _write_rows(path, SCORE_HEADER, rows)
        written.append(path)
        print(f"scored {name}: {total} frames -> {path}")
    write_config(os.path.join(config.out_dir, "config.cfg"), config)
    return 0


def _video_name(source):
    base = os.path.basename(os.path.normpath(source))
    if base == "frames":
        base = os.path.basename(os.path.dirname(os.path.normpath(source)))
    return os.path.splitext(base)[0]


def _read_score_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != SCORE_HEADER:
            raise ConfigError(f"{path}: unexpected header {header}")
        cols = {name: [] for name in SCORE_HEADER}
        for row in reader:
            for name, value in zip(SCORE_HEADER, row):
                cols[name].append(value)
    out = {name: np.array([float(v) for v in vals]) for name, vals in cols.items()}
    out["label"] = out["label"].astype(int)
    return out


def _gather(paths):
    videos = [_read_score_csv(p) for p in paths]
    for path, v in zip(paths, videos):
        if np.any(v["label"] < 0):
            raise ConfigError(f"{path}: contains unlabeled frames; eval needs labels")
    return videos


def cmd_eval(args):
    videos = _gather(args.csvs)
    scores = np.concatenate([v["fused"] for v in videos])
    labels = np.concatenate([v["label"] for v in videos])
    auc, eer, _ = roc_auc_eer(scores, labels)
    record = json.dumps(
        {"auc": round(auc, 6), "eer": round(eer, 6), "n_frames": int(len(scores))},
        sort_keys=True,
    )
    print(record)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(record + "\n")
    return 0


def cmd_sweep(args):
    videos = _gather(args.csvs)
    try:
        grid = [float(v) for v in args.grid.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--grid wants comma-separated numbers, got {args.grid!r}") from None
    if not grid:
        raise ConfigError("--grid is empty")
    labels = np.concatenate([v["label"] for v in videos])
    rows = []
    for lam in grid:
        fused = np.concatenate(
            [
                fuse(
                    v["recon"],
                    minmax_normalize(v["nll_static"] + v["nll_dynamic"]),
                    lam,
                )
                for v in videos
            ]
        )
        auc, eer, _ = roc_auc_eer(fused, labels)
        rows.append([repr(lam), repr(round(auc, 6)), repr(round(eer, 6))])
        print(f"lambda {lam:g}: auc {auc:.4f} eer {eer:.4f}")
    if args.out:
        _write_rows(args.out, ["lambda", "auc", "eer"], rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
