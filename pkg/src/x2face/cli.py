"""Command-line entry point.

One subcommand per workflow: dataset synthesis, both training stages, the
comparator, reconstruction and driving, control-map fitting and driving,
embedding, editing, evaluation, and the HTTP service. Exit code 0 on
success, 1 with a one-line "code: message" on stderr for domain errors,
and argparse's 2 for usage errors. Every randomized subcommand takes
--seed (default 0); nothing reads the wall clock.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .control import (
    drive_with_audio,
    drive_with_pose,
    fit_a_to_v,
    fit_p_to_v,
    fit_v_to_p,
    load_map,
    save_map,
)
from .data import generate_synthetic_dataset, index_dataset
from .editing import apply_overlay, render_edited_sequence
from .errors import ConfigError, ControlMapError, DatasetError, ResolutionMismatchError, X2FaceError
from .evaluate import (
    eval_pose_probe,
    eval_reconstruction,
    format_pose_table,
    format_recon_table,
    report_to_json,
)
from .imgio import load_frame_png, load_overlay_png, save_frame_png
from .losses import ComparatorTrainConfig, load_comparator, save_comparator, train_identity_comparator
from .networks import NetConfig, build_networks, drive_encode, embed_multi, x2face_forward
from .train import TrainConfig, train_stage1, train_stage2


def _check_frame_resolution(config: NetConfig, frame: torch.Tensor, what: str) -> None:
    h, w = frame.shape[-2], frame.shape[-1]
    if h != config.resolution or w != config.resolution:
        raise ResolutionMismatchError(
            f"checkpoint resolution {config.resolution} does not match {what} resolution {h}x{w}"
        )


def _load_frames(config: NetConfig, paths: list, what: str) -> list[torch.Tensor]:
    frames = []
    for p in paths:
        frame = load_frame_png(p)
        _check_frame_resolution(config, frame, f"{what} {p}")
        frames.append(frame)
    return frames


def _driving_frames(dir_path: Path) -> list[Path]:
    paths = sorted(Path(dir_path).glob("frame_*.png")) or sorted(Path(dir_path).glob("*.png"))
    if not paths:
        raise DatasetError(f"no PNG frames found in {dir_path}")
    return paths


def _parse_pose(text: str) -> np.ndarray:
    try:
        values = [float(x) for x in text.split(",")]
    except ValueError as e:
        raise ConfigError(f"pose must be comma-separated numbers, got {text!r}") from e
    if len(values) != 3:
        raise ConfigError(f"pose needs 3 components (tx,ty,rot), got {len(values)}")
    return np.asarray(values, dtype=np.float64)


def _load_audio_vector(path) -> np.ndarray:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ControlMapError(f"cannot read audio features from {path}: {e}") from e
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 1:
        raise ControlMapError(f"audio features must be a flat array, got shape {arr.shape}")
    return arr


def _labeled_pairs(index, split: str, need: str):
    """(frame path, label row) pairs over a split, in index order."""
    out = []
    for rec in index.all_videos(split):
        labels = getattr(rec, need)
        if labels is None:
            raise DatasetError(f"video {rec.name} has no {need} labels")
        for i, path in enumerate(rec.frames):
            out.append((path, labels[i]))
    if not out:
        raise DatasetError(f"split {split!r} has no labeled frames")
    return out


def _train_config_from(args) -> TrainConfig:
    d = {}
    if args.config is not None:
        try:
            d = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError(f"config must be a JSON object, got {type(d).__name__}")
    for field in ("stage", "lr", "batch_size", "max_steps", "eval_every", "checkpoint_every", "n_val_pairs", "seed"):
        value = getattr(args, field)
        if value is not None:
            d[field] = value
    d.setdefault("stage", 1)
    return TrainConfig.from_dict(d)


def cmd_synth_data(args) -> None:
    index = generate_synthetic_dataset(
        args.identities, args.videos, args.frames, args.resolution,
        seed=args.seed, out_dir=args.out, overwrite=args.overwrite,
    )
    print(f"wrote {index.n_frames_total} frames to {args.out}")


def cmd_train(args) -> None:
    cfg = _train_config_from(args)
    index = index_dataset(args.data)
    if args.init_checkpoint is not None:
        emb, drv, net_cfg, _ = load_checkpoint(args.init_checkpoint)
    else:
        if cfg.stage == 2:
            raise ConfigError("stage 2 training needs --init-checkpoint with the stage 1 result")
        net_cfg = NetConfig.desk(resolution=args.resolution)
        if args.base_channels is not None:
            net_cfg = replace(net_cfg, base_channels=args.base_channels)
        emb, drv = build_networks(net_cfg, seed=cfg.seed)
    if cfg.stage == 1:
        result = train_stage1(cfg, index, emb, drv, Path(args.out))
    else:
        if args.comparator is None:
            raise ConfigError("stage 2 training needs --comparator")
        comparator = load_comparator(args.comparator)
        result = train_stage2(cfg, index, emb, drv, comparator, Path(args.out))
    print(
        f"stage {cfg.stage} done: {result.steps_run} steps, "
        f"val L1 {result.final_val_loss:.4f}, checkpoint {result.checkpoint_path}"
    )


def cmd_train_comparator(args) -> None:
    index = index_dataset(args.data)
    cfg = ComparatorTrainConfig(
        lr=args.lr, batch_size=args.batch_size, max_epochs=args.max_epochs,
        holdout_fraction=args.holdout_fraction, target_accuracy=args.target_accuracy,
    )
    cmp = train_identity_comparator(index, cfg, seed=args.seed)
    save_comparator(args.out, cmp, {"seed": args.seed, "n_identities": cmp.n_identities})
    print(f"comparator holdout accuracy {cmp.holdout_accuracy:.3f}, saved to {args.out}")


def cmd_reconstruct(args) -> None:
    emb, drv, net_cfg, _ = load_checkpoint(args.checkpoint)
    sources = _load_frames(net_cfg, args.sources, "source")
    driving = _load_frames(net_cfg, [args.driving], "driving")[0]
    generated = x2face_forward(emb, drv, sources, driving)
    save_frame_png(generated, args.out)
    print(f"wrote {args.out}")


def cmd_drive(args) -> None:
    emb, drv, net_cfg, _ = load_checkpoint(args.checkpoint)
    sources = _load_frames(net_cfg, args.sources, "source")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = _driving_frames(args.driving_video_dir)
    embedded = embed_multi(emb, sources)
    for p in paths:
        frame = load_frame_png(p)
        _check_frame_resolution(net_cfg, frame, f"driving {p}")
        seq = render_edited_sequence(drv, embedded, [frame])
        save_frame_png(seq[0], out_dir / p.name)
    print(f"wrote {len(paths)} frames to {out_dir}")


def cmd_fit_pose_maps(args) -> None:
    emb, drv, net_cfg, _ = load_checkpoint(args.checkpoint)
    index = index_dataset(args.data)
    labeled = _labeled_pairs(index, args.split, "pose")
    pairs = []
    for path, pose in labeled:
        v = drive_encode(drv, index.load_frame(path)).numpy()
        pairs.append((v, np.asarray(pose, dtype=np.float64)))
    f_vp = fit_v_to_p(pairs)
    f_pv = fit_p_to_v([(p, v) for v, p in pairs])
    out = Path(args.out_maps)
    out.mkdir(parents=True, exist_ok=True)
    save_map(out / "v_to_p.json", f_vp)
    save_map(out / "p_to_v.json", f_pv)
    print(
        f"fitted on {len(pairs)} frames: v_to_p loss {f_vp.fit_loss:.4f}, "
        f"p_to_v loss {f_pv.fit_loss:.4f}, saved to {out}"
    )


def cmd_drive_pose(args) -> None:
    emb, drv, net_cfg, _ = load_checkpoint(args.checkpoint)
    maps = Path(args.maps)
    f_vp = load_map(maps / "v_to_p.json")
    f_pv = load_map(maps / "p_to_v.json")
    sources = _load_frames(net_cfg, args.sources, "source")
    generated = drive_with_pose(emb, drv, f_pv, f_vp, sources, _parse_pose(args.pose))
    save_frame_png(generated, args.out)
    print(f"wrote {args.out}")


def cmd_fit_audio_map(args) -> None:
    emb, drv, net_cfg, _ = load_checkpoint(args.checkpoint)
    index = index_dataset(args.data)
    labeled = _labeled_pairs(index, args.split, "audio")
    pairs = []
    for path, audio in labeled:
        v = drive_encode(drv, index.load_frame(path)).numpy()
        pairs.append((np.asarray(audio, dtype=np.float64), v))
    f_av = fit_a_to_v(pairs)
    out = Path(args.out_maps)
    out.mkdir(parents=True, exist_ok=True)
    save_map(out / "a_to_v.json", f_av)
    print(f"fitted on {len(pairs)} frames, saved to {out}")


def cmd_drive_audio(args) -> None:
    emb, drv, net_cfg, _ = load_checkpoint(args.checkpoint)
    maps = Path(args.maps)
    f_av = load_map(maps / "a_to_v.json")
    f_vp = load_map(maps / "v_to_p.json")
    f_pv = load_map(maps / "p_to_v.json")
    sources = _load_frames(net_cfg, args.sources, "source")
    generated = drive_with_audio(
        emb, drv, f_av, f_vp, f_pv, sources,
        _load_audio_vector(args.driving_audio), _load_audio_vector(args.source_audio),
    )
    save_frame_png(generated, args.out)
    print(f"wrote {args.out}")


def cmd_embed(args) -> None:
    emb, drv, net_cfg, _ = load_checkpoint(args.checkpoint)
    sources = _load_frames(net_cfg, args.sources, "source")
    save_frame_png(embed_multi(emb, sources), args.out)
    print(f"wrote {args.out}")


def cmd_edit(args) -> None:
    emb, drv, net_cfg, _ = load_checkpoint(args.checkpoint)
    embedded = load_frame_png(args.embedded)
    _check_frame_resolution(net_cfg, embedded, f"embedded {args.embedded}")
    overlay = load_overlay_png(args.overlay)
    modified = apply_overlay(embedded, overlay)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = _driving_frames(args.driving_video_dir)
    for p in paths:
        frame = load_frame_png(p)
        _check_frame_resolution(net_cfg, frame, f"driving {p}")
        seq = render_edited_sequence(drv, modified, [frame])
        save_frame_png(seq[0], out_dir / p.name)
    print(f"wrote {len(paths)} edited frames to {out_dir}")


def cmd_eval_recon(args) -> None:
    emb1, drv1, _, _ = load_checkpoint(args.stage1)
    emb2, drv2, _, _ = load_checkpoint(args.stage2)
    index = index_dataset(args.data)
    report = eval_reconstruction(
        {"stage1": (emb1, drv1), "stage2": (emb2, drv2)},
        index, n_pairs=args.n_pairs, seed=args.seed, split=args.split,
    )
    if args.json is not None:
        Path(args.json).write_text(report_to_json(report))
    print(format_recon_table(report), end="")


def cmd_eval_pose(args) -> None:
    emb, drv, net_cfg, _ = load_checkpoint(args.checkpoint)
    f_vp = load_map(Path(args.maps) / "v_to_p.json")
    index = index_dataset(args.data)
    labeled = [
        (index.load_frame(path), np.asarray(pose, dtype=np.float64))
        for path, pose in _labeled_pairs(index, args.split, "pose")
    ]
    report = eval_pose_probe(f_vp, labeled, drv)
    if args.json is not None:
        Path(args.json).write_text(report_to_json(report))
    print(format_pose_table(report), end="")


def cmd_serve(args) -> None:
    import uvicorn

    from .service import load_service_maps, create_app

    emb, drv, net_cfg, meta = load_checkpoint(args.checkpoint)
    maps = load_service_maps(args.maps) if args.maps is not None else None
    app = create_app(emb, drv, net_cfg, meta, maps)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="x2face", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, formatter_class=fmt)
        p.set_defaults(func=func)
        return p

    p = add("synth-data", cmd_synth_data, "render a synthetic labeled dataset")
    p.add_argument("--identities", type=int, default=8, help="number of identities")
    p.add_argument("--videos", type=int, default=2, help="videos per identity")
    p.add_argument("--frames", type=int, default=20, help="frames per video")
    p.add_argument("--resolution", type=int, default=64, help="square frame size in pixels")
    p.add_argument("--seed", type=int, default=0, help="dataset seed")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--overwrite", action="store_true", help="replace an existing dataset directory")

    p = add("train", cmd_train, "train stage 1 or 2")
    p.add_argument("--stage", type=int, choices=(1, 2), default=None, help="training stage (default: config value or 1)")
    p.add_argument("--config", default=None, help="JSON file of training fields; flags override it")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--init-checkpoint", default=None, help="checkpoint to continue from")
    p.add_argument("--comparator", default=None, help="comparator checkpoint (stage 2)")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--resolution", type=int, default=64, help="network resolution for fresh stage 1 runs")
    p.add_argument("--base-channels", type=int, default=None, help="first-layer width for fresh stage 1 runs (default: desk config)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default: stage default)")
    p.add_argument("--batch-size", type=int, default=None, help="batch size (default: config value or 8)")
    p.add_argument("--max-steps", type=int, default=None, help="training steps (default: config value or 500)")
    p.add_argument("--eval-every", type=int, default=None, help="validation cadence (default: config value or 50)")
    p.add_argument("--checkpoint-every", type=int, default=None, help="checkpoint cadence (default: config value or 250)")
    p.add_argument("--n-val-pairs", type=int, default=None, help="validation pairs (default: config value or 16)")
    p.add_argument("--seed", type=int, default=None, help="training seed (default: config value or 0)")

    p = add("train-comparator", cmd_train_comparator, "train the identity comparator")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output comparator checkpoint")
    p.add_argument("--lr", type=float, default=0.002, help="learning rate")
    p.add_argument("--batch-size", type=int, default=32, help="batch size")
    p.add_argument("--max-epochs", type=int, default=60, help="epoch cap")
    p.add_argument("--holdout-fraction", type=float, default=0.2, help="per-identity holdout fraction")
    p.add_argument("--target-accuracy", type=float, default=0.95, help="holdout accuracy early stop")
    p.add_argument("--seed", type=int, default=0, help="training seed")

    p = add("reconstruct", cmd_reconstruct, "generate one frame from sources and a driving image")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--sources", action="append", required=True, help="source image (repeatable)")
    p.add_argument("--driving", required=True, help="driving image")
    p.add_argument("--out", required=True, help="output PNG")

    p = add("drive", cmd_drive, "drive sources with every frame of a video directory")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--sources", action="append", required=True, help="source image (repeatable)")
    p.add_argument("--driving-video-dir", required=True, help="directory of driving PNG frames")
    p.add_argument("--out-dir", required=True, help="output directory")

    p = add("fit-pose-maps", cmd_fit_pose_maps, "fit vector<->pose maps on a labeled split")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--data", required=True, help="dataset directory with pose labels")
    p.add_argument("--split", default="train", help="dataset split to fit on")
    p.add_argument("--out-maps", required=True, help="output directory for v_to_p.json and p_to_v.json")

    p = add("drive-pose", cmd_drive_pose, "generate a frame at a target pose")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--maps", required=True, help="directory with v_to_p.json and p_to_v.json")
    p.add_argument("--sources", action="append", required=True, help="source image (repeatable)")
    p.add_argument("--pose", required=True, help="tx,ty,rot")
    p.add_argument("--out", required=True, help="output PNG")

    p = add("fit-audio-map", cmd_fit_audio_map, "fit the audio->vector map on a labeled split")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--data", required=True, help="dataset directory with audio labels")
    p.add_argument("--split", default="train", help="dataset split to fit on")
    p.add_argument("--out-maps", required=True, help="output directory for a_to_v.json")

    p = add("drive-audio", cmd_drive_audio, "generate a frame from audio features")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--maps", required=True, help="directory with a_to_v.json, v_to_p.json, p_to_v.json")
    p.add_argument("--sources", action="append", required=True, help="source image (repeatable)")
    p.add_argument("--driving-audio", required=True, help="JSON file with the driving feature vector")
    p.add_argument("--source-audio", required=True, help="JSON file with the source feature vector")
    p.add_argument("--out", required=True, help="output PNG")

    p = add("embed", cmd_embed, "write the embedded face for source images")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--sources", action="append", required=True, help="source image (repeatable)")
    p.add_argument("--out", required=True, help="output PNG")

    p = add("edit", cmd_edit, "composite an overlay onto an embedded face and drive it")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--embedded", required=True, help="embedded-face PNG (from the embed subcommand)")
    p.add_argument("--overlay", required=True, help="RGBA overlay PNG")
    p.add_argument("--driving-video-dir", required=True, help="directory of driving PNG frames")
    p.add_argument("--out-dir", required=True, help="output directory")

    p = add("eval-recon", cmd_eval_recon, "four-setting reconstruction report")
    p.add_argument("--stage1", required=True, help="stage 1 checkpoint")
    p.add_argument("--stage2", required=True, help="stage 2 checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", help="dataset split to evaluate")
    p.add_argument("--n-pairs", type=int, default=32, help="test tuples shared across settings")
    p.add_argument("--seed", type=int, default=0, help="tuple sampling seed")
    p.add_argument("--json", default=None, help="also write the JSON report here")

    p = add("eval-pose", cmd_eval_pose, "pose-probe MAE report")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--maps", required=True, help="directory with v_to_p.json")
    p.add_argument("--data", required=True, help="dataset directory with pose labels")
    p.add_argument("--split", default="test", help="dataset split to evaluate")
    p.add_argument("--json", default=None, help="also write the JSON report here")

    p = add("serve", cmd_serve, "run the HTTP inference service")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--maps", default=None, help="directory of fitted control maps")
    p.add_argument("--port", type=int, default=8000, help="listen port")
    p.add_argument("--host", default="127.0.0.1", help="listen address")

    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
        return 0
    except X2FaceError as e:
        print(f"{e.code}: {e.message}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"io-error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
