"""CLI contract: exit codes, one-line machine-parseable errors, flag
defaults in help, and an end-to-end pass over every offline subcommand on a
small dataset and model."""

import json
import subprocess
import sys

import numpy as np
import pytest
import torch

from x2face.checkpoint import load_checkpoint, save_checkpoint
from x2face.cli import build_parser, run
from x2face.data import generate_synthetic_dataset, index_dataset
from x2face.imgio import load_frame_png, save_frame_png, save_overlay_png
from x2face.networks import NetConfig, build_networks

TINY = NetConfig(resolution=16, base_channels=8, max_channels=32, driving_vector_dim=16)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Shared workspace: a 16px dataset, a tiny checkpoint, and an overlay."""
    root = tmp_path_factory.mktemp("cliws")
    data = root / "data"
    index = generate_synthetic_dataset(4, 1, 6, 16, seed=3, out_dir=data)
    emb, drv = build_networks(TINY, seed=0)
    ckpt = root / "model.ckpt"
    save_checkpoint(ckpt, emb, drv, TINY, {"stage": 1, "step": 0, "lr": 0.001, "seed": 0})
    overlay = torch.zeros(4, 16, 16)
    overlay[0, 4:8, 4:8] = 1.0
    overlay[3, 4:8, 4:8] = 1.0
    overlay_path = root / "overlay.png"
    save_overlay_png(overlay, overlay_path)
    video_dir = data / "id_000" / "vid_000"
    frame = str(index.all_videos()[0].frames[0])
    return {
        "root": root, "data": data, "index": index, "ckpt": ckpt,
        "overlay": overlay_path, "video_dir": video_dir, "frame": frame,
    }


class TestParsing:
    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as e:
            run(["no-such-command"])
        assert e.value.code == 2

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as e:
            run(["synth-data", "--out", "x", "--bogus"])
        assert e.value.code == 2

    def test_every_subcommand_help_lists_flags_with_defaults(self):
        parser = build_parser()
        sub = next(a for a in parser._actions if hasattr(a, "choices") and a.choices)
        assert len(sub.choices) == 14
        for name, sp in sub.choices.items():
            text = sp.format_help()
            for action in sp._actions:
                for opt in action.option_strings:
                    assert opt in text, f"{name}: {opt} missing from help"
                if action.option_strings and action.dest != "help":
                    assert "(default:" in text, f"{name}: no defaults rendered"

    def test_module_entry_point(self):
        proc = subprocess.run(
            [sys.executable, "-m", "x2face", "reconstruct", "--help"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert "--sources" in proc.stdout


class TestSynthData:
    def test_writes_counted_frames(self, tmp_path, capsys):
        code = run(["synth-data", "--identities", "3", "--videos", "2", "--frames", "4",
                    "--resolution", "16", "--seed", "1", "--out", str(tmp_path / "d")])
        assert code == 0
        assert len(list((tmp_path / "d").rglob("frame_*.png"))) == 3 * 2 * 4
        assert "24 frames" in capsys.readouterr().out

    def test_existing_dir_fails_without_overwrite(self, tmp_path, capsys):
        out = str(tmp_path / "d")
        assert run(["synth-data", "--identities", "2", "--videos", "1", "--frames", "2",
                    "--resolution", "16", "--out", out]) == 0
        code = run(["synth-data", "--identities", "2", "--videos", "1", "--frames", "2",
                    "--resolution", "16", "--out", out])
        assert code == 1
        err = capsys.readouterr().err
        assert err.startswith("dataset-exists: ") and err.count("\n") == 1


class TestTrain:
    def test_fresh_stage1_run(self, ws, tmp_path, capsys):
        out = tmp_path / "run"
        code = run(["train", "--stage", "1", "--data", str(ws["data"]), "--out", str(out),
                    "--resolution", "16", "--max-steps", "2", "--batch-size", "2",
                    "--eval-every", "2", "--checkpoint-every", "2", "--n-val-pairs", "2"])
        assert code == 0
        assert (out / "checkpoint_final.ckpt").exists()
        assert "stage 1 done" in capsys.readouterr().out

    def test_config_file_with_flag_override(self, ws, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({
            "stage": 1, "max_steps": 2, "batch_size": 2,
            "eval_every": 5, "checkpoint_every": 5, "n_val_pairs": 2,
        }))
        out = tmp_path / "run"
        code = run(["train", "--config", str(cfg_path), "--data", str(ws["data"]),
                    "--out", str(out), "--resolution", "16", "--max-steps", "3"])
        assert code == 0
        _, _, _, meta = load_checkpoint(out / "checkpoint_final.ckpt")
        assert meta["step"] == 3

    def test_stage2_requires_init_checkpoint(self, ws, tmp_path, capsys):
        code = run(["train", "--stage", "2", "--data", str(ws["data"]),
                    "--out", str(tmp_path / "run"), "--max-steps", "2"])
        assert code == 1
        assert capsys.readouterr().err.startswith("bad-config: ")

    def test_bad_config_json_reports_code(self, ws, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text("{broken")
        code = run(["train", "--config", str(cfg_path), "--data", str(ws["data"]),
                    "--out", str(tmp_path / "run")])
        assert code == 1
        assert capsys.readouterr().err.startswith("bad-config: ")


class TestComparatorAndStage2:
    def test_comparator_then_stage2(self, ws, tmp_path, capsys):
        cmp_path = tmp_path / "cmp.ckpt"
        code = run(["train-comparator", "--data", str(ws["data"]), "--out", str(cmp_path),
                    "--max-epochs", "1", "--target-accuracy", "0.0", "--batch-size", "8"])
        assert code == 0
        assert cmp_path.exists()
        assert "holdout accuracy" in capsys.readouterr().out

        out = tmp_path / "run2"
        code = run(["train", "--stage", "2", "--data", str(ws["data"]), "--out", str(out),
                    "--init-checkpoint", str(ws["ckpt"]), "--comparator", str(cmp_path),
                    "--max-steps", "2", "--batch-size", "2", "--eval-every", "2",
                    "--checkpoint-every", "2", "--n-val-pairs", "2"])
        assert code == 0
        _, _, _, meta = load_checkpoint(out / "checkpoint_final.ckpt")
        assert meta["stage"] == 2


class TestInference:
    def test_reconstruct(self, ws, tmp_path):
        out = tmp_path / "out.png"
        frames = ws["index"].all_videos()[0].frames
        code = run(["reconstruct", "--checkpoint", str(ws["ckpt"]),
                    "--sources", str(frames[0]), "--sources", str(frames[1]),
                    "--driving", str(frames[2]), "--out", str(out)])
        assert code == 0
        assert load_frame_png(out).shape == (3, 16, 16)

    def test_reconstruct_resolution_mismatch_names_both(self, ws, tmp_path, capsys):
        big = tmp_path / "big.png"
        save_frame_png(torch.rand(3, 32, 32), big)
        code = run(["reconstruct", "--checkpoint", str(ws["ckpt"]), "--sources", str(big),
                    "--driving", str(big), "--out", str(tmp_path / "o.png")])
        assert code == 1
        err = capsys.readouterr().err
        assert err.startswith("resolution-mismatch: ")
        assert "16" in err and "32x32" in err

    def test_missing_checkpoint_is_one_line_error(self, ws, tmp_path, capsys):
        code = run(["reconstruct", "--checkpoint", str(tmp_path / "nope.ckpt"),
                    "--sources", ws["frame"], "--driving", ws["frame"],
                    "--out", str(tmp_path / "o.png")])
        assert code == 1
        err = capsys.readouterr().err
        assert err.count("\n") == 1 and ": " in err

    def test_embed_and_drive(self, ws, tmp_path):
        emb_png = tmp_path / "emb.png"
        assert run(["embed", "--checkpoint", str(ws["ckpt"]),
                    "--sources", ws["frame"], "--out", str(emb_png)]) == 0
        assert load_frame_png(emb_png).shape == (3, 16, 16)

        out_dir = tmp_path / "driven"
        code = run(["drive", "--checkpoint", str(ws["ckpt"]), "--sources", ws["frame"],
                    "--driving-video-dir", str(ws["video_dir"]), "--out-dir", str(out_dir)])
        assert code == 0
        assert sorted(p.name for p in out_dir.glob("*.png")) == [f"frame_{k:05d}.png" for k in range(6)]

    def test_edit(self, ws, tmp_path):
        emb_png = tmp_path / "emb.png"
        run(["embed", "--checkpoint", str(ws["ckpt"]), "--sources", ws["frame"], "--out", str(emb_png)])
        out_dir = tmp_path / "edited"
        code = run(["edit", "--checkpoint", str(ws["ckpt"]), "--embedded", str(emb_png),
                    "--overlay", str(ws["overlay"]), "--driving-video-dir", str(ws["video_dir"]),
                    "--out-dir", str(out_dir)])
        assert code == 0
        assert len(list(out_dir.glob("*.png"))) == 6


@pytest.fixture(scope="module")
def maps_dir(ws, tmp_path_factory):
    out = tmp_path_factory.mktemp("maps")
    assert run(["fit-pose-maps", "--checkpoint", str(ws["ckpt"]), "--data", str(ws["data"]),
                "--split", "train", "--out-maps", str(out)]) == 0
    assert run(["fit-audio-map", "--checkpoint", str(ws["ckpt"]), "--data", str(ws["data"]),
                "--split", "train", "--out-maps", str(out)]) == 0
    return out


class TestControlSubcommands:

    def test_fit_writes_map_files(self, maps_dir):
        assert (maps_dir / "v_to_p.json").exists()
        assert (maps_dir / "p_to_v.json").exists()
        assert (maps_dir / "a_to_v.json").exists()

    def test_drive_pose(self, ws, maps_dir, tmp_path):
        out = tmp_path / "posed.png"
        code = run(["drive-pose", "--checkpoint", str(ws["ckpt"]), "--maps", str(maps_dir),
                    "--sources", ws["frame"], "--pose", "0.1,-0.1,5.0", "--out", str(out)])
        assert code == 0
        assert load_frame_png(out).shape == (3, 16, 16)

    @pytest.mark.parametrize("pose", ["a,b,c", "1.0,2.0"])
    def test_drive_pose_bad_pose_flag(self, ws, maps_dir, tmp_path, capsys, pose):
        code = run(["drive-pose", "--checkpoint", str(ws["ckpt"]), "--maps", str(maps_dir),
                    "--sources", ws["frame"], "--pose", pose, "--out", str(tmp_path / "o.png")])
        assert code == 1
        assert capsys.readouterr().err.startswith("bad-config: ")

    def test_drive_audio(self, ws, maps_dir, tmp_path):
        rec = ws["index"].all_videos()[0]
        d_audio = tmp_path / "driving.json"
        s_audio = tmp_path / "source.json"
        d_audio.write_text(json.dumps(list(rec.audio[3])))
        s_audio.write_text(json.dumps(list(rec.audio[0])))
        out = tmp_path / "audio.png"
        code = run(["drive-audio", "--checkpoint", str(ws["ckpt"]), "--maps", str(maps_dir),
                    "--sources", ws["frame"], "--driving-audio", str(d_audio),
                    "--source-audio", str(s_audio), "--out", str(out)])
        assert code == 0
        assert load_frame_png(out).shape == (3, 16, 16)

    def test_missing_maps_dir_fails_cleanly(self, ws, tmp_path, capsys):
        code = run(["drive-pose", "--checkpoint", str(ws["ckpt"]), "--maps", str(tmp_path / "none"),
                    "--sources", ws["frame"], "--pose", "0,0,0", "--out", str(tmp_path / "o.png")])
        assert code == 1
        assert capsys.readouterr().err.startswith("control-map-error: ")


class TestEvalSubcommands:
    def test_eval_recon_byte_identical_reports(self, ws, tmp_path, capsys):
        args = ["eval-recon", "--stage1", str(ws["ckpt"]), "--stage2", str(ws["ckpt"]),
                "--data", str(ws["data"]), "--n-pairs", "3", "--seed", "5"]
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert run(args + ["--json", str(a)]) == 0
        assert run(args + ["--json", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        out = capsys.readouterr().out
        assert "stage I, 1 source" in out and "improvement" in out

    def test_eval_pose(self, ws, tmp_path, capsys):
        maps = tmp_path / "maps"
        assert run(["fit-pose-maps", "--checkpoint", str(ws["ckpt"]), "--data", str(ws["data"]),
                    "--split", "test", "--out-maps", str(maps)]) == 0
        report_path = tmp_path / "pose.json"
        code = run(["eval-pose", "--checkpoint", str(ws["ckpt"]), "--maps", str(maps),
                    "--data", str(ws["data"]), "--split", "test", "--json", str(report_path)])
        assert code == 0
        report = json.loads(report_path.read_text())
        assert report["axes"] == ["tx", "ty", "rot"]
        assert "MAE" in capsys.readouterr().out