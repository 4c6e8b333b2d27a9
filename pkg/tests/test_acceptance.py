"""End-to-end acceptance suite at the reference desk configuration.

Twenty identities, two videos each, twenty frames per video at 64x64,
dataset seed 0, training batch 8. A session fixture produces every
pipeline artifact (dataset, stage I and II checkpoints, identity
comparator, control maps) through the command-line interface, exactly as
a user would, and the criteria measure against those artifacts. Each
criterion prints one PASS/FAIL line with its measured values; the line
is emitted outside pytest's capture so it is visible in any run mode.

The suite depends only on the x2face package; there is no reference to
the browser client anywhere in it.

Set X2FACE_ACCEPT_CACHE to a directory to keep the trained artifacts
across runs while iterating; without it everything is rebuilt in a
session tmp dir (budget roughly ten minutes on a commodity CPU).
"""

import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from x2face.checkpoint import load_checkpoint, save_checkpoint
from x2face.cli import run
from x2face.control import (
    BN_EPS,
    AudioToVecMap,
    PoseToVecMap,
    VecToPoseMap,
    audio_drive_vector,
    drive_with_audio,
    drive_with_pose,
    fit_a_to_v,
    load_map,
    pose_drive_vector,
)
from x2face.data import (
    SynthIdentity,
    generate_synthetic_dataset,
    index_dataset,
)
from x2face.evaluate import spearman_rho
from x2face.imgio import load_frame_png, save_overlay_png
from x2face.losses import LAYERS_HIGH, content_loss, load_comparator
from x2face.networks import drive_encode, x2face_forward
from x2face.ops import bilinear_resize, bilinear_sample, bilinear_upsample2x, grad_check, identity_grid

from test_data import centroid, face_mask

# reference desk configuration
N_IDENTITIES = 20
N_VIDEOS = 2
N_FRAMES = 20
RESOLUTION = 64
DATASET_SEED = 0
BATCH_SIZE = 8

# Stage-I training configuration.  The learning criterion is measured at
# STAGE1_MEASURE_STEP; training continues to STAGE1_STEPS so that the
# downstream probes (pose, audio, editing) see a sharper checkpoint.  The
# width and learning rate are tuned for the reference desk run: at 64 px
# the driving decoder rebuilds absolute sampling coordinates from a single
# vector, and the narrower default width clears the halving bar only
# marginally.
STAGE1_BASE_CHANNELS = 32
STAGE1_LR = 0.002
STAGE1_MEASURE_STEP = 2000
STAGE1_STEPS = 6000
STAGE2_STEPS = 800
EVAL_PAIRS = 64

# criterion tolerances
SAMPLER_HAND_ATOL = 1e-6
GRADCHECK_RTOL = 1e-3
SAMPLER_BUDGET_S = 60.0
STAGE1_RATIO_MAX = 0.50
STAGE1_BUDGET_S = 1800.0
MULTI_SOURCE_MIN_REL = 0.05
CURRICULUM_L1_FACTOR = 1.02
CONTENT_HIGH_MIN_DROP = 0.05
POSE_MAE_FRACTION = 0.20
POSE_HALF_RANGES = {"tx": 0.25, "ty": 0.25, "rot": 30.0}
POSE_PROBE_BUDGET_S = 300.0
DRIVE_DIFF_ATOL = 1e-5
SWEEP_RHO_MIN = 0.8
OLS_ORACLE_ATOL = 1e-8
AUDIO_HAND_ATOL = 1e-9
AUDIO_RHO_MIN = 0.7
DOT_MIN_FRACTION = 0.8
DOT_SCORE_THRESHOLD = 0.75


def _cli(*args) -> None:
    rc = run([str(a) for a in args])
    assert rc == 0, f"command failed: {' '.join(str(a) for a in args)}"


def _report(capsys, name: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"ACCEPTANCE {'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, f"{name}: {detail}"


def _read_meta(base: Path) -> dict:
    path = base / "meta.json"
    return json.loads(path.read_text()) if path.exists() else {}


def _record_seconds(base: Path, key: str, seconds: float) -> None:
    meta = _read_meta(base)
    meta[key] = seconds
    (base / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def _timed_phase(base: Path, key: str, done_marker: Path, build) -> None:
    if done_marker.exists():
        return
    t0 = time.monotonic()
    build()
    _record_seconds(base, key, time.monotonic() - t0)


@pytest.fixture(scope="session")
def pipe(tmp_path_factory):
    """All pipeline artifacts at the reference configuration, built once
    through the command-line interface."""
    cache = os.environ.get("X2FACE_ACCEPT_CACHE")
    base = Path(cache) if cache else tmp_path_factory.mktemp("accept")
    base.mkdir(parents=True, exist_ok=True)

    data = base / "data"
    stage1_dir = base / "stage1"
    stage2_dir = base / "stage2"
    comparator = base / "comparator.ckpt"
    maps_dir = base / "maps"
    stage1_ckpt = stage1_dir / "checkpoint_final.ckpt"
    stage2_ckpt = stage2_dir / "checkpoint_final.ckpt"

    _timed_phase(base, "dataset_seconds", data / "dataset.json", lambda: _cli(
        "synth-data", "--identities", N_IDENTITIES, "--videos", N_VIDEOS,
        "--frames", N_FRAMES, "--resolution", RESOLUTION,
        "--seed", DATASET_SEED, "--out", data,
    ))
    _timed_phase(base, "stage1_seconds", stage1_ckpt, lambda: _cli(
        "train", "--data", data, "--out", stage1_dir, "--stage", 1,
        "--resolution", RESOLUTION, "--batch-size", BATCH_SIZE,
        "--base-channels", STAGE1_BASE_CHANNELS, "--lr", STAGE1_LR,
        "--max-steps", STAGE1_STEPS, "--eval-every", 100,
        "--checkpoint-every", STAGE1_STEPS, "--seed", 0,
    ))
    _timed_phase(base, "comparator_seconds", comparator, lambda: _cli(
        "train-comparator", "--data", data, "--out", comparator, "--seed", 0,
    ))
    _timed_phase(base, "stage2_seconds", stage2_ckpt, lambda: _cli(
        "train", "--data", data, "--out", stage2_dir, "--stage", 2,
        "--init-checkpoint", stage1_ckpt, "--comparator", comparator,
        "--batch-size", BATCH_SIZE, "--max-steps", STAGE2_STEPS,
        "--eval-every", 100, "--checkpoint-every", STAGE2_STEPS, "--seed", 0,
    ))
    _timed_phase(base, "pose_maps_seconds", maps_dir / "p_to_v.json", lambda: _cli(
        "fit-pose-maps", "--checkpoint", stage1_ckpt, "--data", data,
        "--split", "train", "--out-maps", maps_dir,
    ))
    _timed_phase(base, "audio_map_seconds", maps_dir / "a_to_v.json", lambda: _cli(
        "fit-audio-map", "--checkpoint", stage1_ckpt, "--data", data,
        "--split", "train", "--out-maps", maps_dir,
    ))

    return {
        "base": base,
        "data": data,
        "index": index_dataset(data),
        "stage1_dir": stage1_dir,
        "stage1_ckpt": stage1_ckpt,
        "stage2_ckpt": stage2_ckpt,
        "comparator": comparator,
        "maps_dir": maps_dir,
        "meta": _read_meta(base),
    }


@pytest.fixture(scope="session")
def recon_report(pipe) -> dict:
    """Reconstruction report over paired test tuples, stage I vs stage II,
    produced by the eval-recon subcommand."""
    path = pipe["base"] / "eval_recon.json"
    if not path.exists():
        _cli(
            "eval-recon", "--stage1", pipe["stage1_ckpt"], "--stage2", pipe["stage2_ckpt"],
            "--data", pipe["data"], "--split", "test",
            "--n-pairs", EVAL_PAIRS, "--seed", 0, "--json", path,
        )
    return json.loads(path.read_text())


def _setting(report: dict, stage: int, n_source: int) -> dict:
    for row in report["settings"]:
        if row["stage"] == stage and row["n_source"] == n_source:
            return row
    raise AssertionError(f"report has no setting stage={stage} n_source={n_source}")


@pytest.fixture(scope="session")
def stage1_nets(pipe):
    emb, drv, _, _ = load_checkpoint(pipe["stage1_ckpt"])
    return emb, drv


@pytest.fixture(scope="session")
def control_maps(pipe):
    maps_dir = pipe["maps_dir"]
    f_vp = load_map(maps_dir / "v_to_p.json")
    f_pv = load_map(maps_dir / "p_to_v.json")
    f_av = load_map(maps_dir / "a_to_v.json")
    assert isinstance(f_vp, VecToPoseMap)
    assert isinstance(f_pv, PoseToVecMap)
    assert isinstance(f_av, AudioToVecMap)
    return f_vp, f_pv, f_av


def _test_video(index):
    """First video of the first test-split identity, with its labels."""
    ident = index.split_identities("test")[0]
    rec = index.videos_of(ident)[0]
    identity = SynthIdentity.from_seed(DATASET_SEED, int(ident.split("_")[1]))
    return rec, identity


def test_sampler_correctness(capsys):
    t0 = time.monotonic()
    torch.manual_seed(0)

    # bit-exact where the grid steps are binary-representable, and within
    # float tolerance at the working resolution, whose step 2/63 is not
    image = torch.rand(1, 3, 9, 17, dtype=torch.float64)
    grid = identity_grid(9, 17, dtype=torch.float64).unsqueeze(0)
    img64 = torch.rand(1, 3, 64, 64)
    grid64 = identity_grid(64, 64).unsqueeze(0)
    identity_exact = torch.equal(bilinear_sample(image, grid), image) and torch.allclose(
        bilinear_sample(img64, grid64), img64, atol=1e-5
    )

    # hand-derived values on a 2x2 image at corner-aligned coordinates:
    # x=-1 is column 0, x=+1 is column 1, same for y over rows
    img2 = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=torch.float64)
    points = [
        ((-1.0, -1.0), 1.0),
        ((1.0, 1.0), 4.0),
        ((0.0, 0.0), 2.5),
        ((0.5, -1.0), 1.75),
        ((-1.0, 0.5), 2.5),
        ((0.5, 0.5), 3.25),
    ]
    hand_err = 0.0
    for (x, y), want in points:
        g = torch.tensor([[[[x, y]]]], dtype=torch.float64)
        got = float(bilinear_sample(img2, g))
        hand_err = max(hand_err, abs(got - want))

    # gradient checks on every sampling primitive, scalarized through a
    # fixed random cotangent so all output elements contribute
    w_img = torch.rand(1, 2, 5, 6, dtype=torch.float64)
    w_grid = torch.rand(1, 4, 3, 2, dtype=torch.float64) * 1.6 - 0.8
    cot = torch.rand(1, 2, 4, 3, dtype=torch.float64)
    reports = [
        grad_check(lambda im, g: (bilinear_sample(im, g) * cot).sum(), [w_img, w_grid], tolerance=GRADCHECK_RTOL),
        grad_check(lambda im: bilinear_resize(im, 7, 4).sum(), [w_img], tolerance=GRADCHECK_RTOL),
        grad_check(lambda im: bilinear_upsample2x(im).sum(), [w_img], tolerance=GRADCHECK_RTOL),
    ]
    autograd_ok = torch.autograd.gradcheck(
        bilinear_sample,
        (w_img.clone().requires_grad_(True), w_grid.clone().requires_grad_(True)),
        eps=1e-6, atol=1e-5, rtol=GRADCHECK_RTOL, raise_exception=False,
    )
    elapsed = time.monotonic() - t0

    grad_ok = all(r.passed for r in reports) and autograd_ok
    max_rel = max(r.max_rel_error for r in reports)
    ok = identity_exact and hand_err <= SAMPLER_HAND_ATOL and grad_ok and elapsed < SAMPLER_BUDGET_S
    _report(
        capsys, "sampler correctness", ok,
        f"identity warp exact={identity_exact}, hand-case err {hand_err:.2e} (<= {SAMPLER_HAND_ATOL}), "
        f"gradcheck max rel err {max_rel:.2e} (<= {GRADCHECK_RTOL}), autograd ok={bool(autograd_ok)}, "
        f"{elapsed:.1f}s (< {SAMPLER_BUDGET_S:.0f}s)",
    )


def test_stage1_learning(pipe, capsys):
    evals = []
    with open(pipe["stage1_dir"] / "metrics.ndjson") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec["type"] == "eval":
                evals.append(rec)
    assert evals[0]["step"] == 0 and evals[-1]["step"] == STAGE1_STEPS
    base = evals[0]["val_l1"]
    at_measure = next(e for e in evals if e["step"] == STAGE1_MEASURE_STEP)
    ratio = at_measure["val_l1"] / base
    seconds = pipe["meta"].get("stage1_seconds", float("nan"))
    ok = ratio <= STAGE1_RATIO_MAX and seconds <= STAGE1_BUDGET_S
    _report(
        capsys, "stage-I learning", ok,
        f"held-out L1 {base:.4f} -> {at_measure['val_l1']:.4f} after "
        f"{STAGE1_MEASURE_STEP} steps, ratio {ratio:.3f} (<= {STAGE1_RATIO_MAX}), "
        f"full run {evals[-1]['val_l1']:.4f} at {STAGE1_STEPS}, "
        f"{seconds:.0f}s (<= {STAGE1_BUDGET_S:.0f}s)",
    )


def test_multi_source_trend(recon_report, capsys):
    one = _setting(recon_report, 1, 1)["l1"]
    three = _setting(recon_report, 1, 3)["l1"]
    rel = (one - three) / one
    ok = rel >= MULTI_SOURCE_MIN_REL
    _report(
        capsys, "multi-source trend", ok,
        f"stage-I L1 {one:.4f} (1 source) vs {three:.4f} (3 sources) on {recon_report['n_pairs']} "
        f"paired tuples, relative drop {rel * 100:.2f}% (>= {MULTI_SOURCE_MIN_REL * 100:.0f}%)",
    )


def test_curriculum_trend(pipe, recon_report, capsys):
    l1_by = {(s, n): _setting(recon_report, s, n)["l1"] for s in (1, 2) for n in (1, 3)}
    l1_ok = all(l1_by[(2, n)] <= l1_by[(1, n)] * CURRICULUM_L1_FACTOR for n in (1, 3))

    # cross-identity identity leakage, measured as high-layer comparator
    # distance between the generated frame and the true source
    cmp = load_comparator(pipe["comparator"])
    index = pipe["index"]
    idents = index.split_identities("test")
    assert len(idents) >= 2
    rng = np.random.default_rng(np.random.SeedSequence([0, 43]))
    pairs = []
    for _ in range(16):
        a, b = rng.choice(len(idents), 2, replace=False)
        rec_a = index.videos_of(idents[a])[int(rng.integers(N_VIDEOS))]
        rec_b = index.videos_of(idents[b])[int(rng.integers(N_VIDEOS))]
        src = index.load_frame(rec_a.frames[int(rng.integers(rec_a.n_frames))])
        drv_frame = index.load_frame(rec_b.frames[int(rng.integers(rec_b.n_frames))])
        pairs.append((src, drv_frame))

    def mean_high(ckpt_path) -> float:
        emb, drv, _, _ = load_checkpoint(ckpt_path)
        vals = []
        with torch.no_grad():
            for src, drv_frame in pairs:
                g = x2face_forward(emb, drv, [src], drv_frame)
                losses = content_loss(cmp, g, src, LAYERS_HIGH)
                vals.append(float(np.mean([float(v) for v in losses.values()])))
        return float(np.mean(vals))

    c1 = mean_high(pipe["stage1_ckpt"])
    c2 = mean_high(pipe["stage2_ckpt"])
    drop = (c1 - c2) / c1
    content_ok = drop >= CONTENT_HIGH_MIN_DROP

    acc = getattr(cmp, "holdout_accuracy", None)
    ok = l1_ok and content_ok
    _report(
        capsys, "curriculum trend", ok,
        f"L1 1-source {l1_by[(1, 1)]:.4f} -> {l1_by[(2, 1)]:.4f}, 3-source {l1_by[(1, 3)]:.4f} -> "
        f"{l1_by[(2, 3)]:.4f} (each <= {CURRICULUM_L1_FACTOR}x), cross-identity high-layer content "
        f"{c1:.4f} -> {c2:.4f}, drop {drop * 100:.1f}% (>= {CONTENT_HIGH_MIN_DROP * 100:.0f}%), "
        f"comparator holdout acc {acc}",
    )


def test_pose_probe(pipe, capsys):
    t0 = time.monotonic()
    out = pipe["base"] / "eval_pose.json"
    _cli(
        "eval-pose", "--checkpoint", pipe["stage1_ckpt"], "--maps", pipe["maps_dir"],
        "--data", pipe["data"], "--split", "test", "--json", out,
    )
    report = json.loads(out.read_text())
    eval_seconds = time.monotonic() - t0
    fit_seconds = pipe["meta"].get("pose_maps_seconds", float("nan"))
    total_seconds = fit_seconds + eval_seconds

    mae = dict(zip(report["axes"], report["per_axis_mae"]))
    limits = {axis: POSE_MAE_FRACTION * rng for axis, rng in POSE_HALF_RANGES.items()}
    axes_ok = all(mae[axis] <= limits[axis] for axis in limits)
    time_ok = total_seconds < POSE_PROBE_BUDGET_S
    parts = ", ".join(f"{axis} {mae[axis]:.4f} (<= {limits[axis]:.2f})" for axis in ("tx", "ty", "rot"))
    _report(
        capsys, "pose probe", axes_ok and time_ok,
        f"held-out per-axis MAE: {parts}, on {report['n_frames']} frames, "
        f"fit+eval {total_seconds:.0f}s (< {POSE_PROBE_BUDGET_S:.0f}s)",
    )


def test_pose_drive_structure(pipe, stage1_nets, control_maps, capsys):
    emb, drv = stage1_nets
    f_vp, f_pv, _ = control_maps
    index = pipe["index"]
    rec, identity = _test_video(index)
    src = index.load_frame(rec.frames[0])

    # two target poses from one source differ by exactly the linear part
    with torch.no_grad():
        v_src = drive_encode(drv, src).numpy()
    p1 = np.array([0.10, -0.05, 12.0])
    p2 = np.array([-0.15, 0.20, -20.0])
    v1 = pose_drive_vector(v_src, f_pv, f_vp, p1)
    v2 = pose_drive_vector(v_src, f_pv, f_vp, p2)
    m, _ = f_pv.inference_affine()
    diff_err = float(np.abs((v1 - v2) - m @ (p1 - p2)).max())
    diff_ok = diff_err <= DRIVE_DIFF_ATOL

    # sweeping tx must move the generated face centroid monotonically
    ty_src, rot_src = float(rec.pose[0][1]), float(rec.pose[0][2])
    txs = np.linspace(-0.18, 0.18, 9)
    xs = []
    with torch.no_grad():
        for tx in txs:
            g = drive_with_pose(emb, drv, f_pv, f_vp, [src], np.array([tx, ty_src, rot_src]))
            cx, _ = centroid(face_mask(g, identity))
            xs.append(cx)
    rho = spearman_rho(txs, xs)
    sweep_ok = abs(rho) >= SWEEP_RHO_MIN

    _report(
        capsys, "pose drive structure", diff_ok and sweep_ok,
        f"drive-vector difference vs linear part, max err {diff_err:.2e} (<= {DRIVE_DIFF_ATOL}), "
        f"9-step tx sweep centroid Spearman rho {rho:.3f} (|rho| >= {SWEEP_RHO_MIN})",
    )


def test_audio_pathway(pipe, stage1_nets, control_maps, capsys):
    emb, drv = stage1_nets
    f_vp, f_pv, f_av = control_maps
    index = pipe["index"]

    # least-squares fit agrees with the normal equations on standardized
    # features to tight tolerance
    rng = np.random.default_rng(7)
    xs = rng.normal(0.0, 2.0, (40, 6))
    ys = rng.normal(0.0, 1.0, (40, 3))
    fitted = fit_a_to_v(list(zip(xs, ys)))
    mu = xs.mean(axis=0)
    sigma = xs.std(axis=0)
    xn = np.hstack([(xs - mu) / sigma, np.ones((40, 1))])
    sol, *_ = np.linalg.lstsq(xn.T @ xn, xn.T @ ys, rcond=None)
    ols_err = max(
        float(np.abs(fitted.weight - sol[:-1].T).max()),
        float(np.abs(fitted.bias - sol[-1]).max()),
    )
    ols_ok = ols_err <= OLS_ORACLE_ATOL

    # 1-D stub hand case: f_av doubles, f_vp is the identity, f_pv halves
    # (its batch-norm scale pinned to exactly 1 via running_var)
    stub_av = AudioToVecMap(weight=np.array([[2.0]]), bias=np.array([0.0]),
                            mu=np.array([0.0]), sigma=np.array([1.0]))
    stub_vp = VecToPoseMap(weight=np.array([[1.0]]), bias=np.array([0.0]))
    stub_pv = PoseToVecMap(weight=np.array([[0.5]]), bias=np.array([0.0]),
                           gamma=np.array([1.0]), beta=np.array([0.0]),
                           running_mean=np.array([0.0]),
                           running_var=np.array([1.0 - BN_EPS]))
    got = audio_drive_vector(
        np.array([2.0]), stub_av, stub_vp, stub_pv,
        a_driving=np.array([1.5]), a_source=np.array([1.0]),
    )
    # audio delta 3-2=1 on v=2, then pose correction 0.5*(3-2): total 3.5
    hand_err = abs(float(got[0]) - 3.5)
    hand_ok = hand_err <= AUDIO_HAND_ATOL

    # synthetic-audio mouth sweep: clean features for nine mouth openings
    # at the source's tx; response is mean intensity in the mouth region
    rec, _ = _test_video(index)
    src_i = 0
    src = index.load_frame(rec.frames[src_i])
    a_source = rec.audio[src_i]
    tx, ty, rot = (float(x) for x in rec.pose[src_i])
    scale = float(rec.nuisance[src_i][0])
    mouths = np.linspace(0.1, 0.9, 9)
    responses = []
    with torch.no_grad():
        for m_val in mouths:
            a_drv = index.audio_proj @ np.array([m_val, m_val**2, tx])
            g = drive_with_audio(emb, drv, f_av, f_vp, f_pv, [src], a_drv, a_source)
            responses.append(_mouth_region_mean(g, tx, ty, rot, scale))
    rho = spearman_rho(mouths, responses)
    sweep_ok = abs(rho) >= AUDIO_RHO_MIN

    _report(
        capsys, "audio pathway", ols_ok and hand_ok and sweep_ok,
        f"normal-equations err {ols_err:.2e} (<= {OLS_ORACLE_ATOL}), hand case err {hand_err:.2e} "
        f"(<= {AUDIO_HAND_ATOL}), mouth sweep Spearman rho {rho:.3f} (|rho| >= {AUDIO_RHO_MIN})",
    )


def _mouth_region_mean(frame: torch.Tensor, tx: float, ty: float, rot: float, scale: float) -> float:
    """Mean intensity in a box around the mouth for the given face pose.

    The mouth sits at (0, 0.45b) in face-local coordinates with b the
    vertical semi-axis; a wider-open mouth darkens the box.
    """
    res = frame.shape[-1]
    b = 0.20 * scale
    theta = math.radians(rot)
    cx = 0.5 + tx - math.sin(theta) * 0.45 * b
    cy = 0.5 + ty + math.cos(theta) * 0.45 * b
    half = 0.45 * b
    x0, x1 = max(0, int((cx - half) * res)), min(res, int((cx + half) * res) + 1)
    y0, y1 = max(0, int((cy - half) * res)), min(res, int((cy + half) * res) + 1)
    assert x1 > x0 and y1 > y0, "mouth box left the frame"
    return float(frame[:, y0:y1, x0:x1].mean())


def test_editing_persistence(pipe, tmp_path, capsys):
    index = pipe["index"]
    rec, identity = _test_video(index)
    src_path = rec.frames[0]

    embedded_png = tmp_path / "embedded.png"
    _cli("embed", "--checkpoint", pipe["stage1_ckpt"], "--sources", src_path, "--out", embedded_png)

    # paint a 5x5 pure-white dot on the embedded forehead: slightly above
    # the face-region centroid; nothing in the synthetic palette comes
    # close to white, so the dot is the only near-white texture
    embedded = load_frame_png(embedded_png)
    mask = face_mask(embedded, identity)
    assert mask.any(), "embedded face region is empty"
    ys, xs = np.nonzero(mask)
    dot_y = int(np.clip(ys.mean() - 0.2 * (ys.max() - ys.min()), 2, RESOLUTION - 3))
    dot_x = int(np.clip(xs.mean(), 2, RESOLUTION - 3))
    overlay = torch.zeros(4, RESOLUTION, RESOLUTION)
    overlay[:, dot_y - 2 : dot_y + 3, dot_x - 2 : dot_x + 3] = 1.0
    overlay_png = tmp_path / "dot.png"
    save_overlay_png(overlay, overlay_png)

    edited_dir = tmp_path / "edited"
    _cli(
        "edit", "--checkpoint", pipe["stage1_ckpt"], "--embedded", embedded_png,
        "--overlay", overlay_png, "--driving-video-dir", src_path.parent,
        "--out-dir", edited_dir,
    )
    plain_dir = tmp_path / "plain"
    _cli(
        "drive", "--checkpoint", pipe["stage1_ckpt"], "--sources", src_path,
        "--driving-video-dir", src_path.parent, "--out-dir", plain_dir,
    )

    def dot_score(path: Path) -> float:
        # template match against a solid-white 3x3 patch: the per-window
        # mean of the min channel peaks where all three channels are near 1
        frame = load_frame_png(path)
        minc = frame.min(dim=0).values.unsqueeze(0).unsqueeze(0)
        return float(F.avg_pool2d(minc, 3, stride=1).max())

    names = sorted(p.name for p in edited_dir.glob("*.png"))
    assert len(names) == N_FRAMES
    hits = sum(dot_score(edited_dir / n) >= DOT_SCORE_THRESHOLD for n in names)
    false_hits = sum(dot_score(plain_dir / n) >= DOT_SCORE_THRESHOLD for n in names)

    frac = hits / len(names)
    ok = frac >= DOT_MIN_FRACTION and false_hits == 0
    _report(
        capsys, "editing persistence", ok,
        f"white dot found in {hits}/{len(names)} driven frames ({frac * 100:.0f}%, "
        f">= {DOT_MIN_FRACTION * 100:.0f}%), {false_hits} false detections in unedited frames",
    )


def test_round_trips(pipe, tmp_path, capsys):
    # checkpoint round trip restores weights and running stats bit-exactly
    emb, drv, cfg, meta = load_checkpoint(pipe["stage1_ckpt"])
    copy_path = tmp_path / "copy.ckpt"
    save_checkpoint(copy_path, emb, drv, cfg, meta)
    emb2, drv2, cfg2, meta2 = load_checkpoint(copy_path)
    ckpt_ok = cfg2 == cfg and meta2 == meta
    for a, b in ((emb, emb2), (drv, drv2)):
        sd_a, sd_b = a.state_dict(), b.state_dict()
        ckpt_ok = ckpt_ok and set(sd_a) == set(sd_b)
        ckpt_ok = ckpt_ok and all(torch.equal(sd_a[k], sd_b[k]) for k in sd_a)

    # dataset generation is a pure function of its seed
    def dataset_digest(root: Path) -> str:
        h = hashlib.sha256()
        for path in sorted(root.rglob("*")):
            if path.is_file():
                h.update(path.relative_to(root).as_posix().encode())
                h.update(path.read_bytes())
        return h.hexdigest()

    generate_synthetic_dataset(3, 1, 4, 32, seed=11, out_dir=tmp_path / "gen_a")
    generate_synthetic_dataset(3, 1, 4, 32, seed=11, out_dir=tmp_path / "gen_b")
    data_ok = dataset_digest(tmp_path / "gen_a") == dataset_digest(tmp_path / "gen_b")

    # evaluation reports are byte-stable for a fixed seed
    rep_a, rep_b = tmp_path / "rep_a.json", tmp_path / "rep_b.json"
    for rep in (rep_a, rep_b):
        _cli(
            "eval-recon", "--stage1", pipe["stage1_ckpt"], "--stage2", pipe["stage2_ckpt"],
            "--data", pipe["data"], "--split", "test", "--n-pairs", 8, "--seed", 3, "--json", rep,
        )
    eval_ok = rep_a.read_bytes() == rep_b.read_bytes()

    _report(
        capsys, "round trips", ckpt_ok and data_ok and eval_ok,
        f"checkpoint bit-exact={ckpt_ok}, dataset digests equal={data_ok}, "
        f"eval report bytes equal={eval_ok}",
    )
