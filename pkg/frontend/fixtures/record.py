"""Record the request/response fixtures the UI tests replay.

Runs the real inference service in-process with a small untrained model
and hand-built control maps, performs each interaction the UI makes, and
writes the exchanges to JSON files next to this script. The UI tests
never talk to a live service; they match requests against these
recordings, so the files must be regenerated whenever the service API
changes:

    python3 frontend/fixtures/record.py
"""

import base64
import json
from pathlib import Path

import numpy as np
import torch
from starlette.testclient import TestClient

from x2face.control import BN_EPS, PoseToVecMap, VecToPoseMap
from x2face.data import SynthIdentity, SynthPose, render_synth_frame
from x2face.imgio import frame_to_base64, save_overlay_png
from x2face.networks import NetConfig, build_networks
from x2face.service import ServiceMaps, create_app

HERE = Path(__file__).parent
RESOLUTION = 32
TX_OFFSETS = [0.05, 0.10, 0.15]
DOT = {"cx": 16, "cy": 16, "radius": 5, "color": [255, 0, 0], "opacity": 1.0}
MISMATCH_SIZE = 8


def build_service():
    cfg = NetConfig(resolution=RESOLUTION, base_channels=8, max_channels=32, driving_vector_dim=16)
    emb, drv = build_networks(cfg, seed=0)
    rng = np.random.default_rng(2024)
    d = cfg.driving_vector_dim
    # v->p kept small so predicted poses sit inside the slider ranges;
    # p->v translation columns large enough that one slider step moves
    # the untrained decoder past 8-bit PNG quantization (measured: std
    # 3e4 shifts pixels by several counts per 0.05 of tx)
    f_vp = VecToPoseMap(weight=rng.normal(0.0, 0.01, (3, d)), bias=np.zeros(3))
    weight = np.zeros((d, 3))
    weight[:, 0] = rng.normal(0.0, 30000.0, d)
    weight[:, 1] = rng.normal(0.0, 30000.0, d)
    weight[:, 2] = rng.normal(0.0, 200.0, d)
    f_pv = PoseToVecMap(
        weight=weight, bias=np.zeros(d), gamma=np.ones(d), beta=np.zeros(d),
        running_mean=np.zeros(d), running_var=np.full(d, 1.0 - BN_EPS),
    )
    maps = ServiceMaps(f_vp=f_vp, f_pv=f_pv, f_av=None)
    meta = {"stage": 1, "step": 0, "lr": 0.001, "seed": 0}
    return cfg, emb, drv, maps, meta


def overlay_base64(size: int, dot: dict | None) -> str:
    overlay = torch.zeros(4, size, size)
    if dot is not None:
        r2 = dot["radius"] ** 2
        for y in range(size):
            for x in range(size):
                if (x - dot["cx"]) ** 2 + (y - dot["cy"]) ** 2 <= r2:
                    for c in range(3):
                        overlay[c, y, x] = dot["color"][c] / 255.0
                    overlay[3, y, x] = dot["opacity"]
    path = HERE / "_tmp_overlay.png"
    save_overlay_png(overlay, path)
    data = path.read_bytes()
    path.unlink()
    return base64.b64encode(data).decode("ascii")


def pair(name: str, method: str, path: str, req_json: dict, res) -> dict:
    out = {
        "name": name,
        "request": {"method": method, "path": path, "json": req_json},
        "response": {"status": res.status_code},
    }
    ctype = res.headers.get("content-type", "")
    if ctype.startswith("application/json"):
        out["response"]["content_type"] = "application/json"
        out["response"]["json"] = res.json()
    else:
        out["response"]["content_type"] = ctype or "application/octet-stream"
        out["response"]["body_base64"] = base64.b64encode(res.content).decode("ascii")
    return out


def write(path: Path, pairs: list[dict]) -> None:
    path.write_text(json.dumps(pairs, indent=2) + "\n")
    print(f"wrote {path.name}: {[p['name'] for p in pairs]}")


def main() -> None:
    cfg, emb, drv, maps, meta = build_service()
    client = TestClient(create_app(emb, drv, cfg, meta, maps=maps))

    source_pose = SynthPose(tx=0.05, ty=-0.04, rot=8.0, scale=1.0, mouth=0.35)
    source = render_synth_frame(SynthIdentity.from_seed(0, 0), source_pose, RESOLUTION)
    src_b64 = frame_to_base64(source)

    # --- embed ---
    res = client.post("/embed", json={"sources_base64": [src_b64]})
    assert res.status_code == 200, res.text
    embed_body = res.json()
    e0 = embed_body["embedded_id"]
    predicted = embed_body["predicted_pose"]
    assert len(predicted) == 3
    # the UI clamps sliders to [-0.25, 0.25]; offsets must stay inside
    assert abs(predicted[0]) + max(TX_OFFSETS) <= 0.25, predicted
    write(HERE / "embed.json", [pair("embed", "POST", "/embed", {"sources_base64": [src_b64]}, res)])

    # --- pose-mode generates: the predicted pose plus each tx offset ---
    pose_pairs = []
    bodies = []
    for tag, offset in [("predicted", None)] + [(f"tx+{o}", o) for o in TX_OFFSETS]:
        pose = list(predicted)
        if offset is not None:
            pose[0] = pose[0] + offset
        req = {"embedded_id": e0, "mode": "pose", "pose": pose}
        res = client.post("/generate", json=req)
        assert res.status_code == 200, res.text
        assert res.headers["content-type"] == "image/png"
        bodies.append(res.content)
        pose_pairs.append(pair(f"generate-{tag}", "POST", "/generate", req, res))
    assert len({b for b in bodies}) >= 2, "pose offsets must change the generated frame"
    write(HERE / "generate_pose.json", pose_pairs)

    # --- edits: a no-op transparent overlay and a painted dot ---
    transparent = overlay_base64(RESOLUTION, None)
    dot = overlay_base64(RESOLUTION, DOT)
    res_t = client.post("/edit", json={"embedded_id": e0, "overlay_base64": transparent})
    assert res_t.status_code == 200, res_t.text
    assert res_t.json()["png_base64"] == embed_body["png_base64"], "transparent edit must be a no-op"
    assert res_t.json()["embedded_id"] != e0

    res_d = client.post("/edit", json={"embedded_id": e0, "overlay_base64": dot})
    assert res_d.status_code == 200, res_d.text
    assert res_d.json()["png_base64"] != embed_body["png_base64"], "dot edit must change the preview"
    e2 = res_d.json()["embedded_id"]

    req_after = {"embedded_id": e2, "mode": "pose", "pose": list(predicted)}
    res_after = client.post("/generate", json=req_after)
    assert res_after.status_code == 200

    write(HERE / "edit.json", [
        pair("edit-transparent", "POST", "/edit", {"embedded_id": e0, "overlay_base64": transparent}, res_t),
        pair("edit-dot", "POST", "/edit", {"embedded_id": e0, "overlay_base64": dot}, res_d),
        pair("generate-after-edit", "POST", "/generate", req_after, res_after),
    ])

    # --- recorded error responses ---
    # same request as generate-tx+0.05, answered by a service whose store
    # does not know the id (as after a restart)
    _, emb2, drv2, _, _ = build_service()
    fresh = TestClient(create_app(emb2, drv2, cfg, meta, maps=maps))
    pose_err = list(predicted)
    pose_err[0] = pose_err[0] + TX_OFFSETS[0]
    req_err = {"embedded_id": e0, "mode": "pose", "pose": pose_err}
    res_err = fresh.post("/generate", json=req_err)
    assert res_err.status_code == 404 and res_err.json()["code"] == "unknown-id"

    mismatch = overlay_base64(MISMATCH_SIZE, None)
    req_mm = {"embedded_id": e0, "overlay_base64": mismatch}
    res_mm = client.post("/edit", json=req_mm)
    assert res_mm.status_code == 400 and res_mm.json()["code"] == "bad-overlay"

    write(HERE / "errors.json", [
        pair("generate-unknown-id", "POST", "/generate", req_err, res_err),
        pair("edit-dim-mismatch", "POST", "/edit", req_mm, res_mm),
    ])

    (HERE / "assets.json").write_text(json.dumps({
        "source_png_base64": src_b64,
        "resolution": RESOLUTION,
        "tx_offsets": TX_OFFSETS,
        "dot": DOT,
        "mismatch_overlay_size": MISMATCH_SIZE,
    }, indent=2) + "\n")
    print("wrote assets.json")


if __name__ == "__main__":
    main()
