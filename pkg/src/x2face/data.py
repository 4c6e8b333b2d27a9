"""Synthetic face tracks and the on-disk dataset format.

The renderer draws a parametric cartoon face (ellipse + hair band + eyes +
mouth) whose geometry is a pure function of 5 identity reals and a 5-degree
pose (tx, ty, rot, scale, mouth). It exists to give every frame exact
ground-truth labels at desk scale: pose probes, audio sweeps, and centroid
oracles all read these labels back.

Layout: root/<identity>/<video>/frame_00000.png plus optional labels.json
per video ({"pose", "nuisance", "audio_features"} arrays, one row per
frame) and a dataset.json at the root carrying the split assignment and the
audio projection matrix.
"""

import colorsys
import json
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DatasetError, DatasetExistsError
from .imgio import load_frame_png, save_frame_png

POSE_RANGES = {
    "tx": (-0.25, 0.25),
    "ty": (-0.25, 0.25),
    "rot": (-30.0, 30.0),
    "scale": (0.8, 1.2),
    "mouth": (0.0, 1.0),
}
AUDIO_DIM = 256
AUDIO_NOISE_SIGMA = 0.05
SPLIT_FRACTIONS = {"train": 0.75, "val": 0.15, "test": 0.10}

# sub-stream tags so every random draw has its own deterministic stream
_TAG_IDENTITY, _TAG_TRAJECTORY, _TAG_AUDIO_NOISE, _TAG_AUDIO_PROJ, _TAG_SPLIT = 7, 11, 13, 17, 19


@dataclass(frozen=True)
class SynthIdentity:
    background_hue: float
    skin_hue: float
    face_aspect: float  # width/height of the face ellipse, [0.70, 0.95]
    eye_spacing: float  # half-distance between eye centers, [0.05, 0.09]
    hair_hue: float

    @classmethod
    def from_seed(cls, dataset_seed: int, identity_index: int) -> "SynthIdentity":
        rng = np.random.default_rng(np.random.SeedSequence([dataset_seed, _TAG_IDENTITY, identity_index]))
        bg = rng.uniform(0.0, 1.0)
        # keep skin hue at least 0.2 away from the background hue so the
        # face is always separable from its backdrop
        skin = (bg + rng.uniform(0.2, 0.8)) % 1.0
        return cls(
            background_hue=bg,
            skin_hue=skin,
            face_aspect=rng.uniform(0.70, 0.95),
            eye_spacing=rng.uniform(0.05, 0.09),
            hair_hue=rng.uniform(0.0, 1.0),
        )


@dataclass(frozen=True)
class SynthPose:
    tx: float = 0.0
    ty: float = 0.0
    rot: float = 0.0
    scale: float = 1.0
    mouth: float = 0.5

    def validate(self) -> None:
        for name, (lo, hi) in POSE_RANGES.items():
            value = getattr(self, name)
            if not (lo <= value <= hi):
                raise DatasetError(f"pose {name}={value} outside [{lo}, {hi}]")


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def render_synth_frame(identity: SynthIdentity, pose: SynthPose, resolution: int) -> torch.Tensor:
    """Analytic rendering, anti-aliased by 2x supersampling. Returns (3,R,R)
    float32 in [0,1]. Pure function: identical arguments give identical
    pixels."""
    pose.validate()
    if resolution < 4:
        raise DatasetError(f"resolution must be >= 4, got {resolution}")

    n2 = 2 * resolution
    axis = (np.arange(n2) + 0.5) / n2
    u, v = np.meshgrid(axis, axis)  # u right, v down, unit square

    dx = u - (0.5 + pose.tx)
    dy = v - (0.5 + pose.ty)
    theta = math.radians(pose.rot)
    lx = math.cos(theta) * dx + math.sin(theta) * dy
    ly = -math.sin(theta) * dx + math.cos(theta) * dy

    b = 0.20 * pose.scale  # vertical semi-axis; max extent stays inside the frame
    a = b * identity.face_aspect
    face = (lx / a) ** 2 + (ly / b) ** 2 <= 1.0
    hair = face & (ly <= -0.55 * b)
    ex = identity.eye_spacing * pose.scale
    er = 0.035 * pose.scale
    ey = -0.30 * b
    eyes = ((lx - ex) ** 2 + (ly - ey) ** 2 <= er**2) | ((lx + ex) ** 2 + (ly - ey) ** 2 <= er**2)
    mouth_h = (0.03 + 0.27 * pose.mouth) * b
    mouth = (lx / (0.42 * a)) ** 2 + ((ly - 0.45 * b) / mouth_h) ** 2 <= 1.0

    colors = {
        "bg": _hsv(identity.background_hue, 0.30, 0.92),
        "skin": _hsv(identity.skin_hue, 0.45, 0.82),
        "hair": _hsv(identity.hair_hue, 0.85, 0.45),
        "eye": np.array([0.05, 0.05, 0.08]),
        "mouth": np.array([0.45, 0.04, 0.08]),
    }

    # smooth shading (uniform value scaling, hue and saturation untouched):
    # flat fills would leave the photometric loss without any gradient in
    # region interiors, which starves warp learning; the skin shade follows
    # the face frame so interior gradients carry pose information, and the
    # low-frequency sinusoid and tilt terms keep the gradient from vanishing
    # on large smooth patches while breaking left-right symmetry
    r2 = (u - 0.5) ** 2 + (v - 0.5) ** 2
    bg_shade = 1.0 - 0.40 * r2 - 0.05 * np.sin(3.0 * np.pi * u) * np.sin(3.0 * np.pi * v) - 0.03 * (u - v)
    e2 = (lx / a) ** 2 + (ly / b) ** 2
    skin_shade = 1.0 - 0.15 * e2 - 0.08 * np.cos(np.pi * lx / a) * np.cos(np.pi * ly / b) - 0.06 * (lx / a)
    hair_t = np.clip((-ly - 0.55 * b) / (0.45 * b), 0.0, 1.0)
    hair_shade = 1.0 - 0.25 * hair_t - 0.05 * (lx / a)

    img = np.empty((n2, n2, 3))
    img[:] = colors["bg"] * bg_shade[..., None]
    for mask, key, shade in (
        (face, "skin", skin_shade),
        (hair, "hair", hair_shade),
        (eyes, "eye", None),
        (mouth, "mouth", None),
    ):
        shaded = colors[key] * shade[..., None] if shade is not None else colors[key]
        img[mask] = shaded[mask] if shade is not None else shaded

    small = img.reshape(resolution, 2, resolution, 2, 3).mean(axis=(1, 3))
    return torch.from_numpy(np.transpose(small, (2, 0, 1)).astype(np.float32))


def sample_trajectory(dataset_seed: int, identity_index: int, video_index: int, n_frames: int) -> list[SynthPose]:
    """Clipped Gaussian random walk over all five pose parameters, step std
    at 10% of each range."""
    rng = np.random.default_rng(
        np.random.SeedSequence([dataset_seed, _TAG_TRAJECTORY, identity_index, video_index])
    )
    names = list(POSE_RANGES)
    state = {n: rng.uniform(lo, hi) for n, (lo, hi) in POSE_RANGES.items()}
    poses = []
    for _ in range(n_frames):
        poses.append(SynthPose(**state))
        for n in names:
            lo, hi = POSE_RANGES[n]
            state[n] = float(np.clip(state[n] + rng.normal(0.0, 0.1 * (hi - lo)), lo, hi))
    return poses


def audio_projection(dataset_seed: int) -> np.ndarray:
    """Fixed (AUDIO_DIM, 3) projection applied to (mouth, mouth^2, tx)."""
    rng = np.random.default_rng(np.random.SeedSequence([dataset_seed, _TAG_AUDIO_PROJ]))
    return rng.standard_normal((AUDIO_DIM, 3))


def audio_features_for(poses: list[SynthPose], projection: np.ndarray, noise_rng: np.random.Generator) -> np.ndarray:
    z = np.array([[p.mouth, p.mouth**2, p.tx] for p in poses])
    clean = z @ projection.T
    return clean + noise_rng.normal(0.0, AUDIO_NOISE_SIGMA, clean.shape)


def split_identities(identity_ids: list[str], seed: int) -> dict[str, list[str]]:
    """Disjoint-by-identity split at 0.75/0.15/0.10, seeded shuffle."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_SPLIT]))
    order = list(identity_ids)
    rng.shuffle(order)
    n = len(order)
    n_train = int(n * SPLIT_FRACTIONS["train"])
    n_val = int(n * SPLIT_FRACTIONS["val"])
    return {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train : n_train + n_val]),
        "test": sorted(order[n_train + n_val :]),
    }


@dataclass
class VideoRecord:
    identity: str
    video: str
    frames: list[Path]
    pose: np.ndarray | None = None  # (F,3): tx, ty, rot
    nuisance: np.ndarray | None = None  # (F,2): scale, mouth
    audio: np.ndarray | None = None  # (F,AUDIO_DIM)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def name(self) -> str:
        return f"{self.identity}/{self.video}"


@dataclass
class DatasetIndex:
    root: Path
    identities: dict[str, list[VideoRecord]]
    splits: dict[str, list[str]]
    audio_proj: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def videos_of(self, identity: str) -> list[VideoRecord]:
        return self.identities[identity]

    def split_identities(self, split: str) -> list[str]:
        if split not in self.splits:
            raise DatasetError(f"unknown split {split!r}; have {sorted(self.splits)}")
        return self.splits[split]

    def all_videos(self, split: str | None = None) -> list[VideoRecord]:
        ids = self.split_identities(split) if split is not None else sorted(self.identities)
        return [rec for i in ids for rec in self.identities[i]]

    def load_frame(self, path: Path) -> torch.Tensor:
        hit = self._cache.get(path)
        if hit is None:
            hit = self._cache[path] = load_frame_png(path)
        return hit

    @property
    def n_frames_total(self) -> int:
        return sum(rec.n_frames for recs in self.identities.values() for rec in recs)


def generate_synthetic_dataset(
    n_identities: int,
    n_videos_per_id: int,
    n_frames_per_video: int,
    resolution: int,
    seed: int,
    out_dir,
    overwrite: bool = False,
) -> DatasetIndex:
    root = Path(out_dir)
    if root.exists() and any(root.iterdir()):
        if not overwrite:
            raise DatasetExistsError(f"output directory {root} is not empty; pass overwrite to replace")
        shutil.rmtree(root)
    if n_frames_per_video < 2:
        raise DatasetError(f"videos need >= 2 frames, got {n_frames_per_video}")
    root.mkdir(parents=True, exist_ok=True)

    projection = audio_projection(seed)
    identity_ids = [f"id_{i:03d}" for i in range(n_identities)]
    for i, identity_id in enumerate(identity_ids):
        identity = SynthIdentity.from_seed(seed, i)
        for j in range(n_videos_per_id):
            vdir = root / identity_id / f"vid_{j:03d}"
            vdir.mkdir(parents=True, exist_ok=True)
            poses = sample_trajectory(seed, i, j, n_frames_per_video)
            noise_rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_AUDIO_NOISE, i, j]))
            audio = audio_features_for(poses, projection, noise_rng)
            for k, pose in enumerate(poses):
                save_frame_png(render_synth_frame(identity, pose, resolution), vdir / f"frame_{k:05d}.png")
            labels = {
                "pose": [[p.tx, p.ty, p.rot] for p in poses],
                "nuisance": [[p.scale, p.mouth] for p in poses],
                "audio_features": audio.tolist(),
            }
            (vdir / "labels.json").write_text(json.dumps(labels))

    meta = {
        "format": 1,
        "seed": seed,
        "resolution": resolution,
        "n_identities": n_identities,
        "n_videos_per_id": n_videos_per_id,
        "n_frames_per_video": n_frames_per_video,
        "splits": split_identities(identity_ids, seed),
        "audio": {"dim": AUDIO_DIM, "noise_sigma": AUDIO_NOISE_SIGMA},
        "audio_projection": projection.tolist(),
    }
    (root / "dataset.json").write_text(json.dumps(meta))
    return index_dataset(root)


def index_dataset(root) -> DatasetIndex:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")

    identities: dict[str, list[VideoRecord]] = {}
    for id_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        records = []
        for vdir in sorted(p for p in id_dir.iterdir() if p.is_dir()):
            frames = sorted(vdir.glob("frame_*.png"))
            name = f"{id_dir.name}/{vdir.name}"
            if len(frames) < 2:
                raise DatasetError(f"video {name} has {len(frames)} frame(s); need >= 2")
            rec = VideoRecord(identity=id_dir.name, video=vdir.name, frames=frames)
            labels_path = vdir / "labels.json"
            if labels_path.exists():
                labels = json.loads(labels_path.read_text())
                for key, attr in (("pose", "pose"), ("nuisance", "nuisance"), ("audio_features", "audio")):
                    if key in labels:
                        arr = np.asarray(labels[key], dtype=np.float64)
                        if arr.shape[0] != len(frames):
                            raise DatasetError(
                                f"video {name}: {key} has {arr.shape[0]} rows for {len(frames)} frames"
                            )
                        setattr(rec, attr, arr)
            records.append(rec)
        if not records:
            raise DatasetError(f"identity directory {id_dir.name} contains no videos")
        identities[id_dir.name] = records

    if not identities:
        raise DatasetError(f"dataset root {root} contains no identities")

    meta_path = root / "dataset.json"
    audio_proj = None
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        splits = meta["splits"]
        unknown = [i for ids in splits.values() for i in ids if i not in identities]
        if unknown:
            raise DatasetError(f"dataset.json splits name missing identities: {unknown}")
        if "audio_projection" in meta:
            audio_proj = np.asarray(meta["audio_projection"], dtype=np.float64)
    else:
        # no recorded split: assign deterministically over sorted identities
        ordered = sorted(identities)
        n = len(ordered)
        n_train = int(n * SPLIT_FRACTIONS["train"])
        n_val = int(n * SPLIT_FRACTIONS["val"])
        splits = {
            "train": ordered[:n_train],
            "val": ordered[n_train : n_train + n_val],
            "test": ordered[n_train + n_val :],
        }
    return DatasetIndex(root=root, identities=identities, splits=splits, audio_proj=audio_proj)


@dataclass
class PairSample:
    source: torch.Tensor
    driving: torch.Tensor
    identity: str
    video: str
    source_index: int
    driving_index: int


@dataclass
class TripletSample:
    s_A: torch.Tensor
    d_A: torch.Tensor
    d_R: torch.Tensor
    identity_a: str
    identity_r: str
    video_a: str
    source_index: int
    driving_index: int


def sample_pair(index: DatasetIndex, split: str, rng: np.random.Generator) -> PairSample:
    """Uniform identity, then uniform video, then an ordered distinct frame pair."""
    ids = index.split_identities(split)
    if not ids:
        raise DatasetError(f"split {split!r} has no identities")
    identity = ids[rng.integers(len(ids))]
    videos = index.videos_of(identity)
    rec = videos[rng.integers(len(videos))]
    n = rec.n_frames
    i = int(rng.integers(n))
    j = int(rng.integers(n - 1))
    if j >= i:
        j += 1
    return PairSample(
        source=index.load_frame(rec.frames[i]),
        driving=index.load_frame(rec.frames[j]),
        identity=identity,
        video=rec.video,
        source_index=i,
        driving_index=j,
    )


def sample_triplet(index: DatasetIndex, split: str, rng: np.random.Generator) -> TripletSample:
    """Same-video (s_A, d_A) plus a uniform frame of a different identity."""
    ids = index.split_identities(split)
    if len(ids) < 2:
        raise DatasetError(f"split {split!r} has {len(ids)} identity; triplets need >= 2")
    pair = sample_pair(index, split, rng)
    others = [i for i in ids if i != pair.identity]
    other = others[rng.integers(len(others))]
    videos = index.videos_of(other)
    rec = videos[rng.integers(len(videos))]
    k = int(rng.integers(rec.n_frames))
    return TripletSample(
        s_A=pair.source,
        d_A=pair.driving,
        d_R=index.load_frame(rec.frames[k]),
        identity_a=pair.identity,
        identity_r=other,
        video_a=pair.video,
        source_index=pair.source_index,
        driving_index=pair.driving_index,
    )
