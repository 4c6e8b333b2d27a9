"""Cross-modal control of generation.

Three fitted linear maps connect driving vectors, pose codes, and audio
features: a pose probe v -> p, an inference-affine p -> v map with frozen
batch statistics, and a least-squares a -> v map whose standardization is
applied at fit time but deliberately skipped when driving. The drive
functions combine them with a trained model via vector arithmetic.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ControlMapError
from .networks import DrivingNetwork, EmbeddingNetwork, drive_decode, drive_encode, embed_multi

# canonical pose layout: (tx, ty, rot); hand-built maps in tests may use
# other widths, the drive equations only require the maps to agree
POSE_DIM = 3
BN_EPS = 1e-5


@dataclass
class MapFitConfig:
    """Full-batch SGD settings for the L1-fit maps."""

    lr: float = 0.05
    steps: int = 2000
    momentum: float = 0.9

    def __post_init__(self):
        if self.lr <= 0:
            raise ControlMapError(f"lr must be positive, got {self.lr}")
        if self.steps < 1:
            raise ControlMapError(f"steps must be >= 1, got {self.steps}")


def _to_np(x, name: str) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ControlMapError(f"{name} contains non-finite values")
    return arr


def _stack_pairs(pairs, left_name: str, right_name: str):
    if len(pairs) < 2:
        raise ControlMapError(f"need at least 2 pairs, got {len(pairs)}")
    xs = np.stack([_to_np(a, left_name).reshape(-1) for a, _ in pairs])
    ys = np.stack([_to_np(b, right_name).reshape(-1) for _, b in pairs])
    return xs, ys


def _warn_if_degenerate(xs: np.ndarray, what: str) -> None:
    centered = xs - xs.mean(axis=0)
    rank = np.linalg.matrix_rank(centered)
    full = min(xs.shape[0] - 1, xs.shape[1])
    if rank < full:
        warnings.warn(f"{what} design is rank-deficient ({rank} < {full}); fit is underconstrained")


def _standardize(xs: np.ndarray):
    """Per-feature mean and population std; zero-variance features get std 1
    so the standardized column is exactly zero."""
    mu = xs.mean(axis=0)
    sigma = xs.std(axis=0)
    safe = np.where(sigma > 0, sigma, 1.0)
    return (xs - mu) / safe, mu, safe, sigma


def _fit_affine_l1(xs: np.ndarray, ys: np.ndarray, cfg: MapFitConfig, bn: nn.BatchNorm1d | None = None):
    """Full-batch subgradient descent on mean absolute error.

    Inputs are standardized for conditioning and the statistics folded back
    into the returned weight/bias, so the caller sees a plain affine map in
    the original coordinates. Zero init plus full batches makes the fit
    deterministic. The learning rate decays geometrically to settle the
    subgradient oscillation near the optimum.
    """
    xs_std, mu, safe, _ = _standardize(xs)
    x_t = torch.from_numpy(xs_std)
    y_t = torch.from_numpy(ys)
    lin = nn.Linear(xs.shape[1], ys.shape[1], dtype=torch.float64)
    with torch.no_grad():
        lin.weight.zero_()
        lin.bias.zero_()
    modules = [lin] if bn is None else [lin, bn]
    params = [p for m in modules for p in m.parameters()]
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    decay = 0.01 ** (1.0 / max(cfg.steps - 1, 1))
    loss = torch.zeros(())
    for step in range(cfg.steps):
        opt.zero_grad()
        out = lin(x_t)
        if bn is not None:
            out = bn(out)
        loss = (out - y_t).abs().mean()
        loss.backward()
        for group in opt.param_groups:
            group["lr"] = cfg.lr * decay**step
        opt.step()
    weight = lin.weight.detach().numpy() / safe
    bias = lin.bias.detach().numpy() - weight @ mu
    return weight, bias, float(loss.detach())


@dataclass
class VecToPoseMap:
    """Affine pose probe p = Wv + b."""

    weight: np.ndarray  # (pose_dim, vec_dim)
    bias: np.ndarray  # (pose_dim,)
    fit_loss: float | None = None  # final training L1, not persisted

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ControlMapError(f"v->p weight must be 2-D, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ControlMapError(f"v->p bias must be ({self.weight.shape[0]},), got {self.bias.shape}")

    @property
    def pose_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def vec_dim(self) -> int:
        return self.weight.shape[1]

    def apply(self, v) -> np.ndarray:
        v = _to_np(v, "driving vector").reshape(-1)
        if v.shape[0] != self.vec_dim:
            raise ControlMapError(f"expected a {self.vec_dim}-dim vector, got {v.shape[0]}")
        return self.weight @ v + self.bias


@dataclass
class PoseToVecMap:
    """Linear layer plus batch norm over the outputs; affine at inference."""

    weight: np.ndarray  # (vec_dim, pose_dim)
    bias: np.ndarray  # (vec_dim,)
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    fit_loss: float | None = None  # final training L1, not persisted

    def __post_init__(self):
        for name in ("weight", "bias", "gamma", "beta", "running_mean", "running_var"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.weight.ndim != 2:
            raise ControlMapError(f"p->v weight must be 2-D, got shape {self.weight.shape}")
        n = self.weight.shape[0]
        for name in ("bias", "gamma", "beta", "running_mean", "running_var"):
            if getattr(self, name).shape != (n,):
                raise ControlMapError(f"p->v {name} must be ({n},), got {getattr(self, name).shape}")

    @property
    def pose_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def vec_dim(self) -> int:
        return self.weight.shape[0]

    def inference_affine(self):
        """The frozen map as (M, c) with f(p) = Mp + c; exposing c separately
        is what makes the constant term auditable in diagnostics."""
        scale = self.gamma / np.sqrt(self.running_var + BN_EPS)
        m = scale[:, None] * self.weight
        c = self.beta + scale * (self.bias - self.running_mean)
        return m, c

    def apply(self, p) -> np.ndarray:
        p = _to_np(p, "pose code").reshape(-1)
        if p.shape[0] != self.pose_dim:
            raise ControlMapError(f"expected a {self.pose_dim}-dim pose, got {p.shape[0]}")
        m, c = self.inference_affine()
        return m @ p + c


@dataclass
class AudioToVecMap:
    """Least-squares map in standardized feature space.

    `weight` and `bias` live in the standardized coordinates. Driving
    deliberately feeds RAW features through these weights (normalize=False),
    which amplifies the response; that asymmetry is part of the contract.
    """

    weight: np.ndarray  # (vec_dim, audio_dim)
    bias: np.ndarray  # (vec_dim,)
    mu: np.ndarray  # (audio_dim,)
    sigma: np.ndarray  # (audio_dim,) std of retained features, 1 where dropped

    def __post_init__(self):
        for name in ("weight", "bias", "mu", "sigma"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.weight.ndim != 2:
            raise ControlMapError(f"a->v weight must be 2-D, got shape {self.weight.shape}")
        k = self.weight.shape[1]
        if self.mu.shape != (k,) or self.sigma.shape != (k,):
            raise ControlMapError("standardization stats must match audio_dim")
        if self.bias.shape != (self.weight.shape[0],):
            raise ControlMapError("a->v bias must match vec_dim")
        if np.any(self.sigma <= 0):
            raise ControlMapError("sigma must be positive")

    @property
    def audio_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def vec_dim(self) -> int:
        return self.weight.shape[0]


def fit_v_to_p(pairs, cfg: MapFitConfig | None = None) -> VecToPoseMap:
    """L1 regression from driving vectors to pose codes."""
    cfg = cfg or MapFitConfig()
    xs, ys = _stack_pairs(pairs, "driving vector", "pose code")
    _warn_if_degenerate(xs, "v->p")
    weight, bias, loss = _fit_affine_l1(xs, ys, cfg)
    return VecToPoseMap(weight=weight, bias=bias, fit_loss=loss)


def predict_pose(map: VecToPoseMap, v) -> np.ndarray:
    """p = Wv + b."""
    return map.apply(v)


def fit_p_to_v(pairs, cfg: MapFitConfig | None = None) -> PoseToVecMap:
    """L1 regression from pose codes to driving vectors, batch-normalized.

    Batch statistics are live during the fit; the returned map carries the
    final output statistics as frozen running estimates, so inference is a
    fixed affine function.
    """
    cfg = cfg or MapFitConfig()
    xs, ys = _stack_pairs(pairs, "pose code", "driving vector")
    _warn_if_degenerate(xs, "p->v")
    bn = nn.BatchNorm1d(ys.shape[1], eps=BN_EPS, dtype=torch.float64)
    with torch.no_grad():
        # start the norm's affine part at the target statistics so gamma
        # does not have to crawl from 1 toward the target scale
        bn.weight.copy_(torch.from_numpy(ys.std(axis=0)).clamp_min(BN_EPS))
        bn.bias.copy_(torch.from_numpy(ys.mean(axis=0)))
    weight, bias, loss = _fit_affine_l1(xs, ys, cfg, bn=bn)
    with torch.no_grad():
        out = torch.from_numpy(xs @ weight.T + bias)
        running_mean = out.mean(dim=0).numpy()
        running_var = out.var(dim=0, unbiased=True).numpy()
    return PoseToVecMap(
        weight=weight,
        bias=bias,
        gamma=bn.weight.detach().numpy(),
        beta=bn.bias.detach().numpy(),
        running_mean=running_mean,
        running_var=running_var,
        fit_loss=loss,
    )


def fit_a_to_v(pairs) -> AudioToVecMap:
    """Ordinary least squares from standardized audio features to vectors.

    Uses the population std, drops zero-variance features (their weights are
    reconstructed as zero), and returns the minimum-norm solution when the
    system is underdetermined.
    """
    if len(pairs) < 1:
        raise ControlMapError("need at least 1 pair")
    xs = np.stack([_to_np(a, "audio feature").reshape(-1) for a, _ in pairs])
    ys = np.stack([_to_np(v, "driving vector").reshape(-1) for _, v in pairs])
    mu = xs.mean(axis=0)
    sigma = xs.std(axis=0)
    kept = sigma > 0
    if not np.all(kept):
        warnings.warn(f"dropping {int((~kept).sum())} zero-variance audio feature(s)")
    safe = np.where(kept, sigma, 1.0)
    design = np.concatenate([((xs - mu) / safe)[:, kept], np.ones((xs.shape[0], 1))], axis=1)
    beta, *_ = np.linalg.lstsq(design, ys, rcond=None)
    weight = np.zeros((ys.shape[1], xs.shape[1]))
    weight[:, kept] = beta[:-1].T
    return AudioToVecMap(weight=weight, bias=beta[-1], mu=mu, sigma=safe)


def apply_a_to_v(map: AudioToVecMap, a, normalize: bool) -> np.ndarray:
    """normalize=True replays the fit-time standardization; False feeds the
    raw features straight into the standardized-space weights (the drive-time
    default, which amplifies the response)."""
    a = _to_np(a, "audio feature").reshape(-1)
    if a.shape[0] != map.audio_dim:
        raise ControlMapError(f"expected a {map.audio_dim}-dim feature, got {a.shape[0]}")
    x = (a - map.mu) / map.sigma if normalize else a
    return map.weight @ x + map.bias


def _require(map, name: str):
    if map is None:
        raise ControlMapError(f"{name} map is not fitted")
    return map


def _source_vector(drv_net: DrivingNetwork, sources: list[torch.Tensor]) -> torch.Tensor:
    if not sources:
        raise ControlMapError("need at least one source frame")
    return drive_encode(drv_net, sources[0])


def pose_drive_vector(v_source, f_pv: PoseToVecMap, f_vp: VecToPoseMap, p_driving) -> np.ndarray:
    """v_source + f_pv(p_driving - p_source), constant term of f_pv included."""
    v_src = _to_np(v_source, "driving vector").reshape(-1)
    p_source = f_vp.apply(v_src)
    delta = _to_np(p_driving, "pose code").reshape(-1) - p_source
    return v_src + f_pv.apply(delta)


def audio_drive_vector(
    v_source, f_av: AudioToVecMap, f_vp: VecToPoseMap, f_pv: PoseToVecMap, a_driving, a_source
) -> np.ndarray:
    """Audio delta plus a pose correction, every f_av evaluation raw."""
    v_src = _to_np(v_source, "driving vector").reshape(-1)
    p_source = f_vp.apply(v_src)
    va_driving = apply_a_to_v(f_av, a_driving, normalize=False)
    va_source = apply_a_to_v(f_av, a_source, normalize=False)
    p_audio = f_vp.apply(va_driving)
    return v_src + va_driving - va_source + f_pv.apply(p_audio - p_source)


def drive_with_pose(
    emb_net: EmbeddingNetwork,
    drv_net: DrivingNetwork,
    f_pv: PoseToVecMap | None,
    f_vp: VecToPoseMap | None,
    sources: list[torch.Tensor],
    p_driving,
) -> torch.Tensor:
    """Generate from a target pose: the source's own vector plus the mapped
    pose delta."""
    f_pv = _require(f_pv, "p->v")
    f_vp = _require(f_vp, "v->p")
    v_source = _source_vector(drv_net, sources)
    v_driving = pose_drive_vector(v_source, f_pv, f_vp, p_driving)
    embedded = embed_multi(emb_net, sources)
    _, generated = drive_decode(drv_net, torch.from_numpy(v_driving).to(torch.float32), embedded)
    return generated


def drive_with_audio(
    emb_net: EmbeddingNetwork,
    drv_net: DrivingNetwork,
    f_av: AudioToVecMap | None,
    f_vp: VecToPoseMap | None,
    f_pv: PoseToVecMap | None,
    sources: list[torch.Tensor],
    a_driving,
    a_source,
) -> torch.Tensor:
    """Generate from audio features."""
    f_av = _require(f_av, "a->v")
    f_vp = _require(f_vp, "v->p")
    f_pv = _require(f_pv, "p->v")
    v_source = _source_vector(drv_net, sources)
    v_driving = audio_drive_vector(v_source, f_av, f_vp, f_pv, a_driving, a_source)
    embedded = embed_multi(emb_net, sources)
    _, generated = drive_decode(drv_net, torch.from_numpy(v_driving).to(torch.float32), embedded)
    return generated


def save_map(path, map) -> None:
    """Persist any of the three maps as JSON keyed by kind."""
    path = Path(path)
    if isinstance(map, VecToPoseMap):
        doc = {
            "kind": "v_to_p",
            "weight": map.weight.tolist(),
            "bias": map.bias.tolist(),
            "pose_dim": map.pose_dim,
            "vec_dim": map.vec_dim,
        }
    elif isinstance(map, PoseToVecMap):
        doc = {
            "kind": "p_to_v",
            "weight": map.weight.tolist(),
            "bias": map.bias.tolist(),
            "pose_dim": map.pose_dim,
            "vec_dim": map.vec_dim,
            "batchnorm": {
                "gamma": map.gamma.tolist(),
                "beta": map.beta.tolist(),
                "running_mean": map.running_mean.tolist(),
                "running_var": map.running_var.tolist(),
            },
        }
    elif isinstance(map, AudioToVecMap):
        doc = {
            "kind": "a_to_v",
            "weight": map.weight.tolist(),
            "bias": map.bias.tolist(),
            "audio_dim": map.audio_dim,
            "vec_dim": map.vec_dim,
            "standardization": {"mu": map.mu.tolist(), "sigma": map.sigma.tolist()},
        }
    else:
        raise ControlMapError(f"cannot persist {type(map).__name__}")
    path.write_text(json.dumps(doc))


def load_map(path):
    """Inverse of save_map; raises ControlMapError on malformed documents."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ControlMapError(f"cannot read map from {path}: {e}") from e
    kind = doc.get("kind")
    try:
        if kind == "v_to_p":
            return VecToPoseMap(weight=doc["weight"], bias=doc["bias"])
        if kind == "p_to_v":
            bn = doc["batchnorm"]
            return PoseToVecMap(
                weight=doc["weight"],
                bias=doc["bias"],
                gamma=bn["gamma"],
                beta=bn["beta"],
                running_mean=bn["running_mean"],
                running_var=bn["running_var"],
            )
        if kind == "a_to_v":
            std = doc["standardization"]
            return AudioToVecMap(weight=doc["weight"], bias=doc["bias"], mu=std["mu"], sigma=std["sigma"])
    except KeyError as e:
        raise ControlMapError(f"map document missing field {e}") from e
    raise ControlMapError(f"unknown map kind {kind!r}")
