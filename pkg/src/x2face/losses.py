"""Photometric and identity losses for the two-stage curriculum.

The identity comparator is a small convolutional classifier trained on the
synthetic identities; its frozen stages stand in for a large pretrained
face network as the feature space of the content losses. Same-identity
terms compare low+high layers (LAYERS_LOW_HIGH), cross-identity terms only
high layers (LAYERS_HIGH), and per-layer weights track running magnitudes
so each same-identity addend stays near the photometric term and each
cross-identity addend near a tenth of it.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import COMPARATOR_MAGIC, read_container, restore_tensors, write_container
from .data import DatasetIndex
from .errors import ConfigError, DatasetError, ShapeError
from .optim import sgd_momentum_step

LAYERS_LOW_HIGH = ("Conv2", "Conv3", "Conv4", "Conv5", "Conv7")
LAYERS_HIGH = ("Conv6", "Conv7")

_EMA_FLOOR = 1e-12


def photometric_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all elements."""
    if a.shape != b.shape:
        raise ShapeError(f"photometric_l1 shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


class IdentityComparator(nn.Module):
    """Seven 3x3-conv stages named Conv1..Conv7, ReLU after each, 2x max
    pooling after the even stages. Channel widths 16*min(2^i, 8). The
    classifier head exists only while the comparator itself is trained."""

    N_STAGES = 7

    def __init__(self, n_classes: int | None = None):
        super().__init__()
        chans = [16 * min(2**i, 8) for i in range(self.N_STAGES)]
        self.stages = nn.ModuleList()
        prev = 3
        for ch in chans:
            conv = nn.Conv2d(prev, ch, kernel_size=3, stride=1, padding=1)
            # He init keeps activation magnitude roughly constant through the
            # seven ReLU stages; the default init decays it enough that the
            # classifier gradients vanish and training stalls
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)
            self.stages.append(conv)
            prev = ch
        self.classifier = nn.Linear(chans[-1], n_classes) if n_classes else None

    @property
    def stage_names(self) -> list[str]:
        return [f"Conv{i + 1}" for i in range(self.N_STAGES)]

    def features(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        feats = {}
        for i, conv in enumerate(self.stages):
            x = F.relu(conv(x))
            if (i + 1) % 2 == 0:
                x = F.max_pool2d(x, 2)
            feats[f"Conv{i + 1}"] = x
        return feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.classifier is None:
            raise ConfigError("comparator classifier head was stripped; only features() remain")
        top = self.features(x)[f"Conv{self.N_STAGES}"]
        return self.classifier(top.mean(dim=(2, 3)))

    def strip_classifier(self) -> None:
        """Freeze the stages and drop the head: the comparator becomes a
        pure, immutable feature extractor."""
        self.classifier = None
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()


def _batched(frame: torch.Tensor) -> torch.Tensor:
    if frame.dim() == 3:
        return frame.unsqueeze(0)
    if frame.dim() == 4:
        return frame
    raise ShapeError(f"expected (C,H,W) or (B,C,H,W), got {tuple(frame.shape)}")


def content_loss(cmp, a: torch.Tensor, b: torch.Tensor, layers) -> dict[str, torch.Tensor]:
    """Per-layer mean absolute difference of comparator activations."""
    if a.shape != b.shape:
        raise ShapeError(f"content_loss shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    layers = tuple(layers)
    if not layers:
        return {}
    feats_a = cmp.features(_batched(a))
    unknown = [l for l in layers if l not in feats_a]
    if unknown:
        raise ConfigError(f"unknown comparator layer(s) {unknown}; have {sorted(feats_a)}")
    feats_b = cmp.features(_batched(b))
    return {l: (feats_a[l] - feats_b[l]).abs().mean() for l in layers}


@dataclass
class LossWeightState:
    """EMAs of raw loss magnitudes driving the per-layer weights."""

    decay: float = 0.99
    target_ratio_same: float = 1.0
    target_ratio_diff: float = 0.1
    photo_ema: float | None = None
    layer_emas: dict[str, float] = field(default_factory=dict)

    def _fold(self, prev: float | None, obs: float) -> float:
        obs = max(obs, _EMA_FLOOR)
        if prev is None:
            return obs
        return self.decay * prev + (1.0 - self.decay) * obs

    def update(self, photo: float, same: dict[str, float], diff: dict[str, float]) -> None:
        self.photo_ema = self._fold(self.photo_ema, photo)
        for kind, values in (("same", same), ("diff", diff)):
            for layer, value in values.items():
                key = f"{kind}:{layer}"
                self.layer_emas[key] = self._fold(self.layer_emas.get(key), value)

    def weight(self, kind: str, layer: str) -> float:
        ratio = self.target_ratio_same if kind == "same" else self.target_ratio_diff
        return ratio * self.photo_ema / self.layer_emas[f"{kind}:{layer}"]


def stage2_loss(triplet, g_dA: torch.Tensor, g_dR: torch.Tensor, cmp, state: LossWeightState):
    """Total stage-II objective and its addends.

    `triplet` is anything carrying s_A, d_A, d_R (single frames or batches).
    EMAs are updated from the raw detached magnitudes of this batch before
    the weights are computed, so the weights always reflect current scale.
    Returns (total, components) with one component per addend:
    "photometric", "same:<layer>" x5, "diff:<layer>" x2.
    """
    photo = photometric_l1(g_dA, triplet.d_A)
    same_raw = content_loss(cmp, g_dA, triplet.d_A, LAYERS_LOW_HIGH)
    diff_raw = content_loss(cmp, g_dR, triplet.s_A, LAYERS_HIGH)

    state.update(
        float(photo.detach()),
        {l: float(v.detach()) for l, v in same_raw.items()},
        {l: float(v.detach()) for l, v in diff_raw.items()},
    )

    total = photo
    components = {"photometric": float(photo.detach())}
    for l, v in same_raw.items():
        term = state.weight("same", l) * v
        total = total + term
        components[f"same:{l}"] = float(term.detach())
    for l, v in diff_raw.items():
        term = state.weight("diff", l) * v
        total = total + term
        components[f"diff:{l}"] = float(term.detach())
    return total, components


@dataclass
class ComparatorTrainConfig:
    lr: float = 0.002
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 60
    holdout_fraction: float = 0.2
    target_accuracy: float = 0.95


def train_identity_comparator(index: DatasetIndex, cfg: ComparatorTrainConfig, seed: int) -> IdentityComparator:
    """Train the comparator as an identity classifier over every identity in
    the dataset, holding out a per-identity fraction of frames. Stops early
    once holdout accuracy reaches the target; the classifier head is then
    discarded and the stages frozen. The trained module carries
    .holdout_accuracy and .n_identities."""
    identity_ids = sorted(index.identities)
    if len(identity_ids) < 2:
        raise DatasetError(f"comparator needs >= 2 identities, got {len(identity_ids)}")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
    train_items: list[tuple] = []
    hold_items: list[tuple] = []
    for label, identity in enumerate(identity_ids):
        paths = [f for rec in index.videos_of(identity) for f in rec.frames]
        order = rng.permutation(len(paths))
        n_hold = max(1, int(len(paths) * cfg.holdout_fraction))
        for pos, k in enumerate(order):
            (hold_items if pos < n_hold else train_items).append((paths[k], label))

    torch.manual_seed(seed)
    cmp = IdentityComparator(n_classes=len(identity_ids))
    params = [p for p in cmp.parameters()]
    momentum_state: dict[int, torch.Tensor] = {}

    def accuracy(items) -> float:
        cmp.eval()
        hits = 0
        with torch.no_grad():
            for i in range(0, len(items), cfg.batch_size):
                chunk = items[i : i + cfg.batch_size]
                x = torch.stack([index.load_frame(p) for p, _ in chunk])
                y = torch.tensor([l for _, l in chunk])
                hits += (cmp(x).argmax(dim=1) == y).sum().item()
        return hits / len(items)

    holdout_accuracy = 0.0
    for _ in range(cfg.max_epochs):
        cmp.train()
        order = rng.permutation(len(train_items))
        for i in range(0, len(order), cfg.batch_size):
            chunk = [train_items[k] for k in order[i : i + cfg.batch_size]]
            x = torch.stack([index.load_frame(p) for p, _ in chunk])
            y = torch.tensor([l for _, l in chunk])
            loss = F.cross_entropy(cmp(x), y)
            grads = torch.autograd.grad(loss, params)
            sgd_momentum_step(params, grads, momentum_state, cfg.lr, cfg.momentum)
        holdout_accuracy = accuracy(hold_items)
        if holdout_accuracy >= cfg.target_accuracy:
            break

    cmp.strip_classifier()
    cmp.holdout_accuracy = holdout_accuracy
    cmp.n_identities = len(identity_ids)
    return cmp


def save_comparator(path, cmp: IdentityComparator, training_meta: dict | None = None) -> None:
    meta = dict(training_meta or {})
    meta.setdefault("holdout_accuracy", getattr(cmp, "holdout_accuracy", None))
    tensors = [(name, t) for name, t in cmp.state_dict().items() if name.startswith("stages.")]
    write_container(path, COMPARATOR_MAGIC, {"kind": "identity_comparator"}, tensors, meta)


def load_comparator(path) -> IdentityComparator:
    manifest, blob = read_container(path, COMPARATOR_MAGIC)
    cmp = IdentityComparator(n_classes=None)
    targets = dict(cmp.state_dict(keep_vars=True).items())
    restore_tensors(manifest, blob, targets)
    cmp.strip_classifier()
    cmp.holdout_accuracy = manifest["training_meta"].get("holdout_accuracy")
    return cmp
