"""Two-stage curriculum training.

Stage I optimizes the pixelwise photometric L1 alone; stage II adds the
identity content losses on top of a stage-I checkpoint. Both stages share
one loop: sample a batch, forward the full pipeline, step SGD with
momentum, validate on a fixed pair set every `eval_every` steps, decay the
learning rate on validation plateaus, and checkpoint periodically.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .checkpoint import save_checkpoint
from .data import DatasetIndex, sample_pair, sample_triplet
from .errors import ConfigError, TrainingAbortedError
from .losses import IdentityComparator, LossWeightState, photometric_l1, stage2_loss
from .networks import DrivingNetwork, EmbeddingNetwork, pipeline_forward
from .optim import PlateauConfig, lr_plateau_step, sgd_momentum_step

STAGE1_DEFAULT_LR = 0.001
STAGE2_DEFAULT_LR = 0.0001

# seed-stream tags, disjoint from the dataset generator's
_TAG_TRAIN_SAMPLER = 29
_TAG_VAL_SET = 31


@dataclass
class TrainConfig:
    """Knobs for one training stage.

    `lr` left as None resolves to the stage default (0.001 for stage I,
    0.0001 for stage II). Batch size 8 is the desk-scale default; full
    scale uses 16.
    """

    stage: int = 1
    lr: float | None = None
    momentum: float = 0.9
    batch_size: int = 8
    max_steps: int = 500
    eval_every: int = 50
    plateau: PlateauConfig = field(default_factory=PlateauConfig)
    seed: int = 0
    checkpoint_every: int = 250
    n_val_pairs: int = 16

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.lr is None:
            self.lr = STAGE1_DEFAULT_LR if self.stage == 1 else STAGE2_DEFAULT_LR
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        for name in ("batch_size", "max_steps", "eval_every", "checkpoint_every", "n_val_pairs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["plateau"] = asdict(self.plateau)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        plateau = d.pop("plateau", None)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown TrainConfig field(s) {sorted(unknown)}")
        cfg = cls(**d)
        if plateau is not None:
            cfg = replace(cfg, plateau=PlateauConfig(**plateau))
        return cfg


@dataclass
class TrainState:
    """Mutable loop state owned by a single training task."""

    lr: float
    step: int = 0
    momentum_buffers: dict[int, torch.Tensor] = field(default_factory=dict)
    loss_weights: LossWeightState | None = None
    val_history: list[float] = field(default_factory=list)


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    steps_run: int
    final_lr: float
    final_val_loss: float


@dataclass
class BatchTriplet:
    """Stacked triplet batch; the field names mirror TripletSample."""

    s_A: torch.Tensor
    d_A: torch.Tensor
    d_R: torch.Tensor


@contextmanager
def batch_stats_frozen(*nets: nn.Module):
    """Forwards inside use batch statistics but leave every batch-norm
    buffer (running stats and the tracked-batch counter) bitwise intact,
    so validation is entirely free of side effects."""
    saved = []
    for net in nets:
        for m in net.modules():
            if isinstance(m, nn.modules.batchnorm._BatchNorm):
                saved.append((m, m.momentum, m.training, m.num_batches_tracked.clone()))
                m.momentum = 0.0
                m.train()
    try:
        yield
    finally:
        for m, momentum, training, tracked in saved:
            m.momentum = momentum
            m.train(training)
            m.num_batches_tracked.copy_(tracked)


def _val_split(index: DatasetIndex) -> str:
    # tiny datasets may not have a validation identity; fall back to train
    return "val" if index.split_identities("val") else "train"


def _stack_pairs(index: DatasetIndex, split: str, rng: np.random.Generator, n: int):
    pairs = [sample_pair(index, split, rng) for _ in range(n)]
    sources = torch.stack([p.source for p in pairs])
    drivings = torch.stack([p.driving for p in pairs])
    return sources, drivings


def _stack_triplets(index: DatasetIndex, split: str, rng: np.random.Generator, n: int) -> BatchTriplet:
    trips = [sample_triplet(index, split, rng) for _ in range(n)]
    return BatchTriplet(
        s_A=torch.stack([t.s_A for t in trips]),
        d_A=torch.stack([t.d_A for t in trips]),
        d_R=torch.stack([t.d_R for t in trips]),
    )


def validation_loss(
    emb_net: EmbeddingNetwork,
    drv_net: DrivingNetwork,
    val_sources: torch.Tensor,
    val_drivings: torch.Tensor,
    batch_size: int,
) -> float:
    """Mean per-pair reconstruction L1 over the fixed validation set."""
    total, n = 0.0, 0
    with torch.no_grad(), batch_stats_frozen(emb_net, drv_net):
        for i in range(0, len(val_sources), batch_size):
            s = val_sources[i : i + batch_size]
            d = val_drivings[i : i + batch_size]
            g = pipeline_forward(emb_net, drv_net, s, d)
            per_pair = (g - d).abs().mean(dim=(1, 2, 3))
            total += float(per_pair.sum(dtype=torch.float64))
            n += len(per_pair)
    return total / n


def _run_training(
    cfg: TrainConfig,
    index: DatasetIndex,
    emb_net: EmbeddingNetwork,
    drv_net: DrivingNetwork,
    out_dir: Path,
    step_loss: Callable[[np.random.Generator], tuple[torch.Tensor, dict[str, float]]],
) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.ndjson"

    torch.manual_seed(cfg.seed)
    sampler_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _TAG_TRAIN_SAMPLER]))
    val_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _TAG_VAL_SET]))
    val_sources, val_drivings = _stack_pairs(index, _val_split(index), val_rng, cfg.n_val_pairs)

    params = list(emb_net.parameters()) + list(drv_net.parameters())
    state = TrainState(lr=cfg.lr)
    emb_net.train()
    drv_net.train()

    last_checkpoint: Path | None = None
    last_components: dict[str, float] = {}
    final_val = float("nan")

    def meta() -> dict:
        return {"stage": cfg.stage, "step": state.step, "lr": state.lr, "seed": cfg.seed}

    with open(metrics_path, "w") as log:

        def emit(rec: dict) -> None:
            log.write(json.dumps(rec) + "\n")

        def abort(reason: str) -> TrainingAbortedError:
            emit({"type": "abort", "step": state.step, "reason": reason})
            return TrainingAbortedError(reason, last_checkpoint=last_checkpoint)

        # step-0 eval pins the untrained baseline that later evals are read
        # against; it never feeds the plateau detector
        final_val = validation_loss(emb_net, drv_net, val_sources, val_drivings, cfg.batch_size)
        emit({"type": "eval", "step": 0, "lr": state.lr, "train_components": {}, "val_l1": final_val})

        for step in range(1, cfg.max_steps + 1):
            state.step = step
            loss, last_components = step_loss(sampler_rng)
            if not torch.isfinite(loss):
                raise abort(f"non-finite training loss at step {step}")
            loss.backward()
            grads = [p.grad for p in params]
            try:
                sgd_momentum_step(params, grads, state.momentum_buffers, state.lr, cfg.momentum)
            except TrainingAbortedError as e:
                raise abort(f"{e.message} at step {step}") from e
            for p in params:
                p.grad = None
            emit({"type": "step", "step": step, "lr": state.lr, "loss": float(loss.detach()), "components": last_components})

            if step % cfg.eval_every == 0 or step == cfg.max_steps:
                final_val = validation_loss(emb_net, drv_net, val_sources, val_drivings, cfg.batch_size)
                state.val_history.append(final_val)
                emit({"type": "eval", "step": step, "lr": state.lr, "train_components": last_components, "val_l1": final_val})
                new_lr = lr_plateau_step(state.val_history, state.lr, cfg.plateau)
                if new_lr != state.lr:
                    emit({"type": "lr_decay", "step": step, "old_lr": state.lr, "new_lr": new_lr})
                    state.lr = new_lr
                    state.val_history.clear()

            if step % cfg.checkpoint_every == 0 and step != cfg.max_steps:
                last_checkpoint = out_dir / f"checkpoint_{step:06d}.ckpt"
                save_checkpoint(last_checkpoint, emb_net, drv_net, emb_net.config, meta())

        final_path = out_dir / "checkpoint_final.ckpt"
        save_checkpoint(final_path, emb_net, drv_net, emb_net.config, meta())

    emb_net.eval()
    drv_net.eval()
    return TrainResult(
        checkpoint_path=final_path,
        metrics_path=metrics_path,
        steps_run=cfg.max_steps,
        final_lr=state.lr,
        final_val_loss=final_val,
    )


def train_stage1(
    cfg: TrainConfig,
    index: DatasetIndex,
    emb_net: EmbeddingNetwork,
    drv_net: DrivingNetwork,
    out_dir: Path,
) -> TrainResult:
    """Stage I: photometric L1 on same-video pairs, single source frame."""
    if cfg.stage != 1:
        raise ConfigError(f"train_stage1 needs stage=1 config, got stage={cfg.stage}")

    def step_loss(rng: np.random.Generator):
        sources, drivings = _stack_pairs(index, "train", rng, cfg.batch_size)
        generated = pipeline_forward(emb_net, drv_net, sources, drivings)
        loss = photometric_l1(generated, drivings)
        return loss, {"photometric": float(loss.detach())}

    return _run_training(cfg, index, emb_net, drv_net, out_dir, step_loss)


def train_stage2(
    cfg: TrainConfig,
    index: DatasetIndex,
    emb_net: EmbeddingNetwork,
    drv_net: DrivingNetwork,
    comparator: IdentityComparator,
    out_dir: Path,
) -> TrainResult:
    """Stage II: photometric plus identity content losses on triplets.

    The nets should come from a stage-I checkpoint; the comparator is
    frozen and only supplies features.
    """
    if cfg.stage != 2:
        raise ConfigError(f"train_stage2 needs stage=2 config, got stage={cfg.stage}")
    weights = LossWeightState()

    def step_loss(rng: np.random.Generator):
        batch = _stack_triplets(index, "train", rng, cfg.batch_size)
        g_dA = pipeline_forward(emb_net, drv_net, batch.s_A, batch.d_A)
        g_dR = pipeline_forward(emb_net, drv_net, batch.s_A, batch.d_R)
        return stage2_loss(batch, g_dA, g_dR, comparator, weights)

    return _run_training(cfg, index, emb_net, drv_net, out_dir, step_loss)
