"""SGD with classical momentum and the plateau learning-rate rule."""

from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import TrainingAbortedError


@dataclass
class PlateauConfig:
    window: int = 5
    min_rel_improve: float = 0.01
    decay_factor: float = 10.0
    lr_floor: float = 1e-6


def sgd_momentum_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor | None],
    state: dict[int, torch.Tensor],
    lr: float,
    momentum: float,
) -> None:
    """In-place update: v <- momentum*v + g; theta <- theta - lr*v.

    `state` maps parameter index -> momentum buffer and is created lazily
    (buffers start at zero). Aborts on any non-finite gradient before
    touching the parameters.
    """
    for i, g in enumerate(grads):
        if g is not None and not torch.isfinite(g).all():
            raise TrainingAbortedError(f"non-finite gradient in parameter {i} (shape {tuple(g.shape)})")
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                continue
            buf = state.get(i)
            if buf is None:
                buf = state[i] = torch.zeros_like(p)
            buf.mul_(momentum).add_(g)
            p.sub_(lr * buf)


def lr_plateau_step(history: Sequence[float], lr: float, cfg: PlateauConfig) -> float:
    """Decay lr by decay_factor when the best loss of the last `window`
    evals fails to improve on the prior best by min_rel_improve (relative).
    Needs at least window+1 entries to judge; the caller restarts the
    history after a decay."""
    w = cfg.window
    if len(history) < w + 1:
        return lr
    prior_best = min(history[:-w])
    recent_best = min(history[-w:])
    denom = abs(prior_best) if prior_best != 0 else 1.0
    if (prior_best - recent_best) / denom < cfg.min_rel_improve:
        return max(lr / cfg.decay_factor, cfg.lr_floor)
    return lr
