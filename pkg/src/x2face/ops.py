"""Differentiable warping primitives.

All sampling here is corner-aligned: normalized coordinate -1 maps to the
center of the first pixel and +1 to the center of the last pixel along each
axis. Samples that fall outside the image contribute zero (the out-of-range
corner weights are masked, so a point straddling the border blends with
black rather than clamping).
"""

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .errors import ShapeError


def identity_grid(height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Grid of normalized coordinates, shape (height, width, 2), last dim (x, y).

    Sampling an image with its own identity grid reproduces the image
    (up to floating-point associativity).
    """
    if height < 1 or width < 1:
        raise ShapeError(f"grid size must be positive, got {height}x{width}")
    ys = torch.linspace(-1.0, 1.0, height, dtype=dtype, device=device) if height > 1 else torch.zeros(1, dtype=dtype, device=device)
    xs = torch.linspace(-1.0, 1.0, width, dtype=dtype, device=device) if width > 1 else torch.zeros(1, dtype=dtype, device=device)
    grid_y, grid_x = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([grid_x, grid_y], dim=-1)


def bilinear_sample(image: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Sample `image` (B,C,H,W) at `grid` (B,Hg,Wg,2) normalized (x,y) coords.

    Returns (B,C,Hg,Wg). Differentiable in both arguments; out-of-range
    samples fade to zero. Coordinates outside [-1,1] are permitted.
    For a 1-pixel axis every coordinate maps to that single pixel center.
    """
    if image.dim() != 4:
        raise ShapeError(f"image must be (B,C,H,W), got shape {tuple(image.shape)}")
    if grid.dim() != 4 or grid.shape[-1] != 2:
        raise ShapeError(f"grid must be (B,H,W,2), got shape {tuple(grid.shape)}")
    if image.shape[0] != grid.shape[0]:
        raise ShapeError(
            f"batch mismatch: image batch {image.shape[0]} vs grid batch {grid.shape[0]}"
        )

    b, c, h, w = image.shape
    gh, gw = grid.shape[1], grid.shape[2]

    # normalized -> pixel coordinates (corner-aligned)
    x = (grid[..., 0] + 1.0) * (w - 1) * 0.5
    y = (grid[..., 1] + 1.0) * (h - 1) * 0.5

    x0 = torch.floor(x)
    y0 = torch.floor(y)
    x1 = x0 + 1.0
    y1 = y0 + 1.0

    # fractional offsets keep the gradient path to the grid
    wx = x - x0
    wy = y - y0

    flat = image.reshape(b, c, h * w)

    def corner(ix: torch.Tensor, iy: torch.Tensor) -> torch.Tensor:
        valid = (ix >= 0) & (ix <= w - 1) & (iy >= 0) & (iy <= h - 1)
        # clamp bounds the infinities and nan_to_num the NaNs so gather gets a
        # legal index; the NaN interpolation weights still poison the output
        # pixel, so non-finite coordinates surface instead of crashing
        ixc = torch.nan_to_num(ix.clamp(0, w - 1), nan=0.0).long()
        iyc = torch.nan_to_num(iy.clamp(0, h - 1), nan=0.0).long()
        idx = (iyc * w + ixc).reshape(b, 1, gh * gw).expand(b, c, gh * gw)
        vals = flat.gather(2, idx).reshape(b, c, gh, gw)
        return vals * valid.to(vals.dtype).reshape(b, 1, gh, gw)

    w00 = ((1.0 - wx) * (1.0 - wy)).unsqueeze(1)
    w10 = (wx * (1.0 - wy)).unsqueeze(1)
    w01 = ((1.0 - wx) * wy).unsqueeze(1)
    w11 = (wx * wy).unsqueeze(1)

    return (
        corner(x0, y0) * w00
        + corner(x1, y0) * w10
        + corner(x0, y1) * w01
        + corner(x1, y1) * w11
    )


def bilinear_resize(image: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Resize (B,C,H,W) to (B,C,out_h,out_w) by corner-aligned bilinear sampling."""
    grid = identity_grid(out_h, out_w, dtype=image.dtype, device=image.device)
    grid = grid.unsqueeze(0).expand(image.shape[0], -1, -1, -1)
    return bilinear_sample(image, grid)


def bilinear_upsample2x(image: torch.Tensor) -> torch.Tensor:
    """Double both spatial dimensions of (B,C,H,W) with corner-aligned bilinear
    interpolation. Corner pixels are preserved exactly; a constant image stays
    constant."""
    b, c, h, w = image.shape
    return bilinear_resize(image, 2 * h, 2 * w)


@dataclass
class GradCheckReport:
    """Result of a finite-difference gradient check."""

    passed: bool
    max_rel_error: float
    n_checked: int
    failure: str | None = None

    def __str__(self) -> str:
        status = "OK" if self.passed else f"FAIL ({self.failure or 'tolerance exceeded'})"
        return f"grad_check: {status}, max rel error {self.max_rel_error:.3e} over {self.n_checked} entries"


def grad_check(
    op: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    epsilon: float = 1e-4,
    tolerance: float = 1e-3,
) -> GradCheckReport:
    """Compare analytic gradients of a scalar-valued `op` against central
    differences, in float64.

    Each input is perturbed elementwise by +/- epsilon. The relative error for
    an entry is |analytic - numeric| / max(|analytic|, |numeric|, 1e-6); the
    check passes when the max over all entries is <= tolerance. Inputs the op
    does not depend on get zero analytic gradients. Non-finite values anywhere
    fail the check with a diagnostic instead of propagating.
    """
    work = [t.detach().to(torch.float64).clone().requires_grad_(True) for t in inputs]

    out = op(*work)
    if out.numel() != 1:
        raise ShapeError(f"grad_check needs a scalar-valued op, got output shape {tuple(out.shape)}")
    if not torch.isfinite(out):
        return GradCheckReport(False, float("inf"), 0, "non-finite op output")

    if out.requires_grad:
        analytic = torch.autograd.grad(out, work, allow_unused=True)
    else:
        # op does not depend on any input (constant function)
        analytic = tuple(None for _ in work)
    for g in analytic:
        if g is not None and not torch.isfinite(g).all():
            return GradCheckReport(False, float("inf"), 0, "non-finite analytic gradient")

    max_rel = 0.0
    n_checked = 0
    for t, g in zip(work, analytic):
        flat = t.view(-1)
        gflat = g.view(-1) if g is not None else None
        for i in range(flat.numel()):
            with torch.no_grad():
                orig = flat[i].item()
                flat[i] = orig + epsilon
                f_plus = op(*work).item()
                flat[i] = orig - epsilon
                f_minus = op(*work).item()
                flat[i] = orig
            if not (torch.isfinite(torch.tensor(f_plus)) and torch.isfinite(torch.tensor(f_minus))):
                return GradCheckReport(False, float("inf"), n_checked, "non-finite numeric probe")
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            ana = gflat[i].item() if gflat is not None else 0.0
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-6)
            max_rel = max(max_rel, rel)
            n_checked += 1

    return GradCheckReport(max_rel <= tolerance, max_rel, n_checked)
