"""Embedded-face editing.

An edit is a straight-alpha composite of an RGBA overlay onto the embedded
face. Because every generated frame is a warp of the embedded face, a single
edit propagates to the whole driven sequence; the networks themselves are
never touched. Overlays live on disk as RGBA PNGs at the embedded-face
resolution, independent of any particular embedded face, so one overlay can
be reused across identities.
"""

import torch

from .errors import OverlayError
from .networks import DrivingNetwork, drive_decode, drive_encode


def validate_overlay(overlay: torch.Tensor) -> None:
    """Overlay contract: (4,H,W), rgb and alpha both in [0,1]."""
    if overlay.dim() != 3 or overlay.shape[0] != 4:
        raise OverlayError(f"overlay must be (4,H,W), got {tuple(overlay.shape)}")
    if not torch.isfinite(overlay).all():
        raise OverlayError("overlay contains non-finite values")
    if overlay.min() < 0.0 or overlay.max() > 1.0:
        raise OverlayError(
            f"overlay values must lie in [0,1], got range "
            f"[{overlay.min().item():.4f}, {overlay.max().item():.4f}]"
        )


def apply_overlay(embedded: torch.Tensor, overlay: torch.Tensor) -> torch.Tensor:
    """Straight-alpha blend: alpha*rgb + (1-alpha)*embedded, per pixel."""
    validate_overlay(overlay)
    if embedded.dim() != 3 or embedded.shape[0] != 3:
        raise OverlayError(f"embedded face must be (3,H,W), got {tuple(embedded.shape)}")
    if overlay.shape[1:] != embedded.shape[1:]:
        raise OverlayError(
            f"overlay {tuple(overlay.shape[1:])} does not match "
            f"embedded face {tuple(embedded.shape[1:])}"
        )
    rgb, alpha = overlay[:3], overlay[3:4]
    return alpha * rgb + (1.0 - alpha) * embedded


def render_edited_sequence(
    drv_net: DrivingNetwork,
    modified: torch.Tensor,
    driving: list[torch.Tensor],
    flow_override: torch.Tensor | None = None,
) -> list[torch.Tensor]:
    """Drive the modified embedded face with each driving frame in order.

    flow_override bypasses the driving network's sampler grid (test hook);
    with an identity flow every output equals `modified`.
    """
    if len(driving) == 0:
        raise OverlayError("need at least one driving frame")
    out = []
    for frame in driving:
        v = drive_encode(drv_net, frame)
        _, generated = drive_decode(drv_net, v, modified, flow_override)
        out.append(generated)
    return out
