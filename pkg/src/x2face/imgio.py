"""PNG round-tripping for frames and overlays.

Frames live in memory as float32 torch tensors, shape (3,H,W), values in
[0,1]. On disk they are 8-bit RGB PNGs. Overlays are (4,H,W) with a
premultiplied-free alpha channel in [0,1], stored as RGBA PNGs.
"""

import base64
import io
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ShapeError


def frame_to_uint8(frame: torch.Tensor) -> np.ndarray:
    """(C,H,W) float in [0,1] -> (H,W,C) uint8 with round-to-nearest."""
    arr = frame.detach().clamp(0.0, 1.0).mul(255.0).round().to(torch.uint8).numpy()
    return np.transpose(arr, (1, 2, 0))


def uint8_to_frame(arr: np.ndarray) -> torch.Tensor:
    """(H,W,C) uint8 -> (C,H,W) float32 in [0,1]."""
    t = torch.from_numpy(np.ascontiguousarray(np.transpose(arr, (2, 0, 1))))
    return t.to(torch.float32) / 255.0


def save_frame_png(frame: torch.Tensor, path) -> None:
    if frame.dim() != 3 or frame.shape[0] != 3:
        raise ShapeError(f"frame must be (3,H,W), got {tuple(frame.shape)}")
    Image.fromarray(frame_to_uint8(frame), mode="RGB").save(Path(path), format="PNG")


def load_frame_png(path) -> torch.Tensor:
    with Image.open(Path(path)) as im:
        rgb = im.convert("RGB")
        return uint8_to_frame(np.asarray(rgb))


def save_overlay_png(overlay: torch.Tensor, path) -> None:
    if overlay.dim() != 3 or overlay.shape[0] != 4:
        raise ShapeError(f"overlay must be (4,H,W), got {tuple(overlay.shape)}")
    arr = overlay.detach().clamp(0.0, 1.0).mul(255.0).round().to(torch.uint8).numpy()
    Image.fromarray(np.transpose(arr, (1, 2, 0)), mode="RGBA").save(Path(path), format="PNG")


def load_overlay_png(path) -> torch.Tensor:
    with Image.open(Path(path)) as im:
        rgba = im.convert("RGBA")
        arr = np.asarray(rgba)
    t = torch.from_numpy(np.ascontiguousarray(np.transpose(arr, (2, 0, 1))))
    return t.to(torch.float32) / 255.0


def frame_to_png_bytes(frame: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(frame_to_uint8(frame), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def png_bytes_to_frame(data: bytes) -> torch.Tensor:
    with Image.open(io.BytesIO(data)) as im:
        return uint8_to_frame(np.asarray(im.convert("RGB")))


def png_bytes_to_overlay(data: bytes) -> torch.Tensor:
    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("RGBA"))
    t = torch.from_numpy(np.ascontiguousarray(np.transpose(arr, (2, 0, 1))))
    return t.to(torch.float32) / 255.0


def frame_to_base64(frame: torch.Tensor) -> str:
    return base64.b64encode(frame_to_png_bytes(frame)).decode("ascii")


def base64_to_png_bytes(s: str) -> bytes:
    return base64.b64decode(s.encode("ascii"))
