"""The two subnetworks and full-pipeline forward passes.

The embedding network is a U-Net: every encoder feature map is concatenated
back in on the way up, and the 2-channel tanh head is read as absolute
normalized sampling coordinates used to warp the source frame into the
embedded face. The driving network shares the encoder layout but compresses
to a flat driving vector at the 1x1 bottleneck and decodes without skips,
producing the grid that warps the embedded face into the generated frame.
"""

import contextlib
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .errors import ConfigError, ResolutionMismatchError, ShapeError
from .ops import bilinear_sample, bilinear_upsample2x


@dataclass(frozen=True)
class NetConfig:
    resolution: int = 256
    base_channels: int = 64
    max_channels: int = 512
    driving_vector_dim: int = 128

    def __post_init__(self):
        r = self.resolution
        if r < 4 or (r & (r - 1)) != 0:
            raise ConfigError(f"resolution must be a power of two >= 4, got {r}")
        if self.base_channels < 1 or self.max_channels < self.base_channels:
            raise ConfigError(
                f"need 1 <= base_channels <= max_channels, got {self.base_channels}/{self.max_channels}"
            )
        if self.driving_vector_dim < 1:
            raise ConfigError(f"driving_vector_dim must be >= 1, got {self.driving_vector_dim}")

    @property
    def n_down(self) -> int:
        return int(math.log2(self.resolution))

    def encoder_channels(self) -> list[int]:
        """Channel widths after each encoder layer, shallow to bottleneck."""
        return [min(self.base_channels * 2 ** i, self.max_channels) for i in range(self.n_down)]

    def decoder_plan(self, skips: bool) -> list[tuple[int, int]]:
        """(in_channels, out_channels) per decoder unit, bottleneck to head.

        With skips, every unit after the first sees the doubled channel count
        from the concatenated encoder feature. The first unit's input is the
        bottleneck width: the top encoder channel count, or driving_vector_dim
        on the driving side.
        """
        chans = self.encoder_channels()
        n = self.n_down
        plan = []
        for j in range(n):
            out_ch = chans[n - 2 - j] if j < n - 1 else 2
            if j == 0:
                in_ch = chans[-1] if skips else self.driving_vector_dim
            else:
                in_ch = chans[n - 1 - j] * (2 if skips else 1)
            plan.append((in_ch, out_ch))
        return plan

    @classmethod
    def desk(cls, resolution: int = 64) -> "NetConfig":
        return cls(resolution=resolution, base_channels=16, max_channels=128)

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "base_channels": self.base_channels,
            "max_channels": self.max_channels,
            "driving_vector_dim": self.driving_vector_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(
            resolution=int(d["resolution"]),
            base_channels=int(d["base_channels"]),
            max_channels=int(d["max_channels"]),
            driving_vector_dim=int(d["driving_vector_dim"]),
        )


class _Encoder(nn.Module):
    """Stack of conv 4x4 stride 2 pad 1 -> LeakyReLU(0.2) -> BN layers.

    No norm on the first layer. Returns every intermediate feature map so the
    U-Net decoder can splice them back in.
    """

    def __init__(self, config: NetConfig, bottleneck_dim: int | None = None):
        super().__init__()
        chans = config.encoder_channels()
        if bottleneck_dim is not None:
            chans[-1] = bottleneck_dim
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        prev = 3
        for i, ch in enumerate(chans):
            self.convs.append(nn.Conv2d(prev, ch, kernel_size=4, stride=2, padding=1))
            self.norms.append(nn.BatchNorm2d(ch) if i > 0 else nn.Identity())
            prev = ch
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv, norm in zip(self.convs, self.norms):
            x = norm(self.act(conv(x)))
            feats.append(x)
        return feats


class _Decoder(nn.Module):
    """Stack of conv 3x3 -> ReLU -> bilinear upsample x2 -> BN units.

    With skips, each unit's output (except the last) is concatenated with the
    matching encoder feature. The final unit has 2 output channels; tanh is
    applied by the caller.
    """

    def __init__(self, config: NetConfig, skips: bool):
        super().__init__()
        self.skips = skips
        plan = config.decoder_plan(skips)
        self.convs = nn.ModuleList(
            nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=1, padding=1) for in_ch, out_ch in plan
        )
        self.norms = nn.ModuleList(nn.BatchNorm2d(out_ch) for _, out_ch in plan)
        self.act = nn.ReLU()
        # the last norm feeds tanh; starting its scale below 1 keeps the
        # initial grid smooth and near the frame center instead of scrambled,
        # which speeds up early warp learning considerably
        nn.init.constant_(self.norms[-1].weight, 0.3)

    def forward(self, bottleneck: torch.Tensor, enc_feats: list[torch.Tensor] | None = None) -> torch.Tensor:
        x = bottleneck
        n = len(self.convs)
        for j, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            x = norm(bilinear_upsample2x(self.act(conv(x))))
            if self.skips and j < n - 1:
                x = torch.cat([x, enc_feats[n - 2 - j]], dim=1)
        return x


class EmbeddingNetwork(nn.Module):
    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        self.encoder = _Encoder(config)
        self.decoder = _Decoder(config, skips=True)

    def forward(self, source: torch.Tensor, flow_override: torch.Tensor | None = None):
        """(B,3,H,W) -> (grid (B,H,W,2), embedded (B,3,H,W)).

        flow_override is a test hook replacing the predicted grid; the network
        body is skipped entirely when it is given.
        """
        _check_resolution(self.config, source)
        if flow_override is None:
            feats = self.encoder(source)
            raw = self.decoder(feats[-1], feats)
            grid = torch.tanh(raw).permute(0, 2, 3, 1)
        else:
            grid = flow_override
        return grid, bilinear_sample(source, grid)


class DrivingNetwork(nn.Module):
    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        self.encoder = _Encoder(config, bottleneck_dim=config.driving_vector_dim)
        self.decoder = _Decoder(config, skips=False)

    def encode(self, driving: torch.Tensor) -> torch.Tensor:
        """(B,3,H,W) -> (B, driving_vector_dim) from the 1x1 bottleneck."""
        _check_resolution(self.config, driving)
        bottleneck = self.encoder(driving)[-1]
        if bottleneck.shape[-2:] != (1, 1):
            raise ShapeError(f"bottleneck not 1x1, got {tuple(bottleneck.shape)}")
        return bottleneck.flatten(1)

    def decode(
        self,
        v: torch.Tensor,
        embedded: torch.Tensor,
        flow_override: torch.Tensor | None = None,
    ):
        """(B,D) x (B,3,H,W) -> (grid, generated). Same test hook as above."""
        if v.dim() != 2 or v.shape[1] != self.config.driving_vector_dim:
            raise ShapeError(
                f"driving vector must be (B,{self.config.driving_vector_dim}), got {tuple(v.shape)}"
            )
        if flow_override is None:
            raw = self.decoder(v.reshape(v.shape[0], -1, 1, 1))
            grid = torch.tanh(raw).permute(0, 2, 3, 1)
        else:
            grid = flow_override
        return grid, bilinear_sample(embedded, grid)

    def forward(self, driving: torch.Tensor, embedded: torch.Tensor):
        return self.decode(self.encode(driving), embedded)


def _check_resolution(config: NetConfig, frames: torch.Tensor):
    if frames.dim() != 4 or frames.shape[1] != 3:
        raise ShapeError(f"expected (B,3,H,W) frames, got {tuple(frames.shape)}")
    if frames.shape[-2] != config.resolution or frames.shape[-1] != config.resolution:
        raise ResolutionMismatchError(
            f"network resolution {config.resolution} does not match "
            f"input resolution {frames.shape[-2]}x{frames.shape[-1]}"
        )


def build_networks(config: NetConfig, seed: int = 0) -> tuple[EmbeddingNetwork, DrivingNetwork]:
    """Construct both networks with seeded fan-in-scaled uniform init."""
    torch.manual_seed(seed)
    return EmbeddingNetwork(config), DrivingNetwork(config)


@contextlib.contextmanager
def eval_mode(*nets: nn.Module):
    """Temporarily put modules in eval mode (running batch-norm statistics)."""
    prev = [n.training for n in nets]
    try:
        for n in nets:
            n.eval()
        yield
    finally:
        for n, p in zip(nets, prev):
            n.train(p)


def _as_batch(frame: torch.Tensor) -> torch.Tensor:
    if frame.dim() != 3:
        raise ShapeError(f"expected a (3,H,W) frame, got {tuple(frame.shape)}")
    return frame.unsqueeze(0)


def embed_source(net: EmbeddingNetwork, source: torch.Tensor, flow_override: torch.Tensor | None = None):
    """Single-frame inference: (3,H,W) -> (flow (H,W,2), embedded (3,H,W))."""
    override = flow_override.unsqueeze(0) if flow_override is not None else None
    with eval_mode(net), torch.no_grad():
        grid, embedded = net(_as_batch(source), override)
    return grid[0], embedded[0]


def embed_multi(net: EmbeddingNetwork, sources: list[torch.Tensor]) -> torch.Tensor:
    """Pixelwise mean of the individual embedded faces.

    Accumulates in float64 so the mean is exact for same-sign inputs, which
    makes the result independent of source ordering and makes the mean of M
    identical frames reproduce the single-frame embedding bit-for-bit.
    """
    if not sources:
        raise ShapeError("embed_multi needs at least one source frame")
    with eval_mode(net), torch.no_grad():
        # one frame at a time so each embedding is bitwise the same as its
        # embed_source result regardless of backend batching
        embedded = [net(_as_batch(s))[1][0] for s in sources]
    acc = torch.stack(embedded).to(torch.float64).mean(dim=0)
    return acc.to(embedded[0].dtype)


def drive_encode(net: DrivingNetwork, driving: torch.Tensor) -> torch.Tensor:
    """(3,H,W) -> (driving_vector_dim,) in inference mode."""
    with eval_mode(net), torch.no_grad():
        return net.encode(_as_batch(driving))[0]


def drive_decode(
    net: DrivingNetwork,
    v: torch.Tensor,
    embedded: torch.Tensor,
    flow_override: torch.Tensor | None = None,
):
    """(D,) x (3,H,W) -> (flow (H,W,2), generated (3,H,W)) in inference mode."""
    if v.dim() != 1:
        raise ShapeError(f"expected a flat driving vector, got {tuple(v.shape)}")
    override = flow_override.unsqueeze(0) if flow_override is not None else None
    with eval_mode(net), torch.no_grad():
        grid, generated = net.decode(v.unsqueeze(0), _as_batch(embedded), override)
    return grid[0], generated[0]


def x2face_forward(
    emb_net: EmbeddingNetwork,
    drv_net: DrivingNetwork,
    sources: list[torch.Tensor],
    driving: torch.Tensor,
) -> torch.Tensor:
    """Full pipeline: embed the sources, encode the driving frame, warp."""
    embedded = embed_multi(emb_net, sources)
    v = drive_encode(drv_net, driving)
    _, generated = drive_decode(drv_net, v, embedded)
    return generated


def pipeline_forward(
    emb_net: EmbeddingNetwork,
    drv_net: DrivingNetwork,
    sources: torch.Tensor,
    drivings: torch.Tensor,
) -> torch.Tensor:
    """Batched, gradient-enabled single-source pipeline used by training."""
    _, embedded = emb_net(sources)
    _, generated = drv_net(drivings, embedded)
    return generated
