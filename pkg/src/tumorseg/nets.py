"""Encoder-decoder networks: V-Net, basic 3D-UNet and residual 3D-UNet.

All variants map a (N, 4, D, H, W) input to (N, 4, D, H, W) logits, use
"same" padded 3^3 convolutions, and place one channel-dropout layer at the
end of every encoder and decoder level.  Dropout is active in ``train`` and
``eval_with_dropout`` modes only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

VARIANTS = ("vnet", "unet_basic", "unet_residual")
MODES = ("train", "eval", "eval_with_dropout")


@dataclass(frozen=True)
class NetConfig:
    variant: str = "unet_residual"
    base_channels: int = 8
    levels: int = 3
    norm: str = "group"
    groups: int = 8
    nonlinearity: str = "relu"
    dropout_p: float = 0.5
    in_channels: int = 4
    out_classes: int = 4
    upsample: str = "trilinear"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.base_channels < 2:
            raise ConfigError("base_channels must be >= 2")
        if self.levels < 2:
            raise ConfigError("levels must be >= 2")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if self.norm not in ("instance", "group"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.nonlinearity not in ("relu", "prelu"):
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.upsample not in ("trilinear", "nearest"):
            raise ConfigError(f"unknown upsample mode {self.upsample!r}")

    @property
    def multiple(self) -> int:
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def full_size(cls, variant: str) -> "NetConfig":
        """Full-size configuration: 32 channels at the top, four levels."""
        if variant == "vnet":
            return cls(variant, 32, 4, norm="instance", nonlinearity="prelu")
        return cls(variant, 32, 4)


def _norm(cfg: NetConfig, ch: int) -> nn.Module:
    if cfg.norm == "instance":
        return nn.InstanceNorm3d(ch, affine=True)
    groups = min(cfg.groups, ch)
    while ch % groups:
        groups -= 1
    return nn.GroupNorm(groups, ch)


def _act(cfg: NetConfig, ch: int) -> nn.Module:
    return nn.PReLU(ch) if cfg.nonlinearity == "prelu" else nn.ReLU()


def _conv(cin, cout, k=3):
    return nn.Conv3d(cin, cout, k, padding=k // 2)


def _init_weights(module: nn.Module):
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


# ---------------------------------------------------------------------------
# V-Net
# ---------------------------------------------------------------------------


class _VStage(nn.Module):
    """``n`` conv-norm-act layers with a residual connection around them."""

    def __init__(self, cfg, ch, n):
        super().__init__()
        layers = []
        for _ in range(n):
            layers += [_conv(ch, ch), _norm(cfg, ch), _act(cfg, ch)]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x) + x


class VNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        c = cfg.base_channels
        chans = [c * 2 ** i for i in range(cfg.levels)]
        self.stem = nn.Sequential(_conv(cfg.in_channels, c), _norm(cfg, c), _act(cfg, c))
        self.enc = nn.ModuleList([_VStage(cfg, chans[0], 1)])
        self.down = nn.ModuleList()
        for i in range(1, cfg.levels):
            self.down.append(nn.Sequential(
                nn.Conv3d(chans[i - 1], chans[i], 2, stride=2), _norm(cfg, chans[i]), _act(cfg, chans[i])))
            self.enc.append(_VStage(cfg, chans[i], min(i + 1, 3)))
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in reversed(range(cfg.levels - 1)):
            self.up.append(nn.Sequential(
                nn.ConvTranspose3d(chans[i + 1], chans[i], 2, stride=2), _norm(cfg, chans[i]), _act(cfg, chans[i])))
            self.dec.append(nn.Sequential(
                _conv(2 * chans[i], chans[i]), _norm(cfg, chans[i]), _act(cfg, chans[i]),
                _VStage(cfg, chans[i], min(i + 1, 3))))
        self.enc_drop = nn.ModuleList([nn.Dropout3d(cfg.dropout_p) for _ in range(cfg.levels)])
        self.dec_drop = nn.ModuleList([nn.Dropout3d(cfg.dropout_p) for _ in range(cfg.levels - 1)])
        self.head = nn.Conv3d(c, cfg.out_classes, 1)

    def forward(self, x):
        skips = []
        x = self.enc_drop[0](self.enc[0](self.stem(x)))
        for i, down in enumerate(self.down, start=1):
            skips.append(x)
            x = self.enc_drop[i](self.enc[i](down(x)))
        for up, dec, drop in zip(self.up, self.dec, self.dec_drop):
            x = drop(dec(torch.cat([up(x), skips.pop()], dim=1)))
        return self.head(x)


# ---------------------------------------------------------------------------
# 3D-UNet (basic and residual)
# ---------------------------------------------------------------------------


def _double_conv(cfg, cin, cout):
    # conv -> ReLU -> GroupNorm, twice
    return nn.Sequential(
        _conv(cin, cout), _act(cfg, cout), _norm(cfg, cout),
        _conv(cout, cout), _act(cfg, cout), _norm(cfg, cout),
    )


class UNet3D(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        c = cfg.base_channels
        chans = [c * 2 ** i for i in range(cfg.levels)]
        self.upsample = cfg.upsample
        self.enc = nn.ModuleList()
        cin = cfg.in_channels
        for ch in chans:
            self.enc.append(_double_conv(cfg, cin, ch))
            cin = ch
        self.dec = nn.ModuleList(
            _double_conv(cfg, chans[i + 1] + chans[i], chans[i]) for i in reversed(range(cfg.levels - 1)))
        self.enc_drop = nn.ModuleList([nn.Dropout3d(cfg.dropout_p) for _ in range(cfg.levels)])
        self.dec_drop = nn.ModuleList([nn.Dropout3d(cfg.dropout_p) for _ in range(cfg.levels - 1)])
        self.head = nn.Conv3d(c, cfg.out_classes, 1)

    def forward(self, x):
        skips = []
        for i, (block, drop) in enumerate(zip(self.enc, self.enc_drop)):
            if i:
                skips.append(x)
                x = F.max_pool3d(x, 2)
            x = drop(block(x))
        for block, drop in zip(self.dec, self.dec_drop):
            skip = skips.pop()
            kwargs = {"align_corners": False} if self.upsample == "trilinear" else {}
            x = F.interpolate(x, size=skip.shape[2:], mode=self.upsample, **kwargs)
            x = drop(block(torch.cat([x, skip], dim=1)))
        return self.head(x)


class ResBlock(nn.Module):
    """``branch(x) + project(x)``; ``project`` is a 1^3 conv when channels change."""

    def __init__(self, cfg, cin, cout):
        super().__init__()
        self.branch = nn.Sequential(
            _conv(cin, cout), _norm(cfg, cout), _act(cfg, cout),
            _conv(cout, cout), _norm(cfg, cout),
        )
        self.project = nn.Identity() if cin == cout else nn.Conv3d(cin, cout, 1)

    def forward(self, x):
        return self.branch(x) + self.project(x)


class ResidualUNet3D(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        c = cfg.base_channels
        chans = [c * 2 ** i for i in range(cfg.levels)]
        self.enc = nn.ModuleList()
        cin = cfg.in_channels
        for ch in chans:
            self.enc.append(nn.Sequential(ResBlock(cfg, cin, ch), ResBlock(cfg, ch, ch)))
            cin = ch
        self.up = nn.ModuleList(
            nn.ConvTranspose3d(chans[i + 1], chans[i], 2, stride=2) for i in reversed(range(cfg.levels - 1)))
        self.dec = nn.ModuleList(ResBlock(cfg, chans[i], chans[i]) for i in reversed(range(cfg.levels - 1)))
        for up, dec in zip(self.up, self.dec):
            if up.out_channels != dec.branch[0].in_channels:
                raise ConfigError("summation skip needs matching channel counts")
        self.enc_drop = nn.ModuleList([nn.Dropout3d(cfg.dropout_p) for _ in range(cfg.levels)])
        self.dec_drop = nn.ModuleList([nn.Dropout3d(cfg.dropout_p) for _ in range(cfg.levels - 1)])
        self.head = nn.Conv3d(c, cfg.out_classes, 1)

    def forward(self, x):
        skips = []
        for i, (block, drop) in enumerate(zip(self.enc, self.enc_drop)):
            if i:
                skips.append(x)
                x = F.max_pool3d(x, 2)
            x = drop(block(x))
        for up, block, drop in zip(self.up, self.dec, self.dec_drop):
            x = drop(block(up(x) + skips.pop()))
        return self.head(x)


_BUILDERS = {"vnet": VNet, "unet_basic": UNet3D, "unet_residual": ResidualUNet3D}


# ---------------------------------------------------------------------------
# Network wrapper
# ---------------------------------------------------------------------------


class Network:
    """A built model together with its :class:`NetConfig` and a mode flag."""

    def __init__(self, config: NetConfig, module: nn.Module):
        self.config = config
        self.module = module
        self.mode = "eval"
        self.set_mode("eval")

    def set_mode(self, mode: str, dropout_p: Optional[float] = None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.mode = mode
        self.module.train(mode == "train")
        p = self.config.dropout_p if dropout_p is None else dropout_p
        for m in self.module.modules():
            if isinstance(m, nn.Dropout3d):
                m.p = p
                if mode == "eval_with_dropout":
                    m.train(True)

    def parameters(self):
        return self.module.parameters()

    @property
    def device(self) -> torch.device:
        return next(self.module.parameters()).device

    def to(self, device) -> "Network":
        self.module.to(device)
        return self

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    def check_input(self, x: torch.Tensor):
        if x.dim() != 5 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected input (N, {self.config.in_channels}, D, H, W), got {tuple(x.shape)}")
        m = self.config.multiple
        if any(s % m for s in x.shape[2:]):
            raise ShapeError(f"spatial extents {tuple(x.shape[2:])} must be multiples of {m}")

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        return self.module(x.to(self.device))

    def state_dict(self):
        return self.module.state_dict()

    def load_state_dict(self, state):
        self.module.load_state_dict(state)


def build_network(config: NetConfig) -> Network:
    module = _BUILDERS[config.variant](config)
    _init_weights(module)
    return Network(config, module)


def build_vnet(config: NetConfig) -> Network:
    if config.variant != "vnet":
        raise ConfigError(f"build_vnet needs variant 'vnet', got {config.variant!r}")
    return build_network(config)


def build_unet_basic(config: NetConfig) -> Network:
    if config.variant != "unet_basic":
        raise ConfigError(f"build_unet_basic needs variant 'unet_basic', got {config.variant!r}")
    return build_network(config)


def build_unet_residual(config: NetConfig) -> Network:
    if config.variant != "unet_residual":
        raise ConfigError(f"build_unet_residual needs variant 'unet_residual', got {config.variant!r}")
    return build_network(config)


def forward(net: Network, x, mode: str = "eval", dropout_p: Optional[float] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Run ``net`` in ``mode`` and return ``(logits, softmax)``.

    ``x`` may be a single (4, D, H, W) sample or a (N, 4, D, H, W) batch;
    outputs match the input's batching.
    """
    x = torch.as_tensor(x, dtype=torch.float32)
    single = x.dim() == 4
    if single:
        x = x.unsqueeze(0)
    previous = net.mode
    net.set_mode(mode, dropout_p)
    try:
        if mode == "train":
            logits = net(x)
        else:
            with torch.no_grad():
                logits = net(x)
    finally:
        net.set_mode(previous)
    probs = torch.softmax(logits, dim=1)
    if single:
        return logits[0], probs[0]
    return logits, probs
