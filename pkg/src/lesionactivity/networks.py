"""Single- and two-path 3D encoder-decoder segmentation networks.

All variants share one backbone: an initial 3x3x3 convolution to
`base_channels`, four encoder scales with 1/2/2/4 pre-activation residual
blocks, stride-2 3x3x3 downsampling convolutions that double the channel
count, and a decoder with one 3x3x3 convolution, nearest-neighbor 2x
upsampling, a summation skip, and one residual block per scale. The output
layer is a 1x1x1 convolution with a logistic activation, so every voxel
carries a probability. Normalization is instance norm (batch size 1).

Single-path models fuse the two time points at the input (difference,
addition, or channel stacking) or take one scan (per-scan segmentation).
Two-path models run one encoder per time point, fuse the bottleneck
feature maps (difference / addition / concatenation), and sum long-range
skips formed by concatenating both encoders' scale features and projecting
them back with a 1x1x1 convolution.

Cross-time information exchange is provided by attention gates at chosen
encoder scales. Method A gates each path with a sigmoid 1x1x1 convolution
of the other path's features; methods B and C gate with a convolution of
the concatenated features, C sharing one convolution between both paths
(identical maps, half the parameters). Gates are residual: out = F + a*F,
so attention can only emphasize, never erase.

Feature map convention: tensors are (batch, channels, X, Y, Z); at scale
s_i the spatial size is input_size / 2^(i-1) and the channel count is
base_channels * 2^(i-1).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigurationError(ValueError):
    """A network configuration violates a structural constraint."""


PATH_MODES = ("single", "two")
INPUT_FUSIONS = ("none", "diff", "add", "stack")
FEATURE_FUSIONS = ("diff", "add", "stack")
ATTENTION_METHODS = ("none", "A", "B", "C")
ATTENTION_SCALES = ("s2", "s3", "s4")
N_SCALES = 4

# table-style location names under the canonical 128^3 input
LOCATION_ALIASES = {"64^3": "s2", "32^3": "s3", "16^3": "s4"}


@dataclass(frozen=True)
class NetworkConfig:
    """Declarative description of one architecture variant."""

    paths: str = "two"
    input_fusion: str = "none"
    feature_fusion: str | None = "stack"
    attention: str = "none"
    attention_scales: tuple[str, ...] = ()
    base_channels: int = 32
    blocks_per_scale: tuple[int, int, int, int] = (1, 2, 2, 4)
    input_size: tuple[int, int, int] = (128, 128, 128)

    def __post_init__(self):
        scales = tuple(LOCATION_ALIASES.get(s, s) for s in self.attention_scales)
        object.__setattr__(self, "attention_scales", scales)
        object.__setattr__(self, "blocks_per_scale", tuple(int(b) for b in self.blocks_per_scale))
        object.__setattr__(self, "input_size", tuple(int(n) for n in self.input_size))
        self._validate()

    def _validate(self):
        if self.paths not in PATH_MODES:
            raise ConfigurationError(f"paths must be one of {PATH_MODES}, got {self.paths!r}")
        if self.input_fusion not in INPUT_FUSIONS:
            raise ConfigurationError(f"input_fusion must be one of {INPUT_FUSIONS}, got {self.input_fusion!r}")
        if self.attention not in ATTENTION_METHODS:
            raise ConfigurationError(f"attention must be one of {ATTENTION_METHODS}, got {self.attention!r}")
        if self.paths == "single":
            if self.feature_fusion is not None:
                raise ConfigurationError("feature_fusion requires paths='two'")
            if self.attention != "none" or self.attention_scales:
                raise ConfigurationError("attention requires paths='two'")
        else:
            if self.input_fusion != "none":
                raise ConfigurationError("input_fusion requires paths='single'")
            if self.feature_fusion not in FEATURE_FUSIONS:
                raise ConfigurationError(
                    f"two-path models need feature_fusion in {FEATURE_FUSIONS}, got {self.feature_fusion!r}"
                )
        if self.attention == "none" and self.attention_scales:
            raise ConfigurationError("attention_scales given but attention method is 'none'")
        if self.attention != "none" and not self.attention_scales:
            raise ConfigurationError(f"attention method {self.attention!r} needs attention_scales")
        bad = [s for s in self.attention_scales if s not in ATTENTION_SCALES]
        if bad:
            raise ConfigurationError(f"attention_scales must be within {ATTENTION_SCALES}, got {bad}")
        if len(set(self.attention_scales)) != len(self.attention_scales):
            raise ConfigurationError(f"duplicate attention_scales: {self.attention_scales}")
        if self.base_channels < 1:
            raise ConfigurationError(f"base_channels must be >= 1, got {self.base_channels}")
        if len(self.blocks_per_scale) != N_SCALES or min(self.blocks_per_scale) < 1:
            raise ConfigurationError(f"blocks_per_scale must be {N_SCALES} positive counts, got {self.blocks_per_scale}")
        if len(self.input_size) != 3 or any(n < 8 or n % 8 for n in self.input_size):
            raise ConfigurationError(f"input_size must be divisible by 8 per axis, got {self.input_size}")

    @property
    def in_channels(self) -> int:
        return 2 if (self.paths == "single" and self.input_fusion == "stack") else 1

    @property
    def n_inputs(self) -> int:
        """Number of volumes the model consumes (1 for per-scan models)."""
        return 1 if (self.paths == "single" and self.input_fusion == "none") else 2

    def channels_at(self, scale: int) -> int:
        return self.base_channels * 2 ** (scale - 1)

    def spatial_at(self, scale: int) -> tuple[int, int, int]:
        return tuple(n // 2 ** (scale - 1) for n in self.input_size)

    def to_dict(self) -> dict:
        return {
            "paths": self.paths,
            "input_fusion": self.input_fusion,
            "feature_fusion": self.feature_fusion,
            "attention": self.attention,
            "attention_scales": list(self.attention_scales),
            "base_channels": self.base_channels,
            "blocks_per_scale": list(self.blocks_per_scale),
            "input_size": list(self.input_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        for key in ("attention_scales", "blocks_per_scale", "input_size"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def describe(self) -> str:
        """Short human-readable variant name (e.g. 'TP Stack C @s4')."""
        if self.paths == "single":
            name = "STP" if self.input_fusion == "none" else f"SP {self.input_fusion.capitalize()}"
        else:
            name = f"TP {self.feature_fusion.capitalize()}"
        if self.attention != "none":
            name += f" {self.attention} @{','.join(self.attention_scales)}"
        return name


def single_path_config(input_fusion: str = "stack", **kwargs) -> NetworkConfig:
    """Single-path variant; input_fusion='none' is the per-scan model."""
    return NetworkConfig(paths="single", input_fusion=input_fusion, feature_fusion=None, **kwargs)


def two_path_config(feature_fusion: str = "stack", attention: str = "none",
                    attention_scales=(), **kwargs) -> NetworkConfig:
    """Two-path variant with optional attention gates."""
    return NetworkConfig(
        paths="two", feature_fusion=feature_fusion,
        attention=attention, attention_scales=tuple(attention_scales), **kwargs,
    )


class ResidualBlock(nn.Module):
    """Pre-activation residual block: (IN -> ReLU -> 3x3x3 conv) twice + skip.

    The skip is the identity when channel counts match, otherwise a 1x1x1
    projection.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.norm1 = nn.InstanceNorm3d(in_channels, affine=True, eps=1e-5)
        self.conv1 = nn.Conv3d(in_channels, out_channels, 3, padding=1)
        self.norm2 = nn.InstanceNorm3d(out_channels, affine=True, eps=1e-5)
        self.conv2 = nn.Conv3d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Identity() if in_channels == out_channels else nn.Conv3d(in_channels, out_channels, 1)

    def forward(self, x):
        h = self.conv1(F.relu(self.norm1(x)))
        h = self.conv2(F.relu(self.norm2(h)))
        return h + self.skip(x)


class AttentionGate(nn.Module):
    """Residual cross-path attention at one encoder scale.

    Methods (gates are 1x1x1 convolutions followed by a sigmoid; maps have
    the full feature shape, per channel and per voxel):
      A: a_bl = sigmoid(conv_bl(F_fu)), a_fu = sigmoid(conv_fu(F_bl))
      B: a_bl = sigmoid(conv_bl(cat(F_fu, F_bl))), a_fu likewise with conv_fu
      C: as B with conv_bl and conv_fu being the same convolution, hence
         a_bl == a_fu and half the parameters of B
    Output per path: F + a * F.
    """

    def __init__(self, method: str, channels: int):
        super().__init__()
        if method not in ("A", "B", "C"):
            raise ConfigurationError(f"attention method must be A, B, or C, got {method!r}")
        self.method = method
        self.channels = channels
        if method == "A":
            self.gate_bl = nn.Conv3d(channels, channels, 1)
            self.gate_fu = nn.Conv3d(channels, channels, 1)
        elif method == "B":
            self.gate_bl = nn.Conv3d(2 * channels, channels, 1)
            self.gate_fu = nn.Conv3d(2 * channels, channels, 1)
        else:  # C: one shared convolution registered for both roles
            shared = nn.Conv3d(2 * channels, channels, 1)
            self.gate_bl = shared
            self.gate_fu = shared

    def attention_maps(self, f_bl, f_fu):
        if f_bl.shape != f_fu.shape:
            raise ValueError(f"attention inputs must match, got {tuple(f_bl.shape)} vs {tuple(f_fu.shape)}")
        if f_bl.shape[1] != self.channels:
            raise ConfigurationError(
                f"attention gate built for {self.channels} channels, got {f_bl.shape[1]}"
            )
        if self.method == "A":
            a_bl = torch.sigmoid(self.gate_bl(f_fu))
            a_fu = torch.sigmoid(self.gate_fu(f_bl))
        else:
            stacked = torch.cat([f_fu, f_bl], dim=1)
            a_bl = torch.sigmoid(self.gate_bl(stacked))
            a_fu = a_bl if self.method == "C" else torch.sigmoid(self.gate_fu(stacked))
        return a_bl, a_fu

    def forward(self, f_bl, f_fu):
        a_bl, a_fu = self.attention_maps(f_bl, f_fu)
        return f_bl + a_bl * f_bl, f_fu + a_fu * f_fu


class Encoder(nn.Module):
    """Stem + four residual-block stages with stride-2 downsampling between."""

    def __init__(self, cfg: NetworkConfig, in_channels: int):
        super().__init__()
        self.stem = nn.Conv3d(in_channels, cfg.base_channels, 3, padding=1)
        self.stages = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i in range(N_SCALES):
            ch = cfg.channels_at(i + 1)
            self.stages.append(nn.Sequential(*[ResidualBlock(ch, ch) for _ in range(cfg.blocks_per_scale[i])]))
            if i < N_SCALES - 1:
                self.downs.append(nn.Conv3d(ch, 2 * ch, 3, stride=2, padding=1))

    def forward(self, x) -> list[torch.Tensor]:
        """Per-scale feature maps [f_s1, f_s2, f_s3, f_s4]."""
        h = self.stem(x)
        feats = []
        for i in range(N_SCALES):
            h = self.stages[i](h)
            feats.append(h)
            if i < N_SCALES - 1:
                h = self.downs[i](h)
        return feats


class Decoder(nn.Module):
    """Per scale: 3x3x3 conv, nearest-neighbor 2x upsampling, summation
    skip, one residual block; then a 1x1x1 probability head."""

    def __init__(self, cfg: NetworkConfig, bottleneck_channels: int):
        super().__init__()
        widths = [cfg.channels_at(i) for i in range(1, N_SCALES + 1)]
        ins = [bottleneck_channels, widths[2], widths[1]]
        outs = [widths[2], widths[1], widths[0]]
        self.convs = nn.ModuleList(nn.Conv3d(i, o, 3, padding=1) for i, o in zip(ins, outs))
        self.blocks = nn.ModuleList(ResidualBlock(o, o) for o in outs)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.head = nn.Conv3d(widths[0], 1, 1)

    def forward(self, bottom, skips):
        """`skips` are the scale s3, s2, s1 summands, in that order."""
        d = bottom
        for conv, block, skip in zip(self.convs, self.blocks, skips):
            d = block(self.up(conv(d)) + skip)
        return torch.sigmoid(self.head(d))


def _check_input(x, expected_channels: int):
    if x.dim() != 5:
        raise ValueError(f"expected a (batch, channel, X, Y, Z) tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != expected_channels:
        raise ValueError(f"expected {expected_channels} input channel(s), got {x.shape[1]}")
    if any(n % 8 for n in x.shape[2:]):
        raise ValueError(f"spatial input size must be divisible by 8, got {tuple(x.shape[2:])}")


class SinglePathNet(nn.Module):
    """One encoder; the two time points are fused at the input (or the
    model takes a single scan when input_fusion='none')."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        if cfg.paths != "single":
            raise ConfigurationError("SinglePathNet needs a single-path config")
        self.config = cfg
        self.encoder = Encoder(cfg, cfg.in_channels)
        self.decoder = Decoder(cfg, cfg.channels_at(N_SCALES))

    @property
    def n_inputs(self) -> int:
        return self.config.n_inputs

    def forward(self, x):
        _check_input(x, self.config.in_channels)
        feats = self.encoder(x)
        return self.decoder(feats[3], [feats[2], feats[1], feats[0]])

    def fuse_inputs(self, baseline, followup):
        mode = self.config.input_fusion
        if mode == "none":
            raise ConfigurationError("this model is per-scan (input_fusion='none'); call forward(x) per volume")
        if baseline.shape != followup.shape:
            raise ValueError(f"baseline/followup shapes differ: {tuple(baseline.shape)} vs {tuple(followup.shape)}")
        if mode == "diff":
            return followup - baseline
        if mode == "add":
            return followup + baseline
        return torch.cat([baseline, followup], dim=1)

    def forward_volumes(self, *volumes):
        """Uniform entry point: one tensor for per-scan models, (bl, fu) otherwise."""
        if len(volumes) != self.n_inputs:
            raise ValueError(f"model takes {self.n_inputs} input volume(s), got {len(volumes)}")
        if self.config.input_fusion == "none":
            return self.forward(volumes[0])
        return self.forward(self.fuse_inputs(*volumes))


class TwoPathNet(nn.Module):
    """One independent encoder per time point (no weight sharing), optional
    attention gates between the paths, bottleneck feature fusion, and a
    shared decoder with projected concatenation skips."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        if cfg.paths != "two":
            raise ConfigurationError("TwoPathNet needs a two-path config")
        self.config = cfg
        self.encoder_bl = Encoder(cfg, 1)
        self.encoder_fu = Encoder(cfg, 1)
        self.attention_gates = nn.ModuleDict({
            scale: AttentionGate(cfg.attention, cfg.channels_at(int(scale[1])))
            for scale in cfg.attention_scales
        })
        # long-range skips concatenate both encoders' maps (2C) and project
        # back to the decoder width C before summation
        self.skip_projections = nn.ModuleDict({
            f"s{i}": nn.Conv3d(2 * cfg.channels_at(i), cfg.channels_at(i), 1)
            for i in (1, 2, 3)
        })
        bottleneck = cfg.channels_at(N_SCALES) * (2 if cfg.feature_fusion == "stack" else 1)
        self.decoder = Decoder(cfg, bottleneck)

    @property
    def n_inputs(self) -> int:
        return 2

    def encode_pair(self, baseline, followup, capture: dict | None = None):
        """Run both encoders stage by stage, applying attention gates at the
        configured scales. Optionally captures attention maps per scale."""
        h_b = self.encoder_bl.stem(baseline)
        h_f = self.encoder_fu.stem(followup)
        feats_b, feats_f = [], []
        for i in range(N_SCALES):
            h_b = self.encoder_bl.stages[i](h_b)
            h_f = self.encoder_fu.stages[i](h_f)
            scale = f"s{i + 1}"
            if scale in self.attention_gates:
                gate = self.attention_gates[scale]
                if capture is not None:
                    capture[scale] = gate.attention_maps(h_b, h_f)
                h_b, h_f = gate(h_b, h_f)
            feats_b.append(h_b)
            feats_f.append(h_f)
            if i < N_SCALES - 1:
                h_b = self.encoder_bl.downs[i](h_b)
                h_f = self.encoder_fu.downs[i](h_f)
        return feats_b, feats_f

    def fuse(self, f_bl, f_fu):
        mode = self.config.feature_fusion
        if mode == "diff":
            return f_fu - f_bl
        if mode == "add":
            return f_fu + f_bl
        return torch.cat([f_bl, f_fu], dim=1)

    def forward(self, baseline, followup):
        _check_input(baseline, 1)
        _check_input(followup, 1)
        if baseline.shape != followup.shape:
            raise ValueError(f"baseline/followup shapes differ: {tuple(baseline.shape)} vs {tuple(followup.shape)}")
        feats_b, feats_f = self.encode_pair(baseline, followup)
        fused = self.fuse(feats_b[3], feats_f[3])
        skips = [
            self.skip_projections[f"s{i}"](torch.cat([feats_b[i - 1], feats_f[i - 1]], dim=1))
            for i in (3, 2, 1)
        ]
        return self.decoder(fused, skips)

    def forward_volumes(self, *volumes):
        if len(volumes) != 2:
            raise ValueError(f"model takes 2 input volumes, got {len(volumes)}")
        return self.forward(*volumes)

    def attention_map_values(self, baseline, followup) -> dict:
        """Attention maps per gated scale, for inspection/visualization."""
        capture: dict = {}
        self.encode_pair(baseline, followup, capture=capture)
        return capture


def _init_he(module):
    if isinstance(module, nn.Conv3d):
        nn.init.kaiming_normal_(module.weight, nonlinearity="relu")
        nn.init.zeros_(module.bias)


def build_network(cfg: NetworkConfig, seed: int | None = None) -> nn.Module:
    """Construct (and He-initialize) the network a config describes.

    `seed` seeds torch's global RNG first, making initialization
    reproducible.
    """
    if seed is not None:
        torch.manual_seed(seed)
    net = SinglePathNet(cfg) if cfg.paths == "single" else TwoPathNet(cfg)
    net.apply(_init_he)
    return net


def attention_parameter_counts(net: TwoPathNet) -> dict[str, int]:
    """Distinct-parameter count of each attention gate (shared weights counted once)."""
    return {
        scale: sum(p.numel() for p in gate.parameters())
        for scale, gate in net.attention_gates.items()
    }


def save_checkpoint(net, path, *, epoch: int | None = None, optimizer=None) -> Path:
    """Native checkpoint plus a JSON sidecar echoing the config.

    The torch file is self-describing (config embedded); the sidecar at
    `<path>.json` is the human-readable echo.
    """
    path = Path(path)
    payload = {"config": net.config.to_dict(), "state_dict": net.state_dict(), "epoch": epoch}
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    torch.save(payload, path)
    sidecar = {"config": net.config.to_dict(), "epoch": epoch, "format": "torch-state-dict"}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[nn.Module, dict]:
    """Rebuild a network from a checkpoint; returns (net, payload)."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    cfg = NetworkConfig.from_dict(payload["config"])
    net = build_network(cfg)
    net.load_state_dict(payload["state_dict"])
    net.eval()
    return net, payload
