"""Generator and conditional mean-feature discriminator.

Both networks are plain functions of a parameter dict so that the same code
serves float32 training, float64 gradient checks and checkpoint reloads.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import torch

from . import autodiff as ad
from .grid import DimensionError, is_power_of_two

KERNEL = 4


class ConfigError(ValueError):
    pass


@dataclass
class ArchConfig:
    r_in: int = 16
    encoder_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128, 128])
    latent_dim: int = 2000
    leaky_slope: float = 0.2
    disc_channels: list[int] = field(default_factory=lambda: [4, 8, 16, 32, 64, 128])
    upsample_channels: int = 8

    def __post_init__(self):
        self.encoder_channels = [int(c) for c in self.encoder_channels]
        self.disc_channels = [int(c) for c in self.disc_channels]
        if not is_power_of_two(self.r_in) or self.r_in < 16:
            raise ConfigError(f"r_in must be a power of two >= 16, got {self.r_in}")
        if self.r_in ** 3 % self.r_out ** 2:
            raise ConfigError("r_in**3 must be divisible by r_out**2")
        if not self.encoder_channels:
            raise ConfigError("encoder_channels must be nonempty")
        if len(self.disc_channels) != 6:
            raise ConfigError(
                f"disc_channels needs 6 entries, got {len(self.disc_channels)}")
        if min(self.encoder_channels + self.disc_channels) < 1:
            raise ConfigError("channel counts must be positive")
        if self.latent_dim < 1 or self.upsample_channels < 1:
            raise ConfigError("latent_dim and upsample_channels must be positive")
        if not 0 <= self.leaky_slope < 1:
            raise ConfigError("leaky_slope must lie in [0, 1)")

    @property
    def r_out(self) -> int:
        return 4 * self.r_in

    @property
    def pools(self) -> list[bool]:
        """Whether each encoder block halves resolution (skipped once it reaches 1)."""
        out, size = [], self.r_in
        for _ in self.encoder_channels:
            out.append(size > 1)
            size = max(size // 2, 1)
        return out

    @property
    def latent_size(self) -> int:
        return self.r_in >> sum(self.pools)

    @property
    def cond_depth(self) -> int:
        return self.r_in ** 3 // self.r_out ** 2

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ArchConfig":
        return cls(**json.loads(text))


PROFILES = {
    "desk": ArchConfig(),
    # dense width set so the total lands near the reported 167.1M parameters
    "paper": ArchConfig(r_in=64, encoder_channels=[64, 128, 256, 512, 512], latent_dim=8000,
                        disc_channels=[8, 16, 32, 64, 128, 256], upsample_channels=32),
}


@dataclass
class Layer:
    name: str
    kind: str
    in_shape: tuple
    out_shape: tuple
    params: dict  # parameter name -> shape

    @property
    def n_params(self) -> int:
        return sum(math.prod(s) for s in self.params.values())


def _conv(name, kind, in_shape, c_out, stride, transpose=False):
    c_in = in_shape[0]
    if transpose:
        spatial = tuple(s * stride for s in in_shape[1:])
        kshape = (c_in, c_out) + (KERNEL,) * 3
    else:
        spatial = tuple(-(-s // stride) for s in in_shape[1:])
        kshape = (c_out, c_in) + (KERNEL,) * 3
    return Layer(name, kind, in_shape, (c_out,) + spatial,
                 {f"{name}.w": kshape, f"{name}.b": (c_out,)})


def describe_generator(cfg: ArchConfig) -> list[Layer]:
    layers = []
    shape = (1, cfg.r_in, cfg.r_in, cfg.r_in)
    skips = []
    for i, (c, pool) in enumerate(zip(cfg.encoder_channels, cfg.pools)):
        conv = _conv(f"enc{i}", "conv+lrelu", shape, c, 1)
        layers.append(conv)
        skips.append(conv.out_shape)
        shape = conv.out_shape
        if pool:
            pooled = (c,) + tuple(s // 2 for s in shape[1:])
            layers.append(Layer(f"pool{i}", "maxpool", shape, pooled, {}))
            shape = pooled
    flat = math.prod(shape)
    layers.append(Layer("fc0", "dense+relu", (flat,), (cfg.latent_dim,),
                        {"fc0.w": (flat, cfg.latent_dim), "fc0.b": (cfg.latent_dim,)}))
    layers.append(Layer("fc1", "dense+relu", (cfg.latent_dim,), (flat,),
                        {"fc1.w": (cfg.latent_dim, flat), "fc1.b": (flat,)}))
    n = len(cfg.encoder_channels)
    for j in range(n):
        blk = n - 1 - j
        stride = 2 if cfg.pools[blk] else 1
        up = _conv(f"dec{j}", "upconv+relu", shape, cfg.encoder_channels[blk], stride,
                   transpose=True)
        layers.append(up)
        if up.out_shape[1:] != skips[blk][1:]:
            raise ConfigError(f"decoder layer {j} does not match encoder block {blk}")
        shape = (up.out_shape[0] + skips[blk][0],) + up.out_shape[1:]
        layers.append(Layer(f"skip{j}", "concat", up.out_shape, shape, {}))
    up0 = _conv("up0", "upconv+relu", shape, cfg.upsample_channels, 2, transpose=True)
    up1 = _conv("up1", "upconv+sigmoid", up0.out_shape, 1, 2, transpose=True)
    layers += [up0, up1]
    return layers


def describe_discriminator(cfg: ArchConfig) -> list[Layer]:
    r = cfg.r_out
    shape = (1, r, r, r + cfg.cond_depth)
    layers = [Layer("pack", "condition_pack", (1, r, r, r), shape, {})]
    for i, c in enumerate(cfg.disc_channels):
        kind = "conv+sigmoid" if i == len(cfg.disc_channels) - 1 else "conv+relu"
        conv = _conv(f"d{i}", kind, shape, c, 2)
        layers.append(conv)
        shape = conv.out_shape
    layers.append(Layer("mean", "mean_feature", shape, (), {}))
    return layers


def describe(cfg: ArchConfig) -> dict:
    """Static shape and parameter-count table for both networks."""
    gen, disc = describe_generator(cfg), describe_discriminator(cfg)
    g = sum(layer.n_params for layer in gen)
    d = sum(layer.n_params for layer in disc)
    return {"generator": gen, "discriminator": disc,
            "generator_params": g, "discriminator_params": d, "total_params": g + d}


def format_table(table: dict) -> str:
    lines = []
    for net in ("generator", "discriminator"):
        lines.append(f"[{net}]")
        for layer in table[net]:
            lines.append(f"  {layer.name:<7} {layer.kind:<15} {str(layer.in_shape):<22} -> "
                         f"{str(layer.out_shape):<22} {layer.n_params:>12,d}")
        lines.append(f"  params: {table[net + '_params']:,d}")
    lines.append(f"total params: {table['total_params']:,d}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# parameters

def param_shapes(layers: list[Layer]) -> dict[str, tuple]:
    out = {}
    for layer in layers:
        out.update(layer.params)
    return out


def init_params(shapes: dict[str, tuple], generator: torch.Generator,
                dtype=torch.float32, std: float = 0.02) -> dict[str, torch.Tensor]:
    """Truncated-normal weights (cut at 2 std), zero biases."""
    params = {}
    for name, shape in shapes.items():
        t = torch.zeros(shape, dtype=dtype)
        if name.endswith(".w"):
            torch.nn.init.trunc_normal_(t, 0.0, std, -2 * std, 2 * std, generator=generator)
        params[name] = t.requires_grad_()
    return params


def init_generator(cfg: ArchConfig, seed: int, dtype=torch.float32, std: float = 0.02):
    g = torch.Generator().manual_seed(seed)
    return init_params(param_shapes(describe_generator(cfg)), g, dtype, std)


def init_discriminator(cfg: ArchConfig, seed: int, dtype=torch.float32, std: float = 0.02):
    g = torch.Generator().manual_seed(seed)
    return init_params(param_shapes(describe_discriminator(cfg)), g, dtype, std)


# ---------------------------------------------------------------------------
# forward passes

def _as_volume(x: torch.Tensor, r: int, what: str) -> torch.Tensor:
    if x.dim() == 3:
        x = x[None]
    if x.dim() == 4:
        x = x[:, None]
    if x.dim() != 5 or tuple(x.shape[1:]) != (1, r, r, r):
        raise DimensionError(f"{what} must be (N, 1, {r}, {r}, {r}), got {tuple(x.shape)}")
    return x


def generator_forward(x: torch.Tensor, params: dict, cfg: ArchConfig,
                      use_latent: bool = True) -> torch.Tensor:
    """Map partial grids (N, 1, r_in^3) to occupancy probabilities (N, 1, r_out^3).

    ``use_latent=False`` zeroes the dense bottleneck output, leaving only the skip paths.
    """
    h = _as_volume(x, cfg.r_in, "generator input")
    skips = []
    for i, pool in enumerate(cfg.pools):
        h = ad.leaky_relu(ad.conv3d(h, params[f"enc{i}.w"], params[f"enc{i}.b"], 1),
                          cfg.leaky_slope)
        skips.append(h)
        if pool:
            h = ad.maxpool3d(h)
    shape = h.shape
    z = ad.relu(ad.dense(ad.reshape(h, (shape[0], -1)), params["fc0.w"], params["fc0.b"]))
    h = ad.relu(ad.dense(z, params["fc1.w"], params["fc1.b"]))
    if not use_latent:
        h = h * 0
    h = ad.reshape(h, tuple(shape))
    n = len(cfg.encoder_channels)
    for j in range(n):
        blk = n - 1 - j
        stride = 2 if cfg.pools[blk] else 1
        h = ad.relu(ad.conv3d_transpose(h, params[f"dec{j}.w"], params[f"dec{j}.b"], stride))
        h = ad.concat([h, skips[blk]], axis=1)
    h = ad.relu(ad.conv3d_transpose(h, params["up0.w"], params["up0.b"], 2))
    return ad.sigmoid(ad.conv3d_transpose(h, params["up1.w"], params["up1.b"], 2))


def condition_pack(y: torch.Tensor, x: torch.Tensor, cfg: ArchConfig) -> torch.Tensor:
    """Append the partial grid, reshaped to r_out x r_out x k, along the last spatial axis."""
    y = _as_volume(y, cfg.r_out, "condition_pack output grid")
    x = _as_volume(x, cfg.r_in, "condition_pack partial grid")
    if y.shape[0] != x.shape[0]:
        raise DimensionError("batch sizes of y and x differ")
    r = cfg.r_out
    if cfg.r_in ** 3 % (r * r):
        raise ConfigError("r_in**3 must be divisible by r_out**2")
    xr = ad.reshape(x, (x.shape[0], 1, r, r, cfg.cond_depth))
    return ad.concat([y, xr.to(y.dtype)], axis=4)


def discriminator_forward(y: torch.Tensor, x: torch.Tensor, params: dict,
                          cfg: ArchConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (m, m_vec): per-sample mean feature (N,) and the flattened features (N, F)."""
    h = condition_pack(y, x, cfg)
    last = len(cfg.disc_channels) - 1
    for i in range(len(cfg.disc_channels)):
        h = ad.conv3d(h, params[f"d{i}.w"], params[f"d{i}.b"], 2)
        h = ad.sigmoid(h) if i == last else ad.relu(h)
    m_vec = ad.reshape(h, (h.shape[0], -1))
    return ad.reduce_mean(m_vec, axis=1), m_vec
