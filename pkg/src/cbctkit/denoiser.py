"""Time-conditioned residual 3D U-Net used by the iterative restorer.

Architecture: an input 3x3x3 convolution, then encoder stages of two
residual submodules (norm -> SiLU -> conv, input added to output) followed by
a strided 3x3x3 downsampling convolution; the bottom stage keeps its
resolution.  The decoder mirrors this with transposed 4x4x4 stride-2
upsampling, concatenation of the encoder skip at the same level, and one
residual submodule.  Scaled dot-product attention over all spatial positions
(group norm, 1x1x1 q/k/v/out convolutions, residual add) runs at the
configured deepest levels.  Channels double per level from ``base_channels``.

Time conditioning: a sinusoidal embedding of t passes through a two-layer
SiLU MLP; each residual submodule adds a learned linear projection of that
embedding to its normalized activations before the convolution.  With
``with_time_embedding=False`` the time path is absent and the network is the
plain 3D U-Net baseline, bit-exactly independent of t.

The network carries a global input skip and the residual-tail convolutions
(including the output head and attention output projections) initialize to
zero, so a freshly initialized network is exactly the identity map.

Gradients come from torch reverse-mode autodiff; the test suite checks them
against central finite differences in float64 for every layer type.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError

_MAX_NORM_GROUPS = 8


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture hyperparameters.

    ``attention_levels`` indexes resolution levels (0 = full resolution,
    levels-1 = deepest); ``None`` means the deepest level only.  ``norm`` is
    "batch" per the reference recipe, with "group" as a small-batch
    substitute.
    """

    levels: int = 3
    base_channels: int = 8
    attention_levels: tuple[int, ...] | None = None
    time_embed_dim: int = 64
    with_time_embedding: bool = True
    norm: str = "batch"

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 4:
            raise ConfigError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.time_embed_dim % 2 or self.time_embed_dim < 2:
            raise ConfigError(
                f"time_embed_dim must be even and >= 2, got {self.time_embed_dim}"
            )
        if self.norm not in ("batch", "group"):
            raise ConfigError(f"norm must be 'batch' or 'group', got {self.norm!r}")
        att = self.attention_levels
        att = (self.levels - 1,) if att is None else tuple(sorted(set(int(a) for a in att)))
        for a in att:
            if not (0 <= a < self.levels):
                raise ConfigError(f"attention level {a} outside [0, {self.levels})")
        object.__setattr__(self, "attention_levels", att)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2**i for i in range(self.levels))

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "base_channels": self.base_channels,
            "attention_levels": list(self.attention_levels),
            "time_embed_dim": self.time_embed_dim,
            "with_time_embedding": self.with_time_embedding,
            "norm": self.norm,
        }

    @staticmethod
    def from_dict(d: dict) -> "DenoiserConfig":
        return DenoiserConfig(
            levels=int(d["levels"]),
            base_channels=int(d["base_channels"]),
            attention_levels=tuple(d["attention_levels"]),
            time_embed_dim=int(d["time_embed_dim"]),
            with_time_embedding=bool(d["with_time_embedding"]),
            norm=d.get("norm", "batch"),
        )


def desk_config(**overrides) -> DenoiserConfig:
    """Desk-scale default: 3 levels from 8 channels, attention at the deepest
    level, 64-channel time embedding."""
    return DenoiserConfig(**overrides)


def paper_reference_config() -> DenoiserConfig:
    """Full-size configuration: channels doubling 32 -> 512 over four
    downsamplings, attention at the deepest two levels, 1024-channel time
    embedding.  Constructible, not exercised by the test suite."""
    return DenoiserConfig(
        levels=5,
        base_channels=32,
        attention_levels=(3, 4),
        time_embed_dim=1024,
    )


def sinusoidal_time_embedding(t, dim: int):
    """Sinusoidal features of scaled time tau = 1000*t.

    Component 2i is sin(tau / 10000^(2i/dim)), component 2i+1 the matching
    cosine.  Accepts a scalar or a 1D tensor; returns shape (..., dim).
    """
    if dim % 2 or dim < 2:
        raise ConfigError(f"embedding dim must be even and >= 2, got {dim}")
    t = torch.as_tensor(t)
    scalar = t.ndim == 0
    t = torch.atleast_1d(t).to(torch.get_default_dtype() if not t.is_floating_point() else t.dtype)
    tau = 1000.0 * t
    half = dim // 2
    exponent = torch.arange(half, dtype=t.dtype, device=t.device) * (2.0 / dim)
    freqs = torch.pow(torch.tensor(10000.0, dtype=t.dtype, device=t.device), -exponent)
    angles = tau[:, None] * freqs[None, :]
    emb = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).reshape(-1, dim)
    return emb[0] if scalar else emb


def _norm_groups(channels: int) -> int:
    for g in range(min(_MAX_NORM_GROUPS, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def _make_norm(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm3d(channels)
    return nn.GroupNorm(_norm_groups(channels), channels)


class ResidualSubmodule(nn.Module):
    """norm -> SiLU -> (+ time bias) -> 3x3x3 conv, added to the shortcut.

    The convolution is zero-initialized, so at initialization the submodule
    reduces to its shortcut (identity, or a 1x1x1 projection when the channel
    count changes)."""

    def __init__(self, c_in: int, c_out: int, cfg: DenoiserConfig):
        super().__init__()
        self.norm = _make_norm(cfg.norm, c_in)
        self.act = nn.SiLU()
        self.conv = nn.Conv3d(c_in, c_out, 3, padding=1)
        self.conv.zero_init = True
        self.time_proj = (
            nn.Linear(cfg.time_embed_dim, c_in) if cfg.with_time_embedding else None
        )
        self.shortcut = nn.Identity() if c_in == c_out else nn.Conv3d(c_in, c_out, 1)

    def forward(self, x, emb=None):
        h = self.act(self.norm(x))
        if self.time_proj is not None and emb is not None:
            h = h + self.time_proj(emb)[:, :, None, None, None]
        return self.conv(h) + self.shortcut(x)


class AttentionBlock(nn.Module):
    """Scaled dot-product attention across all spatial positions, applied as
    a residual block: group norm, 1x1x1 q/k/v projections, softmax(q.k/sqrt(c)),
    zero-initialized 1x1x1 output projection."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_norm_groups(channels), channels)
        self.q = nn.Conv3d(channels, channels, 1)
        self.k = nn.Conv3d(channels, channels, 1)
        self.v = nn.Conv3d(channels, channels, 1)
        self.out = nn.Conv3d(channels, channels, 1)
        self.out.zero_init = True

    def forward(self, x):
        b, c, d, h, w = x.shape
        n = d * h * w
        hn = self.norm(x)
        q = self.q(hn).reshape(b, c, n)
        k = self.k(hn).reshape(b, c, n)
        v = self.v(hn).reshape(b, c, n)
        attn = torch.softmax(
            torch.einsum("bci,bcj->bij", q, k) / (c**0.5), dim=-1
        )
        agg = torch.einsum("bcj,bij->bci", v, attn).reshape(b, c, d, h, w)
        return x + self.out(agg)


class Denoiser(nn.Module):
    """The full restoration backbone; see the module docstring."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        c = config.channels
        self.conv_in = nn.Conv3d(1, c[0], 3, padding=1)
        if config.with_time_embedding:
            self.time_mlp = nn.Sequential(
                nn.Linear(config.time_embed_dim, config.time_embed_dim),
                nn.SiLU(),
                nn.Linear(config.time_embed_dim, config.time_embed_dim),
            )
        else:
            self.time_mlp = None
        self.enc_res = nn.ModuleList()
        self.enc_attn = nn.ModuleDict()
        self.down = nn.ModuleList()
        for i in range(config.levels):
            self.enc_res.append(
                nn.ModuleList(
                    [ResidualSubmodule(c[i], c[i], config) for _ in range(2)]
                )
            )
            if i in config.attention_levels:
                self.enc_attn[str(i)] = AttentionBlock(c[i])
            if i < config.levels - 1:
                self.down.append(nn.Conv3d(c[i], c[i + 1], 3, stride=2, padding=1))
        self.up = nn.ModuleList()
        self.dec_res = nn.ModuleList()
        self.dec_attn = nn.ModuleDict()
        for i in range(config.levels - 2, -1, -1):
            self.up.append(nn.ConvTranspose3d(c[i + 1], c[i], 4, stride=2, padding=1))
            self.dec_res.append(ResidualSubmodule(2 * c[i], c[i], config))
            if i in config.attention_levels:
                self.dec_attn[str(i)] = AttentionBlock(c[i])
        self.conv_out = nn.Conv3d(c[0], 1, 3, padding=1)
        self.conv_out.zero_init = True

    def _check_input(self, x):
        if x.ndim != 5 or x.shape[1] != 1:
            raise ConfigError(f"expected input (B, 1, X, Y, Z), got {tuple(x.shape)}")
        factor = 2 ** (self.config.levels - 1)
        for dim in x.shape[2:]:
            if dim % factor:
                raise ConfigError(
                    f"input dims {tuple(x.shape[2:])} must be divisible by {factor}"
                )
        deepest = min(d // factor for d in x.shape[2:])
        if self.config.attention_levels and deepest < 2:
            raise ConfigError(
                f"attention at level {max(self.config.attention_levels)} needs "
                f"spatial dims >= 2, got deepest extent {deepest}"
            )

    def forward(self, x, t):
        """Predict the clean volume from a degraded one at time t.

        ``x`` is (B, 1, X, Y, Z) in normalized units; ``t`` is a scalar or a
        (B,) tensor in [0, 1].  Ignores t entirely when the time embedding is
        disabled.
        """
        self._check_input(x)
        emb = None
        if self.time_mlp is not None:
            t = torch.as_tensor(t, dtype=x.dtype, device=x.device)
            if t.ndim == 0:
                t = t.repeat(x.shape[0])
            emb = self.time_mlp(sinusoidal_time_embedding(t, self.config.time_embed_dim))
        h = self.conv_in(x)
        skips = []
        for i in range(self.config.levels):
            for block in self.enc_res[i]:
                h = block(h, emb)
            if str(i) in self.enc_attn:
                h = self.enc_attn[str(i)](h)
            if i < self.config.levels - 1:
                skips.append(h)
                h = self.down[i](h)
        for j, i in enumerate(range(self.config.levels - 2, -1, -1)):
            h = self.up[j](h)
            h = torch.cat([skips[i], h], dim=1)
            h = self.dec_res[j](h, emb)
            if str(i) in self.dec_attn:
                h = self.dec_attn[str(i)](h)
        return x + self.conv_out(h)


def init_parameters(model: Denoiser, seed: int) -> Denoiser:
    """Deterministic initialization: fan-in-scaled uniform conv/linear
    weights, zero biases, unit norm scales, and zeros for every module tagged
    ``zero_init`` (residual tails, attention outputs, the output head)."""
    gen = torch.Generator().manual_seed(int(seed))
    for module in model.modules():
        if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d, nn.Linear)):
            if getattr(module, "zero_init", False):
                nn.init.zeros_(module.weight)
            else:
                if isinstance(module, nn.ConvTranspose3d):
                    fan_in = module.weight.shape[0] * int(
                        np.prod(module.kernel_size)
                    )
                elif isinstance(module, nn.Conv3d):
                    fan_in = module.weight.shape[1] * int(
                        np.prod(module.kernel_size)
                    )
                else:
                    fan_in = module.weight.shape[1]
                bound = 1.0 / fan_in**0.5
                with torch.no_grad():
                    module.weight.uniform_(-bound, bound, generator=gen)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, (nn.BatchNorm3d, nn.GroupNorm)):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)
    return model


def build_denoiser(config: DenoiserConfig, seed: int = 0) -> Denoiser:
    model = Denoiser(config)
    init_parameters(model, seed)
    model.eval()
    return model


def count_parameters(config: DenoiserConfig) -> int:
    """Closed-form parameter count for a configuration."""
    c = config.channels
    td = config.time_embed_dim
    with_t = config.with_time_embedding

    def norm_params(ch):
        return 2 * ch

    def res_params(c_in, c_out):
        n = norm_params(c_in)
        n += c_in * c_out * 27 + c_out  # conv + bias
        if with_t:
            n += td * c_in + c_in  # time projection
        if c_in != c_out:
            n += c_in * c_out + c_out  # 1x1x1 shortcut
        return n

    def attn_params(ch):
        return norm_params(ch) + 4 * (ch * ch + ch)

    total = 1 * c[0] * 27 + c[0]  # conv_in
    if with_t:
        total += 2 * (td * td + td)  # two-layer time MLP
    for i in range(config.levels):
        total += 2 * res_params(c[i], c[i])
        if i in config.attention_levels:
            total += attn_params(c[i])
        if i < config.levels - 1:
            total += c[i] * c[i + 1] * 27 + c[i + 1]  # strided down conv
    for i in range(config.levels - 2, -1, -1):
        total += c[i + 1] * c[i] * 64 + c[i]  # transposed up conv
        total += res_params(2 * c[i], c[i])
        if i in config.attention_levels:
            total += attn_params(c[i])
    total += c[0] * 1 * 27 + 1  # conv_out
    return total


def mae_loss(model: Denoiser, x_t, t, x) -> torch.Tensor:
    """Mean absolute error between model(x_t, t) and the clean target."""
    pred = model(x_t, t)
    return (pred - x).abs().mean()


def loss_and_gradients(model: Denoiser, x_t, t, x):
    """(loss value, gradients keyed by parameter name) for one batch.

    Gradients are exact reverse-mode derivatives of the MAE loss; the
    subgradient of ``abs`` at zero is zero.  Raises DivergenceError when the
    forward pass produces non-finite values.
    """
    from .errors import DivergenceError

    loss = mae_loss(model, x_t, t, x)
    if not torch.isfinite(loss):
        raise DivergenceError("non-finite loss in forward pass")
    names, params = zip(*[(n, p) for n, p in model.named_parameters()])
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grad_map = {
        n: (g if g is not None else torch.zeros_like(p))
        for n, p, g in zip(names, params, grads)
    }
    return float(loss.detach()), grad_map


def predict_volume(model: Denoiser, values: np.ndarray, t: float) -> np.ndarray:
    """Single-volume inference: (X, Y, Z) normalized array in, same out.
    Runs in eval mode (batch norm uses running statistics)."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(values, dtype=np.float32))
        out = model(x[None, None], float(t))[0, 0].numpy()
    if was_training:
        model.train()
    return out


def save_checkpoint(
    model: Denoiser,
    path: str,
    seed: int,
    step: int,
    extra: dict | None = None,
) -> None:
    """JSON header (config, seed, step, tensor layout) + raw f32le payload of
    every float state tensor in state-dict order; integer state (batch-norm
    batch counters) lives in the header."""
    base = path[:-5] if path.endswith((".json", ".raw")) else path
    state = model.state_dict()
    tensors, ints = [], {}
    for name, tensor in state.items():
        if tensor.is_floating_point():
            tensors.append((name, tensor))
        else:
            ints[name] = int(tensor.item()) if tensor.ndim == 0 else tensor.tolist()
    header = {
        "kind": "denoiser-checkpoint",
        "config": model.config.to_dict(),
        "seed": int(seed),
        "step": int(step),
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
        "int_state": ints,
        "extra": extra or {},
    }
    with open(base + ".json", "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(base + ".raw", "wb") as fh:
        for _, tensor in tensors:
            fh.write(
                np.ascontiguousarray(
                    tensor.detach().to(torch.float32).numpy(), dtype="<f4"
                ).tobytes()
            )


def load_checkpoint(path: str):
    """Rebuild (model, header) from a checkpoint; exact state restore."""
    from .errors import HeaderError, PayloadMismatchError

    base = path[:-5] if path.endswith((".json", ".raw")) else path
    if not os.path.exists(base + ".json"):
        raise FileNotFoundError(base + ".json")
    with open(base + ".json", "r", encoding="utf-8") as fh:
        header = json.load(fh)
    if header.get("kind") != "denoiser-checkpoint":
        raise HeaderError(f"{base}.json: not a denoiser checkpoint")
    config = DenoiserConfig.from_dict(header["config"])
    model = Denoiser(config)
    blob = open(base + ".raw", "rb").read()
    expected = sum(
        4 * int(np.prod(entry["shape"] or [1])) for entry in header["tensors"]
    )
    if len(blob) != expected:
        raise PayloadMismatchError(
            f"{base}.raw: payload is {len(blob)} bytes, header implies {expected}"
        )
    state = model.state_dict()
    offset = 0
    new_state = {}
    for entry in header["tensors"]:
        shape = entry["shape"]
        numel = int(np.prod(shape or [1]))
        arr = np.frombuffer(blob, dtype="<f4", count=numel, offset=offset).reshape(shape)
        offset += numel * 4
        target_dtype = state[entry["name"]].dtype
        new_state[entry["name"]] = torch.from_numpy(arr.copy()).to(target_dtype)
    for name, value in header["int_state"].items():
        new_state[name] = torch.as_tensor(value, dtype=state[name].dtype)
    model.load_state_dict(new_state)
    model.eval()
    return model, header
