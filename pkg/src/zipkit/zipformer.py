"""Zipformer encoder: Conv-Embed, downsampled stacks, and blocks that
compute attention weights once and share them.

Block layout (one MHAW feeding one NLA and two SA modules, residual adds,
two bypasses, one final BiasNorm):

    w = MHAW(x)
    x += FF1(x); x += NLA(x, w); x += SA1(x, w); x += Conv1(x); x += FF2(x)
    x = BypassMid(x_in, x)
    x += SA2(x, w); x += Conv2(x); x += FF3(x)
    x = BiasNorm(x)
    x = BypassEnd(x_in, x)

Feed-forward modules use SwooshL, convolution modules SwooshR. Stacks
downsample by learnable softmax-weighted frame averaging and upsample by
frame repetition; stack outputs are combined per channel from the most
recent stack that provides that channel, then downsampled once more.

Positional information enters as a learnable relative-position bias on
the attention logits (clamped offsets); this is an artifact choice, not
part of the mechanism set under test, and can be switched off.
"""

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import nn, tensor as tz
from .tensor import ConfigError, ShapeError, Tensor

BYPASS_SCHEDULE_STEP = 20000
BYPASS_MIN_EARLY = 0.9
BYPASS_MIN_LATE = 0.2


def bypass_min_at(step):
    """Lower clamp bound for bypass weights at a training step."""
    return BYPASS_MIN_EARLY if step < BYPASS_SCHEDULE_STEP else BYPASS_MIN_LATE


# -- configuration ---------------------------------------------------------

@dataclass
class EncoderConfig:
    num_layers: tuple = (2, 2, 3, 4, 3, 2)
    embed_dims: tuple = (192, 256, 384, 512, 384, 256)
    ff_mid_dims: tuple = (512, 768, 1024, 1536, 1024, 768)
    num_heads: tuple = (4, 4, 4, 8, 4, 4)
    conv_kernels: tuple = (31, 31, 15, 15, 15, 31)
    downsample_factors: tuple = (1, 2, 4, 8, 4, 2)
    query_dim_per_head: int = 32
    value_dim_per_head: int = 12
    input_feature_dim: int = 80
    output_downsample_factor: int = 2
    pos_bias_range: int = 64
    use_pos_bias: bool = True
    per_module_norm: bool = False
    conv_embed_channels: tuple = (8, 32, 128)
    convnext_hidden: int = 384
    preset: str = ""

    def __post_init__(self):
        n = len(self.num_layers)
        for name in ("embed_dims", "ff_mid_dims", "num_heads",
                     "conv_kernels", "downsample_factors"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"{name} must list one entry per stack ({n})")
        for f in self.downsample_factors:
            if f < 1 or (f & (f - 1)) != 0:
                raise ConfigError(f"downsample factors must be powers of two, got {f}")
        for k in self.conv_kernels:
            if k % 2 == 0:
                raise ConfigError(f"conv kernel sizes must be odd, got {k}")
        if self.input_feature_dim < 8:
            raise ConfigError("input_feature_dim must be >= 8 to survive "
                              "three frequency halvings")
        if len(self.conv_embed_channels) != 3:
            raise ConfigError("conv_embed_channels must have three entries")

    @property
    def num_stacks(self):
        return len(self.num_layers)

    @property
    def output_dim(self):
        return max(self.embed_dims)

    def to_json(self, seed=None):
        doc = dataclasses.asdict(self)
        if seed is not None:
            doc["seed"] = seed
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        doc.pop("seed", None)
        for key, val in doc.items():
            if isinstance(val, list):
                doc[key] = tuple(val)
        return cls(**doc)


def s_config(**overrides):
    cfg = dict(num_layers=(2, 2, 2, 2, 2, 2),
               embed_dims=(192, 256, 256, 256, 256, 256),
               ff_mid_dims=(512, 768, 768, 768, 768, 768),
               preset="s")
    cfg.update(overrides)
    return EncoderConfig(**cfg)


def m_config(**overrides):
    cfg = dict(preset="m")
    cfg.update(overrides)
    return EncoderConfig(**cfg)


def l_config(**overrides):
    cfg = dict(num_layers=(2, 2, 4, 5, 4, 2),
               embed_dims=(192, 256, 512, 768, 512, 256),
               ff_mid_dims=(512, 768, 1536, 2048, 1536, 768),
               preset="l")
    cfg.update(overrides)
    return EncoderConfig(**cfg)


def tiny_config(**overrides):
    """Three-stack desk-scale preset used by tests and certification."""
    cfg = dict(num_layers=(1, 1, 1),
               embed_dims=(16, 24, 32),
               ff_mid_dims=(32, 48, 64),
               num_heads=(2, 2, 2),
               conv_kernels=(5, 5, 5),
               downsample_factors=(1, 2, 4),
               query_dim_per_head=8,
               value_dim_per_head=6,
               input_feature_dim=8,
               pos_bias_range=16,
               conv_embed_channels=(1, 4, 16),
               convnext_hidden=48,
               preset="tiny")
    cfg.update(overrides)
    return EncoderConfig(**cfg)


PRESETS = {"s": s_config, "m": m_config, "l": l_config, "tiny": tiny_config}


def preset_config(name, **overrides):
    try:
        build = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return build(**overrides)


# -- module plumbing -------------------------------------------------------

class Module:
    """Lightweight parameter container; walks Tensors, sub-Modules,
    lists/tuples of them, and dataclass param structs."""

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}.{name}" if prefix else name
            yield from _walk(full, val)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _walk(name, val):
    if isinstance(val, Tensor):
        if val.requires_grad:
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name)
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(f"{name}.{i}", item)
    elif dataclasses.is_dataclass(val) and not isinstance(val, type):
        for f in dataclasses.fields(val):
            yield from _walk(f"{name}.{f.name}", getattr(val, f.name))


class Linear(Module):
    """y = x @ W (+ b); W ~ N(0, 1/fan_in), b = 0."""

    def __init__(self, n_in, n_out, rng, bias=True):
        self.weight = Tensor(rng.normal(0.0, n_in ** -0.5, (n_in, n_out)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def forward(self, x):
        out = tz.matmul(x, self.weight)
        if self.bias is not None:
            out = tz.add(out, self.bias)
        return out


# -- block modules ---------------------------------------------------------

class MHAW(Module):
    """Multi-head attention weights only: query/key projections, scaled
    dot products, optional relative-position bias, softmax over keys."""

    def __init__(self, dim, num_heads, query_dim, pos_range, rng,
                 use_pos_bias=True):
        self.num_heads = num_heads
        self.query_dim = query_dim
        self.pos_range = pos_range
        self.use_pos_bias = use_pos_bias
        self.q_proj = Linear(dim, num_heads * query_dim, rng)
        self.k_proj = Linear(dim, num_heads * query_dim, rng)
        self.pos_bias = Tensor(np.zeros((num_heads, 2 * pos_range + 1)),
                               requires_grad=True) if use_pos_bias else None

    def forward(self, x):
        T = x.data.shape[0]
        H, dq = self.num_heads, self.query_dim
        q = tz.transpose(tz.reshape(self.q_proj.forward(x), (T, H, dq)), (1, 0, 2))
        k = tz.transpose(tz.reshape(self.k_proj.forward(x), (T, H, dq)), (1, 0, 2))
        logits = tz.mul(tz.matmul(q, tz.transpose(k, (0, 2, 1))), dq ** -0.5)
        if self.use_pos_bias:
            offs = np.arange(T)[:, None] - np.arange(T)[None, :]
            idx = np.clip(offs, -self.pos_range, self.pos_range) + self.pos_range
            bias = tz.reshape(tz.take(self.pos_bias, idx.ravel(), axis=1),
                              (H, T, T))
            logits = tz.add(logits, bias)
        return tz.softmax_lastdim(logits)


class SelfAttention(Module):
    """Aggregates value projections with precomputed attention weights."""

    def __init__(self, dim, num_heads, value_dim, rng):
        self.num_heads = num_heads
        self.value_dim = value_dim
        self.v_proj = Linear(dim, num_heads * value_dim, rng)
        self.out_proj = Linear(num_heads * value_dim, dim, rng)

    def forward(self, x, weights):
        T = x.data.shape[0]
        H, dv = self.num_heads, self.value_dim
        self._last_weights = weights
        v = tz.transpose(tz.reshape(self.v_proj.forward(x), (T, H, dv)), (1, 0, 2))
        mixed = tz.matmul(weights, v)
        merged = tz.reshape(tz.transpose(mixed, (1, 0, 2)), (T, H * dv))
        return self.out_proj.forward(merged)


class NonlinearAttention(Module):
    """linear(A * attention(tanh(B) * C)) on one attention head.

    A, B, C are bias-free projections to 3/4 of the input dim; head 0 of
    the shared weights does the aggregation.
    """

    def __init__(self, dim, rng):
        inner = (3 * dim) // 4
        self.a_proj = Linear(dim, inner, rng, bias=False)
        self.b_proj = Linear(dim, inner, rng, bias=False)
        self.c_proj = Linear(dim, inner, rng, bias=False)
        self.out_proj = Linear(inner, dim, rng, bias=False)

    def forward(self, x, weights):
        self._last_weights = weights
        a = self.a_proj.forward(x)
        gated = tz.mul(tz.tanh(self.b_proj.forward(x)), self.c_proj.forward(x))
        mixed = tz.matmul(weights[0], gated)
        return self.out_proj.forward(tz.mul(a, mixed))


class FeedForward(Module):
    """linear -> SwooshL -> linear."""

    def __init__(self, dim, hidden, rng):
        self.in_proj = Linear(dim, hidden, rng)
        self.out_proj = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.out_proj.forward(nn.swooshl(self.in_proj.forward(x)))


class ConvModule(Module):
    """pointwise (2D, gated) -> depthwise conv -> SwooshR -> pointwise."""

    def __init__(self, dim, kernel_size, rng):
        if kernel_size % 2 == 0:
            raise ConfigError(f"conv module kernel must be odd, got {kernel_size}")
        self.dim = dim
        self.in_proj = Linear(dim, 2 * dim, rng)
        self.kernel = Tensor(rng.normal(0.0, kernel_size ** -0.5,
                                        (kernel_size, dim)), requires_grad=True)
        self.out_proj = Linear(dim, dim, rng)

    def forward(self, x):
        u = self.in_proj.forward(x)
        gated = tz.mul(u[:, :self.dim], tz.sigmoid(u[:, self.dim:]))
        c = tz.conv1d_depthwise(gated, self.kernel)
        return self.out_proj.forward(nn.swooshr(c))


class BiasNorm(Module):
    def __init__(self, dim):
        self.params = nn.BiasNormParams.create(dim)

    def forward(self, x):
        return nn.biasnorm(x, self.params)


class Bypass(Module):
    """(1 - c) * x + c * y with per-channel c, clamped to
    [bypass_min_at(step), 1]. c starts at 1 (straight-through)."""

    def __init__(self, dim):
        self.weight = Tensor(np.ones(dim), requires_grad=True)

    def forward(self, x, y, step):
        if x.data.shape != y.data.shape:
            raise ShapeError(f"bypass operands differ: {x.shape} vs {y.shape}")
        c = tz.clip(self.weight, bypass_min_at(step), 1.0)
        return tz.add(tz.mul(tz.sub(1.0, c), x), tz.mul(c, y))


class Downsample(Module):
    """Averages each group of n frames with softmax-normalized learnable
    weights; a short final group is padded by repeating the last frame."""

    def __init__(self, factor):
        if factor < 1:
            raise ConfigError("downsample factor must be >= 1")
        self.factor = factor
        self.weight = Tensor(np.zeros(factor), requires_grad=True)

    def forward(self, x):
        T, D = x.data.shape
        if T == 0:
            raise ShapeError("downsample needs at least one frame")
        n = self.factor
        if n == 1:
            return x
        pad = (-T) % n
        if pad:
            x = tz.concat([x, tz.take(x, [T - 1] * pad, axis=0)], axis=0)
        groups = tz.reshape(x, ((T + pad) // n, n, D))
        w = tz.reshape(tz.softmax_lastdim(self.weight), (1, n, 1))
        return tz.tsum(tz.mul(groups, w), axis=1)


def upsample(x, factor, target_len):
    """Repeats each frame `factor` times, truncated to target_len."""
    T = x.data.shape[0]
    if T != -(-target_len // factor):
        raise ShapeError(f"upsample: {T} frames cannot cover target "
                         f"{target_len} at factor {factor}")
    if factor == 1:
        return x
    idx = np.arange(target_len) // factor
    return tz.take(x, idx, axis=0)


class ZipformerBlock(Module):
    def __init__(self, dim, ff_mid_dim, num_heads, conv_kernel, query_dim,
                 value_dim, pos_range, rng, use_pos_bias=True,
                 per_module_norm=False):
        self.mhaw = MHAW(dim, num_heads, query_dim, pos_range, rng,
                         use_pos_bias)
        self.ff1 = FeedForward(dim, (3 * ff_mid_dim) // 4, rng)
        self.nla = NonlinearAttention(dim, rng)
        self.sa1 = SelfAttention(dim, num_heads, value_dim, rng)
        self.conv1 = ConvModule(dim, conv_kernel, rng)
        self.ff2 = FeedForward(dim, ff_mid_dim, rng)
        self.bypass_mid = Bypass(dim)
        self.sa2 = SelfAttention(dim, num_heads, value_dim, rng)
        self.conv2 = ConvModule(dim, conv_kernel, rng)
        self.ff3 = FeedForward(dim, (5 * ff_mid_dim) // 4, rng)
        self.norm = BiasNorm(dim)
        self.bypass_end = Bypass(dim)
        self.module_norms = ([BiasNorm(dim) for _ in range(8)]
                             if per_module_norm else None)

    def _normed(self, out, slot):
        if self.module_norms is None:
            return out
        return self.module_norms[slot].forward(out)

    def forward(self, x, step):
        x_in = x
        w = self.mhaw.forward(x)
        self._last_weights = w
        x = tz.add(x, self._normed(self.ff1.forward(x), 0))
        x = tz.add(x, self._normed(self.nla.forward(x, w), 1))
        x = tz.add(x, self._normed(self.sa1.forward(x, w), 2))
        x = tz.add(x, self._normed(self.conv1.forward(x), 3))
        x = tz.add(x, self._normed(self.ff2.forward(x), 4))
        x = self.bypass_mid.forward(x_in, x, step)
        x = tz.add(x, self._normed(self.sa2.forward(x, w), 5))
        x = tz.add(x, self._normed(self.conv2.forward(x), 6))
        x = tz.add(x, self._normed(self.ff3.forward(x), 7))
        x = self.norm.forward(x)
        return self.bypass_end.forward(x_in, x, step)


class EncoderStack(Module):
    """downsample -> blocks -> upsample -> bypass against the stack input."""

    def __init__(self, config, index, rng):
        c = config
        self.factor = c.downsample_factors[index]
        self.downsample = Downsample(self.factor)
        self.blocks = [
            ZipformerBlock(
                dim=c.embed_dims[index],
                ff_mid_dim=c.ff_mid_dims[index],
                num_heads=c.num_heads[index],
                conv_kernel=c.conv_kernels[index],
                query_dim=c.query_dim_per_head,
                value_dim=c.value_dim_per_head,
                pos_range=c.pos_bias_range,
                rng=rng,
                use_pos_bias=c.use_pos_bias,
                per_module_norm=c.per_module_norm,
            )
            for _ in range(c.num_layers[index])
        ]
        self.bypass = Bypass(c.embed_dims[index])

    def forward(self, x, step):
        x_in = x
        T = x.data.shape[0]
        if self.factor > 1:
            x = self.downsample.forward(x)
        for block in self.blocks:
            x = block.forward(x, step)
        if self.factor > 1:
            x = upsample(x, self.factor, T)
        return self.bypass.forward(x_in, x, step)


class ConvEmbed(Module):
    """Three strided 2-D convs (SwooshR) halving time once and frequency
    three times, a ConvNeXt layer with residual, then linear + BiasNorm."""

    STRIDES = ((1, 2), (2, 2), (1, 2))

    def __init__(self, config, rng):
        c1, c2, c3 = config.conv_embed_channels
        self.feature_dim = config.input_feature_dim
        self.conv_kernels = [
            Tensor(rng.normal(0.0, (3 * 3 * ci) ** -0.5, (3, 3, ci, co)),
                   requires_grad=True)
            for ci, co in ((1, c1), (c1, c2), (c2, c3))
        ]
        self.conv_biases = [Tensor(np.zeros(co), requires_grad=True)
                            for co in (c1, c2, c3)]
        self.next_kernel = Tensor(rng.normal(0.0, (7 * 7) ** -0.5, (7, 7, c3)),
                                  requires_grad=True)
        self.next_in = Linear(c3, config.convnext_hidden, rng)
        self.next_out = Linear(config.convnext_hidden, c3, rng)
        freq = self.feature_dim
        for _, sf in self.STRIDES:
            freq = -(-freq // sf)
        self.out_proj = Linear(freq * c3, config.embed_dims[0], rng)
        self.out_norm = BiasNorm(config.embed_dims[0])
        self._out_freq = freq
        self._c3 = c3

    def forward(self, features):
        if features.ndim != 2 or features.data.shape[1] != self.feature_dim:
            raise ShapeError(f"expected features [T, {self.feature_dim}], "
                             f"got {features.shape}")
        x = tz.reshape(features, (*features.data.shape, 1))
        for kern, bias, (st, sf) in zip(self.conv_kernels, self.conv_biases,
                                        self.STRIDES):
            x = nn.swooshr(tz.add(tz.conv2d_strided(x, kern, st, sf), bias))
        t_out = x.data.shape[0]
        y = tz.conv2d_depthwise(x, self.next_kernel)
        flat = tz.reshape(y, (-1, self._c3))
        flat = self.next_out.forward(nn.swooshl(self.next_in.forward(flat)))
        x = tz.add(x, tz.reshape(flat, x.data.shape))
        x = tz.reshape(x, (t_out, self._out_freq * self._c3))
        return self.out_norm.forward(self.out_proj.forward(x))


def _provider_ranges(dims):
    """Channel ranges of the final output and the stack providing each:
    channel d comes from the most recent stack whose dim exceeds d."""
    dmax = max(dims)
    provider = [max(i for i, dim in enumerate(dims) if dim > d)
                for d in range(dmax)]
    ranges = []
    start = 0
    for d in range(1, dmax + 1):
        if d == dmax or provider[d] != provider[start]:
            ranges.append((start, d, provider[start]))
            start = d
    return ranges


def _adjust_channels(x, target):
    cur = x.data.shape[1]
    if cur == target:
        return x
    if cur > target:
        return x[:, :target]
    pad = Tensor(np.zeros((x.data.shape[0], target - cur)))
    return tz.concat([x, pad], axis=1)


class ZipformerEncoder(Module):
    """The full encoder; forward maps [T, F] -> [ceil(ceil(T/2)/2), Dmax]."""

    def __init__(self, config, seed=0):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.conv_embed = ConvEmbed(config, rng)
        self.stacks = [EncoderStack(config, i, rng)
                       for i in range(config.num_stacks)]
        self.out_downsample = Downsample(config.output_downsample_factor)

    @property
    def output_dim(self):
        return self.config.output_dim

    def forward(self, features, step=0):
        if features.data.shape[0] < 4:
            raise ShapeError("encoder needs at least 4 input frames")
        x = self.conv_embed.forward(features)
        outputs = []
        for i, stack in enumerate(self.stacks):
            x = _adjust_channels(x, self.config.embed_dims[i])
            x = stack.forward(x, step)
            outputs.append(x)
        pieces = [outputs[src][:, lo:hi]
                  for lo, hi, src in _provider_ranges(self.config.embed_dims)]
        final = pieces[0] if len(pieces) == 1 else tz.concat(pieces, axis=1)
        return self.out_downsample.forward(final)

    def forward_batch(self, features, step=0):
        """Maps a leading batch axis: [B, T, F] -> [B, T_out, Dmax]."""
        outs = [self.forward(features[b], step)
                for b in range(features.data.shape[0])]
        return tz.concat([tz.reshape(o, (1, *o.data.shape)) for o in outs],
                         axis=0)
