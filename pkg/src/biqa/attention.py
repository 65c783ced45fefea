"""Spatial and channel attention blocks.

Both blocks compute a sigmoid gate from pooled statistics of the input and
multiply it back onto the input:

* spatial attention pools across the channel axis (mean and max), stacks the
  two maps, pushes them through a 3x3 convolution, and gates every pixel;
* channel attention pools across the spatial axes, concatenates the mean and
  max descriptors, squeezes them through a two-layer bottleneck (reduction
  factor 8 on the concatenated width), and gates every channel.

The blocks work on any (N,H,W,C) tensor; in the fusion model they are applied
to (N,1,1,C) descriptors after global average pooling.
"""

from dataclasses import dataclass

import numpy as np

from biqa import autodiff as ad
from biqa.errors import ShapeMismatch


@dataclass
class SpatialAttentionParams:
    kernel: ad.Tensor  # (3,3,2,1): two stacked pooled maps in, one gate map out
    bias: ad.Tensor    # (1,)


@dataclass
class ChannelAttentionParams:
    w1: ad.Tensor  # (2C, hidden)
    b1: ad.Tensor  # (hidden,)
    w2: ad.Tensor  # (hidden, C)
    b2: ad.Tensor  # (C,)


def hidden_width(channels):
    """Bottleneck width: the concatenated 2C descriptor reduced by factor 8."""
    return max(1, (2 * channels) // 8)


def glorot_uniform(rng, shape, dtype):
    fan_in = int(np.prod(shape[:-1]))
    fan_out = shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def he_uniform(rng, shape, dtype):
    fan_in = int(np.prod(shape[:-1]))
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_spatial_attention(store, prefix, rng, dtype=np.float32):
    """Create spatial-attention parameters in `store` under `prefix`."""
    kernel = store.add(f"{prefix}.kernel", glorot_uniform(rng, (3, 3, 2, 1), dtype))
    bias = store.add(f"{prefix}.bias", np.zeros(1, dtype=dtype))
    return SpatialAttentionParams(kernel, bias)


def init_channel_attention(store, prefix, channels, rng, dtype=np.float32):
    """Create channel-attention parameters for a C-channel input."""
    hidden = hidden_width(channels)
    w1 = store.add(f"{prefix}.w1", he_uniform(rng, (2 * channels, hidden), dtype))
    b1 = store.add(f"{prefix}.b1", np.zeros(hidden, dtype=dtype))
    w2 = store.add(f"{prefix}.w2", glorot_uniform(rng, (hidden, channels), dtype))
    b2 = store.add(f"{prefix}.b2", np.zeros(channels, dtype=dtype))
    return ChannelAttentionParams(w1, b1, w2, b2)


def spatial_attention(x, params):
    """Gate each pixel of x by a map learned from channel-pooled statistics."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"spatial attention expects rank-4 input, got {x.shape}")
    avg_map = ad.pool(x, "avg", "channel")          # (N,H,W,1)
    max_map = ad.pool(x, "max", "channel")          # (N,H,W,1)
    stacked = ad.concat_last_axis(avg_map, max_map)  # (N,H,W,2)
    gate = ad.sigmoid(ad.conv2d_3x3(stacked, params.kernel, params.bias))
    return ad.mul(x, gate)


def channel_attention(x, params):
    """Gate each channel of x by a weight learned from spatially pooled statistics."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"channel attention expects rank-4 input, got {x.shape}")
    n, _, _, c = x.shape
    if params.w2.shape[1] != c:
        raise ShapeMismatch(f"params built for {params.w2.shape[1]} channels, input has {c}")
    avg_desc = ad.pool(x, "avg", "spatial")              # (N,1,1,C)
    max_desc = ad.pool(x, "max", "spatial")              # (N,1,1,C)
    desc = ad.concat_last_axis(avg_desc, max_desc)       # (N,1,1,2C)
    h = ad.relu(ad.dense(ad.reshape(desc, (n, 2 * c)), params.w1, params.b1))
    gate = ad.reshape(ad.sigmoid(ad.dense(h, params.w2, params.b2)), (n, 1, 1, c))
    return ad.mul(x, gate)
