"""Network builders: TFNet, a toy MLP/convnet and a miniature residual net."""

from __future__ import annotations

import numpy as np

from ..tensor import ConfigError, Shape4
from .layers import (
    Acon,
    AconFReLU,
    Conv2d,
    Dense,
    DepthwiseConv,
    Flatten,
    GlobalAvgPool,
    PointwiseConv,
    ReLU,
    Residual,
    make_activation,
)
from .network import Network

# Output channels of Conv1 and Stages 2-5 per width multiplier.
TFNET_CHANNELS = {
    0.5: (8, 16, 32, 64, 128),
    1.0: (16, 32, 64, 128, 256),
    1.5: (24, 48, 96, 192, 384),
    2.0: (32, 64, 128, 256, 512),
}
# Stride-1 repeats following the single stride-2 block of each stage.
TFNET_REPEATS = (1, 3, 7, 2)
TFNET_HEAD = 1024


def tfnet_block(c_in: int, c_out: int, stride: int, rng, dtype) -> list:
    """One TFNet block.

    stride 1: pw -> ACON-FReLU_1 -> pw -> ACON-FReLU_2
    stride 2: ACON-FReLU_1 -> pw -> ACON-FReLU_2, the second one downsampling
              (maxpool branch against a stride-2 depthwise branch)
    """
    if stride == 1:
        return [
            PointwiseConv(c_in, c_out, rng=rng, dtype=dtype),
            AconFReLU(c_out, rng=rng, dtype=dtype),
            PointwiseConv(c_out, c_out, rng=rng, dtype=dtype),
            AconFReLU(c_out, rng=rng, dtype=dtype),
        ]
    if stride == 2:
        return [
            AconFReLU(c_in, rng=rng, dtype=dtype),
            PointwiseConv(c_in, c_out, rng=rng, dtype=dtype),
            AconFReLU(c_out, downsample=True, rng=rng, dtype=dtype),
        ]
    raise ConfigError(f"TFNet blocks use stride 1 or 2, got {stride}")


def build_tfnet(width_mult: float = 0.5, input_shape=(3, 224, 224), num_classes: int = 1000,
                rng=None, dtype=np.float32) -> Network:
    """Toy funnel network built from pointwise convs and ACON-FReLU blocks."""
    if width_mult not in TFNET_CHANNELS:
        raise ConfigError(f"TFNet width multiplier must be one of {sorted(TFNET_CHANNELS)}, got {width_mult}")
    if isinstance(input_shape, Shape4):
        input_shape = input_shape.as_tuple()[1:]
    c, h, w = input_shape
    if h % 32 or w % 32:
        raise ConfigError(f"TFNet input extents must be divisible by 32, got {h}x{w}")
    rng = rng or np.random.default_rng(0)
    chans = TFNET_CHANNELS[width_mult]
    layers = [Conv2d(c, chans[0], 3, stride=2, rng=rng, dtype=dtype), Acon("C", chans[0], dtype=dtype)]
    c_in = chans[0]
    for c_out, repeat in zip(chans[1:], TFNET_REPEATS):
        layers += tfnet_block(c_in, c_out, 2, rng, dtype)
        for _ in range(repeat):
            layers += tfnet_block(c_out, c_out, 1, rng, dtype)
        c_in = c_out
    layers += [
        PointwiseConv(c_in, TFNET_HEAD, rng=rng, dtype=dtype),
        Acon("C", TFNET_HEAD, dtype=dtype),
        GlobalAvgPool(),
        Flatten(),
        Dense(TFNET_HEAD, num_classes, bias=True, rng=rng, dtype=dtype),
    ]
    return Network(layers, (c, h, w), dtype)


def build_mlp(d_in: int, num_classes: int, hidden=(64, 64), activation: str = "acon-c",
              rng=None, dtype=np.float32, reduction_r: int = 16) -> Network:
    rng = rng or np.random.default_rng(0)
    layers, d = [], d_in
    for width in hidden:
        layers.append(Dense(d, width, rng=rng, dtype=dtype))
        layers.append(make_activation(activation, width, rng, dtype, reduction_r))
        d = width
    layers.append(Dense(d, num_classes, rng=rng, dtype=dtype))
    return Network(layers, (d_in,), dtype)


def build_convnet(input_shape, num_classes: int, width: int = 16, activation: str = "acon-c",
                  rng=None, dtype=np.float32, reduction_r: int = 16) -> Network:
    """conv3x3 -> act -> pw -> act -> GAP -> fc."""
    rng = rng or np.random.default_rng(0)
    c = input_shape[0]
    layers = [
        Conv2d(c, width, 3, stride=1, rng=rng, dtype=dtype),
        make_activation(activation, width, rng, dtype, reduction_r),
        PointwiseConv(width, width, bias=True, rng=rng, dtype=dtype),
        make_activation(activation, width, rng, dtype, reduction_r),
        GlobalAvgPool(),
        Flatten(),
        Dense(width, num_classes, rng=rng, dtype=dtype),
    ]
    return Network(layers, tuple(input_shape), dtype)


def build_mini_resnet(input_shape, num_classes: int, width: int = 16, blocks: int = 2,
                      activation: str = "meta-acon-channel", placement: str = "after-3x3",
                      rng=None, dtype=np.float32, reduction_r: int = 16) -> Network:
    """Small residual net: stem conv, ``blocks`` x (pw -> act -> dw3x3 -> act -> pw) + skip.

    ``placement="after-3x3"`` swaps only the activation that follows the 3x3
    convolution in each block and keeps ReLU elsewhere, which is how deep
    residual nets are converted to meta-ACON to limit overfitting.
    ``placement="all"`` swaps every activation.
    """
    if placement not in ("after-3x3", "all"):
        raise ConfigError(f"placement must be 'after-3x3' or 'all', got {placement!r}")
    rng = rng or np.random.default_rng(0)

    def other():
        return make_activation(activation, width, rng, dtype, reduction_r) if placement == "all" else ReLU()

    layers = [Conv2d(input_shape[0], width, 3, stride=1, rng=rng, dtype=dtype), other()]
    for _ in range(blocks):
        layers.append(Residual([
            PointwiseConv(width, width, bias=True, rng=rng, dtype=dtype),
            other(),
            DepthwiseConv(width, 3, rng=rng, dtype=dtype),
            make_activation(activation, width, rng, dtype, reduction_r),
            PointwiseConv(width, width, bias=True, rng=rng, dtype=dtype),
        ]))
        layers.append(other())
    layers += [GlobalAvgPool(), Flatten(), Dense(width, num_classes, rng=rng, dtype=dtype)]
    return Network(layers, tuple(input_shape), dtype)


ARCHS = ("mlp", "convnet", "resnet-mini", "tfnet")


def build_model(arch: str, input_shape, num_classes: int, activation: str = "acon-c", width: float = 64,
                rng=None, dtype=np.float32, reduction_r: int = 16) -> Network:
    rng = rng or np.random.default_rng(0)
    if arch == "mlp":
        if len(input_shape) != 1:
            input_shape = (int(np.prod(input_shape)),)
        w = int(width)
        return build_mlp(input_shape[0], num_classes, (w, w), activation, rng, dtype, reduction_r)
    if len(input_shape) != 3:
        raise ConfigError(f"{arch} needs (C, H, W) inputs, got {tuple(input_shape)}")
    if arch == "convnet":
        return build_convnet(input_shape, num_classes, int(width), activation, rng, dtype, reduction_r)
    if arch == "resnet-mini":
        return build_mini_resnet(input_shape, num_classes, int(width), 2, activation, "after-3x3", rng, dtype, reduction_r)
    if arch == "tfnet":
        return build_tfnet(float(width), input_shape, num_classes, rng, dtype)
    raise ConfigError(f"unknown architecture {arch!r}; choose from {ARCHS}")
