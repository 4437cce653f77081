"""Shared network building blocks: runtime weight-scaled linear/conv layers,
style-modulated convolution with weight demodulation, and residual blocks."""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

LRELU_GAIN = math.sqrt(2.0)


def lrelu(x):
    return F.leaky_relu(x, 0.2) * LRELU_GAIN


class EqualizedLinear(nn.Module):
    """Fully connected layer with runtime weight scaling and optional
    learning-rate multiplier (applied to both weight and bias)."""

    def __init__(self, in_features, out_features, lr_mul=1.0, bias_init=0.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_features,), float(bias_init) / lr_mul))
        self.weight_gain = lr_mul / math.sqrt(in_features)
        self.bias_gain = lr_mul

    def forward(self, x):
        return F.linear(x, self.weight * self.weight_gain, self.bias * self.bias_gain)


class EqualizedConv2d(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.weight_gain = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return F.conv2d(x, self.weight * self.weight_gain, self.bias,
                        stride=self.stride, padding=self.padding)


class ModulatedConv2d(nn.Module):
    """Convolution whose weights are scaled per-sample by an affine projection
    of the style vector, then demodulated to unit output variance."""

    def __init__(self, in_ch, out_ch, kernel, w_dim, demodulate=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.affine = EqualizedLinear(w_dim, in_ch, bias_init=1.0)
        self.weight_gain = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.demodulate = demodulate
        self.padding = kernel // 2

    def forward(self, x, w):
        n, in_ch, h, width = x.shape
        out_ch, _, kh, kw = self.weight.shape
        styles = self.affine(w)  # (n, in_ch)
        weight = self.weight.unsqueeze(0) * self.weight_gain * styles[:, None, :, None, None]
        if self.demodulate:
            denom = torch.rsqrt(weight.square().sum(dim=(2, 3, 4)) + 1e-8)
            weight = weight * denom[:, :, None, None, None]
        out = F.conv2d(x.reshape(1, n * in_ch, h, width),
                       weight.reshape(n * out_ch, in_ch, kh, kw),
                       padding=self.padding, groups=n)
        return out.reshape(n, out_ch, h, width) + self.bias[None, :, None, None]


class ResBlock(nn.Module):
    """Two 3x3 convolutions with a (projected) skip, optional 2x downsampling,
    output scaled by 1/sqrt(2) to keep variance stable."""

    def __init__(self, in_ch, out_ch, down=False):
        super().__init__()
        self.conv1 = EqualizedConv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = EqualizedConv2d(out_ch, out_ch, 3, padding=1)
        self.down = down
        self.skip = EqualizedConv2d(in_ch, out_ch, 1) if (in_ch != out_ch) else None

    def forward(self, x):
        y = lrelu(self.conv1(x))
        if self.down:
            y = F.avg_pool2d(y, 2)
            x = F.avg_pool2d(x, 2)
        y = lrelu(self.conv2(y))
        if self.skip is not None:
            x = self.skip(x)
        return (x + y) / math.sqrt(2.0)
