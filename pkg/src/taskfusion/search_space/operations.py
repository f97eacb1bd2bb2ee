"""Candidate operators for the fusion search space.

Every operator maps ``(N, C, H, W) -> (N, C, H, W)``; padding is chosen so
spatial size is preserved. Operators are described declaratively by
:class:`OperatorSpec` and instantiated with :func:`make_operator`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError

NEGATIVE_SLOPE = 0.2

ABBREVIATIONS = {
    "CA": "channel-attention",
    "SA": "spatial-attention",
    "DC": "dilated-conv",
    "RB": "residual-block",
    "DB": "dense-block",
    "SC": "separable-conv",
    "skip": "skip-connect",
    "zero": "zero",
}
KINDS = frozenset(ABBREVIATIONS.values())
# kinds that carry a kernel size
CONV_KINDS = frozenset(
    {"spatial-attention", "dilated-conv", "residual-block", "dense-block", "separable-conv"}
)
KERNELS = (3, 5)
DEFAULT_KERNEL = 3

_ID_PATTERN = re.compile(r"^(?:(?P<k>\d+)-)?(?P<abbr>[A-Za-z]+)$")


@dataclass(frozen=True)
class OperatorSpec:
    """Declarative description of one candidate operator.

    ``channels_in`` and ``channels_out`` are equal for every kind in this
    space; a value of 0 means "not yet bound" (see :meth:`bind`).
    """

    id: str
    kind: str
    kernel: Optional[int] = None
    channels_in: int = 0
    channels_out: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown operator kind {self.kind!r} (operator {self.id!r})")
        if self.kind in CONV_KINDS:
            if self.kernel not in KERNELS:
                raise ConfigError(
                    f"operator {self.id!r}: kernel must be one of {KERNELS}, got {self.kernel!r}"
                )
        elif self.kernel is not None:
            raise ConfigError(f"operator {self.id!r}: kind {self.kind!r} takes no kernel")
        if self.channels_in != self.channels_out:
            raise ConfigError(f"operator {self.id!r}: channels_in must equal channels_out")
        if self.channels_in < 0:
            raise ConfigError(f"operator {self.id!r}: negative channel count")

    def bind(self, channels: int) -> "OperatorSpec":
        return replace(self, channels_in=channels, channels_out=channels)

    @property
    def param_count(self) -> int:
        """Closed-form trainable element count (biases on every conv)."""
        c, k = self.channels_in, self.kernel
        if self.kind in ("skip-connect", "zero"):
            return 0
        if self.kind == "channel-attention":
            h = _bottleneck(c)
            return 2 * c * h + h + c
        if self.kind == "spatial-attention":
            return 2 * k * k + 1
        if self.kind == "dilated-conv":
            return c * c * k * k + c
        if self.kind == "residual-block":
            return 2 * (c * c * k * k + c)
        if self.kind == "dense-block":
            return 3 * c * c * k * k + 3 * c * c + 3 * c
        if self.kind == "separable-conv":
            return c * k * k + c * c + 2 * c
        raise AssertionError(self.kind)


def parse_operator(entry, channels: int = 0) -> OperatorSpec:
    """Build an :class:`OperatorSpec` from a config entry.

    Accepts a symbolic id such as ``"3-RB"``, ``"SA"``, ``"skip"`` or a mapping
    ``{"id": ..., "kind": ..., "kernel": ...}`` (the mapping form lets two
    functionally identical operators carry distinct ids).
    """
    if isinstance(entry, OperatorSpec):
        return entry.bind(channels) if channels else entry
    if isinstance(entry, dict):
        if "id" not in entry:
            raise ConfigError(f"operator entry without id: {entry!r}")
        op_id = str(entry["id"])
        if "kind" not in entry:
            return replace(parse_operator(op_id), id=op_id).bind(channels)
        kind = ABBREVIATIONS.get(entry["kind"], entry["kind"])
        kernel = entry.get("kernel")
        if kernel is None and kind in CONV_KINDS:
            kernel = DEFAULT_KERNEL
        return OperatorSpec(op_id, kind, kernel, channels, channels)
    op_id = str(entry)
    m = _ID_PATTERN.match(op_id)
    if m is None or m.group("abbr") not in ABBREVIATIONS:
        raise ConfigError(f"unknown operator id {op_id!r}")
    kind = ABBREVIATIONS[m.group("abbr")]
    kernel = int(m.group("k")) if m.group("k") else None
    if kernel is None and kind in CONV_KINDS:
        kernel = DEFAULT_KERNEL
    return OperatorSpec(op_id, kind, kernel, channels, channels)


def _bottleneck(channels: int) -> int:
    return max(channels // 4, 1)


def _act(x):
    return F.leaky_relu(x, NEGATIVE_SLOPE)


class Identity(nn.Module):
    def forward(self, x):
        return x


class Zero(nn.Module):
    def forward(self, x):
        return x * 0.0


class DilatedConv(nn.Module):
    def __init__(self, c, k):
        super().__init__()
        self.conv = nn.Conv2d(c, c, k, padding=k - 1, dilation=2)

    def forward(self, x):
        return _act(self.conv(x))


class ResidualBlock(nn.Module):
    def __init__(self, c, k):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, k, padding=k // 2)
        self.conv2 = nn.Conv2d(c, c, k, padding=k // 2)

    def forward(self, x):
        return x + self.conv2(_act(self.conv1(x)))


class DenseBlock(nn.Module):
    def __init__(self, c, k):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, k, padding=k // 2)
        self.conv2 = nn.Conv2d(2 * c, c, k, padding=k // 2)
        self.fuse = nn.Conv2d(3 * c, c, 1)

    def forward(self, x):
        y1 = _act(self.conv1(x))
        y2 = _act(self.conv2(torch.cat([x, y1], dim=1)))
        return self.fuse(torch.cat([x, y1, y2], dim=1))


class SeparableConv(nn.Module):
    def __init__(self, c, k):
        super().__init__()
        self.depthwise = nn.Conv2d(c, c, k, padding=k // 2, groups=c)
        self.pointwise = nn.Conv2d(c, c, 1)

    def forward(self, x):
        return _act(self.pointwise(self.depthwise(x)))


class ChannelAttention(nn.Module):
    """Global average pool -> bottleneck -> sigmoid gate over channels."""

    def __init__(self, c):
        super().__init__()
        h = _bottleneck(c)
        self.squeeze = nn.Conv2d(c, h, 1)
        self.excite = nn.Conv2d(h, c, 1)

    def forward(self, x):
        s = x.mean(dim=(2, 3), keepdim=True)
        return x * torch.sigmoid(self.excite(_act(self.squeeze(s))))


class SpatialAttention(nn.Module):
    """Channel mean/max -> k x k conv -> sigmoid gate over pixels."""

    def __init__(self, k):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, k, padding=k // 2)

    def attention_map(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))

    def forward(self, x):
        return x * self.attention_map(x)


def make_operator(spec: OperatorSpec, channels: Optional[int] = None) -> nn.Module:
    c = channels if channels is not None else spec.channels_in
    if spec.kind == "skip-connect":
        return Identity()
    if spec.kind == "zero":
        return Zero()
    if spec.kind == "channel-attention":
        return ChannelAttention(c)
    if spec.kind == "spatial-attention":
        return SpatialAttention(spec.kernel)
    if spec.kind == "dilated-conv":
        return DilatedConv(c, spec.kernel)
    if spec.kind == "residual-block":
        return ResidualBlock(c, spec.kernel)
    if spec.kind == "dense-block":
        return DenseBlock(c, spec.kernel)
    if spec.kind == "separable-conv":
        return SeparableConv(c, spec.kernel)
    raise ConfigError(f"unknown operator kind {spec.kind!r} (operator {spec.id!r})")
