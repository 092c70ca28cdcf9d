"""Structural reparameterisation of MobileOne-style blocks in plain numpy.

A training-time block sums several linear branches (k 3x3 depthwise convs,
one 1x1 conv, an optional BN-only shortcut), each followed by batch norm. All
of it folds into one convolution for inference. The activation that follows
the sum is not part of the fused unit.

Tensors are ``(batch, channels, height, width)`` float arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


def as_tensor4(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"expected a (batch, channels, height, width) tensor, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("tensor contains non-finite values")
    return x


@dataclass(frozen=True, eq=False)
class ConvParams:
    kernel: np.ndarray  # (out_ch, in_ch // groups, kh, kw)
    bias: np.ndarray  # (out_ch,)
    groups: int = 1

    def __post_init__(self) -> None:
        k = np.asarray(self.kernel)
        b = np.asarray(self.bias)
        if k.ndim != 4:
            raise ValueError("kernel must be 4D (out, in/groups, kh, kw)")
        if self.groups < 1 or k.shape[0] % self.groups:
            raise ValueError(f"out channels {k.shape[0]} not divisible by groups {self.groups}")
        if k.shape[2] != k.shape[3] or k.shape[2] not in (1, 3):
            raise ValueError(f"only 1x1 and 3x3 kernels are supported, got {k.shape[2]}x{k.shape[3]}")
        if b.shape != (k.shape[0],):
            raise ValueError("bias must have one entry per output channel")
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "bias", b)

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1] * self.groups

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[2]


@dataclass(frozen=True, eq=False)
class BnParams:
    mean: np.ndarray
    variance: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self) -> None:
        arrs = [np.asarray(a) for a in (self.mean, self.variance, self.gamma, self.beta)]
        if len({a.shape for a in arrs}) != 1 or arrs[0].ndim != 1:
            raise ValueError("BN statistics must be 1D arrays of equal length")
        if np.any(arrs[1] < 0):
            raise ValueError("BN variance must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("BN epsilon must be > 0")
        for name, a in zip(("mean", "variance", "gamma", "beta"), arrs):
            object.__setattr__(self, name, a)

    @property
    def channels(self) -> int:
        return len(self.mean)

    @property
    def scale(self) -> np.ndarray:
        return self.gamma / np.sqrt(self.variance + self.epsilon)


@dataclass(frozen=True, eq=False)
class Branch:
    conv: ConvParams
    bn: BnParams


@dataclass(frozen=True, eq=False)
class MobileOneBlockParams:
    branches_3x3: tuple  # of Branch
    branch_1x1: Branch | None
    skip_bn: BnParams | None = None
    stride: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "branches_3x3", tuple(self.branches_3x3))
        if len(self.branches_3x3) < 1:
            raise ValueError("need k >= 1 3x3 branches")
        convs = [b.conv for b in self.all_branches]
        chans = {(c.in_channels, c.out_channels) for c in convs}
        if len(chans) != 1:
            raise ValueError("all branches must share input/output channel counts")
        for b in self.all_branches:
            if b.bn.channels != b.conv.out_channels:
                raise ValueError("BN channel count must match its conv's output channels")
        if self.skip_bn is not None:
            cin, cout = chans.pop()
            if self.stride != 1 or cin != cout:
                raise ValueError("identity branch illegal: needs stride 1 and equal in/out channels")
            if self.skip_bn.channels != cout:
                raise ValueError("skip BN channel count mismatch")

    @property
    def k(self) -> int:
        return len(self.branches_3x3)

    @property
    def all_branches(self) -> list[Branch]:
        return list(self.branches_3x3) + ([self.branch_1x1] if self.branch_1x1 is not None else [])

    @property
    def channels(self) -> int:
        return self.branches_3x3[0].conv.out_channels

    @property
    def kernel_size(self) -> int:
        return max(b.conv.kernel_size for b in self.all_branches)


# ---------------------------------------------------------------------------
# reference ops
# ---------------------------------------------------------------------------


def conv2d(x, p: ConvParams, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Direct grouped cross-correlation, vectorised over kernel taps."""
    x = as_tensor4(x)
    n, c, h, w = x.shape
    if c != p.in_channels:
        raise ValueError(f"input has {c} channels, conv expects {p.in_channels}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    k = p.kernel_size
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError("input smaller than the kernel")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    g = p.groups
    cin_g = c // g
    cout_g = p.out_channels // g
    xg = xp.reshape(n, g, cin_g, xp.shape[2], xp.shape[3])
    wg = p.kernel.reshape(g, cout_g, cin_g, k, k)
    out = np.zeros((n, g, cout_g, oh, ow), dtype=np.result_type(x, p.kernel))
    for i in range(k):
        for j in range(k):
            patch = xg[:, :, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride]
            out += np.einsum("ngchw,goc->ngohw", patch, wg[:, :, :, i, j])
    return out.reshape(n, p.out_channels, oh, ow) + p.bias[None, :, None, None]


def bn_apply(x, bn: BnParams) -> np.ndarray:
    x = as_tensor4(x)
    if x.shape[1] != bn.channels:
        raise ValueError("channel mismatch between tensor and BN")
    s = bn.scale[None, :, None, None]
    return (x - bn.mean[None, :, None, None]) * s + bn.beta[None, :, None, None]


# ---------------------------------------------------------------------------
# folding
# ---------------------------------------------------------------------------


def fuse_bn(conv: ConvParams, bn: BnParams) -> ConvParams:
    if bn.channels != conv.out_channels:
        raise ValueError("BN channels must match conv output channels")
    s = bn.scale
    return ConvParams(conv.kernel * s[:, None, None, None], bn.beta + (conv.bias - bn.mean) * s, conv.groups)


def identity_conv(channels: int, kernel_size: int = 3, groups: int | None = None, dtype=np.float64) -> ConvParams:
    """Conv whose output equals its input (centre tap 1 on each channel's own input)."""
    groups = channels if groups is None else groups
    cin_g = channels // groups
    kern = np.zeros((channels, cin_g, kernel_size, kernel_size), dtype=dtype)
    mid = kernel_size // 2
    kern[np.arange(channels), np.arange(channels) % cin_g, mid, mid] = 1.0
    return ConvParams(kern, np.zeros(channels, dtype=dtype), groups)


def bn_to_conv(bn: BnParams, channels: int | None = None, kernel_size: int = 3, depthwise: bool = True, stride: int = 1) -> ConvParams:
    channels = bn.channels if channels is None else channels
    if stride != 1 or channels != bn.channels:
        raise ValueError("identity branch illegal: needs stride 1 and matching channels")
    groups = channels if depthwise else 1
    return fuse_bn(identity_conv(channels, kernel_size, groups, bn.mean.dtype), bn)


def pad_1x1_to_3x3(p: ConvParams) -> ConvParams:
    if p.kernel_size != 1:
        raise ValueError(f"expected a 1x1 kernel, got {p.kernel_size}x{p.kernel_size}")
    return ConvParams(np.pad(p.kernel, ((0, 0), (0, 0), (1, 1), (1, 1))), p.bias.copy(), p.groups)


def _to_groups(p: ConvParams, groups: int) -> ConvParams:
    """Re-express a grouped conv with fewer groups by zero-filling cross-group weights."""
    if p.groups == groups:
        return p
    if p.groups % groups:
        raise ValueError(f"cannot express groups={p.groups} as groups={groups}")
    cin, cout = p.in_channels, p.out_channels
    cin_new = cin // groups
    dense = np.zeros((cout, cin_new, p.kernel_size, p.kernel_size), dtype=p.kernel.dtype)
    cin_old = cin // p.groups
    cout_old = cout // p.groups
    for o in range(cout):
        first_in = (o // cout_old) * cin_old  # absolute index of this output's first input channel
        rel = first_in - (o // (cout // groups)) * cin_new
        dense[o, rel : rel + cin_old] = p.kernel[o]
    return ConvParams(dense, p.bias.copy(), groups)


def _add(a: ConvParams, b: ConvParams) -> ConvParams:
    return ConvParams(a.kernel + b.kernel, a.bias + b.bias, a.groups)


def reparameterize_block(block: MobileOneBlockParams) -> ConvParams:
    """Single conv equal to the sum of all BN-folded branches."""
    size = block.kernel_size
    fused = [fuse_bn(b.conv, b.bn) for b in block.all_branches]
    if block.skip_bn is not None:
        # the shortcut is expressed in the grouping of the main branches
        g = block.branches_3x3[0].conv.groups
        ident = identity_conv(block.channels, size, g, block.skip_bn.mean.dtype)
        fused.append(fuse_bn(ident, block.skip_bn))
    fused = [pad_1x1_to_3x3(f) if f.kernel_size < size else f for f in fused]
    groups = int(np.gcd.reduce([f.groups for f in fused]))
    total = _to_groups(fused[0], groups)
    for f in fused[1:]:
        total = _add(total, _to_groups(f, groups))
    return total


def forward_train(block: MobileOneBlockParams, x) -> np.ndarray:
    """Sum of branch outputs BN(conv(x)) plus BN(x) for the shortcut; no activation."""
    x = as_tensor4(x)
    size = block.kernel_size
    out = None
    for b in block.all_branches:
        pad = b.conv.kernel_size // 2 if size == 3 else 0
        y = bn_apply(conv2d(x, b.conv, block.stride, pad), b.bn)
        out = y if out is None else out + y
    if block.skip_bn is not None:
        out = out + bn_apply(x, block.skip_bn)
    return out


def forward_fused(fused: ConvParams, x, stride: int = 1) -> np.ndarray:
    return conv2d(x, fused, stride, fused.kernel_size // 2)


# ---------------------------------------------------------------------------
# random blocks and JSON
# ---------------------------------------------------------------------------


def random_bn(rng: np.random.Generator, channels: int, dtype=np.float64) -> BnParams:
    return BnParams(
        rng.normal(0, 1, channels).astype(dtype),
        rng.uniform(1e-3, 2.0, channels).astype(dtype),
        rng.normal(1, 0.5, channels).astype(dtype),
        rng.normal(0, 0.5, channels).astype(dtype),
        1e-5,
    )


def random_block(
    rng: np.random.Generator, k: int, channels: int, skip: bool = True, depthwise: bool = True, dtype=np.float64
) -> MobileOneBlockParams:
    """Random depthwise (or, with ``depthwise=False``, pointwise 1x1) training block."""
    g = channels if depthwise else 1
    cin_g = channels // g

    def conv(size):
        return ConvParams(
            rng.normal(0, 0.5, (channels, cin_g, size, size)).astype(dtype),
            rng.normal(0, 0.1, channels).astype(dtype),
            g,
        )

    main = 3 if depthwise else 1
    branches = tuple(Branch(conv(main), random_bn(rng, channels, dtype)) for _ in range(k))
    one = Branch(conv(1), random_bn(rng, channels, dtype)) if depthwise else None
    return MobileOneBlockParams(branches, one, random_bn(rng, channels, dtype) if skip else None)


def _arr(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": np.asarray(a, dtype=np.float64).ravel().tolist()}


def _unarr(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def _conv_dict(p: ConvParams) -> dict:
    return {"kernel": _arr(p.kernel), "bias": _arr(p.bias), "groups": p.groups}


def _bn_dict(b: BnParams) -> dict:
    return {k: _arr(getattr(b, k)) for k in ("mean", "variance", "gamma", "beta")} | {"epsilon": b.epsilon}


def _conv_from(d: dict) -> ConvParams:
    return ConvParams(_unarr(d["kernel"]), _unarr(d["bias"]), int(d["groups"]))


def _bn_from(d: dict) -> BnParams:
    return BnParams(*(_unarr(d[k]) for k in ("mean", "variance", "gamma", "beta")), float(d["epsilon"]))


def block_to_dict(block: MobileOneBlockParams) -> dict:
    return {
        "stride": block.stride,
        "branches_3x3": [{"conv": _conv_dict(b.conv), "bn": _bn_dict(b.bn)} for b in block.branches_3x3],
        "branch_1x1": None
        if block.branch_1x1 is None
        else {"conv": _conv_dict(block.branch_1x1.conv), "bn": _bn_dict(block.branch_1x1.bn)},
        "skip_bn": None if block.skip_bn is None else _bn_dict(block.skip_bn),
    }


def block_from_dict(d: dict) -> MobileOneBlockParams:
    return MobileOneBlockParams(
        tuple(Branch(_conv_from(b["conv"]), _bn_from(b["bn"])) for b in d["branches_3x3"]),
        None if d.get("branch_1x1") is None else Branch(_conv_from(d["branch_1x1"]["conv"]), _bn_from(d["branch_1x1"]["bn"])),
        None if d.get("skip_bn") is None else _bn_from(d["skip_bn"]),
        int(d.get("stride", 1)),
    )


def block_to_json(block: MobileOneBlockParams) -> str:
    return json.dumps(block_to_dict(block))


def block_from_json(text: str) -> MobileOneBlockParams:
    return block_from_dict(json.loads(text))
