"""Task-specific feature-map adapters.

Each instrumented layer owns three small grouped convolutions:
  - a groupwise 3x3 branch (group size k, shape-preserving),
  - an optional groupwise 1x1 branch (group size z) behind a binary gate,
  - a residual bias: a grouped 3x3 conv over the feature map from two
    layers back, shape-bridged by nearest resampling and channel
    repeat/truncate when dimensions differ.

The adapter output replaces the layer's feature map, so the base network
needs no architectural change.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractViolationError
from .tensor import Tensor


@dataclass
class AdapterConfig:
    k: int = 4
    z: int = 4
    beta: int = 1
    mode: str = "parallel"
    residual_bias: bool = True
    init: str = "near_identity"  # or "zero"
    per_layer: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        if self.beta not in (0, 1):
            raise ConfigurationError(f"beta must be 0 or 1, got {self.beta}")
        if self.mode not in ("parallel", "sequential"):
            raise ConfigurationError(f"unknown combination mode '{self.mode}'")
        if self.init not in ("near_identity", "zero"):
            raise ConfigurationError(f"unknown init scheme '{self.init}'")

    def for_layer(self, name: str) -> "AdapterConfig":
        over = self.per_layer.get(name)
        if not over:
            return self
        return replace(self, **{k: v for k, v in over.items() if k != "per_layer"})


@dataclass
class AdapterParams:
    """Per-layer adapter weights; channel count c, residual source c_prev2."""

    c: int
    phi_g_w: Tensor  # [c, k, 3, 3]
    phi_g_b: Tensor  # [c]
    phi_p_w: Optional[Tensor]  # [c, z, 1, 1]
    phi_p_b: Optional[Tensor]
    phi_r_w: Optional[Tensor]  # [c, k, 3, 3] over the bridged l-2 map
    phi_r_b: Optional[Tensor]

    def tensors(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}phi_g_w": self.phi_g_w, f"{prefix}phi_g_b": self.phi_g_b}
        if self.phi_p_w is not None:
            out[f"{prefix}phi_p_w"] = self.phi_p_w
            out[f"{prefix}phi_p_b"] = self.phi_p_b
        if self.phi_r_w is not None:
            out[f"{prefix}phi_r_w"] = self.phi_r_w
            out[f"{prefix}phi_r_b"] = self.phi_r_b
        return out

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors().values())


def _check_group(c: int, size: int, what: str):
    if size < 1 or c % size:
        raise ConfigurationError(f"{what} group size {size} must divide channel count {c}")


def gco3x3_apply(x: Tensor, weight: Tensor, bias: Optional[Tensor], k: int) -> Tensor:
    """Groupwise 3x3 conv, padding 1, stride 1: shape-preserving."""
    c = x.data.shape[1]
    _check_group(c, k, "3x3")
    if weight.data.shape != (c, k, 3, 3):
        raise ContractViolationError(f"gco3x3: weight shape {weight.data.shape} != {(c, k, 3, 3)}")
    return T.conv2d(x, weight, bias, stride=1, padding=1, groups=c // k)


def gco1x1_apply(x: Tensor, weight: Tensor, bias: Optional[Tensor], z: int) -> Tensor:
    """Groupwise pointwise conv: shape-preserving, 1x1 receptive field."""
    c = x.data.shape[1]
    _check_group(c, z, "1x1")
    if weight.data.shape != (c, z, 1, 1):
        raise ContractViolationError(f"gco1x1: weight shape {weight.data.shape} != {(c, z, 1, 1)}")
    return T.conv2d(x, weight, bias, stride=1, padding=0, groups=c // z)


def combine_parallel(m_g: Tensor, m_p: Optional[Tensor], beta: int) -> Tensor:
    if beta not in (0, 1):
        raise ConfigurationError(f"beta must be 0 or 1, got {beta}")
    if beta == 0:
        return m_g
    if m_p is None:
        raise ContractViolationError("beta=1 requires the 1x1 branch output")
    if m_g.data.shape != m_p.data.shape:
        raise ContractViolationError("combine_parallel: shape mismatch")
    return T.add(m_g, m_p)


def combine_sequential(x: Tensor, params: AdapterParams, k: int, z: int) -> Tensor:
    if params.phi_p_w is None:
        raise ContractViolationError("sequential mode requires the 1x1 branch parameters")
    return gco1x1_apply(gco3x3_apply(x, params.phi_g_w, params.phi_g_b, k), params.phi_p_w, params.phi_p_b, z)


def bridge_prev2(x_prev2: Tensor, target_shape: tuple[int, ...]) -> Tensor:
    """Nearest-resample + channel repeat/truncate so the l-2 map matches
    the target [B,c,H,W]."""
    _, c, h, w = target_shape
    _, c_src, h_src, w_src = x_prev2.data.shape
    out = x_prev2
    while h_src < h and w_src < w:
        out = T.upsample_nearest2x(out)
        h_src, w_src = h_src * 2, w_src * 2
    while h_src > h and w_src > w:
        out = T.avg_pool2x(out)
        h_src, w_src = h_src // 2, w_src // 2
    if (h_src, w_src) != (h, w):
        raise ConfigurationError(
            f"residual bias: cannot bridge spatial {x_prev2.data.shape[2:]} to {(h, w)}"
        )
    if c_src != c:
        idx = np.arange(c) % c_src
        out = T.gather_channels(out, idx)
    return out


def residual_bias_apply(
    x_prev2: Tensor,
    weight: Tensor,
    bias: Optional[Tensor],
    target_shape: tuple[int, ...],
    k: int,
) -> Tensor:
    bridged = bridge_prev2(x_prev2, target_shape)
    return gco3x3_apply(bridged, weight, bias, k)


def adapter_forward(
    x_l: Tensor,
    x_prev2: Optional[Tensor],
    params: AdapterParams,
    cfg: AdapterConfig,
) -> Tensor:
    """Full adapter pass: combined grouped branches plus residual bias."""
    if cfg.mode == "sequential":
        m_l = combine_sequential(x_l, params, cfg.k, cfg.z)
    else:
        m_g = gco3x3_apply(x_l, params.phi_g_w, params.phi_g_b, cfg.k)
        m_p = None
        if cfg.beta == 1:
            m_p = gco1x1_apply(x_l, params.phi_p_w, params.phi_p_b, cfg.z)
        m_l = combine_parallel(m_g, m_p, cfg.beta)
    if cfg.residual_bias and params.phi_r_w is not None and x_prev2 is not None:
        m_r = residual_bias_apply(x_prev2, params.phi_r_w, params.phi_r_b, x_l.data.shape, cfg.k)
        return T.add(m_l, m_r)
    return m_l


def _group_identity(c: int, size: int, kh: int, scale: float, dtype) -> np.ndarray:
    """Within-group identity kernel: output channel i taps input slot i%size
    at the spatial center with weight `scale`."""
    w = np.zeros((c, size, kh, kh), dtype=dtype)
    ctr = kh // 2
    for i in range(c):
        w[i, i % size, ctr, ctr] = scale
    return w


def adapter_init(
    c: int,
    cfg: AdapterConfig,
    seed: int,
    c_prev2: Optional[int] = None,
    dtype=np.float32,
) -> AdapterParams:
    """Deterministic init.  Default near-identity: the adapter starts as an
    approximate identity map so each task begins from the frozen base
    function.  With the gate on, the two branches split the identity so the
    parallel sum stays near the identity."""
    _check_group(c, cfg.k, "3x3")
    use_p = cfg.beta == 1 or cfg.mode == "sequential"
    if use_p:
        _check_group(c, cfg.z, "1x1")
    rng = np.random.default_rng(seed)

    if cfg.init == "zero":
        g_w = np.zeros((c, cfg.k, 3, 3), dtype=dtype)
        p_w = np.zeros((c, cfg.z, 1, 1), dtype=dtype) if use_p else None
    else:
        noise = lambda shape: rng.normal(0.0, 0.02, size=shape).astype(dtype)
        if cfg.mode == "sequential":
            g_scale, p_scale = 1.0, 1.0
        else:
            g_scale = 0.5 if cfg.beta == 1 else 1.0
            p_scale = 0.5
        g_w = _group_identity(c, cfg.k, 3, g_scale, dtype) + noise((c, cfg.k, 3, 3))
        p_w = None
        if use_p:
            p_w = _group_identity(c, cfg.z, 1, p_scale, dtype) + noise((c, cfg.z, 1, 1))

    make = lambda a: Tensor(a, requires_grad=True)
    zeros_c = lambda: make(np.zeros(c, dtype=dtype))
    r_w = r_b = None
    if cfg.residual_bias and c_prev2 is not None:
        r_w = make(np.zeros((c, cfg.k, 3, 3), dtype=dtype))
        r_b = zeros_c()
    return AdapterParams(
        c=c,
        phi_g_w=make(g_w),
        phi_g_b=zeros_c(),
        phi_p_w=make(p_w) if p_w is not None else None,
        phi_p_b=zeros_c() if p_w is not None else None,
        phi_r_w=r_w,
        phi_r_b=r_b,
    )
