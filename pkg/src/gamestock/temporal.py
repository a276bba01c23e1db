"""Wavelet-temporal stock encoder: level features, frequency attention, trend/fluctuation fusion.

The filter bank itself acts on data, not parameters, so the pooled sub-band
statistics can be computed once per window (:func:`gamestock.wavelet.pooled_features`)
and fed to :class:`WaveletEncoder` as tensors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .wavelet import WaveletCoeffs, pooled_features


@dataclass
class AttentionParams:
    """``e_k = w2 . tanh(W1 h_k + b1) + b2``."""

    w1: torch.Tensor  # (hidden, M)
    b1: torch.Tensor  # (hidden,)
    w2: torch.Tensor  # (1, hidden)
    b2: torch.Tensor  # (1,)


def level_feature(detail: torch.Tensor, linear: nn.Linear) -> torch.Tensor:
    """Max-pool each channel's detail band over time, concatenate, project.

    `detail` is ``(..., D, n_k)``; returns ``(..., M)``.
    """
    if detail.shape[-1] == 0:
        raise ValueError("empty detail sequence")
    return linear(detail.amax(dim=-1))


def attention_scores(h: torch.Tensor, params: AttentionParams) -> torch.Tensor:
    """Unnormalized scores ``e_k`` for ``h`` of shape ``(..., l, M)``; returns ``(..., l)``."""
    hidden = torch.tanh(h @ params.w1.T + params.b1)
    return (hidden @ params.w2.T + params.b2).squeeze(-1)


def temporal_attention(h: torch.Tensor, params: AttentionParams) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax-weighted sum over the level axis; returns ``(zeta, alpha)``."""
    if h.dim() < 2 or h.shape[-2] < 1:
        raise ValueError(f"expected (..., l, M) level features, got shape {tuple(h.shape)}")
    alpha = torch.softmax(attention_scores(h, params), dim=-1)
    return (alpha.unsqueeze(-1) * h).sum(dim=-2), alpha


def trend_fluct_fuse(approx_mean: torch.Tensor, zeta: torch.Tensor, trend: nn.Linear, gate: nn.Linear):
    """``z = h_trend + sigmoid(gate(h_trend)) * zeta`` with ``h_trend = trend(avgpool(cA))``.

    `approx_mean` is the time-averaged approximation band, ``(..., D)``.
    Returns ``(z, lambda_fluct)``.
    """
    h_trend = trend(approx_mean)
    lam = torch.sigmoid(gate(h_trend))
    return h_trend + lam * zeta, lam


class WaveletEncoder(nn.Module):
    """Maps pooled wavelet statistics of one window per stock to an embedding of width M."""

    def __init__(self, n_channels: int, level: int, embed_dim: int = 48, attn_hidden: int | None = None):
        super().__init__()
        attn_hidden = attn_hidden or embed_dim
        self.level = level
        self.level_maps = nn.ModuleList([nn.Linear(n_channels, embed_dim) for _ in range(level)])
        self.attn_in = nn.Linear(embed_dim, attn_hidden)
        self.attn_out = nn.Linear(attn_hidden, 1)
        self.trend = nn.Linear(n_channels, embed_dim)
        self.gate = nn.Linear(embed_dim, embed_dim)

    @property
    def attention(self) -> AttentionParams:
        return AttentionParams(self.attn_in.weight, self.attn_in.bias, self.attn_out.weight, self.attn_out.bias)

    def level_states(self, detail_max: torch.Tensor) -> torch.Tensor:
        """``(..., l, D)`` max-pooled details -> ``(..., l, M)`` level states ``h_k``."""
        return torch.stack([m(detail_max[..., k, :]) for k, m in enumerate(self.level_maps)], dim=-2)

    def forward(self, detail_max: torch.Tensor, approx_mean: torch.Tensor) -> torch.Tensor:
        zeta, _ = temporal_attention(self.level_states(detail_max), self.attention)
        z, _ = trend_fluct_fuse(approx_mean, zeta, self.trend, self.gate)
        return z

    def encode_coeffs(self, coeffs: WaveletCoeffs) -> torch.Tensor:
        """Full path from raw coefficients ``(..., D, n)``, pooling included."""
        dtype = self.trend.weight.dtype
        states = torch.stack(
            [level_feature(torch.as_tensor(d, dtype=dtype), m) for d, m in zip(coeffs.details, self.level_maps)],
            dim=-2)
        zeta, _ = temporal_attention(states, self.attention)
        approx = torch.as_tensor(coeffs.approx, dtype=dtype).mean(dim=-1)
        z, _ = trend_fluct_fuse(approx, zeta, self.trend, self.gate)
        return z


class RecurrentEncoder(nn.Module):
    """Single-layer GRU over the raw window; final hidden state projected to width M."""

    def __init__(self, n_channels: int, embed_dim: int = 48, hidden: int | None = None):
        super().__init__()
        hidden = hidden or embed_dim
        self.gru = nn.GRU(n_channels, hidden, batch_first=True)
        self.proj = nn.Linear(hidden, embed_dim)

    def forward(self, windows: torch.Tensor) -> torch.Tensor:
        _, h = self.gru(windows)
        return self.proj(h[-1])


def embed_all(windows, encoder: WaveletEncoder, wavelet: str = "db4", level: int = 3,
              mode: str = "periodization") -> torch.Tensor:
    """Stock embeddings ``Z`` (N x M) for a batch of standardized ``(N, L, D)`` windows."""
    detail_max, approx_mean = pooled_features(np.asarray(windows), wavelet, level, mode)
    dtype = encoder.trend.weight.dtype
    return encoder(torch.as_tensor(detail_max, dtype=dtype), torch.as_tensor(approx_mean, dtype=dtype))
