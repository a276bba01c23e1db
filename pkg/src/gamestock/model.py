"""The composed forecaster: temporal encoder -> relational graph -> game fusion -> scalar head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import RunConfig
from .game import ActionHead, EventEncoder, aggregate_signal, equilibrium_loss, gated_fuse
from .graph import RELATIONS, HeteroGraph, RGCNLayer
from .temporal import RecurrentEncoder, WaveletEncoder

DTYPE = torch.float64


class ModelError(ValueError):
    pass


@dataclass
class DayBatch:
    """Everything the model needs for one anchor day, already as tensors.

    ``detail_max``/``approx_mean`` feed the wavelet encoder, ``windows`` the
    recurrent one; either may be None when its encoder is unused.  Event rows
    are the day's in-window events, ``event_weights[i, e]`` the normalized
    decay weight of event ``e`` for stock ``i``.
    """

    anchor_index: int
    date: np.datetime64
    detail_max: torch.Tensor | None  # (N, l, D)
    approx_mean: torch.Tensor | None  # (N, D)
    windows: torch.Tensor | None  # (N, L, D)
    event_features: torch.Tensor  # (E, P + 3)
    event_weights: torch.Tensor  # (N, E)
    evented: torch.Tensor  # (K,) stock indices with at least one event
    a_star: torch.Tensor  # (K, 3)
    y: torch.Tensor  # (N,), NaN where unavailable

    @property
    def label_mask(self) -> torch.Tensor:
        return torch.isfinite(self.y)


@dataclass
class ForwardOutput:
    pred: torch.Tensor  # (N,)
    a_pred: torch.Tensor  # (K, 3)
    a_star: torch.Tensor  # (K, 3)


class GameStock(nn.Module):
    def __init__(self, n_channels: int, cfg: RunConfig, graph: HeteroGraph | None = None):
        super().__init__()
        m = cfg.model
        self.use_mdwt, self.use_hgcn, self.use_gre = m.use_mdwt, m.use_hgcn, m.use_gre
        width = m.embed_dim
        if self.use_mdwt:
            self.encoder = WaveletEncoder(n_channels, cfg.wavelet.level, width)
        else:
            self.encoder = RecurrentEncoder(n_channels, width)
        if self.use_hgcn:
            if graph is None:
                raise ModelError("graph stage enabled but no graph given")
            n_other = graph.num_nodes - graph.n_stocks
            self.n_stocks = graph.n_stocks
            self.node_embed = nn.Parameter(torch.empty(n_other, width).uniform_(-0.01, 0.01))
            dims = [width] + [m.graph_hidden] * (m.graph_layers - 1) + [width]
            self.convs = nn.ModuleList(
                [RGCNLayer(a, b, len(RELATIONS), m.normalization) for a, b in zip(dims, dims[1:])])
            self.register_buffer("prop", torch.as_tensor(graph.propagation_matrices(m.normalization)))
        if self.use_gre:
            self.event_encoder = EventEncoder(cfg.game.pos_dim, width)
            self.fuse_gate = nn.Linear(2 * width, width)
            self.action_head = ActionHead(2 * width, m.action_hidden)
        self.norm = nn.LayerNorm(width)
        self.head = nn.Linear(width, 1)
        self.to(DTYPE)

    def embed(self, day: DayBatch) -> torch.Tensor:
        if self.use_mdwt:
            return self.encoder(day.detail_max, day.approx_mean)
        return self.encoder(day.windows)

    def graph_stage(self, z: torch.Tensor) -> torch.Tensor:
        if not self.use_hgcn:
            return z
        if z.shape[0] != self.n_stocks:
            raise ModelError(f"{z.shape[0]} stock rows for a graph with {self.n_stocks} stocks")
        h = torch.cat([z, self.node_embed], dim=0)
        for conv in self.convs:
            h = conv(h, self.prop)
        return h[: self.n_stocks]

    def forward(self, day: DayBatch) -> ForwardOutput:
        h = self.graph_stage(self.embed(day))
        if self.use_gre:
            g = aggregate_signal(day.event_weights, self.event_encoder(day.event_features))
            h = gated_fuse(h, g, self.fuse_gate)
            state = torch.cat([h, g], dim=-1)[day.evented]
            a_pred = self.action_head(state)
            a_star = day.a_star
        else:
            a_pred = a_star = h.new_zeros(0, 3)
        pred = self.head(self.norm(h)).squeeze(-1)
        return ForwardOutput(pred, a_pred, a_star)


def prediction_loss(pred: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    mask = torch.isfinite(y)
    if not bool(mask.any()):
        raise ModelError("no labeled stocks on this day")
    return ((pred[mask] - y[mask]) ** 2).mean()


def loss_total(pred: torch.Tensor, y: torch.Tensor, a_pred: torch.Tensor, a_star: torch.Tensor,
               lambda_eq: float) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """``(L_pred + lambda_eq * L_eq, L_pred, L_eq)``."""
    l_pred = prediction_loss(pred, y)
    l_eq = equilibrium_loss(a_pred, a_star)
    if lambda_eq == 0:
        return l_pred, l_pred, l_eq
    return l_pred + lambda_eq * l_eq, l_pred, l_eq


def model_loss(model: GameStock, day: DayBatch, lambda_eq: float):
    out = model(day)
    return loss_total(out.pred, day.y, out.a_pred, out.a_star, lambda_eq if model.use_gre else 0.0)
