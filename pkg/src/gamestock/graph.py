"""Typed stock / industry / investor graph and relation-typed graph convolution."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import networkx as nx
import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

RELATIONS = ("same_industry", "in_industry", "held_by")
INVESTOR_TYPES = ("ins", "hot", "ret")
NORMALIZATIONS = ("degree", "none")


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class HeteroGraph:
    """Global node order is stocks, then industries, then investors.

    ``edges[r]`` is an ``(E, 2)`` integer array of directed ``(i, j)`` pairs in
    global indices; ``m_r(i, j) = 1`` exactly when ``(i, j)`` is listed.
    """

    stock_nodes: tuple[str, ...]
    industry_nodes: tuple[str, ...]
    investor_nodes: tuple[str, ...] = INVESTOR_TYPES
    edges: Mapping[str, np.ndarray] = field(default_factory=dict)
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        ids = self.node_ids
        if len(set(ids)) != len(ids):
            raise GraphError("node identifiers must be unique")
        n = len(ids)
        edges = {}
        for r in RELATIONS:
            e = np.asarray(self.edges.get(r, np.zeros((0, 2))), dtype=np.int64).reshape(-1, 2)
            if e.size and (e.min() < 0 or e.max() >= n):
                raise GraphError(f"relation {r} has an edge endpoint outside the node set")
            e.setflags(write=False)
            edges[r] = e
        object.__setattr__(self, "edges", edges)

    @property
    def node_ids(self) -> tuple[str, ...]:
        return (
            tuple(f"stock:{s}" for s in self.stock_nodes)
            + tuple(f"industry:{s}" for s in self.industry_nodes)
            + tuple(f"investor:{s}" for s in self.investor_nodes)
        )

    @property
    def n_stocks(self) -> int:
        return len(self.stock_nodes)

    @property
    def num_nodes(self) -> int:
        return len(self.stock_nodes) + len(self.industry_nodes) + len(self.investor_nodes)

    def adjacency(self, relation: str) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        e = self.edges[relation]
        a[e[:, 0], e[:, 1]] = 1.0
        return a

    def propagation_matrices(self, normalization: str = "degree") -> np.ndarray:
        """``(R, n, n)`` stack with row ``i`` of relation ``r`` equal to ``m_r(i, .) / c_{i,r}``."""
        if normalization not in NORMALIZATIONS:
            raise GraphError(f"unknown normalization {normalization!r}")
        mats = []
        for r in RELATIONS:
            a = self.adjacency(r)
            if normalization == "degree":
                a = a / np.maximum(a.sum(axis=1, keepdims=True), 1.0)
            mats.append(a)
        return np.stack(mats)

    def check_stocks(self, stocks: Sequence[str]) -> None:
        if tuple(stocks) != self.stock_nodes:
            missing = sorted(set(stocks) ^ set(self.stock_nodes))
            raise GraphError(f"graph stock nodes differ from panel stocks: {missing[:10]}")


def build_graph(stocks: Sequence[str], industry_map: Mapping[str, str] | pd.DataFrame,
                holdings: pd.DataFrame | Iterable[tuple[str, str, float]] | None = None) -> HeteroGraph:
    """Same-industry cliques, stock<->industry links and stock<->investor holdings.

    `holdings` rows are ``(investor_type, stock_id, weight)``; an edge exists
    for every strictly positive weight.  Panel stocks absent from both tables
    become isolated nodes.
    """
    stocks = tuple(stocks)
    index = {s: i for i, s in enumerate(stocks)}
    if isinstance(industry_map, pd.DataFrame):
        industry_map = dict(zip(industry_map["stock_id"].astype(str), industry_map["industry_id"].astype(str)))
    warnings = []
    for sid in industry_map:
        if sid not in index:
            raise GraphError(f"industry map references unknown stock {sid!r}")
    if not industry_map:
        warnings.append("empty industry map: no same_industry edges")
    industries = tuple(dict.fromkeys(industry_map[s] for s in stocks if s in industry_map))
    n_s, n_i = len(stocks), len(industries)
    ind_index = {k: n_s + j for j, k in enumerate(industries)}
    inv_index = {p: n_s + n_i + j for j, p in enumerate(INVESTOR_TYPES)}

    members: dict[str, list[int]] = {}
    for s in stocks:
        if s in industry_map:
            members.setdefault(industry_map[s], []).append(index[s])
    same, in_ind = [], []
    for k, idx in members.items():
        for a in idx:
            in_ind += [(a, ind_index[k]), (ind_index[k], a)]
            same += [(a, b) for b in idx if b != a]

    held = []
    if holdings is not None:
        rows = holdings.itertuples(index=False) if isinstance(holdings, pd.DataFrame) else holdings
        seen = set()
        for inv, sid, weight in rows:
            inv, sid = str(inv), str(sid)
            if inv not in inv_index:
                raise GraphError(f"unknown investor type {inv!r}; expected one of {INVESTOR_TYPES}")
            if sid not in index:
                raise GraphError(f"holdings reference unknown stock {sid!r}")
            if not 0.0 <= float(weight) <= 1.0:
                raise GraphError(f"holding weight {weight} for ({inv}, {sid}) outside [0, 1]")
            if float(weight) > 0 and (inv, sid) not in seen:
                seen.add((inv, sid))
                held += [(index[sid], inv_index[inv]), (inv_index[inv], index[sid])]

    isolated = [s for s in stocks if s not in industry_map]
    if isolated:
        warnings.append(f"{len(isolated)} stocks have no industry; e.g. {isolated[:5]}")
    for w in warnings:
        log.warning(w)
    edges = {"same_industry": np.array(same).reshape(-1, 2),
             "in_industry": np.array(in_ind).reshape(-1, 2),
             "held_by": np.array(held).reshape(-1, 2)}
    return HeteroGraph(stocks, industries, INVESTOR_TYPES, edges, tuple(warnings))


def load_industry_map(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype=str)
    if list(df.columns) != ["stock_id", "industry_id"]:
        raise GraphError(f"{path}: header must be stock_id,industry_id")
    if df["stock_id"].duplicated().any():
        raise GraphError(f"{path}: stock {df['stock_id'][df['stock_id'].duplicated()].iloc[0]} listed twice")
    return df


def load_holdings(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"investor_type": str, "stock_id": str, "weight": float})
    if list(df.columns) != ["investor_type", "stock_id", "weight"]:
        raise GraphError(f"{path}: header must be investor_type,stock_id,weight")
    return df


@dataclass
class RgcnLayerParams:
    """Per-relation weights ``W_r`` and the self-loop weight ``W_0``, each ``(d_in, d_out)``."""

    relation_weights: Sequence[torch.Tensor]
    self_weight: torch.Tensor
    normalization: str = "degree"

    def __post_init__(self):
        shapes = {tuple(w.shape) for w in self.relation_weights} | {tuple(self.self_weight.shape)}
        if len(shapes) != 1:
            raise GraphError(f"relation and self-loop weights must share one shape, got {shapes}")

    @property
    def d_in(self) -> int:
        return self.self_weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.self_weight.shape[1]


def _as_propagation(graph, params, like: torch.Tensor) -> torch.Tensor:
    if isinstance(graph, HeteroGraph):
        return torch.as_tensor(graph.propagation_matrices(params.normalization), dtype=like.dtype)
    return graph


def rgcn_layer(h: torch.Tensor, graph: HeteroGraph | torch.Tensor, params: RgcnLayerParams) -> torch.Tensor:
    """One relational convolution: ``ELU(sum_r A_r h W_r + h W_0)``.

    `graph` may be a :class:`HeteroGraph` or a precomputed ``(R, n, n)`` stack
    from :meth:`HeteroGraph.propagation_matrices`.
    """
    prop = _as_propagation(graph, params, h)
    if h.dim() != 2 or h.shape[0] != prop.shape[-1]:
        raise GraphError(f"feature matrix has {h.shape[0]} rows for a graph of {prop.shape[-1]} nodes")
    if h.shape[1] != params.d_in:
        raise GraphError(f"feature width {h.shape[1]} != layer input width {params.d_in}")
    out = h @ params.self_weight
    for a, w in zip(prop, params.relation_weights):
        out = out + a @ (h @ w)
    return F.elu(out)


def stack_layers(h0: torch.Tensor, graph, params_list: Sequence[RgcnLayerParams]) -> torch.Tensor:
    """Apply the layers in order and return all node rows of the final layer."""
    for a, b in zip(params_list, params_list[1:]):
        if a.d_out != b.d_in:
            raise GraphError(f"layer widths do not chain: {a.d_out} -> {b.d_in}")
    h = h0
    for params in params_list:
        h = rgcn_layer(h, graph, params)
    return h


class RGCNLayer(nn.Module):
    def __init__(self, d_in: int, d_out: int, n_relations: int = len(RELATIONS), normalization: str = "degree"):
        super().__init__()
        self.normalization = normalization
        self.relation_weights = nn.ParameterList(
            [nn.Parameter(torch.empty(d_in, d_out)) for _ in range(n_relations)])
        self.self_weight = nn.Parameter(torch.empty(d_in, d_out))
        for w in [*self.relation_weights, self.self_weight]:
            nn.init.xavier_uniform_(w)

    @property
    def params(self) -> RgcnLayerParams:
        return RgcnLayerParams(list(self.relation_weights), self.self_weight, self.normalization)

    def forward(self, h: torch.Tensor, prop: torch.Tensor) -> torch.Tensor:
        return rgcn_layer(h, prop, self.params)


def graph_statistics(graph: HeteroGraph) -> dict:
    """Node/edge counts, connected components of the union graph, stock closeness."""
    g = nx.Graph()
    g.add_nodes_from(range(graph.num_nodes))
    report = {
        "nodes.stock": len(graph.stock_nodes),
        "nodes.industry": len(graph.industry_nodes),
        "nodes.investor": len(graph.investor_nodes),
    }
    for r in RELATIONS:
        e = graph.edges[r]
        report[f"edges.{r}"] = int(len(e))
        g.add_edges_from(map(tuple, e.tolist()))
    report["connected_components"] = nx.number_connected_components(g)
    closeness = nx.closeness_centrality(g)
    stock_ids = range(graph.n_stocks)
    report["mean_stock_closeness"] = float(np.mean([closeness[i] for i in stock_ids])) if graph.n_stocks else 0.0
    return report


def format_report(report: Mapping) -> str:
    lines = []
    for k, v in report.items():
        lines.append(f"{k}={v:.10g}" if isinstance(v, float) else f"{k}={v}")
    return "\n".join(lines) + "\n"

