"""Dragon-and-Tiger game events: decayed event signals, gated fusion, and the
three-player investor game with its pure-equilibrium solver."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F

PLAYERS = ("ins", "hot", "ret")
ACTIONS = (-1, 0, 1)
EVENT_COLUMNS = ("date", "stock_id", "a_ins", "a_hot", "a_ret", "return_1d")


class GameError(ValueError):
    pass


@dataclass(frozen=True)
class GameEvent:
    stock_id: str
    date: np.datetime64
    actions: tuple[int, int, int]
    ret: float

    def __post_init__(self):
        if len(self.actions) != 3 or any(a not in ACTIONS for a in self.actions):
            raise GameError(f"actions must be a triple over {{-1, 0, 1}}, got {self.actions}")


@dataclass(frozen=True)
class DecaySpec:
    alpha_decay: float = 0.1
    window: int = 20

    def __post_init__(self):
        if not self.alpha_decay > 0:
            raise GameError(f"decay rate must be positive, got {self.alpha_decay}")


def load_events(path, calendar: np.ndarray | None = None) -> pd.DataFrame:
    """Read the events CSV; dates must lie in `calendar` when one is given."""
    df = pd.read_csv(path, dtype={"stock_id": str}, float_precision="round_trip")
    if tuple(df.columns) != EVENT_COLUMNS:
        raise GameError(f"{path}: header must be {','.join(EVENT_COLUMNS)}")
    acts = df[["a_ins", "a_hot", "a_ret"]].to_numpy()
    bad = ~np.isin(acts, ACTIONS).all(axis=1)
    if bad.any():
        raise GameError(f"{path}: action outside {{-1, 0, 1}} at line {int(np.flatnonzero(bad)[0]) + 2}")
    df["date"] = pd.to_datetime(df["date"], format="%Y-%m-%d").to_numpy().astype("datetime64[D]")
    df[["a_ins", "a_hot", "a_ret"]] = acts.astype(np.int64)
    if calendar is not None:
        outside = ~np.isin(df["date"].to_numpy().astype("datetime64[D]"), calendar)
        if outside.any():
            raise GameError(f"{path}: event date {df['date'].iloc[int(np.flatnonzero(outside)[0])]} not in calendar")
    return df


def decay_weights(ages, spec: DecaySpec = DecaySpec()) -> np.ndarray:
    """Normalized ``exp(-alpha * age)`` weights for one stock's in-window events.

    `ages` are trading-day offsets ``t - d_j``; each must lie in ``[0, window)``.
    """
    ages = np.asarray(ages, dtype=np.float64)
    if ages.size == 0:
        return np.zeros(0)
    if ages.min() < 0 or ages.max() > spec.window - 1:
        raise GameError(f"event ages must lie in [0, {spec.window - 1}], got {ages.tolist()}")
    w = np.exp(-spec.alpha_decay * ages)
    return w / w.sum()


def sinusoidal_embedding(offsets, dim: int = 16, max_period: float = 10000.0) -> np.ndarray:
    """``[sin(o * f_i), cos(o * f_i)]`` with geometrically spaced frequencies ``f_i``."""
    if dim % 2:
        raise GameError(f"positional width must be even, got {dim}")
    offsets = np.asarray(offsets, dtype=np.float64)
    freqs = max_period ** (-np.arange(dim // 2) / (dim // 2))
    angles = offsets[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


class EventEncoder(nn.Module):
    """Two-layer map from ``[pos_emb(offset); triple]`` to width M."""

    def __init__(self, pos_dim: int = 16, embed_dim: int = 48, hidden: int | None = None):
        super().__init__()
        hidden = hidden or embed_dim
        self.pos_dim = pos_dim
        self.fc1 = nn.Linear(pos_dim + 3, hidden)
        self.fc2 = nn.Linear(hidden, embed_dim)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.elu(self.fc1(features)))


def event_features(offsets, triples, pos_dim: int = 16) -> np.ndarray:
    """Encoder input rows ``[pos_emb(offset); a_ins, a_hot, a_ret]``."""
    triples = np.asarray(triples, dtype=np.float64).reshape(-1, 3)
    return np.concatenate([sinusoidal_embedding(np.asarray(offsets).reshape(-1), pos_dim), triples], axis=1)


def encode_event(offset: int, triple: Sequence[int], encoder: EventEncoder) -> torch.Tensor:
    dtype = encoder.fc1.weight.dtype
    x = torch.as_tensor(event_features([offset], [triple], encoder.pos_dim), dtype=dtype)
    return encoder(x)[0]


def aggregate_signal(weights: torch.Tensor, encodings: torch.Tensor) -> torch.Tensor:
    """``g = weights @ encodings``.

    `weights` is ``(N, E)`` with row ``i`` holding stock ``i``'s normalized
    decay weights over the day's events (zero elsewhere); stocks without
    events get a zero row and hence ``g_i = 0``.
    """
    if encodings.shape[0] == 0:
        return encodings.new_zeros(weights.shape[0], encodings.shape[-1])
    return weights @ encodings


def gated_fuse(h: torch.Tensor, g: torch.Tensor, gate: nn.Linear) -> torch.Tensor:
    """``z * h + (1 - z) * g`` with ``z = sigmoid(gate([h; g]))``."""
    if h.shape != g.shape:
        raise GameError(f"stock embeddings {tuple(h.shape)} and game signals {tuple(g.shape)} differ in shape")
    z = torch.sigmoid(gate(torch.cat([h, g], dim=-1)))
    return z * h + (1.0 - z) * g


class ActionHead(nn.Module):
    """Continuous per-player action predictions in (-1, 1)."""

    def __init__(self, in_dim: int, hidden: int = 32):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, len(PLAYERS))

    def forward(self, state: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.fc2(F.elu(self.fc1(state))))


def predict_actions(state: torch.Tensor, head: ActionHead) -> torch.Tensor:
    return head(state)


def equilibrium_loss(a_pred: torch.Tensor, a_star: torch.Tensor) -> torch.Tensor:
    """Mean over evented stocks of the summed squared action error; 0 when there are none."""
    if a_pred.shape != a_star.shape:
        raise GameError(f"predicted actions {tuple(a_pred.shape)} vs targets {tuple(a_star.shape)}")
    if a_pred.shape[0] == 0:
        return a_pred.new_zeros(())
    return ((a_pred - a_star) ** 2).sum(dim=-1).mean()


# --- the investor game -----------------------------------------------------

def default_beta() -> np.ndarray:
    beta = np.zeros((3, 3))
    beta[2, 1] = 1.0  # retail follows hot money
    beta[2, 0] = 1.0  # retail follows institutions
    beta[1, 0] = 0.5  # hot money partially follows institutions
    return beta


@dataclass(frozen=True)
class GameSpec:
    """Follow coefficients ``beta[p, q]`` (player p following q) and coupling weight."""

    beta: np.ndarray = field(default_factory=default_beta)
    lambda_follow: float = 0.1

    def __post_init__(self):
        beta = np.array(self.beta, dtype=np.float64).reshape(3, 3)
        if np.any(np.diag(beta) != 0):
            raise GameError("follow coefficients must have a zero diagonal")
        if not self.lambda_follow >= 0:
            raise GameError(f"lambda_follow must be >= 0, got {self.lambda_follow}")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)


@dataclass(frozen=True)
class EquilibriumProfile:
    actions: tuple[int, int, int]
    status: str  # "pure" or "fallback_regret"
    regret: float


def _check_actions(profile) -> None:
    if any(a not in ACTIONS for a in profile):
        raise GameError(f"actions must be in {{-1, 0, 1}}, got {tuple(profile)}")


def payoff(player: int, profile: Sequence[int], r: float, spec: GameSpec) -> float:
    """``u_p = a_p r + lambda a_p sum_{q != p} beta[p, q] a_q`` for `player` under `profile`."""
    _check_actions(profile)
    a_p = profile[player]
    follow = sum(spec.beta[player, q] * profile[q] for q in range(3) if q != player)
    return a_p * r + spec.lambda_follow * a_p * follow


PROFILES = np.array(list(itertools.product(ACTIONS, repeat=3)), dtype=np.int64)  # (27, 3), lexicographic


def _tiebreak_key(profile) -> tuple:
    return (sum(abs(a) for a in profile), tuple(profile))


def best_response_coefficients(r: float, spec: GameSpec, profiles: np.ndarray = PROFILES) -> np.ndarray:
    """``c[k, p] = r + lambda sum_q beta[p, q] a_q`` so that ``u_p = a_p c[k, p]``."""
    return r + spec.lambda_follow * (profiles @ spec.beta.T)


def regrets(r: float, spec: GameSpec) -> np.ndarray:
    """Per-profile, per-player regret ``max_a u_p(a, a_-p) - u_p(a_p, a_-p)``, shape (27, 3).

    Payoffs are linear in the own action, so the best attainable value is ``|c_p|``.
    """
    c = best_response_coefficients(r, spec)
    return np.abs(c) - PROFILES * c


def pure_equilibria(r: float, spec: GameSpec) -> list[tuple[int, int, int]]:
    """All profiles where every player weakly best-responds, lexicographic order."""
    ok = np.all(regrets(r, spec) <= 0.0, axis=1)
    return [tuple(int(a) for a in p) for p in PROFILES[ok]]


def solve_equilibrium(r: float, spec: GameSpec = GameSpec()) -> EquilibriumProfile:
    """Pure equilibrium by enumeration of the 27 joint profiles.

    Several equilibria: least total activity ``sum |a_p|`` wins, then
    lexicographic order.  None: the minimum total-regret profile, same tie-break.
    """
    if not math.isfinite(r):
        raise GameError(f"return must be finite, got {r}")
    reg = regrets(r, spec)
    total = reg.sum(axis=1)
    pure = np.all(reg <= 0.0, axis=1)
    if pure.any():
        cands = [tuple(int(a) for a in p) for p in PROFILES[pure]]
        return EquilibriumProfile(min(cands, key=_tiebreak_key), "pure", 0.0)
    best = total.min()
    cands = [(tuple(int(a) for a in p), t) for p, t in zip(PROFILES, total) if t == best]
    profile, value = min(cands, key=lambda pt: _tiebreak_key(pt[0]))
    return EquilibriumProfile(profile, "fallback_regret", float(value))


def equilibrium_targets(returns: Sequence[float], spec: GameSpec = GameSpec()) -> np.ndarray:
    """Equilibrium action triples for a batch of event-day returns, ``(K, 3)``."""
    cache: dict[float, tuple] = {}
    out = np.zeros((len(returns), 3))
    for k, r in enumerate(returns):
        r = float(r)
        if r not in cache:
            cache[r] = solve_equilibrium(r, spec).actions
        out[k] = cache[r]
    return out
