"""Token-choice routing over true and null experts.

A router scores n true experts plus m virtual null experts (global ids
0..n-1 are true, n..n+m-1 are null). Selection keeps the top-k scores
(ties broken by lowest index) or, in the top-p variant, the smallest
probability-sorted prefix whose cumulative mass exceeds p. Combination
weights come from a softmax over the selected scores, optionally
renormalized over the selected *true* experts only so the layer output
keeps the scale of a router without nulls.

Everything here is a pure function of (logits, config): decisions for one
token never depend on other tokens, which is what makes the scheme usable
for autoregressive models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .autodiff import Tensor
from .errors import FormatError, MoeLabError, NumericError, ParameterError


class NullKind(Enum):
    ZERO = "zero"          # null expert outputs the zero vector
    IDENTITY = "identity"  # null expert passes the input through (experimental)


class Normalization(Enum):
    ALL_SELECTED = "all_selected"  # softmax over every selected expert
    TRUE_ONLY = "true_only"        # renormalize over selected true experts


class RouterVariant(Enum):
    TOP_K = "topk"
    TOP_P = "topp"


@dataclass(frozen=True)
class RouterConfig:
    """Static routing parameters.

    n_true true experts plus n_null virtual null experts; k is the
    selection width for the top-k variant, top_p the threshold for the
    top-p variant.
    """

    n_true: int
    n_null: int = 0
    k: int = 1
    null_kind: NullKind = NullKind.ZERO
    normalization: Normalization = Normalization.TRUE_ONLY
    variant: RouterVariant = RouterVariant.TOP_K
    top_p: float | None = None

    def __post_init__(self):
        if self.n_true < 1:
            raise ParameterError(f"n_true must be >= 1, got {self.n_true}")
        if self.n_null < 0:
            raise ParameterError(f"n_null must be >= 0, got {self.n_null}")
        if not 1 <= self.k <= self.n_experts:
            raise ParameterError(
                f"k={self.k} out of range [1, {self.n_experts}] for "
                f"n_true={self.n_true}, n_null={self.n_null}"
            )
        if self.variant is RouterVariant.TOP_P:
            if self.top_p is None or not 0.0 < self.top_p <= 1.0:
                raise ParameterError(f"top_p must be in (0, 1], got {self.top_p}")

    @property
    def n_experts(self) -> int:
        return self.n_true + self.n_null


@dataclass(frozen=True, eq=False)
class RoutingDecision:
    """Outcome of routing one token.

    selected: global expert ids, ordered by descending score.
    weights:  combination masses aligned with `selected`. Under TRUE_ONLY
              normalization the true entries sum to 1 (null entries keep
              their raw top-k softmax mass for inspection; the layer never
              applies them). A token whose selection contains no true
              expert is a bypass: all weights are zero.
    true_count: number of selected ids below n_true.
    full_softmax: softmax over all n+m unmasked scores (None for decisions
              parsed back from their one-line serialization).
    """

    selected: tuple[int, ...]
    weights: tuple[float, ...]
    true_count: int
    full_softmax: np.ndarray | None


def _stable_softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def _descending(x: np.ndarray) -> np.ndarray:
    """Indices sorting x descending, ties broken by lowest index first."""
    return np.argsort(-x, kind="stable")


def _as_row(logits, cfg: RouterConfig) -> np.ndarray:
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    arr = arr.reshape(-1)
    if arr.shape[0] != cfg.n_experts:
        raise ParameterError(
            f"expected {cfg.n_experts} router scores, got {arr.shape[0]}"
        )
    if not np.isfinite(arr).all():
        raise NumericError("router scores must be finite")
    return arr


def _selection_weights(arr: np.ndarray, sel: np.ndarray, cfg: RouterConfig):
    z = arr[sel]
    w = _stable_softmax(z)
    is_true = sel < cfg.n_true
    true_count = int(is_true.sum())
    if cfg.normalization is Normalization.TRUE_ONLY:
        if true_count == 0:
            return np.zeros_like(w), 0
        out = w.copy()
        out[is_true] = _stable_softmax(z[is_true])
        return out, true_count
    return w, true_count


def route_token(logits, cfg: RouterConfig) -> RoutingDecision:
    """Route one token: select experts and compute combination weights.

    With the top-k variant the k highest scores win (lowest index on
    ties); the top-p variant delegates to route_token_top_p.
    """
    if cfg.variant is RouterVariant.TOP_P:
        return route_token_top_p(logits, cfg)
    arr = _as_row(logits, cfg)
    full = _stable_softmax(arr)
    full.setflags(write=False)
    sel = _descending(arr)[: cfg.k]
    weights, true_count = _selection_weights(arr, sel, cfg)
    return RoutingDecision(
        selected=tuple(int(i) for i in sel),
        weights=tuple(float(x) for x in weights),
        true_count=true_count,
        full_softmax=full,
    )


def route_token_top_p(logits, cfg: RouterConfig) -> RoutingDecision:
    """Select the smallest descending-probability prefix with cumulative
    mass strictly above cfg.top_p, then weight like route_token."""
    if cfg.variant is not RouterVariant.TOP_P:
        raise ParameterError("route_token_top_p requires a TOP_P router config")
    arr = _as_row(logits, cfg)
    full = _stable_softmax(arr)
    full.setflags(write=False)
    order = _descending(arr)
    cum = 0.0
    count = len(order)
    for i, idx in enumerate(order):
        cum += full[idx]
        if cum > cfg.top_p:
            count = i + 1
            break
    sel = order[:count]
    weights, true_count = _selection_weights(arr, sel, cfg)
    return RoutingDecision(
        selected=tuple(int(i) for i in sel),
        weights=tuple(float(x) for x in weights),
        true_count=true_count,
        full_softmax=full,
    )


def route_batch(logit_matrix, cfg: RouterConfig) -> list[RoutingDecision]:
    """Route each row of a [B, n+m] score matrix independently.

    Decision i depends only on row i; a per-token failure is re-raised
    with the token index prepended.
    """
    mat = (
        logit_matrix.data
        if isinstance(logit_matrix, Tensor)
        else np.asarray(logit_matrix, dtype=np.float64)
    )
    if mat.ndim != 2:
        raise ParameterError(f"expected a 2-D score matrix, got shape {mat.shape}")
    decisions = []
    for i in range(mat.shape[0]):
        try:
            decisions.append(route_token(mat[i], cfg))
        except MoeLabError as exc:
            raise type(exc)(f"token {i}: {exc}") from exc
    return decisions


# ---------------------------------------------------------------------------
# One-line serialization (consumed by the metrics module and golden tests)
# ---------------------------------------------------------------------------


def decision_to_line(decision: RoutingDecision, token_id: int) -> str:
    ids = ",".join(str(i) for i in decision.selected)
    ws = ",".join(repr(w) for w in decision.weights)
    return f"token={token_id} selected={ids} weights={ws} true_count={decision.true_count}"


def decision_from_line(line: str) -> tuple[int, RoutingDecision]:
    """Parse a decision line. full_softmax is not serialized and comes
    back as None."""
    fields = {}
    try:
        for part in line.split():
            key, value = part.split("=", 1)
            fields[key] = value
        token_id = int(fields["token"])
        selected = tuple(int(s) for s in fields["selected"].split(",") if s)
        weights = tuple(float(s) for s in fields["weights"].split(",") if s)
        true_count = int(fields["true_count"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad decision line: {line!r}") from exc
    if len(selected) != len(weights):
        raise FormatError(f"selected/weights length mismatch in line: {line!r}")
    if math.isnan(sum(weights)):
        raise FormatError(f"non-numeric weight in line: {line!r}")
    return token_id, RoutingDecision(
        selected=selected, weights=weights, true_count=true_count, full_softmax=None
    )
