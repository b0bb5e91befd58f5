"""Auxiliary load-balancing losses and the tight-to-loose weight schedule.

The balancing loss multiplies, per expert, the fraction of tokens
dispatched to it (a hard, non-differentiable indicator) by its mean routing
probability (soft, differentiable), scaled by the expert count:

    loss = alpha * N * sum_i f_i * P_i

With null experts the dispatch fractions of all null slots are replaced by
their mean before the product, so the loss constrains how much total work
tokens skip without caring which null slot they picked:

    f~_i = f_i                   for true experts (i < n)
    f~_i = mean(f_n .. f_{n+m})  for null experts

Gradients flow only through P; f is a constant of the discrete dispatch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, FormatError, ParameterError
from .routing import RouterConfig, RouterVariant, RoutingDecision


def null_averaged_fractions(f: np.ndarray, n_true: int, n_null: int) -> np.ndarray:
    """Replace the null-expert entries of a dispatch-fraction vector by
    their mean; true entries pass through."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (n_true + n_null,):
        raise ParameterError(
            f"fraction vector of shape {f.shape} does not match "
            f"n_true={n_true}, n_null={n_null}"
        )
    out = f.copy()
    if n_null > 0:
        out[n_true:] = f[n_true:].mean()
    return out


@dataclass
class LoadStats:
    """Per-layer dispatch statistics over one batch.

    f:       fraction of tokens dispatched to each expert, length n+m.
    P:       mean routing probability per expert; may be a Tensor when the
             caller wants gradients to flow into the router.
    f_tilde: f with the null entries replaced by their mean.
    """

    f: np.ndarray
    P: object  # np.ndarray or Tensor
    f_tilde: np.ndarray
    batch_size: int

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=np.float64)
        self.f_tilde = np.asarray(self.f_tilde, dtype=np.float64)
        p_len = self.P.shape[0] if hasattr(self.P, "shape") else len(self.P)
        if not (len(self.f) == len(self.f_tilde) == p_len):
            raise ParameterError("f, P and f_tilde must have equal length")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")

    @classmethod
    def from_parts(cls, f, P, n_true: int, n_null: int, batch_size: int) -> "LoadStats":
        return cls(
            f=np.asarray(f, dtype=np.float64),
            P=P,
            f_tilde=null_averaged_fractions(f, n_true, n_null),
            batch_size=batch_size,
        )


def collect_load_stats(decisions: list[RoutingDecision], cfg: RouterConfig) -> LoadStats:
    """Aggregate routing decisions into dispatch fractions and mean
    routing probabilities."""
    if not decisions:
        raise ParameterError("cannot collect load stats from an empty batch")
    N = cfg.n_experts
    counts = np.zeros(N)
    prob_sum = np.zeros(N)
    for d in decisions:
        if d.full_softmax is None:
            raise ContractError("decision lacks full_softmax (was it deserialized?)")
        counts[list(d.selected)] += 1.0
        prob_sum += d.full_softmax
    B = len(decisions)
    f = counts / B
    if cfg.variant is RouterVariant.TOP_K:
        assert abs(f.sum() - cfg.k) < 1e-9, "each token must select exactly k experts"
    return LoadStats.from_parts(f, prob_sum / B, cfg.n_true, cfg.n_null, B)


def _p_tensor(stats: LoadStats) -> Tensor:
    return stats.P if isinstance(stats.P, Tensor) else Tensor(np.asarray(stats.P))


def load_loss_vanilla(stats: LoadStats, alpha: float, n_total: int) -> Tensor:
    """alpha * n_total * sum_i f_i * P_i, differentiable through P."""
    p = _p_tensor(stats)
    return ad.scale(ad.reduce_sum(ad.mul(p, Tensor(stats.f))), float(alpha) * n_total)


def load_loss_null(stats: LoadStats, alpha: float, n: int, m: int) -> Tensor:
    """Null-aware balancing loss alpha * (n+m) * sum_i f~_i * P_i.

    Requires m >= 1; with no null experts use load_loss_vanilla.
    """
    if m == 0:
        raise ParameterError("m == 0 has no null experts; use load_loss_vanilla")
    if m < 0:
        raise ParameterError(f"m must be >= 1, got {m}")
    if len(stats.f_tilde) != n + m:
        raise ParameterError(
            f"stats cover {len(stats.f_tilde)} experts, expected n+m={n + m}"
        )
    p = _p_tensor(stats)
    return ad.scale(
        ad.reduce_sum(ad.mul(p, Tensor(stats.f_tilde))), float(alpha) * (n + m)
    )


@dataclass(frozen=True)
class AnnealSchedule:
    """Piecewise-constant loss-weight schedule, tight first then loose.

    phases: ordered (step_span, alpha) pairs; the last phase extends
    forever. Alphas must be non-increasing.
    """

    phases: tuple = field(default_factory=tuple)

    def __post_init__(self):
        phases = tuple((int(s), float(a)) for s, a in self.phases)
        object.__setattr__(self, "phases", phases)
        if not phases:
            raise ParameterError("schedule needs at least one phase")
        for span, alpha in phases:
            if span <= 0:
                raise ParameterError(f"phase span must be positive, got {span}")
            if alpha < 0:
                raise ParameterError(f"alpha must be >= 0, got {alpha}")
        alphas = [a for _, a in phases]
        if any(b > a for a, b in zip(alphas, alphas[1:])):
            raise ParameterError("alphas must be non-increasing across phases")

    @property
    def total_steps(self) -> int:
        return sum(s for s, _ in self.phases)

    def boundaries(self) -> list[int]:
        """Step indices at which each phase ends (cumulative spans)."""
        out, acc = [], 0
        for span, _ in self.phases:
            acc += span
            out.append(acc)
        return out


def alpha_at(schedule: AnnealSchedule, step: int) -> float:
    """Loss weight in force at a given optimizer step; the final phase
    persists indefinitely."""
    if step < 0:
        raise ParameterError(f"step must be >= 0, got {step}")
    acc = 0
    for span, alpha in schedule.phases:
        acc += span
        if step < acc:
            return alpha
    return schedule.phases[-1][1]


# ---------------------------------------------------------------------------
# One-line serialization per layer per step
# ---------------------------------------------------------------------------


def stats_to_line(stats: LoadStats) -> str:
    p = stats.P.data if isinstance(stats.P, Tensor) else np.asarray(stats.P)
    return (
        "f=" + ",".join(repr(v) for v in stats.f)
        + " P=" + ",".join(repr(float(v)) for v in p)
        + " f_tilde=" + ",".join(repr(v) for v in stats.f_tilde)
        + f" batch_size={stats.batch_size}"
    )


def stats_from_line(line: str) -> LoadStats:
    try:
        fields = dict(part.split("=", 1) for part in line.split())
        f = np.array([float(v) for v in fields["f"].split(",")])
        p = np.array([float(v) for v in fields["P"].split(",")])
        f_tilde = np.array([float(v) for v in fields["f_tilde"].split(",")])
        batch = int(fields["batch_size"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad load-stats line: {line!r}") from exc
    return LoadStats(f=f, P=p, f_tilde=f_tilde, batch_size=batch)
