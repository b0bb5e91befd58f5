"""Analysis metrics: expert load, FLOPs accounting, routing sharpness, and
bypass rates, plus the per-layer report emitted by the training harness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError, NumericError, ParameterError
from .routing import RoutingDecision


def ffn_expert_flops(d_in: int, d_h: int, d_out: int) -> int:
    """Per-token FLOPs of one two-matrix FFN expert (multiply-accumulate
    counted as 2)."""
    return 2 * d_in * d_h + 2 * d_h * d_out


def router_flops(d_in: int, n_experts: int) -> int:
    """Per-token FLOPs of the routing projection."""
    return 2 * d_in * n_experts


@dataclass(frozen=True)
class FlopsAccount:
    """Per-token FLOPs model of one layer.

    per_layer_expert_flops: cost of one true-expert forward (null experts
    cost exactly 0). fixed_flops covers everything outside the experts
    (attention, embeddings, ...) so whole-model percentages can be
    reported; leave it 0 for expert-only accounting.
    """

    per_layer_expert_flops: float
    router_flops: float = 0.0
    fixed_flops: float = 0.0

    def __post_init__(self):
        if min(self.per_layer_expert_flops, self.router_flops, self.fixed_flops) < 0:
            raise ParameterError("FLOPs components must be nonnegative")

    def total_per_token(self, load: float) -> float:
        """Per-token cost at a given average true-expert load."""
        return self.fixed_flops + self.router_flops + load * self.per_layer_expert_flops


def flops_reduction(adamoe_load: float, baseline_k: int, account: FlopsAccount) -> float:
    """Percent FLOPs saved versus a fixed top-k baseline.

    100 * (baseline_total - adaptive_total) / baseline_total, where each
    total is fixed + router + load * expert cost.
    """
    if baseline_k <= 0:
        raise ParameterError(f"baseline_k must be positive, got {baseline_k}")
    base = account.total_per_token(float(baseline_k))
    if base == 0:
        raise NumericError("baseline FLOPs total is zero")
    ada = account.total_per_token(float(adamoe_load))
    return 100.0 * (base - ada) / base


def average_load(decisions: list[RoutingDecision]) -> float:
    """Mean number of true experts used per token."""
    if not decisions:
        raise ParameterError("average_load needs a nonempty batch")
    return float(np.mean([d.true_count for d in decisions]))


def bypass_rate(decisions: list[RoutingDecision]) -> float:
    """Fraction of tokens whose selection contains no true expert."""
    if not decisions:
        raise ParameterError("bypass_rate needs a nonempty batch")
    return sum(1 for d in decisions if d.true_count == 0) / len(decisions)


def sharpness_counts(full_softmax_batch, threshold: float = 0.5) -> dict[int, int]:
    """Histogram of, per row, the minimal number of top-probability experts
    whose cumulative probability strictly exceeds the threshold.

    Rows must be probability vectors (sum to 1 within 1e-9).
    """
    mat = np.asarray(full_softmax_batch, dtype=np.float64)
    if mat.ndim == 1:
        mat = mat[None, :]
    if mat.ndim != 2:
        raise ParameterError(f"expected a batch of rows, got shape {mat.shape}")
    sums = mat.sum(axis=1)
    if np.max(np.abs(sums - 1.0), initial=0.0) > 1e-9:
        raise ContractError("sharpness input rows must sum to 1 within 1e-9")
    hist: dict[int, int] = {}
    for row in mat:
        cum = 0.0
        count = row.shape[0]
        for i, v in enumerate(np.sort(row)[::-1]):
            cum += v
            if cum > threshold:
                count = i + 1
                break
        hist[count] = hist.get(count, 0) + 1
    return hist


@dataclass(frozen=True)
class RoutingReport:
    """Per-layer summary of routing behaviour over an evaluation batch."""

    avg_true_load: float
    count_histogram: dict[int, int]      # true_count value -> tokens
    sharpness_histogram: dict[int, int]  # minimal >50% prefix length -> tokens
    bypass_rate: float

    @property
    def tokens(self) -> int:
        return sum(self.count_histogram.values())

    @classmethod
    def from_decisions(
        cls, decisions: list[RoutingDecision], threshold: float = 0.5
    ) -> "RoutingReport":
        if not decisions:
            raise ParameterError("report needs a nonempty batch")
        counts: dict[int, int] = {}
        for d in decisions:
            counts[d.true_count] = counts.get(d.true_count, 0) + 1
        softmaxes = [d.full_softmax for d in decisions if d.full_softmax is not None]
        sharp = sharpness_counts(np.stack(softmaxes), threshold) if softmaxes else {}
        return cls(
            avg_true_load=average_load(decisions),
            count_histogram=counts,
            sharpness_histogram=sharp,
            bypass_rate=bypass_rate(decisions),
        )


# ---------------------------------------------------------------------------
# Structured-text report: one [layer i] block per layer plus [totals]
# ---------------------------------------------------------------------------


def _hist_to_text(hist: dict[int, int]) -> str:
    return " ".join(f"{k}:{hist[k]}" for k in sorted(hist))


def _hist_from_text(text: str) -> dict[int, int]:
    out: dict[int, int] = {}
    for part in text.split():
        k, _, v = part.partition(":")
        out[int(k)] = int(v)
    return out


def report_to_text(reports: list[RoutingReport]) -> str:
    lines = []
    for i, r in enumerate(reports):
        lines.append(f"[layer {i}]")
        lines.append(f"avg_true_load = {r.avg_true_load!r}")
        lines.append(f"bypass_rate = {r.bypass_rate!r}")
        lines.append(f"tokens = {r.tokens}")
        lines.append(f"count_histogram = {_hist_to_text(r.count_histogram)}")
        lines.append(f"sharpness_histogram = {_hist_to_text(r.sharpness_histogram)}")
    lines.append("[totals]")
    lines.append(f"layers = {len(reports)}")
    if reports:
        lines.append(f"avg_true_load = {np.mean([r.avg_true_load for r in reports])!r}")
        lines.append(f"bypass_rate = {np.mean([r.bypass_rate for r in reports])!r}")
    return "\n".join(lines) + "\n"


def report_from_text(text: str) -> list[RoutingReport]:
    reports: list[RoutingReport] = []
    current: dict[str, str] = {}
    in_layer = False

    def flush():
        if not in_layer:
            return
        try:
            reports.append(
                RoutingReport(
                    avg_true_load=float(current["avg_true_load"]),
                    count_histogram=_hist_from_text(current["count_histogram"]),
                    sharpness_histogram=_hist_from_text(current["sharpness_histogram"]),
                    bypass_rate=float(current["bypass_rate"]),
                )
            )
        except (KeyError, ValueError) as exc:
            raise FormatError(f"incomplete report block: {current!r}") from exc

    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("["):
            flush()
            current = {}
            in_layer = line.startswith("[layer")
            continue
        key, _, value = line.partition(" = ")
        current[key] = value
    flush()
    return reports
