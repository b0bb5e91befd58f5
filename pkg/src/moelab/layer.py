"""The mixture layer: expert parameterizations, sparse forward combination,
and router-column expansion for retrofitting null experts onto an existing
router.

Null experts are virtual: they own no parameters and cost no FLOPs. The
layer therefore evaluates each true expert only on the tokens that selected
it, and counts those evaluations so tests can assert the zero-FLOPs
property directly.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_INF, Tensor
from .errors import DimensionError, FormatError, ParameterError
from .routing import Normalization, NullKind, RouterConfig, RoutingDecision, route_batch


class FfnExpert:
    """Two-matrix feed-forward expert: nonlinearity(x @ w1) @ w2."""

    def __init__(self, w1: Tensor, w2: Tensor, nonlinearity=ad.relu):
        if w1.data.ndim != 2 or w2.data.ndim != 2:
            raise DimensionError("expert weights must be 2-D")
        if w1.shape[1] != w2.shape[0]:
            raise DimensionError(
                f"hidden dimensions differ: w1 {w1.shape} vs w2 {w2.shape}"
            )
        if w1.shape[1] < 1:
            raise ParameterError("hidden dimension must be >= 1")
        self.w1 = w1
        self.w2 = w2
        self.nonlinearity = nonlinearity

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_out(self) -> int:
        return self.w2.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        return ad.matmul(self.nonlinearity(ad.matmul(x, self.w1)), self.w2)

    def params(self) -> list[Tensor]:
        return [self.w1, self.w2]

    def flops_per_token(self) -> int:
        d_h = self.w1.shape[1]
        return 2 * self.d_in * d_h + 2 * d_h * self.d_out


class LoraDeltaExpert:
    """Low-rank residual expert: x @ base + (2/r) * (x @ a) @ b.

    `base` is a shared frozen-or-trainable full matrix; each expert owns its
    own rank-r factors. The 2/r factor folds in the usual alpha = 2r scaling
    convention.
    """

    def __init__(self, a: Tensor, b: Tensor, base: Tensor):
        if a.data.ndim != 2 or b.data.ndim != 2 or base.data.ndim != 2:
            raise DimensionError("expert weights must be 2-D")
        r = a.shape[1]
        if r != b.shape[0]:
            raise DimensionError(f"rank mismatch: a {a.shape} vs b {b.shape}")
        if base.shape != (a.shape[0], b.shape[1]):
            raise DimensionError(
                f"base {base.shape} does not match factors {a.shape} x {b.shape}"
            )
        if r < 1 or r > min(base.shape):
            raise ParameterError(f"rank {r} out of range for base {base.shape}")
        self.a = a
        self.b = b
        self.base = base

    @property
    def d_in(self) -> int:
        return self.base.shape[0]

    @property
    def d_out(self) -> int:
        return self.base.shape[1]

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        delta = ad.scale(ad.matmul(ad.matmul(x, self.a), self.b), 2.0 / self.rank)
        return ad.add(ad.matmul(x, self.base), delta)

    def params(self) -> list[Tensor]:
        return [self.a, self.b, self.base]

    def flops_per_token(self) -> int:
        r = self.rank
        return 2 * self.d_in * self.d_out + 2 * self.d_in * r + 2 * r * self.d_out


ExpertParams = FfnExpert | LoraDeltaExpert


class MoeLayer:
    """Router weights plus the true experts they dispatch to.

    The router matrix has one column per expert, true columns first. Null
    experts have no parameters; `expert_eval_counts` records how many
    tokens each true expert actually processed (accurate for
    single-threaded use).
    """

    def __init__(self, router_weights: Tensor, experts: list, cfg: RouterConfig):
        if router_weights.data.ndim != 2:
            raise DimensionError("router weights must be 2-D")
        if router_weights.shape[1] != cfg.n_experts:
            raise ParameterError(
                f"router has {router_weights.shape[1]} columns, "
                f"config needs {cfg.n_experts}"
            )
        if len(experts) != cfg.n_true:
            raise ParameterError(
                f"{len(experts)} experts provided, config needs {cfg.n_true}"
            )
        d_in = router_weights.shape[0]
        for i, e in enumerate(experts):
            if e.d_in != d_in:
                raise DimensionError(
                    f"expert {i} input dim {e.d_in} does not match router {d_in}"
                )
            if e.d_out != experts[0].d_out:
                raise DimensionError("experts disagree on output dimension")
        if cfg.null_kind is NullKind.IDENTITY and experts[0].d_out != d_in:
            raise ParameterError(
                "identity null experts require d_in == d_out "
                f"(got {d_in} and {experts[0].d_out})"
            )
        self.router_weights = router_weights
        self.experts = experts
        self.cfg = cfg
        self.expert_eval_counts = [0] * cfg.n_true

    @property
    def d_in(self) -> int:
        return self.router_weights.shape[0]

    @property
    def d_out(self) -> int:
        return self.experts[0].d_out

    @property
    def total_expert_evals(self) -> int:
        return sum(self.expert_eval_counts)

    def reset_eval_counts(self) -> None:
        self.expert_eval_counts = [0] * self.cfg.n_true

    def params(self) -> list[Tensor]:
        seen: list[Tensor] = [self.router_weights]
        for e in self.experts:
            for p in e.params():
                if all(p is not q for q in seen):  # shared LoRA base appears once
                    seen.append(p)
        return seen


@dataclass
class LayerForward:
    """Full result of one layer application."""

    output: Tensor                      # [B, d_out]
    decisions: list[RoutingDecision]
    router_probs: Tensor                # [B, n+m] softmax over unmasked scores


def layer_forward(x_batch: Tensor, layer: MoeLayer):
    """Apply the layer: returns (output batch, per-token decisions)."""
    res = layer_forward_full(x_batch, layer)
    return res.output, res.decisions


def layer_forward_full(x_batch: Tensor, layer: MoeLayer) -> LayerForward:
    """Apply the layer, also exposing the differentiable full routing
    softmax needed by the load-balancing loss.

    Per token, the output is the weighted sum of the selected true experts'
    outputs; identity nulls additionally contribute weight * x when all
    selected experts share the combination (ALL_SELECTED), and a bypassed
    token (no true expert selected) contributes the zero vector under zero
    nulls or x itself under identity nulls.
    """
    x = x_batch if isinstance(x_batch, Tensor) else Tensor(x_batch)
    if x.data.ndim != 2:
        raise DimensionError(f"layer input must be 2-D, got {x.shape}")
    if x.shape[1] != layer.d_in:
        raise DimensionError(
            f"input dim {x.shape[1]} does not match layer d_in {layer.d_in}"
        )
    cfg = layer.cfg
    B, n, N = x.shape[0], cfg.n_true, cfg.n_experts

    scores = ad.matmul(x, layer.router_weights)         # [B, N]
    router_probs = ad.softmax(scores, axis=1)
    decisions = route_batch(scores.data, cfg)

    keep = np.zeros((B, N), dtype=bool)
    for b, d in enumerate(decisions):
        keep[b, list(d.selected)] = True
    weight_keep = keep.copy()
    if cfg.normalization is Normalization.TRUE_ONLY:
        weight_keep[:, n:] = False
    masked = ad.masked_fill(scores, ~weight_keep, NEG_INF)
    weights = ad.softmax(masked, axis=1)                # zeros off-selection; bypass rows all-zero

    y = Tensor(np.zeros((B, layer.d_out)))
    for e, expert in enumerate(layer.experts):
        tok = np.nonzero(keep[:, e])[0]
        if tok.size == 0:
            continue
        layer.expert_eval_counts[e] += int(tok.size)
        out_e = expert.forward(ad.gather_rows(x, tok))
        w_e = ad.gather_elems(weights, tok, e)
        y = ad.add(y, ad.scatter_rows(ad.mul_colvec(out_e, w_e), tok, B))

    if cfg.null_kind is NullKind.IDENTITY and cfg.n_null > 0:
        if cfg.normalization is Normalization.ALL_SELECTED:
            null_mask = np.arange(N) >= n
            y = ad.add(y, ad.mul_colvec(x, ad.sum_cols(weights, null_mask)))
        else:
            # TRUE_ONLY excludes nulls from the combination; a fully-null
            # selection still passes the token through unchanged.
            bypass = np.array([1.0 if d.true_count == 0 else 0.0 for d in decisions])
            if bypass.any():
                y = ad.add(y, ad.mul_colvec(x, Tensor(bypass)))

    return LayerForward(output=y, decisions=decisions, router_probs=router_probs)


def expand_router(base_weights, m: int) -> Tensor:
    """Widen a router matrix [d_in, n] to [d_in, n+m] by giving each new
    null column a copy of true column (j - n) mod n.

    At initialization every null expert then scores exactly like its twin
    true expert on any input, so the widened router starts balanced.
    """
    base = base_weights if isinstance(base_weights, Tensor) else Tensor(base_weights)
    if base.data.ndim != 2:
        raise DimensionError("router weights must be 2-D")
    n = base.shape[1]
    if n == 0:
        raise ParameterError("cannot expand a router with zero true columns")
    if m < 1:
        raise ParameterError(f"m must be >= 1, got {m}")
    null_cols = base.data[:, np.arange(m) % n]
    return Tensor(np.hstack([base.data, null_cols]), requires_grad=base.requires_grad)


def make_moe_block(
    d_in: int, d_out: int, d_h: int, cfg: RouterConfig, seed: int
) -> MoeLayer:
    """Build a layer with FFN experts, all parameters drawn from
    uniform(-s, s) with s = 1/sqrt(d_in), deterministically per seed."""
    if min(d_in, d_out, d_h) < 1:
        raise ParameterError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    s = 1.0 / np.sqrt(d_in)

    def draw(rows, cols):
        return Tensor(rng.uniform(-s, s, size=(rows, cols)), requires_grad=True)

    router = draw(d_in, cfg.n_experts)
    experts = [FfnExpert(draw(d_in, d_h), draw(d_h, d_out)) for _ in range(cfg.n_true)]
    return MoeLayer(router, experts, cfg)


def layer_state(layer: MoeLayer, prefix: str = "") -> dict[str, Tensor]:
    """Named parameter map for checkpointing."""
    state = {f"{prefix}router_weights": layer.router_weights}
    for j, e in enumerate(layer.experts):
        if isinstance(e, FfnExpert):
            state[f"{prefix}expert{j}.w1"] = e.w1
            state[f"{prefix}expert{j}.w2"] = e.w2
        else:
            state[f"{prefix}expert{j}.a"] = e.a
            state[f"{prefix}expert{j}.b"] = e.b
            state[f"{prefix}lora_base"] = e.base
    return state


# ---------------------------------------------------------------------------
# Flat text checkpoints: one `name dims... :` header per tensor followed by
# its row-major values at 17 significant digits (bit-exact round trip).
# ---------------------------------------------------------------------------


def write_checkpoint(path, tensors: dict, config_text: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(checkpoint_to_text(tensors, config_text))


def checkpoint_to_text(tensors: dict, config_text: str = "") -> str:
    buf = io.StringIO()
    buf.write("[config]\n")
    if config_text:
        buf.write(config_text.rstrip("\n") + "\n")
    buf.write("[tensors]\n")
    for name, t in tensors.items():
        data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        dims = " ".join(str(d) for d in data.shape)
        vals = " ".join(format(v, ".17g") for v in data.reshape(-1))
        buf.write(f"{name} {dims} : {vals}\n")
    return buf.getvalue()


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    with open(path, "r", encoding="utf-8") as fh:
        return checkpoint_from_text(fh.read())


def checkpoint_from_text(text: str) -> tuple[dict[str, np.ndarray], str]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "[config]":
        raise FormatError("checkpoint must start with a [config] section")
    try:
        split = lines.index("[tensors]")
    except ValueError:
        raise FormatError("checkpoint is missing the [tensors] section") from None
    config_text = "\n".join(lines[1:split])
    tensors: dict[str, np.ndarray] = {}
    for line in lines[split + 1 :]:
        if not line.strip():
            continue
        try:
            header, _, values = line.partition(" : ")
            parts = header.split()
            name, dims = parts[0], tuple(int(d) for d in parts[1:])
            flat = np.array([float(v) for v in values.split()], dtype=np.float64)
            tensors[name] = flat.reshape(dims)
        except (ValueError, IndexError) as exc:
            raise FormatError(f"bad checkpoint tensor line: {line[:80]!r}") from exc
    return tensors, config_text
