"""End-to-end desk-scale experiments.

The model is a tiny residual sequence network: token + position embeddings,
then per block a causal mean-pool mixer followed by a mixture layer, both
on residual connections, and a linear readout. The residual stream is what
carries a token forward when its routing selects only null experts.

Training is plain gradient descent on cross-entropy plus the annealed
load-balancing loss. Everything is deterministic per seed: parameters, data
order, and evaluation sets come from independent seeded streams, so two
runs with equal configs produce bit-identical records.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import ExperimentConfig, config_from_text, config_to_text
from .errors import ConfigError, FormatError, NumericError, ParameterError, RunError
from .layer import (
    LayerForward,
    MoeLayer,
    layer_forward_full,
    layer_state,
    make_moe_block,
    read_checkpoint,
    write_checkpoint,
)
from .losses import LoadStats, alpha_at, load_loss_null, load_loss_vanilla
from .metrics import (
    FlopsAccount,
    RoutingReport,
    ffn_expert_flops,
    flops_reduction,
    router_flops,
)
from .routing import decision_to_line

EVAL_TOKEN_TARGET = 1024  # fixed evaluation set size (tokens, rounded up to batches)


# ---------------------------------------------------------------------------
# Synthetic tasks
# ---------------------------------------------------------------------------


class CopyMemoryTask:
    """Predict the token seen `lag` positions earlier (clamped at the
    sequence start, so lag 0 is plain echo)."""

    def __init__(self, vocab: int, seq_len: int, lag: int = 1):
        self.vocab = vocab
        self.seq_len = seq_len
        self.lag = lag
        self._src = np.maximum(np.arange(seq_len) - lag, 0)

    def sample(self, rng, batch: int):
        tokens = rng.integers(0, self.vocab, size=(batch, self.seq_len))
        return tokens, tokens[:, self._src]


class ModularAdditionTask:
    """Predict the running sum of the tokens so far, modulo the vocabulary."""

    def __init__(self, vocab: int, seq_len: int):
        self.vocab = vocab
        self.seq_len = seq_len

    def sample(self, rng, batch: int):
        tokens = rng.integers(0, self.vocab, size=(batch, self.seq_len))
        return tokens, np.cumsum(tokens, axis=1) % self.vocab


class CharLmTask:
    """Next-character prediction over windows of a user-supplied text file."""

    def __init__(self, corpus_path: str, vocab: int, seq_len: int):
        try:
            with open(corpus_path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read corpus {corpus_path}: {exc}") from exc
        alphabet = sorted(set(text))
        if len(alphabet) > vocab:
            raise ConfigError(
                f"corpus has {len(alphabet)} distinct characters, vocab is {vocab}"
            )
        index = {ch: i for i, ch in enumerate(alphabet)}
        self.ids = np.array([index[ch] for ch in text], dtype=np.int64)
        if len(self.ids) < seq_len + 2:
            raise ConfigError("corpus is shorter than one training window")
        self.vocab = vocab
        self.seq_len = seq_len

    def sample(self, rng, batch: int):
        starts = rng.integers(0, len(self.ids) - self.seq_len - 1, size=batch)
        tokens = np.stack([self.ids[s : s + self.seq_len] for s in starts])
        targets = np.stack([self.ids[s + 1 : s + self.seq_len + 1] for s in starts])
        return tokens, targets


def make_task(cfg: ExperimentConfig):
    t, vocab = cfg.task, cfg.model.vocab
    if t.kind == "copy_memory":
        return CopyMemoryTask(vocab, t.seq_len, t.lag)
    if t.kind == "modular_addition":
        return ModularAdditionTask(vocab, t.seq_len)
    if t.kind == "char_lm":
        return CharLmTask(t.corpus, vocab, t.seq_len)
    raise ConfigError(f"unknown task kind {t.kind!r}")


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


def _causal_mean_matrix(seq_len: int) -> np.ndarray:
    m = np.tril(np.ones((seq_len, seq_len)))
    return m / m.sum(axis=1, keepdims=True)


class SequenceModel:
    """Embeddings, residual mixer+mixture blocks, and a linear readout."""

    def __init__(self, cfg: ExperimentConfig, rng):
        d, v, t = cfg.model.d_model, cfg.model.vocab, cfg.task.seq_len
        s = 1.0 / np.sqrt(d)
        self.cfg = cfg
        self.tok_emb = Tensor(rng.uniform(-s, s, size=(v, d)), requires_grad=True)
        self.pos_emb = Tensor(rng.uniform(-s, s, size=(t, d)), requires_grad=True)
        self.mixers: list[Tensor] = []
        self.layers: list[MoeLayer] = []
        for _ in range(cfg.model.layers):
            self.mixers.append(Tensor(rng.uniform(-s, s, size=(d, d)), requires_grad=True))
            block_seed = int(rng.integers(0, 2**31 - 1))
            self.layers.append(make_moe_block(d, d, cfg.model.d_h, cfg.router, block_seed))
        self.w_out = Tensor(rng.uniform(-s, s, size=(d, v)), requires_grad=True)
        self._mix_cache: dict[int, Tensor] = {}

    def params(self) -> dict[str, Tensor]:
        named = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for i, (mixer, layer) in enumerate(zip(self.mixers, self.layers)):
            named[f"block{i}.w_mix"] = mixer
            named.update(layer_state(layer, prefix=f"block{i}."))
        named["w_out"] = self.w_out
        return named

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params().values())

    def _mixer_matrix(self, batch: int) -> Tensor:
        if batch not in self._mix_cache:
            per_seq = _causal_mean_matrix(self.cfg.task.seq_len)
            self._mix_cache[batch] = Tensor(np.kron(np.eye(batch), per_seq))
        return self._mix_cache[batch]

    def forward(self, tokens: np.ndarray):
        """tokens [B, T] -> (logits [B*T, vocab], per-block layer results)."""
        b, t = tokens.shape
        flat = tokens.reshape(-1)
        pos = np.tile(np.arange(t), b)
        x = ad.add(ad.gather_rows(self.tok_emb, flat), ad.gather_rows(self.pos_emb, pos))
        mix = self._mixer_matrix(b)
        results: list[LayerForward] = []
        for mixer, layer in zip(self.mixers, self.layers):
            x = ad.add(x, ad.matmul(ad.matmul(mix, x), mixer))
            lf = layer_forward_full(x, layer)
            results.append(lf)
            x = ad.add(x, lf.output)
        return ad.matmul(x, self.w_out), results


def parameter_count(cfg: ExperimentConfig) -> int:
    """Closed-form parameter count of build_model(cfg):

    vocab*d + seq_len*d                   (embeddings)
    + layers * (d*d + d*(n+m) + n*(d*d_h + d_h*d))   (mixer, router, experts)
    + d*vocab                             (readout)
    """
    d, v, t = cfg.model.d_model, cfg.model.vocab, cfg.task.seq_len
    n, nm, dh = cfg.router.n_true, cfg.router.n_experts, cfg.model.d_h
    per_layer = d * d + d * nm + n * (d * dh + dh * d)
    return v * d + t * d + cfg.model.layers * per_layer + d * v


def build_model(cfg: ExperimentConfig) -> SequenceModel:
    """Deterministically build the model from the config seed."""
    return SequenceModel(cfg, np.random.default_rng([cfg.optim.seed, 0]))


def load_model_params(model: SequenceModel, tensors: dict) -> None:
    """Copy checkpoint arrays into a model; names and shapes must cover
    every parameter exactly."""
    params = model.params()
    missing = sorted(set(params) - set(tensors))
    if missing:
        raise FormatError(f"checkpoint is missing tensors: {missing}")
    for name, p in params.items():
        arr = np.asarray(tensors[name], dtype=np.float64)
        if arr.shape != p.shape:
            raise FormatError(
                f"checkpoint tensor {name} has shape {arr.shape}, model needs {p.shape}"
            )
        p.data = arr.copy()


# ---------------------------------------------------------------------------
# Run records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepLog:
    step: int
    alpha: float
    task_loss: float
    aux_loss: float


@dataclass(frozen=True)
class LayerSnapshot:
    step: int
    layer: int
    report: RoutingReport


@dataclass(frozen=True)
class PhaseEval:
    """Held-out evaluation at a phase boundary (and at the end of the run)."""

    step: int
    eval_loss: float
    eval_accuracy: float
    layer_loads: tuple[float, ...]
    layer_bypass: tuple[float, ...]

    @property
    def mean_load(self) -> float:
        return float(np.mean(self.layer_loads))


@dataclass
class RunRecord:
    steps: list[StepLog] = field(default_factory=list)
    snapshots: list[LayerSnapshot] = field(default_factory=list)
    phase_evals: list[PhaseEval] = field(default_factory=list)
    final_accuracy: float | None = None
    final_eval_loss: float | None = None
    checkpoint_path: str | None = None

    def to_lines(self) -> list[str]:
        lines = []
        for s in self.steps:
            lines.append(
                f"step={s.step} alpha={s.alpha!r} task_loss={s.task_loss!r} "
                f"aux_loss={s.aux_loss!r}"
            )
        for snap in self.snapshots:
            r = snap.report
            counts = ",".join(f"{k}:{v}" for k, v in sorted(r.count_histogram.items()))
            sharp = ",".join(f"{k}:{v}" for k, v in sorted(r.sharpness_histogram.items()))
            lines.append(
                f"snapshot step={snap.step} layer={snap.layer} "
                f"avg_true_load={r.avg_true_load!r} bypass_rate={r.bypass_rate!r} "
                f"count_histogram={counts} sharpness_histogram={sharp}"
            )
        for ev in self.phase_evals:
            loads = ",".join(repr(x) for x in ev.layer_loads)
            byp = ",".join(repr(x) for x in ev.layer_bypass)
            lines.append(
                f"phase_eval step={ev.step} eval_loss={ev.eval_loss!r} "
                f"eval_accuracy={ev.eval_accuracy!r} layer_loads={loads} "
                f"layer_bypass={byp}"
            )
        lines.append(
            f"final accuracy={self.final_accuracy!r} eval_loss={self.final_eval_loss!r} "
            f"checkpoint={self.checkpoint_path or 'none'}"
        )
        return lines

    def to_text(self) -> str:
        return "\n".join(self.to_lines()) + "\n"


def _parse_hist(text: str) -> dict[int, int]:
    out = {}
    for part in text.split(","):
        if part:
            k, _, v = part.partition(":")
            out[int(k)] = int(v)
    return out


def run_record_from_text(text: str) -> RunRecord:
    """Parse a serialized run record (inverse of RunRecord.to_text)."""
    rec = RunRecord()
    try:
        for line in text.splitlines():
            if not line.strip():
                continue
            kind, _, rest = line.partition(" ")
            fields = dict(part.split("=", 1) for part in rest.split())
            if line.startswith("step="):
                fields = dict(part.split("=", 1) for part in line.split())
                rec.steps.append(
                    StepLog(
                        step=int(fields["step"]),
                        alpha=float(fields["alpha"]),
                        task_loss=float(fields["task_loss"]),
                        aux_loss=float(fields["aux_loss"]),
                    )
                )
            elif kind == "snapshot":
                report = RoutingReport(
                    avg_true_load=float(fields["avg_true_load"]),
                    count_histogram=_parse_hist(fields["count_histogram"]),
                    sharpness_histogram=_parse_hist(fields["sharpness_histogram"]),
                    bypass_rate=float(fields["bypass_rate"]),
                )
                rec.snapshots.append(
                    LayerSnapshot(int(fields["step"]), int(fields["layer"]), report)
                )
            elif kind == "phase_eval":
                rec.phase_evals.append(
                    PhaseEval(
                        step=int(fields["step"]),
                        eval_loss=float(fields["eval_loss"]),
                        eval_accuracy=float(fields["eval_accuracy"]),
                        layer_loads=tuple(
                            float(x) for x in fields["layer_loads"].split(",") if x
                        ),
                        layer_bypass=tuple(
                            float(x) for x in fields["layer_bypass"].split(",") if x
                        ),
                    )
                )
            elif kind == "final":
                acc = fields["accuracy"]
                loss = fields["eval_loss"]
                rec.final_accuracy = None if acc == "None" else float(acc)
                rec.final_eval_loss = None if loss == "None" else float(loss)
                ck = fields["checkpoint"]
                rec.checkpoint_path = None if ck == "none" else ck
            else:
                raise ValueError(f"unknown record line kind {kind!r}")
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad run record line: {exc}") from exc
    return rec


# ---------------------------------------------------------------------------
# Training, evaluation, comparison, analysis
# ---------------------------------------------------------------------------


def _batch_load_stats(lf: LayerForward, cfg: ExperimentConfig) -> LoadStats:
    """Load stats for one layer over one batch, with P on the tape so the
    balancing loss reaches the router."""
    r = cfg.router
    counts = np.zeros(r.n_experts)
    for d in lf.decisions:
        counts[list(d.selected)] += 1.0
    batch = len(lf.decisions)
    return LoadStats.from_parts(
        f=counts / batch,
        P=ad.mean_rows(lf.router_probs),
        n_true=r.n_true,
        n_null=r.n_null,
        batch_size=batch,
    )


def _aux_loss(results: list[LayerForward], cfg: ExperimentConfig) -> Tensor:
    r = cfg.router
    terms = []
    for lf in results:
        stats = _batch_load_stats(lf, cfg)
        if r.n_null > 0:
            terms.append(load_loss_null(stats, 1.0, r.n_true, r.n_null))
        else:
            terms.append(load_loss_vanilla(stats, 1.0, r.n_true))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    if cfg.loss_reduction == "mean":
        total = ad.scale(total, 1.0 / len(terms))
    return total


@dataclass(frozen=True)
class EvalResult:
    loss: float
    accuracy: float
    reports: tuple[RoutingReport, ...]
    layer_decisions: tuple  # per layer, list of RoutingDecision


def _eval_batches(cfg: ExperimentConfig, task, rng):
    per_batch = cfg.optim.batch_size * cfg.task.seq_len
    n_batches = max(1, -(-EVAL_TOKEN_TARGET // per_batch))
    return [task.sample(rng, cfg.optim.batch_size) for _ in range(n_batches)]


def evaluate(model: SequenceModel, cfg: ExperimentConfig, batches) -> EvalResult:
    """Forward the model over fixed batches without recording gradients."""
    losses, hits, total = [], 0, 0
    per_layer: list[list] = [[] for _ in model.layers]
    for tokens, targets in batches:
        logits, results = model.forward(tokens)
        flat_targets = targets.reshape(-1)
        losses.append(ad.cross_entropy(logits, flat_targets).item())
        hits += int((np.argmax(logits.data, axis=1) == flat_targets).sum())
        total += flat_targets.size
        for i, lf in enumerate(results):
            per_layer[i].extend(lf.decisions)
    reports = tuple(RoutingReport.from_decisions(ds) for ds in per_layer)
    return EvalResult(
        loss=float(np.mean(losses)),
        accuracy=hits / total,
        reports=reports,
        layer_decisions=tuple(per_layer),
    )


def train(
    cfg: ExperimentConfig,
    out_dir: str | None = None,
    init_checkpoint: str | None = None,
) -> RunRecord:
    """Run gradient descent per the config; returns the populated record.

    On divergence the partial record (final report included) is attached to
    the raised RunError.
    """
    model = build_model(cfg)
    if init_checkpoint is not None:
        tensors, _ = read_checkpoint(init_checkpoint)
        load_model_params(model, tensors)
    task = make_task(cfg)
    data_rng = np.random.default_rng([cfg.optim.seed, 1])
    eval_batches = _eval_batches(cfg, task, np.random.default_rng([cfg.optim.seed, 2]))

    record = RunRecord()
    steps = cfg.steps
    eval_points = {b for b in cfg.schedule.boundaries() if b <= steps} | {steps}
    params = model.params()

    for step in range(steps):
        alpha = alpha_at(cfg.schedule, step)
        tokens, targets = task.sample(data_rng, cfg.optim.batch_size)
        try:
            with Tape() as tape:
                logits, results = model.forward(tokens)
                task_loss = ad.cross_entropy(logits, targets.reshape(-1))
                aux = _aux_loss(results, cfg)
                total = ad.add(task_loss, ad.scale(aux, alpha))
        except NumericError as exc:
            _finalize(record, model, cfg, out_dir, eval_batches, diverged=True)
            raise RunError(
                f"numeric blow-up at step {step}: {exc}", step=step, record=record
            ) from exc
        task_val, aux_val = task_loss.item(), aux.item()

        if step % cfg.optim.log_every == 0 or step == steps - 1:
            record.steps.append(StepLog(step, alpha, task_val, aux_val))
            for i, lf in enumerate(results):
                record.snapshots.append(
                    LayerSnapshot(step, i, RoutingReport.from_decisions(lf.decisions))
                )

        if not np.isfinite(total.item()):
            _finalize(record, model, cfg, out_dir, eval_batches, diverged=True)
            raise RunError(
                f"loss diverged (non-finite) at step {step}", step=step, record=record
            )

        tape.backward(total)
        for p in params.values():
            if p.grad is not None:
                p.data -= cfg.optim.lr * p.grad
            p.zero_grad()

        if (step + 1) in eval_points:
            ev = evaluate(model, cfg, eval_batches)
            record.phase_evals.append(
                PhaseEval(
                    step=step + 1,
                    eval_loss=ev.loss,
                    eval_accuracy=ev.accuracy,
                    layer_loads=tuple(r.avg_true_load for r in ev.reports),
                    layer_bypass=tuple(r.bypass_rate for r in ev.reports),
                )
            )

    _finalize(record, model, cfg, out_dir, eval_batches, diverged=False)
    return record


def _finalize(record, model, cfg, out_dir, eval_batches, diverged: bool):
    """Fill in the final evaluation and write the checkpoint; called on
    normal completion and on early stop alike."""
    if record.phase_evals and not diverged:
        last = record.phase_evals[-1]
        record.final_accuracy = last.eval_accuracy
        record.final_eval_loss = last.eval_loss
    else:
        try:
            ev = evaluate(model, cfg, eval_batches)
            record.final_accuracy = ev.accuracy
            record.final_eval_loss = ev.loss
        except Exception:
            pass  # divergence can poison the forward pass; report what we have
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "checkpoint.txt")
        write_checkpoint(path, model.params(), config_to_text(cfg))
        record.checkpoint_path = path


@dataclass(frozen=True)
class ComparisonResult:
    seeds: tuple[int, ...]
    baseline_accuracies: tuple[float, ...]
    adamoe_accuracies: tuple[float, ...]
    baseline_load: float
    adamoe_load: float
    flops_reduction_pct: float
    baseline_records: tuple[RunRecord, ...]
    adamoe_records: tuple[RunRecord, ...]

    def to_text(self) -> str:
        lines = ["[comparison]"]
        for s, b, a in zip(self.seeds, self.baseline_accuracies, self.adamoe_accuracies):
            lines.append(f"seed={s} baseline_accuracy={b!r} adamoe_accuracy={a!r}")
        lines.append(f"baseline_mean_accuracy = {float(np.mean(self.baseline_accuracies))!r}")
        lines.append(f"adamoe_mean_accuracy = {float(np.mean(self.adamoe_accuracies))!r}")
        lines.append(f"baseline_load = {self.baseline_load!r}")
        lines.append(f"adamoe_load = {self.adamoe_load!r}")
        lines.append(f"flops_reduction_pct = {self.flops_reduction_pct!r}")
        return "\n".join(lines) + "\n"


def compare(
    cfg_baseline: ExperimentConfig,
    cfg_adamoe: ExperimentConfig,
    seeds: tuple[int, ...] | None = None,
    fixed_flops: float = 0.0,
    out_dir: str | None = None,
) -> ComparisonResult:
    """Train both configs on identical data streams and report side-by-side
    accuracy, measured load, and the FLOPs saving of the adaptive run."""
    if (
        cfg_baseline.task != cfg_adamoe.task
        or cfg_baseline.model != cfg_adamoe.model
    ):
        raise ConfigError("compare requires matching task and model configs")
    if cfg_baseline.router.n_true != cfg_adamoe.router.n_true:
        raise ConfigError("compare requires the same true-expert architecture")
    if seeds is None:
        if cfg_baseline.optim.seed != cfg_adamoe.optim.seed:
            raise ConfigError("compare requires matched seeds (or an explicit seed list)")
        seeds = (cfg_baseline.optim.seed,)
    seeds = tuple(int(s) for s in seeds)

    import dataclasses as dc

    base_records, ada_records = [], []
    for i, s in enumerate(seeds):
        for cfg, records, tag in (
            (cfg_baseline, base_records, "baseline"),
            (cfg_adamoe, ada_records, "adamoe"),
        ):
            run_cfg = dc.replace(cfg, optim=dc.replace(cfg.optim, seed=s))
            leg_dir = os.path.join(out_dir, f"{tag}_seed{s}") if out_dir else None
            records.append(train(run_cfg, out_dir=leg_dir))

    base_load = float(np.mean([r.phase_evals[-1].mean_load for r in base_records]))
    ada_load = float(np.mean([r.phase_evals[-1].mean_load for r in ada_records]))
    m = cfg_adamoe.model
    account = FlopsAccount(
        per_layer_expert_flops=ffn_expert_flops(m.d_model, m.d_h, m.d_model),
        router_flops=router_flops(m.d_model, cfg_adamoe.router.n_experts),
        fixed_flops=fixed_flops,
    )
    pct = flops_reduction(ada_load, cfg_baseline.router.k, account)
    return ComparisonResult(
        seeds=seeds,
        baseline_accuracies=tuple(r.final_accuracy for r in base_records),
        adamoe_accuracies=tuple(r.final_accuracy for r in ada_records),
        baseline_load=base_load,
        adamoe_load=ada_load,
        flops_reduction_pct=pct,
        baseline_records=tuple(base_records),
        adamoe_records=tuple(ada_records),
    )


@dataclass(frozen=True)
class AnalysisResult:
    reports: tuple[RoutingReport, ...]
    true_count_streams: tuple[tuple[int, ...], ...]  # per layer, per token
    layer_decisions: tuple

    def to_text(self) -> str:
        from .metrics import report_to_text

        lines = [report_to_text(list(self.reports)).rstrip("\n")]
        for i, stream in enumerate(self.true_count_streams):
            lines.append(f"true_counts layer={i} " + ",".join(str(c) for c in stream))
        return "\n".join(lines) + "\n"

    def decision_lines(self, layer: int) -> list[str]:
        return [
            decision_to_line(d, t) for t, d in enumerate(self.layer_decisions[layer])
        ]


def analyze(
    checkpoint_path: str, token_budget: int = 2048, seed: int = 1234
) -> AnalysisResult:
    """Load a checkpoint and report routing behaviour on freshly sampled
    task data: per-layer load/bypass/histograms and per-token true-expert
    counts."""
    if token_budget < 1:
        raise ParameterError("token_budget must be positive")
    tensors, cfg_text = read_checkpoint(checkpoint_path)
    if not cfg_text.strip():
        raise FormatError("checkpoint has no embedded config; cannot rebuild the model")
    cfg = config_from_text(cfg_text)
    model = build_model(cfg)
    load_model_params(model, tensors)
    task = make_task(cfg)
    rng = np.random.default_rng([seed, 3])
    per_batch = cfg.optim.batch_size * cfg.task.seq_len
    batches = [
        task.sample(rng, cfg.optim.batch_size)
        for _ in range(max(1, -(-token_budget // per_batch)))
    ]
    ev = evaluate(model, cfg, batches)
    streams = tuple(
        tuple(d.true_count for d in decisions) for decisions in ev.layer_decisions
    )
    return AnalysisResult(
        reports=ev.reports, true_count_streams=streams, layer_decisions=ev.layer_decisions
    )
