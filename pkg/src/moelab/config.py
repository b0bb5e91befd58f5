"""Experiment configuration: dataclasses, the key = value config-file
grammar, and flag overrides.

Config files are INI-style sections of `key = value` pairs::

    [task]
    kind = copy_memory        ; copy_memory | modular_addition | char_lm
    seq_len = 8
    lag = 1                   ; copy_memory only
    corpus = corpus.txt       ; char_lm only

    [model]
    layers = 2
    d_model = 16
    d_h = 32
    vocab = 8

    [router]
    n_true = 4
    n_null = 4
    k = 2
    null_kind = zero          ; zero | identity
    normalization = true_only ; true_only | all_selected
    variant = topk            ; topk | topp
    top_p = 0.5               ; topp only

    [schedule]
    phases = 300:0.02 300:0.0001

    [optimizer]
    lr = 0.5
    steps = 600               ; defaults to the schedule's total span
    batch_size = 8
    seed = 0
    log_every = 10

    [loss]
    reduction = sum           ; sum | mean (over layers)

Every key has a default; an empty file is a valid experiment.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass

from .errors import ConfigError, MoeLabError
from .losses import AnnealSchedule
from .routing import Normalization, NullKind, RouterConfig, RouterVariant

TASK_KINDS = ("copy_memory", "modular_addition", "char_lm")
REDUCTIONS = ("sum", "mean")


@dataclass(frozen=True)
class TaskConfig:
    kind: str = "copy_memory"
    seq_len: int = 8
    lag: int = 1
    corpus: str | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; pick from {TASK_KINDS}")
        if self.seq_len < 1:
            raise ConfigError("seq_len must be positive")
        if self.lag < 0:
            raise ConfigError("lag must be >= 0")
        if self.kind == "char_lm" and not self.corpus:
            raise ConfigError("char_lm task needs a corpus path")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    d_model: int = 16
    d_h: int = 32
    vocab: int = 8

    def __post_init__(self):
        if min(self.layers, self.d_model, self.d_h, self.vocab) < 1:
            raise ConfigError("model dimensions must be positive")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.5
    steps: int | None = None  # None: run the schedule's total span
    batch_size: int = 8
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.steps is not None and self.steps < 1:
            raise ConfigError("steps must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.log_every < 1:
            raise ConfigError("log_every must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskConfig
    model: ModelConfig
    router: RouterConfig
    schedule: AnnealSchedule
    optim: OptimConfig
    loss_reduction: str = "sum"

    def __post_init__(self):
        if self.loss_reduction not in REDUCTIONS:
            raise ConfigError(
                f"loss_reduction must be one of {REDUCTIONS}, got {self.loss_reduction!r}"
            )

    @property
    def steps(self) -> int:
        return self.optim.steps if self.optim.steps is not None else self.schedule.total_steps


def default_config() -> ExperimentConfig:
    return ExperimentConfig(
        task=TaskConfig(),
        model=ModelConfig(),
        router=RouterConfig(n_true=4, n_null=4, k=2),
        schedule=AnnealSchedule(((300, 0.02), (300, 0.0001))),
        optim=OptimConfig(),
    )


def _parse_phases(text: str) -> AnnealSchedule:
    phases = []
    for part in text.split():
        span, _, alpha = part.partition(":")
        try:
            phases.append((int(span), float(alpha)))
        except ValueError:
            raise ConfigError(f"bad schedule phase {part!r}; expected span:alpha") from None
    return AnnealSchedule(tuple(phases))


def _phases_text(schedule: AnnealSchedule) -> str:
    return " ".join(f"{s}:{a!r}" for s, a in schedule.phases)


def _get(parser, section, key, cast, default):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key).strip()
    try:
        return cast(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from None


def config_from_text(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    known = {"task", "model", "router", "schedule", "optimizer", "loss"}
    unknown = set(parser.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    try:
        task = TaskConfig(
            kind=_get(parser, "task", "kind", str, "copy_memory"),
            seq_len=_get(parser, "task", "seq_len", int, 8),
            lag=_get(parser, "task", "lag", int, 1),
            corpus=_get(parser, "task", "corpus", str, None),
        )
        model = ModelConfig(
            layers=_get(parser, "model", "layers", int, 2),
            d_model=_get(parser, "model", "d_model", int, 16),
            d_h=_get(parser, "model", "d_h", int, 32),
            vocab=_get(parser, "model", "vocab", int, 8),
        )
        router = RouterConfig(
            n_true=_get(parser, "router", "n_true", int, 4),
            n_null=_get(parser, "router", "n_null", int, 4),
            k=_get(parser, "router", "k", int, 2),
            null_kind=NullKind(_get(parser, "router", "null_kind", str, "zero")),
            normalization=Normalization(
                _get(parser, "router", "normalization", str, "true_only")
            ),
            variant=RouterVariant(_get(parser, "router", "variant", str, "topk")),
            top_p=_get(parser, "router", "top_p", float, None),
        )
        schedule = (
            _parse_phases(parser.get("schedule", "phases"))
            if parser.has_option("schedule", "phases")
            else AnnealSchedule(((300, 0.02), (300, 0.0001)))
        )
        optim = OptimConfig(
            lr=_get(parser, "optimizer", "lr", float, 0.5),
            steps=_get(parser, "optimizer", "steps", int, None),
            batch_size=_get(parser, "optimizer", "batch_size", int, 8),
            seed=_get(parser, "optimizer", "seed", int, 0),
            log_every=_get(parser, "optimizer", "log_every", int, 10),
        )
        reduction = _get(parser, "loss", "reduction", str, "sum")
        return ExperimentConfig(task, model, router, schedule, optim, reduction)
    except ValueError as exc:  # bad enum value
        raise ConfigError(str(exc)) from exc
    except MoeLabError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return config_from_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def config_to_text(cfg: ExperimentConfig) -> str:
    lines = [
        "[task]",
        f"kind = {cfg.task.kind}",
        f"seq_len = {cfg.task.seq_len}",
        f"lag = {cfg.task.lag}",
    ]
    if cfg.task.corpus:
        lines.append(f"corpus = {cfg.task.corpus}")
    lines += [
        "[model]",
        f"layers = {cfg.model.layers}",
        f"d_model = {cfg.model.d_model}",
        f"d_h = {cfg.model.d_h}",
        f"vocab = {cfg.model.vocab}",
        "[router]",
        f"n_true = {cfg.router.n_true}",
        f"n_null = {cfg.router.n_null}",
        f"k = {cfg.router.k}",
        f"null_kind = {cfg.router.null_kind.value}",
        f"normalization = {cfg.router.normalization.value}",
        f"variant = {cfg.router.variant.value}",
    ]
    if cfg.router.top_p is not None:
        lines.append(f"top_p = {cfg.router.top_p!r}")
    lines += [
        "[schedule]",
        f"phases = {_phases_text(cfg.schedule)}",
        "[optimizer]",
        f"lr = {cfg.optim.lr!r}",
    ]
    if cfg.optim.steps is not None:
        lines.append(f"steps = {cfg.optim.steps}")
    lines += [
        f"batch_size = {cfg.optim.batch_size}",
        f"seed = {cfg.optim.seed}",
        f"log_every = {cfg.optim.log_every}",
        "[loss]",
        f"reduction = {cfg.loss_reduction}",
    ]
    return "\n".join(lines) + "\n"


def apply_overrides(
    cfg: ExperimentConfig,
    m: int | None = None,
    k: int | None = None,
    alpha1: float | None = None,
    alpha2: float | None = None,
    seed: int | None = None,
    steps: int | None = None,
) -> ExperimentConfig:
    """Apply CLI flag overrides, returning a new config.

    --alpha2 on a single-phase schedule splits the span into two equal
    halves; on a multi-phase schedule it replaces the second phase's alpha.
    """
    try:
        router = cfg.router
        if m is not None or k is not None:
            router = dataclasses.replace(
                router,
                n_null=router.n_null if m is None else m,
                k=router.k if k is None else k,
            )
        schedule = cfg.schedule
        if alpha1 is not None or alpha2 is not None:
            phases = list(schedule.phases)
            if alpha2 is not None and len(phases) == 1:
                span = phases[0][0]
                phases = [(span - span // 2, phases[0][1]), (span // 2, phases[0][1])]
            if alpha1 is not None:
                phases[0] = (phases[0][0], alpha1)
            if alpha2 is not None:
                phases[1] = (phases[1][0], alpha2)
            schedule = AnnealSchedule(tuple(phases))
        optim = cfg.optim
        if seed is not None or steps is not None:
            optim = dataclasses.replace(
                optim,
                seed=optim.seed if seed is None else seed,
                steps=optim.steps if steps is None else steps,
            )
        return dataclasses.replace(cfg, router=router, schedule=schedule, optim=optim)
    except MoeLabError as exc:
        raise ConfigError(str(exc)) from exc
