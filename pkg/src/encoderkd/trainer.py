"""Training procedures: two-stage task-specific distillation, task-agnostic
(MLM) distillation, plain fine-tuning and fine-tuning grid search."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from . import objectives as O
from .data import Dataset, EncodedSplit, Vocab, encode_examples, mask_tokens, pad_batch
from .errors import (
    ConfigInvalid,
    EmptyCorpus,
    MissingTeacher,
    NoDevSplit,
    StepOutOfRange,
    UntrainedTeacher,
)
from .evaluation import MetricKind, metric
from .initmap import Mode
from .model import EncoderModel, classify, forward_with_trace, mlm_logits
from .objectives import ObjectiveSpec, ProjectionParams, Term
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingRecipe:
    mode: Mode = Mode.TASK_SPECIFIC
    stage1_epochs: int = 10
    stage2_epochs: int = 10
    epochs: int = 10  # single-stage modes (task-agnostic, fine-tuning)
    max_steps: int | None = None
    batch_size: int = 32
    peak_lr: float = 5e-4
    warmup_fraction: float = 0.06
    weight_decay: float = 0.01
    adam_betas: tuple[float, float] = (0.9, 0.99)
    adam_eps: float = 1e-6
    grad_clip: float = 0.0
    seed: int = 0
    objective: ObjectiveSpec | None = None
    mask_rate: float = 0.15
    min_teacher_accuracy: float = 0.0
    schedule: str = "LINEAR_DECAY"

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.mode is Mode.TASK_SPECIFIC and (self.stage1_epochs <= 0 or self.stage2_epochs <= 0):
            raise ConfigInvalid("task-specific distillation needs both stage epoch counts > 0")
        if min(self.stage1_epochs, self.stage2_epochs, self.epochs) < 0:
            raise ConfigInvalid("epoch counts must be nonnegative")
        if self.batch_size < 1:
            raise ConfigInvalid("batch_size must be positive")
        if self.peak_lr <= 0 and self.peak_lr != 0.0:
            raise ConfigInvalid("peak_lr must be nonnegative")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigInvalid("warmup_fraction must lie in [0, 1]")
        if self.grad_clip < 0:
            raise ConfigInvalid("grad_clip must be nonnegative")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigInvalid("max_steps must be positive when set")
        if self.schedule != "LINEAR_DECAY":
            raise ConfigInvalid(f"unsupported schedule {self.schedule!r}")


@dataclass
class StageResult:
    name: str
    epoch_losses: dict[str, list[float]] = field(default_factory=dict)
    steps: int = 0
    seconds: float = 0.0
    seed: int = 0
    lrs: list[float] = field(default_factory=list)
    checkpoint: str | None = None

    @property
    def epochs(self) -> int:
        return len(next(iter(self.epoch_losses.values()), []))


# -- schedule ---------------------------------------------------------------


@dataclass(frozen=True)
class LinearSchedule:
    """Linear warmup from 0 to ``peak_lr``, then linear decay to 0 at ``total_steps``."""

    peak_lr: float
    total_steps: int
    warmup_fraction: float = 0.06

    @property
    def warmup_steps(self) -> int:
        return min(self.total_steps, int(round(self.warmup_fraction * self.total_steps)))

    def lr_at(self, step: int) -> float:
        n, w = self.total_steps, self.warmup_steps
        if not 0 <= step <= n:
            raise StepOutOfRange(f"step {step} outside [0, {n}]")
        if step < w:
            return self.peak_lr * step / w
        if n == w:
            return self.peak_lr
        return self.peak_lr * (n - step) / (n - w)


def lr_at(step: int, recipe: TrainingRecipe, total_steps: int | None = None) -> float:
    total = total_steps if total_steps is not None else recipe.max_steps
    if total is None:
        raise ConfigInvalid("lr_at needs total_steps or recipe.max_steps")
    return LinearSchedule(recipe.peak_lr, total, recipe.warmup_fraction).lr_at(step)


# -- optimiser --------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay.

    Decay applies to matrices only (not biases, LN parameters). Parameters
    whose ``grad`` is None are skipped entirely, so untouched tensors never move.
    """

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.99), eps: float = 1e-6, weight_decay: float = 0.01):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def clip_grad_norm(self, max_norm: float) -> float:
        grads = [p.grad for p in self.params if p.grad is not None]
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / (norm + 1e-12)
            for p in self.params:
                if p.grad is not None:
                    p.grad = p.grad * scale
        return norm

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            if self.weight_decay and p.ndim >= 2:
                p.data = p.data * (1.0 - lr * self.weight_decay)
            p.data = p.data - lr * update


# -- batches ----------------------------------------------------------------


@dataclass
class Batch:
    tokens: np.ndarray
    mask: np.ndarray
    labels: np.ndarray | None = None
    mlm_positions: np.ndarray | None = None
    mlm_targets: np.ndarray | None = None

    @property
    def is_mlm(self) -> bool:
        return self.mlm_positions is not None


@dataclass
class TaskData:
    train: EncodedSplit
    dev: EncodedSplit
    metric: MetricKind = MetricKind.ACC

    @classmethod
    def from_dataset(cls, ds: Dataset, vocab: Vocab, max_len: int, kind: MetricKind | str = MetricKind.ACC) -> TaskData:
        return cls(encode_examples(ds.train, vocab, max_len), encode_examples(ds.dev, vocab, max_len), MetricKind(kind))


def iterate_batches(split: EncodedSplit, batch_size: int, rng: np.random.Generator | None) -> Iterator[Batch]:
    order = np.arange(len(split)) if rng is None else rng.permutation(len(split))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        tokens, mask = pad_batch([split.ids[i] for i in idx])
        yield Batch(tokens, mask, split.labels[idx])


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def predict(model: EncoderModel, split: EncodedSplit, batch_size: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for batch in iterate_batches(split, batch_size, None):
            logits = classify(model, forward_with_trace(model, batch.tokens, batch.mask))
            out.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: EncoderModel, split: EncodedSplit, kind: MetricKind | str = MetricKind.ACC) -> float:
    return metric(kind, predict(model, split), split.labels)


# -- one step ---------------------------------------------------------------


def compute_losses(
    student: EncoderModel,
    teacher: EncoderModel | None,
    batch: Batch,
    spec: ObjectiveSpec,
    projections: ProjectionParams | None = None,
) -> dict[Term, Tensor]:
    if spec.uses_teacher and teacher is None:
        raise MissingTeacher(f"terms {sorted(t.value for t in spec.active)} need a teacher")
    trace_s = forward_with_trace(student, batch.tokens, batch.mask)
    trace_t = None
    if spec.uses_teacher:
        with no_grad():
            trace_t = forward_with_trace(teacher, batch.tokens, batch.mask)

    losses: dict[Term, Tensor] = {}
    needs_output = Term.PRED in spec.active or Term.SUPERVISED in spec.active
    if needs_output:
        if batch.is_mlm:
            z_s = mlm_logits(student, trace_s, batch.mlm_positions)
        else:
            z_s = classify(student, trace_s)
        if Term.SUPERVISED in spec.active:
            targets = batch.mlm_targets if batch.is_mlm else batch.labels
            losses[Term.SUPERVISED] = O.supervised_loss(z_s, targets)
        if Term.PRED in spec.active:
            with no_grad():
                z_t = mlm_logits(teacher, trace_t, batch.mlm_positions) if batch.is_mlm else classify(teacher, trace_t)
            losses[Term.PRED] = O.pred_loss(z_t, z_s, spec.temperature, spec.scale_pred_by_t2)
    if spec.intermediate:
        losses.update(O.intermediate_losses(spec, trace_s, trace_t, projections))
    return losses


def train_step(
    student: EncoderModel,
    teacher: EncoderModel | None,
    batch: Batch,
    spec: ObjectiveSpec,
    optimizer: AdamW,
    lr: float,
    projections: ProjectionParams | None = None,
    grad_clip: float = 0.0,
) -> dict[str, float]:
    """One optimiser step on the combined loss; returns each term's value and the total."""
    optimizer.zero_grad()
    student.zero_grad()
    losses = compute_losses(student, teacher, batch, spec, projections)
    total = O.combine(spec, losses)
    total.backward()
    if grad_clip > 0:
        optimizer.clip_grad_norm(grad_clip)
    optimizer.step(lr)
    out = {t.value: float(v.item()) for t, v in sorted(losses.items(), key=lambda kv: kv[0].value)}
    out["total"] = float(total.item())
    return out


# -- stages -----------------------------------------------------------------


def _optimizer(params: Sequence[Tensor], recipe: TrainingRecipe) -> AdamW:
    return AdamW(params, recipe.adam_betas, recipe.adam_eps, recipe.weight_decay)


def run_stage(
    name: str,
    student: EncoderModel,
    teacher: EncoderModel | None,
    batches_for_epoch,
    n_batches: int,
    epochs: int,
    spec: ObjectiveSpec,
    params: Sequence[Tensor],
    recipe: TrainingRecipe,
    projections: ProjectionParams | None = None,
) -> StageResult:
    """Generic epoch loop; ``batches_for_epoch(epoch)`` yields that epoch's batches."""
    total_steps = epochs * n_batches
    if recipe.max_steps is not None:
        total_steps = min(total_steps, recipe.max_steps)
    schedule = LinearSchedule(recipe.peak_lr, max(total_steps, 1), recipe.warmup_fraction)
    opt = _optimizer(params, recipe)
    result = StageResult(name, seed=recipe.seed)
    start = time.perf_counter()
    step = 0
    for epoch in range(epochs):
        if step >= total_steps:
            break
        sums: dict[str, float] = {}
        count = 0
        for batch in batches_for_epoch(epoch):
            if step >= total_steps:
                break
            lr = schedule.lr_at(step + 1)
            values = train_step(student, teacher, batch, spec, opt, lr, projections, recipe.grad_clip)
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
            step += 1
            result.lrs.append(lr)
        for k, v in sums.items():
            result.epoch_losses.setdefault(k, []).append(v / max(count, 1))
        log.debug("%s epoch %d: %s", name, epoch + 1, {k: v / max(count, 1) for k, v in sums.items()})
    result.steps = step
    result.seconds = time.perf_counter() - start
    return result


def _epoch_batches(split: EncodedSplit, batch_size: int, seed: int, stage: int):
    def batches(epoch: int):
        return iterate_batches(split, batch_size, np.random.default_rng([seed, stage, epoch]))

    return batches


def run_finetune(model: EncoderModel, data: TaskData, recipe: TrainingRecipe, name: str = "finetune") -> StageResult:
    """Supervised cross-entropy training of every model parameter."""
    spec = ObjectiveSpec(frozenset({Term.SUPERVISED}))
    n_batches = steps_per_epoch(len(data.train), recipe.batch_size)
    return run_stage(
        name, model, None, _epoch_batches(data.train, recipe.batch_size, recipe.seed, 0),
        n_batches, recipe.epochs, spec, model.parameters(), recipe,
    )  # fmt: skip


def run_task_specific(
    teacher: EncoderModel, student: EncoderModel, data: TaskData, recipe: TrainingRecipe
) -> tuple[StageResult, StageResult]:
    """Intermediate-layer distillation, then prediction-layer distillation.

    Stage 1 optimises only the intermediate terms of ``recipe.objective``
    (student body and projections; heads untouched). Stage 2 optimises the
    prediction-layer loss, plus the supervised term when it is active, over
    the student only. Objectives without intermediate terms skip stage 1.
    """
    spec = recipe.objective
    if spec is None:
        raise ConfigInvalid("task-specific distillation needs an objective")
    if recipe.min_teacher_accuracy > 0:
        acc = evaluate(teacher, data.train)
        if acc < recipe.min_teacher_accuracy:
            raise UntrainedTeacher(f"teacher train accuracy {acc:.3f} < floor {recipe.min_teacher_accuracy}")
    bs = recipe.batch_size
    n_batches = steps_per_epoch(len(data.train), bs)

    stage1 = StageResult("stage1", seed=recipe.seed)
    if spec.intermediate:
        spec1 = spec.with_terms(spec.intermediate)
        projections = ProjectionParams.for_spec(spec1, student.config.hidden_dim, teacher.config.hidden_dim, recipe.seed)
        heads = set(student.head_parameter_names())
        body = [p for n, p in student.named_parameters() if n not in heads]
        stage1 = run_stage(
            "stage1", student, teacher, _epoch_batches(data.train, bs, recipe.seed, 1),
            n_batches, recipe.stage1_epochs, spec1, body + projections.parameters(), recipe, projections,
        )  # fmt: skip

    terms = {Term.PRED} | ({Term.SUPERVISED} & spec.active)
    spec2 = spec.with_terms(terms)
    stage2 = run_stage(
        "stage2", student, teacher, _epoch_batches(data.train, bs, recipe.seed, 2),
        n_batches, recipe.stage2_epochs, spec2, student.parameters(), recipe,
    )  # fmt: skip
    return stage1, stage2


def run_task_agnostic(
    teacher: EncoderModel,
    student: EncoderModel,
    corpus: Sequence[np.ndarray],
    recipe: TrainingRecipe,
) -> StageResult:
    """Single-stage distillation on masked text, supervising only the last-layer pair.

    SUPERVISED is the MLM loss on masked positions and PRED the soft
    cross-entropy between teacher and student MLM logits.
    """
    if not len(corpus):
        raise EmptyCorpus("task-agnostic distillation needs a non-empty corpus")
    spec = recipe.objective
    if spec is None:
        raise ConfigInvalid("task-agnostic distillation needs an objective")
    pairs = [(teacher.config.num_layers, student.config.num_layers)]
    spec = spec.with_pairs(pairs)
    projections = ProjectionParams.for_spec(spec, student.config.hidden_dim, teacher.config.hidden_dim, recipe.seed)
    bs = recipe.batch_size
    corpus = list(corpus)

    heads = set(student.head_parameter_names()) - {"mlm.weight", "mlm.bias"}
    params = [p for n, p in student.named_parameters() if n not in heads] + projections.parameters()
    return run_stage(
        "task_agnostic", student, teacher, _mlm_batches(corpus, bs, recipe.mask_rate, recipe.seed, 3),
        steps_per_epoch(len(corpus), bs),
        recipe.epochs, spec, params, recipe, projections,
    )  # fmt: skip


def run_mlm_pretraining(model: EncoderModel, corpus: Sequence[np.ndarray], recipe: TrainingRecipe) -> StageResult:
    """Plain masked-language-model training (pre-trains desk-scale teachers)."""
    if not len(corpus):
        raise EmptyCorpus("MLM training needs a non-empty corpus")
    spec = ObjectiveSpec(frozenset({Term.SUPERVISED}))
    corpus = list(corpus)
    bs = recipe.batch_size
    params = [p for n, p in model.named_parameters() if not n.startswith("cls.")]
    return run_stage(
        "mlm", model, None, _mlm_batches(corpus, bs, recipe.mask_rate, recipe.seed, 4),
        steps_per_epoch(len(corpus), bs), recipe.epochs, spec, params, recipe,
    )  # fmt: skip


def _mlm_batches(corpus: list[np.ndarray], batch_size: int, rate: float, seed: int, stage: int):
    def batches(epoch: int):
        rng = np.random.default_rng([seed, stage, epoch])
        order = rng.permutation(len(corpus))
        for start in range(0, len(order), batch_size):
            tokens, keep = pad_batch([corpus[i] for i in order[start : start + batch_size]])
            masked, pos, targets = mask_tokens(tokens, keep, rate, rng)
            yield Batch(masked, keep, None, pos, targets)

    return batches


# -- grid search ------------------------------------------------------------


@dataclass
class GridRun:
    lr: float
    batch_size: int
    dev_metric: float
    state: dict[str, np.ndarray] | None = None
    result: StageResult | None = None


@dataclass
class GridResult:
    best: GridRun
    runs: list[GridRun]


def select_best(runs: Sequence[GridRun]) -> GridRun:
    """Highest dev metric; ties go to the lower learning rate, then the smaller batch."""
    return min(runs, key=lambda r: (-r.dev_metric, r.lr, r.batch_size))


def finetune_grid_search(
    model: EncoderModel,
    data: TaskData,
    lr_grid: Sequence[float],
    batch_grid: Sequence[int],
    epochs: int,
    recipe: TrainingRecipe | None = None,
    keep_states: bool = False,
) -> GridResult:
    """Fine-tune a fresh copy of ``model`` for every (lr, batch) cell and keep the best on dev."""
    if not lr_grid or not batch_grid:
        raise ConfigInvalid("grid search needs non-empty learning-rate and batch grids")
    if not len(data.dev):
        raise NoDevSplit("grid search selects on the dev split, which is empty")
    base = recipe or TrainingRecipe(mode=Mode.FINETUNE)
    runs = []
    for lr in lr_grid:
        for bs in batch_grid:
            cell = replace(base, mode=Mode.FINETUNE, peak_lr=float(lr), batch_size=int(bs), epochs=int(epochs))
            candidate = model.copy()
            result = run_finetune(candidate, data, cell, name=f"finetune lr={lr} bs={bs}")
            score = evaluate(candidate, data.dev, data.metric)
            runs.append(GridRun(float(lr), int(bs), score, candidate.state_dict() if keep_states else None, result))
    return GridResult(select_best(runs), runs)
