"""Experiment configuration: a strict YAML key tree.

Unknown keys are errors. Every value is validated, and the relevant
dataclasses are built once at load time, so a bad config fails before any
training starts. ``init`` and ``objective`` may each be a single mapping or a
list; their cross product defines the cells of one experiment.

Layout (defaults in parentheses)::

    mode: TASK_SPECIFIC | TASK_AGNOSTIC | FINETUNE
    output: <dir>
    data:
      task: KEYWORD | PARITY | PAIR_MATCH | TSV
      n (2000), vocab_size (200), seed (0), min_count (2), metric (ACC),
      max_seq_len (derived), min_len, max_len, trigger, marked,
      overlap_k, content_words, content_per_sentence, dev_fraction
      train, dev, text_a (sentence), text_b, label (label), name   # TSV only
    teacher:
      num_layers, hidden_dim, num_heads, ffn_dim, init_std (0.02),
      epochs (20), lr (2e-3), batch_size (32), seed (0),
      min_accuracy (0.0), checkpoint (optional existing .npz)
    student:
      num_layers, hidden_dim/num_heads/ffn_dim/init_std (teacher's)
    init:        # mapping or list of mappings
      strategy (EVERY_K), layers, copy_embeddings, name
    objective:   # mapping or list of mappings
      terms, t (1.0), alpha (0.5), tau (0.1), scale_pred_by_t2 (true), name
    cells:       # optional [objective label, init label] pairs; default all
    recipe:
      seeds ([1, 2, 3, 4]), stage1_epochs (3), stage2_epochs (3), epochs (3),
      lr (5e-4), batch_size (32), warmup_fraction (0.06),
      weight_decay (0.01), grad_clip (0.0), mask_rate (0.15),
      max_steps, finetune_epochs (3), finetune_lr (lr)
"""

from __future__ import annotations

import difflib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from .data import SynthParams, TaskKind, TsvSchema
from .errors import ConfigInvalid, DistillError
from .evaluation import MetricKind
from .initmap import Mode, Strategy, build_layer_map
from .objectives import DISTILLATION_TERMS, INTERMEDIATE_TERMS, ObjectiveSpec, Term


@dataclass(frozen=True)
class DataConfig:
    task: str
    n: int = 2000
    vocab_size: int = 200
    seed: int = 0
    min_count: int = 2
    metric: str = "ACC"
    max_seq_len: int | None = None
    synth: SynthParams = SynthParams()
    train: str | None = None
    dev: str | None = None
    schema: TsvSchema = TsvSchema()
    name: str | None = None

    @property
    def is_pair(self) -> bool:
        if self.task == "TSV":
            return self.schema.text_b is not None
        return self.task == TaskKind.PAIR_MATCH.value

    @property
    def task_name(self) -> str:
        if self.name:
            return self.name
        if self.task == "TSV":
            return Path(self.train or "tsv").stem
        return self.task.lower()


@dataclass(frozen=True)
class ArchConfig:
    num_layers: int
    hidden_dim: int
    num_heads: int
    ffn_dim: int
    init_std: float = 0.02


@dataclass(frozen=True)
class TeacherConfig:
    arch: ArchConfig
    epochs: int = 20
    lr: float = 2e-3
    batch_size: int = 32
    seed: int = 0
    min_accuracy: float = 0.0
    checkpoint: str | None = None


@dataclass(frozen=True)
class InitConfig:
    strategy: Strategy = Strategy.EVERY_K
    layers: tuple[int, ...] | None = None
    copy_embeddings: bool | None = None
    name: str | None = None


@dataclass(frozen=True)
class ObjectiveConfig:
    terms: frozenset[Term]
    t: float = 1.0
    alpha: float = 0.5
    tau: float = 0.1
    scale_pred_by_t2: bool = True
    name: str | None = None

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        order = list(Term)
        return "+".join(t.value for t in sorted(self.terms, key=order.index))

    @property
    def distills(self) -> bool:
        return bool(self.terms & DISTILLATION_TERMS)

    def spec(self, layer_pairs=()) -> ObjectiveSpec:
        return ObjectiveSpec(self.terms, self.t, self.alpha, self.tau, tuple(layer_pairs), self.scale_pred_by_t2)


@dataclass(frozen=True)
class RecipeConfig:
    seeds: tuple[int, ...] = (1, 2, 3, 4)
    stage1_epochs: int = 3
    stage2_epochs: int = 3
    epochs: int = 3
    lr: float = 5e-4
    batch_size: int = 32
    warmup_fraction: float = 0.06
    weight_decay: float = 0.01
    grad_clip: float = 0.0
    mask_rate: float = 0.15
    max_steps: int | None = None
    finetune_epochs: int = 3
    finetune_lr: float | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    mode: Mode
    data: DataConfig
    teacher: TeacherConfig
    student: ArchConfig
    inits: tuple[InitConfig, ...]
    objectives: tuple[ObjectiveConfig, ...]
    recipe: RecipeConfig
    output: str
    cells: tuple[tuple[str, str], ...] | None = None
    source: dict = field(default_factory=dict, compare=False, repr=False)

    def cell_list(self) -> list[tuple[ObjectiveConfig, InitConfig]]:
        """(objective, init) pairs to run, in config order."""
        pairs = [(o, i) for o in self.objectives for i in self.inits]
        if self.cells is None:
            return pairs
        wanted = set(self.cells)
        return [(o, i) for o, i in pairs if (o.label, init_label(self, i)) in wanted]

    @property
    def needs_teacher(self) -> bool:
        cells = self.cell_list()
        copies = any(i.strategy is not Strategy.RANDOM_INIT or i.copy_embeddings for _, i in cells)
        return copies or any(o.distills for o, _ in cells) or self.mode is Mode.TASK_AGNOSTIC


# -- strict parsing helpers -------------------------------------------------


class _Block:
    """A mapping being consumed key by key; leftovers are reported as unknown."""

    def __init__(self, raw: Any, path: str):
        if raw is None:
            raw = {}
        if not isinstance(raw, Mapping):
            raise ConfigInvalid(f"{path or '<root>'}: expected a mapping, got {type(raw).__name__}")
        self.raw = dict(raw)
        self.path = path
        self.seen: set[str] = set()

    def key(self, name: str) -> str:
        return f"{self.path}.{name}" if self.path else name

    def has(self, name: str) -> bool:
        return name in self.raw

    def get(self, name: str, kind, default=None, required: bool = False):
        self.seen.add(name)
        if name not in self.raw or self.raw[name] is None:
            if required:
                raise ConfigInvalid(f"missing required key '{self.key(name)}'")
            return default
        return _coerce(self.raw[name], kind, self.key(name))

    def block(self, name: str, required: bool = False) -> _Block:
        self.seen.add(name)
        if required and name not in self.raw:
            raise ConfigInvalid(f"missing required key '{self.key(name)}'")
        return _Block(self.raw.get(name), self.key(name))

    def finish(self, known: Iterable[str] | None = None) -> None:
        """Reject keys not consumed so far (or, if given, not in ``known``)."""
        allowed = set(known) if known is not None else self.seen
        extra = sorted(set(self.raw) - allowed, key=str)
        if extra:
            where = f" in '{self.path}'" if self.path else ""
            hint = difflib.get_close_matches(str(extra[0]), sorted(allowed), n=1)
            suggestion = f"; did you mean '{self.key(hint[0])}'?" if hint else ""
            raise ConfigInvalid(f"unknown key '{self.key(str(extra[0]))}'{where}{suggestion}")


def _coerce(value, kind, key: str):
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is int:
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if kind is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind is str:
            if not isinstance(value, (str, int, float)) or isinstance(value, bool):
                raise TypeError
            return str(value)
        if kind == "ints":
            if not isinstance(value, (list, tuple)):
                raise TypeError
            return tuple(_coerce(v, int, key) for v in value)
        if kind == "strs":
            if isinstance(value, str):
                value = [value]
            if not isinstance(value, (list, tuple)):
                raise TypeError
            return tuple(_coerce(v, str, key) for v in value)
    except (TypeError, ValueError):
        raise ConfigInvalid(f"key '{key}': cannot read {value!r} as {getattr(kind, '__name__', kind)}") from None
    raise AssertionError(kind)


def _enum(enum_cls, value: str, key: str):
    try:
        return enum_cls(str(value).upper())
    except ValueError:
        options = ", ".join(m.value for m in enum_cls)
        raise ConfigInvalid(f"key '{key}': {value!r} is not one of {options}") from None


def _items(raw, path: str) -> list[tuple[Any, str]]:
    if isinstance(raw, list):
        if not raw:
            raise ConfigInvalid(f"key '{path}': list must not be empty")
        return [(r, f"{path}[{i}]") for i, r in enumerate(raw)]
    return [(raw, path)]


# -- blocks -----------------------------------------------------------------


def _parse_data(b: _Block) -> DataConfig:
    task = str(b.get("task", str, required=True)).upper()
    if task != "TSV":
        _enum(TaskKind, task, b.key("task"))
    defaults = SynthParams()
    synth_keys = ("min_len", "max_len", "trigger", "marked", "overlap_k", "content_words", "content_per_sentence")
    synth = {k: b.get(k, int, getattr(defaults, k)) for k in synth_keys}
    synth["dev_fraction"] = b.get("dev_fraction", float, defaults.dev_fraction)
    schema = TsvSchema(
        text_a=b.get("text_a", str, "sentence"),
        label=b.get("label", str, "label"),
        text_b=b.get("text_b", str, None),
    )
    cfg = DataConfig(
        task=task,
        n=b.get("n", int, 2000),
        vocab_size=b.get("vocab_size", int, 200),
        seed=b.get("seed", int, 0),
        min_count=b.get("min_count", int, 2),
        metric=_enum(MetricKind, b.get("metric", str, "ACC"), b.key("metric")).value,
        max_seq_len=b.get("max_seq_len", int, None),
        synth=SynthParams(**synth),
        train=b.get("train", str, None),
        dev=b.get("dev", str, None),
        schema=schema,
        name=b.get("name", str, None),
    )
    b.finish()
    if task == "TSV" and not (cfg.train and cfg.dev):
        raise ConfigInvalid(f"'{b.key('train')}' and '{b.key('dev')}' are required for TSV data")
    if task != "TSV" and (cfg.train or cfg.dev):
        raise ConfigInvalid(f"'{b.key('train')}'/'{b.key('dev')}' only apply to TSV data")
    if cfg.min_count < 1:
        raise ConfigInvalid(f"key '{b.key('min_count')}' must be >= 1")
    return cfg


def _parse_arch(b: _Block, base: ArchConfig | None = None) -> ArchConfig:
    def pick(name, kind):
        fallback = getattr(base, name) if base is not None else None
        return b.get(name, kind, fallback, required=fallback is None)

    arch = ArchConfig(
        num_layers=b.get("num_layers", int, required=True),
        hidden_dim=pick("hidden_dim", int),
        num_heads=pick("num_heads", int),
        ffn_dim=pick("ffn_dim", int),
        init_std=b.get("init_std", float, base.init_std if base else 0.02),
    )
    for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim"):
        if getattr(arch, name) < 1:
            raise ConfigInvalid(f"key '{b.key(name)}' must be positive")
    if arch.hidden_dim % arch.num_heads:
        raise ConfigInvalid(f"'{b.key('hidden_dim')}' must be divisible by num_heads")
    if arch.init_std <= 0:
        raise ConfigInvalid(f"key '{b.key('init_std')}' must be positive")
    return arch


def _parse_teacher(b: _Block) -> TeacherConfig:
    arch_keys = {"num_layers", "hidden_dim", "num_heads", "ffn_dim", "init_std"}
    arch_block = _Block({k: v for k, v in b.raw.items() if k in arch_keys}, b.path)
    b.seen |= arch_keys
    arch = _parse_arch(arch_block)
    cfg = TeacherConfig(
        arch=arch,
        epochs=b.get("epochs", int, 20),
        lr=b.get("lr", float, 2e-3),
        batch_size=b.get("batch_size", int, 32),
        seed=b.get("seed", int, 0),
        min_accuracy=b.get("min_accuracy", float, 0.0),
        checkpoint=b.get("checkpoint", str, None),
    )
    b.finish()
    if cfg.epochs < 0 or cfg.lr <= 0 or cfg.batch_size < 1:
        raise ConfigInvalid(f"'{b.path}': epochs must be >= 0, lr > 0, batch_size >= 1")
    return cfg


def _parse_init(raw, path: str, teacher_layers: int, student_layers: int) -> InitConfig:
    b = _Block(raw, path)
    strategy = _enum(Strategy, b.get("strategy", str, "EVERY_K"), b.key("strategy"))
    layers = b.get("layers", "ints", None)
    cfg = InitConfig(strategy, layers, b.get("copy_embeddings", bool, None), b.get("name", str, None))
    b.finish()
    if strategy is Strategy.EXPLICIT and layers is None:
        raise ConfigInvalid(f"'{b.key('layers')}' is required for EXPLICIT")
    if strategy is not Strategy.EXPLICIT and layers is not None:
        raise ConfigInvalid(f"'{b.key('layers')}' only applies to EXPLICIT")
    # surface map errors (depth, ordering, divisibility) at load time
    try:
        build_layer_map(strategy, teacher_layers, student_layers, layers, cfg.copy_embeddings)
    except DistillError as exc:
        raise ConfigInvalid(f"'{path}': {exc}") from None
    return cfg


def _parse_objective(raw, path: str) -> ObjectiveConfig:
    b = _Block(raw, path)
    names = b.get("terms", "strs", required=True)
    terms = frozenset(_enum(Term, n.replace("-", "_"), b.key("terms")) for n in names)
    cfg = ObjectiveConfig(
        terms=terms,
        t=b.get("t", float, 1.0),
        alpha=b.get("alpha", float, 0.5),
        tau=b.get("tau", float, 0.1),
        scale_pred_by_t2=b.get("scale_pred_by_t2", bool, True),
        name=b.get("name", str, None),
    )
    b.finish()
    try:
        cfg.spec(layer_pairs=[(1, 1)])
    except DistillError as exc:
        raise ConfigInvalid(f"'{path}': {exc}") from None
    return cfg


def _parse_recipe(b: _Block) -> RecipeConfig:
    cfg = RecipeConfig(
        seeds=b.get("seeds", "ints", (1, 2, 3, 4)),
        stage1_epochs=b.get("stage1_epochs", int, 3),
        stage2_epochs=b.get("stage2_epochs", int, 3),
        epochs=b.get("epochs", int, 3),
        lr=b.get("lr", float, 5e-4),
        batch_size=b.get("batch_size", int, 32),
        warmup_fraction=b.get("warmup_fraction", float, 0.06),
        weight_decay=b.get("weight_decay", float, 0.01),
        grad_clip=b.get("grad_clip", float, 0.0),
        mask_rate=b.get("mask_rate", float, 0.15),
        max_steps=b.get("max_steps", int, None),
        finetune_epochs=b.get("finetune_epochs", int, 3),
        finetune_lr=b.get("finetune_lr", float, None),
    )
    b.finish()
    if not cfg.seeds:
        raise ConfigInvalid(f"'{b.key('seeds')}' must list at least one seed")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigInvalid(f"'{b.key('seeds')}' contains duplicates")
    if not 0.0 < cfg.mask_rate < 1.0:
        raise ConfigInvalid(f"key '{b.key('mask_rate')}' must lie in (0, 1)")
    return cfg


ROOT_KEYS = ("mode", "output", "data", "teacher", "student", "init", "objective", "recipe", "cells")


def parse_config(raw: Mapping, base_dir: Path | str = ".") -> ExperimentConfig:
    """Validate a raw key tree. Relative paths resolve against ``base_dir``."""
    base_dir = Path(base_dir)
    root = _Block(raw, "")
    root.finish(ROOT_KEYS)
    mode = _enum(Mode, root.get("mode", str, "TASK_SPECIFIC"), "mode")
    output = root.get("output", str, required=True)
    data = _parse_data(root.block("data", required=True))
    teacher = _parse_teacher(root.block("teacher", required=True))
    student_block = root.block("student", required=True)
    student = _parse_arch(student_block, base=teacher.arch)
    student_block.finish()
    root.seen |= {"init", "objective", "cells"}
    inits = tuple(
        _parse_init(r, p, teacher.arch.num_layers, student.num_layers)
        for r, p in _items(root.raw.get("init", {}), "init")
    )
    default_objective = {"terms": ["SUPERVISED"]} if mode is Mode.FINETUNE else None
    raw_objective = root.raw.get("objective", default_objective)
    if raw_objective is None:
        raise ConfigInvalid("missing required key 'objective'")
    objectives = tuple(_parse_objective(r, p) for r, p in _items(raw_objective, "objective"))
    recipe = _parse_recipe(root.block("recipe"))
    root.finish()

    if mode is Mode.TASK_SPECIFIC and min(recipe.stage1_epochs, recipe.stage2_epochs) < 1:
        raise ConfigInvalid("recipe.stage1_epochs and recipe.stage2_epochs must be > 0 for TASK_SPECIFIC")
    o_labels = [o.label for o in objectives]
    i_labels = [_init_label(i, teacher.arch.num_layers, student.num_layers) for i in inits]
    if len(set(o_labels)) != len(o_labels) or len(set(i_labels)) != len(i_labels):
        raise ConfigInvalid("objective and init entries must have distinct labels; set 'name' to disambiguate")
    cells = _parse_cells(raw.get("cells"), o_labels, i_labels)
    for o_label, i_label in cells or [(a, b) for a in o_labels for b in i_labels]:
        o = objectives[o_labels.index(o_label)]
        i = inits[i_labels.index(i_label)]
        if o.terms & INTERMEDIATE_TERMS and mode is Mode.TASK_SPECIFIC and i.strategy is Strategy.RANDOM_INIT:
            raise ConfigInvalid(
                f"cell ({o_label}, {i_label}): intermediate terms need a layer map, and RANDOM_INIT has none"
            )

    def resolve(p):
        return None if p is None else str((base_dir / p) if not Path(p).is_absolute() else Path(p))

    data = DataConfig(**{**data.__dict__, "train": resolve(data.train), "dev": resolve(data.dev)})
    teacher = TeacherConfig(**{**teacher.__dict__, "checkpoint": resolve(teacher.checkpoint)})
    for p in (data.train, data.dev, teacher.checkpoint):
        if p is not None and not Path(p).exists():
            raise ConfigInvalid(f"referenced file does not exist: {p}")
    return ExperimentConfig(mode, data, teacher, student, inits, objectives, recipe, resolve(output), cells, dict(raw))


def _parse_cells(raw, o_labels: list[str], i_labels: list[str]):
    if raw is None:
        return None
    if not isinstance(raw, list) or not raw:
        raise ConfigInvalid("key 'cells': expected a non-empty list of [objective, init] pairs")
    out = []
    for k, pair in enumerate(raw):
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise ConfigInvalid(f"key 'cells[{k}]': expected [objective, init]")
        o_label, i_label = str(pair[0]), str(pair[1])
        if o_label not in o_labels:
            raise ConfigInvalid(f"key 'cells[{k}]': unknown objective {o_label!r} (have {', '.join(o_labels)})")
        if i_label not in i_labels:
            raise ConfigInvalid(f"key 'cells[{k}]': unknown init {i_label!r} (have {', '.join(i_labels)})")
        out.append((o_label, i_label))
    if len(set(out)) != len(out):
        raise ConfigInvalid("key 'cells': duplicate cell")
    return tuple(out)


def _init_label(init: InitConfig, teacher_layers: int, student_layers: int) -> str:
    if init.name:
        return init.name
    return build_layer_map(init.strategy, teacher_layers, student_layers, init.layers, init.copy_embeddings).label


def init_label(config: ExperimentConfig, init: InitConfig) -> str:
    return _init_label(init, config.teacher.arch.num_layers, config.student.num_layers)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigInvalid(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"config is not valid YAML: {exc}") from None
    return parse_config(raw or {}, path.parent)
