"""Teacher-to-student layer maps and student initialisation.

Layer indices are 1-based throughout, so a map for a 3-layer student drawn
from every 4th layer of a 12-layer teacher reads ``(4, 8, 12)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyMapForTaskSpecific,
    IndivisibleDepth,
    InvalidExplicitList,
    MapLengthMismatch,
)
from .model import EMBEDDING_BLOCKS, LAYER_BLOCKS, EncoderModel


class Strategy(str, enum.Enum):
    EVERY_K = "EVERY_K"
    EXPLICIT = "EXPLICIT"
    FIRST_K = "FIRST_K"
    RANDOM_INIT = "RANDOM_INIT"


class Mode(str, enum.Enum):
    TASK_SPECIFIC = "TASK_SPECIFIC"
    TASK_AGNOSTIC = "TASK_AGNOSTIC"
    FINETUNE = "FINETUNE"


@dataclass(frozen=True)
class LayerMap:
    teacher_layers: tuple[int, ...]
    strategy: Strategy
    copy_embeddings: bool = True

    def __len__(self) -> int:
        return len(self.teacher_layers)

    @property
    def label(self) -> str:
        if self.strategy is Strategy.RANDOM_INIT:
            return "random"
        return ",".join(str(i) for i in self.teacher_layers)


@dataclass
class InitReport:
    blocks: dict[str, bool] = field(default_factory=dict)  # student param name -> copied?
    sources: dict[str, str] = field(default_factory=dict)  # copied name -> teacher param name

    @property
    def copied_count(self) -> int:
        return sum(self.blocks.values())

    @property
    def random_count(self) -> int:
        return len(self.blocks) - self.copied_count


def build_layer_map(
    strategy: Strategy | str,
    teacher_layers: int,
    student_layers: int,
    explicit: Sequence[int] | None = None,
    copy_embeddings: bool | None = None,
) -> LayerMap:
    """Choose which teacher layers seed (and supervise) each student layer.

    ``copy_embeddings`` defaults to True except for RANDOM_INIT, where the
    student starts from scratch.
    """
    strategy = Strategy(strategy)
    if not 1 <= student_layers <= teacher_layers:
        raise InvalidExplicitList(f"student depth {student_layers} must be in [1, {teacher_layers}]")
    if copy_embeddings is None:
        copy_embeddings = strategy is not Strategy.RANDOM_INIT
    if strategy is Strategy.EVERY_K:
        if teacher_layers % student_layers:
            raise IndivisibleDepth(f"teacher depth {teacher_layers} not divisible by student depth {student_layers}")
        k = teacher_layers // student_layers
        layers = tuple(range(k, teacher_layers + 1, k))
    elif strategy is Strategy.FIRST_K:
        layers = tuple(range(1, student_layers + 1))
    elif strategy is Strategy.EXPLICIT:
        if explicit is None:
            raise InvalidExplicitList("EXPLICIT strategy needs a layer list")
        layers = tuple(int(i) for i in explicit)
        if len(layers) != student_layers:
            raise InvalidExplicitList(f"{len(layers)} layers listed for a {student_layers}-layer student")
        if any(i < 1 or i > teacher_layers for i in layers):
            raise InvalidExplicitList(f"layer indices must lie in [1, {teacher_layers}]: {layers}")
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise InvalidExplicitList(f"layer indices must be strictly increasing: {layers}")
    else:
        layers = ()
    return LayerMap(layers, strategy, bool(copy_embeddings))


def initialize_student(student: EncoderModel, teacher: EncoderModel, layer_map: LayerMap, seed: int) -> InitReport:
    """Re-seed every student parameter, then copy blocks from the teacher per ``layer_map``.

    Heads are copied whenever the map is not RANDOM_INIT and their shapes
    agree; the copied arrays are exact copies of the teacher's.
    """
    sc, tc = student.config, teacher.config
    if layer_map.strategy is not Strategy.RANDOM_INIT and len(layer_map) != sc.num_layers:
        raise MapLengthMismatch(f"map has {len(layer_map)} layers, student has {sc.num_layers}")
    if layer_map.strategy is Strategy.RANDOM_INIT and len(layer_map):
        raise MapLengthMismatch("RANDOM_INIT maps must be empty")
    if any(i > tc.num_layers for i in layer_map.teacher_layers):
        raise MapLengthMismatch(f"map refers past teacher depth {tc.num_layers}")
    copying = bool(len(layer_map)) or layer_map.copy_embeddings
    if copying and (sc.hidden_dim, sc.num_heads, sc.ffn_dim) != (tc.hidden_dim, tc.num_heads, tc.ffn_dim):
        raise DimensionMismatch(
            f"cannot copy: student (d, h, ffn) = {(sc.hidden_dim, sc.num_heads, sc.ffn_dim)}, "
            f"teacher = {(tc.hidden_dim, tc.num_heads, tc.ffn_dim)}"
        )

    student.reset_parameters(seed)
    plan: dict[str, str] = {}
    if layer_map.copy_embeddings:
        for block in EMBEDDING_BLOCKS:
            plan[block] = block
    for j, src in enumerate(layer_map.teacher_layers, start=1):
        for block in LAYER_BLOCKS:
            plan[f"layers.{j}.{block}"] = f"layers.{src}.{block}"
    if layer_map.strategy is not Strategy.RANDOM_INIT:
        for name in student.head_parameter_names():
            if name in teacher.params and teacher.params[name].shape == student.params[name].shape:
                plan[name] = name

    report = InitReport()
    for name, param in student.params.items():
        src = plan.get(name)
        if src is not None:
            if teacher.params[src].shape != param.shape:
                raise DimensionMismatch(f"{name} {param.shape} vs teacher {src} {teacher.params[src].shape}")
            param.data = np.array(teacher.params[src].data, copy=True)
            report.sources[name] = src
        report.blocks[name] = src is not None
    return report


def supervision_pairs(
    layer_map: LayerMap, mode: Mode | str, teacher_layers: int, student_layers: int
) -> list[tuple[int, int]]:
    """(teacher_layer, student_layer) pairs used for intermediate supervision."""
    mode = Mode(mode)
    if mode is Mode.TASK_AGNOSTIC:
        return [(teacher_layers, student_layers)]
    if not len(layer_map):
        raise EmptyMapForTaskSpecific("task-specific distillation supervises the layers used for initialisation")
    return [(t, s) for s, t in enumerate(layer_map.teacher_layers, start=1)]
