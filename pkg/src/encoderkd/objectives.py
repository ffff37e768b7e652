"""Distillation objectives over teacher/student forward traces.

Every loss returns a differentiable scalar :class:`Tensor`. Teacher
quantities are always read as constants, so no gradient can reach teacher
parameters. Layer pairs are ``(teacher_layer, student_layer)`` with 1-based
indices.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import (
    BatchTooSmall,
    ConfigInvalid,
    HeadCountMismatch,
    InvalidDistribution,
    LengthMismatch,
    MissingProjection,
    MissingTerm,
    NonpositiveTemperature,
    ShapeMismatch,
)
from .model import ForwardTrace, additive_mask
from .tensor import Tensor

PROB_FLOOR = 1e-12


class Term(str, enum.Enum):
    PRED = "PRED"
    HID_CLS = "HID_CLS"
    HID_SEQ = "HID_SEQ"
    HID_CONTRAST = "HID_CONTRAST"
    ATT_MSE = "ATT_MSE"
    ATT_KL = "ATT_KL"
    VAL_KL = "VAL_KL"
    SUPERVISED = "SUPERVISED"


INTERMEDIATE_TERMS = frozenset(
    {Term.HID_CLS, Term.HID_SEQ, Term.HID_CONTRAST, Term.ATT_MSE, Term.ATT_KL, Term.VAL_KL}
)
PROJECTED_TERMS = frozenset({Term.HID_CLS, Term.HID_SEQ, Term.HID_CONTRAST})
DISTILLATION_TERMS = INTERMEDIATE_TERMS | {Term.PRED}

LayerPair = tuple[int, int]


@dataclass(frozen=True)
class ObjectiveSpec:
    active: frozenset[Term]
    temperature: float = 1.0
    alpha: float = 0.5
    contrast_temperature: float = 0.1
    layer_pairs: tuple[LayerPair, ...] = ()
    scale_pred_by_t2: bool = True

    def __post_init__(self):
        object.__setattr__(self, "active", frozenset(Term(t) for t in self.active))
        object.__setattr__(self, "layer_pairs", tuple((int(a), int(b)) for a, b in self.layer_pairs))
        if not self.active:
            raise ConfigInvalid("at least one objective term must be active")
        if self.temperature <= 0 or self.contrast_temperature <= 0:
            raise ConfigInvalid("temperatures must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigInvalid("alpha must lie in [0, 1]")
        if self.intermediate and not self.layer_pairs:
            raise ConfigInvalid("intermediate-layer terms need layer_pairs")

    @property
    def intermediate(self) -> frozenset[Term]:
        return self.active & INTERMEDIATE_TERMS

    @property
    def uses_teacher(self) -> bool:
        return bool(self.active & DISTILLATION_TERMS)

    def with_terms(self, terms: Iterable[Term]) -> ObjectiveSpec:
        return ObjectiveSpec(
            frozenset(terms),
            self.temperature,
            self.alpha,
            self.contrast_temperature,
            self.layer_pairs,
            self.scale_pred_by_t2,
        )

    def with_pairs(self, pairs: Sequence[LayerPair]) -> ObjectiveSpec:
        return ObjectiveSpec(
            self.active,
            self.temperature,
            self.alpha,
            self.contrast_temperature,
            tuple(pairs),
            self.scale_pred_by_t2,
        )


@dataclass
class ProjectionParams:
    """Learnable student-to-teacher maps W_h, one per (student layer, term)."""

    weights: dict[tuple[int, Term], Tensor] = field(default_factory=dict)

    @classmethod
    def for_spec(cls, spec: ObjectiveSpec, student_dim: int, teacher_dim: int, seed: int = 0) -> ProjectionParams:
        rng = np.random.default_rng(seed)
        out = cls()
        for term in sorted(spec.active & PROJECTED_TERMS, key=lambda t: t.value):
            for _, s_layer in spec.layer_pairs:
                if student_dim == teacher_dim:
                    w = np.eye(student_dim)
                else:
                    w = rng.normal(0.0, 0.02, size=(student_dim, teacher_dim))
                out.weights[(s_layer, term)] = Tensor(w, requires_grad=True, name=f"proj.{term.value}.{s_layer}")
        return out

    def get(self, student_layer: int, term: Term) -> Tensor:
        try:
            return self.weights[(student_layer, Term(term))]
        except KeyError:
            raise MissingProjection(f"no projection for student layer {student_layer}, term {Term(term).value}") from None

    def parameters(self) -> list[Tensor]:
        return list(self.weights.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(w.name, w) for w in self.weights.values()]


# -- helpers ----------------------------------------------------------------


def _const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _check_lengths(trace_s: ForwardTrace, trace_t: ForwardTrace) -> None:
    if trace_s.mask.shape != trace_t.mask.shape:
        raise LengthMismatch(f"student batch/length {trace_s.mask.shape} vs teacher {trace_t.mask.shape}")


def _check_heads(trace_s: ForwardTrace, trace_t: ForwardTrace) -> None:
    if trace_s.num_heads != trace_t.num_heads:
        raise HeadCountMismatch(f"student has {trace_s.num_heads} heads, teacher {trace_t.num_heads}")


def _mean_over_pairs(losses: list[Tensor]) -> Tensor:
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total * (1.0 / len(losses))


def _row_kl(p: np.ndarray, q: Tensor, row_mask: np.ndarray) -> Tensor:
    """Mean over valid rows and heads of KL(p || q), per example, then over the batch.

    ``p`` and ``q`` are [B, h, l, l] row distributions; ``row_mask`` is [B, l].
    Uses 0 * log 0 = 0 and floors ``q`` at PROB_FLOOR.
    """
    B, h = p.shape[:2]
    rows = row_mask[:, None, :].astype(np.float64)  # [B, 1, l]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=-1)
    cross = T.tsum(T.mul(p, T.log(T.clip_min(q, PROB_FLOOR))), axis=-1)  # [B, h, l]
    kl = T.sub(plogp, cross)
    per_example = T.tsum(T.mul(kl, rows), axis=(1, 2))
    weights = 1.0 / (rows.sum(axis=(1, 2)) * h * B)
    return T.tsum(T.mul(per_example, weights))


def _check_rows(p: np.ndarray, row_mask: np.ndarray, who: str) -> None:
    sums = p.sum(axis=-1)
    valid = np.broadcast_to(row_mask[:, None, :], sums.shape)
    if np.any(np.abs(sums[valid] - 1.0) > 1e-6):
        raise InvalidDistribution(f"{who} attention rows do not sum to 1")


# -- prediction layer -------------------------------------------------------


def soft_entropy(z_t, t: float = 1.0) -> float:
    """Mean entropy of softmax(z_t / t) rows; CE(p, p) for the teacher distribution."""
    z = np.atleast_2d(_const(z_t)) / t
    logp = z - z.max(axis=-1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
    return float(-(np.exp(logp) * logp).sum(axis=-1).mean())


def pred_loss(z_t, z_s: Tensor, t: float = 1.0, scale_by_t2: bool = True) -> Tensor:
    """Soft cross-entropy CE(softmax(z_t/t), softmax(z_s/t)), batch-averaged, times t^2."""
    if t <= 0:
        raise NonpositiveTemperature(f"temperature must be positive, got {t}")
    zt = _const(z_t)
    if zt.shape != z_s.shape:
        raise ShapeMismatch(f"teacher logits {zt.shape} vs student {z_s.shape}")
    if z_s.ndim == 1:
        zt = zt[None, :]
        z_s = z_s.reshape(1, -1)
    n = zt.shape[0]
    if n == 0:
        return T.tsum(z_s) * 0.0
    p = T.softmax(Tensor(zt / t), axis=-1).data
    logq = T.log_softmax(z_s * (1.0 / t), axis=-1)
    loss = T.tsum(T.mul(p, logq)) * (-1.0 / n)
    return loss * (t * t) if scale_by_t2 else loss


def supervised_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        return T.tsum(logits) * 0.0
    logq = T.log_softmax(logits, axis=-1)
    picked = T.getitem(logq, (np.arange(n), labels))
    return T.tsum(picked) * (-1.0 / n)


# -- hidden states ----------------------------------------------------------


def hid_loss(
    trace_s: ForwardTrace,
    trace_t: ForwardTrace,
    layer_pairs: Sequence[LayerPair],
    proj: ProjectionParams,
    variant: str = "CLS",
) -> Tensor:
    """MSE between projected student hidden states and teacher hidden states.

    ``variant`` "CLS" uses the CLS row only; "SEQ" uses every unpadded row.
    """
    _check_lengths(trace_s, trace_t)
    variant = variant.upper()
    term = Term.HID_CLS if variant == "CLS" else Term.HID_SEQ
    if variant not in ("CLS", "SEQ"):
        raise ValueError(f"unknown hidden-state variant {variant!r}")
    losses = []
    for t_layer, s_layer in layer_pairs:
        w = proj.get(s_layer, term)
        hs = trace_s.hidden_states[s_layer - 1]
        ht = _const(trace_t.hidden_states[t_layer - 1])
        if variant == "CLS":
            diff = T.sub(hs[:, 0, :] @ w, ht[:, 0, :])
            losses.append(T.mean(diff * diff))
        else:
            rows = trace_s.mask[..., None].astype(np.float64)
            diff = T.sub(hs @ w, ht)
            denom = rows.sum() * ht.shape[-1]
            losses.append(T.tsum(T.mul(diff * diff, rows)) * (1.0 / denom))
    return _mean_over_pairs(losses)


def _l2_normalize(x: Tensor) -> Tensor:
    norm = T.sqrt(T.tsum(x * x, axis=-1, keepdims=True) + 1e-12)
    return x / norm


def contrast_loss(
    trace_s: ForwardTrace,
    trace_t: ForwardTrace,
    layer_pairs: Sequence[LayerPair],
    proj: ProjectionParams,
    tau: float = 0.1,
) -> Tensor:
    """In-batch InfoNCE between projected student CLS states and teacher CLS states.

    For example ``i`` the positive is teacher ``i`` and every other teacher in
    the batch is a negative; similarity is cosine, scaled by ``1/tau``.
    """
    _check_lengths(trace_s, trace_t)
    if trace_s.batch_size < 2:
        raise BatchTooSmall("contrastive loss needs at least two examples per batch")
    if tau <= 0:
        raise NonpositiveTemperature(f"tau must be positive, got {tau}")
    losses = []
    for t_layer, s_layer in layer_pairs:
        w = proj.get(s_layer, Term.HID_CONTRAST)
        s = _l2_normalize(trace_s.hidden_states[s_layer - 1][:, 0, :] @ w)
        ht = _const(trace_t.hidden_states[t_layer - 1])[:, 0, :]
        t_unit = ht / np.sqrt((ht * ht).sum(axis=-1, keepdims=True) + 1e-12)
        sims = (s @ t_unit.T) * (1.0 / tau)
        logp = T.log_softmax(sims, axis=-1)
        n = trace_s.batch_size
        losses.append(T.tsum(T.getitem(logp, (np.arange(n), np.arange(n)))) * (-1.0 / n))
    return _mean_over_pairs(losses)


# -- attention --------------------------------------------------------------


def att_mse_loss(trace_s: ForwardTrace, trace_t: ForwardTrace, layer_pairs: Sequence[LayerPair]) -> Tensor:
    """Mean over heads of the MSE between pre-softmax score matrices.

    Entries whose query or key is padding are excluded from each mean.
    """
    _check_heads(trace_s, trace_t)
    _check_lengths(trace_s, trace_t)
    m = trace_s.mask.astype(np.float64)
    pair_mask = (m[:, :, None] * m[:, None, :])[:, None, :, :]  # [B, 1, l, l]
    B, h = trace_s.batch_size, trace_s.num_heads
    weights = 1.0 / (pair_mask.sum(axis=(1, 2, 3)) * h * B)
    losses = []
    for t_layer, s_layer in layer_pairs:
        diff = T.sub(trace_s.attention_scores[s_layer - 1], _const(trace_t.attention_scores[t_layer - 1]))
        per_example = T.tsum(T.mul(diff * diff, pair_mask), axis=(1, 2, 3))
        losses.append(T.tsum(T.mul(per_example, weights)))
    return _mean_over_pairs(losses)


def att_kl_loss(trace_s: ForwardTrace, trace_t: ForwardTrace, layer_pairs: Sequence[LayerPair]) -> Tensor:
    """(1 / T H) sum over positions and heads of KL(teacher attention || student attention)."""
    _check_heads(trace_s, trace_t)
    _check_lengths(trace_s, trace_t)
    losses = []
    for t_layer, s_layer in layer_pairs:
        p = _const(trace_t.attention_probs[t_layer - 1])
        q = trace_s.attention_probs[s_layer - 1]
        _check_rows(p, trace_s.mask, "teacher")
        _check_rows(q.data, trace_s.mask, "student")
        losses.append(_row_kl(p, q, trace_s.mask))
    return _mean_over_pairs(losses)


def value_relation(values: Tensor, mask: np.ndarray) -> Tensor:
    """softmax(V V^T / sqrt(head_dim)) per head, padded keys masked out."""
    dh = values.shape[-1]
    rel = (values @ values.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    return T.softmax(rel + additive_mask(mask), axis=-1)


def val_kl_loss(trace_s: ForwardTrace, trace_t: ForwardTrace, layer_pairs: Sequence[LayerPair]) -> Tensor:
    """Value-relation transfer: KL(teacher relation || student relation) per position and head."""
    _check_heads(trace_s, trace_t)
    _check_lengths(trace_s, trace_t)
    losses = []
    for t_layer, s_layer in layer_pairs:
        vt = Tensor(_const(trace_t.values[t_layer - 1]))
        p = value_relation(vt, trace_t.mask).data
        q = value_relation(trace_s.values[s_layer - 1], trace_s.mask)
        losses.append(_row_kl(p, q, trace_s.mask))
    return _mean_over_pairs(losses)


# -- combination ------------------------------------------------------------


def intermediate_losses(
    spec: ObjectiveSpec,
    trace_s: ForwardTrace,
    trace_t: ForwardTrace,
    proj: ProjectionParams | None,
) -> dict[Term, Tensor]:
    pairs = spec.layer_pairs
    out: dict[Term, Tensor] = {}
    for term in sorted(spec.intermediate, key=lambda t: t.value):
        if term is Term.HID_CLS:
            out[term] = hid_loss(trace_s, trace_t, pairs, proj or ProjectionParams(), "CLS")
        elif term is Term.HID_SEQ:
            out[term] = hid_loss(trace_s, trace_t, pairs, proj or ProjectionParams(), "SEQ")
        elif term is Term.HID_CONTRAST:
            out[term] = contrast_loss(trace_s, trace_t, pairs, proj or ProjectionParams(), spec.contrast_temperature)
        elif term is Term.ATT_MSE:
            out[term] = att_mse_loss(trace_s, trace_t, pairs)
        elif term is Term.ATT_KL:
            out[term] = att_kl_loss(trace_s, trace_t, pairs)
        elif term is Term.VAL_KL:
            out[term] = val_kl_loss(trace_s, trace_t, pairs)
    return out


def combine(spec: ObjectiveSpec, losses: Mapping[Term, Tensor]) -> Tensor:
    """alpha * supervised + (1 - alpha) * pred when both are active; everything else unit-weighted."""
    missing = [t.value for t in spec.active if t not in losses]
    if missing:
        raise MissingTerm(f"losses missing for active terms: {sorted(missing)}")
    parts: list[Tensor] = []
    both = Term.PRED in spec.active and Term.SUPERVISED in spec.active
    for term in sorted(spec.active, key=lambda t: t.value):
        value = T.as_tensor(losses[term])
        if both and term is Term.SUPERVISED:
            value = value * spec.alpha
        elif both and term is Term.PRED:
            value = value * (1.0 - spec.alpha)
        parts.append(value)
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total
