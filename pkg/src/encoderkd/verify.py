"""Self-check suite behind ``encoderkd verify``.

Runs gradient checks for every differentiable op and every objective, loss
oracle comparisons, fixed-point checks, initialisation equality and the
statistics worked examples. Ops and objectives are looked up on their
modules at call time, so a patched (or broken) implementation is what gets
checked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import evaluation, gradcheck, initmap, oracles
from . import objectives as O
from . import tensor as T
from .model import CLS_ID, EMBEDDING_BLOCKS, LAYER_BLOCKS, PAD_ID, EncoderModel, ModelConfig, classify, forward_with_trace
from .objectives import ObjectiveSpec, ProjectionParams, Term

GRAD_TOL = 1e-4
ORACLE_TOL = 1e-8
ZERO_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}" + (f"  {self.detail}" if self.detail else "")


# -- fixtures ---------------------------------------------------------------


def tiny_config(layers=2, d=8, heads=2, ffn=16, vocab=12, max_len=5, std=0.3) -> ModelConfig:
    return ModelConfig(layers, d, heads, ffn, vocab, max_len, num_labels=2, init_std=std)


def tiny_batch(rng: np.random.Generator, batch=3, length=5, vocab=12) -> tuple[np.ndarray, np.ndarray]:
    """CLS-led random ids; every other row is padded by one position."""
    tokens = rng.integers(5, vocab, size=(batch, length))
    tokens[:, 0] = CLS_ID
    mask = np.ones((batch, length), dtype=bool)
    for b in range(1, batch, 2):
        tokens[b, -1] = PAD_ID
        mask[b, -1] = False
    return tokens, mask


def tiny_pair(seed: int, layers=2, teacher_layers=2, batch=3, length=5, std=0.3):
    """(student, teacher, tokens, mask) with independent random weights."""
    rng = np.random.default_rng(seed)
    student = EncoderModel(tiny_config(layers, max_len=length, std=std), seed=2 * seed + 1)
    teacher = EncoderModel(tiny_config(teacher_layers, max_len=length, std=std), seed=2 * seed + 2)
    tokens, mask = tiny_batch(rng, batch, length)
    return student, teacher, tokens, mask


def random_projections(terms, pairs, dim: int, seed: int) -> ProjectionParams:
    rng = np.random.default_rng(seed)
    proj = ProjectionParams()
    for term in terms:
        for _, s in pairs:
            proj.weights[(s, Term(term))] = T.Tensor(
                np.eye(dim) + rng.normal(0, 0.3, (dim, dim)), requires_grad=True, name=f"proj.{Term(term).value}.{s}"
            )
    return proj


PAIRS = ((1, 1), (2, 2))


def objective_closure(term: Term, student, teacher, tokens, mask, proj, t=2.0, tau=0.5):
    """Zero-argument loss for ``term`` through the full student forward pass."""
    with T.no_grad():
        tr_t = forward_with_trace(teacher, tokens, mask)
        z_t = classify(teacher, tr_t).data

    def f():
        tr_s = forward_with_trace(student, tokens, mask)
        if term is Term.PRED:
            return O.pred_loss(z_t, classify(student, tr_s), t)
        if term is Term.HID_CLS:
            return O.hid_loss(tr_s, tr_t, PAIRS, proj, "CLS")
        if term is Term.HID_SEQ:
            return O.hid_loss(tr_s, tr_t, PAIRS, proj, "SEQ")
        if term is Term.HID_CONTRAST:
            return O.contrast_loss(tr_s, tr_t, PAIRS, proj, tau)
        if term is Term.ATT_MSE:
            return O.att_mse_loss(tr_s, tr_t, PAIRS)
        if term is Term.ATT_KL:
            return O.att_kl_loss(tr_s, tr_t, PAIRS)
        if term is Term.VAL_KL:
            return O.val_kl_loss(tr_s, tr_t, PAIRS)
        raise ValueError(term)

    return f


OBJECTIVE_TERMS = (Term.PRED, Term.HID_CLS, Term.HID_SEQ, Term.HID_CONTRAST, Term.ATT_MSE, Term.ATT_KL, Term.VAL_KL)


def objective_grad_check(term: Term, seed: int, max_entries: int | None = 6) -> gradcheck.CheckReport:
    student, teacher, tokens, mask = tiny_pair(seed)
    proj = random_projections([term], PAIRS, 8, seed) if term in O.PROJECTED_TERMS else ProjectionParams()
    f = objective_closure(term, student, teacher, tokens, mask, proj)
    named = student.named_parameters() + proj.named_parameters()
    names = [n for n, _ in named]
    inputs = [p for _, p in named]
    if term is not Term.PRED:
        # heads do not enter intermediate losses; skip their all-zero gradients
        keep = [i for i, n in enumerate(names) if not n.startswith(("cls.", "mlm."))]
        names, inputs = [names[i] for i in keep], [inputs[i] for i in keep]
    report = gradcheck.grad_check(f, inputs, tol=GRAD_TOL, max_entries=max_entries, seed=seed, names=names)
    student.zero_grad()
    return report


# -- op-level gradient checks -----------------------------------------------


def _op_cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable[[], T.Tensor], list[T.Tensor]]]]:
    def leaf(rng, *shape, positive=False):
        x = rng.normal(size=shape)
        return T.Tensor(np.abs(x) + 0.5 if positive else x, requires_grad=True)

    def unary(op, positive=False):
        def build(rng):
            a = leaf(rng, 3, 4, positive=positive)
            w = rng.normal(size=(3, 4))
            return (lambda: T.tsum(T.mul(getattr(T, op)(a), w))), [a]

        return build

    def binary(op, positive_b=False):
        def build(rng):
            a, b = leaf(rng, 2, 3, 4), leaf(rng, 3, 4, positive=positive_b)
            w = rng.normal(size=(2, 3, 4))
            return (lambda: T.tsum(T.mul(getattr(T, op)(a, b), w))), [a, b]

        return build

    def matmul(rng):
        a, b = leaf(rng, 2, 3, 4), leaf(rng, 2, 4, 5)
        c = leaf(rng, 4, 2)
        w1, w2 = rng.normal(size=(2, 3, 5)), rng.normal(size=(2, 3, 2))
        return (lambda: T.tsum(T.mul(T.matmul(a, b), w1)) + T.tsum(T.mul(T.matmul(a, c), w2))), [a, b, c]

    def softmax(rng):
        a = leaf(rng, 2, 3, 5)
        w = rng.normal(size=(2, 3, 5))
        return (lambda: T.tsum(T.mul(T.softmax(a, axis=-1), w)) + T.tsum(T.mul(T.softmax(a, axis=1), w))), [a]

    def log_softmax(rng):
        a = leaf(rng, 3, 5)
        w = rng.normal(size=(3, 5))
        return (lambda: T.tsum(T.mul(T.log_softmax(a, axis=-1), w))), [a]

    def layer_norm(rng):
        x, g, b = leaf(rng, 2, 3, 6), leaf(rng, 6), leaf(rng, 6)
        w = rng.normal(size=(2, 3, 6))
        return (lambda: T.tsum(T.mul(T.layer_norm(x, g, b, 1e-5), w))), [x, g, b]

    def power(rng):
        a = leaf(rng, 3, 4, positive=True)
        w = rng.normal(size=(3, 4))
        return (lambda: T.tsum(T.mul(T.power(a, 1.5), w))), [a]

    def clip_min(rng):
        a = leaf(rng, 3, 4)
        w = rng.normal(size=(3, 4))
        return (lambda: T.tsum(T.mul(T.clip_min(a + 0.0, 0.1), w))), [a]

    def reductions(rng):
        a = leaf(rng, 2, 3, 4)
        w1, w2 = rng.normal(size=(2, 4)), rng.normal(size=(3,))
        return (lambda: T.tsum(T.mul(T.tsum(a, axis=1), w1)) + T.tsum(T.mul(T.mean(a, axis=(0, 2)), w2))), [a]

    def shapes(rng):
        a = leaf(rng, 2, 3, 4)
        w = rng.normal(size=(4, 6))
        return (lambda: T.tsum(T.mul(T.reshape(T.transpose(a, (2, 0, 1)), (4, 6)), w))), [a]

    def swapaxes(rng):
        a = leaf(rng, 2, 3, 4)
        w = rng.normal(size=(2, 4, 3))
        return (lambda: T.tsum(T.mul(T.swapaxes(a, -1, -2), w))), [a]

    def getitem(rng):
        a = leaf(rng, 6, 4)
        idx = np.array([0, 2, 2, 5])
        w = rng.normal(size=(4, 4))
        return (lambda: T.tsum(T.mul(T.getitem(a, idx), w)) + T.tsum(T.getitem(a, (slice(1, 3), 0)))), [a]

    def broadcast(rng):
        a, b = leaf(rng, 2, 1, 4), leaf(rng, 3, 1)
        w = rng.normal(size=(2, 3, 4))
        return (lambda: T.tsum(T.mul(T.mul(T.add(a, b), b), w))), [a, b]

    return {
        "add": binary("add"),
        "sub": binary("sub"),
        "mul": binary("mul"),
        "div": binary("div", positive_b=True),
        "neg": unary("neg"),
        "exp": unary("exp"),
        "log": unary("log", positive=True),
        "sqrt": unary("sqrt", positive=True),
        "tanh": unary("tanh"),
        "gelu": unary("gelu"),
        "power": power,
        "clip_min": clip_min,
        "sum/mean": reductions,
        "reshape/transpose": shapes,
        "swapaxes": swapaxes,
        "getitem": getitem,
        "matmul": matmul,
        "softmax": softmax,
        "log_softmax": log_softmax,
        "layer_norm": layer_norm,
        "broadcast": broadcast,
    }


def check_ops(seed: int = 0) -> list[CheckResult]:
    out = []
    for name, build in _op_cases().items():
        f, inputs = build(np.random.default_rng(seed))
        rep = gradcheck.grad_check(f, inputs, step=1e-6, tol=GRAD_TOL)
        out.append(CheckResult(f"grad op:{name}", rep.passed, f"max_rel_err={rep.max_error:.2e}"))
    return out


def check_objective_grads(seeds=(0, 1, 2), max_entries: int | None = 6) -> list[CheckResult]:
    out = []
    for term in OBJECTIVE_TERMS:
        worst, where = 0.0, ""
        for seed in seeds:
            rep = objective_grad_check(term, seed, max_entries)
            if rep.max_error >= worst:
                worst, where = rep.max_error, f"seed={seed} {rep.worst()}"
        out.append(CheckResult(f"grad objective:{term.value}", worst < GRAD_TOL, f"max_rel_err={worst:.2e} ({where})"))
    return out


# -- loss oracles -----------------------------------------------------------


def oracle_values(term: Term, seed: int) -> tuple[float, float]:
    """(vectorised, scalar-loop) values of ``term`` on a random tiny trace pair."""
    student, teacher, tokens, mask = tiny_pair(seed, std=0.5)
    with T.no_grad():
        tr_s = forward_with_trace(student, tokens, mask)
        tr_t = forward_with_trace(teacher, tokens, mask)
        proj = random_projections([term], PAIRS, 8, seed) if term in O.PROJECTED_TERMS else ProjectionParams()
        weights = {s: proj.weights[(s, term)] for _, s in PAIRS} if term in O.PROJECTED_TERMS else {}
        if term is Term.PRED:
            z_t, z_s = classify(teacher, tr_t).data, classify(student, tr_s)
            return float(O.pred_loss(z_t, z_s, 2.0).data), oracles.pred(z_t, z_s, 2.0)
        if term is Term.HID_CLS:
            return float(O.hid_loss(tr_s, tr_t, PAIRS, proj, "CLS").data), oracles.hid(tr_s, tr_t, PAIRS, weights, "CLS")
        if term is Term.HID_SEQ:
            return float(O.hid_loss(tr_s, tr_t, PAIRS, proj, "SEQ").data), oracles.hid(tr_s, tr_t, PAIRS, weights, "SEQ")
        if term is Term.HID_CONTRAST:
            return float(O.contrast_loss(tr_s, tr_t, PAIRS, proj, 0.5).data), oracles.contrast(tr_s, tr_t, PAIRS, weights, 0.5)
        if term is Term.ATT_MSE:
            return float(O.att_mse_loss(tr_s, tr_t, PAIRS).data), oracles.att_mse(tr_s, tr_t, PAIRS)
        if term is Term.ATT_KL:
            return float(O.att_kl_loss(tr_s, tr_t, PAIRS).data), oracles.att_kl(tr_s, tr_t, PAIRS)
        if term is Term.VAL_KL:
            return float(O.val_kl_loss(tr_s, tr_t, PAIRS).data), oracles.val_kl(tr_s, tr_t, PAIRS)
    raise ValueError(term)


def check_oracles(seeds=range(5)) -> list[CheckResult]:
    out = []
    for term in OBJECTIVE_TERMS:
        worst = max(abs(a - b) for a, b in (oracle_values(term, s) for s in seeds))
        out.append(CheckResult(f"oracle objective:{term.value}", worst < ORACLE_TOL, f"max_abs_diff={worst:.2e}"))
    return out


# -- fixed points -----------------------------------------------------------


def fixed_point_values(seed: int = 0) -> dict[str, float]:
    """Each intermediate loss (and pred minus teacher entropy) with student == teacher."""
    _, teacher, tokens, mask = tiny_pair(seed)
    student = teacher.copy()
    proj = ProjectionParams.for_spec(
        ObjectiveSpec(frozenset({Term.HID_CLS, Term.HID_SEQ}), layer_pairs=PAIRS), 8, 8
    )
    with T.no_grad():
        tr_s = forward_with_trace(student, tokens, mask)
        tr_t = forward_with_trace(teacher, tokens, mask)
        z_t = classify(teacher, tr_t).data
        z_s = classify(student, tr_s)
        return {
            "HID_CLS": float(O.hid_loss(tr_s, tr_t, PAIRS, proj, "CLS").data),
            "HID_SEQ": float(O.hid_loss(tr_s, tr_t, PAIRS, proj, "SEQ").data),
            "ATT_MSE": float(O.att_mse_loss(tr_s, tr_t, PAIRS).data),
            "ATT_KL": float(O.att_kl_loss(tr_s, tr_t, PAIRS).data),
            "VAL_KL": float(O.val_kl_loss(tr_s, tr_t, PAIRS).data),
            "PRED-H": float(O.pred_loss(z_t, z_s, 1.0).data) - O.soft_entropy(z_t, 1.0),
        }


def check_fixed_points() -> list[CheckResult]:
    return [
        CheckResult(f"fixed-point {name}", abs(v) <= ZERO_TOL, f"value={v:.2e}")
        for name, v in fixed_point_values().items()
    ]


# -- initialisation ---------------------------------------------------------


def init_fidelity(teacher: EncoderModel, student: EncoderModel, layer_map) -> tuple[bool, str]:
    report = initmap.initialize_student(student, teacher, layer_map, seed=7)
    for name, src in report.sources.items():
        if not np.array_equal(student.params[name].data, teacher.params[src].data):
            return False, f"{name} differs from {src}"
    if layer_map.copy_embeddings:
        for block in EMBEDDING_BLOCKS:
            if not report.blocks.get(block) or not np.array_equal(student.params[block].data, teacher.params[block].data):
                return False, f"{block} not copied"
    for j, src in enumerate(layer_map.teacher_layers, start=1):
        for block in LAYER_BLOCKS:
            if report.sources.get(f"layers.{j}.{block}") != f"layers.{src}.{block}":
                return False, f"layers.{j}.{block} not copied from layer {src}"
    return True, f"{report.copied_count} blocks copied"


def check_init() -> list[CheckResult]:
    teacher = EncoderModel(tiny_config(layers=12, d=8, std=0.3), seed=11)
    out = []
    for label, strategy, layers, sL in (
        ("4,8,12", "EVERY_K", None, 3),
        ("1,8,12", "EXPLICIT", (1, 8, 12), 3),
        ("1,2,3", "EXPLICIT", (1, 2, 3), 3),
        ("FIRST_K 6", "FIRST_K", None, 6),
    ):
        lm = initmap.build_layer_map(strategy, 12, sL, layers)
        student = EncoderModel(tiny_config(layers=sL, d=8, std=0.3), seed=3)
        ok, detail = init_fidelity(teacher, student, lm)
        out.append(CheckResult(f"init {label}", ok, detail))
    return out


# -- statistics -------------------------------------------------------------


def check_statistics() -> list[CheckResult]:
    t, p = evaluation.paired_t_test([1.0, 2.0, 0.0, 3.0], [0.0, 0.0, 0.0, 0.0])
    preds = [1, 1, 1, 0, 0, 1, 0, 0, 0, 0]
    golds = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0]
    mcc = evaluation.metric("MCC", preds, golds)
    cells = evaluation.build_report(
        [evaluation.RunRecord("o", "i", "task", s, v) for s, v in enumerate([70.0, 71.0, 72.0, 73.0])]
    ).cells[("o", "i", "task")]
    return [
        CheckResult("stats t-test example", abs(t - 2.32379) < 1e-4 and abs(p - 0.10270) < 1e-3, f"t={t:.5f} p={p:.5f}"),
        CheckResult("stats MCC example", abs(mcc - 10 / math.sqrt(600)) < 1e-10, f"mcc={mcc:.6f}"),
        CheckResult(
            "stats report cell",
            cells.mean == 71.5 and abs(cells.std - math.sqrt(5 / 3)) < 1e-12,
            f"mean={cells.mean} std={cells.std:.5f}",
        ),
    ]


def run_all(fast: bool = False) -> list[CheckResult]:
    results: list[CheckResult] = []
    results += check_ops()
    results += check_objective_grads(seeds=(0,) if fast else (0, 1, 2))
    results += check_oracles(seeds=range(2) if fast else range(5))
    results += check_fixed_points()
    results += check_init()
    results += check_statistics()
    return results
