import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from encoderkd.errors import (
    DimensionMismatch,
    EmptyMapForTaskSpecific,
    IndivisibleDepth,
    InvalidExplicitList,
    MapLengthMismatch,
)
from encoderkd.initmap import Mode, Strategy, build_layer_map, initialize_student, supervision_pairs
from encoderkd.model import EMBEDDING_BLOCKS, LAYER_BLOCKS, EncoderModel, forward_with_trace
from encoderkd.verify import init_fidelity, tiny_batch, tiny_config


def teacher(layers=12, seed=0):
    return EncoderModel(tiny_config(layers), seed=seed)


def student(layers, seed=1):
    return EncoderModel(tiny_config(layers), seed=seed)


@pytest.mark.parametrize(
    "strategy, t, s, explicit, expected",
    [
        ("EVERY_K", 12, 3, None, (4, 8, 12)),
        ("EVERY_K", 12, 6, None, (2, 4, 6, 8, 10, 12)),
        ("EVERY_K", 4, 2, None, (2, 4)),
        ("FIRST_K", 12, 3, None, (1, 2, 3)),
        ("FIRST_K", 12, 6, None, (1, 2, 3, 4, 5, 6)),
        ("EXPLICIT", 12, 3, [1, 8, 12], (1, 8, 12)),
        ("RANDOM_INIT", 12, 3, None, ()),
    ],
)
def test_layer_maps(strategy, t, s, explicit, expected):
    m = build_layer_map(strategy, t, s, explicit)
    assert m.teacher_layers == expected
    assert m.copy_embeddings is (strategy != "RANDOM_INIT")


@pytest.mark.parametrize(
    "args, error",
    [
        (("EVERY_K", 12, 5), IndivisibleDepth),
        (("EXPLICIT", 12, 3, [1, 2]), InvalidExplicitList),
        (("EXPLICIT", 12, 3, [1, 2, 13]), InvalidExplicitList),
        (("EXPLICIT", 12, 3, [0, 2, 3]), InvalidExplicitList),
        (("EXPLICIT", 12, 3, [3, 2, 5]), InvalidExplicitList),
        (("EXPLICIT", 12, 3, [2, 2, 5]), InvalidExplicitList),
        (("EXPLICIT", 12, 3), InvalidExplicitList),
        (("FIRST_K", 2, 3), InvalidExplicitList),
    ],
)
def test_layer_map_errors(args, error):
    with pytest.raises(error):
        build_layer_map(*args)


def test_label():
    assert build_layer_map("EVERY_K", 12, 3).label == "4,8,12"
    assert build_layer_map("RANDOM_INIT", 12, 3).label == "random"


class TestSupervisionPairs:
    def test_task_specific_follows_map(self):
        m = build_layer_map("EVERY_K", 12, 3)
        assert supervision_pairs(m, Mode.TASK_SPECIFIC, 12, 3) == [(4, 1), (8, 2), (12, 3)]

    def test_task_agnostic_last_layer_only(self):
        m = build_layer_map("FIRST_K", 12, 3)
        assert supervision_pairs(m, "TASK_AGNOSTIC", 12, 3) == [(12, 3)]

    def test_empty_map_rejected(self):
        with pytest.raises(EmptyMapForTaskSpecific):
            supervision_pairs(build_layer_map("RANDOM_INIT", 12, 3), "TASK_SPECIFIC", 12, 3)


@pytest.mark.parametrize(
    "strategy, s, explicit",
    [("EVERY_K", 3, None), ("EXPLICIT", 3, [1, 8, 12]), ("FIRST_K", 3, None), ("FIRST_K", 6, None)],
)
def test_copied_blocks_bit_equal(strategy, s, explicit):
    t = teacher()
    m = build_layer_map(strategy, 12, s, explicit)
    ok, detail = init_fidelity(t, student(s), m)
    assert ok, detail


def test_copied_count_and_sources():
    t, stu = teacher(), student(3)
    report = initialize_student(stu, t, build_layer_map("EVERY_K", 12, 3), seed=3)
    heads = len(stu.head_parameter_names())
    assert report.copied_count == len(EMBEDDING_BLOCKS) + 3 * len(LAYER_BLOCKS) + heads
    assert report.random_count == len(stu.params) - report.copied_count
    assert report.sources[f"layers.2.{LAYER_BLOCKS[0]}"] == f"layers.8.{LAYER_BLOCKS[0]}"


def test_copies_are_independent_arrays():
    t, stu = teacher(), student(3)
    initialize_student(stu, t, build_layer_map("EVERY_K", 12, 3), seed=3)
    before = t.params[EMBEDDING_BLOCKS[0]].data.copy()
    stu.params[EMBEDDING_BLOCKS[0]].data += 1.0
    np.testing.assert_array_equal(t.params[EMBEDDING_BLOCKS[0]].data, before)


def test_embeddings_optional():
    t, stu = teacher(), student(3)
    report = initialize_student(stu, t, build_layer_map("EVERY_K", 12, 3, copy_embeddings=False), seed=3)
    assert not any(report.blocks[b] for b in EMBEDDING_BLOCKS)


def test_random_init_copies_nothing():
    t, stu = teacher(), student(3)
    report = initialize_student(stu, t, build_layer_map("RANDOM_INIT", 12, 3), seed=3)
    assert report.copied_count == 0


def test_deterministic_given_seed():
    t = teacher()
    m = build_layer_map("EVERY_K", 12, 3, copy_embeddings=False)
    a, b = student(3, seed=1), student(3, seed=2)
    initialize_student(a, t, m, seed=9)
    initialize_student(b, t, m, seed=9)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)


@given(st.integers(0, 1000), st.lists(st.integers(1, 6), min_size=2, max_size=2, unique=True))
def test_copied_layer_computes_like_teacher_layer(seed, chosen):
    """A copied block applied to the same input gives the teacher block's output exactly."""
    t = EncoderModel(tiny_config(6), seed=seed)
    stu = EncoderModel(tiny_config(2), seed=seed + 1)
    chosen = sorted(chosen)
    initialize_student(stu, t, build_layer_map("EXPLICIT", 6, 2, chosen), seed=seed)
    tokens, mask = tiny_batch(np.random.default_rng(seed))
    tr_t = forward_with_trace(t, tokens, mask)
    x = tr_t.hidden_states[chosen[0] - 2] if chosen[0] > 1 else tr_t.embeddings
    out_s = stu.layer_forward(1, x, mask)[0]
    np.testing.assert_array_equal(out_s.data, tr_t.hidden_states[chosen[0] - 1].data)


class TestErrors:
    def test_map_length(self):
        with pytest.raises(MapLengthMismatch):
            initialize_student(student(2), teacher(), build_layer_map("EVERY_K", 12, 3), seed=0)

    def test_width_mismatch(self):
        wide = EncoderModel(tiny_config(2, d=12, heads=2, ffn=16), seed=0)
        with pytest.raises(DimensionMismatch):
            initialize_student(wide, teacher(), build_layer_map("FIRST_K", 12, 2), seed=0)

    def test_past_teacher_depth(self):
        with pytest.raises(MapLengthMismatch):
            initialize_student(student(2), teacher(4), build_layer_map("EXPLICIT", 12, 2, [5, 12]), seed=0)
