import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from props import check_poison_case
from vssbackdoor.attacks import (PoisonPlan, TriggerSpec, apply_trigger, builtin_blend_pattern,
                                 make_per_patch_trigger, poison_dataset, read_manifest, select_poison_indices,
                                 tile_per_patch_trigger, write_manifest)
from vssbackdoor.defenses import DefenseSpec, patch_shuffle
from vssbackdoor.errors import DimensionError, DomainError, EmptyMaskError, InfeasibleRateError, PlanError


def test_spec_validation():
    with pytest.raises(DomainError):
        TriggerSpec("sticker")
    with pytest.raises(DomainError):
        TriggerSpec("blend", alpha=1.5)
    with pytest.raises(DomainError):
        TriggerSpec("per_patch_pixel", gap=-1)
    with pytest.raises(DomainError):
        TriggerSpec("per_patch_pixel", intensity=-3)
    spec = TriggerSpec("corner_patch", pos=[1, 2])
    assert spec.pos == (1, 2)
    assert TriggerSpec.from_dict(spec.to_dict()) == spec


def test_per_patch_lattice():
    m = make_per_patch_trigger(16, 1, 30)
    assert np.count_nonzero(m) == 64
    assert np.all(m[::2, ::2] == 30) and np.all(m[1::2] == 0) and np.all(m[:, 1::2] == 0)
    one = make_per_patch_trigger(16, 15, 30)
    assert np.count_nonzero(one) == 1 and one[0, 0] == 30
    with pytest.raises(EmptyMaskError):
        make_per_patch_trigger(16, 16, 30)
    with pytest.raises(DomainError):
        make_per_patch_trigger(1, 0, 30)
    tiled = tile_per_patch_trigger(32, 48, 16, 1, 30)
    assert tiled.shape == (32, 48)
    assert np.array_equal(tiled[16:32, 32:48], m)


def test_blend_identity_and_pattern(rng):
    x = rng.random((2, 8, 8, 3))
    assert np.array_equal(apply_trigger(x, TriggerSpec("blend", alpha=0.0)), x)
    pattern = rng.random((8, 8, 3))
    np.testing.assert_allclose(apply_trigger(x, TriggerSpec("blend", alpha=1.0, pattern=pattern)), np.stack([pattern] * 2))
    np.testing.assert_allclose(apply_trigger(x[0], TriggerSpec("blend", alpha=1.0)), builtin_blend_pattern(8, 8, 3))
    with pytest.raises(DimensionError):
        apply_trigger(x, TriggerSpec("blend", pattern=rng.random((4, 4, 3))))


def test_per_patch_zero_intensity(rng):
    x = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    assert np.array_equal(apply_trigger(x, TriggerSpec("per_patch_pixel", intensity=0, patch_size=4)), x)


def test_per_patch_additive_clipped():
    x = np.full((4, 4, 1), 240, dtype=np.uint8)
    out = apply_trigger(x, TriggerSpec("per_patch_pixel", intensity=30, patch_size=4, gap=1))
    assert out[0, 0, 0] == 255 and out[0, 1, 0] == 240 and out[2, 2, 0] == 255
    xf = np.full((4, 4, 1), 0.5, dtype=np.float32)
    outf = apply_trigger(xf, TriggerSpec("per_patch_pixel", intensity=30, patch_size=4, gap=1))
    assert outf.dtype == np.float32 and outf[0, 0, 0] == pytest.approx(0.5 + 30 / 255)


def test_corner_patch_placement():
    x = np.zeros((2, 32, 32, 3), dtype=np.uint8)
    out = apply_trigger(x, TriggerSpec("corner_patch"))
    assert np.all(out[:, 29:, 29:] == 255) and out.sum() == 2 * 9 * 3 * 255
    out = apply_trigger(x[0], TriggerSpec("corner_patch", pos="top_left", size=2))
    assert np.all(out[:2, :2] == 255) and out[2:].sum() == 0
    big = np.zeros((224, 224, 3), dtype=np.float32)
    assert apply_trigger(big, TriggerSpec("corner_patch")).sum() == 16 * 16 * 3
    with pytest.raises(DimensionError):
        apply_trigger(np.zeros((2, 2, 3)), TriggerSpec("corner_patch", size=3))
    with pytest.raises(DimensionError):
        apply_trigger(x, TriggerSpec("corner_patch", pos=(31, 31)))


def test_select_counts():
    labels = np.repeat(np.arange(10), 100)
    assert select_poison_indices(labels, 0.0, 0, 1).indices.size == 0
    plan = select_poison_indices(labels, 0.02, 0, 1)
    assert plan.indices.size == 20 and np.all(labels[plan.indices] != 0)
    big = np.repeat(np.arange(10), 5000)
    assert select_poison_indices(big, 0.003, 0, 7).indices.size == 150
    with pytest.raises(InfeasibleRateError):
        select_poison_indices(labels, 0.95, 0, 1)
    with pytest.raises(DomainError):
        select_poison_indices(labels, 1.5, 0, 1)


def test_select_deterministic():
    labels = np.random.default_rng(3).integers(0, 10, 500)
    a, b = select_poison_indices(labels, 0.1, 2, 42), select_poison_indices(labels, 0.1, 2, 42)
    assert np.array_equal(a.indices, b.indices)
    assert not np.array_equal(a.indices, select_poison_indices(labels, 0.1, 2, 43).indices)


def test_poison_dataset_bookkeeping(rng, tmp_path):
    labels = rng.integers(0, 10, 200)
    images = rng.integers(0, 256, (200, 8, 8, 3), dtype=np.uint8)
    spec = TriggerSpec("corner_patch", target=0)
    empty = poison_dataset(images, labels, spec, PoisonPlan(0.0, np.zeros(0, dtype=int), 0, 0))
    assert np.array_equal(empty.images, images) and empty.poison_indices.size == 0
    plan = select_poison_indices(labels, 0.1, 0, 5)
    out = poison_dataset(images, labels, spec, plan)
    assert len(out.clean_indices) + len(out.poison_indices) == 200
    manifest = out.manifest()
    assert [r["id"] for r in manifest] == plan.indices.tolist()
    assert all(r["new_label"] == 0 != r["original_label"] for r in manifest)
    write_manifest(manifest, tmp_path / "m.jsonl")
    assert read_manifest(tmp_path / "m.jsonl") == manifest


def test_poison_dataset_plan_errors(rng):
    labels = np.array([1, 2, 0, 3])
    images = np.zeros((4, 8, 8, 3), dtype=np.uint8)
    spec = TriggerSpec("corner_patch", target=0)
    for idx in ([1, 1], [7], [2]):
        with pytest.raises(PlanError):
            poison_dataset(images, labels, spec, PoisonPlan(0.5, np.array(idx), 0, 0))


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_poison_properties(seed):
    check_poison_case(np.random.default_rng(seed))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([np.uint8, np.float32]), st.integers(0, 3))
def test_per_patch_commutes_with_shuffle(seed, dtype, gap):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 256, (16, 16, 3)).astype(dtype)
    if dtype == np.float32:
        x /= 255
    spec = TriggerSpec("per_patch_pixel", patch_size=4, gap=gap, intensity=float(rng.uniform(0, 255)))
    perm = rng.permutation(16)
    d = DefenseSpec("patch_shuffle", patch_size=4)
    assert np.array_equal(patch_shuffle(apply_trigger(x, spec), d, permutation=perm),
                          apply_trigger(patch_shuffle(x, d, permutation=perm), spec))
