"""
Model zoo: construction of every family, parameter budgets, invariance of the
fully equivariant stack, and the checkpoint container.
"""

import numpy as np
import pytest
from pydantic import ValidationError

from conftest import tiny_spec
from equirobust import models
from equirobust.groups import P4Group
from equirobust.models import CheckpointVersionError, ChecksumError, SpecMismatchError
from equirobust.schemas import ModelSpec, NamedModelSpec
from equirobust.tensor import NonFiniteError, ShapeError

ARCHITECTURES = ["baseline", "parallel_rot", "parallel_scale", "parallel_rot_scale", "cascaded",
                 "weighted_parallel", "fully_equivariant"]


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_every_family_builds_and_runs(arch, rng):
    model = models.build(tiny_spec(arch))
    logits = model(rng.uniform(size=(2, 1, 8, 8)))
    assert logits.shape == (2, 4)
    assert np.all(np.isfinite(logits.data))
    assert model.architecture_id == arch


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_parameter_budget_matches_baseline(arch):
    baseline = models.parameter_count(ModelSpec(architecture_id="baseline"))
    count = models.parameter_count(ModelSpec(architecture_id=arch))
    assert abs(count - baseline) <= 0.10 * baseline


def test_build_is_deterministic_per_seed():
    a = models.build(tiny_spec("parallel_rot", seed=3)).state_dict()
    b = models.build(tiny_spec("parallel_rot", seed=3)).state_dict()
    c = models.build(tiny_spec("parallel_rot", seed=4)).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not all(np.array_equal(a[k], c[k]) for k in a)


def test_fully_equivariant_logits_are_rotation_invariant(rng):
    model = models.build(tiny_spec("fully_equivariant"))
    p4 = P4Group()
    for _ in range(10):
        x = rng.uniform(size=(1, 1, 8, 8))
        base = model(x).data
        for r in p4.elements:
            assert np.max(np.abs(model(p4.act_input(r, x)).data - base)) <= 1e-10


def test_fully_equivariant_has_no_standard_conv():
    assert not models.contains_standard_conv(models.build(tiny_spec("fully_equivariant")))
    assert models.contains_standard_conv(models.build(tiny_spec("baseline")))


def test_input_size_must_fit_the_pooling_schedule(rng):
    model = models.build(tiny_spec("baseline"))
    with pytest.raises(ShapeError):
        model(rng.uniform(size=(1, 1, 6, 6)))
    with pytest.raises(ShapeError):
        model(rng.uniform(size=(1, 3, 8, 8)))


def test_non_finite_activation_names_the_layer(rng):
    model = models.build(tiny_spec("baseline"))
    model.layers[0].weight.data[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError) as info:
        model(rng.uniform(size=(1, 1, 8, 8)))
    assert info.value.layer_index == 0


def test_unknown_architecture_is_rejected_by_the_schema():
    with pytest.raises(ValidationError):
        ModelSpec(architecture_id="resnet")
    with pytest.raises(ValidationError):
        ModelSpec(architecture_id="baseline", depth=6)


def test_checkpoint_round_trip(tmp_path, rng):
    model = models.build(tiny_spec("weighted_parallel", seed=2))
    model.train()
    model(rng.uniform(size=(4, 1, 8, 8)))
    model.eval()
    path = tmp_path / "m.eqrb"
    digest = models.save(model, path)
    loaded = models.load(path, model.spec)
    x = rng.uniform(size=(3, 1, 8, 8))
    np.testing.assert_array_equal(loaded.predict(x), model.predict(x))
    assert models.save(loaded, tmp_path / "again.eqrb") == digest
    assert models.file_digest(path) == digest


def test_named_spec_checkpoints_under_its_plain_spec(tmp_path):
    named = tiny_spec("baseline", name="base")
    model = models.build(named)
    models.save(model, tmp_path / "m.eqrb")
    assert isinstance(named, NamedModelSpec)
    assert models.load(tmp_path / "m.eqrb", named.to_spec()).spec.digest() == named.to_spec().digest()


def test_corrupted_checkpoint_is_detected(tmp_path):
    path = tmp_path / "m.eqrb"
    models.save(models.build(tiny_spec("baseline")), path)
    data = bytearray(path.read_bytes())
    data[40] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(ChecksumError):
        models.load(path)


def test_truncated_checkpoint_is_detected(tmp_path):
    path = tmp_path / "m.eqrb"
    models.save(models.build(tiny_spec("baseline")), path)
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(ChecksumError):
        models.load(path)


def test_checkpoint_for_a_different_spec_is_refused(tmp_path):
    path = tmp_path / "m.eqrb"
    models.save(models.build(tiny_spec("baseline", seed=0)), path)
    with pytest.raises(SpecMismatchError):
        models.load(path, tiny_spec("baseline", seed=1))


def test_checkpoint_header_carries_the_schema(tmp_path, monkeypatch):
    path = tmp_path / "m.eqrb"
    models.save(models.build(tiny_spec("baseline")), path)
    assert b'"schema":"equirobust.checkpoint/1"' in path.read_bytes()

    monkeypatch.setattr(models, "CHECKPOINT_SCHEMA", "equirobust.checkpoint/0")
    models.save(models.build(tiny_spec("baseline")), path)
    monkeypatch.undo()
    with pytest.raises(CheckpointVersionError):
        models.load(path)


@pytest.mark.parametrize("arch", ["parallel_rot", "parallel_rot_scale", "weighted_parallel"])
def test_rotation_branch_lifts_a_quarter_of_the_stage_width(arch):
    spec = ModelSpec(architecture_id=arch)
    rotation = models.build(spec).layers[0].branches[1]
    assert isinstance(rotation, models.RotationBranch)
    assert rotation.lift.out_filters == spec.channel_plan[0] // 4
