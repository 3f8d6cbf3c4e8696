"""Binary model files: round trips and rejection of damaged files."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alkiax import ApproxConfig, approximate, evaluate_batch, load, save
from alkiax.errors import CorruptBodyError, InvariantViolationError, ModelFormatError, VersionMismatchError
from alkiax.kernels import Kernel
from alkiax.oracles import SincosOracle

from oracles_for_tests import MixedFeasibilityOracle, VectorOracle

PROBES = np.random.default_rng(11).random((2000, 2))


@pytest.fixture(scope="module")
def model_bytes(tmp_path_factory):
    model, _ = approximate(SincosOracle(), None, ApproxConfig(1e-1))
    path = tmp_path_factory.mktemp("io") / "m.alkx"
    save(model, path)
    return model, path.read_bytes()


def write(tmp_path, data, name="x.alkx"):
    path = tmp_path / name
    path.write_bytes(bytes(data))
    return path


def assert_same_model(a, b, probes):
    assert a.kernel == b.kernel and a.epsilon == b.epsilon
    assert (a.p_lo, a.p_hi, a.output_dim) == (b.p_lo, b.p_hi, b.output_dim)
    assert len(a.tree.nodes) == len(b.tree.nodes)
    ea, eb = evaluate_batch(a, probes), evaluate_batch(b, probes)
    assert ea.values.tobytes() == eb.values.tobytes()
    assert np.array_equal(ea.status, eb.status)


@pytest.mark.parametrize("kernel", [Kernel("se", 0.2), Kernel("matern", 0.8, 0.5),
                                    Kernel("matern", 0.8, 1.5), Kernel("matern", 0.8, 2.5)],
                         ids=["se", "m12", "m32", "m52"])
def test_round_trip_is_bit_exact(tmp_path, kernel):
    # SE grids are badly conditioned, so keep them coarse
    p_hi = 3 if kernel.family == "se" else 5
    model, _ = approximate(SincosOracle(), None, ApproxConfig(2e-1, kernel=kernel, p_hi=p_hi))
    save(model, tmp_path / "a.alkx")
    again = load(tmp_path / "a.alkx")
    assert_same_model(model, again, PROBES)
    assert again.report_digest == model.report_digest and len(model.report_digest) == 64
    save(again, tmp_path / "b.alkx")
    assert (tmp_path / "a.alkx").read_bytes() == (tmp_path / "b.alkx").read_bytes()


def test_round_trip_with_infeasible_leaves_and_vector_output(tmp_path):
    mixed, _ = approximate(MixedFeasibilityOracle(), None, ApproxConfig(2e-2))
    save(mixed, tmp_path / "mixed.alkx")
    assert_same_model(mixed, load(tmp_path / "mixed.alkx"), PROBES)
    vec_oracle = VectorOracle()
    vec, _ = approximate(vec_oracle, None, ApproxConfig(1e-1))
    save(vec, tmp_path / "vec.alkx")
    back = load(tmp_path / "vec.alkx")
    pts = vec_oracle.domain.from_unit(PROBES)
    assert_same_model(vec, back, pts)
    assert back.output_dim == 2


def test_save_leaves_no_temporary_file(tmp_path, model_bytes):
    model, _ = model_bytes
    save(model, tmp_path / "m.alkx")
    assert [p.name for p in tmp_path.iterdir()] == ["m.alkx"]


def test_bad_magic_and_empty_file(tmp_path, model_bytes):
    _, data = model_bytes
    with pytest.raises(ModelFormatError, match="not an ALKX"):
        load(write(tmp_path, b""))
    with pytest.raises(ModelFormatError):
        load(write(tmp_path, b"ALKY" + data[4:]))


def test_version_mismatch(tmp_path, model_bytes):
    _, data = model_bytes
    bumped = bytearray(data)
    struct.pack_into("<H", bumped, 4, struct.unpack_from("<H", data, 4)[0] + 1)
    with pytest.raises(VersionMismatchError):
        load(write(tmp_path, bumped))


def test_truncation_is_corruption(tmp_path, model_bytes):
    _, data = model_bytes
    for cut in (1, 8, len(data) // 2):
        with pytest.raises(ModelFormatError):
            load(write(tmp_path, data[:-cut]))
    with pytest.raises(CorruptBodyError):
        load(write(tmp_path, data[:-1]))


def test_flipped_body_byte_fails_checksum(tmp_path, model_bytes):
    _, data = model_bytes
    damaged = bytearray(data)
    damaged[-5] ^= 0x10
    with pytest.raises(CorruptBodyError, match="checksum"):
        load(write(tmp_path, damaged))


def test_dimension_mismatch_is_invariant_violation(tmp_path, model_bytes):
    _, data = model_bytes
    damaged = bytearray(data)
    struct.pack_into("<H", damaged, 6, 3)
    with pytest.raises(InvariantViolationError, match="n=3"):
        load(write(tmp_path, damaged))


@settings(max_examples=150)
@given(st.data())
def test_random_damage_never_escapes_as_other_errors(tmp_path_factory, model_bytes, data):
    _, original = model_bytes
    damaged = bytearray(original)
    for _ in range(data.draw(st.integers(1, 4))):
        i = data.draw(st.integers(0, len(damaged) - 1))
        damaged[i] ^= data.draw(st.integers(1, 255))
    path = write(tmp_path_factory.mktemp("fuzz"), damaged)
    try:
        model = load(path)
    except ModelFormatError:
        return
    # damage confined to unchecked header scalars may still decode
    evaluate_batch(model, PROBES[:10])
