import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import random_orthonormal, whitening_oracle

from bolt.errors import DegenerateBasisError, NumericError, ValidationError
from bolt.pipeline import task_vectors
from bolt.spectral import (
    StackedDirections,
    bases_from_container,
    bases_to_container,
    build_bases,
    orthogonalize,
    stack_directions,
    thin_svd,
)
from bolt.tensor_store import decode_container, encode_container


def orth_err(q):
    return np.linalg.norm(q.T @ q - np.eye(q.shape[1]))


def test_identity():
    f = thin_svd(np.eye(2))
    np.testing.assert_array_equal(f.sigma, [1.0, 1.0])
    np.testing.assert_array_equal(f.u, np.eye(2))
    np.testing.assert_array_equal(f.v, np.eye(2))


def test_signed_diagonal():
    f = thin_svd(np.array([[3.0, 0.0], [0.0, -2.0]]))
    np.testing.assert_allclose(f.sigma, [3.0, 2.0])
    np.testing.assert_allclose(f.u, np.eye(2), atol=1e-15)
    np.testing.assert_allclose(f.v, [[1.0, 0.0], [0.0, -1.0]], atol=1e-15)
    np.testing.assert_allclose(f.reconstruct(), [[3.0, 0.0], [0.0, -2.0]], atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_thin_svd_invariants(seed):
    m = np.random.default_rng(seed).standard_normal((5, 3))
    f = thin_svd(m)
    assert orth_err(f.u) <= 1e-10 and orth_err(f.v) <= 1e-10
    assert np.all(np.diff(f.sigma) <= 0) and f.sigma[-1] >= 0
    assert np.linalg.norm(m - f.reconstruct()) <= 1e-10 * max(1.0, np.linalg.norm(m))
    lead = np.abs(f.u).argmax(axis=0)
    assert np.all(f.u[lead, np.arange(f.k)] > 0)


def test_truncation_keeps_top_triplets(rng):
    m = rng.standard_normal((6, 4))
    full, top = thin_svd(m), thin_svd(m, 2)
    np.testing.assert_array_equal(top.sigma, full.sigma[:2])
    np.testing.assert_array_equal(top.u, full.u[:, :2])


def test_thin_svd_errors():
    with pytest.raises(NumericError):
        thin_svd(np.array([[1.0, np.nan]]))
    with pytest.raises(ValidationError):
        thin_svd(np.eye(3), 4)


def test_stack_shapes(rng):
    svds = [(f"s{i}", thin_svd(rng.standard_normal((4, 4)))) for i in range(2)]
    stack = stack_directions(svds, 1)
    assert stack.u_stack.shape == (4, 2) and stack.v_stack.shape == (4, 2) and stack.r == 2
    assert stack.provenance == (("s0", 0), ("s1", 0))


def test_single_source_passthrough(rng):
    f = thin_svd(rng.standard_normal((5, 3)))
    stack = stack_directions([("only", f)], 3)
    np.testing.assert_array_equal(stack.u_stack, f.u)


def test_library_stack_has_eight_sources(library):
    tvs = task_vectors(library.base, library.sources)
    svds = [(tv.source_id, thin_svd(tv.layers["W1"], 1)) for tv in tvs]
    stack = stack_directions(svds, 1)
    assert stack.r == 8
    assert len({sid for sid, _ in stack.provenance}) == 8


def test_orthonormal_stack_is_fixed_point(rng):
    u, v = random_orthonormal(rng, 6, 3), random_orthonormal(rng, 5, 3)
    b = orthogonalize(StackedDirections(u, v))
    assert np.abs(b.u_orth - u).max() <= 1e-12
    assert np.abs(b.v_orth - v).max() <= 1e-12


def test_positive_diagonal_gives_identity():
    d = np.array([[2.0, 0.0], [0.0, 3.0]])
    b = orthogonalize(StackedDirections(d, d))
    np.testing.assert_allclose(b.u_orth, np.eye(2), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_polar_matches_whitening(seed, r):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((8, r))
    v = rng.standard_normal((7, r))
    b = orthogonalize(StackedDirections(u, v))
    assert np.linalg.norm(b.u_orth - whitening_oracle(u)) <= 1e-8
    assert np.linalg.norm(b.v_orth - whitening_oracle(v)) <= 1e-8


def test_whitening_limit(rng):
    u = rng.standard_normal((8, 4))
    b = orthogonalize(StackedDirections(u, u), eps=1e-8)
    assert np.linalg.norm(b.u_orth - whitening_oracle(u, 1e-12)) <= 1e-8


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_idempotence_and_span(seed):
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((9, 4)), rng.standard_normal((6, 4))
    once = orthogonalize(StackedDirections(u, v))
    twice = orthogonalize(once.as_stack())
    assert np.abs(twice.u_orth - once.u_orth).max() <= 1e-10
    assert np.abs(twice.v_orth - once.v_orth).max() <= 1e-10
    resid = u - once.u_orth @ (once.u_orth.T @ u)
    assert np.linalg.norm(resid) <= 1e-8 * np.linalg.norm(u)


def test_rank_deficient_stack_keeps_r_columns(rng, caplog):
    col = rng.standard_normal((6, 1))
    u = np.hstack([col, col, rng.standard_normal((6, 1))])
    v = rng.standard_normal((5, 3))
    b = orthogonalize(StackedDirections(u, v))
    assert b.r == 3 and b.effective_rank_u == 2 and b.effective_rank_v == 3
    assert orth_err(b.u_orth) <= 1e-8
    assert "rank deficient" in caplog.text


def test_rank_cap_keeps_pairs_aligned(rng):
    u, v = rng.standard_normal((8, 6)), rng.standard_normal((7, 6))
    b = orthogonalize(StackedDirections(u, v), rank_cap=3)
    assert b.r == 3 and orth_err(b.u_orth) <= 1e-8 and orth_err(b.v_orth) <= 1e-8


def test_degenerate_and_oversized_stacks():
    with pytest.raises(DegenerateBasisError):
        orthogonalize(StackedDirections(np.zeros((3, 2)), np.ones((3, 2))))
    with pytest.raises(ValidationError):
        orthogonalize(StackedDirections(np.ones((2, 3)), np.ones((4, 3))))


def test_build_is_deterministic(library):
    tvs = task_vectors(library.base, library.sources)
    a, b = build_bases(tvs, 1), build_bases(tvs, 1)
    for name in a:
        assert a[name].u_orth.tobytes() == b[name].u_orth.tobytes()
        assert a[name].v_orth.tobytes() == b[name].v_orth.tobytes()


def test_library_bases_are_orthonormal(library):
    tvs = task_vectors(library.base, library.sources)
    for k in (1, 2, 4):
        for name, b in build_bases(tvs, k, fit_layer=True).items():
            assert b.r == min(8 * k, *b.shape)
            assert orth_err(b.u_orth) <= 1e-8 and orth_err(b.v_orth) <= 1e-8


def test_fit_layer_caps_small_layers(library):
    tvs = task_vectors(library.base, library.sources)
    bases = build_bases(tvs, 8, fit_layer=True)
    assert bases["W2"].r == min(bases["W2"].shape)
    assert bases["W1"].r == min(bases["W1"].shape)


def test_basis_container_roundtrip(library):
    bases = build_bases(task_vectors(library.base, library.sources), 1)
    back = bases_from_container(decode_container(encode_container(bases_to_container(bases))))
    for name, b in bases.items():
        np.testing.assert_array_equal(back[name].u_orth, b.u_orth)
        assert back[name].effective_rank_u == b.effective_rank_u
