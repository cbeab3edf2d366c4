import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nullora import numerics
from nullora.numerics import (
    full_svd,
    null_space_left,
    null_space_right,
    numerical_rank,
    random_orthonormal,
    svd,
)

from conftest import planted


def test_svd_identity():
    res = svd(np.eye(3))
    np.testing.assert_array_equal(res.sigma, [1, 1, 1])
    np.testing.assert_array_equal(res.U, np.eye(3))
    np.testing.assert_array_equal(res.Vt, np.eye(3))


def test_svd_zero():
    np.testing.assert_array_equal(svd(np.zeros((3, 3))).sigma, [0, 0, 0])


def test_svd_rank_one_outer_product():
    u = np.array([1.0, 2.0, 2.0])
    v = np.array([3.0, 0.0, 4.0])
    M = np.outer(u, v)
    res = svd(M)
    # |u| = 3, |v| = 5
    np.testing.assert_allclose(res.sigma, [15, 0, 0], atol=1e-12)
    np.testing.assert_allclose(res.reconstruct(), M, atol=1e-12)
    np.testing.assert_allclose(res.U[:, 0], u / 3, atol=1e-12)


@pytest.mark.parametrize("shape", [(64, 64), (10, 30), (30, 10), (1, 5), (5, 1)])
def test_svd_invariants(rng, shape):
    M = rng.standard_normal(shape)
    res = svd(M)
    k = min(shape)
    assert res.U.shape == (shape[0], k) and res.Vt.shape == (k, shape[1])
    assert np.all(np.diff(res.sigma) <= 0) and np.all(res.sigma >= 0)
    assert numerics.orthonormality_error(res.U) < 1e-10
    assert numerics.orthonormality_error(res.Vt.T) < 1e-10
    rel = np.linalg.norm(res.reconstruct() - M) / np.linalg.norm(M)
    assert rel < 1e-8
    # sign convention
    idx = np.argmax(np.abs(res.U), axis=0)
    assert np.all(res.U[idx, np.arange(k)] >= 0)


def test_full_svd_reconstructs_and_is_orthogonal(rng):
    M = planted(12, 7, 3, seed=5)
    res = full_svd(M)
    assert res.U.shape == (12, 12) and res.Vt.shape == (7, 7)
    assert numerics.orthonormality_error(res.U) < 1e-10
    assert numerics.orthonormality_error(res.Vt.T) < 1e-10
    k = res.sigma.size
    np.testing.assert_allclose((res.U[:, :k] * res.sigma) @ res.Vt[:k], M, atol=1e-12)


def test_svd_deterministic_in_process(rng):
    M = rng.standard_normal((40, 25))
    a, b = svd(M), svd(M.copy())
    assert a.U.tobytes() == b.U.tobytes()
    assert a.sigma.tobytes() == b.sigma.tobytes()
    assert a.Vt.tobytes() == b.Vt.tobytes()


def test_svd_deterministic_across_processes(rng):
    M = rng.standard_normal((20, 20))
    code = (
        "import sys, numpy as np; from nullora.numerics import svd;"
        "M = np.frombuffer(sys.stdin.buffer.read()).reshape(20, 20);"
        "r = svd(M); sys.stdout.buffer.write(r.U.tobytes() + r.sigma.tobytes() + r.Vt.tobytes())"
    )
    outs = [
        subprocess.run([sys.executable, "-c", code], input=M.tobytes(), capture_output=True, check=True).stdout
        for _ in range(2)
    ]
    local = svd(M)
    assert outs[0] == outs[1] == local.U.tobytes() + local.sigma.tobytes() + local.Vt.tobytes()


def test_svd_rejects_non_finite():
    with pytest.raises(ValueError, match="non-finite"):
        svd(np.array([[1.0, np.nan]]))


def test_svd_convergence_failure_names_matrix(monkeypatch):
    def boom(*a, **k):
        raise np.linalg.LinAlgError("SVD did not converge")

    monkeypatch.setattr(np.linalg, "svd", boom)
    with pytest.raises(numerics.SvdError, match="layer7"):
        svd(np.eye(2), name="layer7")


@pytest.mark.parametrize(
    "sigma, expected",
    [((1, 1, 1), 3), ((0, 0), 0), ((10, 1e-3, 1e-9), 2), ((), 0)],
)
def test_numerical_rank(sigma, expected):
    assert numerical_rank(sigma, 1e-5) == expected


def test_null_space_left_examples():
    U = null_space_left(np.array([[1.0, 0.0], [0.0, 0.0]]))
    np.testing.assert_array_equal(U, [[0.0], [1.0]])
    assert null_space_left(np.eye(4)).shape == (4, 0)
    Z = null_space_left(np.zeros((3, 3)))
    np.testing.assert_allclose(Z @ Z.T, np.eye(3), atol=1e-12)


def test_null_space_right_examples():
    V = null_space_right(np.array([[1.0, 0.0], [0.0, 0.0]]))
    np.testing.assert_array_equal(V, [[0.0, 1.0]])
    assert null_space_right(np.eye(4)).shape == (0, 4)
    Z = null_space_right(np.zeros((2, 3)))
    np.testing.assert_allclose(Z @ Z.T, np.eye(3), atol=1e-12)


@pytest.mark.parametrize("shape, rank", [((20, 20), 15), ((30, 12), 7), ((12, 30), 7)])
def test_null_spaces_planted(shape, rank):
    W = planted(*shape, rank, seed=11)
    U = null_space_left(W)
    V = null_space_right(W)
    assert U.shape == (shape[0], shape[0] - rank)
    assert V.shape == (shape[1] - rank, shape[1])
    assert numerics.orthonormality_error(U) < 1e-10
    assert numerics.orthonormality_error(V.T) < 1e-10
    assert np.linalg.norm(W.T @ U) <= 1e-10
    assert np.linalg.norm(W @ V.T) <= 1e-10


@pytest.mark.parametrize("k", [0, 1, 4, 16])
def test_planted_rank_recovery(k):
    W = planted(64, 64, 64 - k, seed=k)
    rep = numerics.rank_report(W)
    assert rep.numerical_rank == 64 - k
    assert rep.nullity_left == rep.nullity_right == k
    assert rep.numerical_rank + null_space_right(W).shape[0] == 64
    assert rep.numerical_rank + null_space_left(W).shape[1] == 64


@given(
    d_out=st.integers(1, 12),
    d_in=st.integers(1, 12),
    frac=st.floats(0, 1),
    seed=st.integers(0, 2**16),
)
@settings(max_examples=60, deadline=None)
def test_rank_nullity_property(d_out, d_in, frac, seed):
    rank = int(frac * min(d_out, d_in))
    W = planted(d_out, d_in, rank, seed) if rank else np.zeros((d_out, d_in))
    rep = numerics.rank_report(W)
    assert rep.numerical_rank == rank
    assert rep.numerical_rank + null_space_right(W).shape[0] == d_in
    assert rep.numerical_rank + null_space_left(W).shape[1] == d_out


def test_random_orthonormal():
    assert random_orthonormal(4, 0, 1).shape == (4, 0)
    a = random_orthonormal(8, 3, seed=7)
    b = random_orthonormal(8, 3, seed=7)
    assert a.tobytes() == b.tobytes()
    assert numerics.orthonormality_error(a) < 1e-10
    with pytest.raises(ValueError):
        random_orthonormal(3, 4, 0)


@given(rows=st.integers(1, 40), seed=st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_random_orthonormal_property(rows, seed):
    cols = seed % rows + 1
    Q = random_orthonormal(rows, cols, seed)
    assert numerics.orthonormality_error(Q) < 1e-10
