import numpy as np
import pytest

from kbmpc import container, edmd, pipeline
from kbmpc.lifting import ProbeConfig, build_basis
from kbmpc.plant import DEFAULT_LIMITS, DEFAULT_PARAMS, rk4_step, tractor_trailer_system


def small_cfg(**kw):
    return edmd.DataGenConfig(n_traj=kw.pop("n_traj", 50), steps=kw.pop("steps", 10), **kw)


def synthetic_bilinear(rng, N, m, K):
    A = rng.normal(size=(N, N))
    A *= 0.9 / max(abs(np.linalg.eigvals(A)))
    B = rng.normal(size=(N, m))
    H = 0.1 * rng.normal(size=(m, N, N))
    Z = rng.normal(size=(K, N))
    U = rng.uniform(-1, 1, (K, m))
    Zn = Z @ A.T + U @ B.T + sum(U[:, j:j + 1] * (Z @ H[j].T) for j in range(m))
    return A, B, H, Z, U, Zn


def test_transition_counts():
    assert edmd.DataGenConfig().n_traj * edmd.DataGenConfig().steps == 80_000
    ds = edmd.generate_dataset(small_cfg())
    assert ds.n_transitions == 500
    assert ds.X.shape == ds.X_next.shape == (500, 6)
    assert ds.U.shape == (500, 2)


def test_dataset_transitions_follow_slip_plant():
    ds = edmd.generate_dataset(small_cfg(n_traj=5))
    assert np.all((ds.mu >= 0.97) & (ds.mu <= 0.99))
    assert np.all(ds.kappa == 0.94)
    for r in range(5):
        p = DEFAULT_PARAMS.with_slip(ds.mu[r], ds.kappa[r])
        for k in range(ds.controls.shape[1]):
            np.testing.assert_allclose(ds.states[r, k + 1], rk4_step(ds.states[r, k], ds.controls[r, k], p, ds.Ts),
                                       rtol=0, atol=1e-13)


def test_dataset_sampling_box():
    ds = edmd.generate_dataset(small_cfg(n_traj=400, steps=1))
    x0 = ds.states[:, 0]
    lim = DEFAULT_LIMITS
    assert np.all(np.abs(x0[:, :2]) <= 10)
    assert np.all(np.abs(x0[:, 2] - x0[:, 3]) <= lim.dtheta_max)
    assert np.all(np.abs(x0[:, 4]) <= lim.tan_phi_max)
    assert np.all(np.abs(x0[:, 5]) <= lim.v_max)
    assert np.all(np.abs(ds.controls) <= lim.u_max)


def test_dataset_determinism_and_threads(tmp_path):
    a = edmd.generate_dataset(small_cfg(seed=3))
    b = edmd.generate_dataset(small_cfg(seed=3), threads=3)
    edmd.save_dataset(a, tmp_path / "a.kbds")
    edmd.save_dataset(b, tmp_path / "b.kbds")
    assert (tmp_path / "a.kbds").read_bytes() == (tmp_path / "b.kbds").read_bytes()
    back = edmd.load_dataset(tmp_path / "a.kbds")
    np.testing.assert_array_equal(back.states, a.states)
    assert back.Ts == a.Ts


def test_generate_errors():
    with pytest.raises(ValueError):
        edmd.generate_dataset(small_cfg(n_traj=0))
    with pytest.raises(ValueError):
        edmd.generate_dataset(small_cfg(Ts=0.0))


@pytest.mark.parametrize("N, m", [(5, 1), (12, 2), (20, 3)])
def test_exact_bilinear_recovery(N, m):
    rng = np.random.default_rng(N * 10 + m)
    A, B, H, Z, U, Zn = synthetic_bilinear(rng, N, m, 10_000)
    model = edmd.fit_arrays(Z, U, Zn, ridge=1e-10, n_y=2)
    assert np.linalg.norm(model.A - A) < 1e-8
    assert np.linalg.norm(model.B - B) < 1e-8
    assert np.linalg.norm(model.H - H) < 1e-8
    np.testing.assert_array_equal(model.C, np.eye(2, N))


def test_unexcited_inputs_shrink_to_zero(rng):
    N = 4
    A = 0.5 * np.eye(N)
    Z = rng.normal(size=(500, N))
    U = np.zeros((500, 2))
    model = edmd.fit_arrays(Z, U, Z @ A.T, ridge=1e-6, n_y=1)
    np.testing.assert_allclose(model.A, A, atol=1e-6)
    assert np.max(np.abs(model.B)) == 0.0
    assert np.max(np.abs(model.H)) == 0.0


def test_normal_equation_optimality(rng):
    _, _, _, Z, U, Zn = synthetic_bilinear(rng, 6, 2, 800)
    Zn = Zn + 0.01 * rng.normal(size=Zn.shape)
    lam = 1e-3
    model = edmd.fit_arrays(Z, U, Zn, ridge=lam, n_y=2)
    Psi = edmd.features_from_lifted(Z, U)
    G = np.hstack([model.A] + list(model.H) + [model.B])
    grad = 2 * (Psi.T @ Psi + lam * np.eye(Psi.shape[1])) @ G.T - 2 * Psi.T @ Zn
    assert np.max(np.abs(grad)) <= 1e-8 * np.max(np.abs(Psi.T @ Zn))


def test_rank_deficient_without_ridge(rng):
    Z = rng.normal(size=(5, 3))
    U = rng.normal(size=(5, 1))
    with pytest.raises(edmd.RankDeficientError):
        edmd.fit_arrays(Z, U, Z, ridge=0.0, n_y=1)
    with pytest.raises(ValueError):
        edmd.fit_arrays(Z, U, Z, ridge=-1.0, n_y=1)


def test_fit_threads_and_chunks_do_not_change_result():
    sys = tractor_trailer_system(DEFAULT_PARAMS)
    basis = build_basis(sys, 1, ProbeConfig.for_tractor_trailer(DEFAULT_LIMITS))
    ds = edmd.generate_dataset(small_cfg(n_traj=60))
    a = edmd.fit(ds, basis, chunk_traj=20)
    b = edmd.fit(ds, basis, chunk_traj=20, threads=3)
    np.testing.assert_array_equal(a.A, b.A)
    c = edmd.fit(ds, basis)
    np.testing.assert_allclose(a.A, c.A, rtol=1e-6, atol=1e-8)


def test_model_roundtrip_and_mismatch(tmp_path, desk_model):
    path = tmp_path / "m.kbmd"
    edmd.save_model(desk_model, path)
    back = edmd.load_model(path, desk_model.basis)
    for name in ("A", "B", "H", "C"):
        assert getattr(back, name).tobytes() == getattr(desk_model, name).tobytes()
    assert back.Ts == desk_model.Ts
    other = build_basis(tractor_trailer_system(DEFAULT_PARAMS), 1,
                        ProbeConfig.for_tractor_trailer(DEFAULT_LIMITS))
    with pytest.raises(edmd.ModelMismatchError):
        edmd.load_model(path, other)
    blob = path.read_bytes()
    (tmp_path / "cut.kbmd").write_bytes(blob[:-100])
    with pytest.raises(container.ContainerError):
        edmd.load_model(tmp_path / "cut.kbmd")
    with pytest.raises(container.ContainerError):
        edmd.load_dataset(path)  # wrong magic


def test_model_version_check(tmp_path, desk_model):
    path = tmp_path / "m.kbmd"
    edmd.save_model(desk_model, path, {"model_version": 99})
    with pytest.raises(container.ContainerError, match="version"):
        edmd.load_model(path)


def test_heldout_one_step_position_error(desk_cfg, desk_model):
    report = pipeline.validation_report(desk_cfg, desk_model)
    assert report["one_step_position_rms"] <= 1e-3


def test_container_framing():
    blob = container.dumps(b"TESTMAGC", {"a": 1}, {"x": np.arange(6.0).reshape(2, 3)})
    meta, arr = container.loads(blob, b"TESTMAGC")
    assert meta == {"a": 1}
    np.testing.assert_array_equal(arr["x"], np.arange(6.0).reshape(2, 3))
    corrupted = bytearray(blob)
    corrupted[-40] ^= 1
    with pytest.raises(container.ContainerError):
        container.loads(bytes(corrupted), b"TESTMAGC")
    with pytest.raises(ValueError):
        container.dumps(b"short", {}, {})
