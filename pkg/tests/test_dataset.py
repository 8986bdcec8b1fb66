import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddstc import dataset as ds
from ddstc import experiment
from ddstc import lmi
from ddstc.plant import SystemMatrices, lift, pendulum_zoh

SYNTH = SystemMatrices([[0.9, 0.2], [-0.1, 0.8]], [[0.0], [1.0]], np.eye(2))


def scalar_traj(x, u):
    x = np.asarray(x, dtype=float).reshape(-1, 1)
    u = np.asarray(u, dtype=float).reshape(-1, 1)
    return ds.Trajectory(1, x, u, np.zeros_like(x))


def pendulum_theta(seed, rho=80, w_bar=0.01):
    sys = pendulum_zoh()
    tr = ds.collect_open_loop(sys, rho, noise_law=ds.ball_noise(w_bar), seed=seed)
    dm = ds.assemble_matrices(tr, 1, rho)
    return ds.build_theta(dm, ds.ball_noise_qmi(w_bar, rho, 2), sys.e), tr


def sdp_norm_bound(theta, lo=0.0, hi=10.0, iters=40):
    """Bisection on the matrix S-lemma: ||A|| <= lam on the kernel set iff
    diag(-J^T J, lam^2 I) - tau Theta >= 0 for some tau >= 0."""
    n, m = theta.n, theta.m
    th = theta.theta / np.abs(theta.theta).max()
    jj = np.zeros((m + n, m + n))
    jj[:n, :n] = -np.eye(n)
    ee = np.zeros((m + n, m + n))
    ee[m:, m:] = np.eye(n)

    def feasible(lam):
        prob = lmi.LmiProblem()
        prob.scalar("tau", lmi.POSITIVE)
        prob.add(lambda v: jj + lam ** 2 * ee - v["tau"] * th, lmi.PSD)
        return lmi.solve(prob).feasible

    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if feasible(mid) else (mid, hi)
    return hi


# -- collection ----------------------------------------------------------

def test_zero_everything_gives_zero_trajectory(pendulum):
    tr = ds.collect_open_loop(pendulum, 25, input_law=lambda rng, t, p: np.zeros(p))
    assert not np.any(tr.x) and not np.any(tr.u) and not np.any(tr.w)


def test_collection_is_deterministic(pendulum):
    a = ds.collect_open_loop(pendulum, 60, noise_law=ds.ball_noise(0.01), seed=7, x0=[1, 2])
    b = ds.collect_open_loop(pendulum, 60, noise_law=ds.ball_noise(0.01), seed=7, x0=[1, 2])
    for f in ("x", "u", "w", "leader"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_collected_noise_respects_bound_and_inputs_in_box(pendulum):
    tr = ds.collect_open_loop(pendulum, 119, noise_law=ds.ball_noise(0.01), seed=1)
    assert np.linalg.norm(tr.w, axis=1).max() <= 0.01
    assert np.abs(tr.u).max() <= 1.0
    assert tr.x.shape == (120, 2) and tr.u.shape == (119, 1)


def test_collection_replays_plant(pendulum):
    tr = ds.collect_open_loop(pendulum, 30, noise_law=ds.ball_noise(0.01), seed=2, x0=[1, 0],
                              leader0=[2, -1])
    for t in range(30):
        np.testing.assert_allclose(tr.x[t + 1], pendulum.a @ tr.x[t] + pendulum.b @ tr.u[t] + pendulum.e @ tr.w[t],
                                   atol=1e-15)
        np.testing.assert_allclose(tr.leader[t + 1], pendulum.a @ tr.leader[t], atol=1e-15)


def test_collection_rejects_empty_horizon(pendulum):
    with pytest.raises(ds.DataError):
        ds.collect_open_loop(pendulum, 0)


# -- data matrices -------------------------------------------------------

def test_scalar_single_column_layout():
    dm = ds.assemble_matrices(scalar_traj([1, 0], [0]), 1, 1)
    np.testing.assert_array_equal(dm.delta, [[1]])
    np.testing.assert_array_equal(dm.delta_plus[1], [[0]])
    np.testing.assert_array_equal(dm.u_s[1], [[0]])


def test_hankel_layout():
    u = [10, 11, 12, 13]
    dm = ds.assemble_matrices(scalar_traj([0, 1, 2, 3, 4], u), 2, 3)
    np.testing.assert_array_equal(dm.u_s[2], [[10, 11, 12], [11, 12, 13]])
    np.testing.assert_array_equal(dm.delta_plus[2], [[2, 3, 4]])
    np.testing.assert_array_equal(dm.delta, [[0, 1, 2]])


def test_too_short_trajectory_rejected():
    with pytest.raises(ds.DataError):
        ds.assemble_matrices(scalar_traj([0, 1, 2], [0, 0]), 2, 3)


def _lifted_noise_oracle(tr, sys, s, rho):
    cols = []
    for j in range(rho):
        acc = np.zeros(sys.n)
        for r in range(s):
            acc = sys.a @ acc + sys.e @ tr.w[j + r]
        cols.append(acc)
    return np.array(cols).T


@pytest.mark.parametrize("s", [1, 2, 5])
def test_lifted_data_identity_with_recorded_noise(pendulum, s):
    rho = 40
    tr = ds.collect_open_loop(pendulum, rho + 5, noise_law=ds.ball_noise(0.01), seed=11, x0=[1, -1],
                              leader0=[2, -1])
    dm = ds.assemble_matrices(tr, 5, rho)
    ls = lift(pendulum, s)
    w_s = _lifted_noise_oracle(tr, pendulum, s, rho)
    resid = dm.delta_plus[s] - ls.a_s @ dm.delta - ls.b_s @ dm.u_s[s] - w_s
    assert np.abs(resid).max() <= 1e-10
    ref = ds.lifted_noise_matrix(tr, pendulum, s, rho)
    np.testing.assert_allclose(ref if s > 1 else pendulum.e @ ref, w_s, atol=1e-15)


@given(st.integers(1, 6), st.integers(1, 12), st.integers(0, 2 ** 31))
@settings(max_examples=50, deadline=None)
def test_assembly_is_a_pure_reshaping(s_max, rho, seed):
    tr = ds.collect_open_loop(pendulum_zoh(), rho + s_max - 1, seed=seed, x0=[1, 1])
    dm = ds.assemble_matrices(tr, s_max, rho)
    d = tr.delta
    np.testing.assert_array_equal(dm.delta.T, d[:rho])
    for s in range(1, s_max + 1):
        np.testing.assert_array_equal(dm.delta_plus[s][:, -1], d[rho + s - 1])
        for r in range(s):
            np.testing.assert_array_equal(dm.u_s[s][r], tr.u[r:r + rho, 0])


# -- kernels -------------------------------------------------------------

def test_scalar_kernel_and_membership_grid():
    dm = ds.assemble_matrices(scalar_traj([1, 0], [0]), 1, 1)
    th = ds.build_theta(dm, ds.NoiseQmi([[-1.0]], [[0.0]], [[1.0]]), [[1.0]])
    np.testing.assert_array_equal(th.theta, np.diag([-1.0, 0.0, 1.0]))
    for a in np.linspace(-2, 2, 41):
        for b in np.linspace(-3, 3, 7):
            val = th.value([[a, b]])[0, 0]
            assert (val >= -1e-12) == (abs(a) <= 1 + 1e-12)


def test_zero_data_kernel_admits_everything(pendulum):
    tr = ds.Trajectory(1, np.zeros((6, 2)), np.zeros((5, 1)), np.zeros((6, 2)))
    dm = ds.assemble_matrices(tr, 1, 5)
    th = ds.build_theta(dm, ds.ball_noise_qmi(0.01, 5, 2), pendulum.e)
    expected = np.zeros((5, 5))
    expected[3:, 3:] = pendulum.e @ (0.01 ** 2 * 5 * np.eye(2)) @ pendulum.e.T
    np.testing.assert_allclose(th.theta, expected, atol=1e-20)
    assert not ds.check_rank(th)
    rng = np.random.default_rng(0)
    for _ in range(5):
        assert np.linalg.eigvalsh(th.value(rng.standard_normal((2, 3))))[0] >= 0


def test_rank_check_against_svd():
    dm = ds.assemble_matrices(scalar_traj([1, 0], [0]), 1, 1)
    th = ds.build_theta(dm, ds.NoiseQmi([[-1.0]], [[0.0]], [[1.0]]), [[1.0]])
    sv = np.linalg.svd(th.theta, compute_uv=False)
    assert ds.check_rank(th) == (sv[-1] > 1e-10 * sv[0])
    assert not ds.check_rank(th)


def test_pendulum_kernel_full_rank(rho80_theta):
    assert ds.check_rank(rho80_theta)


@pytest.mark.parametrize("seed", range(5))
def test_true_plant_is_member(seed, pendulum):
    th, _ = pendulum_theta(seed)
    lam = np.linalg.eigvalsh(ds.true_member_value(th, pendulum))[0]
    assert lam >= -1e-8


def test_structured_parts_reassemble_theta(rho80_theta):
    th = rho80_theta
    m = th.m
    gram, zc, sc = th.gram, th.center, th.schur
    np.testing.assert_allclose(-th.theta[:m, :m], gram, rtol=1e-12, atol=1e-12 * np.abs(gram).max())
    np.testing.assert_allclose(th.theta[m:, :m], zc @ gram, atol=1e-9 * np.abs(gram).max())
    # [Z I] Theta [Z I]^T = S_c - (Z - Zc) gram (Z - Zc)^T
    z = zc + 1e-4 * np.random.default_rng(3).standard_normal(zc.shape)
    dz = z - zc
    np.testing.assert_allclose(th.value(z), sc - dz @ gram @ dz.T, atol=1e-10)


# -- lifted noise bound --------------------------------------------------

def test_lifted_bound_depth_one_is_identity():
    base = ds.ball_noise_qmi(0.01, 10, 2)
    assert ds.lifted_noise_bound(base, 1.1, 1, 10, np.eye(2)) is base


def test_lifted_bound_zero_noise():
    base = ds.ball_noise_qmi(0.0, 10, 2)
    out = ds.lifted_noise_bound(base, 1.1, 3, 10, np.eye(2), w_bar=0.0)
    assert not np.any(out.r)


def test_lifted_bound_rejects_negative_norm():
    with pytest.raises(ds.DataError):
        ds.lifted_noise_bound(ds.ball_noise_qmi(0.01, 5, 2), -1.0, 2, 5, np.eye(2))


def test_lifted_bound_contains_recorded_noise(pendulum):
    rho, s = 80, 3
    tr = ds.collect_open_loop(pendulum, rho + s - 1, noise_law=ds.ball_noise(0.01), seed=4)
    th = ds.build_theta(ds.assemble_matrices(tr, 1, rho), ds.ball_noise_qmi(0.01, rho, 2), pendulum.e)
    lam = ds.estimate_spectral_bound(th)
    nq = ds.lifted_noise_bound(ds.ball_noise_qmi(0.01, rho, 2), lam, s, rho, pendulum.e)
    w_s = _lifted_noise_oracle(tr, pendulum, s, rho)
    assert np.linalg.eigvalsh(nq.value(w_s))[0] >= 0


@given(st.floats(0, 1), st.floats(0, 1), st.integers(2, 8), st.floats(0, 2))
@settings(max_examples=60, deadline=None)
def test_lifted_bound_monotone_in_noise_level(w1, w2, s, lam):
    lo, hi = sorted((w1, w2))
    base = ds.ball_noise_qmi(1.0, 4, 2)
    r_lo = ds.lifted_noise_bound(base, lam, s, 4, np.eye(2), w_bar=lo).r
    r_hi = ds.lifted_noise_bound(base, lam, s, 4, np.eye(2), w_bar=hi).r
    assert np.linalg.eigvalsh(r_hi - r_lo)[0] >= -1e-12


# -- spectral bound ------------------------------------------------------

def test_spectral_bound_pinned_by_noiseless_scalar_data():
    sys = SystemMatrices([[0.5]], [[1.0]], [[1.0]])
    tr = ds.collect_open_loop(sys, 20, noise_law=ds.ball_noise(1e-9), seed=5, x0=[1.0])
    th = ds.build_theta(ds.assemble_matrices(tr, 1, 20), ds.ball_noise_qmi(1e-9, 20, 1), sys.e)
    assert ds.estimate_spectral_bound(th) == pytest.approx(0.5, abs=1e-3)


def test_spectral_bound_fails_on_uninformative_data(pendulum):
    tr = ds.Trajectory(1, np.zeros((6, 2)), np.zeros((5, 1)), np.zeros((6, 2)))
    th = ds.build_theta(ds.assemble_matrices(tr, 1, 5), ds.ball_noise_qmi(0.01, 5, 2), pendulum.e)
    with pytest.raises(ds.BracketError):
        ds.estimate_spectral_bound(th)


def test_spectral_bound_dominates_every_member(pendulum, rho80_theta):
    th = rho80_theta
    lam = ds.estimate_spectral_bound(th)
    assert lam >= np.linalg.norm(pendulum.a, 2)
    # members Zc + S_c^{1/2} Omega gram^{-1/2} with ||Omega|| = 1
    w, v = np.linalg.eigh(th.schur)
    p = (v * np.sqrt(w)) @ v.T
    gw, gv = np.linalg.eigh(th.gram)
    q = (gv / np.sqrt(gw)) @ gv.T
    rng = np.random.default_rng(8)
    best = 0.0
    for _ in range(400):
        om = rng.standard_normal((2, 3))
        om /= np.linalg.norm(om, 2)
        z = th.center + p @ om @ q
        assert np.linalg.eigvalsh(th.value(z))[0] >= -1e-12
        best = max(best, np.linalg.norm(z[:, :2], 2))
    assert lam >= best


@pytest.mark.parametrize("seed", range(3))
def test_spectral_bound_agrees_with_sdp_bisection(seed):
    tr = ds.collect_open_loop(SYNTH, 30, noise_law=ds.ball_noise(0.05), seed=seed)
    th = ds.build_theta(ds.assemble_matrices(tr, 1, 30), ds.ball_noise_qmi(0.05, 30, 2), SYNTH.e)
    assert ds.estimate_spectral_bound(th) == pytest.approx(sdp_norm_bound(th), rel=1e-5)


# -- dualization ---------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_dual_is_block_inverse(seed):
    tr = ds.collect_open_loop(SYNTH, 30, noise_law=ds.ball_noise(0.05), seed=seed)
    th = ds.build_theta(ds.assemble_matrices(tr, 1, 30), ds.ball_noise_qmi(0.05, 30, 2), SYNTH.e)
    dual = ds.dualize(th)
    inv = np.linalg.inv(th.theta)
    assert np.abs(dual.theta_inverse - inv).max() <= 1e-8 * np.abs(inv).max()


def test_dual_factors_invert_pendulum_kernel(rho80_theta):
    # the explicit pendulum kernel is too ill-conditioned to invert directly,
    # so check the two Schur factors the dual is assembled from
    dual = ds.dualize(rho80_theta)
    eye3, eye2 = np.eye(3), np.eye(2)
    assert np.abs(dual.gram_inv @ rho80_theta.gram - eye3).max() <= 1e-8
    assert np.abs(dual.r_hat @ rho80_theta.schur - eye2).max() <= 1e-8
    np.testing.assert_array_equal(dual.center, rho80_theta.center)


def test_dual_closed_form_for_diagonal_noise():
    sys = SystemMatrices([[0.5]], [[1.0]], [[1.0]])
    tr = ds.collect_open_loop(sys, 2, seed=1, x0=[1.0])
    dm = ds.assemble_matrices(tr, 1, 2)
    r = 0.3
    th = ds.build_theta(dm, ds.NoiseQmi(-np.eye(2), np.zeros((2, 1)), [[r]]), sys.e)
    dual = ds.dualize(th, th.noise)
    # rho = m: the data explain the plant exactly, so the noise block is E R E^T
    np.testing.assert_allclose(dual.r_hat, [[1 / r]], rtol=1e-10)
    np.testing.assert_allclose(np.linalg.inv(th.theta), dual.theta_inverse, rtol=1e-8, atol=1e-10)


def test_dual_rejects_wrong_noise_bound(rho80_theta):
    with pytest.raises(ds.DataError):
        ds.dualize(rho80_theta, ds.ball_noise_qmi(0.02, 80, 2))


def test_dual_rejects_singular_noise_block(pendulum):
    tr = ds.Trajectory(1, np.zeros((6, 2)), np.zeros((5, 1)), np.zeros((6, 2)))
    th = ds.build_theta(ds.assemble_matrices(tr, 1, 5), ds.ball_noise_qmi(0.01, 5, 2), pendulum.e)
    with pytest.raises(ds.SingularNoiseBlockError):
        ds.dualize(th)


def test_true_lifted_pairs_satisfy_dual_qmi(pendulum, rho80_families):
    fam = rho80_families[0]
    for s in (1, 2, 5, 10, 20, 40):
        dual = fam.dual(s)
        ls = lift(pendulum, s)
        val = dual.value(np.hstack([ls.a_s, ls.b_s]))
        assert np.linalg.eigvalsh(val)[0] >= -1e-8


@given(st.integers(0, 2 ** 31), st.floats(0.01, 0.2))
@settings(max_examples=40, deadline=None)
def test_constructed_members_pass_both_descriptions(seed, w_bar):
    """Draw in-bound noise, solve for the (A, B) it explains; it must be in
    the primal set and in the augmented dual set."""
    rng = np.random.default_rng(seed)
    rho = 3
    tr = ds.collect_open_loop(SYNTH, rho, noise_law=ds.ball_noise(w_bar), seed=seed)
    dm = ds.assemble_matrices(tr, 1, rho)
    reg = dm.regressor(1)
    if np.linalg.cond(reg) > 1e6:
        return
    th = ds.build_theta(dm, ds.ball_noise_qmi(w_bar, rho, 2), SYNTH.e)
    w = ds.ball_noise(w_bar)
    w_draw = np.array([w(rng, t, 2) for t in range(rho)]).T
    z = (dm.delta_plus[1] - SYNTH.e @ w_draw) @ np.linalg.inv(reg)
    primal = np.linalg.eigvalsh(th.value(z))[0]
    assert primal >= -1e-9 * max(1.0, np.abs(th.theta).max())
    dual = ds.dualize(th)
    assert np.linalg.eigvalsh(dual.value(z))[0] >= -1e-8


# -- lifted family and persistence --------------------------------------

def test_lifted_family_depths(rho80_families):
    assert all(f.depth == 40 for f in rho80_families)


def test_short_data_truncate_family(pendulum_cfg):
    fams = experiment.families_for(pendulum_cfg, 10)
    depths = [f.depth for f in fams]
    assert all(1 <= d < 40 for d in depths)
    for f in fams:
        assert all(d is None for d in f.duals[f.depth:])


def test_trajectory_csv_round_trip(tmp_path, pendulum):
    tr = ds.collect_open_loop(pendulum, 12, noise_law=ds.ball_noise(0.01), seed=3, x0=[1, 2], leader0=[2, -1],
                              agent=4)
    path = tmp_path / "agent4.csv"
    ds.save_trajectory_csv(tr, path)
    back = ds.load_trajectory_csv(path, 4)
    for f in ("x", "u", "w", "leader"):
        assert np.array_equal(getattr(tr, f), getattr(back, f))
    first = path.read_text().splitlines()[0]
    assert first == "t,x_1,x_2,u_1,w_1,w_2,x0_1,x0_2"
