import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ddstc import stm
from ddstc.plant import SystemMatrices, lift, pendulum_zoh

K = np.array([[28.0, 18.0]])
PHI = np.array([[2.0, 0.5], [0.5, 1.0]])


def ctx(delta, z, s_bar=40, sigma=0.2, k=K, phi=PHI):
    return stm.TriggerContext(1, delta, z, k, phi, sigma, s_bar)


def brute_force_interval(c, sys):
    """Step the held-input plant and compare against the threshold."""
    x = c.delta.copy()
    u = c.k @ c.z
    thr = c.threshold
    for s in range(1, c.s_bar + 1):
        x = sys.a @ x + sys.b @ u
        e = x - c.delta
        val = e @ c.phi @ e
        if val > 0 and val >= thr:
            return s
    return c.s_bar


# -- model-based -----------------------------------------------------------

def test_model_based_matches_stepping(pendulum, rng):
    for _ in range(50):
        c = ctx(rng.standard_normal(2), 0.3 * rng.standard_normal(2))
        assert stm.model_based_interval(c, pendulum) == brute_force_interval(c, pendulum)


vec = arrays(float, 2, elements=st.floats(-3, 3))


@given(vec, vec, st.integers(1, 40))
@settings(max_examples=100, deadline=None)
def test_model_based_property(delta, z, s_bar):
    sys = pendulum_zoh()
    c = ctx(delta, z, s_bar)
    s = stm.model_based_interval(c, sys)
    assert 1 <= s <= s_bar
    assert s == brute_force_interval(c, sys)


def test_rest_waits_for_cap(pendulum):
    c = ctx([0.0, 0.0], [0.0, 0.0], s_bar=17)
    assert stm.model_based_interval(c, pendulum) == 17


def test_large_gain_triggers_immediately(pendulum):
    c = ctx([0.0, 0.0], [1.0, 1.0], k=np.array([[1e4, 1e4]]))
    assert stm.model_based_interval(c, pendulum) == 1


def test_unit_cap_gives_unit_interval(pendulum, rng):
    for _ in range(5):
        assert stm.model_based_interval(ctx(rng.standard_normal(2), rng.standard_normal(2), 1), pendulum) == 1


def test_context_validation():
    with pytest.raises(ValueError):
        ctx([1, 0], [0, 1], s_bar=0)
    with pytest.raises(ValueError):
        ctx([1, 0], [0, 1], sigma=0.0)


def test_trigger_margin_sign_matches_interval(pendulum, rng):
    c = ctx(rng.standard_normal(2), 0.2 * rng.standard_normal(2))
    s = stm.model_based_interval(c, pendulum)
    for j in range(1, s):
        ls = lift(pendulum, j)
        assert stm.trigger_margin(c, ls.a_s, ls.b_s) > 0
    if s < c.s_bar:
        ls = lift(pendulum, s)
        assert stm.trigger_margin(c, ls.a_s, ls.b_s) <= 0


# -- alpha search ----------------------------------------------------------

def test_alpha_search_cases():
    a = stm.alpha_search(np.eye(2), np.eye(2))
    assert a is not None and 0 < a <= 1 + 1e-8
    assert stm.alpha_search(-np.eye(2), np.eye(2)) is None
    a = stm.alpha_search(np.diag([1.0, -1.0]), np.diag([0.0, -1.0]))
    assert a is not None and a >= 1 - 1e-8
    assert stm.alpha_search(np.eye(2), np.zeros((2, 2))) is not None
    assert stm.alpha_search(-np.eye(2), np.zeros((2, 2))) is None
    with pytest.raises(ValueError):
        stm.alpha_search(np.eye(2), np.eye(3))


@given(st.integers(0, 2 ** 31), st.integers(2, 5), st.floats(-3, 3))
@settings(max_examples=100, deadline=None)
def test_alpha_search_finds_planted_multiplier(seed, dim, log_alpha):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((dim, dim))
    q = 0.5 * (m + m.T)
    f = 10.0 ** log_alpha * q + np.eye(dim)
    a = stm.alpha_search(f, q)
    assert a is not None and a > 0
    assert np.linalg.eigvalsh(f - a * q)[0] >= -stm.ALPHA_SLACK


# -- data-driven -----------------------------------------------------------

def test_intervals_within_bounds(rho80_run):
    for ev in rho80_run.events:
        assert 1 <= ev.s <= stm.DEFAULT_S_BAR
        assert ev.mechanism == stm.DATA_DRIVEN
        if not ev.certified:
            assert ev.s == 1


def test_replayed_contexts_reproduce_intervals(rho80_contexts, rho80_families):
    scheds = [stm.DataDrivenScheduler(f.duals) for f in rho80_families]
    for ev, c in rho80_contexts[::25]:
        s, alpha = scheds[ev.agent - 1].interval(c)
        assert s == ev.s
        assert (alpha is None) == (ev.alpha is None)


def test_certified_events_hold_on_true_plant(rho80_contexts, pendulum):
    lifts = [lift(pendulum, s) for s in range(1, stm.DEFAULT_S_BAR + 1)]
    for ev, c in rho80_contexts:
        if not ev.certified:
            continue
        for s in range(1, ev.s + 1):
            ls = lifts[s - 1]
            assert stm.trigger_margin(c, ls.a_s, ls.b_s) >= -1e-9 * max(1.0, c.threshold)


def test_certified_interval_not_longer_than_model_based(rho80_contexts, pendulum):
    lifts = [lift(pendulum, s) for s in range(1, stm.DEFAULT_S_BAR + 1)]
    for ev, c in rho80_contexts:
        if ev.certified:
            assert ev.s <= stm.model_based_interval(c, pendulum, lifts)


def test_certificate_satisfies_reduced_inequality(rho80_contexts, rho80_families):
    checked = 0
    for ev, c in rho80_contexts[::10]:
        if not ev.certified:
            continue
        dual = rho80_families[ev.agent - 1].duals[ev.s - 1]
        f, q = stm.reduced_fq(c, dual)
        lam = np.linalg.eigvalsh(f - ev.alpha * q)
        assert lam[0] >= -1e-6 * np.abs(lam).max()
        checked += 1
    assert checked > 10


@given(st.integers(0, 2 ** 31), st.integers(0, 10 ** 6))
@settings(max_examples=60, deadline=None)
def test_certified_step_covers_sampled_members(rho80_contexts, rho80_families, seed, pick):
    """Members Zc + S_c^{1/2} W (G^{-1} + M)^{1/2} with ||W|| <= 1 fill the
    dual set; none of them may trigger before a certified interval."""
    certified = [(ev, c) for ev, c in rho80_contexts if ev.certified]
    ev, c = certified[pick % len(certified)]
    rng = np.random.default_rng(seed)
    dual = rho80_families[ev.agent - 1].duals[ev.s - 1]
    right = dual.gram_inv + dual.m_aug
    lam, vec = np.linalg.eigh(right)
    right_half = (vec * np.sqrt(lam)) @ vec.T
    w = rng.standard_normal((dual.n, dual.m))
    w /= np.linalg.norm(w, 2)
    z = dual.center + dual.noise_sqrt @ w @ right_half
    assert np.linalg.eigvalsh(dual.value(z))[0] >= -1e-8 * np.abs(right).max()
    a_s, b_s = z[:, :dual.n], z[:, dual.n:]
    assert stm.trigger_margin(c, a_s, b_s) >= -1e-7 * max(1.0, c.threshold)


def test_certify_zero_context(rho80_families):
    dual = rho80_families[0].duals[0]
    alpha = stm.certify_step(ctx([0.0, 0.0], [0.0, 0.0]), dual)
    assert alpha is not None
    assert np.linalg.eigvalsh(alpha * dual.r_hat - PHI)[0] >= -1e-9 * alpha * np.abs(dual.r_hat).max()


def test_unit_cap_data_driven(rho80_families):
    s, _ = stm.data_driven_interval(ctx([0.1, 0.0], [0.1, 0.0], s_bar=1), rho80_families[0].duals)
    assert s == 1
    assert stm.data_driven_interval(ctx([0.1, 0.0], [0.1, 0.0], s_bar=1), []) == (1, None)


def test_empty_family_falls_back():
    s, alpha = stm.DataDrivenScheduler([None] * 5).interval(ctx([1.0, 0.0], [0.0, 1.0]))
    assert (s, alpha) == (1, None)


# -- robust ----------------------------------------------------------------

def test_robust_without_disturbance_is_conservative(pendulum, rng):
    for _ in range(30):
        c = ctx(rng.standard_normal(2), 0.3 * rng.standard_normal(2))
        assert stm.robust_interval(c, pendulum, 0.0) <= stm.model_based_interval(c, pendulum)


def test_robust_zero_state_triggers_at_once(pendulum):
    assert stm.robust_interval(ctx([0.0, 0.0], [0.0, 0.0]), pendulum, 0.01) == 1


def test_robust_rejects_negative_bound(pendulum):
    with pytest.raises(ValueError):
        stm.robust_interval(ctx([1.0, 0.0], [0.0, 1.0]), pendulum, -0.1)
    with pytest.raises(ValueError):
        stm.disturbance_gain(pendulum, PHI, 5, 0.1, bound="loose")


def test_disturbance_gain_single_step_closed_form(pendulum):
    g = stm.disturbance_gain(pendulum, PHI, 1, 0.01)
    d = np.full(2, 0.01)
    assert g[0] == pytest.approx(float(d @ pendulum.b_d.T @ PHI @ pendulum.b_d @ d), rel=1e-12)


@given(st.floats(0, 0.5), st.floats(0, 0.5))
@settings(max_examples=50, deadline=None)
def test_robust_gain_orderings(d1, d2):
    sys = pendulum_zoh()
    lo, hi = sorted((d1, d2))
    const = stm.disturbance_gain(sys, PHI, 40, hi)
    worst = stm.disturbance_gain(sys, PHI, 40, hi, bound="worst-case")
    assert np.all(const <= worst * (1 + 1e-12) + 1e-300)
    assert np.all(stm.disturbance_gain(sys, PHI, 40, lo) <= const * (1 + 1e-12) + 1e-300)
    c = ctx([0.5, -0.2], [0.1, 0.05])
    assert stm.robust_interval(c, sys, hi) <= stm.robust_interval(c, sys, lo)


def test_stm_model_changes_prediction():
    fast = SystemMatrices(np.eye(2) * 1.5, np.zeros((2, 1)), np.eye(2))
    c = ctx([1.0, 1.0], [0.0, 0.0])
    assert stm.model_based_interval(c, fast) == 1


# -- persistence -----------------------------------------------------------

def test_events_csv_round_trip(tmp_path, rho80_run):
    path = tmp_path / "events.csv"
    stm.save_events_csv(rho80_run.events, path)
    back = stm.load_events_csv(path)
    assert back == rho80_run.events
    assert path.read_text().splitlines()[0] == "agent,t_k,s_k,mechanism,alpha"
