import numpy as np
import pytest
from hypothesis import given, strategies as st

from splat2d.bank import (
    GaussianBank,
    anneal_tau,
    dump_bank,
    gumbel_noise,
    gumbel_soft_select,
    hard_select,
    heavily_used,
    init_bank,
    load_bank,
    read_histogram_csv,
    selection_backward,
    selection_histogram,
    softmax,
    straight_through_grad,
    write_histogram_csv,
)
from splat2d.errors import FormatError, InvalidParameterError, ShapeError

from helpers import fd_check

LOGITS = np.array([0.5, -1.0, 2.0, 0.1])


# ----------------------------------------------------------------- init_bank


def test_init_bank_single_entry_is_midpoint():
    act = init_bank(1).activated()
    np.testing.assert_allclose(act, [[0.9, 0.9, 0.6]], rtol=1e-12)  # geometric std, linear opacity


def test_init_bank_extremes_and_distinct():
    bank = init_bank(100)
    act = bank.activated()
    assert len(bank) == 100
    np.testing.assert_allclose(act[0], [0.3, 0.3, 0.25], rtol=1e-12)
    np.testing.assert_allclose(act[-1], [2.7, 2.7, 0.95], rtol=1e-12)
    assert len({tuple(r) for r in bank.prototypes.round(12)}) == 100
    assert np.all(bank.prototypes[:, 2] == 0.0)


def test_init_bank_deterministic_and_jitter():
    assert np.array_equal(init_bank(16).prototypes, init_bank(16, seed=5).prototypes)
    a, b = init_bank(16, jitter=0.1, seed=1), init_bank(16, jitter=0.1, seed=2)
    assert not np.array_equal(a.prototypes, b.prototypes)
    assert np.array_equal(a.prototypes, init_bank(16, jitter=0.1, seed=1).prototypes)


@pytest.mark.parametrize("kw", [{"K": 0}, {"K": -3}, {"K": 2.5}, {"K": 4, "std_range": (0.3, 5.0)},
                                {"K": 4, "opacity_range": (0.2, 1.0)}])
def test_init_bank_errors(kw):
    with pytest.raises(InvalidParameterError):
        init_bank(**kw)


def test_bank_validation():
    with pytest.raises(ShapeError):
        GaussianBank(np.zeros((3, 3)))
    with pytest.raises(ShapeError):
        GaussianBank(np.zeros((0, 4)))
    with pytest.raises(InvalidParameterError):
        GaussianBank([[0, 0, np.nan, 0]])


# ------------------------------------------------------------ Gumbel softmax


def test_gumbel_golden():
    bank = init_bank(4)
    sel = gumbel_soft_select(LOGITS, bank, tau=0.5, seed=7)
    np.testing.assert_allclose(gumbel_noise(4, 7), [0.01909733577748242, -0.822025847244558, -0.40193022917868865, 1.3658659402837057], rtol=1e-14)
    np.testing.assert_allclose(sel.weights, [0.061329307588981037, 0.00056779857967827999, 0.53070308332516603, 0.40739981050617463], rtol=1e-12)
    assert sel.index == 2
    np.testing.assert_allclose(sel.params, sel.weights @ bank.prototypes, rtol=1e-14)


def test_gumbel_dominant_logit_wins():
    bank = init_bank(4)
    sel = gumbel_soft_select([0.0, 0.0, 50.0, 0.0], bank, tau=1.0, seed=0, noise=np.zeros(4))
    assert sel.weights[2] == pytest.approx(1.0, abs=1e-15)
    assert np.all(np.delete(sel.weights, 2) < 1e-20)


def test_gumbel_high_temperature_flattens():
    w = gumbel_soft_select(LOGITS, init_bank(4), tau=1e6, seed=3).weights
    np.testing.assert_allclose(w, 0.25, atol=1e-5)


def test_gumbel_low_temperature_matches_hard_select():
    # fixed noise; noised logits are permutations of 0..K-1, so every gap is >= 1
    rng = np.random.default_rng(0)
    bank = init_bank(9)
    noisy = np.array([rng.permutation(9) for _ in range(50)], dtype=np.float64)
    noise = rng.gumbel(size=noisy.shape)
    sel = gumbel_soft_select(noisy - noise, bank, tau=0.01, noise=noise)
    hard = hard_select(noisy, bank)
    np.testing.assert_array_equal(sel.index, hard.index)
    mass = np.take_along_axis(sel.weights, hard.index[:, None], axis=-1)
    assert np.all(mass > 0.999)


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=8), st.floats(-100, 100), st.floats(0.05, 10))
def test_gumbel_weights_are_shift_invariant_and_convex(logits, shift, tau):
    bank = init_bank(len(logits))
    a = gumbel_soft_select(logits, bank, tau=tau, seed=11)
    b = gumbel_soft_select(np.array(logits) + shift, bank, tau=tau, seed=11)
    np.testing.assert_allclose(a.weights, b.weights, rtol=1e-8, atol=1e-12)
    assert np.all(a.weights >= 0) and a.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_gumbel_straight_through_forward_is_hard():
    bank = init_bank(4)
    sel = gumbel_soft_select(LOGITS, bank, tau=0.5, seed=7, hard_forward=True)
    np.testing.assert_array_equal(sel.params, bank.prototypes[2])
    assert sel.hard_forward


def test_gumbel_errors():
    bank = init_bank(4)
    for tau in (0.0, -1.0, np.inf, np.nan):
        with pytest.raises(InvalidParameterError):
            gumbel_soft_select(LOGITS, bank, tau=tau)
    with pytest.raises(ShapeError):
        gumbel_soft_select(LOGITS[:3], bank)
    with pytest.raises(InvalidParameterError):
        gumbel_soft_select([0, np.inf, 0, 0], bank)
    with pytest.raises(ShapeError):
        gumbel_soft_select(LOGITS, bank, noise=np.zeros(3))


# --------------------------------------------------------------- hard_select


def test_hard_select_golden():
    logits = np.random.default_rng(3).normal(size=(3, 3, 5))
    sel = hard_select(logits, init_bank(5))
    np.testing.assert_array_equal(sel.index, [[0, 4, 0], [3, 1, 1], [2, 2, 1]])
    assert sel.weights.sum(axis=-1).tolist() == [[1.0] * 3] * 3


def test_hard_select_tie_goes_to_lowest_index():
    sel = hard_select([[1.0, 3.0, 3.0, 3.0], [2.0, 2.0, 2.0, 2.0]], init_bank(4))
    assert sel.index.tolist() == [1, 0]


# ------------------------------------------------------------ straight-through


def test_straight_through_zero_upstream_and_constant_upstream():
    w = softmax(LOGITS)
    assert np.all(straight_through_grad(w, np.zeros(4)) == 0)
    np.testing.assert_allclose(straight_through_grad(w, np.full(4, 3.0)), 0.0, atol=1e-15)


def test_straight_through_two_classes_antisymmetric():
    g = straight_through_grad(softmax([0.3, -0.2]), [1.0, 0.0], tau=0.7)
    assert g[0] == pytest.approx(-g[1], rel=1e-14) and g[0] > 0


def test_straight_through_matches_finite_differences(rng):
    logits, up, tau = rng.normal(size=(3, 6)), rng.normal(size=(3, 6)), 0.8
    analytic = straight_through_grad(softmax(logits / tau), up, tau)
    assert fd_check(lambda x: float(np.sum(softmax(x / tau) * up)), logits, analytic) <= 1.0


def test_straight_through_shape_error():
    with pytest.raises(ShapeError):
        straight_through_grad(np.ones(3), np.ones(4))


# --------------------------------------------------------- selection_backward


def test_selection_backward_soft_matches_finite_differences(rng):
    bank = init_bank(5, jitter=0.3)
    logits, noise, up = rng.normal(size=(4, 5)), rng.gumbel(size=(4, 5)), rng.normal(size=(4, 4))
    tau = 0.6
    sel = gumbel_soft_select(logits, bank, tau=tau, noise=noise)
    d_logits, d_proto = selection_backward(sel, bank, up)

    def via_logits(x):
        return float(np.sum(gumbel_soft_select(x, bank, tau=tau, noise=noise).params * up))

    def via_bank(p):
        return float(np.sum(gumbel_soft_select(logits, GaussianBank(p), tau=tau, noise=noise).params * up))

    assert fd_check(via_logits, logits, d_logits) <= 1.0
    assert fd_check(via_bank, bank.prototypes, d_proto) <= 1.0


def test_selection_backward_hard_forward_routes_to_chosen(rng):
    bank = init_bank(4)
    logits = rng.normal(size=(6, 4))
    sel = gumbel_soft_select(logits, bank, tau=0.5, seed=2, hard_forward=True)
    up = rng.normal(size=(6, 4))
    d_logits, d_proto = selection_backward(sel, bank, up)
    expected = np.zeros((4, 4))
    for i, k in enumerate(sel.index):
        expected[k] += up[i]
    np.testing.assert_allclose(d_proto, expected, rtol=1e-14)
    assert np.any(d_logits != 0)
    d_hard, _ = selection_backward(hard_select(logits, bank), bank, up)
    assert np.all(d_hard == 0)
    with pytest.raises(ShapeError):
        selection_backward(sel, bank, up[:, :3])


# ------------------------------------------------- schedule, histogram, files


def test_anneal_tau():
    assert anneal_tau(0, 100) == 1.0
    assert anneal_tau(100, 100) == pytest.approx(0.1)
    assert anneal_tau(50, 100) == pytest.approx(0.1**0.5)
    assert anneal_tau(500, 100) == pytest.approx(0.1)
    assert anneal_tau(3, 0, tau0=0.7) == 0.7


def test_histogram_and_heavily_used():
    counts = selection_histogram([[0, 2, 2], [2, 3, 0]], 5)
    assert counts.tolist() == [2, 0, 3, 1, 0]
    assert heavily_used(counts, share=0.2) == 2
    assert heavily_used(np.zeros(3)) == 0
    with pytest.raises(InvalidParameterError):
        selection_histogram([5], 5)


def test_histogram_csv_round_trip(tmp_path):
    path = tmp_path / "hist.csv"
    write_histogram_csv([4, 0, 9], path)
    assert path.read_text() == "index,count\n0,4\n1,0\n2,9\n"
    assert read_histogram_csv(path).tolist() == [4, 0, 9]
    path.write_text("index,count\n0,x\n")
    with pytest.raises(FormatError):
        read_histogram_csv(path)


def test_bank_dump_round_trip(tmp_path):
    bank = init_bank(7, jitter=0.2, seed=4)
    path = tmp_path / "bank.csv"
    dump_bank(bank, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# init_scheme: grid(")
    assert lines[1] == "index,sigma_x_raw,sigma_y_raw,rho_raw,xi_raw,std_x_px,std_y_px,opacity"
    back = load_bank(path)
    np.testing.assert_array_equal(back.prototypes, bank.prototypes)
    assert back.init_scheme == bank.init_scheme


def test_bank_load_errors(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("index,sigma_x_raw\n0,1.0\n")
    with pytest.raises(FormatError):
        load_bank(path)
    path.write_text("index,sigma_x_raw,sigma_y_raw,rho_raw,xi_raw\n1,0,0,0,0\n")
    with pytest.raises(FormatError):
        load_bank(path)
