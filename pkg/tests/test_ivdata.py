import numpy as np
import pytest
from hypothesis import given, strategies as st

from memrobust import ivdata
from memrobust.errors import AlignmentError, DomainError, EmptyInputError, FormatError, InputError, ParseError


def write(tmp_path, text, name="dev.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_parse_two_cycles(tmp_path):
    p = write(tmp_path, "voltage,current,cycle\n1,2,0\n2,8,0\n3,9,0\n1,1,1\n2,3,1\n3,5,1\n")
    tr = ivdata.parse_iv_file(p)
    assert tr.device_id == "dev"
    assert tr.n_cycles == 2 and tr.n_samples == 3
    np.testing.assert_array_equal(tr.cycles[1], [[1, 1], [2, 3], [3, 5]])


def test_cycles_keep_first_appearance_order(tmp_path):
    p = write(tmp_path, "voltage,current,cycle\n1,1,7\n1,2,3\n2,2,7\n2,4,3\n")
    tr = ivdata.parse_iv_file(p)
    assert tr.cycle_ids == [7, 3]
    np.testing.assert_array_equal(tr.cycles[0][:, 1], [1, 2])


def test_header_only_is_empty(tmp_path):
    with pytest.raises(EmptyInputError):
        ivdata.parse_iv_file(write(tmp_path, "voltage,current,cycle\n"))


def test_empty_file(tmp_path):
    with pytest.raises(EmptyInputError):
        ivdata.parse_iv_file(write(tmp_path, ""))


def test_missing_header(tmp_path):
    with pytest.raises(FormatError):
        ivdata.parse_iv_file(write(tmp_path, "1,2,0\n2,3,0\n"))


def test_bad_cell_reports_row(tmp_path):
    with pytest.raises(ParseError) as err:
        ivdata.parse_iv_file(write(tmp_path, "voltage,current,cycle\n1,2,0\n2,abc,0\n"))
    assert err.value.row == 3
    assert "row 3" in str(err.value)


def test_short_cycle_names_both_counts(tmp_path):
    with pytest.raises(AlignmentError, match="cycle 1 has 2 samples but cycle 0 has 3"):
        ivdata.parse_iv_file(write(tmp_path, "voltage,current,cycle\n1,1,0\n2,2,0\n3,3,0\n1,1,1\n2,2,1\n"))


def test_errors_map_to_input_exit_code():
    assert ParseError("x").exit_code == 2
    assert DomainError("x").exit_code == 3


def test_conductance_is_i_over_v():
    tr = ivdata.IVTrace("d", [[(1.0, 2.0), (2.0, 8.0)]])
    cond = ivdata.extract_conductance(tr, window=1)
    np.testing.assert_array_equal(cond.per_cycle, [[2.0, 4.0]])


def test_only_ascending_positive_branch_kept():
    up = np.linspace(1, 6, 6)
    v = np.concatenate(([0.0], up, up[::-1][1:], [0.0], -up, -up[::-1][1:], [0.0]))
    i = 0.5 * v
    tr = ivdata.IVTrace("d", [np.column_stack((v, i))])
    cond = ivdata.extract_conductance(tr, window=1)
    np.testing.assert_array_equal(cond.positive_quadrant_index, np.arange(1, 7))
    np.testing.assert_allclose(cond.per_cycle, 0.5)


def test_no_positive_voltage():
    tr = ivdata.IVTrace("d", [[(-1.0, 1.0), (0.0, 0.0), (-2.0, 1.0)]])
    with pytest.raises(DomainError):
        ivdata.extract_conductance(tr)


def test_moving_average_hand_example():
    out = ivdata.moving_average([1, 2, 9, 2, 1], 3)
    np.testing.assert_allclose(out, [1.5, 4.0, 13 / 3, 4.0, 1.5])


def test_window_one_is_identity():
    vals = np.array([3.0, 1.0, 4.0, 1.0, 5.0])
    np.testing.assert_array_equal(ivdata.moving_average(vals, 1), vals)


@pytest.mark.parametrize("window", [0, 2, -1, 4])
def test_bad_window(window):
    with pytest.raises(InputError):
        ivdata.moving_average([1.0, 2.0, 3.0, 4.0, 5.0], window)


def test_window_longer_than_curve():
    with pytest.raises(InputError):
        ivdata.moving_average([1.0, 2.0, 3.0], 5)


@given(st.floats(0.1, 100.0), st.integers(1, 30), st.sampled_from([1, 3, 5, 7]))
def test_constant_curve_is_preserved(c, n, window):
    if window > n:
        return
    np.testing.assert_allclose(ivdata.moving_average(np.full(n, c), window), c, rtol=1e-14)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50), st.sampled_from([1, 3, 5, 9]))
def test_smoothing_stays_within_range(vals, window):
    vals = np.array(vals)
    if window > vals.size:
        return
    out = ivdata.moving_average(vals, window)
    span = 1e-9 * max(1.0, np.abs(vals).max())
    assert out.min() >= vals.min() - span and out.max() <= vals.max() + span


def _random_trace(rng, n_cycles=4, n=12):
    v_up = np.linspace(0.5, 6.0, n)
    cycles = []
    for _ in range(n_cycles):
        g = rng.uniform(1e-5, 1e-4, n)
        v = np.concatenate(([0.0], v_up, v_up[::-1][1:], [0.0]))
        cur = np.concatenate(([0.0], g * v_up, g[::-1][1:] * v_up[::-1][1:], [0.0]))
        cycles.append(np.column_stack((v, cur)))
    return ivdata.IVTrace("r", cycles)


def test_extraction_is_permutation_stable(rng):
    tr = _random_trace(rng)
    order = [2, 0, 3, 1]
    shuffled = ivdata.IVTrace("r", [tr.cycles[k] for k in order])
    a = ivdata.extract_conductance(tr)
    b = ivdata.extract_conductance(shuffled)
    np.testing.assert_array_equal(b.per_cycle, a.per_cycle[order])
    np.testing.assert_allclose(b.mean_smoothed, a.mean_smoothed, rtol=1e-15)


def test_smoothed_length_matches(rng):
    cond = ivdata.extract_conductance(_random_trace(rng))
    assert cond.mean_smoothed.shape == (cond.n_points,)
    assert np.all(cond.per_cycle > 0)


def test_write_parse_round_trip(tmp_path, rng):
    tr = _random_trace(rng)
    path = tmp_path / "trace.csv"
    ivdata.write_iv_file(tr, path)
    again = ivdata.parse_iv_file(path)
    assert again == tr


@given(st.lists(st.lists(st.tuples(st.floats(-10, 10), st.floats(-1, 1)), min_size=3, max_size=3),
                min_size=1, max_size=4))
def test_round_trip_any_values(cycles):
    tr = ivdata.IVTrace("x", cycles)
    assert ivdata.parse_iv_text(ivdata.format_iv(tr)) == tr
