import numpy as np
import pytest

from endonav.logs import EpisodeLog, MissingTerminalError
from endonav.metrics import (UndefinedOnFailure, average_ld, classify_outcome,
                             compute_scorecard, count_perforations,
                             jerk_index, normalized_distance,
                             time_of_insertion)

from oracles import rising_edges


def synthetic_log(positions, terminal="reached_caecum", lumen=None,
                  ld=None, deform=None, rate=30.0, length_mm=1000.0):
    log = EpisodeLog(header={"model": "T", "centerline_length_mm": length_mm,
                             "seed": 0, "controller": "test",
                             "control_rate_hz": rate})
    n = len(positions)
    for i, p in enumerate(positions):
        log.append(position=np.asarray(p, dtype=float),
                   orientation=np.array([1.0, 0, 0, 0]),
                   action=(0, 0, 0), reward=0.0,
                   lumen=bool(lumen[i]) if lumen is not None else True,
                   ld_norm=(ld[i] if ld is not None else 0.0),
                   max_deformation_mm=(deform[i] if deform is not None else 0.0),
                   controller_id="test")
    log.finish(terminal)
    return log


def straight_positions(n, v_mm_step=1.0, stationary_prefix=0):
    # record 0 is the reset state; motion begins on step stationary_prefix+1
    xs = np.concatenate([np.zeros(stationary_prefix + 1),
                         np.arange(1, n - stationary_prefix) * v_mm_step])
    return [(x, 0.0, 0.0) for x in xs]


# --- time of insertion -------------------------------------------------------

def test_toi_immediate_motion():
    # motion from the very first step; caecum at record 9000 -> 300 s
    log = synthetic_log(straight_positions(9001, v_mm_step=0.1))
    assert time_of_insertion(log) == pytest.approx(300.0)


def test_toi_delayed_motion():
    # 30 stationary steps then motion; caecum at record 3030 -> 100 s
    log = synthetic_log(straight_positions(3031, v_mm_step=0.1,
                                           stationary_prefix=30))
    assert time_of_insertion(log) == pytest.approx(100.0)


def test_toi_undefined_on_failure():
    log = synthetic_log(straight_positions(100), terminal="returned_to_start")
    with pytest.raises(UndefinedOnFailure):
        time_of_insertion(log)


# --- perforation counter ------------------------------------------------------

def test_perforation_edge_sequence():
    trace = [0, 31, 32, 5, 31, 0]
    log = synthetic_log(straight_positions(6), deform=trace)
    assert count_perforations(log) == 2
    assert rising_edges(trace, 30.0) == 2


def test_perforation_none():
    log = synthetic_log(straight_positions(5), deform=[0] * 5)
    assert count_perforations(log) == 0


def test_perforation_sustained_counts_once():
    log = synthetic_log(straight_positions(40), deform=[35.0] * 40)
    assert count_perforations(log) == 1


def test_perforation_matches_oracle_on_random_traces():
    rng = np.random.default_rng(0)
    for _ in range(100):
        trace = rng.uniform(0, 60, size=rng.integers(2, 120)).tolist()
        log = synthetic_log(straight_positions(len(trace)), deform=trace)
        assert count_perforations(log) == rising_edges(trace, 30.0)


def test_perforation_monotone_in_threshold():
    # monotone non-increasing holds for physical contact traces: unimodal
    # excursions separated by rest, where count(thr) = #peaks above thr
    # (arbitrary jittery traces can violate it under edge counting)
    rng = np.random.default_rng(1)
    trace = []
    for _ in range(12):
        peak = rng.uniform(5, 60)
        up = np.linspace(0, peak, rng.integers(3, 8))
        down = np.linspace(peak, 0, rng.integers(3, 8))[1:]
        trace.extend(up.tolist() + down.tolist() + [0.0] * 3)
    log = synthetic_log(straight_positions(len(trace)), deform=trace)
    counts = [count_perforations(log, threshold_mm=thr)
              for thr in (10, 20, 30, 40, 50)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert counts[0] > counts[-1]


# --- distances ----------------------------------------------------------------

def test_normalized_distance_straight():
    log = synthetic_log(straight_positions(1001), length_mm=1000.0)
    assert normalized_distance(log) == pytest.approx(1.0)


def test_normalized_distance_doubling_back():
    # forward 1000, back 100, forward 100 -> 1200 travelled over 1000
    xs = list(np.arange(0, 1001)) + list(np.arange(999, 899, -1)) \
        + list(np.arange(901, 1001))
    log = synthetic_log([(x, 0.0, 0.0) for x in xs], length_mm=1000.0)
    assert normalized_distance(log) == pytest.approx(1.2)


def test_average_ld_conventions():
    log = synthetic_log(straight_positions(4), lumen=[1, 1, 1, 1],
                        ld=[0.0, 0.0, 0.5, 0.5])
    assert average_ld(log) == pytest.approx(0.25)
    log0 = synthetic_log(straight_positions(4), lumen=[0, 0, 0, 0],
                         ld=[None] * 4)
    assert average_ld(log0) == 1.0
    perfect = synthetic_log(straight_positions(4), ld=[0.0] * 4)
    assert average_ld(perfect) == 0.0


# --- jerk ----------------------------------------------------------------------

def test_jerk_zero_for_constant_velocity():
    log = synthetic_log(straight_positions(200, v_mm_step=0.5))
    assert jerk_index(log) == pytest.approx(0.0, abs=1e-9)


def test_jerk_zero_for_constant_acceleration():
    t = np.arange(300) / 30.0
    pos = [(0.5 * 3.0 * tt ** 2, 0.0, 0.0) for tt in t]
    log = synthetic_log(pos)
    assert jerk_index(log) == pytest.approx(0.0, abs=1e-6)


def test_jerk_matches_sinusoid_closed_form():
    # x(t) = A sin(w t): mean |jerk| = A w^3 * 2/pi over whole periods
    A, hz = 20.0, 0.5
    w = 2 * np.pi * hz
    t = np.arange(0, 20 / hz, 1 / 30.0)   # 20 full periods at 30 Hz
    pos = [(A * np.sin(w * tt), 0.0, 0.0) for tt in t]
    log = synthetic_log(pos)
    expected_mm = A * w ** 3 * (2 / np.pi)
    assert jerk_index(log) == pytest.approx(expected_mm / 10.0, rel=0.02)


def test_jerk_needs_enough_samples():
    log = synthetic_log(straight_positions(5))
    with pytest.raises(ValueError):
        jerk_index(log)


# --- outcomes -------------------------------------------------------------------

def test_classify_outcomes():
    for terminal, outcome in (("reached_caecum", "success"),
                              ("returned_to_start", "returned"),
                              ("destabilized", "destabilized"),
                              ("step_limit", "timeout")):
        log = synthetic_log(straight_positions(20), terminal=terminal)
        assert classify_outcome(log) == outcome


def test_missing_terminal_raises():
    log = synthetic_log(straight_positions(20))
    log.terminal = None
    with pytest.raises(MissingTerminalError):
        classify_outcome(log)


def test_scorecard_pure_function_of_log(tmp_path):
    log = synthetic_log(straight_positions(400, v_mm_step=0.4),
                        deform=[0] * 399 + [31.0])
    card1 = compute_scorecard(log)
    path = tmp_path / "ep.jsonl"
    log.save(path)
    card2 = compute_scorecard(EpisodeLog.load(path))
    assert card1 == card2
    assert card1.perforation_count == 1
