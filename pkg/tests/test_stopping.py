import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mapstop.gridmap import FREE, UNKNOWN, OccupancyGrid
from mapstop.sim.explore import ExplorationRun, Snapshot
from mapstop.stopping import (
    Baseline,
    History,
    Learned,
    NoFrontiers,
    TimeBudget,
    first_stop_time,
    parse_criterion,
    should_stop,
)


class ScriptedModel:
    """Returns a fixed p_explored per snapshot, keyed by how many cells are known."""

    input_side = 16

    def __init__(self, p_by_known):
        self.p = p_by_known
        self.calls = 0

    def predict(self, images):
        self.calls += 1
        # key on the number of known pixels, which identifies the snapshot in growing_run
        keys = [int(round(np.sum(img != 0.5))) for img in images]
        return np.array([self.p[k] for k in keys]), np.zeros(len(images))


def growing_run(n, dt=10.0, side=16):
    """Run whose i-th snapshot has the first i rows known (one row = side pixels)."""
    snaps = []
    for i in range(n):
        m = OccupancyGrid.unknown(side, side, 0.1)
        m.cells[:i] = FREE
        snaps.append(Snapshot(dt * i, m))
    return ExplorationRun("e", 0, snaps, dt * (n - 1), "test")


def model_for(pattern, side=16):
    # snapshot i has i * side known pixels
    return ScriptedModel({i * side: p for i, p in enumerate(pattern)})


def test_simple_criteria():
    snap = Snapshot(5.0, OccupancyGrid.unknown(4, 4, 0.1))
    assert should_stop(NoFrontiers(), History([snap], 5.0, [])).stop
    assert not NoFrontiers().should_stop(History([snap], 5.0, [object()])).stop
    d = TimeBudget(5.0).should_stop(History([snap], 5.0, []))
    assert d.stop and d.evidence == 5.0
    assert not TimeBudget(5.1).should_stop(History([snap], 5.0, [])).stop


def test_history_detects_frontiers_lazily():
    cells = np.full((5, 5), UNKNOWN, dtype=np.uint8)
    cells[:, :3] = FREE
    h = History([Snapshot(0.0, OccupancyGrid(cells, 0.1))])
    assert h.t == 0.0 and len(h.frontiers) == 1


def test_baseline_identical_maps_stop():
    m = OccupancyGrid.unknown(16, 16, 0.1)
    m.cells[:4] = FREE
    snaps = [Snapshot(0.0, m), Snapshot(60.0, m.copy())]
    crit = Baseline(60.0, 0.0, side=16)
    d = crit.should_stop(History(snaps))
    assert d.stop and d.evidence == 0.0
    assert crit.should_stop(History(snaps[:1])).reason == "warming-up"
    changed = m.copy()
    changed.cells[5] = FREE
    assert not crit.should_stop(History([snaps[0], Snapshot(60.0, changed)])).stop


def test_learned_needs_consecutive():
    run = growing_run(3)
    model = model_for([0.9, 0.1, 0.9])  # E, N, E
    assert first_stop_time(run, Learned(model, 0.5, k=2)) is None
    assert first_stop_time(run, Learned(model_for([0.9, 0.1, 0.9]), 0.5, k=1)) == 0.0


def test_learned_batches_predictions():
    run = growing_run(6)
    model = model_for([0.1] * 6)
    first_stop_time(run, Learned(model, 0.5))
    assert model.calls == 1


def test_learned_theta_inclusive():
    run = growing_run(2)
    assert first_stop_time(run, Learned(model_for([0.5, 0.5]), 0.5)) == 0.0


def test_first_stop_time_examples():
    run = growing_run(5)
    assert first_stop_time(run, TimeBudget(0.0)) == 0.0
    assert first_stop_time(run, TimeBudget(25.0)) == 30.0
    assert first_stop_time(run, TimeBudget(1000.0)) is None
    crit = Baseline(10.0, 0.0, side=16)
    assert first_stop_time(run, crit) == first_stop_time(run, crit) is None


def test_no_frontiers_fires_at_end_of_completed_run():
    from mapstop.sim.envgen import EnvParams, generate_environment
    from mapstop.sim.explore import explore
    from mapstop.sim.sensor import SensorConfig

    for seed in range(4):
        env = generate_environment(seed, EnvParams(rooms_min=2, rooms_max=3, extent=(26, 30), min_room=6))
        run = explore(env, SensorConfig(), seed=seed, snapshot_every=5.0)
        assert run.terminal_reason == "no-frontiers"
        assert first_stop_time(run, NoFrontiers()) == run.total_time


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=25), st.integers(1, 4))
def test_learned_monotone_in_theta_and_k(pattern, k):
    run = growing_run(len(pattern))
    model = model_for(pattern)
    inf = float("inf")

    def t(theta, kk):
        v = first_stop_time(run, Learned(model, theta, kk))
        return inf if v is None else v

    assert t(0.5, k) <= t(0.8, k)
    assert t(0.5, k) <= t(0.5, k + 1)
    for theta in (0.3, 0.5, 0.8):
        v = t(theta, k)
        assert v == inf or v <= run.total_time
        # oracle: first index ending k consecutive p >= theta
        hits = [i for i in range(k - 1, len(pattern)) if all(p >= theta for p in pattern[i - k + 1:i + 1])]
        assert v == (run.snapshots[hits[0]].t if hits else inf)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=2, max_size=15), st.sampled_from([10.0, 20.0]))
def test_baseline_monotone_in_tau(steps, interval):
    # known rows grow by the given increments
    rows = np.minimum(np.cumsum(steps), 16)
    snaps = []
    for i, r in enumerate(rows):
        m = OccupancyGrid.unknown(16, 16, 0.1)
        m.cells[:r] = FREE
        snaps.append(Snapshot(10.0 * i, m))
    run = ExplorationRun("e", 0, snaps, snaps[-1].t, "test")
    inf = float("inf")
    times = []
    for tau in (0.0, 1.0, 4.0, 16.0):
        v = first_stop_time(run, Baseline(interval, tau, side=16))
        times.append(inf if v is None else v)
    assert times == sorted(times, reverse=True)
    assert all(v == inf or v <= run.total_time for v in times)


def test_parse_criterion():
    assert isinstance(parse_criterion("nofrontiers"), NoFrontiers)
    assert parse_criterion("budget:1800").t_max == 1800.0
    b = parse_criterion("baseline:interval=30,tau=0.5")
    assert (b.interval, b.tau) == (30.0, 0.5)
    m = ScriptedModel({})
    l = parse_criterion("learned:theta=0.8,k=2", model=m)
    assert (l.theta, l.k, l.side) == (0.8, 2, 16)
    for bad in ("learned:theta=0.5", "bogus", "budget", "baseline:interval=0"):
        with pytest.raises(ValueError):
            parse_criterion(bad)
    with pytest.raises(ValueError):
        Learned(m, theta=1.0)
    with pytest.raises(ValueError):
        Learned(m, k=0)
