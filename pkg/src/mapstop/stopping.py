"""Stopping criteria evaluated against a run's snapshot history."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gridmap import diff_norm, to_image


@dataclass
class StopDecision:
    stop: bool
    reason: str
    evidence: float | None = None


class History:
    """Snapshots recorded so far plus the current frontier list and time.

    ``frontiers`` may be omitted; it is then detected lazily on the latest
    snapshot map.
    """

    def __init__(self, snapshots, t=None, frontiers=None, min_frontier_cells=3):
        self.snapshots = snapshots
        self.t = snapshots[-1].t if t is None and snapshots else t
        self._frontiers = frontiers
        self._min = min_frontier_cells

    @property
    def frontiers(self):
        if self._frontiers is None:
            from .sim.frontiers import detect_frontiers

            self._frontiers = detect_frontiers(self.snapshots[-1].map, self._min)
        return self._frontiers


class StoppingCriterion:
    name = "criterion"

    def should_stop(self, history: History) -> StopDecision:
        raise NotImplementedError

    def prepare(self, snapshots):
        """Hook for criteria that can batch work over a whole run."""


@dataclass
class TimeBudget(StoppingCriterion):
    t_max: float
    name = "budget"

    def should_stop(self, history):
        if history.t >= self.t_max:
            return StopDecision(True, "time-budget", float(history.t))
        return StopDecision(False, "within-budget")


@dataclass
class NoFrontiers(StoppingCriterion):
    name = "nofrontiers"

    def should_stop(self, history):
        n = len(history.frontiers)
        if n == 0:
            return StopDecision(True, "no-frontiers", 0.0)
        return StopDecision(False, "frontiers-left", float(n))


@dataclass
class Baseline(StoppingCriterion):
    """Stop when the map image barely changed over the last ``interval`` seconds."""

    interval: float = 60.0
    tau: float = 0.0
    side: int = 128
    name = "baseline"

    def __post_init__(self):
        if self.interval <= 0 or self.tau < 0:
            raise ValueError("baseline needs interval > 0 and tau >= 0")
        self._images = {}

    def _image(self, snap):
        key = id(snap)
        hit = self._images.get(key)
        if hit is None or hit[0] is not snap:
            hit = (snap, to_image(snap.map, self.side))
            self._images[key] = hit
        return hit[1]

    def should_stop(self, history):
        if not history.snapshots:
            return StopDecision(False, "warming-up")
        cur = history.snapshots[-1]
        old = None
        for snap in reversed(history.snapshots):
            if snap.t <= cur.t - self.interval + 1e-9:
                old = snap
                break
        if old is None:
            return StopDecision(False, "warming-up")
        d = diff_norm(self._image(cur), self._image(old))
        if d <= self.tau:
            return StopDecision(True, "baseline", d)
        return StopDecision(False, "map-changing", d)


@dataclass
class Learned(StoppingCriterion):
    """Fire when the last ``k`` snapshots all classify as explored at ``theta``."""

    model: object
    theta: float = 0.5
    k: int = 1
    side: int | None = None
    name = "learned"
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not 0 < self.theta < 1:
            raise ValueError("theta must lie in (0, 1)")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.side is None:
            self.side = self.model.input_side

    def prepare(self, snapshots):
        todo = [s for s in snapshots if self._cached(s) is None]
        if not todo:
            return
        imgs = np.stack([to_image(s.map, self.side).pixels for s in todo])
        p, _ = self.model.predict(imgs)
        for s, pe in zip(todo, p):
            self._cache[id(s)] = (s, float(pe))

    def _cached(self, snap):
        hit = self._cache.get(id(snap))
        if hit is not None and hit[0] is snap:
            return hit[1]
        return None

    def p_explored(self, snap):
        p = self._cached(snap)
        if p is None:
            self.prepare([snap])
            p = self._cached(snap)
        return p

    def should_stop(self, history):
        snaps = history.snapshots
        if len(snaps) < self.k:
            return StopDecision(False, "warming-up")
        recent = snaps[-self.k:]
        self.prepare(recent)
        probs = [self.p_explored(s) for s in recent]
        if all(p >= self.theta for p in probs):
            return StopDecision(True, "learned", probs[-1])
        return StopDecision(False, "not-explored", probs[-1])


def should_stop(criterion: StoppingCriterion, history: History) -> StopDecision:
    return criterion.should_stop(history)


def first_stop_time(run, criterion: StoppingCriterion):
    """Replay ``run`` snapshot by snapshot; time of the first stop, or None."""
    snaps = run.snapshots
    criterion.prepare(snaps)
    for i, snap in enumerate(snaps):
        if snap.t > run.total_time:
            break
        if criterion.should_stop(History(snaps[: i + 1], snap.t)).stop:
            return snap.t
    return None


def parse_criterion(spec: str, model=None, side=None) -> StoppingCriterion:
    """Build a criterion from strings such as ``learned:theta=0.5,k=1`` or ``budget:1800``."""
    name, _, rest = spec.strip().partition(":")
    name = name.lower()
    kv = {}
    positional = []
    for part in filter(None, (p.strip() for p in rest.split(","))):
        if "=" in part:
            key, val = part.split("=", 1)
            kv[key.strip()] = val.strip()
        else:
            positional.append(part)
    try:
        if name == "nofrontiers":
            return NoFrontiers()
        if name == "budget":
            t = positional[0] if positional else kv.get("t", kv.get("t_max"))
            return TimeBudget(float(t))
        if name == "baseline":
            extra = {"side": side} if side else {}
            return Baseline(float(kv.get("interval", 60)), float(kv.get("tau", 0)), **extra)
        if name == "learned":
            if model is None:
                raise ValueError("learned criterion needs a model")
            return Learned(model, float(kv.get("theta", 0.5)), int(kv.get("k", 1)), side)
    except (IndexError, TypeError) as exc:
        raise ValueError(f"bad criterion spec {spec!r}") from exc
    raise ValueError(f"unknown criterion {name!r} in {spec!r}")
