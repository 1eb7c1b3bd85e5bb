"""Event-driven simulation of ``w`` asynchronous workers running tests.

Test durations are uniform on ``[c/2, 3c/2]`` for a test of cost ``c``.  A
worker that finishes reveals its score and immediately asks the policy for a
new action, seeing only the tests completed so far.  Budget is reserved when
a test is dispatched and candidates with a test in flight are locked.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .data_io import Dataset, true_top_n
from .engine import Policy, Screener, Trace, _make_trace, _record, apply_action, initial_state
from .state import Action, Test


@dataclass(order=True)
class SimEvent:
    finish_time: float
    worker_id: int
    dispatch_time: float
    action: Action


def sample_duration(cost: float, rng: np.random.Generator) -> float:
    return float(rng.uniform(0.5 * cost, 1.5 * cost))


def simulate_parallel(oracle: Dataset, policy: Policy, budget: float, c_cheap: float, c_expensive: float,
                      workers: int = 1, seed: int = 0, duration_seed: int | None = None,
                      audit: list | None = None) -> Trace:
    """Run one screen with ``workers`` asynchronous workers.

    The policy's random stream is seeded by ``seed`` exactly as in
    :func:`run_sequential`; durations come from an independent stream
    (``duration_seed``, default derived from ``seed``).  If ``audit`` is a
    list, ``(time, reserved_spend, in_flight)`` tuples are appended to it
    after every dispatch.
    """
    if workers < 1:
        raise ValueError("need at least one worker")
    rng = np.random.default_rng(seed)
    dur_rng = np.random.default_rng(
        duration_seed if duration_seed is not None else np.random.SeedSequence([seed, 0xD0]).generate_state(1)[0]
    )
    screener = Screener(policy, rng, workers=workers)
    state = initial_state(oracle, policy, budget, c_cheap, c_expensive)
    top_n = true_top_n(oracle, policy.N)
    cost = {Test.CHEAP: state.c_cheap, Test.EXPENSIVE: state.c_expensive}

    queue: list[SimEvent] = []
    in_flight: dict[int, Action] = {}
    idle: list[int] = []
    records = []

    def dispatch(worker: int, now: float) -> bool:
        reserved = sum(cost[a.test] for a in in_flight.values())
        action = screener.decide(state, exclude=in_flight.keys(), budget=state.budget_remaining - reserved)
        if action is None:
            return False
        c = cost[action.test]
        reserved += c
        in_flight[action.candidate] = action
        heapq.heappush(queue, SimEvent(now + sample_duration(c, dur_rng), worker, now, action))
        if audit is not None:
            audit.append((now, state.spent + reserved, len(in_flight)))
        return True

    for wid in range(workers):
        if not dispatch(wid, 0.0):
            idle.append(wid)

    while queue:
        ev = heapq.heappop(queue)
        action = ev.action
        del in_flight[action.candidate]
        y_max = state.y_max
        state, score = apply_action(state, action, oracle)
        records.append(_record(len(records), ev.worker_id, action, score, state, y_max, top_n,
                               ev.dispatch_time, ev.finish_time))
        screener.observe(state)
        if not dispatch(ev.worker_id, ev.finish_time):
            idle.append(ev.worker_id)
        still_idle = []
        for wid in sorted(idle):
            if wid == ev.worker_id or not dispatch(wid, ev.finish_time):
                still_idle.append(wid)
        idle = sorted(set(still_idle))
    return _make_trace(records, policy, oracle, budget, c_cheap, c_expensive, state)
