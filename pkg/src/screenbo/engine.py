"""Screening loops, controllers, rewards and regrets.

A :class:`Screener` turns a :class:`Policy` into decisions: given the current
state (and, for parallel runs, candidates that are locked and budget that is
reserved) it returns the next :class:`Action`.  :func:`run_sequential` and
:func:`run_single_test` drive it one test at a time; ``parallel.py`` drives
the same object from an event queue.
"""

from __future__ import annotations

import csv
from fractions import Fraction
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Optional

import numpy as np

from .acquisition import (
    AcquisitionValues,
    ThresholdEstimate,
    estimate_threshold,
    greedy_expected_improvement,
    greedy_mining,
    greedy_threshold,
    thompson,
)
from .data_io import Dataset, true_top_n
from .score_models import (
    Marginals,
    RefitConfig,
    ScoreModel,
    SingleTestModel,
    refit,
)
from .state import BUDGET_TOL, TT, TU, UU, Action, PreconditionError, ScreenState, Test

logger = logging.getLogger(__name__)

ACQUISITIONS = ("ei", "threshold", "mining", "thompson")
CONTROLLERS = ("greedy", "random", "single")
CHEAP, EXPENSIVE = 1, 2


def random_controller_p1(c_cheap: float, c_expensive: float) -> float:
    """Cheap-test probability that spends about half the budget on candidates
    that never reach the expensive test."""
    c, e = Fraction(c_cheap), Fraction(c_expensive)
    # exact rational arithmetic, rounded once, so (0.2, 1) gives exactly 0.875
    return float((e + 2 * c) / (e + 3 * c))


@dataclass
class Policy:
    """Everything that determines how a screen chooses its tests."""

    acquisition: str
    controller: str
    model: ScoreModel
    N: int = 10
    p1: Optional[float] = None
    init_random: Optional[int] = None
    refit_every: Optional[int] = 10
    refit_config: RefitConfig = field(default_factory=RefitConfig)
    m_acquisition: int = 512
    m_threshold: int = 4096
    m_outer: int = 512
    m_outer_mining: int = 16
    threshold_refresh: int = 10
    pool_size: int = 5000
    max_joint: int = 1000
    rank_joint: int = 100

    def __post_init__(self):
        if self.acquisition not in ACQUISITIONS:
            raise ValueError(f"unknown acquisition {self.acquisition!r}")
        if self.controller not in CONTROLLERS:
            raise ValueError(f"unknown controller {self.controller!r}")
        if self.p1 is not None and not 0.0 <= self.p1 <= 1.0:
            raise ValueError("p1 must lie in [0, 1]")
        if self.controller == "greedy" and self.acquisition == "thompson":
            raise ValueError("the greedy controller needs a deterministic acquisition")
        if (self.controller == "single") != isinstance(self.model, SingleTestModel):
            raise ValueError("single-test runs need a SingleTestModel and vice versa")

    def k0(self, workers: int = 1) -> int:
        return self.init_random if self.init_random is not None else max(5, 2 * workers)


# ---------------------------------------------------------------------------
# transitions and rewards
# ---------------------------------------------------------------------------


def apply_action(state: ScreenState, action: Action, oracle: Dataset, budget: float | None = None) -> tuple[ScreenState, float]:
    """Reveal the oracle's score for ``action`` in a copy of ``state``."""
    i, test = int(action.candidate), Test(action.test)
    b = state.budget_remaining if budget is None else budget
    if test is Test.CHEAP:
        if state.status[i] != UU or b + BUDGET_TOL < state.c_cheap:
            raise PreconditionError(f"cheap test on candidate {i} is not available")
        s = state.copy()
        s.status[i], s.cheap[i] = TU, oracle.cheap[i]
        return s, float(oracle.cheap[i])
    if state.status[i] != TU or b + BUDGET_TOL < state.c_expensive:
        raise PreconditionError(f"expensive test on candidate {i} is not available")
    s = state.copy()
    s.status[i], s.expensive[i] = TT, oracle.expensive[i]
    return s, float(oracle.expensive[i])


def reward_optimization(y_expensive: float, y_max_before: float | None) -> float:
    """Improvement of the running maximum; the very first expensive score earns 0."""
    if y_max_before is None:
        return 0.0
    return max(y_expensive - y_max_before, 0.0)


def reward_mining(candidate: int, top_n: Iterable[int]) -> int:
    return int(int(candidate) in set(int(t) for t in top_n))


# ---------------------------------------------------------------------------
# controllers
# ---------------------------------------------------------------------------


def random_controller_decide(p1: float, state: ScreenState, rng: np.random.Generator,
                             has_uu: bool | None = None, has_tu: bool | None = None,
                             budget: float | None = None) -> int:
    forced = _forced_choice(state, has_uu, has_tu, budget)
    if forced is not None:
        return forced
    return CHEAP if rng.random() < p1 else EXPENSIVE


def _forced_choice(state: ScreenState, has_uu, has_tu, budget) -> int | None:
    b = state.budget_remaining if budget is None else budget
    has_uu = state.i_uu.size > 0 if has_uu is None else has_uu
    has_tu = state.i_tu.size > 0 if has_tu is None else has_tu
    can_cheap = has_uu and b + BUDGET_TOL >= state.c_cheap
    can_exp = has_tu and b + BUDGET_TOL >= state.c_expensive
    if not can_cheap and not can_exp:
        raise PreconditionError("no action available (terminal state)")
    if not can_exp:
        return CHEAP
    if not can_cheap or b + BUDGET_TOL < state.c_cheap + state.c_expensive:
        return EXPENSIVE
    return None


def _closed_form(acq: str, mean: np.ndarray, var: np.ndarray, ref: float) -> np.ndarray:
    marg = Marginals.gaussian(np.arange(mean.size), mean.ravel(), var.ravel())
    if acq == "ei":
        vals = greedy_expected_improvement(marg, ref).values
    else:
        vals = greedy_threshold(marg, ref).values
    return vals.reshape(mean.shape)


# ---------------------------------------------------------------------------
# trace
# ---------------------------------------------------------------------------


@dataclass
class TraceRecord:
    step: int
    worker_id: int
    candidate_id: int
    test: str
    revealed_score: float
    budget_after: float
    reward_opt: float
    reward_mine: int
    dispatch_time: float = 0.0
    finish_time: float = 0.0


ENGINE_COLUMNS = [f.name for f in fields(TraceRecord)][:8]
TIMED_COLUMNS = [f.name for f in fields(TraceRecord)]


@dataclass
class Trace:
    records: list[TraceRecord]
    N: int
    budget: float
    c_cheap: float
    c_expensive: float
    mode: str = "two-test"
    upfront_cheap: int = 0
    final_state: Optional[ScreenState] = None

    @property
    def expensive_ids(self) -> list[int]:
        return [r.candidate_id for r in self.records if r.test == Test.EXPENSIVE.value]

    @property
    def n_cheap(self) -> int:
        return self.upfront_cheap + sum(r.test == Test.CHEAP.value for r in self.records)

    @property
    def n_expensive(self) -> int:
        return len(self.expensive_ids)

    @property
    def total_cost(self) -> float:
        return self.c_cheap * self.n_cheap + self.c_expensive * self.n_expensive

    @property
    def total_reward_mining(self) -> int:
        return sum(r.reward_mine for r in self.records)

    def actions(self) -> list[tuple[int, str]]:
        return [(r.candidate_id, r.test) for r in self.records]

    def write_csv(self, path, timed: bool = False) -> None:
        cols = TIMED_COLUMNS if timed else ENGINE_COLUMNS
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
            w.writeheader()
            for r in self.records:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(r).items()})


def optimization_regret(trace: Trace, oracle: Dataset) -> float:
    """Gap between the best expensive score in the pool and the best one found.

    With no expensive test at all the gap is capped at ``max - min``.
    """
    best = float(oracle.expensive.max())
    found = trace.expensive_ids
    if not found:
        return best - float(oracle.expensive.min())
    return best - float(oracle.expensive[found].max())


def mining_regret(trace: Trace, oracle: Dataset, N: int) -> int:
    top = set(true_top_n(oracle, N).tolist())
    return N - len(top & set(trace.expensive_ids))


# ---------------------------------------------------------------------------
# decision making
# ---------------------------------------------------------------------------


class Screener:
    """Stateful decision maker for one trial.

    Holds the current (possibly refit) model, the cached top-N threshold and
    the random stream.  Call :meth:`decide` for an action and
    :meth:`observe` after each revealed score.
    """

    def __init__(self, policy: Policy, rng: np.random.Generator, workers: int = 1):
        self.policy = policy
        self.model = policy.model
        self.rng = rng
        self.refit_rng = np.random.default_rng(rng.integers(2**63))
        self.workers = workers
        self.k0 = policy.k0(workers)
        self.p1 = policy.p1
        self.threshold: ThresholdEstimate | None = None
        self._threshold_at = 0
        self._revealed_at_refit = 0
        self.cheap_dispatched = 0
        self.expensive_dispatched = 0

    # -- model upkeep -----------------------------------------------------

    def observe(self, state: ScreenState) -> None:
        every = self.policy.refit_every
        revealed = state.n_cheap + state.n_expensive
        if every and revealed - self._revealed_at_refit >= every:
            self.model = refit(self.model, state, self.policy.refit_config, self.refit_rng)
            self._revealed_at_refit = revealed

    def _tau(self, post, state: ScreenState) -> float:
        n_exp = state.n_expensive
        stale = self.threshold is None or n_exp - self._threshold_at >= self.policy.threshold_refresh
        if stale:
            samples = post.sample_expensive(self._joint_ids(post, state), self.policy.m_threshold, self.rng)
            self.threshold = estimate_threshold(samples, min(self.policy.N, samples.candidate_ids.size))
            self._threshold_at = n_exp
        else:
            self.threshold = ThresholdEstimate(self.threshold.tau, self.threshold.N,
                                               self.threshold.sample_count, n_exp - self._threshold_at)
        return self.threshold.tau

    def _joint_ids(self, post, state: ScreenState, among: np.ndarray | None = None, include=()) -> np.ndarray:
        """Candidates for joint sampling.

        For ranking quantities (``among`` omitted): every expensive-tested
        candidate (pinned) plus the ``rank_joint`` untested ones with the
        highest marginal upper bound; the rest have negligible chance of
        reaching the top N.  For Thompson draws over ``among``: at most
        ``max_joint`` of them, chosen the same way.
        """
        free = np.flatnonzero(state.status != TT) if among is None else among
        limit = self.policy.rank_joint if among is None else self.policy.max_joint
        if free.size > limit:
            marg = post.expensive_marginals(free)
            ucb = marg.expectation_mean() + 2.5 * np.sqrt(np.maximum(marg.total_var(), 0.0))
            keep = np.sort(np.argsort(-ucb, kind="stable")[:limit])
            free = free[keep]
        if among is not None:
            return free
        return np.union1d(np.r_[state.i_tt, free], np.asarray(include, dtype=int))

    def _pool(self, ids: np.ndarray) -> np.ndarray:
        if ids.size > self.policy.pool_size:
            return np.sort(self.rng.choice(ids, self.policy.pool_size, replace=False))
        return ids

    def acquisition_values(self, post, state: ScreenState, ids: np.ndarray) -> AcquisitionValues:
        acq = self.policy.acquisition
        if acq == "thompson":
            joint = self._joint_ids(post, state, among=ids)
            vals = thompson(post.sample_expensive(joint, 1, self.rng))
            return vals
        if acq == "mining":
            samples = post.sample_expensive(self._joint_ids(post, state), self.policy.m_acquisition, self.rng)
            vals = greedy_mining(samples, min(self.policy.N, samples.candidate_ids.size), state).to_dict()
            return AcquisitionValues(ids, np.array([vals.get(int(i), 0.0) for i in ids]))
        marg = post.expensive_marginals(ids)
        if acq == "threshold":
            return greedy_threshold(marg, self._tau(post, state))
        y_max = self._ei_reference(marg, state)
        return greedy_expected_improvement(marg, y_max)

    @staticmethod
    def _ei_reference(marg: Marginals, state: ScreenState) -> float:
        # before any expensive score exists, improvement is measured against
        # the best posterior mean
        y = state.y_max
        return y if y is not None else float(marg.expectation_mean().max())

    def decide(self, state: ScreenState, exclude: Iterable[int] = (), budget: float | None = None) -> Action | None:
        b = state.budget_remaining if budget is None else budget
        blocked = np.zeros(state.n, dtype=bool)
        blocked[list(exclude)] = True
        uu = np.flatnonzero((state.status == UU) & ~blocked) if b + BUDGET_TOL >= state.c_cheap else np.zeros(0, int)
        tu = np.flatnonzero((state.status == TU) & ~blocked) if b + BUDGET_TOL >= state.c_expensive else np.zeros(0, int)
        if uu.size == 0 and tu.size == 0:
            return None

        if self.policy.controller == "single":
            return self._decide_single(state, tu)

        if self.cheap_dispatched < self.k0 and uu.size:
            return self._dispatch(Action(int(self.rng.choice(uu)), Test.CHEAP))

        post = self.model.condition(state)
        if self.expensive_dispatched == 0 and tu.size:
            if self.policy.acquisition == "ei":
                marg = post.expensive_marginals(tu)
                i_tu = AcquisitionValues(tu, marg.expectation_mean()).argmax()
            else:
                i_tu = self.acquisition_values(post, state, tu).argmax()
            return self._dispatch(Action(i_tu, Test.EXPENSIVE))

        pool_uu = self._pool(uu)
        ids = np.r_[pool_uu, tu]
        alpha = self.acquisition_values(post, state, ids)
        i_uu = alpha.argmax(pool_uu) if pool_uu.size else None
        i_tu = alpha.argmax(tu) if tu.size else None

        forced = _forced_choice(state, uu.size > 0, tu.size > 0, b)
        if forced is not None:
            choice = forced
        elif self.policy.controller == "random":
            p1 = self.p1 if self.p1 is not None else random_controller_p1(state.c_cheap, state.c_expensive)
            choice = CHEAP if self.rng.random() < p1 else EXPENSIVE
        else:
            choice = self._greedy_choice(post, state, alpha, i_uu, i_tu)
        if choice == CHEAP:
            return self._dispatch(Action(i_uu, Test.CHEAP))
        return self._dispatch(Action(i_tu, Test.EXPENSIVE))

    def _decide_single(self, state: ScreenState, tu: np.ndarray) -> Action | None:
        if tu.size == 0:
            return None
        if self.expensive_dispatched < self.k0:
            return self._dispatch(Action(int(self.rng.choice(tu)), Test.EXPENSIVE))
        post = self.model.condition(state)
        pool = self._pool(tu)
        return self._dispatch(Action(self.acquisition_values(post, state, pool).argmax(), Test.EXPENSIVE))

    def _dispatch(self, action: Action) -> Action:
        if action.test is Test.CHEAP:
            self.cheap_dispatched += 1
        else:
            self.expensive_dispatched += 1
        return action

    def _greedy_choice(self, post, state: ScreenState, alpha: AcquisitionValues, i_uu: int, i_tu: int) -> int:
        a_tu = float(alpha.values[np.flatnonzero(alpha.candidate_ids == i_tu)[0]])
        lookahead = self.lookahead_value(post, state, i_uu, i_tu)
        c_c, c_e = state.c_cheap, state.c_expensive
        return CHEAP if lookahead / (c_c + c_e) > a_tu / c_e else EXPENSIVE

    def lookahead_value(self, post, state: ScreenState, i_uu: int, i_tu: int) -> float:
        """Monte-Carlo ``E[max(alpha_tu, alpha_uu) | D]`` after cheap-testing ``i_uu``."""
        acq = self.policy.acquisition
        if acq == "mining":
            return self._lookahead_mining(post, state, i_uu, i_tu)
        mc, vc = post.cheap_marginals([i_uu])
        y = mc[0] + np.sqrt(vc[0]) * self.rng.standard_normal(self.policy.m_outer)
        mean, var = post.after_cheap(i_uu, [i_tu, i_uu], y)
        if acq == "threshold":
            ref = self._tau(post, state)
        else:
            ref = self._ei_reference(post.expensive_marginals([i_tu, i_uu]), state)
        vals = _closed_form(acq, mean, var, ref)
        return float(vals.max(axis=1).mean())

    def _lookahead_mining(self, post, state: ScreenState, i_uu: int, i_tu: int) -> float:
        mc, vc = post.cheap_marginals([i_uu])
        y = mc[0] + np.sqrt(vc[0]) * self.rng.standard_normal(self.policy.m_outer_mining)
        best = np.empty(y.size)
        for k, yk in enumerate(y):
            hyp = state.with_cheap(i_uu, yk)
            hpost = self.model.condition(hyp)
            joint = self._joint_ids(hpost, hyp, include=(i_tu, i_uu))
            samples = hpost.sample_expensive(joint, self.policy.m_acquisition, self.rng)
            vals = greedy_mining(samples, min(self.policy.N, samples.candidate_ids.size), hyp)
            best[k] = vals.restrict([i_tu, i_uu]).values.max()
        return float(best.mean())


def greedy_controller_decide(screener: Screener, state: ScreenState, i_uu: int | None, i_tu: int | None) -> int:
    """Choose between cheap-testing ``i_uu`` (1) and expensive-testing ``i_tu`` (2)."""
    forced = _forced_choice(state, i_uu is not None, i_tu is not None, None)
    if forced is not None:
        return forced
    post = screener.model.condition(state)
    alpha = screener.acquisition_values(post, state, np.array([i_uu, i_tu]))
    return screener._greedy_choice(post, state, alpha, i_uu, i_tu)


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------


def _record(step, worker, action, score, state, y_max_before, top_n, t0=0.0, t1=0.0) -> TraceRecord:
    if action.test is Test.EXPENSIVE:
        r_opt = reward_optimization(score, y_max_before)
        r_mine = reward_mining(action.candidate, top_n)
    else:
        r_opt, r_mine = 0.0, 0
    return TraceRecord(step, worker, int(action.candidate), action.test.value, float(score),
                       float(state.budget_remaining), float(r_opt), int(r_mine), float(t0), float(t1))


def initial_state(oracle: Dataset, policy: Policy, budget: float, c_cheap: float, c_expensive: float) -> ScreenState:
    """Fresh state; single-test runs start with every cheap score settled.

    In Rich mode the cheap scores are real and their cost is part of the
    budget; in Poor mode they are zero placeholders that the model never
    reads, and the up-front cost is added back so only expensive tests spend.
    """
    if policy.controller != "single":
        return ScreenState.initial(oracle.features, budget, c_cheap, c_expensive)
    n = oracle.n
    s = ScreenState.initial(oracle.features, budget + n * c_cheap, c_cheap, c_expensive)
    s.status[:] = TU
    s.cheap[:] = oracle.cheap if policy.model.use_cheap else 0.0
    return s


def run_sequential(oracle: Dataset, policy: Policy, budget: float, c_cheap: float, c_expensive: float,
                   seed: int = 0) -> Trace:
    """One screen, one test at a time, until no test is affordable."""
    rng = np.random.default_rng(seed)
    screener = Screener(policy, rng, workers=1)
    state = initial_state(oracle, policy, budget, c_cheap, c_expensive)
    top_n = true_top_n(oracle, policy.N)
    records = []
    while (action := screener.decide(state)) is not None:
        y_max = state.y_max
        state, score = apply_action(state, action, oracle)
        records.append(_record(len(records), 0, action, score, state, y_max, top_n))
        screener.observe(state)
    return _make_trace(records, policy, oracle, budget, c_cheap, c_expensive, state)


def _make_trace(records, policy, oracle, budget, c_cheap, c_expensive, state) -> Trace:
    if policy.controller == "single":
        mode = "single-rich" if policy.model.use_cheap else "single-poor"
        upfront = oracle.n if policy.model.use_cheap else 0
        return Trace(records, policy.N, budget, c_cheap, c_expensive, mode, upfront, state)
    return Trace(records, policy.N, budget, c_cheap, c_expensive, final_state=state)


def run_single_test(oracle: Dataset, policy: Policy, budget: float, c_cheap: float, c_expensive: float,
                    feature_mode: str = "poor", seed: int = 0) -> Trace:
    """Classical one-test BO on the expensive score.

    ``rich`` feeds the cheap score as an extra feature (all cheap tests are
    bought up front and reported in the total cost); ``poor`` ignores it.
    """
    if feature_mode not in ("poor", "rich"):
        raise ValueError(f"feature_mode must be 'poor' or 'rich', got {feature_mode!r}")
    model = policy.model
    if not isinstance(model, SingleTestModel):
        raise ValueError("run_single_test needs a SingleTestModel")
    if model.use_cheap != (feature_mode == "rich"):
        policy = _replace_model(policy, SingleTestModel(model.spec, feature_mode == "rich"))
    return run_sequential(oracle, policy, budget, c_cheap, c_expensive, seed)


def _replace_model(policy: Policy, model) -> Policy:
    kw = {f.name: getattr(policy, f.name) for f in fields(Policy)}
    kw["model"] = model
    return Policy(**kw)
