"""Screening state: which candidate has taken which test, and what it scored."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, NamedTuple

import numpy as np

UU, TU, TT = 0, 1, 2
STATUS_NAMES = {UU: "uu", TU: "tu", TT: "tt"}
# absorbs float round-off in c * count, e.g. 50 - 0.2 * 249
BUDGET_TOL = 1e-9


class Test(str, Enum):
    CHEAP = "cheap"
    EXPENSIVE = "expensive"


class Action(NamedTuple):
    candidate: int
    test: Test


class PreconditionError(ValueError):
    """An operation was asked to act on a state that does not allow it."""


@dataclass
class ScreenState:
    """Revealed test results for one screening run.

    Scores are stored as dense arrays with NaN for "not yet tested".  The
    remaining budget is derived from the test counts, so the accounting
    identity ``b = B - c_C (#tu + #tt) - c_E #tt`` holds by construction.
    """

    features: np.ndarray
    status: np.ndarray
    cheap: np.ndarray
    expensive: np.ndarray
    budget: float
    c_cheap: float
    c_expensive: float

    @classmethod
    def initial(cls, features, budget: float, c_cheap: float, c_expensive: float) -> "ScreenState":
        X = np.asarray(features, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        n = X.shape[0]
        if c_cheap <= 0 or c_expensive <= 0:
            raise ValueError("test costs must be positive")
        return cls(
            features=X,
            status=np.zeros(n, dtype=np.int8),
            cheap=np.full(n, np.nan),
            expensive=np.full(n, np.nan),
            budget=float(budget),
            c_cheap=float(c_cheap),
            c_expensive=float(c_expensive),
        )

    @property
    def n(self) -> int:
        return self.status.shape[0]

    def ids(self, *tags: int) -> np.ndarray:
        if len(tags) == 1:
            return np.flatnonzero(self.status == tags[0])
        return np.flatnonzero(np.isin(self.status, tags))

    @property
    def i_uu(self) -> np.ndarray:
        return self.ids(UU)

    @property
    def i_tu(self) -> np.ndarray:
        return self.ids(TU)

    @property
    def i_tt(self) -> np.ndarray:
        return self.ids(TT)

    @property
    def n_cheap(self) -> int:
        return int(np.count_nonzero(self.status >= TU))

    @property
    def n_expensive(self) -> int:
        return int(np.count_nonzero(self.status == TT))

    @property
    def spent(self) -> float:
        return self.c_cheap * self.n_cheap + self.c_expensive * self.n_expensive

    @property
    def budget_remaining(self) -> float:
        return self.budget - self.spent

    @property
    def y_max(self) -> float | None:
        tt = self.i_tt
        return float(self.expensive[tt].max()) if tt.size else None

    def copy(self) -> "ScreenState":
        return ScreenState(
            self.features, self.status.copy(), self.cheap.copy(), self.expensive.copy(),
            self.budget, self.c_cheap, self.c_expensive,
        )

    def with_cheap(self, i: int, value: float) -> "ScreenState":
        """Copy of this state with a (possibly hypothetical) cheap score for ``i``."""
        if self.status[i] != UU:
            raise PreconditionError(f"candidate {i} already has a cheap score")
        s = self.copy()
        s.status[i] = TU
        s.cheap[i] = value
        return s

    def check(self) -> None:
        """Raise if the stored arrays are mutually inconsistent."""
        has_c = ~np.isnan(self.cheap)
        has_e = ~np.isnan(self.expensive)
        if np.any(has_e & ~has_c):
            raise PreconditionError("expensive score revealed before the cheap score")
        expected = np.where(has_e, TT, np.where(has_c, TU, UU))
        if not np.array_equal(expected, self.status):
            raise PreconditionError("status tags do not match revealed scores")


def available_actions(state: ScreenState, exclude: Iterable[int] = (), budget: float | None = None) -> list[Action]:
    """Every legal action under the cheap-before-expensive restriction.

    ``exclude`` removes candidates (e.g. ones with a test in flight) and
    ``budget`` overrides the remaining budget (e.g. after reservations).
    """
    b = state.budget_remaining if budget is None else budget
    blocked = np.zeros(state.n, dtype=bool)
    blocked[list(exclude)] = True
    actions: list[Action] = []
    if b + BUDGET_TOL >= state.c_cheap:
        actions += [Action(int(i), Test.CHEAP) for i in np.flatnonzero((state.status == UU) & ~blocked)]
    if b + BUDGET_TOL >= state.c_expensive:
        actions += [Action(int(i), Test.EXPENSIVE) for i in np.flatnonzero((state.status == TU) & ~blocked)]
    return actions
