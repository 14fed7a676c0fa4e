"""Absorbing Markov chain analytics.

Given the transient-to-transient transition block Q, the probability of
absorbing at the goal solves (I - Q) h = r where r is the one-step
goal-absorption column, and the expected time to absorption solves
(I - Q) T = t with t the per-node sojourn times.
"""

from __future__ import annotations

import numpy as np

from .errors import SingularChain

_COND_LIMIT = 1e12


def _solve(ImQ: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    if ImQ.size and np.linalg.cond(ImQ) > _COND_LIMIT:
        raise SingularChain("transient block is singular (closed transient class)")
    try:
        return np.linalg.solve(ImQ, rhs)
    except np.linalg.LinAlgError as e:
        raise SingularChain(str(e)) from e


def absorption_probabilities(q_transient: np.ndarray,
                             to_goal: np.ndarray) -> np.ndarray:
    """Probability of eventually absorbing at the goal from each transient
    node.  ``q_transient`` is k x k, ``to_goal`` is the length-k vector of
    one-step probabilities into the goal."""
    q = np.atleast_2d(np.asarray(q_transient, dtype=float))
    r = np.asarray(to_goal, dtype=float).ravel()
    ImQ = np.eye(q.shape[0]) - q
    return _solve(ImQ, r)


def expected_absorption_times(q_transient: np.ndarray,
                              sojourn_times: np.ndarray) -> np.ndarray:
    """Expected total time until absorption (at any absorbing node) from each
    transient node, given the expected time spent per visit."""
    q = np.atleast_2d(np.asarray(q_transient, dtype=float))
    t = np.asarray(sojourn_times, dtype=float).ravel()
    ImQ = np.eye(q.shape[0]) - q
    return _solve(ImQ, t)
