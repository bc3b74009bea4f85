"""Dependent rounding of fractional bipartite assignments.

The fractional matrix is augmented with one private slack column per
reviewer so every reviewer row and every paper column carries an integral
mass. Each step finds either a cycle or a maximal path (whose endpoints are
necessarily slack columns) among the fractional entries, and shifts mass
alternately up and down along it until some entry hits 0 or 1. The shift
direction is random with probabilities inversely proportional to the shift
sizes, which keeps every entry's expectation unchanged.

Arithmetic is generic: floats for sampling, ``fractions.Fraction`` for the
exact enumeration of the sampler's branching tree.
"""

from __future__ import annotations

import math
from fractions import Fraction
from typing import Callable, Iterator, Optional

import numpy as np

from .errors import SamplingError

FLOAT_SNAP = 1e-9


class RoundingState:
    """Mutable rounding state over the augmented reviewer x (papers + slack) graph.

    Nodes ``0..n_r-1`` are reviewers, ``n_r..n_r+n_p-1`` papers and
    ``n_r+n_p..n_r+n_p+n_r-1`` the per-reviewer slack columns. An edge is a
    key ``(reviewer, column)`` where ``column < n_p`` is a paper and
    ``column = n_p + r`` is the slack of reviewer ``r``.
    """

    def __init__(self, values: dict, n_reviewers: int, n_papers: int, exact: bool):
        self.values = values
        self.n_r = n_reviewers
        self.n_p = n_papers
        self.exact = exact
        self.adj: dict = {}
        for edge, x in values.items():
            if not self._integral(x):
                self._link(edge)

    # -- construction -----------------------------------------------------

    @classmethod
    def from_matrix(cls, marginals, caps=None, exact: bool = False, tol: float = FLOAT_SNAP) -> "RoundingState":
        """Build the augmented state from a reviewer x paper marginal matrix.

        ``marginals`` may hold floats or Fractions. Reviewer slack equals the
        gap to the next integer above the row mass; ``caps`` is only used for
        validation.
        """
        n_r, n_p = len(marginals), len(marginals[0]) if len(marginals) else 0
        values: dict = {}
        one = Fraction(1) if exact else 1.0
        zero = Fraction(0) if exact else 0.0
        for r in range(n_r):
            row_sum = zero
            for p in range(n_p):
                x = Fraction(marginals[r][p]) if exact else float(marginals[r][p])
                if not exact:
                    if abs(x) <= tol:
                        x = 0.0
                    elif abs(x - 1.0) <= tol:
                        x = 1.0
                if x < 0 or x > one:
                    raise SamplingError(f"marginal {x} at ({r}, {p}) outside [0, 1]")
                if x != zero:
                    values[(r, p)] = x
                row_sum += x
            if exact:
                target = Fraction(math.ceil(row_sum))
            else:
                target = float(math.ceil(row_sum - tol))
                if target < row_sum:
                    target = row_sum
            if caps is not None and target > caps[r] + (0 if exact else tol):
                raise SamplingError(f"reviewer {r} mass {row_sum} exceeds cap {caps[r]}")
            slack = target - row_sum
            if not exact and abs(slack) <= tol:
                slack = 0.0
            if slack != zero:
                values[(r, n_p + r)] = slack
        for p in range(n_p):
            col = sum((values.get((r, p), zero) for r in range(n_r)), zero)
            err = abs(col - round(col))
            if (exact and err != 0) or (not exact and err > 1e-6):
                raise SamplingError(f"paper column {p} has non-integral mass {col}")
        return cls(values, n_r, n_p, exact)

    def copy(self) -> "RoundingState":
        new = RoundingState.__new__(RoundingState)
        new.values = dict(self.values)
        new.n_r, new.n_p, new.exact = self.n_r, self.n_p, self.exact
        new.adj = {node: set(edges) for node, edges in self.adj.items()}
        return new

    # -- graph helpers ----------------------------------------------------

    def _integral(self, x) -> bool:
        return x == 0 or x == 1

    def _nodes(self, edge) -> tuple:
        r, c = edge
        return r, self.n_r + c

    def _link(self, edge):
        a, b = self._nodes(edge)
        self.adj.setdefault(a, set()).add(edge)
        self.adj.setdefault(b, set()).add(edge)

    def _unlink(self, edge):
        for node in self._nodes(edge):
            edges = self.adj[node]
            edges.discard(edge)
            if not edges:
                del self.adj[node]

    def done(self) -> bool:
        return not self.adj

    def fractional_count(self) -> int:
        return sum(len(e) for e in self.adj.values()) // 2

    def _walk(self, start_node, first_edge, visited_pos) -> tuple:
        """Extend from ``start_node`` along ``first_edge`` until a node repeats or a dead end."""
        nodes, edges = [start_node], []
        visited_pos = {start_node: 0} if visited_pos is None else visited_pos
        edge = first_edge
        node = start_node
        while True:
            a, b = self._nodes(edge)
            nxt = b if a == node else a
            edges.append(edge)
            if nxt in visited_pos:
                return nodes, edges, nxt
            visited_pos[nxt] = len(nodes)
            nodes.append(nxt)
            options = self.adj[nxt]
            if len(options) < 2:
                return nodes, edges, None
            edge = min(e for e in options if e != edge)
            node = nxt

    def find_structure(self) -> list:
        """Edge sequence of a cycle or maximal path among fractional entries.

        Deterministic: the walk starts at the smallest fractional edge and
        always leaves a node through its smallest other fractional edge.
        """
        if not self.adj:
            return []
        start_edge = min(self.values_fractional())
        a, b = self._nodes(start_edge)
        nodes, edges, repeat = self._walk(a, start_edge, None)
        if repeat is not None:
            i = nodes.index(repeat)
            return edges[i:]
        # dead end reached at nodes[-1]; walk back from it to find the full path
        end = nodes[-1]
        back_first = edges[-1]
        nodes2, edges2, repeat2 = self._walk(end, back_first, None)
        if repeat2 is not None:
            i = nodes2.index(repeat2)
            return edges2[i:]
        if len(self.adj.get(nodes2[-1], ())) >= 2:
            raise SamplingError("rounding walk stopped at a non-terminal node")
        for node in (nodes2[0], nodes2[-1]):
            if node < self.n_r + self.n_p:
                raise SamplingError(
                    "fractional path ends at a reviewer or paper; marginals violate integral row/column masses"
                )
        return edges2

    def values_fractional(self) -> Iterator:
        seen = set()
        for edges in self.adj.values():
            for e in edges:
                if e not in seen:
                    seen.add(e)
                    yield e

    def shifts(self, structure) -> tuple:
        """Maximal up-shift ``alpha`` and down-shift ``beta`` along ``structure``.

        Direction ``+`` adds to even positions and subtracts from odd ones.
        """
        up = [self.values[e] for e in structure[0::2]]
        down = [self.values[e] for e in structure[1::2]]
        alpha = min(min(1 - x for x in up), min(down) if down else math.inf)
        beta = min(min(up), min(1 - x for x in down) if down else math.inf)
        return alpha, beta

    def apply(self, structure, amount, sign: int) -> None:
        """Shift ``sign * amount`` onto even positions and the opposite onto odd ones."""
        for idx, edge in enumerate(structure):
            delta = amount if (idx % 2 == 0) == (sign > 0) else -amount
            x = self.values[edge] + delta
            if not self.exact:
                if x <= FLOAT_SNAP:
                    x = 0.0
                elif x >= 1.0 - FLOAT_SNAP:
                    x = 1.0
            if x < 0 or x > 1:
                raise SamplingError(f"rounding step pushed {edge} to {x}")
            self.values[edge] = x
            if self._integral(x):
                self._unlink(edge)

    def step(self, choose_up: Callable[[object, object], bool]) -> None:
        structure = self.find_structure()
        if len(structure) % 2 == 1 and self._is_cycle(structure):
            raise SamplingError("odd cycle in a bipartite graph")
        alpha, beta = self.shifts(structure)
        if choose_up(alpha, beta):
            self.apply(structure, alpha, +1)
        else:
            self.apply(structure, beta, -1)

    def _is_cycle(self, structure) -> bool:
        first, last = set(self._nodes(structure[0])), set(self._nodes(structure[-1]))
        return len(structure) > 1 and bool(first & last)

    def matrix(self) -> np.ndarray:
        z = np.zeros((self.n_r, self.n_p))
        for (r, c), x in self.values.items():
            if c < self.n_p:
                z[r, c] = float(x)
        return z


def random_chooser(rng: np.random.Generator) -> Callable:
    def choose(alpha, beta) -> bool:
        return rng.random() * (alpha + beta) < beta
    return choose


def round_once(marginals, caps=None, rng: Optional[np.random.Generator] = None, max_steps: Optional[int] = None) -> np.ndarray:
    """Draw one integral assignment whose pair marginals equal ``marginals``."""
    state = RoundingState.from_matrix(np.asarray(marginals, dtype=float).tolist(), caps)
    limit = state.fractional_count() if max_steps is None else max_steps
    choose = random_chooser(rng if rng is not None else np.random.default_rng())
    steps = 0
    while not state.done():
        if steps > limit:
            raise SamplingError("dependent rounding did not terminate within the fractional-entry bound")
        state.step(choose)
        steps += 1
    return state.matrix()


def round_deterministic(marginals, caps=None) -> np.ndarray:
    """Round along cycles/paths in the direction of the larger shift.

    Applied to an optimal LP point this keeps the objective unchanged: both
    shift directions stay feasible, so the objective is flat along them.
    """
    state = RoundingState.from_matrix(np.asarray(marginals, dtype=float).tolist(), caps)
    while not state.done():
        state.step(lambda alpha, beta: alpha >= beta)
    return state.matrix()


def enumerate_outcomes(marginals, caps=None) -> list:
    """Exact distribution of the sampler: list of ``(probability, assignment)``.

    Walks the full branching tree of ``round_once`` with rational
    arithmetic. Identical assignments reached along different branches are
    merged. Exponential in the number of steps; meant for small supports.
    """
    rows = [[Fraction(x).limit_denominator(10**12) if not isinstance(x, Fraction) else x for x in row] for row in marginals]
    root = RoundingState.from_matrix(rows, caps, exact=True)
    leaves: dict = {}

    def visit(state: RoundingState, prob: Fraction):
        if state.done():
            key = tuple(tuple(int(v) for v in row) for row in state.matrix().astype(int))
            leaves[key] = leaves.get(key, Fraction(0)) + prob
            return
        structure = state.find_structure()
        alpha, beta = state.shifts(structure)
        total = alpha + beta
        up = state.copy()
        up.apply(structure, alpha, +1)
        visit(up, prob * beta / total)
        down = state.copy()
        down.apply(structure, beta, -1)
        visit(down, prob * alpha / total)

    visit(root, Fraction(1))
    return [(p, np.array(z, dtype=float)) for z, p in sorted(leaves.items())]
