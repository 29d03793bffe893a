"""
Deterministic-transition MDPs for relative-entropy-regularized control.

States are enumerated row-major over the free cells of a grid with the
absorbing (goal) state placed last, so index S is always x_abs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import FrozenSet, Iterable, List, Optional, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order

from errors import GridConstructionError, InvalidInputError

logger = logging.getLogger(__name__)

StateId = int
ActionId = int
Cell = Tuple[int, int]

# (row delta, col delta); index 0 is do-nothing
ACTION_DELTAS: Tuple[Cell, ...] = (
    (0, 0),
    (-1, 0),
    (1, 0),
    (0, -1),
    (0, 1),
    (-1, -1),
    (-1, 1),
    (1, -1),
    (1, 1),
)
ACTION_NAMES = ('stay', 'up', 'down', 'left', 'right', 'up-left', 'up-right', 'down-left', 'down-right')
ACTION_ARROWS = ('o', '^', 'v', '<', '>', '\\', '/', '/', '\\')
NUM_GRID_ACTIONS = len(ACTION_DELTAS)

ROW_SUM_TOL = 1e-12


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class DeterministicMdp:
    """
    Finite MDP with a deterministic transition table.

    Attributes:
        num_nonabsorbing: S, the number of non-absorbing states
        transition: F[state][action] -> state, shape (S+1, |U|)
        cost: C[state][action], shape (S+1, |U|)
        default_policy: b[state][action], shape (S+1, |U|)
        cells: grid cell of every state when built from a grid (optional)
    """
    num_nonabsorbing: int
    transition: np.ndarray
    cost: np.ndarray
    default_policy: np.ndarray
    cells: Tuple[Cell, ...] = ()

    def __post_init__(self):
        if self.num_nonabsorbing < 1:
            raise InvalidInputError('an MDP needs at least one non-absorbing state')
        shape = (self.num_nonabsorbing + 1, np.shape(self.transition)[1] if np.ndim(self.transition) == 2 else 0)
        for name in ('transition', 'cost', 'default_policy'):
            value = getattr(self, name)
            if np.shape(value) != shape or shape[1] == 0:
                raise InvalidInputError(f'{name} must have shape (S+1, |U|), got {np.shape(value)}')
        object.__setattr__(self, 'transition', _frozen(np.asarray(self.transition, dtype=np.int64)))
        object.__setattr__(self, 'cost', _frozen(np.asarray(self.cost, dtype=float)))
        object.__setattr__(self, 'default_policy', _frozen(np.asarray(self.default_policy, dtype=float)))
        object.__setattr__(self, 'cells', tuple(tuple(c) for c in self.cells))

    @property
    def absorbing(self) -> StateId:
        return self.num_nonabsorbing

    @property
    def num_states(self) -> int:
        return self.num_nonabsorbing + 1

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]


@dataclass(frozen=True)
class GridWorldSpec:
    width: int
    height: int
    goal_cell: Cell
    obstacle_cells: FrozenSet[Cell] = field(default_factory=frozenset)
    stage_cost: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, 'goal_cell', tuple(self.goal_cell))
        object.__setattr__(self, 'obstacle_cells', frozenset(tuple(c) for c in self.obstacle_cells))

    def inside(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.height and 0 <= cell[1] < self.width

    def free_cells(self) -> List[Cell]:
        return [
            (r, c)
            for r in range(self.height)
            for c in range(self.width)
            if (r, c) not in self.obstacle_cells
        ]

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise GridConstructionError(f'empty grid {self.width}x{self.height}')
        if not self.inside(self.goal_cell):
            raise GridConstructionError(f'goal {self.goal_cell} lies outside the {self.width}x{self.height} grid')
        if self.goal_cell in self.obstacle_cells:
            raise GridConstructionError(f'goal {self.goal_cell} is blocked by an obstacle')
        if not self.stage_cost > 0:
            raise GridConstructionError('stage_cost must be positive')
        if len(self.free_cells()) < 2:
            raise GridConstructionError('grid needs at least one free non-goal cell')


def parse_cell(text: str) -> Cell:
    parts = [p.strip() for p in str(text).split(',')]
    if len(parts) != 2:
        raise ValueError(f'cell must look like "R,C", got {text!r}')
    return int(parts[0]), int(parts[1])


def parse_cells(text: str) -> List[Cell]:
    return [parse_cell(chunk) for chunk in str(text).split(';') if chunk.strip()]


def build_grid_world(spec: GridWorldSpec, num_actions: int = NUM_GRID_ACTIONS) -> DeterministicMdp:
    """
    Build the Grid-World MDP: free cells are states, the goal is absorbing.

    Moves are clamped coordinate-wise to the grid; a move whose clamped target
    is an obstacle leaves the agent where it is.

    Args:
        spec: grid layout
        num_actions: must be 9 (eight directions plus do-nothing)

    Returns:
        DeterministicMdp with uniform default policy and uniform stage cost
    """
    if num_actions != NUM_GRID_ACTIONS:
        raise InvalidInputError(f'Grid-World uses {NUM_GRID_ACTIONS} actions, got {num_actions}')
    spec.validate()

    free = [cell for cell in spec.free_cells() if cell != spec.goal_cell]
    cells = free + [spec.goal_cell]
    index = {cell: i for i, cell in enumerate(cells)}
    num_states = len(cells)
    absorbing = num_states - 1

    transition = np.empty((num_states, num_actions), dtype=np.int64)
    for state, (row, col) in enumerate(cells):
        for action, (dr, dc) in enumerate(ACTION_DELTAS):
            if state == absorbing:
                transition[state, action] = absorbing
                continue
            target = (min(max(row + dr, 0), spec.height - 1), min(max(col + dc, 0), spec.width - 1))
            transition[state, action] = index.get(target, state)

    cost = np.full((num_states, num_actions), float(spec.stage_cost))
    cost[absorbing] = 0.0
    default_policy = np.full((num_states, num_actions), 1.0 / num_actions)

    logger.debug('[Grid] built %dx%d grid: S=%d, goal=%s', spec.width, spec.height, absorbing, spec.goal_cell)
    return DeterministicMdp(absorbing, transition, cost, default_policy, tuple(cells))


@dataclass(frozen=True)
class AssumptionCheck:
    name: str
    passed: bool
    detail: str = ''


@dataclass(frozen=True)
class ValidationReport:
    checks: Tuple[AssumptionCheck, ...]

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def failures(self) -> List[AssumptionCheck]:
        return [check for check in self.checks if not check.passed]

    def __getitem__(self, name: str) -> AssumptionCheck:
        for check in self.checks:
            if check.name == name:
                return check
        raise KeyError(name)


def states_reaching_absorbing(mdp: DeterministicMdp) -> np.ndarray:
    """Boolean mask of states that reach x_abs using actions with b(u|x) > 0."""
    rows, cols = [], []
    for state in range(mdp.num_states):
        for action in range(mdp.num_actions):
            if mdp.default_policy[state, action] > 0:
                # reversed edge: successor -> state
                rows.append(int(mdp.transition[state, action]))
                cols.append(state)
    graph = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(mdp.num_states, mdp.num_states))
    order = breadth_first_order(graph, mdp.absorbing, directed=True, return_predecessors=False)
    mask = np.zeros(mdp.num_states, dtype=bool)
    mask[order] = True
    return mask


def validate_assumptions(mdp: DeterministicMdp) -> ValidationReport:
    """
    Check the standing assumptions on a deterministic MDP.

    Failures are reported, never raised.
    """
    checks: List[AssumptionCheck] = []
    S, absorbing = mdp.num_nonabsorbing, mdp.absorbing

    in_range = np.all((mdp.transition >= 0) & (mdp.transition < mdp.num_states))
    checks.append(AssumptionCheck('transition_total', bool(in_range),
                                  '' if in_range else 'transition table points outside the state space'))

    b = mdp.default_policy
    row_error = np.abs(b.sum(axis=1) - 1.0)
    normalized = bool(np.all(b >= 0) and np.all(row_error <= ROW_SUM_TOL))
    checks.append(AssumptionCheck(
        'default_policy_normalized', normalized,
        '' if normalized else f'max row-sum error {row_error.max():.3e}, min entry {b.min():.3e}'))

    positive = bool(np.all(mdp.cost[:S] > 0))
    bad_states = sorted({int(s) for s in np.argwhere(mdp.cost[:S] <= 0)[:, 0]})
    checks.append(AssumptionCheck('positive_costs', positive,
                                  '' if positive else f'non-positive cost at states {bad_states}'))

    zero_abs = bool(np.all(mdp.cost[absorbing] == 0))
    checks.append(AssumptionCheck('absorbing_zero_cost', zero_abs,
                                  '' if zero_abs else 'absorbing state has non-zero cost'))

    self_loop = bool(np.all(mdp.transition[absorbing] == absorbing))
    checks.append(AssumptionCheck('absorbing_self_loop', self_loop,
                                  '' if self_loop else 'absorbing state can be left'))

    if in_range:
        mask = states_reaching_absorbing(mdp)
        unreachable = [int(s) for s in np.flatnonzero(~mask)]
        checks.append(AssumptionCheck('absorbing_reachable', not unreachable,
                                      '' if not unreachable else f'x_abs unreachable from states {unreachable}'))
    else:
        checks.append(AssumptionCheck('absorbing_reachable', False, 'skipped: transition table invalid'))

    return ValidationReport(tuple(checks))


def render_grid(mdp: DeterministicMdp, spec: GridWorldSpec, actions: Optional[Iterable[int]] = None) -> str:
    """
    Text picture of a grid layout, optionally with one action arrow per state.

    '#' marks obstacles, 'G' the goal, '.' a free cell.
    """
    actions = list(actions) if actions is not None else None
    picture = [['#' for _ in range(spec.width)] for _ in range(spec.height)]
    for state, (row, col) in enumerate(mdp.cells):
        if state == mdp.absorbing:
            picture[row][col] = 'G'
        elif actions is not None:
            picture[row][col] = ACTION_ARROWS[actions[state]]
        else:
            picture[row][col] = '.'
    return '\n'.join(' '.join(line) for line in picture)
