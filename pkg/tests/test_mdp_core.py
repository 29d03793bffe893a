import numpy as np
import pytest

from errors import GridConstructionError, InvalidInputError
from mdp_core import (ACTION_NAMES, NUM_GRID_ACTIONS, DeterministicMdp, GridWorldSpec, build_grid_world,
                      parse_cells, render_grid, states_reaching_absorbing, validate_assumptions)


def test_corridor_has_three_goal_actions():
    mdp = build_grid_world(GridWorldSpec(width=2, height=1, goal_cell=(0, 1)))

    assert mdp.num_nonabsorbing == 1
    assert mdp.num_actions == NUM_GRID_ACTIONS
    to_goal = [ACTION_NAMES[u] for u in range(9) if mdp.transition[0, u] == mdp.absorbing]
    assert to_goal == ['right', 'up-right', 'down-right']
    assert np.sum(mdp.transition[0] == 0) == 6


def test_states_are_row_major_with_goal_last():
    spec = GridWorldSpec(width=3, height=3, goal_cell=(1, 1), obstacle_cells=frozenset({(0, 0)}))
    mdp = build_grid_world(spec)

    assert mdp.num_nonabsorbing == 7
    assert mdp.cells[0] == (0, 1)
    assert mdp.cells[-1] == (1, 1)
    assert list(mdp.cells[:-1]) == sorted(mdp.cells[:-1])


def test_move_into_obstacle_stays_put():
    spec = GridWorldSpec(width=3, height=3, goal_cell=(1, 1), obstacle_cells=frozenset({(0, 0)}))
    mdp = build_grid_world(spec)
    left = ACTION_NAMES.index('left')

    assert mdp.cells[0] == (0, 1)
    assert mdp.transition[0, left] == 0


def test_grid_costs_and_default_policy(square_grid):
    mdp = build_grid_world(square_grid)

    assert np.all(mdp.cost[:-1] == 0.5)
    assert np.all(mdp.cost[-1] == 0.0)
    assert np.all(mdp.transition[-1] == mdp.absorbing)
    assert np.allclose(mdp.default_policy.sum(axis=1), 1.0)
    assert validate_assumptions(mdp).passed


def test_mdp_arrays_are_read_only(square_grid):
    mdp = build_grid_world(square_grid)
    with pytest.raises(ValueError):
        mdp.transition[0, 0] = 1


@pytest.mark.parametrize('spec', [
    GridWorldSpec(width=2, height=2, goal_cell=(2, 0)),
    GridWorldSpec(width=2, height=2, goal_cell=(0, 0), obstacle_cells=frozenset({(0, 0)})),
    GridWorldSpec(width=2, height=2, goal_cell=(0, 0), stage_cost=0.0),
    GridWorldSpec(width=1, height=1, goal_cell=(0, 0)),
    GridWorldSpec(width=0, height=2, goal_cell=(0, 0)),
])
def test_invalid_layouts_are_rejected(spec):
    with pytest.raises(GridConstructionError):
        build_grid_world(spec)


def test_grid_world_needs_nine_actions(square_grid):
    with pytest.raises(InvalidInputError):
        build_grid_world(square_grid, num_actions=5)


def test_unreachable_absorbing_state_is_reported():
    mdp = DeterministicMdp(
        num_nonabsorbing=2,
        transition=[[0], [2], [2]],
        cost=[[1.0], [1.0], [0.0]],
        default_policy=[[1.0], [1.0], [1.0]],
    )
    report = validate_assumptions(mdp)

    assert not report.passed
    assert not report['absorbing_reachable'].passed
    assert '[0]' in report['absorbing_reachable'].detail
    assert states_reaching_absorbing(mdp).tolist() == [False, True, True]


def test_cost_and_policy_failures_are_reported():
    mdp = DeterministicMdp(
        num_nonabsorbing=1,
        transition=[[1, 0], [1, 1]],
        cost=[[0.0, 1.0], [0.0, 0.0]],
        default_policy=[[0.5, 0.4], [0.5, 0.5]],
    )
    names = {check.name for check in validate_assumptions(mdp).failures}

    assert names == {'positive_costs', 'default_policy_normalized'}


def test_mdp_shape_mismatch_is_rejected():
    with pytest.raises(InvalidInputError):
        DeterministicMdp(1, transition=[[1], [1]], cost=[[0.5]], default_policy=[[1.0], [1.0]])


def test_parse_cells():
    assert parse_cells('0,1; 2,2') == [(0, 1), (2, 2)]
    assert parse_cells('') == []
    with pytest.raises(ValueError):
        parse_cells('1,2,3')


def test_render_grid():
    spec = GridWorldSpec(width=3, height=3, goal_cell=(1, 1), obstacle_cells=frozenset({(0, 0)}))
    mdp = build_grid_world(spec)

    assert render_grid(mdp, spec) == '# . .\n. G .\n. . .'

    corridor = GridWorldSpec(width=2, height=1, goal_cell=(0, 1))
    assert render_grid(build_grid_world(corridor), corridor, [ACTION_NAMES.index('right')]) == '> G'
