"""Tests for the symbolic gridworld and dataset collection."""

import numpy as np
import pytest

from _itc_common import ConfigError, GridShape, substream
from gridworld import (
    CREATURE,
    DOWN,
    FLOOR,
    GOAL,
    NOOP,
    PLAYER,
    RIGHT,
    WALL,
    GridConfig,
    GridState,
    collect,
    creature_counts,
    render,
    reset,
    run_episode,
    step,
    symbol_codebook,
    token_symbols,
)
from itc_decoder import FrameTokens


def _empty_state(player, creatures=(), walls=(), goal=None, size=6, seed=0) -> GridState:
    terrain = np.full((size, size), FLOOR, dtype=np.int64)
    terrain[0, :] = terrain[-1, :] = WALL
    terrain[:, 0] = terrain[:, -1] = WALL
    for x, y in walls:
        terrain[y, x] = WALL
    if goal is not None:
        terrain[goal[1], goal[0]] = GOAL
    return GridState(terrain, player, list(creatures), 0, substream(seed, 1))


class TestStep:
    def test_blocked_move(self):
        """Player at (1,1), wall immediately to the right: RIGHT leaves it in place."""
        state = _empty_state((1, 1), walls=[(2, 1)])
        nxt, reward, done = step(state, RIGHT)
        assert nxt.player == (1, 1)
        assert reward == 0 and not done

    def test_free_move(self):
        nxt, _, _ = step(_empty_state((1, 1)), DOWN)
        assert nxt.player == (1, 2)

    def test_creature_blocks_player(self):
        state = _empty_state((1, 1), creatures=[(2, 1)], walls=[(3, 1), (2, 2)])
        nxt, _, _ = step(state, RIGHT)
        assert nxt.player == (1, 1)

    def test_goal_pays_and_ends(self):
        nxt, reward, done = step(_empty_state((1, 1), goal=(2, 1)), RIGHT)
        assert nxt.player == (2, 1)
        assert reward == 1 and done

    def test_step_cap(self):
        cfg = GridConfig(max_steps=3, num_creatures=0)
        state = _empty_state((1, 1))
        for _ in range(2):
            state, _, done = step(state, NOOP, cfg)
            assert not done
        _, _, done = step(state, NOOP, cfg)
        assert done

    def test_does_not_mutate_input(self):
        state = _empty_state((2, 2), creatures=[(3, 3), (4, 4)])
        before = (state.player, list(state.creatures), state.step_count)
        draw = substream(0, 1).random()
        step(state, RIGHT)
        assert (state.player, state.creatures, state.step_count) == before
        assert state.rng.random() == draw

    def test_unknown_action(self):
        with pytest.raises(ConfigError):
            step(_empty_state((1, 1)), 9)

    def test_creatures_move_at_most_one_cell(self):
        """10,000 seeded steps: every creature displacement has squared norm <= 1."""
        cfg = GridConfig(num_creatures=3, creature_prob=1.0, num_walls=2)
        steps = 0
        seed = 0
        while steps < 10_000:
            state = reset(cfg, seed)
            rng = substream(seed, 2)
            done = False
            while not done and steps < 10_000:
                before = list(state.creatures)
                state, _, done = step(state, int(rng.integers(5)), cfg)
                for (x0, y0), (x1, y1) in zip(before, state.creatures):
                    assert (x1 - x0) ** 2 + (y1 - y0) ** 2 <= 1
                    assert state.terrain[y1, x1] == FLOOR
                steps += 1
            seed += 1

    def test_entities_are_conserved(self):
        cfg = GridConfig(num_creatures=2, creature_prob=1.0)
        for seed in range(20):
            state = reset(cfg, seed)
            rng = substream(seed, 3)
            done = False
            while not done:
                state, _, done = step(state, int(rng.integers(5)), cfg)
                symbols = state.symbols()
                assert (symbols == PLAYER).sum() == 1
                assert (symbols == CREATURE).sum() == 2
                assert len(set(state.creatures)) == 2


class TestReset:
    def test_layout(self):
        cfg = GridConfig(num_creatures=2, creature_prob=1.0, num_walls=3)
        state = reset(cfg, 4)
        symbols = state.symbols()
        assert (symbols[0] == WALL).all() and (symbols[:, -1] == WALL).all()
        assert (symbols == GOAL).sum() == 1
        assert (state.terrain[1:-1, 1:-1] == WALL).sum() == 3
        assert len(state.creatures) == 2

    def test_deterministic(self):
        cfg = GridConfig()
        a, b = reset(cfg, 11), reset(cfg, 11)
        np.testing.assert_array_equal(a.symbols(), b.symbols())

    def test_no_creatures_when_probability_zero(self):
        cfg = GridConfig(creature_prob=0.0)
        assert all(not reset(cfg, s).has_creature for s in range(20))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            GridConfig(height=2)
        with pytest.raises(ConfigError):
            GridConfig(height=3, width=3, num_walls=1)
        with pytest.raises(ConfigError):
            GridConfig(creature_prob=1.5)


class TestEpisodes:
    def test_trajectory_is_reproducible(self):
        cfg = GridConfig(num_creatures=0)
        a_frames, a_steps = run_episode(cfg, 5, 0)
        b_frames, b_steps = run_episode(cfg, 5, 0)
        assert a_steps == b_steps
        assert all(np.array_equal(x, y) for x, y in zip(a_frames, b_frames))

    def test_episode_length_capped(self):
        cfg = GridConfig(max_steps=100)
        for e in range(20):
            _, steps = run_episode(cfg, 0, e)
            assert len(steps) <= 100
            assert steps[-1][2]

    def test_render_is_one_hot(self):
        state = reset(GridConfig(), 0)
        image = render(state)
        assert image.shape == (6, 6, 5)
        np.testing.assert_array_equal(image.sum(axis=-1), 1)
        np.testing.assert_array_equal(image.argmax(axis=-1), state.symbols())


class TestCollect:
    def test_transitions_chain(self):
        ds = collect(GridConfig(), 4, seed=0)
        for eps in ds.episodes().values():
            for a, b in zip(eps, eps[1:]):
                assert a.s_next == b.s_t
            assert eps[-1].d_t

    def test_header(self):
        ds = collect(GridConfig(), 2, seed=3)
        assert ds.header["geometry"] == {"height": 6, "width": 6}
        assert ds.header["episodes"] == 2
        assert ds.header["codebook_size"] <= 5
        assert ds.shape.size == 36

    def test_creature_flag_matches_frame(self):
        cb = symbol_codebook()
        ds = collect(GridConfig(), 10, seed=1, codebook=cb)
        creature_ids = np.flatnonzero(token_symbols(cb) == CREATURE)
        for tr in ds.transitions:
            assert tr.has_creature == bool(np.isin(tr.s_t.tokens, creature_ids).any())

    def test_creature_fraction_follows_probability(self):
        assert not any(t.has_creature for t in collect(GridConfig(creature_prob=0.0), 5, 0).transitions)
        assert all(t.has_creature for t in collect(GridConfig(creature_prob=1.0), 5, 0).transitions)

    def test_same_seed_same_data(self):
        a = collect(GridConfig(), 3, seed=9)
        b = collect(GridConfig(), 3, seed=9)
        assert a.header == b.header
        assert len(a) == len(b)
        assert all(x.s_t == y.s_t and x.a_t == y.a_t for x, y in zip(a.transitions, b.transitions))

    def test_split_holds_out_last_episodes(self):
        ds = collect(GridConfig(), 10, seed=0)
        train, held = ds.split(0.2)
        assert {t.episode for t in held.transitions} == {8, 9}
        assert len(train) + len(held) == len(ds)

    def test_zero_episodes(self):
        with pytest.raises(ConfigError):
            collect(GridConfig(), 0, seed=0)



class TestCreatureCounts:
    def test_counts_per_frame(self):
        shape = GridShape(2, 2)
        frames = [FrameTokens([0, 4, 4, 1], shape), FrameTokens([0, 0, 1, 1], shape)]
        assert creature_counts(frames, [4]) == [2, 0]
        assert creature_counts(frames, {1, 4}) == [3, 2]
