"""Core types and belief operations."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nested_tom.core import (
    Episode,
    Goal,
    InteractiveState,
    ParticleBelief,
    WeightedParticle,
    boltzmann_policy,
    make_rng,
    normalize,
    particle_update,
    stable_seed,
)
from nested_tom.errors import AllWeightsZero, SpaceMismatch
from nested_tom.spaces import (
    HypothesisSpace,
    Posterior,
    floor_smooth,
    kl_divergence,
    uniform_posterior,
)


def _state(level=0, world=0):
    if level == 0:
        return InteractiveState(0, world)
    inner = ParticleBelief((WeightedParticle(_state(level - 1, world), 1.0),))
    return InteractiveState(level, world, inner, Goal(0, 3))


class TestInteractiveState:
    def test_depth_matches_level(self):
        for level in range(4):
            assert _state(level).depth() == level

    def test_level0_rejects_extras(self):
        belief = ParticleBelief((WeightedParticle(_state(0), 1.0),))
        with pytest.raises(ValueError):
            InteractiveState(0, 0, belief, Goal(0, 3))

    def test_level1_requires_level0_particles(self):
        belief = ParticleBelief((WeightedParticle(_state(1), 1.0),))
        with pytest.raises(ValueError):
            InteractiveState(1, 0, belief, Goal(0, 3))

    def test_goal_bounds(self):
        with pytest.raises(ValueError):
            Goal(3, 3)


class TestNormalize:
    def test_symmetry(self):
        b = normalize([WeightedParticle(_state(), 2.0), WeightedParticle(_state(), 2.0)])
        assert np.allclose(b.weights(), [0.5, 0.5])

    def test_single_particle(self):
        b = normalize([WeightedParticle(_state(), 3.0)])
        assert np.allclose(b.weights(), [1.0])

    def test_all_zero_raises(self):
        with pytest.raises(AllWeightsZero):
            normalize([WeightedParticle(_state(), 0.0), WeightedParticle(_state(), 0.0)])

    @given(st.lists(st.floats(min_value=1e-6, max_value=1e6), min_size=1, max_size=8))
    @settings(max_examples=60, deadline=None)
    def test_idempotent(self, weights):
        particles = [WeightedParticle(_state(), w) for w in weights]
        once = normalize(particles)
        twice = normalize(list(once.particles))
        assert np.array_equal(once.weights(), twice.weights())
        assert once.is_normalized()


class TestBoltzmannPolicy:
    def test_equal_values_uniform(self):
        p = boltzmann_policy(np.zeros(5), beta=3.0, floor=1e-4)
        assert np.allclose(p.probs, 0.2)

    def test_large_beta_limit(self):
        p = boltzmann_policy(np.array([1.0, 0.0]), beta=200.0, floor=1e-4)
        assert p.probs[0] > 0.99
        assert p.probs[1] >= 1e-4

    def test_closed_form(self):
        p = boltzmann_policy(np.array([1.0, 0.0]), beta=2.0, floor=0.0)
        e2 = math.exp(2.0)
        assert np.allclose(p.probs, [e2 / (e2 + 1), 1 / (e2 + 1)])
        assert abs(p.probs[0] - 0.8808) < 5e-4

    def test_floor_is_lower_bound(self):
        p = boltzmann_policy(np.array([50.0, 0.0, -50.0]), beta=5.0, floor=1e-4)
        assert p.probs.min() >= 1e-4

    @given(
        st.lists(st.floats(min_value=-5, max_value=5), min_size=2, max_size=6),
        st.floats(min_value=0.1, max_value=10.0),
        st.floats(min_value=0.1, max_value=4.0),
    )
    @settings(max_examples=80, deadline=None)
    def test_affine_rescaling_invariance(self, values, beta, scale):
        # same beta * scale product => identical distribution and argmax
        v = np.asarray(values)
        base = boltzmann_policy(v, beta=beta, floor=1e-4)
        rescaled = boltzmann_policy(scale * v + 1.7, beta=beta / scale, floor=1e-4)
        assert base.argmax() == rescaled.argmax()
        assert np.allclose(base.probs, rescaled.probs, atol=1e-9)


class TestKlDivergence:
    def space(self, n):
        return HypothesisSpace(1, tuple(range(n)))

    def test_identity(self):
        p = Posterior(self.space(3), np.array([0.2, 0.5, 0.3]))
        assert kl_divergence(p, p) == 0.0

    def test_closed_form_log2(self):
        sp = self.space(2)
        p = Posterior(sp, np.array([1.0, 0.0]))
        q = Posterior(sp, np.array([0.5, 0.5]))
        assert abs(kl_divergence(p, q) - math.log(2)) < 1e-12

    def test_direct_evaluation(self):
        sp = self.space(2)
        p = Posterior(sp, np.array([0.7, 0.3]))
        q = Posterior(sp, np.array([0.5, 0.5]))
        expected = 0.7 * math.log(1.4) + 0.3 * math.log(0.6)
        assert abs(kl_divergence(p, q) - expected) < 1e-12
        assert abs(expected - 0.08228) < 5e-6

    def test_space_mismatch(self):
        p = Posterior(self.space(2), np.array([0.5, 0.5]))
        q = Posterior(HypothesisSpace(1, ("a", "b")), np.array([0.5, 0.5]))
        with pytest.raises(SpaceMismatch):
            kl_divergence(p, q)

    def test_nonnegative_and_identity_randomized(self):
        rng = make_rng("kl-prop")
        sp = self.space(6)
        for _ in range(1000):
            p = rng.dirichlet(np.ones(6))
            q = rng.dirichlet(np.ones(6))
            pp, qq = Posterior(sp, p), Posterior(sp, q)
            assert kl_divergence(pp, qq) >= 0.0
            assert kl_divergence(pp, pp) == 0.0

    def test_floor_smooth_renormalizes(self):
        sp = self.space(4)
        p = Posterior(sp, np.array([1.0, 0.0, 0.0, 0.0]))
        sm = floor_smooth(p, 1e-4)
        assert sm.probs.min() >= 1e-4 / 2
        assert abs(sm.probs.sum() - 1.0) < 1e-12
        assert np.isfinite(kl_divergence(uniform_posterior(sp), sm))


class ToyLineEnv:
    """Three-cell line world with a goal-seeking modeled agent.

    The modeled agent moves left or right toward its goal cell with a
    Boltzmann policy over the negated distance after the move.  The world
    is fully observable and the observation includes the agent's action,
    so the exact action likelihood is available.
    """

    n_cells = 5

    def __init__(self, beta=3.0, floor=1e-4):
        self.beta = beta
        self.floor = floor

    def policy(self, pos, goal_id):
        succ = np.array([max(0, pos - 1), min(self.n_cells - 1, pos + 1)])
        values = -np.abs(succ - goal_id).astype(float)
        return boltzmann_policy(values, self.beta, self.floor).probs

    def transition(self, state, own_action, rng):
        probs = self.policy(state.world, state.other_goal.id)
        move = int(rng.choice(2, p=probs))
        new_world = max(0, min(self.n_cells - 1, state.world + (1 if move else -1)))
        return InteractiveState(state.level, new_world, state.lower_belief, state.other_goal)

    def observation_likelihood(self, observation, state):
        return 1.0 if observation[0] == state.world else 0.0

    def exact_action_likelihood(self, state, own_action, observation):
        new_world, action = observation
        probs = self.policy(state.world, state.other_goal.id)
        lik = probs[action]
        succ = max(0, min(self.n_cells - 1, state.world + (1 if action else -1)))
        next_state = InteractiveState(state.level, succ, state.lower_belief, state.other_goal)
        return next_state, float(lik)


def _line_belief(env, pos, goals):
    particles = []
    for g in goals:
        lower = ParticleBelief((WeightedParticle(InteractiveState(0, pos), 1.0),))
        particles.append(
            WeightedParticle(
                InteractiveState(1, pos, lower, Goal(g, ToyLineEnv.n_cells)), 1.0
            )
        )
    return normalize(particles)


class TestParticleUpdate:
    def test_indicator_equals_exact_bayes(self):
        env = ToyLineEnv()
        belief = _line_belief(env, 2, [0, 1, 4])
        rng = make_rng("pu")
        action_right = 1
        updated = particle_update(belief, (3, action_right), None, env, rng)
        # hand Bayes: weights proportional to each goal's probability of
        # moving right from cell 2
        liks = np.array([env.policy(2, g)[action_right] for g in (0, 1, 4)])
        expected = liks / liks.sum()
        assert np.abs(updated.weights() - expected).max() < 1e-9

    def test_single_consistent_particle(self):
        env = ToyLineEnv()
        belief = _line_belief(env, 2, [4])
        updated = particle_update(belief, (3, 1), None, env, make_rng("pu1"))
        assert updated.size == 1
        assert np.allclose(updated.weights(), [1.0])

    def test_impossible_evidence_raises(self):
        env = ToyLineEnv(floor=0.0)
        belief = _line_belief(env, 0, [0])

        class NoLik(ToyLineEnv):
            def exact_action_likelihood(self, state, own_action, observation):
                return None

            def observation_likelihood(self, observation, state):
                return 0.0

        with pytest.raises(AllWeightsZero):
            particle_update(belief, (4, 1), None, NoLik(), make_rng("pu2"))

    def test_count_preserved(self):
        env = ToyLineEnv()
        belief = _line_belief(env, 2, [0, 1, 2, 3, 4])
        updated = particle_update(belief, (1, 0), None, env, make_rng("pu3"))
        assert updated.size == belief.size


class TestSeeds:
    def test_stable_across_calls(self):
        assert stable_seed("a", 1, 2) == stable_seed("a", 1, 2)
        assert stable_seed("a", 1, 2) != stable_seed("a", 1, 3)

    def test_rng_reproducible(self):
        a = make_rng("x", 5).standard_normal(4)
        b = make_rng("x", 5).standard_normal(4)
        assert np.array_equal(a, b)


class TestEpisode:
    def test_requires_step(self):
        with pytest.raises(ValueError):
            Episode("e", 0, "k", (), ())

    def test_actions_reference_agents(self):
        from nested_tom.core import AgentRole, EpisodeStep

        with pytest.raises(ValueError):
            Episode(
                "e", 0, "k",
                (AgentRole("a", 0, 0),),
                (EpisodeStep({}, {"b": "U"}, {}),),
            )
