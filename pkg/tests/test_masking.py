import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from c2fmae.masking import (
    MaskConfig, MaskPlan, ScheduleConfig, build_mask_plan, compose_progressive_mask, instance_guided_mask,
    instance_quota, largest_remainder, mode_alphas, patch_object_flags, patch_semantic_labels, random_mask,
    rng_stream, sample_visible_budget, schedule_alphas, semantic_guided_mask, semantic_quotas,
)
from c2fmae.numerics import ContractError
from c2fmae.synthdata import MultiGranularSample, SceneConfig, generate_sample
from c2fmae.tokenizer import TASKS, TokenLayout


def quota_oracle(labels, k):
    """Equal-weight region quotas with integer arithmetic only."""
    classes, sizes = np.unique(labels, return_counts=True)
    n = int(sizes.sum())
    floors = [k * int(s) // n for s in sizes]
    rems = [k * int(s) % n for s in sizes]          # fractional part times n
    left = k - sum(floors)
    for i in sorted(range(len(classes)), key=lambda i: (-rems[i], classes[i]))[:left]:
        floors[i] += 1
    return {int(c): f for c, f in zip(classes, floors)}


def toy_sample(sem, inst=None, p=8):
    sem = np.asarray(sem)
    inst = np.zeros_like(sem) if inst is None else np.asarray(inst)
    return MultiGranularSample(np.zeros(sem.shape + (3,)), inst, sem)


class TestLargestRemainder:
    def test_fraction_tie_goes_to_first_region(self):
        assert largest_remainder(5, [7, 3], [7, 3]) == [4, 1]

    def test_even_split(self):
        assert largest_remainder(8, [12, 4], [12, 4]) == [6, 2]

    def test_capacity_spill(self):
        assert largest_remainder(10, [0.9, 0.05, 0.05], [4, 4, 4]) == [4, 3, 3]

    def test_zero_weight_used_last(self):
        assert largest_remainder(5, [1.0, 0.0], [3, 5]) == [3, 2]

    def test_over_capacity(self):
        with pytest.raises(ContractError):
            largest_remainder(9, [1, 1], [4, 4])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(1, 50), min_size=1, max_size=6), st.data())
    def test_matches_integer_oracle(self, sizes, data):
        k = data.draw(st.integers(0, sum(sizes)))
        labels = np.repeat(np.arange(len(sizes)), sizes)
        got = largest_remainder(k, sizes, sizes)
        assert got == list(quota_oracle(labels, k).values())


class TestBudget:
    def test_full_budget(self):
        r = sample_visible_budget(rng_stream(0, "budget", 0), 192, 64)
        assert r.visible_counts == {"S": 64, "I": 64, "R": 64}

    def test_empty_budget(self):
        assert sample_visible_budget(rng_stream(0, "budget", 0), 0, 64).total == 0

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            sample_visible_budget(rng_stream(0, "budget", 0), 193, 64)

    def test_monte_carlo_mean(self):
        totals = np.zeros(3)
        for i in range(10_000):
            r = sample_visible_budget(rng_stream(5, "budget", i), 98, 196)
            assert r.total == 98
            assert all(0 <= v <= 196 for v in r.visible_counts.values())
            totals += [r.visible_counts[t] for t in TASKS]
        np.testing.assert_allclose(totals / 10_000, 98 / 3, atol=1.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 20), st.data(), st.floats(0.05, 10))
    def test_sum_and_capacity(self, seed, n, data, conc):
        v = data.draw(st.integers(0, 3 * n))
        r = sample_visible_budget(rng_stream(seed, "budget", 0), v, n, conc)
        assert r.total == v
        assert all(0 <= c <= n for c in r.visible_counts.values())


class TestRegionStats:
    def test_uniform_patch(self):
        sem = np.full((8, 8), 3)
        assert patch_semantic_labels(toy_sample(sem), 8).tolist() == [3]
        assert patch_object_flags(toy_sample(sem), 8).tolist() == [False]

    def test_majority(self):
        sem = np.full((8, 8), 4)
        sem.flat[:40] = 2
        assert patch_semantic_labels(toy_sample(sem), 8).tolist() == [2]

    def test_majority_tie_to_smaller(self):
        sem = np.full((8, 8), 4)
        sem.flat[:32] = 3
        assert patch_semantic_labels(toy_sample(sem), 8).tolist() == [3]

    @pytest.mark.parametrize("inside,flag", [(16, True), (15, False)])
    def test_object_threshold(self, inside, flag):
        inst = np.zeros((8, 8), dtype=int)
        inst.flat[:inside] = 1
        assert patch_object_flags(toy_sample(np.where(inst, 2, 0), inst), 8, 0.25).tolist() == [flag]


class TestGenerators:
    def test_random_extremes(self):
        rng = rng_stream(0, "random", 0)
        assert random_mask(10, 0, rng).sum() == 0
        assert random_mask(10, 10, rng).sum() == 10

    def test_random_too_many(self):
        with pytest.raises(ContractError):
            random_mask(4, 5, rng_stream(0, "random", 0))

    def test_random_frequency(self):
        freq = np.zeros(64)
        for i in range(10_000):
            freq += random_mask(64, 16, rng_stream(1, "random", i))
        assert np.abs(freq / 10_000 - 0.25).max() < 0.02

    def test_semantic_example_even(self):
        labels = np.array([1] * 12 + [2] * 4)
        m = semantic_guided_mask(labels, 8, None, rng_stream(0, "semantic", 0))
        assert m[labels == 1].sum() == 6 and m[labels == 2].sum() == 2

    def test_semantic_example_tie(self):
        labels = np.array([1] * 7 + [2] * 3)
        assert semantic_quotas(labels, 5) == {1: 4, 2: 1}
        m = semantic_guided_mask(labels, 5, None, rng_stream(0, "semantic", 1))
        assert m[labels == 1].sum() == 4 and m[labels == 2].sum() == 1

    def test_semantic_single_region_is_uniform(self):
        labels = np.zeros(64, dtype=int)
        freq = np.zeros(64)
        for i in range(2000):
            m = semantic_guided_mask(labels, 16, None, rng_stream(2, "semantic", i))
            assert m.sum() == 16
            freq += m
        assert np.abs(freq / 2000 - 0.25).max() < 0.05

    def test_semantic_weights(self):
        labels = np.array([0] * 8 + [1] * 8)
        assert semantic_quotas(labels, 6, {0: 3.0, 1: 1.0}) == {0: 5, 1: 1}
        # weight pushes region 0 past its capacity; excess goes to region 1
        assert semantic_quotas(labels, 12, {0: 10.0, 1: 1.0}) == {0: 8, 1: 4}

    def test_semantic_too_many(self):
        with pytest.raises(ContractError):
            semantic_guided_mask(np.zeros(4, dtype=int), 5, None, rng_stream(0, "semantic", 0))

    def test_instance_examples(self):
        flags = np.array([True] * 6 + [False] * 10)
        assert instance_quota(flags, 8, 0.75) == (6, 2)
        assert instance_quota(flags, 8, 0.9) == (6, 2)
        m = instance_guided_mask(flags, 8, 0.9, rng_stream(0, "instance", 0))
        assert m[flags].sum() == 6 and m[~flags].sum() == 2

    def test_instance_without_objects(self):
        flags = np.zeros(16, dtype=bool)
        m = instance_guided_mask(flags, 5, 0.75, rng_stream(0, "instance", 0))
        assert m.sum() == 5

    def test_instance_background_shortfall(self):
        flags = np.array([True] * 14 + [False] * 2)
        assert instance_quota(flags, 10, 0.75) == (8, 2)

    def test_instance_too_many(self):
        with pytest.raises(ContractError):
            instance_guided_mask(np.zeros(4, dtype=bool), 5, 0.75, rng_stream(0, "instance", 0))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 64), st.data(), st.integers(51, 100))
    def test_instance_emphasis(self, n, data, pct):
        alpha = pct / 100
        n_obj = data.draw(st.integers(0, n))
        k = data.draw(st.integers(0, n))
        flags = np.zeros(n, dtype=bool)
        flags[:n_obj] = True
        m = instance_guided_mask(flags, k, alpha, rng_stream(n, "instance", k))
        assert m.sum() == k
        k_obj = int(m[flags].sum())
        want = min(pct * k // 100, n_obj)
        if k - want <= n - n_obj:
            assert k_obj == want
        if n_obj >= k and k > 0:
            assert k_obj / k >= alpha - 1 / k

    def test_nested_as_budget_grows(self):
        labels = np.array([0] * 40 + [1] * 24)
        prev = np.zeros(64, dtype=np.int8)
        for k in range(0, 65, 8):
            m = random_mask(64, k, rng_stream(9, "random", 0))
            assert np.all(m >= prev)
            prev = m
        assert semantic_guided_mask(labels, 10, None, rng_stream(3, "semantic", 0)).sum() == 10


class TestSchedule:
    @pytest.mark.parametrize("u,expected", [(0.0, (0.0, 1.0)), (0.15, (0.0, 1.0)), (0.30, (0.5, 0.5)),
                                            (0.45, (1.0, 0.0)), (0.60, (1.0, 0.0)), (0.90, (0.0, 0.0)),
                                            (1.0, (0.0, 0.0))])
    def test_defaults(self, u, expected):
        assert schedule_alphas(u) == expected

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            schedule_alphas(1.01)

    @settings(max_examples=500)
    @given(st.floats(0, 1))
    def test_constraint(self, u):
        a_i, a_s = schedule_alphas(u)
        assert a_i >= 0 and a_s >= 0 and a_i + a_s <= 1

    def test_bad_breakpoints(self):
        with pytest.raises(ValueError):
            ScheduleConfig([(0.0, 0.6, 0.6)])
        with pytest.raises(ValueError):
            ScheduleConfig([(0.5, 0, 1), (0.2, 0, 1)])

    def test_fixed_modes(self):
        assert mode_alphas("random", 0.3) == (0.0, 0.0)
        assert mode_alphas("instance", 0.0) == (1.0, 0.0)
        assert mode_alphas("semantic", 0.9) == (0.0, 1.0)
        with pytest.raises(ValueError):
            mode_alphas("bogus", 0.0)


class TestCompose:
    @staticmethod
    def three(seed, n=24, k=9):
        r = np.random.default_rng(seed)
        return [random_mask(n, k, r) for _ in range(3)]

    @pytest.mark.parametrize("alphas,pick", [((0.0, 0.0), 0), ((1.0, 0.0), 1), ((0.0, 1.0), 2)])
    def test_degenerate(self, alphas, pick):
        m = self.three(0)
        out = compose_progressive_mask(*m, *alphas, 9, rng_stream(0, "blend", 0))
        np.testing.assert_array_equal(out, m[pick])

    def test_thirds_prefer_agreement(self):
        n, k = 12, 5
        for seed in range(200):
            m_r, m_i, m_s = self.three(seed, n, k)
            votes = m_r + m_i + m_s
            out = compose_progressive_mask(m_r, m_i, m_s, 1 / 3, 1 / 3, k, rng_stream(seed, "blend", 0))
            assert out.sum() == k
            if out[votes == 1].any():
                assert np.all(out[votes >= 2] == 1)
            if out[votes == 2].any():
                assert np.all(out[votes == 3] == 1)

    def test_popcount_mismatch(self):
        m = self.three(1)
        m[0] = random_mask(24, 8, np.random.default_rng(0))
        with pytest.raises(ContractError):
            compose_progressive_mask(*m, 0.2, 0.2, 9, rng_stream(0, "blend", 0))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1))
    def test_exact_count(self, seed, a, b):
        a_i, a_s = a / 2, b / 2
        m = self.three(seed)
        out = compose_progressive_mask(*m, a_i, a_s, 9, rng_stream(seed, "blend", 0))
        assert out.sum() == 9


class TestPlan:
    lay = TokenLayout(64, 8)

    def test_full_budget_masks_nothing(self):
        plan = build_mask_plan(generate_sample(SceneConfig(), 0), MaskConfig(visible_tokens=192), self.lay, 0.5, 0, 0)
        assert all(plan.masks[t].sum() == 0 for t in TASKS)

    def test_start_of_curriculum_is_semantic(self):
        s = generate_sample(SceneConfig(), 3)
        cfg = MaskConfig()
        plan = build_mask_plan(s, cfg, self.lay, 0.0, 7, 3)
        labels = patch_semantic_labels(s, 8)
        for g, t in enumerate(TASKS):
            ref = semantic_guided_mask(labels, plan.masked_counts[t], None, rng_stream(7, "semantic", 3, g))
            np.testing.assert_array_equal(plan.masks[t], ref)

    def test_determinism_and_json(self):
        s = generate_sample(SceneConfig(), 1)
        a = build_mask_plan(s, MaskConfig(), self.lay, 0.4, 11, 1, draw=5)
        b = build_mask_plan(s, MaskConfig(), self.lay, 0.4, 11, 1, draw=5)
        assert a.to_json() == b.to_json()
        back = MaskPlan.from_json(a.to_json())
        assert back.to_json() == a.to_json()
        doc = json.loads(a.to_json())
        assert sum(doc["visible_counts"].values()) == 32

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            build_mask_plan(generate_sample(SceneConfig(), 0), MaskConfig(), self.lay, 0.0, 0, 0, mode="x")

    @pytest.mark.parametrize("kwargs", [{"alpha": 0.5}, {"alpha": 1.2}, {"dirichlet_concentration": 0.0},
                                        {"class_weights": {0: -1.0}}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            MaskConfig(**kwargs)

    def test_budget_too_large(self):
        with pytest.raises(ValueError):
            MaskConfig(visible_tokens=193).budget(self.lay)

    def test_exactness_sweep(self):
        samples = [generate_sample(SceneConfig(), i) for i in range(50)]
        rng = np.random.default_rng(0)
        for i in range(200):
            plan = build_mask_plan(samples[i % 50], MaskConfig(), self.lay, float(rng.uniform()), 3, i, draw=i)
            assert plan.ratio.total == 32
            for t in TASKS:
                assert plan.masks[t].sum() == plan.masked_counts[t] == 64 - plan.ratio.visible_counts[t]
