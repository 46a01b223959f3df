import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lowbit import specdec as sd

TARGET3 = sd.ToyLm(np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.25, 0.25, 0.5]]))
DRAFT3 = sd.ToyLm(np.array([[0.3, 0.4, 0.3], [0.5, 0.25, 0.25], [0.1, 0.6, 0.3]]))


@pytest.mark.parametrize("draft,target,n", [("abcdefg", "abcdefg", 7), ("xbc", "abc", 0), ("abc", "abd", 2),
                                            ("", "", 0)])
def test_verify_greedy(draft, target, n):
    assert sd.verify_greedy(list(draft), list(target)) == n


def test_verify_greedy_length_mismatch():
    with pytest.raises(ValueError):
        sd.verify_greedy([1, 2], [1])


@pytest.mark.parametrize("accepted,D,expected", [([7] * 5, 7, 8.0), ([0] * 4, 7, 1.0), ([3, 3, 1], 3, 10 / 3)])
def test_acceptance_length_examples(accepted, D, expected):
    ev = sd.AcceptanceEvents.uniform(D, accepted)
    assert sd.acceptance_length(ev) == pytest.approx(expected, rel=1e-15)
    assert sd.acceptance_length(ev, include_verifier_token=False) == pytest.approx(expected - 1, abs=1e-15)


def test_acceptance_by_index_examples():
    assert sd.acceptance_by_index(sd.AcceptanceEvents.uniform(4, [4, 4])).tolist() == [1.0] * 4
    assert sd.acceptance_by_index(sd.AcceptanceEvents.uniform(3, [3, 1])).tolist() == [1.0, 0.5, 0.5]


def test_event_validation():
    with pytest.raises(ValueError):
        sd.acceptance_length(sd.AcceptanceEvents.uniform(3, []))
    with pytest.raises(ValueError, match="exceeds"):
        sd.AcceptanceEvents.uniform(3, [4])
    with pytest.raises(ValueError, match="mix"):
        sd.acceptance_by_index(sd.AcceptanceEvents([2, 3], [1, 1]))


@given(st.integers(0, 12), st.lists(st.integers(0, 1000), min_size=1, max_size=200))
def test_acceptance_identity(D, raw):
    ev = sd.AcceptanceEvents.uniform(D, [r % (D + 1) for r in raw])
    rates = sd.acceptance_by_index(ev)
    assert np.all(np.diff(rates) <= 0)
    assert sd.acceptance_length(ev, exact=True) == 1 + sum(sd.acceptance_by_index(ev, exact=True))
    assert sd.acceptance_length(ev) == float(sd.acceptance_length(ev, exact=True))
    assert 1 <= sd.acceptance_length(ev) <= D + 1


def test_drafter_equal_to_target_accepts_everything():
    rng = np.random.default_rng(0)
    lm = sd.ToyLm.random(rng, 5, window=2)
    gen = sd.simulate_generation(lm, lm, 7, 200, "greedy", rng)
    assert sd.acceptance_length(gen.events) == 8.0
    assert len(gen.tokens) == 200 * 8


def test_uniform_drafter_against_deterministic_target():
    rng = np.random.default_rng(1)
    target = sd.ToyLm.deterministic(rng, 4)
    gen = sd.simulate_generation(target, sd.ToyLm.uniform(4, window=1), 1, 10_000, "greedy", rng)
    assert abs(sd.acceptance_by_index(gen.events)[0] - 0.25) <= 0.02


def test_greedy_tokens_follow_target_argmax():
    rng = np.random.default_rng(2)
    target = sd.ToyLm.random(rng, 4, window=1)
    drafter = sd.ToyLm.random(rng, 4, window=1)
    gen = sd.simulate_generation(target, drafter, 3, 50, "greedy", rng)
    hist = []
    for tok in gen.tokens:
        assert tok == target.argmax(hist)
        hist.append(tok)


def test_drafter_noise_weakly_lowers_rates():
    rng = np.random.default_rng(3)
    target = sd.ToyLm.random(rng, 4, window=1)
    prev = None
    for lam in (0.0, 0.3, 0.6, 0.9, 1.0):
        gen = sd.simulate_generation(target, target.mix_uniform(lam), 4, 3000, "greedy", np.random.default_rng(7))
        rates = sd.acceptance_by_index(gen.events)
        if prev is not None:
            assert np.all(rates <= prev + 1e-12)
        prev = rates
    assert prev[0] < 0.5


def test_lossless_marginal_matches_target():
    n = 20_000
    counts = np.zeros(3)
    for i in range(n):
        gen = sd.simulate_generation(TARGET3, DRAFT3, 2, 1, "lossless", np.random.default_rng([5, i]))
        counts[gen.tokens[0]] += 1
    exact = sd.exact_prefix_distribution(TARGET3, 1)
    assert 0.5 * np.abs(counts / n - exact).sum() < 0.01


def test_exact_prefix_distribution_sums_to_one():
    p = sd.exact_prefix_distribution(TARGET3, 3)
    assert p.shape == (3, 3, 3)
    assert p.sum() == pytest.approx(1.0, abs=1e-14)
    assert p[0, 0, 0] == pytest.approx(0.6**3)


def test_toylm_contract():
    with pytest.raises(ValueError, match="sums"):
        sd.ToyLm(np.array([[0.5, 0.4]]), window=0)
    with pytest.raises(ValueError):
        sd.ToyLm(np.ones((3, 2)) / 2, window=1)
    with pytest.raises(ValueError):
        sd.ToyLm(np.array([[1.5, -0.5]]), window=0)
    lm = sd.ToyLm.random(np.random.default_rng(0), 3, window=2)
    assert lm.row([2, 1]) == 7
    assert lm.row([1]) == 1
    assert lm.row([0, 0, 2, 1]) == 7
    assert sd.ToyLm.from_json(lm.to_json()).probs.tolist() == lm.probs.tolist()
    assert json.loads(lm.to_json())["vocab"] == 3


def test_sample_inverts_cdf():
    lm = sd.ToyLm(np.array([[0.2, 0.3, 0.5]]), window=0)
    assert [lm.sample([], u) for u in (0.0, 0.19, 0.2, 0.49, 0.5, 0.999)] == [0, 0, 1, 1, 2, 2]


def test_generation_is_reproducible():
    a = sd.simulate_generation(TARGET3, DRAFT3, 3, 100, "lossless", np.random.default_rng(9))
    b = sd.simulate_generation(TARGET3, DRAFT3, 3, 100, "lossless", np.random.default_rng(9))
    assert a.tokens == b.tokens
    assert a.events.to_dict() == b.events.to_dict()
    assert sum(a.emitted_per_step) == len(a.tokens)


def test_generation_errors():
    with pytest.raises(ValueError, match="vocab"):
        sd.simulate_generation(TARGET3, sd.ToyLm.uniform(4), 1, 1)
    with pytest.raises(ValueError, match="mode"):
        sd.simulate_generation(TARGET3, DRAFT3, 1, 1, "beam")


def test_rates_csv():
    assert sd.rates_csv([1.0, 0.5]).splitlines() == ["index,rate", "0,1.0", "1,0.5"]
