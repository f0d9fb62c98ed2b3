import logging
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from protolang.proto import (Temperature, classify, compute_prototypes, cosine_matrix, episodic_loss,
                             episodic_loss_from_logits, logits, predict)

TRIALS = 100


def test_prototype_of_one():
    s = torch.randn(3, 1, 4)
    assert torch.equal(compute_prototypes(s).prototypes, s[:, 0])


def test_prototype_mean_example():
    s = torch.tensor([[[1.0, 0.0], [-1.0, 0.0], [0.0, 3.0]]])
    assert torch.allclose(compute_prototypes(s).prototypes, torch.tensor([[0.0, 1.0]]))


def test_prototype_empty_slot():
    with pytest.raises(ValueError):
        compute_prototypes(torch.zeros(3, 0, 4))


def test_prototype_oracle_random():
    rng = np.random.default_rng(0)
    for _ in range(TRIALS):
        n, k, d = 5, int(rng.integers(1, 6)), 16
        s = rng.normal(size=(n, k, d))
        expected = np.zeros((n, d))
        for c in range(n):
            acc = np.zeros(d)
            for j in range(k):
                acc += s[c, j]
            expected[c] = acc / k
        got = compute_prototypes(torch.as_tensor(s)).prototypes.numpy()
        assert np.allclose(got, expected, atol=1e-6)


def test_classify_rows_are_distributions():
    torch.manual_seed(0)
    p = classify(torch.randn(9, 8), torch.randn(5, 8), torch.tensor(3.0))
    assert torch.allclose(p.sum(dim=1), torch.ones(9), atol=1e-6)


def test_equal_similarity_gives_half():
    q = torch.tensor([[1.0, 1.0]])
    protos = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    assert torch.allclose(classify(q, protos, 1.0), torch.tensor([[0.5, 0.5]]))


def test_softmax_example():
    # cosine similarities (1, 0, -1) from axis-aligned prototypes
    q = torch.tensor([[1.0, 0.0]])
    protos = torch.tensor([[2.0, 0.0], [0.0, 5.0], [-3.0, 0.0]])
    p = classify(q, protos, 1.0)[0]
    assert torch.allclose(p, torch.tensor([0.66524, 0.24473, 0.09003]), atol=1e-4)


def test_large_tau_saturates():
    q = torch.tensor([[1.0, 0.0]])
    protos = torch.tensor([[1.0, 0.0], [math.cos(0.46), math.sin(0.46)]])  # cosine margin ~0.104
    assert 1 - protos[1, 0] >= 0.1
    assert classify(q, protos, 100.0)[0, 0] > 0.999


def _oracle_softmax_cos(q, p, tau):
    out = np.zeros((len(q), len(p)))
    for i in range(len(q)):
        sims = []
        for j in range(len(p)):
            dot = sum(q[i, k] * p[j, k] for k in range(q.shape[1]))
            sims.append(tau * dot / (math.sqrt((q[i] ** 2).sum()) * math.sqrt((p[j] ** 2).sum())))
        m = max(sims)
        e = [math.exp(s - m) for s in sims]
        out[i] = [x / sum(e) for x in e]
    return out


def test_classify_oracle_random():
    rng = np.random.default_rng(1)
    for _ in range(TRIALS):
        q, p = rng.normal(size=(4, 6)), rng.normal(size=(5, 6))
        tau = float(rng.uniform(0.1, 20))
        got = classify(torch.as_tensor(q), torch.as_tensor(p), tau).numpy()
        assert np.allclose(got, _oracle_softmax_cos(q, p, tau), atol=1e-6)


def test_zero_vector_guard_and_diagnostic(caplog):
    with caplog.at_level(logging.WARNING):
        sims = cosine_matrix(torch.zeros(1, 3), torch.ones(2, 3))
    assert torch.equal(sims, torch.zeros(1, 2))
    assert "zero-norm" in caplog.text


def test_uniform_loss_is_ln5():
    probs = torch.full((7, 5), 0.2)
    assert episodic_loss(probs, torch.randint(0, 5, (7,))).item() == pytest.approx(1.60944, abs=1e-5)


def test_perfect_predictions_loss():
    probs = torch.eye(5, dtype=torch.float64).clamp(1e-7 / 4, 1 - 1e-7)
    assert episodic_loss(probs, torch.arange(5)).item() <= 1.1e-7


def test_episodic_loss_oracle():
    rng = np.random.default_rng(2)
    for _ in range(TRIALS):
        raw = rng.random((8, 5)) + 1e-3
        probs = raw / raw.sum(axis=1, keepdims=True)
        labels = rng.integers(0, 5, 8)
        expected = sum(-math.log(probs[i, labels[i]]) for i in range(8)) / 8
        got = episodic_loss(torch.as_tensor(probs), torch.as_tensor(labels)).item()
        assert got == pytest.approx(expected, abs=1e-9)


def test_loss_from_logits_matches_probabilities():
    torch.manual_seed(3)
    lg = torch.randn(10, 5, dtype=torch.float64)
    y = torch.randint(0, 5, (10,))
    assert torch.allclose(episodic_loss_from_logits(lg, y), episodic_loss(lg.softmax(-1), y))


def test_support_permutation_invariance():
    torch.manual_seed(4)
    s = torch.randn(4, 5, 8)
    perm = torch.randperm(5)
    assert torch.allclose(compute_prototypes(s).prototypes, compute_prototypes(s[:, perm]).prototypes, atol=1e-6)


def test_class_permutation_permutes_columns():
    torch.manual_seed(5)
    q, p = torch.randn(6, 8), torch.randn(4, 8)
    perm = torch.randperm(4)
    assert torch.allclose(classify(q, p, 2.0)[:, perm], classify(q, p[perm], 2.0), atol=1e-6)


@given(st.floats(min_value=1e-3, max_value=1e3), st.integers(0, 2**31 - 1))
@settings(max_examples=100, deadline=None)
def test_cosine_scale_invariance(scale, seed):
    g = torch.Generator().manual_seed(seed)
    q, p = torch.randn(5, 7, generator=g, dtype=torch.float64), torch.randn(3, 7, generator=g, dtype=torch.float64)
    assert torch.allclose(classify(q * scale, p * scale, 4.0), classify(q, p, 4.0), atol=1e-6)


@given(st.floats(min_value=1e-2, max_value=100.0), st.integers(0, 2**31 - 1))
@settings(max_examples=100, deadline=None)
def test_argmax_independent_of_tau(tau, seed):
    g = torch.Generator().manual_seed(seed)
    q, p = torch.randn(6, 5, generator=g, dtype=torch.float64), torch.randn(4, 5, generator=g, dtype=torch.float64)
    assert torch.equal(predict(classify(q, p, tau)), cosine_matrix(q, p).argmax(dim=1))


def test_tie_break_lowest_index():
    assert predict(torch.tensor([[0.4, 0.4, 0.2]])).item() == 0


def test_temperature_positive():
    t = Temperature(1.0)
    with torch.no_grad():
        t.log_tau.fill_(-50.0)
    assert t.tau.item() > 0
    with pytest.raises(ValueError):
        Temperature(0.0)


def test_episodic_gradient_finite_difference():
    """3-way 2-shot toy episode; gradient w.r.t. the query embeddings."""
    torch.manual_seed(6)
    support = torch.randn(3, 2, 4, dtype=torch.float64)
    query = torch.randn(6, 4, dtype=torch.float64, requires_grad=True)
    labels = torch.tensor([0, 0, 1, 1, 2, 2])
    protos = compute_prototypes(support)

    def f(qr):
        return episodic_loss(classify(qr, protos, 3.0), labels)

    f(query).backward()
    analytic = query.grad.clone()
    numeric = torch.zeros_like(analytic)
    h = 1e-6
    with torch.no_grad():
        for idx in np.ndindex(*query.shape):
            qp, qm = query.clone(), query.clone()
            qp[idx] += h
            qm[idx] -= h
            numeric[idx] = (f(qp) - f(qm)) / (2 * h)
    rel = (analytic - numeric).norm() / (analytic.norm() + numeric.norm())
    assert rel <= 1e-4
    assert torch.autograd.gradcheck(lambda qr: f(qr), (query.detach().clone().requires_grad_(),))


def test_logits_scale_with_tau():
    q, p = torch.randn(2, 3), torch.randn(4, 3)
    assert torch.allclose(logits(q, p, 2.0), 2.0 * logits(q, p, 1.0))
