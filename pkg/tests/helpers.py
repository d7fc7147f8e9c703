"""Shared test utilities: finite differences, rank oracle, tiny fixtures."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from microunlearn.model import LoraAdapter, ModelState, forward_loss


def randomize_adapters(m: ModelState, seed: int = 0, scale: float = 0.3) -> ModelState:
    """Give every adapter factor nonzero values so all gradients are live."""
    rng = np.random.default_rng(seed)
    adapters = {}
    for name, ad in m.adapters.items():
        adapters[name] = LoraAdapter(
            name=ad.name,
            B=rng.normal(0.0, scale, ad.B.shape),
            A=rng.normal(0.0, scale, ad.A.shape),
            rank=ad.rank,
            scaling=ad.scaling,
            train_a=ad.train_a,
        )
    return replace(m, adapters=adapters)


def perturbed_factor(m: ModelState, gid: str, idx, delta: float) -> ModelState:
    """Copy of the model with one adapter-factor coordinate shifted."""
    adapters = {}
    for name, ad in m.adapters.items():
        B, A = ad.B, ad.A
        if gid == f"{name}.B":
            B = B.copy()
            B[idx] += delta
        if gid == f"{name}.A":
            A = A.copy()
            A[idx] += delta
        adapters[name] = LoraAdapter(
            name=ad.name, B=B, A=A, rank=ad.rank, scaling=ad.scaling, train_a=ad.train_a
        )
    return replace(m, adapters=adapters)


def perturbed_embedding(m: ModelState, token: int, dim: int, delta: float) -> ModelState:
    E = m.embedding.copy()
    E[token, dim] += delta
    return replace(m, embedding=E)


def finite_difference_check(m, tokens, mask, h=1e-4):
    """Max relative error of analytic vs central-difference gradients."""
    from microunlearn.model import backward

    loss, cache = forward_loss(m, tokens, mask)
    g = backward(m, cache)

    def loss_of(model):
        return forward_loss(model, tokens, mask)[0]

    max_rel = 0.0
    for gid, arr in m.trainable_arrays().items():
        ana = g.per_group[gid]
        for idx in np.ndindex(arr.shape):
            num = (
                loss_of(perturbed_factor(m, gid, idx, h))
                - loss_of(perturbed_factor(m, gid, idx, -h))
            ) / (2 * h)
            denom = max(abs(num), abs(float(ana[idx])), 1e-8)
            max_rel = max(max_rel, abs(num - float(ana[idx])) / denom)
    for t in range(m.vocab_size):
        ana_row = g.per_token_embedding.get(t, np.zeros(m.d_model))
        for j in range(m.d_model):
            num = (
                loss_of(perturbed_embedding(m, t, j, h))
                - loss_of(perturbed_embedding(m, t, j, -h))
            ) / (2 * h)
            denom = max(abs(num), abs(float(ana_row[j])), 1e-8)
            max_rel = max(max_rel, abs(num - float(ana_row[j])) / denom)
    return max_rel


def pairwise_auc(member_scores, nonmember_scores) -> float:
    """O(n^2) AUC oracle: wins plus half-ties over all pairs."""
    total = 0.0
    for a in member_scores:
        for b in nonmember_scores:
            if a > b:
                total += 1.0
            elif a == b:
                total += 0.5
    return total / (len(member_scores) * len(nonmember_scores))


def row_reduction_rank(mat: np.ndarray, tol: float = 1e-9) -> int:
    """Rank via Gaussian elimination, independent of numpy's SVD rank."""
    a = np.array(mat, dtype=float)
    rows, cols = a.shape
    rank = 0
    for col in range(cols):
        pivot = None
        for r in range(rank, rows):
            if abs(a[r, col]) > tol:
                pivot = r
                break
        if pivot is None:
            continue
        a[[rank, pivot]] = a[[pivot, rank]]
        a[rank] = a[rank] / a[rank, col]
        for r in range(rows):
            if r != rank and abs(a[r, col]) > tol:
                a[r] -= a[r, col] * a[rank]
        rank += 1
        if rank == rows:
            break
    return rank


def binomial_interval(n: int, p: float, alpha: float = 1e-6):
    """Exact central binomial interval by pmf summation (stdlib only)."""
    import math

    def log_pmf(k):
        return (
            math.lgamma(n + 1)
            - math.lgamma(k + 1)
            - math.lgamma(n - k + 1)
            + k * math.log(p)
            + (n - k) * math.log(1 - p)
        )

    pmf = [math.exp(log_pmf(k)) for k in range(n + 1)]
    lo, acc = 0, 0.0
    while lo <= n and acc + pmf[lo] < alpha / 2:
        acc += pmf[lo]
        lo += 1
    hi, acc = n, 0.0
    while hi >= 0 and acc + pmf[hi] < alpha / 2:
        acc += pmf[hi]
        hi -= 1
    return lo, hi


def example_with(question, answer, subject="surgery", eid=0):
    from microunlearn.corpus import Example

    return Example(
        id=eid,
        subject=subject,
        question_tokens=tuple(question),
        answer_tokens=tuple(answer),
    )
