"""Shared builders for synthetic distributions, chains, and frames."""

from __future__ import annotations

import numpy as np

from editstop.alignment import ActivationFrame, AlignmentDistribution, VisibleSet
from editstop.linalg import ProbVector, cosine_similarity, softmax


def make_dist(probs, support=None, step=0, temperature=1.0) -> AlignmentDistribution:
    """Alignment distribution with given probabilities, bypassing scoring."""
    probs = np.asarray(probs, dtype=np.float64)
    sup = tuple(support) if support is not None else tuple(range(probs.size))
    return AlignmentDistribution(
        dist=ProbVector(probs, sup),
        step=step,
        temperature_used=temperature,
        scores={s: 0.0 for s in sup},
    )


def make_chain(prob_rows, support=None, start_step=1) -> list[AlignmentDistribution]:
    """One distribution per row, with consecutive step numbers."""
    return [
        make_dist(row, support=support, step=start_step + i)
        for i, row in enumerate(prob_rows)
    ]


def constant_frames(vectors: dict[int, np.ndarray], n_steps: int, start_step=1):
    """Identical activation frames repeated for n_steps."""
    vis = VisibleSet(tuple(sorted(vectors)))
    return [
        ActivationFrame(start_step + i, dict(vectors), vis) for i in range(n_steps)
    ]


def geometric_chain(pi, d, alpha, n_steps, support=None, start_step=1):
    """Chain p_t = pi + alpha^t * d converging to pi with exact TV ratio alpha.

    ``d`` must sum to zero and keep every entry of the early distributions
    inside [0, 1].
    """
    pi = np.asarray(pi, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    assert abs(d.sum()) < 1e-12
    rows = [pi + (alpha**t) * d for t in range(n_steps)]
    return make_chain(rows, support=support, start_step=start_step)


def random_simplex(rng, n, floor=1e-4):
    """Random interior point of the n-simplex."""
    w = rng.random(n) + floor
    return w / w.sum()


class CoupledLinearModel:
    """Token activations contracting toward fixed points with weak
    cross-token coupling, plus a softmax-over-cosines readout.

    The linear dynamics make the true contraction and coupling rates
    known up to small nonlinear-readout corrections, which is what the
    probe and safety machinery are tested against.
    """

    def __init__(self, rng, n_tokens=6, dim=4, alpha=0.5, gamma=0.05):
        self.n_tokens = n_tokens
        self.dim = dim
        self.alpha = alpha
        self.gamma = gamma
        self.targets = rng.normal(size=(n_tokens, dim)) * 2.0
        self.map_u = rng.random(dim) + 0.5
        coupling = rng.normal(size=(n_tokens, n_tokens))
        np.fill_diagonal(coupling, 0.0)
        row_norms = np.abs(coupling).sum(axis=1, keepdims=True)
        self.coupling = coupling / np.maximum(row_norms, 1e-12)

    @property
    def activation_dim(self):
        return self.dim

    def init_state(self, rng, spread=1.5):
        return self.targets + rng.normal(size=(self.n_tokens, self.dim)) * spread

    def step(self, state):
        drift = state - self.targets
        return self.targets + self.alpha * drift + self.gamma * (self.coupling @ drift)

    def distribution(self, state) -> ProbVector:
        scores = np.array(
            [cosine_similarity(state[s], self.map_u) for s in range(self.n_tokens)]
        )
        return softmax(scores, support=tuple(range(self.n_tokens)))

    def counterfactual_distribution(self, state, token, delta=None) -> ProbVector:
        perturbed = np.array(state, dtype=np.float64, copy=True)
        if delta is not None:
            perturbed[token] = perturbed[token] + delta
        return self.distribution(self.step(perturbed))

    def run(self, state, steps, pinned=None):
        """Advance ``steps`` steps; ``pinned`` maps token -> fixed vector."""
        state = np.array(state, dtype=np.float64, copy=True)
        for _ in range(steps):
            state = self.step(state)
            if pinned:
                for s, vec in pinned.items():
                    state[s] = vec
        return state


def subdelta_walks(rng, n_walks, k, delta, steps):
    """Random walks on the k-simplex whose per-step KL(new || old) stays
    strictly below ``delta``.

    Each transition applies an exponential tilt along a random direction,
    with the tilt size bisected so the realized KL lands just under a
    random fraction of the threshold. Returns (n_walks, steps + 1, k).
    """
    w = rng.random((n_walks, k)) + 1e-2
    p = w / w.sum(axis=1, keepdims=True)
    rows = [p]
    for _ in range(steps):
        z = rng.normal(size=(n_walks, k))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        target = delta * rng.uniform(0.05, 0.98, size=n_walks)
        logp = np.log(p)

        def kl_at(t):
            a = logp + t[:, None] * z
            a -= a.max(axis=1, keepdims=True)
            q = np.exp(a)
            q /= q.sum(axis=1, keepdims=True)
            kl = np.sum(q * (np.log(np.maximum(q, 1e-300)) - logp), axis=1)
            return q, kl

        lo = np.zeros(n_walks)
        hi = np.full(n_walks, 1.0)
        for _ in range(40):
            _, kl = kl_at(hi)
            low = kl < target
            if not low.any() or hi.max() > 1e4:
                break
            hi[low] *= 2.0
        for _ in range(50):
            mid = 0.5 * (lo + hi)
            _, kl = kl_at(mid)
            above = kl > target
            hi[above] = mid[above]
            lo[~above] = mid[~above]
        q, kl = kl_at(lo)
        assert np.all(kl < delta)
        # Same floor the distribution type applies; keeps logs finite on
        # the next transition without renormalizing.
        q = np.maximum(q, 1e-12)
        rows.append(q)
        p = q
    return np.stack(rows, axis=1)
