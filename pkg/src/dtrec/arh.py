"""Adaptive reasoning halting.

Three detached convergence indicators per step feed a small MLP that emits a
halting probability. Training mixes step predictions with stick-breaking
weights; inference stops at the first step whose probability clears δ.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .backbone import ReasoningTrace
from .numerics import Parameter, Tensor

FEATURES = ("entropy", "consistency", "variation")


@dataclass
class HaltIndicators:
    entropy: np.ndarray
    consistency: np.ndarray
    variation: np.ndarray

    def stack(self) -> np.ndarray:
        return np.stack([self.entropy, self.consistency, self.variation], axis=-1)


@dataclass(frozen=True)
class HaltPolicy:
    threshold: float = 0.5
    min_steps: int = 1
    max_steps: int = 3

    def __post_init__(self):
        if not 1 <= self.min_steps <= max(self.max_steps, 1):
            raise ValueError("min_steps must lie in [1, max_steps]")


def compute_indicators(trace: ReasoningTrace, t: int) -> HaltIndicators:
    """Raw (Ent_t, Cons_t, Δ_t) for every row, as constants."""
    if not 1 <= t <= trace.n_steps:
        raise ValueError(f"step {t} outside [1, {trace.n_steps}]")
    prev = nx.Tensor(trace.probs(t - 1))
    cur = nx.Tensor(trace.probs(t))
    ent = nx.entropy(cur).data
    cons = nx.kl_divergence(prev, cur).data
    delta = np.sqrt(((trace.states[t].data - trace.states[t - 1].data) ** 2).sum(axis=-1))
    return HaltIndicators(ent, np.maximum(cons, 0.0), delta)


def normalize_features(ind: HaltIndicators, n_items: int, d_model: int) -> np.ndarray:
    """Scale the indicators to comparable ranges: Ent/ln|I|, log(1+Cons), Δ/√d."""
    return np.stack([
        ind.entropy / math.log(n_items),
        np.log1p(ind.consistency),
        ind.variation / math.sqrt(d_model),
    ], axis=-1).astype(np.float32)


class HaltingHead:
    """3 -> hidden (ReLU) -> 1, sigmoid."""

    def __init__(self, hidden: int = 16, seed: int = 0, bias_init: float = 0.0, prefix: str = "halt."):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA7]))
        self.prefix = prefix
        bound1 = math.sqrt(6.0 / (len(FEATURES) + hidden))
        bound2 = math.sqrt(6.0 / (hidden + 1))
        self.params = {
            prefix + "w1": Parameter(rng.uniform(-bound1, bound1, (len(FEATURES), hidden))),
            prefix + "b1": Parameter(np.zeros(hidden)),
            prefix + "w2": Parameter(rng.uniform(-bound2, bound2, (hidden, 1))),
            prefix + "b2": Parameter(np.full(1, bias_init)),
        }

    def __call__(self, features) -> Tensor:
        P, p = self.params, self.prefix
        h = nx.relu(nx.linear(nx.as_tensor(features), P[p + "w1"], P[p + "b1"]))
        out = nx.sigmoid(nx.linear(h, P[p + "w2"], P[p + "b2"]))
        return nx.reshape(out, out.shape[:-1])


class REEHead:
    """Representation-based early exit: sigmoid(r_t · w + b) on the detached state."""

    def __init__(self, d_model: int, seed: int = 0, bias_init: float = 0.0, prefix: str = "ree."):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xEE]))
        bound = math.sqrt(6.0 / (d_model + 1))
        self.prefix = prefix
        self.params = {
            prefix + "w": Parameter(rng.uniform(-bound, bound, (d_model, 1))),
            prefix + "b": Parameter(np.full(1, bias_init)),
        }

    def __call__(self, state) -> Tensor:
        P, p = self.params, self.prefix
        out = nx.sigmoid(nx.linear(nx.as_tensor(state), P[p + "w"], P[p + "b"]))
        return nx.reshape(out, out.shape[:-1])


def halting_probability(head: HaltingHead, features) -> Tensor:
    return head(features)


def ree_head(head: REEHead, state) -> Tensor:
    return head(state)


def soft_halt_weights(p) -> Tensor:
    """Stick-breaking weights over the last axis, with the final step forced to halt."""
    p = nx.as_tensor(p)
    steps = p.shape[-1]
    forced = np.zeros(p.shape[-1], dtype=p.dtype)
    forced[-1] = 1.0
    keep = np.ones(p.shape[-1], dtype=p.dtype)
    keep[-1] = 0.0
    p = p * keep + forced
    weights = []
    survive = None
    for t in range(steps):
        pt = p[..., t]
        weights.append(pt if survive is None else pt * survive)
        survive = (1.0 - pt) if survive is None else survive * (1.0 - pt)
    return nx.stack(weights, axis=-1)


def aggregate_prediction(step_probs, weights) -> Tensor:
    """Σ_t w_t ŷ^(t); ``step_probs`` is [..., T, n] and ``weights`` is [..., T]."""
    step_probs = nx.as_tensor(step_probs)
    weights = nx.as_tensor(weights)
    mixed = step_probs * nx.reshape(weights, weights.shape + (1,))
    return nx.reduce_sum(mixed, axis=-2)


def aggregated_target_nll(trace: ReasoningTrace, weights: Tensor, targets: np.ndarray) -> Tensor:
    """Batch mean of -log Σ_t w_t ŷ^(t)[target], using steps 1..T.

    Only the target column of each step is gathered, which is all the loss needs.
    """
    rows = np.arange(len(targets))
    picked = [nx.getitem(trace.log_probs[t], (rows, targets)) for t in range(1, trace.n_steps + 1)]
    target_probs = nx.exp(nx.stack(picked, axis=-1))
    mix = nx.reduce_sum(target_probs * weights, axis=-1)
    return nx.reduce_mean(nx.mul(nx.log(mix), -1.0))


def early_exit_decision(policy: HaltPolicy, p_halt: float, t: int) -> bool:
    return (t >= policy.min_steps and p_halt > policy.threshold) or t >= policy.max_steps


def exit_steps(policy: HaltPolicy, halt_probs: np.ndarray) -> np.ndarray:
    """First step (1-based) each row halts at, given per-step probabilities [B, T]."""
    halt_probs = np.atleast_2d(halt_probs)
    b, steps = halt_probs.shape
    out = np.full(b, min(policy.max_steps, steps), dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    for t in range(1, steps + 1):
        fire = (t >= policy.min_steps) & (halt_probs[:, t - 1] > policy.threshold)
        stop = ~done & (fire | (t >= policy.max_steps))
        out[stop] = t
        done |= stop
    return out


def expected_exit_step(weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights)
    return (w * np.arange(1, w.shape[-1] + 1)).sum(axis=-1)
