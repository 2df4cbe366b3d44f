"""Backbone plus halting head, configured by ablation variant."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import arh
from . import numerics as nx
from .backbone import BackboneConfig, ReasoningTrace, SequentialRecommender


@dataclass(frozen=True)
class Variant:
    name: str
    use_hps: bool = False
    constant_k: bool = False
    warmup: bool = True
    halting: str | None = None  # None, "ree" or "arh"


VARIANTS = {
    "base": Variant("base"),
    "hps_kconst": Variant("hps_kconst", use_hps=True, constant_k=True),
    "hps_nowarmup": Variant("hps_nowarmup", use_hps=True, warmup=False),
    "hps": Variant("hps", use_hps=True),
    "hps_ree": Variant("hps_ree", use_hps=True, halting="ree"),
    "hps_arh": Variant("hps_arh", use_hps=True, halting="arh"),
}

# Row labels of the ablation table, in order.
VARIANT_LABELS = {
    "base": "Base",
    "hps_kconst": "+HPS (k=const)",
    "hps_nowarmup": "+HPS (w/o warmup)",
    "hps": "+HPS",
    "hps_ree": "+HPS+REE",
    "hps_arh": "+HPS+ARH",
}


def get_variant(name: str) -> Variant:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None


class DTRecModel:
    def __init__(self, config: BackboneConfig, steps: int = 3, variant: str = "hps_arh",
                 halt_hidden: int = 16, halt_bias_init: float = 0.0, seed: int = 0):
        self.variant = get_variant(variant)
        if self.variant.halting and steps < 1:
            raise ValueError("halting variants need at least one reasoning step")
        self.steps = steps
        self.backbone = SequentialRecommender(config, seed=seed)
        self.head = None
        if self.variant.halting == "arh":
            self.head = arh.HaltingHead(halt_hidden, seed=seed, bias_init=halt_bias_init)
        elif self.variant.halting == "ree":
            self.head = arh.REEHead(config.d_model, seed=seed, bias_init=halt_bias_init)
        self.params = dict(self.backbone.params)
        if self.head is not None:
            self.params.update(self.head.params)

    @property
    def config(self) -> BackboneConfig:
        return self.backbone.config

    @property
    def n_items(self) -> int:
        return self.config.n_items

    def train(self, mode: bool = True) -> None:
        self.backbone.training = mode

    def trace(self, items: np.ndarray, steps: int | None = None, stop=None) -> ReasoningTrace:
        return self.backbone.run_reasoning(items, self.steps if steps is None else steps, stop=stop)

    def step_halt_prob(self, trace: ReasoningTrace, t: int) -> nx.Tensor:
        """Halting probability for step t; inputs are detached from the backbone."""
        if self.variant.halting == "ree":
            return self.head(trace.states[t].data)
        ind = arh.compute_indicators(trace, t)
        return self.head(arh.normalize_features(ind, self.n_items, self.config.d_model))

    def halting_probs(self, trace: ReasoningTrace) -> nx.Tensor:
        return nx.stack([self.step_halt_prob(trace, t) for t in range(1, trace.n_steps + 1)], axis=-1)

    def infer(self, items: np.ndarray, policy: arh.HaltPolicy | None = None):
        """Scores (log ŷ at each row's exit step) and exit steps; no gradients kept."""
        self.train(False)
        if self.variant.halting is None or self.steps == 0:
            trace = self.trace(items)
            exits = np.full(len(items), trace.n_steps, dtype=np.int64)
            return trace.log_probs[-1].data, exits, trace
        policy = policy or arh.HaltPolicy(max_steps=self.steps)
        b = len(items)
        exits = np.zeros(b, dtype=np.int64)
        probs = []

        def stop(trace, t):
            p = self.step_halt_prob(trace, t).data
            probs.append(p)
            fire = ~(exits > 0) & ((t >= policy.min_steps) & (p > policy.threshold) | (t >= policy.max_steps))
            exits[fire] = t
            return bool((exits > 0).all())

        trace = self.trace(items, steps=min(self.steps, policy.max_steps), stop=stop)
        exits[exits == 0] = trace.n_steps
        trace.halt_probs = nx.Tensor(np.stack(probs, axis=-1))
        trace.exit_steps = exits
        stacked = np.stack([lp.data for lp in trace.log_probs], axis=0)
        scores = stacked[exits, np.arange(b)]
        return scores, exits, trace

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in state:
                raise KeyError(f"missing parameter {k}")
            if state[k].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.data.shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)
