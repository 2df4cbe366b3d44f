"""Sequence encoders and the latent reasoning loop.

Reasoning appends the previous state as an extra token, tagged with a learned
per-step embedding, and reads the encoder output at that position. The
attention encoder reuses cached keys/values so a step costs one token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data import PAD, Batch
from .numerics import Parameter, Tensor

MAX_REASONING_STEPS = 5


@dataclass
class BackboneConfig:
    n_items: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_len: int = 50
    dropout: float = 0.2
    kind: str = "attention"
    init_std: float = 0.02

    def __post_init__(self):
        if self.kind not in ("attention", "gru"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


@dataclass
class ReasoningTrace:
    """States r_0..r_T with their item distributions (kept in log space)."""

    states: list[Tensor]
    log_probs: list[Tensor]
    lengths: np.ndarray
    indicators: np.ndarray | None = None  # [B, T, 3] raw (Ent, Cons, Delta)
    halt_probs: Tensor | None = None  # [B, T]
    exit_steps: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1

    def probs(self, t: int) -> np.ndarray:
        return np.exp(self.log_probs[t].data)


class _DropoutKeys:
    """Counter-based dropout seeds: (seed, epoch, batch, op id)."""

    def __init__(self, seed: int, epoch: int, batch: int):
        self.base = (seed, epoch, batch)
        self.counter = 0

    def next(self):
        self.counter += 1
        return (*self.base, self.counter)


class SequentialRecommender:
    def __init__(self, config: BackboneConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0]))
        d = config.d_model
        std = config.init_std
        self._add("item_emb", rng.normal(0, std, (config.n_items + 1, d)))
        self.params["item_emb"].data[PAD] = 0.0
        self._add("reason_emb", rng.normal(0, std, (MAX_REASONING_STEPS, d)))
        if config.kind == "attention":
            self._add("pos_emb", rng.normal(0, std, (config.max_len, d)))
            for layer in range(config.n_layers):
                p = f"layer{layer}."
                for name in ("ln1", "ln2"):
                    self._add(p + name + ".g", np.ones(d))
                    self._add(p + name + ".b", np.zeros(d))
                for name in ("wq", "wk", "wv", "wo", "w1", "w2"):
                    self._add(p + name, _xavier(rng, d, d))
                    self._add(p + name.replace("w", "b", 1), np.zeros(d))
        else:
            self._add("gru.wx", _xavier(rng, d, 3 * d))
            self._add("gru.bx", np.zeros(3 * d))
            self._add("gru.wh_zr", _xavier(rng, d, 2 * d))
            self._add("gru.wh_n", _xavier(rng, d, d))
            self._add("gru.bh_n", np.zeros(d))
        self._add("ln_f.g", np.ones(d))
        self._add("ln_f.b", np.zeros(d))
        self.training = False
        self._keys: _DropoutKeys | None = None

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Parameter(value)

    def set_dropout_context(self, seed: int, epoch: int, batch: int) -> None:
        self._keys = _DropoutKeys(seed, epoch, batch)

    def _dropout(self, x: Tensor) -> Tensor:
        if not self.training or self._keys is None:
            return x
        return nx.dropout(x, self.config.dropout, self._keys.next(), training=True)

    # ------------------------------------------------------------------ encode

    def encode(self, items: np.ndarray) -> tuple[Tensor, dict]:
        """Hidden states [B, L, d] after the final layer norm, plus a reasoning cache."""
        if self.config.kind == "attention":
            return self._encode_attention(items)
        return self._encode_gru(items)

    def _heads(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        h = self.config.n_heads
        return nx.transpose(nx.reshape(x, (b, n, h, -1)), (0, 2, 1, 3))

    def _merge(self, x: Tensor) -> Tensor:
        b, _, n, _ = x.shape
        return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (b, n, self.config.d_model))

    def _encode_attention(self, items: np.ndarray):
        P = self.params
        b, n = items.shape
        valid = items != PAD
        # positions count back from the most recent item, so padding width is irrelevant
        pos = np.clip(np.arange(n)[::-1], 0, self.config.max_len - 1)
        x = nx.embedding_lookup(P["item_emb"], items) + nx.embedding_lookup(P["pos_emb"], pos)
        x = self._dropout(x)
        x = x * valid[..., None].astype(x.dtype)
        causal = np.tril(np.ones((n, n), dtype=bool))
        allowed = causal[None] & valid[:, None, :]
        allowed |= np.eye(n, dtype=bool)[None]  # padding rows attend to themselves only
        allowed = allowed[:, None]
        cache = {"keys": [], "values": [], "valid": valid}
        for layer in range(self.config.n_layers):
            p = f"layer{layer}."
            h = nx.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
            q = self._heads(nx.linear(h, P[p + "wq"], P[p + "bq"]))
            k = self._heads(nx.linear(h, P[p + "wk"], P[p + "bk"]))
            v = self._heads(nx.linear(h, P[p + "wv"], P[p + "bv"]))
            cache["keys"].append(k)
            cache["values"].append(v)
            a = self._merge(nx.causal_masked_attention(q, k, v, allowed))
            x = x + self._dropout(nx.linear(a, P[p + "wo"], P[p + "bo"]))
            x = x + self._ffn(x, p)
        return nx.layer_norm(x, P["ln_f.g"], P["ln_f.b"]), cache

    def _ffn(self, x: Tensor, p: str) -> Tensor:
        P = self.params
        h = nx.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
        h = nx.gelu(nx.linear(h, P[p + "w1"], P[p + "b1"]))
        return self._dropout(nx.linear(h, P[p + "w2"], P[p + "b2"]))

    def _gru_cell(self, xproj: Tensor, h: Tensor) -> Tensor:
        P = self.params
        d = self.config.d_model
        hzr = nx.matmul(h, P["gru.wh_zr"])
        zr = nx.sigmoid(xproj[:, : 2 * d] + hzr)
        z, r = zr[:, :d], zr[:, d:]
        n = nx.tanh(xproj[:, 2 * d:] + nx.linear(r * h, P["gru.wh_n"], P["gru.bh_n"]))
        return n + z * (h - n)

    def _encode_gru(self, items: np.ndarray):
        P = self.params
        b, n = items.shape
        valid = items != PAD
        dtype = P["item_emb"].dtype
        h = Tensor(np.zeros((b, self.config.d_model), dtype=dtype))
        outputs = []
        for pos in range(n):
            m = valid[:, pos : pos + 1].astype(dtype)
            if not m.any():
                outputs.append(h)
                continue
            x = self._dropout(nx.embedding_lookup(P["item_emb"], items[:, pos]))
            h_new = self._gru_cell(nx.linear(x, P["gru.wx"], P["gru.bx"]), h)
            h = h_new * m + h * (1.0 - m) if not m.all() else h_new
            outputs.append(h)
        hidden = nx.stack(outputs, axis=1)
        return nx.layer_norm(hidden, P["ln_f.g"], P["ln_f.b"]), {"h": h, "valid": valid}

    # ------------------------------------------------------------------ reasoning

    def reason_step(self, prev_state: Tensor, cache: dict, t: int) -> Tensor:
        """r_t from r_{t-1}: encode it as one appended token at reasoning step t."""
        if not 1 <= t <= MAX_REASONING_STEPS:
            raise ValueError(f"reasoning step {t} outside [1, {MAX_REASONING_STEPS}]")
        P = self.params
        x = prev_state + P["reason_emb"][t - 1]
        if self.config.kind == "gru":
            xproj = nx.linear(x, P["gru.wx"], P["gru.bx"])
            cache["h"] = self._gru_cell(xproj, cache["h"])
            return nx.layer_norm(cache["h"], P["ln_f.g"], P["ln_f.b"])
        b = x.shape[0]
        x = nx.reshape(x, (b, 1, -1))
        allowed = np.concatenate([cache["valid"], np.ones((b, t), dtype=bool)], axis=1)[:, None, None, :]
        for layer in range(self.config.n_layers):
            p = f"layer{layer}."
            h = nx.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
            q = self._heads(nx.linear(h, P[p + "wq"], P[p + "bq"]))
            k = self._heads(nx.linear(h, P[p + "wk"], P[p + "bk"]))
            v = self._heads(nx.linear(h, P[p + "wv"], P[p + "bv"]))
            cache["keys"][layer] = nx.concatenate([cache["keys"][layer], k], axis=2)
            cache["values"][layer] = nx.concatenate([cache["values"][layer], v], axis=2)
            a = self._merge(nx.causal_masked_attention(q, cache["keys"][layer], cache["values"][layer], allowed))
            x = x + self._dropout(nx.linear(a, P[p + "wo"], P[p + "bo"]))
            x = x + self._ffn(x, p)
        out = nx.layer_norm(x, P["ln_f.g"], P["ln_f.b"])
        return nx.reshape(out, (b, -1))

    def score(self, r: Tensor) -> Tensor:
        """Log ŷ = log softmax(r · Eᵀ) with the padding item masked out."""
        logits = nx.matmul(r, nx.transpose(self.params["item_emb"]))
        mask = np.zeros(logits.shape[-1], dtype=logits.dtype)
        mask[PAD] = nx.MASK_VALUE
        return nx.log_softmax(logits + mask)

    def predict_distribution(self, r: Tensor | np.ndarray) -> np.ndarray:
        return np.exp(self.score(nx.as_tensor(r)).data)

    def run_reasoning(self, batch: Batch | np.ndarray, steps: int, stop=None) -> ReasoningTrace:
        """Trace r_0..r_steps.

        ``stop(trace, t)`` is called after step t is appended (t >= 1) and may
        return True to end the loop early for the whole batch.
        """
        items = batch.items if isinstance(batch, Batch) else np.asarray(batch)
        if not 0 <= steps <= MAX_REASONING_STEPS:
            raise ValueError(f"steps must lie in [0, {MAX_REASONING_STEPS}]")
        hidden, cache = self.encode(items)
        r = hidden[:, -1]
        trace = ReasoningTrace([r], [self.score(r)], _lengths(items))
        for t in range(1, steps + 1):
            r = self.reason_step(r, cache, t)
            trace.states.append(r)
            trace.log_probs.append(self.score(r))
            if stop is not None and stop(trace, t):
                break
        return trace

    # ------------------------------------------------------------------ utilities

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in self.params.items():
            if state[k].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.data.shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)

    def item_embeddings(self) -> np.ndarray:
        """Detached copy of E without the padding row."""
        return self.params["item_emb"].data[1:].copy()


def _lengths(items: np.ndarray) -> np.ndarray:
    return (items != PAD).sum(axis=1)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out))
