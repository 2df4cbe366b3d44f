"""Central finite-difference checks on float64 shadows of the autograd ops."""

from __future__ import annotations

import numpy as np

from dtrec import numerics as nx

RTOL = 1e-4
EPS = 1e-6
# gradients smaller than this are compared absolutely: central differences of
# an O(10) loss carry ~1e-9 of cancellation noise, and some true gradients are 0
SCALE_FLOOR = 1e-4


def numeric_grad(fn, arrays: list[np.ndarray], i: int, coords=None) -> np.ndarray:
    """d fn / d arrays[i] by central differences; ``coords`` limits the probed entries."""
    x = arrays[i]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size) if coords is None else coords:
        old = flat[j]
        flat[j] = old + EPS
        up = fn(arrays)
        flat[j] = old - EPS
        down = fn(arrays)
        flat[j] = old
        gflat[j] = (up - down) / (2 * EPS)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, coords=None) -> float:
    a = analytic.reshape(-1)
    n = numeric.reshape(-1)
    if coords is not None:
        a, n = a[coords], n[coords]
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), SCALE_FLOOR)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def check_op(build, inputs: list[np.ndarray], seed: int, grad_mask=None, max_coords: int | None = None) -> float:
    """Worst relative error over inputs for a random projection of ``build``'s output.

    ``build`` maps float64 tensors to a tensor; the scalar probed is
    sum(out * R) with a seeded random R so the full Jacobian is exercised.
    """
    rng = np.random.default_rng(seed)
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    grad_mask = grad_mask or [True] * len(inputs)
    tensors = [nx.Tensor(a.copy(), requires_grad=m) for a, m in zip(inputs, grad_mask)]
    out = build(*tensors)
    weights = rng.normal(size=out.shape)
    out.backward(weights.astype(np.float64))

    def scalar(arrs):
        return float((build(*[nx.Tensor(a) for a in arrs]).data * weights).sum())

    worst = 0.0
    for i, (t, m) in enumerate(zip(tensors, grad_mask)):
        if not m:
            continue
        coords = None
        if max_coords is not None and inputs[i].size > max_coords:
            coords = rng.choice(inputs[i].size, max_coords, replace=False)
        num = numeric_grad(scalar, [a.copy() for a in inputs], i, coords)
        ana = t.grad if t.grad is not None else np.zeros_like(inputs[i])
        worst = max(worst, relative_error(ana, num, coords))
    return worst


def away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def op_cases(rng) -> dict:
    """name -> (build, inputs, grad_mask) covering every differentiable op."""
    mask = np.tril(np.ones((4, 4), dtype=bool))
    ids = rng.integers(0, 6, size=(3, 4))
    target = rng.integers(0, 5, size=3)
    soft = rng.random((3, 5))
    soft /= soft.sum(axis=1, keepdims=True)
    drop_key = (int(rng.integers(1 << 30)), 1, 2)
    return {
        "add": (nx.add, [rng.normal(size=(3, 4)), rng.normal(size=(4,))], None),
        "sub": (nx.sub, [rng.normal(size=(3, 1)), rng.normal(size=(3, 4))], None),
        "mul": (nx.mul, [rng.normal(size=(2, 3, 4)), rng.normal(size=(3, 1))], None),
        "div_scalar": (lambda a: a / 2.5, [rng.normal(size=(3, 4))], None),
        "neg": (lambda a: -a, [rng.normal(size=(5,))], None),
        "relu": (nx.relu, [away_from_zero(rng, (3, 4))], None),
        "gelu": (nx.gelu, [rng.normal(size=(3, 4))], None),
        "sigmoid": (nx.sigmoid, [3 * rng.normal(size=(3, 4))], None),
        "tanh": (nx.tanh, [rng.normal(size=(3, 4))], None),
        "exp": (nx.exp, [rng.normal(size=(3, 4))], None),
        "log": (nx.log, [0.5 + rng.random((3, 4))], None),
        "sqrt": (nx.sqrt, [0.5 + rng.random((3, 4))], None),
        "reshape": (lambda a: nx.reshape(a, (4, 3)), [rng.normal(size=(3, 4))], None),
        "transpose": (lambda a: nx.transpose(a, (1, 0, 2)), [rng.normal(size=(2, 3, 4))], None),
        "getitem": (lambda a: nx.getitem(a, (np.array([0, 2, 0]), np.array([1, 1, 3]))),
                    [rng.normal(size=(3, 4))], None),
        "slice": (lambda a: a[:, 1:3], [rng.normal(size=(3, 4))], None),
        "concatenate": (lambda a, b: nx.concatenate([a, b], axis=1), [rng.normal(size=(3, 2)),
                                                                       rng.normal(size=(3, 4))], None),
        "stack": (lambda a, b: nx.stack([a, b], axis=-1), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], None),
        "reduce_sum": (lambda a: nx.reduce_sum(a, axis=1), [rng.normal(size=(3, 4, 2))], None),
        "reduce_mean": (lambda a: nx.reduce_mean(a, axis=(0, 2), keepdims=True), [rng.normal(size=(3, 4, 2))], None),
        "matmul_batched": (nx.matmul, [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))], None),
        "matmul_weight": (nx.matmul, [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))], None),
        "linear": (nx.linear, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(2,))], None),
        "embedding_lookup": (lambda t: nx.embedding_lookup(t, ids), [rng.normal(size=(6, 3))], None),
        "softmax": (nx.softmax, [rng.normal(size=(3, 5))], None),
        "log_softmax": (nx.log_softmax, [rng.normal(size=(3, 5))], None),
        "cross_entropy": (lambda x: nx.cross_entropy(nx.log_softmax(x), target, reduction="mean"),
                          [rng.normal(size=(3, 5))], None),
        "soft_cross_entropy": (lambda x: nx.soft_cross_entropy(soft, nx.log_softmax(x), reduction="none"),
                               [rng.normal(size=(3, 5))], None),
        "entropy": (lambda x: nx.entropy(nx.softmax(x)), [rng.normal(size=(3, 5))], None),
        "kl_divergence": (lambda a, b: nx.kl_divergence(nx.softmax(a), nx.softmax(b)),
                          [rng.normal(size=(3, 5)), rng.normal(size=(3, 5))], None),
        "l2_norm": (lambda a: nx.l2_norm(a, axis=-1), [rng.normal(size=(3, 4))], None),
        "layer_norm": (nx.layer_norm, [rng.normal(size=(2, 3, 6)), 1 + 0.1 * rng.normal(size=(6,)),
                                       0.1 * rng.normal(size=(6,))], None),
        "attention": (lambda q, k, v: nx.causal_masked_attention(q, k, v, mask),
                      [rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4, 3))], None),
        "dropout": (lambda a: nx.dropout(a, 0.3, drop_key), [rng.normal(size=(4, 5))], None),
    }


# --------------------------------------------------------------------------
# composite checks over whole models


def shadow64(params: dict) -> None:
    for p in params.values():
        p.data = p.data.astype(np.float64)


def check_params(params: dict, loss_fn, seed: int, max_coords: int = 6) -> float:
    """Worst relative error of d loss / d param over sampled coordinates of each parameter."""
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        coords = rng.choice(flat.size, min(max_coords, flat.size), replace=False)
        analytic = np.zeros(flat.size) if p.grad is None else p.grad.reshape(-1)
        numeric = np.zeros(flat.size)
        for j in coords:
            old = flat[j]
            flat[j] = old + EPS
            up = float(loss_fn().data)
            flat[j] = old - EPS
            down = float(loss_fn().data)
            flat[j] = old
            numeric[j] = (up - down) / (2 * EPS)
        worst = max(worst, relative_error(analytic, numeric, coords))
    return worst


def backbone_case(kind: str, seed: int) -> float:
    """Process + prototype loss of a tiny float64 backbone, w.r.t. every parameter."""
    from dtrec import hps
    from dtrec.backbone import BackboneConfig, SequentialRecommender
    from dtrec.training import process_loss

    rng = np.random.default_rng(seed)
    cfg = BackboneConfig(n_items=12, d_model=8, n_layers=1, n_heads=2, max_len=6, dropout=0.0, kind=kind,
                         init_std=0.3)
    model = SequentialRecommender(cfg, seed=seed)
    shadow64(model.params)
    items = rng.integers(1, 13, size=(3, 6))
    items[0, :2] = 0  # left padding
    targets = rng.integers(1, 13, size=3)
    sched = hps.GranularitySchedule(2, 6, 0.5, steps=2)
    index = hps.build_index(model.item_embeddings(), sched, seed=seed)
    trace = model.run_reasoning(items, 2)
    soft = hps.prototype_targets(trace, index, model.params["item_emb"].data)

    def loss():
        tr = model.run_reasoning(items, 2)
        return process_loss(tr, targets) + hps.prototype_loss(tr, index, targets=soft) * 0.3

    return check_params(model.params, loss, seed)


def halting_case(seed: int) -> float:
    """Halting head, stick-breaking weights and the aggregated NLL, w.r.t. head parameters and step log-probs."""
    from types import SimpleNamespace

    from dtrec import arh

    rng = np.random.default_rng(seed)
    steps, b, n = 3, 4, 7
    head = arh.HaltingHead(hidden=5, seed=seed, bias_init=0.2)
    shadow64(head.params)
    feats = [rng.random((b, 3)) for _ in range(steps)]
    targets = rng.integers(1, n, size=b)
    logits = rng.normal(size=(steps + 1, b, n))

    def build(*tensors):
        lp = [nx.log_softmax(t) for t in tensors]
        trace = SimpleNamespace(log_probs=lp, n_steps=steps)
        probs = nx.stack([head(f) for f in feats], axis=-1)
        return arh.aggregated_target_nll(trace, arh.soft_halt_weights(probs), targets)

    w_err = check_params(head.params, lambda: build(*[nx.Tensor(x) for x in logits]), seed)
    lp_err = check_op(build, list(logits), seed)
    return max(w_err, lp_err)


def stick_breaking_case(seed: int) -> float:
    from dtrec import arh

    rng = np.random.default_rng(seed)
    return check_op(lambda x: arh.soft_halt_weights(nx.sigmoid(x)), [rng.normal(size=(4, 5))], seed)


def composite_cases() -> dict:
    return {
        "backbone_attention": lambda s: backbone_case("attention", s),
        "backbone_gru": lambda s: backbone_case("gru", s),
        "halting_pipeline": halting_case,
        "stick_breaking": stick_breaking_case,
    }
