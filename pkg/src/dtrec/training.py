"""Objective assembly, optimisation loop and checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import arh, hps
from . import numerics as nx
from .backbone import BackboneConfig, ReasoningTrace
from .data import InteractionDataset, SplitView, leave_one_out_split, make_batches, training_instances
from .evaluation import evaluate
from .model import DTRecModel, get_variant

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "DTREC-CHECKPOINT"
CHECKPOINT_VERSION = 1
# reasoning states outside [low, high]·√d are reported as a divergence alarm
STATE_NORM_BAND = (0.1, 10.0)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant: str = "hps_arh"
    seed: int = 0
    # backbone
    kind: str = "attention"
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_len: int = 50
    dropout: float = 0.2
    steps: int = 3
    # optimisation
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    patience: int = 10
    instances_per_user: int = 0  # 0 = every cut point of the train prefix
    eval_batch_size: int = 512
    # process supervision
    proto_weight: float = 0.1
    warmup_epochs: int = 10
    k0: int = 10
    k_upper: int = 3000
    alpha: float = 0.5
    include_step0: bool = True
    kmeans_restarts: int = 4
    # halting
    halt_threshold: float = 0.5
    halt_min_steps: int = 1
    halt_hidden: int = 16
    halt_bias_init: float = 0.0
    agg_weight: float = 1.0
    diagnostic_dir: str = ""

    def __post_init__(self):
        get_variant(self.variant)
        if not 0 <= self.steps <= 5:
            raise ValueError("steps must lie in [0, 5]")

    def backbone_config(self, n_items: int) -> BackboneConfig:
        return BackboneConfig(n_items=n_items, d_model=self.d_model, n_layers=self.n_layers,
                              n_heads=self.n_heads, max_len=self.max_len, dropout=self.dropout,
                              kind=self.kind)

    def schedule(self) -> hps.GranularitySchedule:
        return hps.GranularitySchedule(self.k0, self.k_upper, self.alpha, max(self.steps, 1),
                                       constant=get_variant(self.variant).constant_k)

    def policy(self) -> arh.HaltPolicy:
        return arh.HaltPolicy(self.halt_threshold, self.halt_min_steps, max(self.steps, 1))

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise KeyError(f"unknown training keys: {sorted(unknown)}")
        return cls(**values)


# --------------------------------------------------------------------------
# losses


def process_loss(trace: ReasoningTrace, targets: np.ndarray) -> nx.Tensor:
    """Batch mean of Σ_{t=0..T} -log ŷ^(t)[target]."""
    total = None
    for lp in trace.log_probs:
        term = nx.cross_entropy(lp, targets, reduction="mean")
        total = term if total is None else total + term
    return total


def proto_weight_at(config: TrainConfig, epoch: int) -> float:
    variant = get_variant(config.variant)
    if not variant.use_hps:
        return 0.0
    if not variant.warmup:
        return config.proto_weight
    return hps.warmup_weight(epoch, config.proto_weight, config.warmup_epochs)


def total_loss(model: DTRecModel, trace: ReasoningTrace, targets: np.ndarray, epoch: int,
               config: TrainConfig, index: hps.PrototypeIndex | None = None):
    """L_0 + w(epoch)·L_p (+ CE of the halting mixture); returns (loss, breakdown)."""
    l0 = process_loss(trace, targets)
    loss = l0
    breakdown = {"process": float(l0.data)}
    weight = proto_weight_at(config, epoch)
    if model.variant.use_hps and index is not None and trace.n_steps > 0:
        E = model.backbone.params["item_emb"].data
        lp = hps.prototype_loss(trace, index, E, include_step0=config.include_step0)
        breakdown["prototype"] = float(lp.data)
        breakdown["prototype_weight"] = weight
        if weight > 0:
            loss = loss + lp * weight
    if model.variant.halting and trace.n_steps > 0:
        probs = model.halting_probs(trace)
        weights = arh.soft_halt_weights(probs)
        agg = arh.aggregated_target_nll(trace, weights, targets)
        breakdown["halting"] = float(agg.data)
        breakdown["expected_steps"] = float(arh.expected_exit_step(weights.data).mean())
        loss = loss + agg * config.agg_weight
    breakdown["total"] = float(loss.data)
    return loss, breakdown


# --------------------------------------------------------------------------
# trainer


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    process: float
    prototype: float
    halting: float
    valid_ndcg10: float
    valid_cost_ratio: float


@dataclass
class TrainState:
    epoch: int = 0  # next epoch to run
    best_ndcg: float = -1.0
    best_epoch: int = -1
    bad_epochs: int = 0
    history: list[EpochRecord] = field(default_factory=list)


class Trainer:
    def __init__(self, dataset: InteractionDataset, config: TrainConfig):
        self.config = config
        self.dataset = dataset
        self.train_view, self.valid_view, self.test_view = leave_one_out_split(dataset)
        per_user = config.instances_per_user or None
        self.instances = training_instances(self.train_view, per_user=per_user)
        self.model = DTRecModel(config.backbone_config(dataset.n_items), config.steps, config.variant,
                                config.halt_hidden, config.halt_bias_init, seed=config.seed)
        self.optimizer = nx.Adam(self.model.params, config.lr, (config.beta1, config.beta2), config.adam_eps)
        self.index: hps.PrototypeIndex | None = None
        self.state = TrainState()
        self.best_params: dict[str, np.ndarray] = self.model.state_dict()

    @property
    def finished(self) -> bool:
        return self.state.epoch >= self.config.epochs or self.state.bad_epochs >= self.config.patience

    def refresh_index(self, epoch: int) -> None:
        if self.model.variant.use_hps and self.model.steps > 0:
            self.index = hps.refresh_index(self.model.backbone, self.config.schedule(), epoch,
                                           self.config.seed, n_init=self.config.kmeans_restarts)

    def train_epoch(self) -> EpochRecord:
        cfg = self.config
        epoch = self.state.epoch
        self.refresh_index(epoch)
        self.model.train(True)
        params = list(self.model.params.values())
        sums = {"total": 0.0, "process": 0.0, "prototype": 0.0, "halting": 0.0}
        n_batches = 0
        for b, batch in enumerate(make_batches(self.instances, cfg.batch_size, cfg.max_len, seed=cfg.seed, epoch=epoch)):
            self.model.backbone.set_dropout_context(cfg.seed, epoch, b)
            try:
                trace = self.model.trace(batch.items)
                self._check_state_norms(trace, epoch, b)
                loss, parts = total_loss(self.model, trace, batch.targets, epoch, cfg, self.index)
                self.optimizer.zero_grad()
                loss.backward()
                if not all(np.isfinite(p.grad).all() for p in params if p.grad is not None):
                    raise nx.NonFiniteError("non-finite gradient")
            except nx.NonFiniteError as exc:
                self._dump(batch, epoch, b, exc)
                raise TrainingDiverged(f"epoch {epoch} batch {b}: {exc}") from exc
            nx.clip_grad_norm(params, cfg.grad_clip)
            self.optimizer.step()
            for k in sums:
                sums[k] += parts.get(k, 0.0)
            n_batches += 1
        self.model.train(False)
        valid = evaluate(self.model, self.valid_view, cfg.policy(), cfg.eval_batch_size, cfg.max_len, cfg.seed)
        rec = EpochRecord(epoch, sums["total"] / n_batches, sums["process"] / n_batches,
                          sums["prototype"] / n_batches, sums["halting"] / n_batches,
                          valid.report.ndcg10, valid.report.cost_ratio)
        self.state.history.append(rec)
        if rec.valid_ndcg10 > self.state.best_ndcg:
            self.state.best_ndcg = rec.valid_ndcg10
            self.state.best_epoch = epoch
            self.state.bad_epochs = 0
            self.best_params = self.model.state_dict()
        else:
            self.state.bad_epochs += 1
        self.state.epoch = epoch + 1
        log.info("epoch %d loss %.4f valid NDCG@10 %.4f cost %.1f%%", epoch, rec.loss, rec.valid_ndcg10,
                 rec.valid_cost_ratio)
        return rec

    def fit(self, stop_after: int | None = None) -> "Trainer":
        """Train until early stopping; ``stop_after`` pauses after that many epochs."""
        ran = 0
        while not self.finished and (stop_after is None or ran < stop_after):
            self.train_epoch()
            ran += 1
        if self.finished:
            self.restore_best()
        return self

    def restore_best(self) -> None:
        self.model.load_state_dict(self.best_params)
        if self.model.variant.use_hps and self.model.steps > 0:
            self.refresh_index(self.state.best_epoch + 1)

    def _check_state_norms(self, trace: ReasoningTrace, epoch: int, b: int) -> bool:
        scale = np.sqrt(self.config.d_model)
        norms = np.concatenate([np.linalg.norm(s.data, axis=-1) for s in trace.states]) / scale
        low, high = STATE_NORM_BAND
        if norms.min() < low or norms.max() > high:
            log.warning("reasoning state norm outside [%g, %g]·√d at epoch %d batch %d (min %.3g, max %.3g)",
                        low, high, epoch, b, norms.min(), norms.max())
            return False
        return True

    def _dump(self, batch, epoch: int, b: int, exc: Exception) -> None:
        target = Path(self.config.diagnostic_dir or ".")
        try:
            target.mkdir(parents=True, exist_ok=True)
            path = target / f"diverged_e{epoch}_b{b}.npz"
            np.savez(path, items=batch.items, targets=batch.targets, users=batch.users)
            log.error("non-finite values at epoch %d batch %d (%s); batch dumped to %s", epoch, b, exc, path)
        except OSError:
            log.error("non-finite values at epoch %d batch %d (%s)", epoch, b, exc)

    # ------------------------------------------------------------------ checkpoints

    def save_checkpoint(self, path: str | Path) -> None:
        tensors = {f"param/{k}": v for k, v in self.model.state_dict().items()}
        tensors.update({f"best/{k}": v for k, v in self.best_params.items()})
        tensors.update({f"adam_m/{k}": v for k, v in self.optimizer.m.items()})
        tensors.update({f"adam_v/{k}": v for k, v in self.optimizer.v.items()})
        meta = {
            "config": asdict(self.config),
            "epoch": self.state.epoch,
            "adam_step": self.optimizer.step_count,
            "best_ndcg": self.state.best_ndcg,
            "best_epoch": self.state.best_epoch,
            "bad_epochs": self.state.bad_epochs,
            "history": [asdict(r) for r in self.state.history],
            # all randomness is derived from (seed, epoch, batch, op) counters
            "rng": {"seed": self.config.seed, "next_epoch": self.state.epoch},
            "n_items": self.dataset.n_items,
            "dataset": self.dataset.fingerprint(),
        }
        if self.index is not None:
            meta["index"] = {"ks": self.index.ks, "snapshot_hash": self.index.snapshot_hash,
                             "epoch": self.index.epoch}
            for t, c in enumerate(self.index.centers, start=1):
                tensors[f"index/level{t}"] = c
        write_checkpoint(path, tensors, meta)

    @classmethod
    def from_checkpoint(cls, path: str | Path, dataset: InteractionDataset) -> "Trainer":
        tensors, meta = read_checkpoint(path)
        config = TrainConfig.from_dict(meta["config"])
        trainer = cls(dataset, config)
        if meta.get("dataset") not in (None, dataset.fingerprint()):
            raise ValueError("checkpoint was trained on a different dataset")
        trainer.load_tensors(tensors, meta)
        return trainer

    def load_tensors(self, tensors: dict[str, np.ndarray], meta: dict) -> None:
        self.model.load_state_dict(_strip(tensors, "param/"))
        self.best_params = _strip(tensors, "best/")
        self.optimizer.m = {k: v.copy() for k, v in _strip(tensors, "adam_m/").items()}
        self.optimizer.v = {k: v.copy() for k, v in _strip(tensors, "adam_v/").items()}
        self.optimizer.step_count = int(meta["adam_step"])
        self.state = TrainState(int(meta["epoch"]), float(meta["best_ndcg"]), int(meta["best_epoch"]),
                                int(meta["bad_epochs"]), [EpochRecord(**r) for r in meta["history"]])
        if "index" in meta:
            info = meta["index"]
            centers = [tensors[f"index/level{t}"] for t in range(1, len(info["ks"]) + 1)]
            self.index = hps.PrototypeIndex(centers, list(info["ks"]), info["snapshot_hash"], int(info["epoch"]))


def _strip(tensors: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def train(dataset: InteractionDataset, config: TrainConfig) -> Trainer:
    return Trainer(dataset, config).fit()


# --------------------------------------------------------------------------
# checkpoint file format
#
#   DTREC-CHECKPOINT
#   version = 1
#   meta = <json>
#   tensor <name> <dim,dim,...> <byte offset> <byte length>
#   ...
#   end
#   <raw little-endian float32 payload>


def write_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    lines = [CHECKPOINT_MAGIC, f"version = {CHECKPOINT_VERSION}", "meta = " + json.dumps(meta, sort_keys=True)]
    payload = []
    offset = 0
    for name in sorted(tensors):
        if any(c.isspace() for c in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        arr = np.array(tensors[name], dtype="<f4", order="C")  # keeps 0-d shapes
        shape = ",".join(str(s) for s in arr.shape) or "-"
        lines.append(f"tensor {name} {shape} {offset} {arr.nbytes}")
        payload.append(arr.tobytes())
        offset += arr.nbytes
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for chunk in payload:
            fh.write(chunk)


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    header_end = raw.find(b"\nend\n")
    if header_end < 0:
        raise ValueError(f"{path}: not a checkpoint (no manifest terminator)")
    header = raw[:header_end].decode("utf-8").split("\n")
    body = memoryview(raw)[header_end + len(b"\nend\n"):]
    if header[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {header[0]!r}")
    meta, version, tensors = {}, None, {}
    for line in header[1:]:
        if line.startswith("version = "):
            version = int(line.split("=", 1)[1])
        elif line.startswith("meta = "):
            meta = json.loads(line.split("=", 1)[1])
        elif line.startswith("tensor "):
            _, name, shape, offset, nbytes = line.split(" ")
            dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
            start, n = int(offset), int(nbytes)
            arr = np.frombuffer(body[start:start + n], dtype="<f4").reshape(dims)
            tensors[name] = arr.astype(np.float32)
    if version is None:
        raise ValueError(f"{path}: checkpoint has no format version")
    if version > CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version} is newer than supported {CHECKPOINT_VERSION}")
    return tensors, meta


def load_model(path: str | Path) -> tuple[DTRecModel, hps.PrototypeIndex | None, TrainConfig, dict]:
    """Model (best parameters) for evaluation, without needing the dataset."""
    tensors, meta = read_checkpoint(path)
    config = TrainConfig.from_dict(meta["config"])
    model = DTRecModel(config.backbone_config(int(meta["n_items"])), config.steps, config.variant,
                       config.halt_hidden, config.halt_bias_init, seed=config.seed)
    best = _strip(tensors, "best/")
    model.load_state_dict(best if best else _strip(tensors, "param/"))
    index = None
    if "index" in meta:
        info = meta["index"]
        centers = [tensors[f"index/level{t}"] for t in range(1, len(info["ks"]) + 1)]
        index = hps.PrototypeIndex(centers, list(info["ks"]), info["snapshot_hash"], int(info["epoch"]))
    return model, index, config, meta

