"""Optimization loop, parameter registry, checkpointing, and evaluation.

One training step runs the whole forward pass (text encoder, structure
encoder, attention, predictor, and the active information maximization
losses), a single backward pass with the adversarial gradient routing
baked into the graph, global-norm gradient clipping, and one Adam update.
Fixed (seed, data, config) triples give bit-identical trajectories.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataio import Batch, DataError, Document, Vocabulary, derived_rng, make_batches
from .encoders import StructureEncoder, TextEncoder, multi_label_attention
from .infomax import (
    LossBundle,
    LossWeightEstimator,
    MIDiscriminator,
    PriorDiscriminator,
    mi_loss,
    prior_matching_loss,
    sample_prior,
    total_loss,
)
from .predictor import PredictorHead, bce_loss, macro_f1, micro_f1
from .taxonomy import Taxonomy, normalized_adjacency, parse_taxonomy, serialize_taxonomy

CHECKPOINT_MAGIC = b"HTCIMAX1"


class CheckpointError(RuntimeError):
    """Unreadable, truncated, or architecturally incompatible checkpoint."""


def derive_seed(seed: int, *keys) -> int:
    """Stable integer sub-seed for a named stream."""
    return int(derived_rng(seed, *keys).integers(0, 2**31 - 1))


@dataclass
class ModelDims:
    """Layer widths; defaults give the full-scale configuration."""

    embed_dim: int = 300
    feature_dim: int = 300       # token feature width d_t
    label_dim: int = 300         # label representation width d_y
    text_kernels: tuple[int, ...] = (2, 3, 4)
    mi_hidden: int = 512
    mi_kernel: int = 3
    prior_hidden: tuple[int, int] = (1000, 200)

    def validate(self):
        if self.feature_dim != self.label_dim:
            raise ad.DimensionError("attention requires feature_dim == label_dim")
        if self.feature_dim % len(self.text_kernels) != 0:
            raise ad.DimensionError("feature_dim must divide evenly across text kernels")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 7
    disable_mi: bool = False
    disable_label_prior: bool = False
    threshold: float = 0.5
    max_len: int = 64
    clip_norm: float = 5.0
    checkpoint_path: str | None = None
    log_path: str | None = None
    dims: ModelDims = field(default_factory=ModelDims)

    def validate(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 2 and not self.disable_mi:
            raise ValueError("batch_size must be >= 2 unless the MI loss is disabled")
        self.dims.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"]["text_kernels"] = list(self.dims.text_kernels)
        d["dims"]["prior_hidden"] = list(self.dims.prior_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        dims = d.pop("dims", {})
        dims = ModelDims(
            embed_dim=dims.get("embed_dim", 300),
            feature_dim=dims.get("feature_dim", 300),
            label_dim=dims.get("label_dim", 300),
            text_kernels=tuple(dims.get("text_kernels", (2, 3, 4))),
            mi_hidden=dims.get("mi_hidden", 512),
            mi_kernel=dims.get("mi_kernel", 3),
            prior_hidden=tuple(dims.get("prior_hidden", (1000, 200))),
        )
        return cls(dims=dims, **d)


class ParamRegistry:
    """Ordered, uniquely named map of every trainable tensor."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def register(self, prefix: str, named: dict[str, Tensor]):
        for name, tensor in named.items():
            full = f"{prefix}.{name}"
            if full in self._params:
                raise ad.ContractError(f"duplicate parameter name {full!r}")
            self._params[full] = tensor

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __len__(self):
        return len(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None


class Model:
    """Full classifier with the active information maximization parts.

    Components behind disabled ablation flags are not constructed, so the
    registry holds exactly the parameters the objective trains.
    """

    def __init__(self, tax: Taxonomy, vocab: Vocabulary, config: TrainConfig):
        config.validate()
        dims = config.dims
        self.tax = tax
        self.vocab = vocab
        self.config = config
        self.num_labels = tax.num_labels

        seed = config.seed
        self.text_encoder = TextEncoder(len(vocab), dims.embed_dim, dims.feature_dim,
                                        dims.text_kernels, derived_rng(seed, "init", "text"))
        self.structure_encoder = StructureEncoder(normalized_adjacency(tax), tax.nonroot_ids(),
                                                  dims.label_dim, derived_rng(seed, "init", "structure"))
        self.head = PredictorHead(self.num_labels, dims.feature_dim,
                                  derived_rng(seed, "init", "head"), threshold=config.threshold)
        self.mi_disc = None
        self.prior_disc = None
        self.gate = None
        if not config.disable_mi:
            self.mi_disc = MIDiscriminator(dims.feature_dim, dims.label_dim, dims.mi_hidden,
                                           derived_rng(seed, "init", "mi"), kernel_size=dims.mi_kernel)
        if not config.disable_label_prior:
            self.prior_disc = PriorDiscriminator(dims.label_dim, dims.prior_hidden,
                                                 derived_rng(seed, "init", "prior"))
        if self.mi_disc is not None and self.prior_disc is not None:
            self.gate = LossWeightEstimator(dims.feature_dim, dims.label_dim)

        self.registry = ParamRegistry()
        self.registry.register("text", self.text_encoder.named_params())
        self.registry.register("structure", self.structure_encoder.named_params())
        self.registry.register("head", self.head.named_params())
        if self.mi_disc is not None:
            self.registry.register("mi", self.mi_disc.named_params())
        if self.prior_disc is not None:
            self.registry.register("prior", self.prior_disc.named_params())
        if self.gate is not None:
            self.registry.register("gate", self.gate.named_params())

    def losses(self, batch: Batch, prior_seed: int) -> tuple[Tensor, LossBundle]:
        tf = self.text_encoder(batch)
        lr = self.structure_encoder()
        laf = multi_label_attention(tf, lr)
        preds = self.head(laf)
        l_c = bce_loss(preds.logits, batch.targets)
        l_mi = mi_loss(tf, lr, batch.targets, self.mi_disc) if self.mi_disc else None
        l_pr = None
        if self.prior_disc is not None:
            prior = sample_prior(self.num_labels, self.config.dims.label_dim, prior_seed)
            l_pr = prior_matching_loss(lr, prior, self.prior_disc)
        f_weight = self.gate(tf.pooled, lr) if self.gate is not None else None
        return total_loss(l_c, l_mi, l_pr, f_weight)

    def predict(self, batch: Batch):
        tf = self.text_encoder(batch)
        lr = self.structure_encoder()
        laf = multi_label_attention(tf, lr)
        return self.head(laf)


class Adam:
    """Adam with bias correction; clears gradients after each update."""

    def __init__(self, registry: ParamRegistry, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.registry = registry
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {
            name: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            for name, p in registry.items()
        }

    def step(self):
        for name, p in self.registry.items():
            if p.grad is None:
                raise ad.ContractError(f"missing gradient for parameter {name!r}")
            s = self.state[name]
            s["t"] += 1
            s["m"] = self.beta1 * s["m"] + (1.0 - self.beta1) * p.grad
            s["v"] = self.beta2 * s["v"] + (1.0 - self.beta2) * (p.grad * p.grad)
            m_hat = s["m"] / (1.0 - self.beta1 ** s["t"])
            v_hat = s["v"] / (1.0 - self.beta2 ** s["t"])
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None


def clip_gradients(registry: ParamRegistry, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for _, p in registry.items():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for _, p in registry.items():
            if p.grad is not None:
                p.grad *= scale
    return norm


def train_step(batch: Batch, model: Model, optimizer: Adam, global_step: int) -> LossBundle:
    """One forward/backward/update cycle; returns the loss scalars."""
    prior_seed = derive_seed(model.config.seed, "prior", global_step)
    total, bundle = model.losses(batch, prior_seed)
    model.registry.zero_grad()
    ad.backward(total)
    clip_gradients(model.registry, model.config.clip_norm)
    optimizer.step()
    return bundle


def evaluate(batches: list[Batch], model: Model) -> dict:
    """Pooled micro/macro F1 plus mean classification loss; mutates nothing."""
    if not batches:
        raise DataError("evaluate called with an empty dataset")
    all_decisions = []
    all_targets = []
    loss_sum = 0.0
    cell_count = 0
    with ad.no_grad():
        for batch in batches:
            preds = model.predict(batch)
            all_decisions.append(preds.decisions)
            all_targets.append(batch.targets)
            loss_sum += bce_loss(preds.logits, batch.targets).item() * batch.targets.size
            cell_count += batch.targets.size
    decisions = np.concatenate(all_decisions, axis=0)
    targets = np.concatenate(all_targets, axis=0)
    return {
        "micro_f1": micro_f1(decisions, targets),
        "macro_f1": macro_f1(decisions, targets),
        "L_c": loss_sum / cell_count,
    }


@dataclass
class TrainResult:
    model: Model
    optimizer: Adam
    records: list[dict]
    global_step: int
    epochs_completed: int


def run_training(train_docs: list[Document], val_docs: list[Document], tax: Taxonomy,
                 vocab: Vocabulary, config: TrainConfig,
                 resume_from: str | None = None,
                 stop_when=None, log_stream=None, on_step=None) -> TrainResult:
    """Train for config.epochs, logging one JSON record per epoch.

    `stop_when(record)` may end training early (used by calibration runs);
    `on_step(bundle)` observes every step's loss scalars; `resume_from`
    restores parameters, optimizer state, and progress from a checkpoint
    so a split run reproduces an uninterrupted one.
    """
    config.validate()
    model = Model(tax, vocab, config)
    optimizer = Adam(model.registry, config.learning_rate)
    start_epoch = 0
    global_step = 0
    if resume_from is not None:
        start_epoch, global_step = restore_checkpoint(resume_from, model, optimizer)

    mi_enabled = not config.disable_mi
    val_batches = make_batches(val_docs, config.batch_size, config.max_len, tax) if val_docs else []
    records: list[dict] = []
    epochs_completed = start_epoch
    log_fh = open(config.log_path, "a", encoding="utf-8") if config.log_path else None
    try:
        for epoch in range(start_epoch, config.epochs):
            tick = time.perf_counter()
            batches = make_batches(train_docs, config.batch_size, config.max_len, tax,
                                   shuffle_seed=derive_seed(config.seed, "shuffle", epoch),
                                   drop_partial=mi_enabled)
            sums = {"L": 0.0, "L_c": 0.0, "L_MI": 0.0, "L_pr": 0.0, "F": 0.0}
            for batch in batches:
                bundle = train_step(batch, model, optimizer, global_step)
                global_step += 1
                if on_step is not None:
                    on_step(bundle)
                for key, value in bundle.to_dict().items():
                    sums[key] += value
            steps = max(len(batches), 1)
            record = {"epoch": epoch}
            record.update({k: v / steps for k, v in sums.items()})
            if val_batches:
                val = evaluate(val_batches, model)
                record.update({"micro_f1": val["micro_f1"], "macro_f1": val["macro_f1"],
                               "val_L_c": val["L_c"]})
            else:
                record.update({"micro_f1": None, "macro_f1": None})
            record["wall_time_s"] = round(time.perf_counter() - tick, 3)
            records.append(record)
            line = json.dumps(record, sort_keys=True)
            if log_fh:
                log_fh.write(line + "\n")
                log_fh.flush()
            if log_stream:
                print(line, file=log_stream, flush=True)
            epochs_completed = epoch + 1
            if stop_when is not None and stop_when(record):
                break
    finally:
        if log_fh:
            log_fh.close()

    if config.checkpoint_path:
        save_checkpoint(config.checkpoint_path, model, optimizer,
                        epochs_completed=epochs_completed, global_step=global_step)
    return TrainResult(model=model, optimizer=optimizer, records=records,
                       global_step=global_step, epochs_completed=epochs_completed)


# -- persistence ----------------------------------------------------------------


def save_checkpoint(path, model: Model, optimizer: Adam | None = None,
                    epochs_completed: int = 0, global_step: int = 0):
    """Self-describing versioned binary: JSON header + little-endian doubles.

    The header stores the resolved config, seed, vocabulary, serialized
    taxonomy, parameter names/shapes, and optimizer step counts; the body
    stores each parameter's values and, when an optimizer is given, its
    first and second moments.
    """
    names = model.registry.names()
    header = {
        "format": "htcinfomax-checkpoint",
        "version": 1,
        "seed": model.config.seed,
        "config": model.config.to_dict(),
        "progress": {"epochs_completed": epochs_completed, "global_step": global_step},
        "vocab": model.vocab.to_json(),
        "taxonomy": serialize_taxonomy(model.tax),
        "params": [{"name": n, "shape": list(model.registry[n].shape)} for n in names],
        "adam": {n: optimizer.state[n]["t"] for n in names} if optimizer else None,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for name in names:
            fh.write(model.registry[name].data.astype("<f8").tobytes(order="C"))
            if optimizer is not None:
                fh.write(optimizer.state[name]["m"].astype("<f8").tobytes(order="C"))
                fh.write(optimizer.state[name]["v"].astype("<f8").tobytes(order="C"))


def read_checkpoint(path) -> dict:
    """Parse a checkpoint into {header, params, adam_m, adam_v} dicts."""
    try:
        blob = Path(path).read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from None
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic or version)")
    if len(blob) < 16:
        raise CheckpointError(f"{path} is truncated")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + header_len:
        raise CheckpointError(f"{path} is truncated inside the header")
    header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    if header.get("version") != 1:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    offset = 16 + header_len
    has_adam = header.get("adam") is not None
    params: dict[str, np.ndarray] = {}
    adam_m: dict[str, np.ndarray] = {}
    adam_v: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        blocks = 3 if has_adam else 1
        if len(blob) < offset + nbytes * blocks:
            raise CheckpointError(f"{path} is truncated inside parameter {entry['name']!r}")
        params[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=count,
                                              offset=offset).reshape(shape).copy()
        offset += nbytes
        if has_adam:
            adam_m[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=count,
                                                  offset=offset).reshape(shape).copy()
            offset += nbytes
            adam_v[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=count,
                                                  offset=offset).reshape(shape).copy()
            offset += nbytes
    return {"header": header, "params": params, "adam_m": adam_m, "adam_v": adam_v}


def restore_checkpoint(path, model: Model, optimizer: Adam | None = None) -> tuple[int, int]:
    """Load parameter values (and optimizer state) into an existing model.

    Returns (epochs_completed, global_step).  Name or shape disagreements
    raise CheckpointError identifying the parameter.
    """
    data = read_checkpoint(path)
    stored = set(data["params"])
    live = set(model.registry.names())
    for name in sorted(stored - live):
        raise CheckpointError(f"checkpoint parameter {name!r} does not exist in this model")
    for name in sorted(live - stored):
        raise CheckpointError(f"model parameter {name!r} missing from checkpoint")
    for name, values in data["params"].items():
        target = model.registry[name]
        if values.shape != target.shape:
            raise CheckpointError(
                f"shape mismatch for parameter {name!r}: checkpoint {values.shape} vs model {target.shape}")
        target.data[...] = values
    if optimizer is not None and data["header"].get("adam") is not None:
        for name in model.registry.names():
            optimizer.state[name]["m"][...] = data["adam_m"][name]
            optimizer.state[name]["v"][...] = data["adam_v"][name]
            optimizer.state[name]["t"] = int(data["header"]["adam"][name])
    progress = data["header"].get("progress", {})
    return int(progress.get("epochs_completed", 0)), int(progress.get("global_step", 0))


def load_model(path) -> Model:
    """Rebuild a model purely from a checkpoint (config, vocab, taxonomy)."""
    data = read_checkpoint(path)
    header = data["header"]
    config = TrainConfig.from_dict(header["config"])
    tax = parse_taxonomy(header["taxonomy"])
    vocab = Vocabulary.from_json(header["vocab"])
    model = Model(tax, vocab, config)
    restore_checkpoint(path, model)
    return model
