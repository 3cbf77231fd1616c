"""Desk-scale supervised training: pre-training, adapter fine-tuning with
everything else frozen, evaluation, and the two forgetting metrics."""

import copy
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .adapter import init_slice_adapter, load_adapter, save_adapter
from .errors import NonFiniteLoss, OutOfRange, ShapeMismatch
from .linalg import as_matrix
from .matio import read_matrix, write_matrix
from .nn import (
    LOSSES,
    AdapterLayer,
    DenseLayer,
    Model,
    ModelSpec,
    init_model,
    log_softmax,
    loss_and_grad,
    softmax,
)
from .rng import stream


@dataclass
class LabeledDataset:
    """Inputs x (N, d) with integer class labels y (N,) in [0, C)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = as_matrix(self.x, "x")
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.y.ndim != 1 or self.y.shape[0] != self.x.shape[0]:
            raise ShapeMismatch(
                f"labels shape {self.y.shape} does not match {self.x.shape[0]} rows"
            )
        if self.y.shape[0] < 1:
            raise ShapeMismatch("dataset must not be empty")
        if self.y.min() < 0:
            raise OutOfRange("labels must be non-negative")

    def __len__(self):
        return self.x.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int
    batch_size: int
    optimizer: str = "adamw"  # "adamw" | "sgd_momentum"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    loss: str = "cross_entropy"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise OutOfRange(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise OutOfRange(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise OutOfRange(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adamw", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")


class _SgdMomentum:
    def __init__(self, cfg):
        self.lr = cfg.learning_rate
        self.beta = cfg.momentum
        self.v = {}

    def step(self, params, grads):
        for key, p in params:
            g = grads[key]
            v = self.v.get(key)
            if v is None:
                v = np.zeros_like(p)
                self.v[key] = v
            v *= self.beta
            v += g
            p -= self.lr * v


class _AdamW:
    def __init__(self, cfg):
        self.lr = cfg.learning_rate
        self.b1, self.b2 = cfg.beta1, cfg.beta2
        self.eps = cfg.eps
        self.wd = cfg.weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for key, p in params:
            g = grads[key]
            m = self.m.setdefault(key, np.zeros_like(p))
            v = self.v.setdefault(key, np.zeros_like(p))
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd:
                update = update + self.wd * p
            p -= self.lr * update


def _make_optimizer(cfg):
    return _AdamW(cfg) if cfg.optimizer == "adamw" else _SgdMomentum(cfg)


@dataclass
class TrainRun:
    """Outcome of a training call: the trained model plus its metric trace
    (rows of (epoch, split, loss, accuracy)) and, when tracked, the model
    snapshot with the best evaluation score from half-way on."""

    model: Model
    trace: list = field(default_factory=list)
    best_model: Model = None
    best_epoch: int = None


def evaluate(model, data):
    """Fraction of argmax-correct predictions (argmax ties -> lowest class)."""
    logits = model.forward(data.x)
    if logits.shape[1] <= int(data.y.max()):
        raise ShapeMismatch(
            f"model emits {logits.shape[1]} classes but labels reach {int(data.y.max())}"
        )
    preds = np.argmax(logits, axis=1)
    return float(np.mean(preds == data.y))


def _train_loop(model, data, cfg, on_epoch_end=None):
    """Shared mini-batch loop. Raises NonFiniteLoss carrying the state at
    the last fully finite epoch when a batch diverges."""
    n = len(data)
    if cfg.batch_size > n:
        raise OutOfRange(f"batch_size {cfg.batch_size} exceeds dataset size {n}")
    optimizer = _make_optimizer(cfg)
    trace = []
    last_finite = copy.deepcopy(model)
    for epoch in range(cfg.epochs):
        perm = stream(cfg.seed, "shuffle", epoch).permutation(n)
        epoch_loss, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb, yb = data.x[idx], data.y[idx]
            logits, cache = model.forward_cached(xb)
            loss, glogits = loss_and_grad(cfg.loss, logits, yb)
            if not np.isfinite(loss):
                raise NonFiniteLoss(
                    epoch, start // cfg.batch_size, loss,
                    partial=TrainRun(model=last_finite, trace=trace),
                )
            grads = model.backward(cache, glogits)
            params = model.trainable_params()
            optimizer.step(params, grads)
            epoch_loss += loss * len(idx)
            seen += len(idx)
        train_acc = evaluate(model, data)
        trace.append((epoch, "train", epoch_loss / seen, train_acc))
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, trace)
        last_finite = copy.deepcopy(model)
    return trace


def pretrain(spec, data, cfg, val=None):
    """Full-parameter training of a fresh model; deterministic given seed."""
    model = init_model(spec, cfg.seed)
    if data.x.shape[1] != spec.layer_dims[0]:
        raise ShapeMismatch(
            f"data has {data.x.shape[1]} features, model expects {spec.layer_dims[0]}"
        )

    def on_epoch_end(epoch, m, trace):
        if val is not None:
            trace.append((epoch, "val", _dataset_loss(m, val, cfg.loss), evaluate(m, val)))

    trace = _train_loop(model, data, cfg, on_epoch_end)
    return TrainRun(model=model, trace=trace)


def _dataset_loss(model, data, loss_name):
    logits = model.forward(data.x)
    loss, _ = loss_and_grad(loss_name, logits, data.y)
    return loss


def attach_adapters(model, spec, train_biases=True):
    """Clone ``model`` with every adapted layer's weight replaced by a
    slice adapter; all non-adapted parameters frozen."""
    clone = model.clone()
    for i, layer in enumerate(clone.layers):
        if i in clone.spec.adapted_layers:
            if isinstance(layer, AdapterLayer):
                raise ShapeMismatch(f"layer {i} already carries an adapter")
            state = init_slice_adapter(layer.w, spec)
            clone.layers[i] = AdapterLayer(
                state=state, bias=layer.bias, train_bias=train_biases
            )
        else:
            layer.train_w = False
            layer.train_bias = False
    return clone


def attach_and_finetune(
    model,
    spec,
    data,
    cfg,
    train_biases=True,
    eval_new=None,
    eval_prior=None,
    track_best=False,
):
    """Attach slice adapters and fine-tune only (a, b) and, optionally, the
    adapted layers' biases. The input model is left untouched.

    With ``track_best`` and both eval sets given, the model snapshot with
    the highest acc(eval_new) + acc(eval_prior) over the second half of the
    epochs is retained (earliest epoch on ties).
    """
    tuned = attach_adapters(model, spec, train_biases)
    best = {"score": -np.inf, "model": None, "epoch": None}
    half = (cfg.epochs + 1) // 2

    def on_epoch_end(epoch, m, trace):
        acc_n = acc_p = None
        if eval_new is not None:
            acc_n = evaluate(m, eval_new)
            trace.append((epoch, "new_test", _dataset_loss(m, eval_new, cfg.loss), acc_n))
        if eval_prior is not None:
            acc_p = evaluate(m, eval_prior)
            trace.append((epoch, "prior_test", _dataset_loss(m, eval_prior, cfg.loss), acc_p))
        if track_best and acc_n is not None and acc_p is not None and epoch + 1 >= half:
            score = acc_n + acc_p
            if score > best["score"]:
                best.update(score=score, model=copy.deepcopy(m), epoch=epoch)

    trace = _train_loop(tuned, data, cfg, on_epoch_end)
    return TrainRun(
        model=tuned, trace=trace, best_model=best["model"], best_epoch=best["epoch"]
    )


def forgetting_abs(acc_before, acc_after):
    """Absolute accuracy difference before vs after fine-tuning."""
    for name, v in (("acc_before", acc_before), ("acc_after", acc_after)):
        if not 0.0 <= v <= 1.0:
            raise OutOfRange(f"{name} must lie in [0, 1], got {v}")
    return abs(acc_before - acc_after)


def forgetting_soft_ce(model_before, model_after, probe):
    """Soft cross-entropy of the fine-tuned model against the pre-fine-tuning
    model's predictive distribution on a probe set, plus the KL variant
    (soft_ce minus the before-model's mean predictive entropy)."""
    logits_b = model_before.forward(probe.x)
    logits_a = model_after.forward(probe.x)
    if logits_b.shape != logits_a.shape:
        raise ShapeMismatch(
            f"model outputs disagree: {logits_b.shape} vs {logits_a.shape}"
        )
    p = softmax(logits_b)
    soft_ce = float(-(p * log_softmax(logits_a)).sum(axis=1).mean())
    entropy = float(-(p * log_softmax(logits_b)).sum(axis=1).mean())
    return soft_ce, soft_ce - entropy


def save_model(model, out_dir):
    """Checkpoint layout: manifest.json + per-layer SMX1 files; adapter
    layers nest the adapter checkpoint format in a subdirectory."""
    os.makedirs(out_dir, exist_ok=True)
    layers_meta = []
    for i, layer in enumerate(model.layers):
        entry = {"index": i}
        if isinstance(layer, AdapterLayer):
            sub = f"layer{i}_adapter"
            save_adapter(layer.state, os.path.join(out_dir, sub))
            entry.update(type="adapter", dir=sub, train_bias=layer.train_bias)
        else:
            name = f"layer{i}_w.smx"
            write_matrix(os.path.join(out_dir, name), layer.w)
            entry.update(type="dense", w=name, train_w=layer.train_w,
                         train_bias=layer.train_bias)
        if layer.bias is not None:
            bname = f"layer{i}_bias.smx"
            write_matrix(os.path.join(out_dir, bname), layer.bias.reshape(1, -1))
            entry["bias"] = bname
        layers_meta.append(entry)
    manifest = {
        "model_spec": {
            "layer_dims": list(model.spec.layer_dims),
            "activation": model.spec.activation,
            "adapted_layers": list(model.spec.adapted_layers),
            "bias": model.spec.bias,
        },
        "layers": layers_meta,
        "format": "SMX1",
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_model(in_dir):
    with open(os.path.join(in_dir, "manifest.json")) as f:
        manifest = json.load(f)
    ms = manifest["model_spec"]
    spec = ModelSpec(
        layer_dims=tuple(ms["layer_dims"]),
        activation=ms["activation"],
        adapted_layers=tuple(ms["adapted_layers"]),
        bias=ms["bias"],
    )
    layers = []
    for entry in manifest["layers"]:
        bias = None
        if "bias" in entry:
            bias = read_matrix(os.path.join(in_dir, entry["bias"])).reshape(-1)
        if entry["type"] == "adapter":
            state = load_adapter(os.path.join(in_dir, entry["dir"]))
            layers.append(AdapterLayer(state=state, bias=bias,
                                       train_bias=entry["train_bias"]))
        else:
            w = read_matrix(os.path.join(in_dir, entry["w"]))
            layers.append(DenseLayer(w=w, bias=bias, train_w=entry["train_w"],
                                     train_bias=entry["train_bias"]))
    return Model(spec, layers)


def write_trace_csv(trace, path):
    with open(path, "w") as f:
        f.write("epoch,split,loss,accuracy\n")
        for epoch, split, loss, acc in trace:
            f.write(f"{epoch},{split},{loss!r},{acc!r}\n")
