"""Reference CNN, parameter policies, SGD with momentum, and checkpoints."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import CheckpointError, ConfigurationError, ContractError, NumericOverflowError
from .ndgrad import Stream, Tape, Tensor, backward, ops

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
ARCH_KIND = "refcnn-2conv"

# Stage names in forward order; style_layer_index i means "output of the first i stages".
STAGES = ("conv1", "norm1", "relu1", "pool1", "conv2", "norm2", "relu2", "gap", "fc")
FEATURE_STAGES = range(1, 8)  # indices whose output is (B, C, H, W)
DEFAULT_STYLE_LAYER = 3

NORM_AFFINE_ONLY = "norm-affine-only"
ALL_PARAMETERS = "all-parameters"
PARAM_POLICIES = (NORM_AFFINE_ONLY, ALL_PARAMETERS)


@dataclass
class ModelState:
    architecture: dict
    params: dict
    buffers: dict = field(default_factory=dict)
    norm_mode: str = "batch"
    style_layer_index: int = DEFAULT_STYLE_LAYER

    def clone(self) -> "ModelState":
        return copy.deepcopy(self)

    @property
    def num_classes(self) -> int:
        return int(self.architecture["num_classes"])

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())


def _layout(num_classes, in_channels, widths=(8, 16)):
    c1, c2 = widths
    return {
        "conv1.weight": (c1, in_channels, 3, 3),
        "conv1.bias": (c1,),
        "norm1.gamma": (c1,),
        "norm1.beta": (c1,),
        "conv2.weight": (c2, c1, 3, 3),
        "conv2.bias": (c2,),
        "norm2.gamma": (c2,),
        "norm2.beta": (c2,),
        "fc.weight": (c2, num_classes),
        "fc.bias": (num_classes,),
    }


def _buffer_layout(widths=(8, 16)):
    c1, c2 = widths
    return {
        "norm1.running_mean": (c1,),
        "norm1.running_var": (c1,),
        "norm2.running_mean": (c2,),
        "norm2.running_var": (c2,),
    }


def build_reference_net(num_classes: int, in_channels: int, seed: int = 0) -> ModelState:
    """Conv(in->8) Norm ReLU AvgPool Conv(8->16) Norm ReLU GAP Linear(16->K)."""
    if num_classes < 2 or in_channels < 1:
        raise ContractError("need num_classes >= 2 and in_channels >= 1")
    arch = {"kind": ARCH_KIND, "num_classes": int(num_classes),
            "in_channels": int(in_channels), "widths": [8, 16]}
    stream = Stream.from_seed(seed).split("init")
    params = {}
    for name, shape in _layout(num_classes, in_channels).items():
        if name.endswith("weight"):
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            params[name] = stream.split(name).gaussian(shape) * math.sqrt(2.0 / fan_in)
        elif name.endswith("gamma"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    buffers = {n: (np.ones(s) if n.endswith("var") else np.zeros(s))
               for n, s in _buffer_layout().items()}
    return ModelState(arch, params, buffers)


@dataclass
class ForwardOutput:
    logits: Tensor
    log_probs: Tensor
    probs: Tensor
    features: np.ndarray  # Z_i captured at style_layer_index (post-injection if any)
    batch_stats: dict = field(default_factory=dict)  # prefix -> (mean, var) in batch mode


def forward(model: ModelState, batch, tape: Optional[Tape] = None,
            style_injection: Optional[Callable] = None,
            norm_mode: Optional[str] = None, param_tensors: Optional[dict] = None) -> ForwardOutput:
    """Run the network, optionally recording on `tape`.

    `style_injection(Z)` replaces the stage-`style_layer_index` output; the
    injected path is never recorded. `param_tensors` (name -> Tensor)
    overrides individual parameters, e.g. leaves of a caller's tape.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != model.architecture["in_channels"]:
        raise ContractError(f"batch must be (B, {model.architecture['in_channels']}, H, W), got {x.shape}")
    if tape is not None and style_injection is not None:
        raise ContractError("style injection paths are not differentiated; pass tape=None")
    mode = norm_mode or model.norm_mode
    if mode not in ("batch", "running"):
        raise ConfigurationError(f"unknown norm mode '{mode}'")
    if model.style_layer_index not in FEATURE_STAGES:
        raise ContractError(f"style_layer_index {model.style_layer_index} is not a feature-map stage")

    if tape is not None:
        P = {k: tape.parameter(k, v) for k, v in model.params.items()}
    else:
        P = {k: Tensor(v) for k, v in model.params.items()}
    if param_tensors:
        unknown = set(param_tensors) - set(model.params)
        if unknown:
            raise KeyError(f"unknown parameters {sorted(unknown)}")
        P.update(param_tensors)

    batch_stats = {}

    def norm(h, prefix):
        if mode == "batch":
            batch_stats[prefix] = (h.data.mean(axis=(0, 2, 3)), h.data.var(axis=(0, 2, 3)))
            h = ops.batch_normalize(h)
        else:
            h = ops.batch_normalize(h, mean=model.buffers[prefix + ".running_mean"],
                                    var=model.buffers[prefix + ".running_var"])
        return ops.channel_affine(h, P[prefix + ".gamma"], P[prefix + ".beta"])

    steps = (
        lambda h: ops.conv2d(h, P["conv1.weight"], P["conv1.bias"], padding=1),
        lambda h: norm(h, "norm1"),
        ops.relu,
        ops.avg_pool2d,
        lambda h: ops.conv2d(h, P["conv2.weight"], P["conv2.bias"], padding=1),
        lambda h: norm(h, "norm2"),
        ops.relu,
        ops.global_avg_pool,
        lambda h: ops.add(ops.matmul(h, P["fc.weight"]), P["fc.bias"]),
    )
    h = Tensor(x)
    features = None
    for i, step in enumerate(steps, start=1):
        h = step(h)
        if i == model.style_layer_index:
            if style_injection is not None:
                z = np.asarray(style_injection(h.data), dtype=np.float64)
                if z.shape != h.shape:
                    raise ContractError(f"style injection changed shape {h.shape} -> {z.shape}")
                h = Tensor(z)
            features = h.data
    log_probs = ops.log_softmax(h)
    probs = ops.exp(log_probs)
    return ForwardOutput(h, log_probs, probs, features, batch_stats)


def predict_proba(model, batch, norm_mode=None, style_injection=None) -> np.ndarray:
    return forward(model, batch, norm_mode=norm_mode, style_injection=style_injection).probs.data


def resolve_trainables(model: ModelState, policy: str = NORM_AFFINE_ONLY) -> list:
    if policy not in PARAM_POLICIES:
        raise ConfigurationError(f"unknown parameter policy '{policy}'")
    if policy == NORM_AFFINE_ONLY:
        names = [n for n in model.params if n.startswith("norm") and n.rsplit(".", 1)[1] in ("gamma", "beta")]
    else:
        names = list(model.params)
    if not names:
        raise ContractError("parameter policy resolves to an empty set")
    return names


@dataclass
class OptimizerState:
    lr: float = 5e-4
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)


def sgd_step(model: ModelState, grads: dict, opt: OptimizerState) -> None:
    """v <- momentum * v + g; p <- p - lr * v, for each parameter in `grads`."""
    for name, g in grads.items():
        p = model.params[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ContractError(f"gradient for '{name}' has shape {g.shape}, parameter {p.shape}")
        v = opt.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ContractError(f"velocity for '{name}' has shape {v.shape}, parameter {p.shape}")
        v = opt.momentum * v + g
        opt.velocity[name] = v
        model.params[name] = p - opt.lr * v


# -- pretraining ------------------------------------------------------------

@dataclass
class PretrainReport:
    init_loss: float
    epoch_losses: list
    source_accuracy: float
    val_accuracy: Optional[float] = None


def _cross_entropy(log_probs: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.zeros(log_probs.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return ops.scale(ops.reduce_sum(ops.mul(log_probs, onehot)), -1.0 / len(labels))


def dataset_loss(model, images, labels, batch_size=256, norm_mode="running") -> float:
    total = 0.0
    for s in range(0, len(labels), batch_size):
        out = forward(model, images[s:s + batch_size], norm_mode=norm_mode)
        lp = out.log_probs.data
        total -= lp[np.arange(lp.shape[0]), labels[s:s + batch_size]].sum()
    return total / len(labels)


def accuracy(model, images, labels, batch_size=256, norm_mode="running") -> float:
    hits = 0
    for s in range(0, len(labels), batch_size):
        p = forward(model, images[s:s + batch_size], norm_mode=norm_mode).probs.data
        hits += int((p.argmax(axis=1) == labels[s:s + batch_size]).sum())
    return hits / len(labels)


def pretrain(model: ModelState, images, labels, epochs: int, lr: float, seed: int = 0,
             batch_size: int = 64, momentum: float = 0.9, bn_momentum: float = 0.1,
             val=None):
    """Mini-batch cross-entropy training of all parameters.

    Normalization uses batch statistics while training and folds them into
    running averages; the returned model is in running-stats mode.
    Returns (model, PretrainReport).
    """
    model = model.clone()
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if epochs == 0:
        return model, PretrainReport(float("nan"), [], float("nan"))
    init_loss = dataset_loss(model, images, labels, norm_mode="batch")
    opt = OptimizerState(lr=lr, momentum=momentum)
    stream = Stream.from_seed(seed).split("pretrain")
    n = len(labels)
    epoch_losses = []
    for epoch in range(epochs):
        order = stream.split(f"epoch{epoch}").permutation(n)
        running = 0.0
        for s in range(0, n - 1, batch_size):
            idx = order[s:s + batch_size]
            if len(idx) < 2:
                continue
            xb = images[idx]
            tape = Tape()
            out = forward(model, xb, tape=tape, norm_mode="batch")
            loss = _cross_entropy(out.log_probs, labels[idx])
            if not math.isfinite(loss.item()):
                raise NumericOverflowError("pretrain", f"loss {loss.item()} at epoch {epoch}, offset {s}")
            running += loss.item() * len(idx)
            grads = backward(tape, loss, list(model.params))
            sgd_step(model, grads, opt)
            for prefix, (mu, var) in out.batch_stats.items():
                b = model.buffers
                b[prefix + ".running_mean"] = (1 - bn_momentum) * b[prefix + ".running_mean"] + bn_momentum * mu
                b[prefix + ".running_var"] = (1 - bn_momentum) * b[prefix + ".running_var"] + bn_momentum * var
        epoch_losses.append(running / n)
        logger.info("pretrain epoch %d: loss %.4f", epoch + 1, epoch_losses[-1])
    model.norm_mode = "running"
    report = PretrainReport(init_loss, epoch_losses, accuracy(model, images, labels))
    if val is not None:
        report.val_accuracy = accuracy(model, *val)
    return model, report


# -- checkpoints ------------------------------------------------------------

def _pack(arrays):
    return {k: {"shape": list(v.shape), "values": [float(x) for x in v.reshape(-1)]}
            for k, v in arrays.items()}


def checkpoint_text(model: ModelState) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "architecture": model.architecture,
        "params": _pack(model.params),
        "buffers": _pack(model.buffers),
        "norm_mode": model.norm_mode,
        "style_layer_index": model.style_layer_index,
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def save_checkpoint(model: ModelState, path) -> None:
    Path(path).write_text(checkpoint_text(model))


def _unpack(section, layout, what):
    if set(section) != set(layout):
        raise CheckpointError(f"{what} names {sorted(section)} do not match architecture")
    out = {}
    for name, shape in layout.items():
        entry = section[name]
        if tuple(entry["shape"]) != tuple(shape):
            raise CheckpointError(f"{what} '{name}' has shape {entry['shape']}, expected {list(shape)}")
        values = np.asarray(entry["values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise CheckpointError(f"{what} '{name}' has {values.size} values for shape {list(shape)}")
        out[name] = values.reshape(shape)
    return out


def load_checkpoint(path) -> ModelState:
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from None
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    if not isinstance(doc, dict):
        raise CheckpointError(f"malformed checkpoint {path}: not an object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    try:
        arch = doc["architecture"]
        if arch.get("kind") != ARCH_KIND:
            raise CheckpointError(f"unknown architecture {arch.get('kind')!r}")
        widths = tuple(arch["widths"])
        params = _unpack(doc["params"], _layout(arch["num_classes"], arch["in_channels"], widths), "param")
        buffers = _unpack(doc.get("buffers", {}), _buffer_layout(widths), "buffer")
        model = ModelState(arch, params, buffers, doc["norm_mode"], int(doc["style_layer_index"]))
    except (KeyError, TypeError, AttributeError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: missing or bad field {exc}") from None
    if model.norm_mode not in ("batch", "running") or model.style_layer_index not in FEATURE_STAGES:
        raise CheckpointError("checkpoint has invalid norm_mode or style_layer_index")
    return model
