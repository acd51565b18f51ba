"""Fake-quantised MLP and quantisation-aware training in plain numpy.

Weights are 4-bit signed per-tensor (scale = maxabs / qmax, recomputed from
the real-valued master copy on every forward), hidden activations 4-bit
unsigned after ReLU, input 8-bit unsigned. Gradients pass the quantisers via
a clipped straight-through estimator.

Every affine layer is evaluated as ``acc * (s_w * s_x) + b`` where ``acc`` is
the exact integer dot product of weight and input codes. The lowered integer
model reproduces that float expression bit-for-bit, which is what makes the
threshold lowering exact.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .can_ingest import INPUT_BITS, INPUT_SCALE
from .quant import SCALE_FLOOR, QuantSpec, maxabs_scale, qrange

log = logging.getLogger(__name__)

DEFAULT_DIMS = (40, 64, 32, 2)
CHECKPOINT_FORMAT = "qmlp-ids/checkpoint"
CHECKPOINT_VERSION = 1
INPUT_SPEC = QuantSpec(INPUT_BITS, signed=False, scale=INPUT_SCALE)
INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1


class DimensionMismatch(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class DivergenceDetected(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 256
    learning_rate: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # exponent on inverse class frequency; 0 disables weighting
    class_weighting: float = 1.0
    act_ema_decay: float = 0.9
    calib_samples: int = 8192

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError(f"invalid training config: {self}")
        if not 0 <= self.act_ema_decay < 1:
            raise ValueError("act_ema_decay must be in [0, 1)")


@dataclass
class FakeQuantMlp:
    layer_dims: list[int]
    weights: list[np.ndarray]  # (out, in), real-valued master copies
    biases: list[np.ndarray]
    weight_bits: int = 4
    act_bits: int = 4
    input_spec: QuantSpec = INPUT_SPEC
    act_scales: list[float | None] = field(default_factory=list)
    quantized: bool = True
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        dims = list(self.layer_dims)
        if len(dims) < 2:
            raise DimensionMismatch("need at least input and output dims")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise DimensionMismatch("one weight matrix and bias per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise DimensionMismatch(
                    f"layer {i}: weight {w.shape} / bias {b.shape} vs dims {dims[i]}->{dims[i + 1]}"
                )
        if not self.act_scales:
            self.act_scales = [None] * (len(dims) - 2)
        if len(self.act_scales) != len(dims) - 2:
            raise DimensionMismatch("one activation scale per hidden layer")
        self.layer_dims = dims

    @classmethod
    def init(cls, layer_dims=DEFAULT_DIMS, seed: int = 0, weight_bits: int = 4,
             act_bits: int = 4, quantized: bool = True) -> FakeQuantMlp:
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            lim = math.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(list(layer_dims), weights, biases, weight_bits, act_bits,
                   quantized=quantized)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def weight_spec(self, layer: int) -> QuantSpec:
        return QuantSpec(self.weight_bits, True,
                         maxabs_scale(self.weights[layer], self.weight_bits))

    def act_spec(self, layer: int) -> QuantSpec:
        scale = self.act_scales[layer]
        if scale is None:
            raise ValueError(f"activation scale of layer {layer} not calibrated")
        return QuantSpec(self.act_bits, False, scale)

    @property
    def calibrated(self) -> bool:
        return all(s is not None for s in self.act_scales)

    def copy(self) -> FakeQuantMlp:
        return copy.deepcopy(self)

    # -- forward / backward -------------------------------------------------

    def _run(self, x, *, codes_in: bool, cache: bool = False,
             calibrate: bool = False, ema_decay: float | None = None):
        x = np.asarray(x)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.layer_dims[0]:
            raise DimensionMismatch(f"input width {x.shape[1]} != {self.layer_dims[0]}")
        steps = []
        if self.quantized:
            if codes_in:
                xc = x.astype(np.float64)
            else:
                xc = np.clip(np.rint(x.astype(np.float64) / self.input_spec.scale),
                             self.input_spec.qmin, self.input_spec.qmax)
            sx = self.input_spec.scale
            _, a_qmax = qrange(self.act_bits, False)
        else:
            xe = (x.astype(np.float64) * self.input_spec.scale if codes_in
                  else x.astype(np.float64))
        out = None
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            last = i == self.n_layers - 1
            if not self.quantized:
                pre = xe @ w.T + b
                if last:
                    out = pre
                    if cache:
                        steps.append((xe, w, np.ones_like(w), None))
                else:
                    act_mask = (pre > 0).astype(np.float64)
                    if cache:
                        steps.append((xe, w, np.ones_like(w), act_mask))
                    xe = pre * act_mask
                continue

            ws = self.weight_spec(i)
            wc = np.clip(np.rint(w / ws.scale), ws.qmin, ws.qmax)
            acc = xc @ wc.T  # exact: integer-valued float64 well below 2**53
            combined = ws.scale * sx
            x_eff = xc * sx
            wq = wc * ws.scale
            w_mask = ((w >= ws.qmin * ws.scale) & (w <= ws.qmax * ws.scale)).astype(np.float64)
            if last:
                b_int = np.clip(np.rint(b / combined), INT32_MIN, INT32_MAX)
                out = (acc + b_int) * combined
                if cache:
                    steps.append((x_eff, wq, w_mask, None))
                continue
            pre = acc * combined + b
            a = np.maximum(pre, 0.0)
            if calibrate:
                self.act_scales[i] = max(float(a.max()) / a_qmax, SCALE_FLOOR)
            elif ema_decay is not None:
                target = max(float(a.max()) / a_qmax, SCALE_FLOOR)
                self.act_scales[i] += (1.0 - ema_decay) * (target - self.act_scales[i])
            sa = self.act_spec(i).scale
            if cache:
                act_mask = ((pre > 0) & (a <= a_qmax * sa)).astype(np.float64)
                steps.append((x_eff, wq, w_mask, act_mask))
            xc = np.clip(np.rint(a / sa), 0, a_qmax)
            sx = sa
        if single:
            out = out[0]
        return (out, steps) if cache else out

    def forward(self, features) -> np.ndarray:
        """Logits for float features in [0, 1] (one vector or a batch)."""
        return self._run(features, codes_in=False)

    def forward_codes(self, codes) -> np.ndarray:
        """Logits for 8-bit input codes."""
        return self._run(codes, codes_in=True)

    def predict_codes(self, codes) -> np.ndarray:
        logits = np.atleast_2d(self.forward_codes(codes))
        # ties go to Normal
        return (logits[:, 1] > logits[:, 0]).astype(np.int64)

    def backward(self, steps, dlogits: np.ndarray):
        """Gradients ``[(dW, db), ...]`` per layer from a cached forward."""
        grads = [None] * len(steps)
        dout = dlogits
        for i in range(len(steps) - 1, -1, -1):
            x_eff, wq, w_mask, _ = steps[i]
            dw = (dout.T @ x_eff) * w_mask
            db = dout.sum(axis=0)
            grads[i] = (dw, db)
            if i > 0:
                dout = (dout @ wq) * steps[i - 1][3]
        return grads

    # -- serialisation ------------------------------------------------------

    def to_dict(self) -> dict:
        layers = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            layers.append({
                "weight": w.tolist(),
                "bias": b.tolist(),
                "weight_quant": self.weight_spec(i).to_dict(),
                "act_quant": (self.act_spec(i).to_dict()
                              if i < self.n_layers - 1 and self.act_scales[i] is not None
                              else None),
            })
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "layer_dims": list(self.layer_dims),
            "weight_bits": self.weight_bits,
            "act_bits": self.act_bits,
            "quantized": self.quantized,
            "input_quant": self.input_spec.to_dict(),
            "layers": layers,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> FakeQuantMlp:
        try:
            if doc.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"not a checkpoint (format={doc.get('format')!r})")
            if doc.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {doc.get('version')}")
            dims = [int(d) for d in doc["layer_dims"]]
            layers = doc["layers"]
            weights = [np.array(l["weight"], dtype=np.float64).reshape(-1, dims[i])
                       for i, l in enumerate(layers)]
            biases = [np.array(l["bias"], dtype=np.float64) for l in layers]
            act_scales = [None if l["act_quant"] is None else float(l["act_quant"]["scale"])
                          for l in layers[:-1]]
            model = cls(dims, weights, biases, int(doc["weight_bits"]), int(doc["act_bits"]),
                        QuantSpec.from_dict(doc["input_quant"]), act_scales,
                        bool(doc.get("quantized", True)), dict(doc.get("metadata", {})))
        except CheckpointError:
            raise
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise CheckpointError(f"invalid checkpoint: {exc}") from exc
        for w, b in zip(model.weights, model.biases):
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise CheckpointError("non-finite parameter in checkpoint")
        if any(s is not None and not (s > 0 and math.isfinite(s)) for s in act_scales):
            raise CheckpointError("activation scales must be positive")
        return model


def save_checkpoint(model: FakeQuantMlp, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> FakeQuantMlp:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise CheckpointError("checkpoint root must be an object")
    return FakeQuantMlp.from_dict(doc)


# -- training ----------------------------------------------------------------

def class_weights(labels: np.ndarray, factor: float = 1.0, n_classes: int = 2) -> np.ndarray:
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    w = np.ones(n_classes)
    present = counts > 0
    w[present] = (len(labels) / (n_classes * counts[present])) ** factor
    return w


def weighted_cross_entropy(logits: np.ndarray, labels: np.ndarray, weights: np.ndarray):
    """Class-weighted mean softmax cross-entropy and its gradient w.r.t. logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    sw = weights[labels]
    total = sw.sum()
    n = len(labels)
    loss = float(-(sw * logp[np.arange(n), labels]).sum() / total)
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad *= (sw / total)[:, None]
    return loss, grad


def loss_and_grads(model: FakeQuantMlp, codes: np.ndarray, labels: np.ndarray,
                   weights: np.ndarray | None = None):
    if weights is None:
        weights = np.ones(2)
    logits, steps = model._run(codes, codes_in=True, cache=True)
    loss, dlogits = weighted_cross_entropy(logits, labels, weights)
    return loss, model.backward(steps, dlogits)


def calibrate_scales(model: FakeQuantMlp, sample_codes: np.ndarray) -> FakeQuantMlp:
    """Set activation scales to observed max / qmax (weight scales track maxabs)."""
    if model.quantized:
        model._run(np.atleast_2d(sample_codes), codes_in=True, calibrate=True)
    return model


@dataclass
class TrainTrace:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)


def train(model: FakeQuantMlp, codes: np.ndarray, labels: np.ndarray,
          config: TrainConfig | None = None) -> tuple[FakeQuantMlp, TrainTrace]:
    """Train on 8-bit input codes with Adam; returns a new model and per-epoch trace.

    The trace records full-training-set loss and accuracy after each epoch.
    """
    config = config or TrainConfig()
    codes = np.asarray(codes)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise EmptyDataset("no training samples")
    if codes.shape[0] != n:
        raise DimensionMismatch("codes and labels differ in length")
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    cw = class_weights(labels, config.class_weighting)

    calib = codes if n <= config.calib_samples else codes[np.sort(
        rng.choice(n, config.calib_samples, replace=False))]
    calibrate_scales(model, calib)

    params = [p for pair in zip(model.weights, model.biases) for p in pair]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    step = 0
    trace = TrainTrace()
    ema = config.act_ema_decay if model.quantized else None
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            logits, steps = model._run(codes[idx], codes_in=True, cache=True,
                                       ema_decay=ema)
            loss, dlogits = weighted_cross_entropy(logits, labels[idx], cw)
            if not math.isfinite(loss):
                raise DivergenceDetected(f"loss became {loss} in epoch {epoch}")
            grads = model.backward(steps, dlogits)
            flat = [g for pair in grads for g in pair]
            step += 1
            lr_t = config.learning_rate * math.sqrt(1 - config.beta2**step) / (1 - config.beta1**step)
            for p, g, mi, vi in zip(params, flat, m, v):
                mi *= config.beta1
                mi += (1 - config.beta1) * g
                vi *= config.beta2
                vi += (1 - config.beta2) * g * g
                p -= lr_t * mi / (np.sqrt(vi) + config.eps)
        logits = np.atleast_2d(model.forward_codes(codes))
        loss, _ = weighted_cross_entropy(logits, labels, cw)
        if not math.isfinite(loss):
            raise DivergenceDetected(f"loss became {loss} after epoch {epoch}")
        acc = float(np.mean((logits[:, 1] > logits[:, 0]).astype(np.int64) == labels))
        trace.loss.append(loss)
        trace.accuracy.append(acc)
        log.info("epoch %d loss %.6f acc %.4f", epoch + 1, loss, acc)
    model.metadata.update({"seed": config.seed, "epochs": config.epochs,
                           "train_config": asdict(config), "train_samples": n})
    return model, trace


@dataclass
class SweepRow:
    bits: int
    precision: float
    recall: float
    f1: float
    fnr: float


def dse_sweep(bit_widths, train_codes, train_labels, test_codes, test_labels,
              config: TrainConfig | None = None, layer_dims=DEFAULT_DIMS) -> list[SweepRow]:
    """Train one model per weight/activation bit width and score F1 on the holdout."""
    from .evaluation import confusion, metrics

    bit_widths = sorted(set(int(b) for b in bit_widths))
    if not bit_widths:
        raise ValueError("bit width list is empty")
    config = config or TrainConfig()
    rows = []
    for bits in bit_widths:
        model = FakeQuantMlp.init(layer_dims, seed=config.seed, weight_bits=bits, act_bits=bits)
        model, _ = train(model, train_codes, train_labels, config)
        m = metrics(confusion(model.predict_codes(test_codes), test_labels))
        rows.append(SweepRow(bits, m.precision, m.recall, m.f1, m.fnr))
    return rows
