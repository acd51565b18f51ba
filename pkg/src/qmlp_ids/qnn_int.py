"""Lowering of a trained fake-quant MLP to an integer-only threshold network.

Hidden layers become ``codes = rank(W_int @ x, thresholds)``: each neuron owns
a sorted list of ``2**act_bits - 1`` accumulator thresholds that absorb the
bias, the scales and the requantiser. Thresholds are found by integer binary
search against the same float requantiser the training forward uses, so the
integer path reproduces the fake-quant network exactly. The output layer
keeps integer weights and an integer bias on the accumulator grid; its
logits share one positive scale, so comparing the integers decides the class.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .qnn_train import DimensionMismatch, FakeQuantMlp, INT32_MAX, INT32_MIN
from .quant import QuantSpec, quantize

LOWERED_FORMAT = "qmlp-ids/lowered"
LOWERED_VERSION = 1
ACCUMULATOR_BITS = 64


class NotCalibrated(ValueError):
    pass


class LoweredModelError(ValueError):
    pass


@dataclass(frozen=True)
class AccumulatorBound:
    lo: int
    hi: int

    def fits(self, bits: int = ACCUMULATOR_BITS) -> bool:
        return -(1 << (bits - 1)) <= self.lo and self.hi <= (1 << (bits - 1)) - 1


@dataclass
class ThresholdLayer:
    weight: np.ndarray  # int64 (out, in)
    thresholds: np.ndarray  # int64 (out, 2**act_bits - 1), rows non-decreasing
    # float provenance, not used at inference time
    combined_scale: float = 0.0
    bias: np.ndarray | None = None
    act_scale: float = 0.0


@dataclass
class OutputLayer:
    weight: np.ndarray  # int64 (out, in)
    bias: np.ndarray  # int64, accumulator domain
    output_scale: float


@dataclass
class IntMlp:
    layer_dims: list[int]
    input_spec: QuantSpec
    weight_bits: int
    act_bits: int
    hidden: list[ThresholdLayer]
    output: OutputLayer
    source_sha256: str | None = None
    metadata: dict = field(default_factory=dict)

    def input_range(self, layer: int) -> tuple[int, int]:
        if layer == 0:
            return self.input_spec.qmin, self.input_spec.qmax
        return 0, (1 << self.act_bits) - 1

    def infer(self, codes) -> tuple[int, np.ndarray]:
        """Classify one 8-bit input vector: ``(class, integer logits)``; ties go to Normal."""
        x = np.asarray(codes, dtype=np.int64)
        if x.shape != (self.layer_dims[0],):
            raise DimensionMismatch(f"expected {self.layer_dims[0]} input codes, got {x.shape}")
        for layer in self.hidden:
            acc = layer.weight @ x
            x = (acc[:, None] >= layer.thresholds).sum(axis=1)
        logits = self.output.weight @ x + self.output.bias
        return int(logits[1] > logits[0]), logits

    def infer_batch(self, codes, chunk: int = 8192) -> tuple[np.ndarray, np.ndarray]:
        codes = np.asarray(codes, dtype=np.int64)
        if codes.ndim != 2 or codes.shape[1] != self.layer_dims[0]:
            raise DimensionMismatch(f"expected (n, {self.layer_dims[0]}) codes, got {codes.shape}")
        logits = np.empty((codes.shape[0], self.layer_dims[-1]), dtype=np.int64)
        for start in range(0, codes.shape[0], chunk):
            x = codes[start:start + chunk]
            for layer in self.hidden:
                acc = x @ layer.weight.T
                x = np.zeros_like(acc)
                for k in range(layer.thresholds.shape[1]):
                    x += acc >= layer.thresholds[:, k]
            logits[start:start + chunk] = x @ self.output.weight.T + self.output.bias
        return (logits[:, 1] > logits[:, 0]).astype(np.int64), logits

    # -- serialisation ------------------------------------------------------

    def to_dict(self) -> dict:
        layers = [{
            "kind": "threshold",
            "weight": l.weight.tolist(),
            "thresholds": l.thresholds.tolist(),
            "combined_scale": l.combined_scale,
            "bias": None if l.bias is None else l.bias.tolist(),
            "act_scale": l.act_scale,
        } for l in self.hidden]
        layers.append({
            "kind": "output",
            "weight": self.output.weight.tolist(),
            "bias": self.output.bias.tolist(),
            "output_scale": self.output.output_scale,
        })
        return {
            "format": LOWERED_FORMAT,
            "version": LOWERED_VERSION,
            "layer_dims": list(self.layer_dims),
            "input_quant": self.input_spec.to_dict(),
            "weight_bits": self.weight_bits,
            "act_bits": self.act_bits,
            "accumulator_bits": ACCUMULATOR_BITS,
            "accumulator_bounds": [[b.lo, b.hi] for b in accumulator_bounds(self)],
            "source_sha256": self.source_sha256,
            "layers": layers,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> IntMlp:
        try:
            if doc.get("format") != LOWERED_FORMAT:
                raise LoweredModelError(f"not a lowered model (format={doc.get('format')!r})")
            if doc.get("version") != LOWERED_VERSION:
                raise LoweredModelError(f"unsupported lowered-model version {doc.get('version')}")
            dims = [int(d) for d in doc["layer_dims"]]
            layers = doc["layers"]
            hidden = []
            for i, l in enumerate(layers[:-1]):
                if l["kind"] != "threshold":
                    raise LoweredModelError(f"layer {i} should be a threshold layer")
                hidden.append(ThresholdLayer(
                    np.array(l["weight"], dtype=np.int64).reshape(dims[i + 1], dims[i]),
                    np.array(l["thresholds"], dtype=np.int64).reshape(dims[i + 1], -1),
                    float(l["combined_scale"]),
                    None if l["bias"] is None else np.array(l["bias"], dtype=np.float64),
                    float(l["act_scale"]),
                ))
            out = layers[-1]
            if out["kind"] != "output":
                raise LoweredModelError("last layer should be the output layer")
            output = OutputLayer(
                np.array(out["weight"], dtype=np.int64).reshape(dims[-1], dims[-2]),
                np.array(out["bias"], dtype=np.int64).reshape(dims[-1]),
                float(out["output_scale"]),
            )
            model = cls(dims, QuantSpec.from_dict(doc["input_quant"]), int(doc["weight_bits"]),
                        int(doc["act_bits"]), hidden, output, doc.get("source_sha256"),
                        dict(doc.get("metadata", {})))
        except LoweredModelError:
            raise
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise LoweredModelError(f"invalid lowered model: {exc}") from exc
        validate(model)
        return model


def validate(model: IntMlp) -> None:
    """Check the structural invariants of a lowered model."""
    wmin, wmax = -(1 << (model.weight_bits - 1)), (1 << (model.weight_bits - 1)) - 1
    levels = (1 << model.act_bits) - 1
    if len(model.hidden) != len(model.layer_dims) - 2:
        raise LoweredModelError("hidden layer count does not match dims")
    for i, layer in enumerate(model.hidden):
        if layer.thresholds.shape != (model.layer_dims[i + 1], levels):
            raise LoweredModelError(f"layer {i}: expected {levels} thresholds per neuron")
        if np.any(np.diff(layer.thresholds, axis=1) < 0):
            raise LoweredModelError(f"layer {i}: threshold table not sorted")
    for w in [l.weight for l in model.hidden] + [model.output.weight]:
        if w.size and (w.min() < wmin or w.max() > wmax):
            raise LoweredModelError("weight code outside the weight quantiser range")
    if not (model.output.output_scale > 0 and math.isfinite(model.output.output_scale)):
        raise LoweredModelError("output scale must be positive")


def interval_bounds(weight: np.ndarray, lo: int, hi: int, bias=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-neuron min/max of ``weight @ x (+ bias)`` for every x in ``[lo, hi]**n``."""
    w = np.asarray(weight, dtype=np.int64)
    amin = np.minimum(w * lo, w * hi).sum(axis=1)
    amax = np.maximum(w * lo, w * hi).sum(axis=1)
    if bias is not None:
        amin = amin + bias
        amax = amax + bias
    return amin, amax


def accumulator_bounds(model: IntMlp) -> list[AccumulatorBound]:
    bounds = []
    for i, layer in enumerate(model.hidden):
        amin, amax = interval_bounds(layer.weight, *model.input_range(i))
        bounds.append(AccumulatorBound(int(amin.min()), int(amax.max())))
    amin, amax = interval_bounds(model.output.weight, *model.input_range(len(model.hidden)),
                                 bias=model.output.bias)
    bounds.append(AccumulatorBound(int(amin.min()), int(amax.max())))
    return bounds


def requantize_reference(acc, combined_scale: float, bias, act_spec: QuantSpec):
    """Output code of a hidden neuron for accumulator value(s) ``acc``."""
    pre = np.asarray(acc, dtype=np.float64) * combined_scale + bias
    return quantize(np.maximum(pre, 0.0), act_spec)


def derive_thresholds(combined_scale: float, bias: np.ndarray, act_spec: QuantSpec,
                      acc_lo: np.ndarray, acc_hi: np.ndarray) -> np.ndarray:
    """Smallest accumulator reaching each code, by binary search; ``acc_hi + 1`` if unreachable."""
    if not combined_scale > 0:
        raise ValueError("combined scale must be positive for a monotone requantiser")
    bias = np.asarray(bias, dtype=np.float64)
    n = bias.shape[0]
    levels = act_spec.qmax
    target = np.broadcast_to(np.arange(1, levels + 1), (n, levels))
    lo = np.repeat(np.asarray(acc_lo, dtype=np.int64)[:, None], levels, axis=1)
    hi = np.repeat(np.asarray(acc_hi, dtype=np.int64)[:, None] + 1, levels, axis=1)
    b = np.repeat(bias[:, None], levels, axis=1)
    while np.any(lo < hi):
        active = lo < hi
        mid = (lo + hi) // 2
        reached = requantize_reference(mid, combined_scale, b, act_spec) >= target
        hi = np.where(active & reached, mid, hi)
        lo = np.where(active & ~reached, mid + 1, lo)
    return lo


def lower(model: FakeQuantMlp, source_sha256: str | None = None) -> IntMlp:
    if not model.quantized:
        raise NotCalibrated("cannot lower an unquantised model")
    if not model.calibrated:
        raise NotCalibrated("activation scales are not calibrated")
    sx = model.input_spec.scale
    in_lo, in_hi = model.input_spec.qmin, model.input_spec.qmax
    hidden = []
    for i in range(model.n_layers - 1):
        ws = model.weight_spec(i)
        wc = quantize(model.weights[i], ws)
        combined = ws.scale * sx  # same expression and order as the training forward
        act = model.act_spec(i)
        acc_lo, acc_hi = interval_bounds(wc, in_lo, in_hi)
        thresholds = derive_thresholds(combined, model.biases[i], act, acc_lo, acc_hi)
        hidden.append(ThresholdLayer(wc, thresholds, combined, model.biases[i].copy(), act.scale))
        sx = act.scale
        in_lo, in_hi = 0, act.qmax
    last = model.n_layers - 1
    ws = model.weight_spec(last)
    wc = quantize(model.weights[last], ws)
    combined = ws.scale * sx
    b_int = np.clip(np.rint(model.biases[last] / combined), INT32_MIN, INT32_MAX).astype(np.int64)
    out = IntMlp(list(model.layer_dims), model.input_spec, model.weight_bits, model.act_bits,
                 hidden, OutputLayer(wc, b_int, combined), source_sha256)
    validate(out)
    return out


@dataclass
class EquivalenceReport:
    samples: int
    mismatches: int
    max_logit_error: float
    witnesses: list[list[int]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.mismatches == 0


def verify_equivalence(model: FakeQuantMlp, int_model: IntMlp, n_samples: int,
                       seed: int = 0, chunk: int = 10_000, max_witnesses: int = 5) -> EquivalenceReport:
    """Compare integer and fake-quant classification on random 8-bit inputs.

    ``max_logit_error`` is ``max |float logit - int logit * output_scale|``.
    """
    rng = np.random.default_rng(seed)
    lo, hi = int_model.input_spec.qmin, int_model.input_spec.qmax
    mismatches, max_err, witnesses = 0, 0.0, []
    remaining = n_samples
    while remaining > 0:
        n = min(chunk, remaining)
        remaining -= n
        codes = rng.integers(lo, hi + 1, size=(n, int_model.layer_dims[0]), dtype=np.int64)
        float_logits = np.atleast_2d(model.forward_codes(codes))
        float_cls = (float_logits[:, 1] > float_logits[:, 0]).astype(np.int64)
        int_cls, int_logits = int_model.infer_batch(codes)
        bad = np.flatnonzero(float_cls != int_cls)
        mismatches += len(bad)
        for j in bad[:max(0, max_witnesses - len(witnesses))]:
            witnesses.append(codes[j].tolist())
        err = np.abs(float_logits - int_logits * int_model.output.output_scale)
        max_err = max(max_err, float(err.max()))
    return EquivalenceReport(n_samples, mismatches, max_err, witnesses)


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_lowered(model: IntMlp, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), sort_keys=True) + "\n")


def load_lowered(path: str | Path) -> IntMlp:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise LoweredModelError(f"lowered model is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise LoweredModelError("lowered model root must be an object")
    return IntMlp.from_dict(doc)
