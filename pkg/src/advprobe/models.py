"""Reference classifier architectures and the probabilities-only oracle.

Two small CNNs share one runtime: a surrogate whose gradients are exposed
(`Classifier.input_gradient`) and a target hidden behind `BlackBoxOracle`,
which reveals nothing but a probability vector and counts every query.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore
from .errors import ConsistencyError, DimensionError, DomainError, FormatError, NumericError

WHITEBOX = "whitebox"
BLACKBOX = "blackbox"

_LAYER_KINDS = {"conv", "relu", "maxpool", "dropout", "flatten", "dense"}


@dataclass(frozen=True)
class ArchDescriptor:
    """Structural description of a network: enough to initialize, run and
    validate weights against."""

    name: str
    input_side: int
    channels: int
    num_classes: int
    layers: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(
            {
                "name": self.name,
                "input_side": self.input_side,
                "channels": self.channels,
                "num_classes": self.num_classes,
                "layers": self.layers,
            },
            indent=2,
            sort_keys=True,
        )

    @staticmethod
    def from_json(text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise FormatError(f"descriptor is not valid JSON: {e}") from e
        required = {"name", "input_side", "channels", "num_classes", "layers"}
        if not isinstance(doc, dict) or set(doc) != required:
            raise FormatError(f"descriptor must have exactly the keys {sorted(required)}")
        for spec in doc["layers"]:
            if not isinstance(spec, dict) or spec.get("kind") not in _LAYER_KINDS:
                raise FormatError(f"unknown layer spec {spec!r}")
        desc = ArchDescriptor(
            name=doc["name"],
            input_side=int(doc["input_side"]),
            channels=int(doc["channels"]),
            num_classes=int(doc["num_classes"]),
            layers=doc["layers"],
        )
        if desc.num_classes < 2 or desc.input_side < 1 or desc.channels < 1:
            raise FormatError("descriptor has degenerate extents")
        return desc


def whitebox_arch(num_classes, input_side=150, channels=3):
    """Surrogate network: two conv/relu/pool stages and a dense head."""
    return ArchDescriptor(
        name=WHITEBOX,
        input_side=input_side,
        channels=channels,
        num_classes=num_classes,
        layers=[
            {"kind": "conv", "filters": 8, "size": 3, "stride": 1},
            {"kind": "relu"},
            {"kind": "maxpool", "window": 2},
            {"kind": "conv", "filters": 16, "size": 3, "stride": 1},
            {"kind": "relu"},
            {"kind": "maxpool", "window": 2},
            {"kind": "flatten"},
            {"kind": "dense", "units": num_classes},
        ],
    )


def blackbox_arch(num_classes, input_side=150, channels=3):
    """Target network: same conv trunk as the surrogate but with an extra
    pool stage and dropout after every pool (train-time only)."""
    return ArchDescriptor(
        name=BLACKBOX,
        input_side=input_side,
        channels=channels,
        num_classes=num_classes,
        layers=[
            {"kind": "conv", "filters": 8, "size": 3, "stride": 1},
            {"kind": "relu"},
            {"kind": "maxpool", "window": 2},
            {"kind": "dropout", "rate": 0.25},
            {"kind": "conv", "filters": 16, "size": 3, "stride": 1},
            {"kind": "relu"},
            {"kind": "maxpool", "window": 2},
            {"kind": "dropout", "rate": 0.25},
            {"kind": "maxpool", "window": 2},
            {"kind": "dropout", "rate": 0.25},
            {"kind": "flatten"},
            {"kind": "dense", "units": num_classes},
        ],
    )


class Classifier:
    """A trained network with full access: probabilities and input gradients."""

    def __init__(self, weights, descriptor):
        tensorcore.validate_weights(weights, descriptor)
        self.weights = weights
        self.descriptor = descriptor

    def _checked(self, x):
        x = np.asarray(x)
        d = self.descriptor
        want = (d.input_side, d.input_side, d.channels)
        if tuple(x.shape) != want:
            raise DimensionError(f"input shape {x.shape}, model expects {want}")
        if not np.all(np.isfinite(x)):
            raise NumericError("input contains non-finite pixels")
        if float(x.min()) < 0.0 or float(x.max()) > 1.0:
            raise DomainError("pixel values must lie in [0, 1]")
        return x

    def predict_probs(self, x):
        return tensorcore.forward_probs(self.weights, self.descriptor, self._checked(x))

    def predict(self, x):
        return int(np.argmax(self.predict_probs(x)))

    def input_gradient(self, x, y):
        """Gradient of the true-class cross-entropy w.r.t. the input pixels."""
        return tensorcore.backward_input_gradient(
            self.weights, self.descriptor, self._checked(x), y
        )


class BlackBoxOracle:
    """Query-counted facade over a classifier.

    The only model access it offers is predict_probs; weights, gradients
    and the underlying classifier are unreachable through the public
    surface. Each uncached call bumps query_count by one.
    """

    def __init__(self, classifier, cache_predictions=False):
        self._classifier = classifier
        self._cache = {} if cache_predictions else None
        self.query_count = 0
        self.num_classes = classifier.descriptor.num_classes

    def predict_probs(self, x):
        if self._cache is not None:
            key = np.ascontiguousarray(x, dtype=np.float32).tobytes()
            hit = self._cache.get(key)
            if hit is not None:
                return hit
            p = self._classifier.predict_probs(x)
            self.query_count += 1
            self._cache[key] = p
            return p
        p = self._classifier.predict_probs(x)
        self.query_count += 1
        return p


def most_confused_class(probs, true_label):
    """Index of the highest-probability class other than the true one;
    ties break toward the lowest class index."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 2:
        raise DomainError(f"need at least 2 classes, got shape {p.shape}")
    if not 0 <= true_label < p.shape[0]:
        raise IndexError(f"label {true_label} out of range for {p.shape[0]} classes")
    masked = p.copy()
    masked[true_label] = -np.inf
    return int(np.argmax(masked))


# ---------------------------------------------------------------------------
# on-disk pairing of weights + descriptor


def descriptor_path(weights_path):
    """Sibling JSON descriptor path for a weight file."""
    s = str(weights_path)
    base = s[: -len(".advw")] if s.endswith(".advw") else s
    return base + ".json"


def save_model(classifier, weights_path):
    """Write the weight file and its sibling descriptor JSON."""
    tensorcore.save_weights(classifier.weights, weights_path)
    with open(descriptor_path(weights_path), "w", encoding="utf-8") as f:
        f.write(classifier.descriptor.to_json())
        f.write("\n")


def load_model(weights_path):
    """Load a Classifier from a weight file plus its sibling descriptor."""
    weights = tensorcore.load_weights(weights_path)
    try:
        with open(descriptor_path(weights_path), "r", encoding="utf-8") as f:
            desc = ArchDescriptor.from_json(f.read())
    except FileNotFoundError as e:
        raise ConsistencyError(
            f"missing descriptor {descriptor_path(weights_path)} for {weights_path}"
        ) from e
    return Classifier(weights, desc)
