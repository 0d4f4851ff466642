"""Dense feed-forward nets: forward/backward, losses, margins, checkpoints.

Hidden pre-activations can be exactly normalized (divided by their Euclidean
norm, no epsilon) to make the network scale invariant in its trainable
weights; that mode requires a frozen readout and no biases.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, InvalidDataset, NormalizationSingularity

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class NetSpec:
    layer_dims: tuple
    activation: str = "relu"
    normalize_hidden: bool = False
    frozen_readout: bool = False
    bias_enabled: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if len(self.layer_dims) < 2:
            raise ConfigError("need at least one layer (two dims)")
        if any(d < 1 for d in self.layer_dims):
            raise ConfigError("all layer dims must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.normalize_hidden and (self.bias_enabled or not self.frozen_readout):
            raise ConfigError(
                "normalize_hidden requires bias_enabled=False and frozen_readout=True"
            )

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def trainable_layers(self) -> tuple:
        n = self.num_layers
        return tuple(range(n - 1)) if self.frozen_readout else tuple(range(n))

    def to_dict(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "activation": self.activation,
            "normalize_hidden": self.normalize_hidden,
            "frozen_readout": self.frozen_readout,
            "bias_enabled": self.bias_enabled,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        return cls(
            layer_dims=tuple(d["layer_dims"]),
            activation=d.get("activation", "relu"),
            normalize_hidden=bool(d.get("normalize_hidden", False)),
            frozen_readout=bool(d.get("frozen_readout", False)),
            bias_enabled=bool(d.get("bias_enabled", False)),
        )

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    """Weights plus the matching initialization snapshot; immutable by convention."""

    weights: list
    init_weights: list
    biases: list = field(default_factory=list)
    init_biases: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            [w.copy() for w in self.weights],
            [w.copy() for w in self.init_weights],
            [b.copy() for b in self.biases],
            [b.copy() for b in self.init_biases],
            dict(self.meta),
        )


@dataclass
class MarginStats:
    margins: np.ndarray
    margin_gamma: float
    n: int
    percentile: float = 0.10


def init_checkpoint(spec: NetSpec, rng, meta=None, std_scale: float = 1.0) -> Checkpoint:
    """Fan-in-scaled Gaussian init (std = std_scale*sqrt(2/fan_in)); zero biases."""
    weights = []
    for i in range(spec.num_layers):
        fan_in, fan_out = spec.layer_dims[i], spec.layer_dims[i + 1]
        std = std_scale * np.sqrt(2.0 / fan_in)
        weights.append(rng.gaussians(fan_out * fan_in).reshape(fan_out, fan_in) * std)
    biases = (
        [np.zeros(spec.layer_dims[i + 1]) for i in range(spec.num_layers)]
        if spec.bias_enabled
        else []
    )
    return Checkpoint(
        weights=weights,
        init_weights=[w.copy() for w in weights],
        biases=biases,
        init_biases=[b.copy() for b in biases],
        meta=dict(meta or {}, spec_hash=spec.hash(), epoch=0),
    )


def _affine(spec: NetSpec, W, b, A):
    Z = A @ W.T
    if b is not None:
        Z = Z + b
    return Z


def forward_batch(spec: NetSpec, weights, biases, X: np.ndarray) -> np.ndarray:
    """Logits for a batch X (n, d0). Raises NormalizationSingularity on zero norm."""
    A = X
    for i in range(spec.num_layers):
        b = biases[i] if biases else None
        Z = _affine(spec, weights[i], b, A)
        if i < spec.num_layers - 1:
            if spec.normalize_hidden:
                r = np.linalg.norm(Z, axis=1, keepdims=True)
                if np.any(r == 0.0):
                    raise NormalizationSingularity(
                        f"zero pre-activation norm at hidden layer {i}"
                    )
                Z = Z / r
            A = np.maximum(Z, 0.0) if spec.activation == "relu" else Z
        else:
            A = Z
    return A


def forward(spec: NetSpec, ckpt: Checkpoint, x) -> np.ndarray:
    """Logits for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.layer_dims[0],):
        raise ConfigError(f"input length {x.shape} != {spec.layer_dims[0]}")
    return forward_batch(spec, ckpt.weights, ckpt.biases, x[None, :])[0]


def _softmax_ce(logits: np.ndarray, y: np.ndarray):
    """(per-example CE, softmax probabilities), numerically stable."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    ce = logz - shifted[np.arange(len(y)), y]
    probs = np.exp(shifted - logz[:, None])
    return ce, probs


def backward_batch(spec: NetSpec, weights, biases, X: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over the batch and its gradient in trainable params.

    Returns (flat gradient, loss). Frozen readout weights are excluded from the
    gradient, matching the trainable flatten order.
    """
    n = len(y)
    acts = [X]  # inputs to each layer
    norm_cache = []  # (normalized preact, row norms) per hidden layer
    A = X
    for i in range(spec.num_layers):
        b = biases[i] if biases else None
        Z = _affine(spec, weights[i], b, A)
        if i < spec.num_layers - 1:
            if spec.normalize_hidden:
                r = np.linalg.norm(Z, axis=1, keepdims=True)
                if np.any(r == 0.0):
                    raise NormalizationSingularity(
                        f"zero pre-activation norm at hidden layer {i}"
                    )
                Z = Z / r
                norm_cache.append((Z.copy(), r))
            else:
                norm_cache.append(None)
            A = np.maximum(Z, 0.0) if spec.activation == "relu" else Z
            acts.append(A)
        else:
            logits = Z
    ce, probs = _softmax_ce(logits, y)
    loss = float(ce.mean())

    dZ = probs
    dZ[np.arange(n), y] -= 1.0
    dZ /= n
    grads_w = [None] * spec.num_layers
    grads_b = [None] * spec.num_layers
    for i in range(spec.num_layers - 1, -1, -1):
        grads_w[i] = dZ.T @ acts[i]
        if biases:
            grads_b[i] = dZ.sum(axis=0)
        if i == 0:
            break
        dA = dZ @ weights[i]
        Zn = norm_cache[i - 1]
        if spec.activation == "relu":
            ref = Zn[0] if Zn is not None else acts[i]
            dA = dA * (ref > 0.0)
        if Zn is not None:
            zhat, r = Zn
            dA = (dA - zhat * (dA * zhat).sum(axis=1, keepdims=True)) / r
        dZ = dA
    flat = flatten_params(
        spec,
        [grads_w[i] for i in range(spec.num_layers)],
        [grads_b[i] for i in range(spec.num_layers)] if biases else [],
    )
    return flat, loss


def flatten_params(spec: NetSpec, weights, biases) -> np.ndarray:
    """Trainable parameter vector: matrices in layer order (row-major), then biases."""
    parts = [np.asarray(weights[i]).ravel() for i in spec.trainable_layers]
    if biases:
        parts += [np.asarray(biases[i]).ravel() for i in spec.trainable_layers]
    return np.concatenate(parts) if parts else np.zeros(0)


def unflatten_params(spec: NetSpec, flat: np.ndarray, template: Checkpoint) -> Checkpoint:
    """Inverse of flatten_params; non-trainable layers are copied from template."""
    weights = [w.copy() for w in template.weights]
    biases = [b.copy() for b in template.biases]
    pos = 0
    for i in spec.trainable_layers:
        size = weights[i].size
        weights[i] = flat[pos : pos + size].reshape(weights[i].shape).copy()
        pos += size
    if biases:
        for i in spec.trainable_layers:
            size = biases[i].size
            biases[i] = flat[pos : pos + size].copy()
            pos += size
    if pos != flat.size:
        raise ConfigError("flat vector length does not match spec")
    return Checkpoint(
        weights=weights,
        init_weights=[w.copy() for w in template.init_weights],
        biases=biases,
        init_biases=[b.copy() for b in template.init_biases],
        meta=dict(template.meta),
    )


def scale_checkpoint(ckpt: Checkpoint, spec: NetSpec, c: float) -> Checkpoint:
    """Scale trainable weights by c (frozen readout untouched)."""
    out = ckpt.copy()
    for i in spec.trainable_layers:
        out.weights[i] = out.weights[i] * c
        if out.biases:
            out.biases[i] = out.biases[i] * c
    return out


def predict(spec: NetSpec, ckpt: Checkpoint, X: np.ndarray) -> np.ndarray:
    return forward_batch(spec, ckpt.weights, ckpt.biases, X).argmax(axis=1)


def evaluate_wb(spec: NetSpec, weights, biases, X: np.ndarray, y: np.ndarray):
    """(accuracy, mean cross-entropy) from raw parameter lists."""
    logits = forward_batch(spec, weights, biases, X)
    ce, _ = _softmax_ce(logits, y)
    acc = float((logits.argmax(axis=1) == y).mean())
    return acc, float(ce.mean())


def evaluate(spec: NetSpec, ckpt: Checkpoint, X: np.ndarray, y: np.ndarray):
    """(accuracy, mean cross-entropy) on (X, y)."""
    return evaluate_wb(spec, ckpt.weights, ckpt.biases, X, y)


def margins(spec: NetSpec, ckpt: Checkpoint, X: np.ndarray, y: np.ndarray,
            percentile: float = 0.10, num_classes=None) -> MarginStats:
    """Per-example margins f(x)[y] - max_{j!=y} f(x)[j] and their percentile gamma.

    Percentile convention: sort ascending, take index floor(p*(n-1)), no
    interpolation.
    """
    if len(y) == 0:
        raise InvalidDataset("empty dataset")
    if num_classes is not None and num_classes < 2:
        raise InvalidDataset("margins need >= 2 classes")
    logits = forward_batch(spec, ckpt.weights, ckpt.biases, X)
    if logits.shape[1] < 2:
        raise InvalidDataset("margins need >= 2 output classes")
    idx = np.arange(len(y))
    true_vals = logits[idx, y]
    masked = logits.copy()
    masked[idx, y] = -np.inf
    margin_vals = true_vals - masked.max(axis=1)
    order = np.sort(margin_vals)
    gamma = float(order[int(np.floor(percentile * (len(y) - 1)))])
    return MarginStats(margins=margin_vals, margin_gamma=gamma, n=len(y),
                       percentile=percentile)


# --- checkpoint files -------------------------------------------------------
#
# Binary container: one JSON header line, then little-endian float64 payload in
# flatten order (all layers: weights, biases, init_weights, init_biases).  A
# pure-JSON variant ("payload": "inline") is accepted for tiny nets.

_CKPT_FORMAT = "fragaudit-ckpt-v1"


def save_checkpoint(path, spec: NetSpec, ckpt: Checkpoint, inline: bool = False) -> None:
    header = {
        "format": _CKPT_FORMAT,
        "spec": spec.to_dict(),
        "shapes": [list(w.shape) for w in ckpt.weights],
        "meta": ckpt.meta,
        "payload": "inline" if inline else "binary-le-f64",
    }
    arrays = (
        list(ckpt.weights) + list(ckpt.biases)
        + list(ckpt.init_weights) + list(ckpt.init_biases)
    )
    if inline:
        header["arrays"] = [a.tolist() for a in arrays]
        with open(path, "w") as fh:
            json.dump(header, fh, sort_keys=True)
    else:
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            for a in arrays:
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (spec, checkpoint). Accepts binary and inline variants."""
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.find(b"\n")
    head_bytes = blob if nl < 0 else blob[:nl]
    try:
        header = json.loads(head_bytes)
    except json.JSONDecodeError:
        try:
            header = json.loads(blob)
        except json.JSONDecodeError as exc:
            raise FormatError(f"unreadable checkpoint header: {exc}", offset=0)
    if header.get("format") != _CKPT_FORMAT:
        raise FormatError("not a fragaudit checkpoint", offset=0)
    spec = NetSpec.from_dict(header["spec"])
    shapes = [tuple(s) for s in header["shapes"]]
    if list(shapes) != [
        (spec.layer_dims[i + 1], spec.layer_dims[i]) for i in range(spec.num_layers)
    ]:
        raise FormatError("checkpoint shapes do not match spec")
    nb = spec.num_layers if spec.bias_enabled else 0
    if header["payload"] == "inline":
        arrays = [np.asarray(a, dtype=np.float64) for a in header["arrays"]]
    else:
        payload = blob[nl + 1 :]
        counts = [int(np.prod(s)) for s in shapes]
        bias_counts = [s[0] for s in shapes][:nb] if nb else []
        sizes = counts + bias_counts + counts + bias_counts
        need = sum(sizes) * 8
        if len(payload) != need:
            raise FormatError(
                f"payload length {len(payload)} != expected {need}", offset=nl + 1
            )
        flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        arrays, pos = [], 0
        for size in sizes:
            arrays.append(flat[pos : pos + size])
            pos += size
        shaped = []
        k = 0
        for group in range(2):
            for s in shapes:
                shaped.append(arrays[k].reshape(s))
                k += 1
            for i in range(nb):
                shaped.append(arrays[k])
                k += 1
        arrays = shaped
    n = spec.num_layers
    weights = [np.array(a, dtype=np.float64).reshape(shapes[i]) for i, a in enumerate(arrays[:n])]
    off = n
    biases = [np.array(a, dtype=np.float64) for a in arrays[off : off + nb]]
    off += nb
    init_weights = [
        np.array(a, dtype=np.float64).reshape(shapes[i]) for i, a in enumerate(arrays[off : off + n])
    ]
    off += n
    init_biases = [np.array(a, dtype=np.float64) for a in arrays[off : off + nb]]
    ckpt = Checkpoint(weights, init_weights, biases, init_biases, dict(header.get("meta", {})))
    return spec, ckpt
