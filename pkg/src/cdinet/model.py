"""The paired shape/phase inverter networks: specification, construction,
inference and weight persistence.

Both heads share one topology - a convolutional encoder (two 2x2 pooling
stages, 32->16->8 spatially) and an upsampling decoder back to 32x32 with a
sigmoid final convolution - and differ only in what their [0,1] output
means: object magnitude for the shape head, affinely mapped phase for the
phase head.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import fields

WEIGHT_MAGIC = b"CDIM"
WEIGHT_VERSION = 1
HEAD_TAGS = {"shape": 0, "phase": 1}
_TAG_HEADS = {v: k for k, v in HEAD_TAGS.items()}

KERNEL = 3


class WeightLoadError(Exception):
    """Base for everything that can go wrong reading a weight file."""


class MagicMismatchError(WeightLoadError):
    pass


class VersionMismatchError(WeightLoadError):
    pass


class TruncatedFileError(WeightLoadError):
    pass


class ParameterShapeError(WeightLoadError):
    pass


class HeadTagMismatchError(WeightLoadError):
    pass


@dataclass
class LayerSpec:
    kind: str                      # conv | pool | upsample
    in_channels: int = 0
    out_channels: int = 0
    activation: str = ""           # relu | sigmoid, conv only

    def to_dict(self) -> dict:
        if self.kind == "conv":
            return {"kind": "conv", "in": self.in_channels,
                    "out": self.out_channels, "act": self.activation}
        return {"kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        if d["kind"] == "conv":
            return cls("conv", d["in"], d["out"], d["act"])
        return cls(d["kind"])


@dataclass
class NetworkSpec:
    """Ordered layer list plus which quantity the output head predicts."""

    layers: list[LayerSpec] = field(default_factory=list)
    head: str = "shape"
    grid_n: int = 32

    @classmethod
    def cdinn(cls, head: str, grid_n: int = 32) -> "NetworkSpec":
        """The canonical topology: conv(32) conv(32) pool conv(64) conv(64)
        pool | up conv(64) up conv(32) conv(1, sigmoid)."""
        ls = [
            LayerSpec("conv", 1, 32, "relu"),
            LayerSpec("conv", 32, 32, "relu"),
            LayerSpec("pool"),
            LayerSpec("conv", 32, 64, "relu"),
            LayerSpec("conv", 64, 64, "relu"),
            LayerSpec("pool"),
            LayerSpec("upsample"),
            LayerSpec("conv", 64, 64, "relu"),
            LayerSpec("upsample"),
            LayerSpec("conv", 64, 32, "relu"),
            LayerSpec("conv", 32, 1, "sigmoid"),
        ]
        spec = cls(layers=ls, head=head, grid_n=grid_n)
        spec.validate()
        return spec

    def validate(self) -> None:
        if self.head not in HEAD_TAGS:
            raise ValueError(f"head must be one of {sorted(HEAD_TAGS)}, got {self.head!r}")
        convs = [l for l in self.layers if l.kind == "conv"]
        if not convs:
            raise ValueError("network has no convolutional layers")
        for l in convs[:-1]:
            if l.activation != "relu":
                raise ValueError("all hidden conv activations must be relu")
        if convs[-1].activation != "sigmoid":
            raise ValueError("final convolution must use a sigmoid activation")
        if convs[-1].out_channels != 1:
            raise ValueError("final convolution must emit a single channel")
        if len(convs) >= 2 and convs[1].out_channels != 32:
            raise ValueError("2nd convolutional layer must have 32 filters")
        if len(convs) >= 4 and convs[3].out_channels != 64:
            raise ValueError("4th convolutional layer must have 64 filters")
        # channel continuity and spatial trace
        ch, side = 1, self.grid_n
        for l in self.layers:
            if l.kind == "conv":
                if l.in_channels != ch:
                    raise ValueError(f"conv expects {l.in_channels} channels, gets {ch}")
                ch = l.out_channels
            elif l.kind == "pool":
                if side % 2:
                    raise ValueError(f"pooling at odd size {side}")
                side //= 2
            elif l.kind == "upsample":
                side *= 2
            else:
                raise ValueError(f"unknown layer kind {l.kind!r}")
        if side != self.grid_n:
            raise ValueError(f"decoder ends at {side}, expected {self.grid_n}")

    def conv_count(self) -> int:
        return sum(1 for l in self.layers if l.kind == "conv")

    def shape_trace(self) -> list[tuple[int, int]]:
        """(channels, side) after each layer, for introspection and tests."""
        ch, side, out = 1, self.grid_n, []
        for l in self.layers:
            if l.kind == "conv":
                ch = l.out_channels
            elif l.kind == "pool":
                side //= 2
            else:
                side *= 2
            out.append((ch, side))
        return out

    def to_dict(self) -> dict:
        return {"head": self.head, "grid_n": self.grid_n,
                "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(layers=[LayerSpec.from_dict(x) for x in d["layers"]],
                   head=d["head"], grid_n=d["grid_n"])


class Network:
    """A spec plus its parameters (float32), with training provenance."""

    def __init__(self, spec: NetworkSpec, params: list[tuple[np.ndarray, np.ndarray]],
                 provenance: dict | None = None):
        spec.validate()
        self.spec = spec
        self.params = params
        self.provenance = provenance or {}

    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in self.params)


def build_cdinn(head: str, seed: int, grid_n: int = 32) -> Network:
    """Fresh network with Glorot-uniform conv weights and zero biases."""
    spec = NetworkSpec.cdinn(head, grid_n)
    rng = np.random.Generator(np.random.PCG64(seed))
    params = []
    for l in spec.layers:
        if l.kind != "conv":
            continue
        fan_in = l.in_channels * KERNEL * KERNEL
        fan_out = l.out_channels * KERNEL * KERNEL
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit,
                        size=(l.out_channels, l.in_channels, KERNEL, KERNEL))
        params.append((w.astype(np.float32), np.zeros(l.out_channels, np.float32)))
    return Network(spec, params, {"init_seed": seed})


def normalize_pattern(pattern: np.ndarray) -> np.ndarray:
    """Network input convention: divide by the pattern's own maximum so
    values lie in [0, 1]; an all-zero pattern stays zero."""
    p = np.asarray(pattern, dtype=np.float64)
    m = p.max()
    if m > 0:
        p = p / m
    return p.astype(np.float32)


def _run_layers(net: Network, x: np.ndarray, capture_conv: int = 0):
    """Shared inference walk over [C,B,H,W]; optionally returns the
    post-activation output of the capture_conv-th convolution (1-based)."""
    conv_i = 0
    param_i = 0
    captured = None
    for l in net.spec.layers:
        if l.kind == "conv":
            w, b = net.params[param_i]
            param_i += 1
            conv_i += 1
            x = ag.conv2d_forward(x, w, b)
            x = ag.relu_forward(x) if l.activation == "relu" else ag.sigmoid_forward(x)
            if conv_i == capture_conv:
                captured = x
        elif l.kind == "pool":
            x = ag.maxpool2_forward(x)
        else:
            x = ag.upsample2_forward(x)
    return x, captured


def forward(net: Network, pattern: np.ndarray) -> np.ndarray:
    """Single-pattern inference: raw amplitudes in, [0,1] image out.

    The input is max-normalized here, so uniformly rescaled patterns give
    identical outputs. Deterministic and allocation-transient.
    """
    n = net.spec.grid_n
    pattern = np.asarray(pattern)
    if pattern.shape != (n, n):
        raise ValueError(f"expected a {n}x{n} pattern, got {pattern.shape}")
    x = normalize_pattern(pattern)[None, None]
    out, _ = _run_layers(net, x)
    return out[0, 0]


def forward_batch(net: Network, patterns: np.ndarray) -> np.ndarray:
    """[B,n,n] raw patterns -> [B,n,n] outputs, normalized per sample."""
    n = net.spec.grid_n
    p = np.asarray(patterns, dtype=np.float32)
    if p.ndim != 3 or p.shape[1:] != (n, n):
        raise ValueError(f"expected [B,{n},{n}] patterns, got {p.shape}")
    m = p.max(axis=(1, 2), keepdims=True)
    x = np.divide(p, m, out=np.zeros_like(p), where=m > 0)
    out, _ = _run_layers(net, x[None])
    return out[0]


def forward_capture(net: Network, pattern: np.ndarray, conv_index: int) -> np.ndarray:
    """Post-activation output [C,H,W] of the conv_index-th convolutional
    layer (1-based) for one pattern."""
    if conv_index < 1 or conv_index > net.spec.conv_count():
        raise ValueError(
            f"conv_index {conv_index} does not address a convolutional layer "
            f"(network has {net.spec.conv_count()})")
    x = normalize_pattern(np.asarray(pattern))[None, None]
    _, captured = _run_layers(net, x, capture_conv=conv_index)
    return captured[:, 0]


def require_head(net: Network, head: str) -> Network:
    if net.spec.head != head:
        raise HeadTagMismatchError(
            f"network carries head tag {net.spec.head!r}, need {head!r}")
    return net


def predict_object(snet: Network, pnet: Network, pattern: np.ndarray,
                   threshold: float = 0.1) -> np.ndarray:
    """One-shot inversion: complex object from a diffraction pattern.

    Magnitude is the shape head's sigmoid output; the phase head's [0,1]
    output is unmapped to radians and zeroed wherever the predicted shape
    falls below ``threshold``.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must be in (0,1), got {threshold}")
    require_head(snet, "shape")
    require_head(pnet, "phase")
    shape = forward(snet, pattern).astype(np.float64)
    unit = forward(pnet, pattern).astype(np.float64)
    phi = fields.unit_to_phase(unit)
    phi[shape < threshold] = 0.0
    return shape * np.cos(phi) + 1j * (shape * np.sin(phi))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_weights(path: str, net: Network) -> None:
    """CDIM container: magic, version, head tag, JSON spec+provenance blob,
    then per-layer (w, b) arrays as float32 LE with explicit dim headers."""
    blob = json.dumps({"spec": net.spec.to_dict(),
                       "provenance": net.provenance}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(struct.pack("<HB", WEIGHT_VERSION, HEAD_TAGS[net.spec.head]))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for w, b in net.params:
            for arr in (w, b):
                f.write(struct.pack("<B", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"file ends inside {what}")
    return buf


def load_weights(path: str) -> Network:
    """Inverse of save_weights; every parameter round-trips bit-exactly.

    Raises MagicMismatchError / VersionMismatchError / TruncatedFileError /
    ParameterShapeError so callers can tell corruption from architecture
    drift. Nothing is partially loaded on failure.
    """
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != WEIGHT_MAGIC:
            raise MagicMismatchError(f"bad magic {magic!r}, expected {WEIGHT_MAGIC!r}")
        version, tag = struct.unpack("<HB", _read_exact(f, 3, "version/head"))
        if version != WEIGHT_VERSION:
            raise VersionMismatchError(f"unsupported weight format version {version}")
        if tag not in _TAG_HEADS:
            raise ParameterShapeError(f"unknown head tag {tag}")
        (blob_len,) = struct.unpack("<I", _read_exact(f, 4, "spec length"))
        blob = json.loads(_read_exact(f, blob_len, "spec blob").decode("utf-8"))
        spec = NetworkSpec.from_dict(blob["spec"])
        try:
            spec.validate()
        except ValueError as e:
            raise ParameterShapeError(f"stored spec invalid: {e}") from e
        if _TAG_HEADS[tag] != spec.head:
            raise ParameterShapeError(
                f"head tag {_TAG_HEADS[tag]!r} disagrees with spec head {spec.head!r}")
        params = []
        for l in spec.layers:
            if l.kind != "conv":
                continue
            expect = [(l.out_channels, l.in_channels, KERNEL, KERNEL),
                      (l.out_channels,)]
            pair = []
            for shp in expect:
                (ndim,) = struct.unpack("<B", _read_exact(f, 1, "array rank"))
                dims = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "array dims"))
                if dims != shp:
                    raise ParameterShapeError(
                        f"stored array has shape {dims}, spec requires {shp}")
                raw = _read_exact(f, 4 * int(np.prod(shp)), "parameter data")
                pair.append(np.frombuffer(raw, dtype="<f4").reshape(shp).copy())
            params.append((pair[0], pair[1]))
        trailing = f.read(1)
        if trailing:
            raise TruncatedFileError("trailing bytes after final parameter")
    return Network(spec, params, blob.get("provenance", {}))
