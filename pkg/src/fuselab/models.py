"""The single-modality CNN and the multimodal fusion network.

The CNN maps a grayscale patch to a 512-d descriptor (the post-ReLU
penultimate layer) and a 2-way softmax malignancy probability:

    input (1, P, P)
    -> conv 3x3xC1, pad 1 -> ReLU -> maxpool 2/2
    -> conv 3x3xC2, pad 1 -> ReLU -> maxpool 2/2
    -> conv 3x3xC3, pad 1 -> ReLU -> maxpool 2/2
    -> flatten -> dense 512 -> ReLU   (descriptor)
    -> dense 2 -> softmax

The fusion network consumes the 1024-d concatenation of a mammography and an
ultrasound descriptor (in that order) through seven dense layers of widths
512/256/128/64/32/16/2 with ReLU between hidden layers and softmax at the end.

Either model may carry a cosine head (:class:`~fuselab.losses.LmclParams`):
the plain dense head is then bypassed and class scores are the scaled cosines
between the penultimate features and the learned class anchors. The margin is
a training-time construct only; inference uses softmax over s*cos(theta).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from fuselab import tensor as T
from fuselab.errors import ContractError, DatasetError, ShapeError
from fuselab.losses import LmclParams, cosine_logits
from fuselab.tensor import Tensor

DESCRIPTOR_DIM = 512
N_CLASSES = 2
FUSION_HIDDEN = (512, 256, 128, 64, 32, 16)

CHECKPOINT_MAGIC = b"FUSELAB1"


@dataclass(frozen=True)
class CnnArch:
    patch_size: int = 64
    channels: tuple[int, int, int] = (16, 32, 64)
    descriptor_dim: int = DESCRIPTOR_DIM

    def __post_init__(self):
        if self.patch_size % 8 != 0:
            raise ContractError(f"patch_size must be divisible by 8, got {self.patch_size}")

    @property
    def flat_dim(self) -> int:
        return self.channels[2] * (self.patch_size // 8) ** 2


@dataclass(frozen=True)
class FusionArch:
    descriptor_dim: int = DESCRIPTOR_DIM
    hidden: tuple[int, ...] = FUSION_HIDDEN
    normalize_inputs: bool = False

    @property
    def input_dim(self) -> int:
        return 2 * self.descriptor_dim


@dataclass
class DenseLayer:
    weights: Tensor
    bias: Tensor


@dataclass
class ConvLayer:
    kernels: Tensor
    bias: Tensor


@dataclass
class CnnParams:
    arch: CnnArch
    conv_layers: list[ConvLayer]
    descriptor_layer: DenseLayer
    head: DenseLayer
    lmcl: LmclParams | None = None
    seed: int | None = None

    def tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.conv_layers, start=1):
            out += [(f"conv{i}.kernels", layer.kernels), (f"conv{i}.bias", layer.bias)]
        out += [
            ("descriptor.weights", self.descriptor_layer.weights),
            ("descriptor.bias", self.descriptor_layer.bias),
            ("head.weights", self.head.weights),
            ("head.bias", self.head.bias),
        ]
        if self.lmcl is not None:
            out.append(("lmcl.anchors", self.lmcl.class_weights))
        return out

    def conv_layer_names(self) -> list[str]:
        return [f"conv{i}" for i in range(1, len(self.conv_layers) + 1)]


@dataclass
class FusionParams:
    arch: FusionArch
    hidden_layers: list[DenseLayer]
    head: DenseLayer
    lmcl: LmclParams | None = None
    seed: int | None = None

    def tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.hidden_layers, start=1):
            out += [(f"fc{i}.weights", layer.weights), (f"fc{i}.bias", layer.bias)]
        out += [("head.weights", self.head.weights), ("head.bias", self.head.bias)]
        if self.lmcl is not None:
            out.append(("lmcl.anchors", self.lmcl.class_weights))
        return out


# ---------------------------------------------------------------------------
# initialization


def _uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    limit = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_cnn_params(seed: int, arch: CnnArch = CnnArch(), lmcl: tuple[float, float] | None = None) -> CnnParams:
    """Fan-in-scaled uniform weights, zero biases; deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    c1, c2, c3 = arch.channels
    convs = []
    for c_in, c_out in [(1, c1), (c1, c2), (c2, c3)]:
        kernels = _uniform_fan_in(rng, (c_out, c_in, 3, 3), fan_in=c_in * 9)
        convs.append(ConvLayer(kernels=kernels, bias=_zeros(c_out)))
    descriptor = DenseLayer(
        weights=_uniform_fan_in(rng, (arch.descriptor_dim, arch.flat_dim), fan_in=arch.flat_dim),
        bias=_zeros(arch.descriptor_dim),
    )
    head = DenseLayer(
        weights=_uniform_fan_in(rng, (N_CLASSES, arch.descriptor_dim), fan_in=arch.descriptor_dim),
        bias=_zeros(N_CLASSES),
    )
    params = CnnParams(arch=arch, conv_layers=convs, descriptor_layer=descriptor, head=head, seed=seed)
    if lmcl is not None:
        s, m = lmcl
        anchors = _uniform_fan_in(rng, (N_CLASSES, arch.descriptor_dim), fan_in=arch.descriptor_dim)
        params.lmcl = LmclParams(s=s, m=m, class_weights=anchors)
    return params


def init_fusion_params(seed: int, arch: FusionArch = FusionArch(), lmcl: tuple[float, float] | None = None) -> FusionParams:
    rng = np.random.default_rng(seed)
    widths = [arch.input_dim, *arch.hidden]
    hidden = []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        hidden.append(DenseLayer(weights=_uniform_fan_in(rng, (n_out, n_in), fan_in=n_in), bias=_zeros(n_out)))
    head = DenseLayer(
        weights=_uniform_fan_in(rng, (N_CLASSES, widths[-1]), fan_in=widths[-1]), bias=_zeros(N_CLASSES)
    )
    params = FusionParams(arch=arch, hidden_layers=hidden, head=head, seed=seed)
    if lmcl is not None:
        s, m = lmcl
        anchors = _uniform_fan_in(rng, (N_CLASSES, widths[-1]), fan_in=widths[-1])
        params.lmcl = LmclParams(s=s, m=m, class_weights=anchors)
    return params


def init_params(seed: int, arch: CnnArch | FusionArch, lmcl: tuple[float, float] | None = None):
    if isinstance(arch, CnnArch):
        return init_cnn_params(seed, arch, lmcl)
    if isinstance(arch, FusionArch):
        return init_fusion_params(seed, arch, lmcl)
    raise ContractError(f"init_params: unknown architecture {arch!r}")


# ---------------------------------------------------------------------------
# forward passes


@dataclass
class CnnTrace:
    """Intermediate activations of one CNN forward pass (for Grad-CAM and training)."""

    conv_pre: dict[str, Tensor]  # conv output + bias, before ReLU
    descriptor: Tensor
    logits: Tensor
    probs: Tensor


def _head_logits(features: Tensor, head: DenseLayer, lmcl: LmclParams | None) -> Tensor:
    if lmcl is not None:
        if features.ndim == 1:
            # promote to a one-row batch for the cosine, then take the row back
            logits = cosine_logits(T.reshape(features, (1, -1)), lmcl)
            return T.reshape(logits, (-1,))
        return cosine_logits(features, lmcl)
    return T.dense(features, head.weights, head.bias)


def _normalize_vec(x: Tensor) -> Tensor:
    return T.reshape(T.l2_normalize_rows(T.reshape(x, (1, -1))), (-1,))


def cnn_forward_trace(patch, params: CnnParams) -> CnnTrace:
    """Run the CNN keeping intermediate conv activations.

    ``patch`` is (P, P), (N, P, P) for a batch, or an equivalent Tensor.
    """
    x = patch if isinstance(patch, Tensor) else Tensor(patch)
    p = params.arch.patch_size
    if x.ndim == 2:
        if x.shape != (p, p):
            raise ShapeError(f"cnn_forward: patch {x.shape} does not match configured size ({p}, {p})")
        x = T.reshape(x, (1, p, p))
    elif x.ndim == 3:
        if x.shape[1:] != (p, p):
            raise ShapeError(f"cnn_forward: batch {x.shape} does not match configured size ({p}, {p})")
        x = T.reshape(x, (x.shape[0], 1, p, p))
    else:
        raise ShapeError(f"cnn_forward: expected (P, P) or (N, P, P), got shape {x.shape}")

    conv_pre: dict[str, Tensor] = {}
    for i, layer in enumerate(params.conv_layers, start=1):
        x = T.conv2d(x, layer.kernels, layer.bias, stride=1, padding=1)
        conv_pre[f"conv{i}"] = x
        x = T.maxpool2d(T.relu(x), 2, 2)
    flat = T.flatten(x)
    descriptor = T.relu(T.dense(flat, params.descriptor_layer.weights, params.descriptor_layer.bias))
    logits = _head_logits(descriptor, params.head, params.lmcl)
    return CnnTrace(conv_pre=conv_pre, descriptor=descriptor, logits=logits, probs=T.softmax(logits))


def cnn_forward(patch, params: CnnParams) -> tuple[Tensor, Tensor]:
    """Return (descriptor, probs) for one patch or a batch of patches."""
    trace = cnn_forward_trace(patch, params)
    return trace.descriptor, trace.probs


@dataclass
class FusionTrace:
    features: Tensor  # penultimate (16-wide) post-ReLU activations
    logits: Tensor
    probs: Tensor


def fusion_forward_trace(desc_mg, desc_us, params: FusionParams) -> FusionTrace:
    a = desc_mg if isinstance(desc_mg, Tensor) else Tensor(desc_mg)
    b = desc_us if isinstance(desc_us, Tensor) else Tensor(desc_us)
    d = params.arch.descriptor_dim
    if a.ndim != b.ndim:
        raise ShapeError(f"fusion_forward: mixed ranks {a.shape} and {b.shape}")
    if a.ndim == 1:
        if a.shape != (d,) or b.shape != (d,):
            raise ShapeError(f"fusion_forward: descriptors {a.shape}/{b.shape}, expected ({d},)")
        if params.arch.normalize_inputs:
            a, b = _normalize_vec(a), _normalize_vec(b)
        x = T.concat(a, b)
    elif a.ndim == 2:
        if a.shape[1] != d or b.shape[1] != d or a.shape[0] != b.shape[0]:
            raise ShapeError(f"fusion_forward: descriptor batches {a.shape}/{b.shape}, expected (N, {d})")
        if params.arch.normalize_inputs:
            a, b = T.l2_normalize_rows(a), T.l2_normalize_rows(b)
        x = T.concat_cols(a, b)
    else:
        raise ShapeError(f"fusion_forward: expected rank 1 or 2 descriptors, got {a.shape}")
    for layer in params.hidden_layers:
        x = T.relu(T.dense(x, layer.weights, layer.bias))
    logits = _head_logits(x, params.head, params.lmcl)
    return FusionTrace(features=x, logits=logits, probs=T.softmax(logits))


def fusion_forward(desc_mg, desc_us, params: FusionParams) -> Tensor:
    """Softmax malignancy probability from a pair of 512-d descriptors."""
    return fusion_forward_trace(desc_mg, desc_us, params).probs


# ---------------------------------------------------------------------------
# checkpoint serialization
#
# Byte layout (documented in README):
#   bytes 0..7    magic "FUSELAB1"
#   bytes 8..11   little-endian uint32 header length L
#   bytes 12..12+L  UTF-8 JSON header
#   remainder     row-major float64 little-endian tensor data, concatenated
#                 in the order the header's "tensors" list declares


def _arch_to_json(params) -> dict:
    if isinstance(params, CnnParams):
        a = params.arch
        return {
            "kind": "cnn",
            "patch_size": a.patch_size,
            "channels": list(a.channels),
            "descriptor_dim": a.descriptor_dim,
        }
    a = params.arch
    return {
        "kind": "fusion",
        "descriptor_dim": a.descriptor_dim,
        "hidden": list(a.hidden),
        "normalize_inputs": a.normalize_inputs,
    }


def save_checkpoint(params: CnnParams | FusionParams, path) -> None:
    tensors = params.tensors()
    header = {
        "format_version": 1,
        "arch": _arch_to_json(params),
        "seed": params.seed,
        "lmcl": None if params.lmcl is None else {"s": params.lmcl.s, "m": params.lmcl.m},
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, t in tensors:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def serialize_params(params: CnnParams | FusionParams) -> bytes:
    """Checkpoint bytes without touching the filesystem (used for hashing)."""
    import io

    buf = io.BytesIO()
    tensors = params.tensors()
    header = {
        "format_version": 1,
        "arch": _arch_to_json(params),
        "seed": params.seed,
        "lmcl": None if params.lmcl is None else {"s": params.lmcl.s, "m": params.lmcl.m},
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for _, t in tensors:
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def load_checkpoint(path) -> CnnParams | FusionParams:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise DatasetError(f"{path}: not a fuselab checkpoint (magic {magic!r})")
        (length,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(length).decode("utf-8"))
        arrays = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise DatasetError(f"{path}: truncated tensor data for {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    arch_info = header["arch"]
    lmcl_info = header["lmcl"]

    def ten(name):
        return Tensor(arrays[name], requires_grad=True)

    if arch_info["kind"] == "cnn":
        arch = CnnArch(
            patch_size=arch_info["patch_size"],
            channels=tuple(arch_info["channels"]),
            descriptor_dim=arch_info["descriptor_dim"],
        )
        n_convs = sum(1 for name in arrays if name.endswith(".kernels"))
        convs = [ConvLayer(kernels=ten(f"conv{i}.kernels"), bias=ten(f"conv{i}.bias")) for i in range(1, n_convs + 1)]
        params = CnnParams(
            arch=arch,
            conv_layers=convs,
            descriptor_layer=DenseLayer(ten("descriptor.weights"), ten("descriptor.bias")),
            head=DenseLayer(ten("head.weights"), ten("head.bias")),
            seed=header["seed"],
        )
    elif arch_info["kind"] == "fusion":
        arch = FusionArch(
            descriptor_dim=arch_info["descriptor_dim"],
            hidden=tuple(arch_info["hidden"]),
            normalize_inputs=arch_info["normalize_inputs"],
        )
        n_hidden = len(arch.hidden)
        hidden = [DenseLayer(ten(f"fc{i}.weights"), ten(f"fc{i}.bias")) for i in range(1, n_hidden + 1)]
        params = FusionParams(
            arch=arch,
            hidden_layers=hidden,
            head=DenseLayer(ten("head.weights"), ten("head.bias")),
            seed=header["seed"],
        )
    else:
        raise DatasetError(f"{path}: unknown checkpoint kind {arch_info['kind']!r}")

    if lmcl_info is not None:
        params.lmcl = LmclParams(s=lmcl_info["s"], m=lmcl_info["m"], class_weights=ten("lmcl.anchors"))
    return params
