"""Deep feature extraction behind a pluggable backend, plus the RFV1 feature file.

The core pipeline only needs :func:`mock_backend` and feature files. The ONNX
backend (:func:`pretrained_backend`) needs the optional ``onnx`` and
``onnxruntime`` packages.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import ClassLabel
from .rng import splitmix64_block

FEATURE_MAGIC = b"RFV1"
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
MOCK_GRID = 16
INPUT_SIZE = 224


class DeepFeatError(Exception):
    pass


class BackendFailure(DeepFeatError):
    pass


class DimensionMismatch(DeepFeatError):
    pass


class ModelLoadFailure(DeepFeatError):
    pass


class MissingPenultimateLayer(DeepFeatError):
    pass


class FeatureFileError(DeepFeatError):
    pass


class BadMagic(FeatureFileError):
    pass


class TruncatedFile(FeatureFileError):
    pass


class DimMismatch(FeatureFileError):
    pass


@dataclass(frozen=True)
class ExtractorBackend:
    """A deterministic image -> activation map.

    ``forward`` receives the recipe-normalised ``(224, 224, 3)`` array and
    returns the raw penultimate activations.
    """

    model_id: str
    output_dim: int
    forward: Callable[[np.ndarray], np.ndarray] = field(repr=False, compare=False)
    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    std: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def prepare(self, img: np.ndarray) -> np.ndarray:
        return (img - np.asarray(self.mean)) / np.asarray(self.std)


def unit_normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.zeros_like(v)


def extract_deep(img: np.ndarray, backend: ExtractorBackend) -> np.ndarray:
    """One forward pass; returns the unit-length penultimate feature vector."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape != (INPUT_SIZE, INPUT_SIZE, 3):
        raise DimensionMismatch(f"expected a 224x224x3 image, got {img.shape}")
    try:
        act = backend.forward(backend.prepare(img))
    except DeepFeatError:
        raise
    except Exception as exc:  # backend internals are opaque
        raise BackendFailure(f"{backend.model_id}: {exc}") from exc
    act = np.asarray(act, dtype=np.float64).ravel()
    if act.shape != (backend.output_dim,):
        raise DimensionMismatch(f"{backend.model_id} produced {act.size} values, "
                                f"expected {backend.output_dim}")
    if not np.all(np.isfinite(act)):
        raise BackendFailure(f"{backend.model_id}: non-finite activations")
    return unit_normalize(act)


# ----------------------------------------------------------------- mock


def sign_matrix(seed: int, dim: int, n_in: int = MOCK_GRID * MOCK_GRID * 3) -> np.ndarray:
    """``dim x n_in`` matrix of +-1, row-major from the SplitMix64 stream.

    Entry sign is taken from bit 63 of the corresponding output: clear -> +1.
    """
    raw = splitmix64_block(seed, dim * n_in)
    signs = np.where((raw >> np.uint64(63)) == 0, 1.0, -1.0)
    return signs.reshape(dim, n_in)


def block_downsample(img: np.ndarray, grid: int = MOCK_GRID) -> np.ndarray:
    """Average-pool an ``(H, W, C)`` image to ``(grid, grid, C)``; H and W must be multiples of grid."""
    h, w, c = img.shape
    if h % grid or w % grid:
        raise DimensionMismatch(f"{h}x{w} is not divisible by {grid}")
    return img.reshape(grid, h // grid, grid, w // grid, c).mean(axis=(1, 3))


def mock_backend(seed: int, dim: int) -> ExtractorBackend:
    """Random-projection stand-in for a pretrained network.

    Pools the input to 16x16x3 (768 values, row-major y, x, channel), projects
    with a SplitMix64 sign matrix and applies a ReLU.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    weights = sign_matrix(seed, dim)

    def forward(x: np.ndarray) -> np.ndarray:
        return np.maximum(weights @ block_downsample(x).ravel(), 0.0)

    return ExtractorBackend(f"mock:{seed}:{dim}", dim, forward, mean=(0.5, 0.5, 0.5))


# ---------------------------------------------------------------- ONNX

_CLASSIFIER_OPS = {"Gemm", "MatMul", "Conv"}


def find_penultimate(graph) -> str:
    """Name of the tensor feeding the final classifier layer.

    Walks back from the last Softmax (or, without one, from the first graph
    output) through elementwise tails to the last Gemm/MatMul/Conv, and
    returns that node's data input.
    """
    producers = {out: node for node in graph.node for out in node.output}
    softmax = [n for n in graph.node if n.op_type in ("Softmax", "LogSoftmax")]
    if softmax:
        tensor = softmax[-1].input[0]
    elif graph.output:
        tensor = graph.output[0].name
    else:
        raise MissingPenultimateLayer("graph has no outputs")
    while tensor in producers:
        node = producers[tensor]
        if node.op_type in _CLASSIFIER_OPS:
            return node.input[0]
        if node.op_type in ("Add", "Flatten", "Reshape", "Squeeze", "Identity", "Dropout"):
            tensor = node.input[0]
            continue
        break
    raise MissingPenultimateLayer("no fully-connected classifier found before the output")


def _tensor_dim(model, name: str) -> int | None:
    import onnx

    inferred = onnx.shape_inference.infer_shapes(model)
    infos = list(inferred.graph.value_info) + list(inferred.graph.output) + list(inferred.graph.input)
    for vi in infos:
        if vi.name == name:
            dims = [d.dim_value for d in vi.type.tensor_type.shape.dim[1:]]
            if dims and all(d > 0 for d in dims):
                return int(np.prod(dims))
    return None


def pretrained_backend(model_path, layer: str | None = None,
                       mean: Sequence[float] = IMAGENET_MEAN,
                       std: Sequence[float] = IMAGENET_STD) -> ExtractorBackend:
    """ONNX model backend exposing the pre-classifier activations.

    The model must take a ``(1, 3, 224, 224)`` float input. ``layer`` selects
    the feature tensor explicitly; otherwise :func:`find_penultimate` does.
    """
    try:
        import onnx
        import onnxruntime as ort
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise ModelLoadFailure("onnx and onnxruntime are required for pretrained backends") from exc
    path = Path(model_path)
    try:
        model = onnx.load(str(path))
        onnx.checker.check_model(model)
    except Exception as exc:
        raise ModelLoadFailure(f"{path}: {exc}") from exc
    feature = layer or find_penultimate(model.graph)
    known = {o for n in model.graph.node for o in n.output} | {i.name for i in model.graph.input}
    if feature not in known:
        raise MissingPenultimateLayer(f"tensor {feature!r} not in graph")
    dim = _tensor_dim(model, feature)
    if feature not in {o.name for o in model.graph.output}:
        model.graph.output.append(onnx.helper.make_empty_tensor_value_info(feature))
    try:
        sess = ort.InferenceSession(model.SerializeToString(), providers=["CPUExecutionProvider"])
    except Exception as exc:
        raise ModelLoadFailure(f"{path}: {exc}") from exc
    input_name = sess.get_inputs()[0].name

    def forward(x: np.ndarray) -> np.ndarray:
        batch = np.ascontiguousarray(x.transpose(2, 0, 1)[None], dtype=np.float32)
        return sess.run([feature], {input_name: batch})[0].ravel()

    if dim is None:
        dim = forward(np.zeros((INPUT_SIZE, INPUT_SIZE, 3))).size
    return ExtractorBackend(f"onnx:{path.stem}", dim, forward,
                            mean=tuple(mean), std=tuple(std))


def parse_backend(spec: str) -> ExtractorBackend:
    """``mock:SEED:DIM`` or ``onnx:PATH`` -> backend."""
    kind, _, rest = spec.partition(":")
    if kind == "mock":
        seed, _, dim = rest.partition(":")
        try:
            return mock_backend(int(seed), int(dim))
        except ValueError as exc:
            raise ValueError(f"bad mock backend spec {spec!r}; expected mock:SEED:DIM") from exc
    if kind == "onnx" and rest:
        return pretrained_backend(rest)
    raise ValueError(f"unknown backend spec {spec!r}")


# ------------------------------------------------------------ feature file


@dataclass
class FeatureRecord:
    label: ClassLabel
    vector: np.ndarray  # float32

    def __eq__(self, other):
        return (isinstance(other, FeatureRecord) and self.label == other.label
                and self.vector.dtype == other.vector.dtype
                and np.array_equal(self.vector, other.vector))


def write_features(path, records: Sequence[FeatureRecord]) -> None:
    dims = {len(r.vector) for r in records}
    if len(dims) > 1:
        raise DimMismatch(f"records have differing dims {sorted(dims)}")
    d = dims.pop() if dims else 0
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", len(records), d))
        for r in records:
            fh.write(struct.pack("<B", int(r.label)))
            fh.write(np.asarray(r.vector, dtype="<f4").tobytes())


def read_features(path) -> list[FeatureRecord]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != FEATURE_MAGIC:
        raise BadMagic(f"{path}: not an RFV1 file")
    if len(raw) < 12:
        raise TruncatedFile(f"{path}: header truncated")
    n, d = struct.unpack_from("<II", raw, 4)
    rec = 1 + 4 * d
    body = memoryview(raw)[12:]
    if len(body) < n * rec:
        raise TruncatedFile(f"{path}: header claims {n} records, file holds {len(body) // rec}")
    if len(body) > n * rec:
        raise FeatureFileError(f"{path}: {len(body) - n * rec} trailing bytes")
    out = []
    for i in range(n):
        off = i * rec
        try:
            label = ClassLabel(body[off])
        except ValueError:
            raise FeatureFileError(f"{path}: record {i} has invalid label byte {body[off]}") from None
        vec = np.frombuffer(body[off + 1:off + rec], dtype="<f4").astype(np.float32)
        out.append(FeatureRecord(label, vec))
    return out
