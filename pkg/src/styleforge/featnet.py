"""Small VGG-style networks: specs, weights, forward passes, training, storage.

The feature extractor is a miniature layered conv net (four blocks of two
convs, 2x2 max pool after each block, two dense layers on top). Texture
statistics are read from the first conv of each block, the content
representation from the second conv of the last block. The same spec and
weight machinery also backs the downstream classifier architectures.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import seeding
from .autodiff import Tensor
from .errors import (
    CorpusError,
    ShapeError,
    TruncatedWeightsError,
    WeightFormatError,
    WeightVersionError,
)

MAGIC = b"SFWB"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    """One layer descriptor: conv / pool / relu / dense."""

    name: str
    kind: str
    channels: int = 0   # conv out-channels or dense out-features
    kernel: int = 3     # conv window (odd)
    growth: int = 0     # dense-block concat marker (0 = plain layer)


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_size: tuple[int, int, int]  # H, W, C
    layers: tuple[LayerSpec, ...]
    content_layer: str | None = None
    style_layers: tuple[str, ...] = ()

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ShapeError(f"network {self.name!r}: duplicate layer names")
        kinds = {l.kind for l in self.layers}
        bad = kinds - {"conv", "pool", "relu", "dense"}
        if bad:
            raise ShapeError(f"network {self.name!r}: unknown layer kinds {sorted(bad)}")
        conv_seen = pool_between = second_block = False
        for layer in self.layers:
            if layer.kind == "conv":
                if conv_seen and pool_between:
                    second_block = True
                conv_seen = True
            elif layer.kind == "pool" and conv_seen:
                pool_between = True
        if not second_block:
            raise ShapeError(
                f"network {self.name!r}: need at least two conv blocks separated by pools"
            )
        declared = [l for l in (self.content_layer, *self.style_layers) if l]
        missing = [l for l in declared if l not in names]
        if missing:
            raise ShapeError(f"network {self.name!r}: declared layers missing: {missing}")

    def layer_names(self) -> list[str]:
        return [l.name for l in self.layers]

    def parameter_shapes(self) -> dict[str, tuple[tuple[int, ...], tuple[int, ...]]]:
        """Map conv/dense layer name -> (kernel shape, bias shape)."""
        shapes: dict[str, tuple[tuple[int, ...], tuple[int, ...]]] = {}
        h, w, c = self.input_size
        flat: int | None = None  # feature count once the net flattens to vectors
        for layer in self.layers:
            if layer.kind == "conv":
                if flat is not None:
                    raise ShapeError(f"{self.name}: conv {layer.name} after dense")
                shapes[layer.name] = ((layer.kernel, layer.kernel, c, layer.channels),
                                      (layer.channels,))
                c = c + layer.channels if layer.growth else layer.channels
            elif layer.kind == "pool":
                h, w = (h + 1) // 2, (w + 1) // 2
            elif layer.kind == "dense":
                n_in = flat if flat is not None else h * w * c
                shapes[layer.name] = ((n_in, layer.channels), (layer.channels,))
                flat = layer.channels
        return shapes


@dataclass
class WeightBundle:
    """Trained parameters for a NetworkSpec plus provenance metadata."""

    spec_name: str
    seed: int
    tensors: dict[str, tuple[np.ndarray, np.ndarray]]
    version: int = FORMAT_VERSION
    meta: dict[str, str] = field(default_factory=dict)

    def copy(self) -> "WeightBundle":
        return WeightBundle(
            spec_name=self.spec_name,
            seed=self.seed,
            tensors={k: (kern.copy(), b.copy()) for k, (kern, b) in self.tensors.items()},
            version=self.version,
            meta=dict(self.meta),
        )


@dataclass
class FeatureActivations:
    """Captured activations keyed by layer name."""

    layers: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.layers[name]

    def names(self) -> list[str]:
        return sorted(self.layers)


# ---------------------------------------------------------------------------
# standard architectures
# ---------------------------------------------------------------------------


def feature_net_spec(size: int = 32) -> NetworkSpec:
    """The 8-conv feature extractor (channels 16/32/64/64, pool per block)."""
    layers = []
    channels = (16, 32, 64, 64)
    for block, ch in enumerate(channels, start=1):
        layers += [
            LayerSpec(f"conv{block}_1", "conv", ch),
            LayerSpec(f"relu{block}_1", "relu"),
            LayerSpec(f"conv{block}_2", "conv", ch),
            LayerSpec(f"relu{block}_2", "relu"),
            LayerSpec(f"pool{block}", "pool"),
        ]
    layers += [
        LayerSpec("fc1", "dense", 64),
        LayerSpec("relu_fc1", "relu"),
        LayerSpec("fc2", "dense", 2),
    ]
    return NetworkSpec(
        name="feature-net",
        input_size=(size, size, 3),
        layers=tuple(layers),
        content_layer="conv4_2",
        style_layers=("conv1_1", "conv2_1", "conv3_1", "conv4_1"),
    )


def classifier_spec(arch: str, size: int = 32) -> NetworkSpec:
    """Desk-scale classifier architectures with a 2-way head."""
    if arch == "mini-vgg-a":
        layers = (
            LayerSpec("c1", "conv", 8), LayerSpec("r1", "relu"), LayerSpec("p1", "pool"),
            LayerSpec("c2", "conv", 16), LayerSpec("r2", "relu"), LayerSpec("p2", "pool"),
            LayerSpec("c3", "conv", 32), LayerSpec("r3", "relu"), LayerSpec("p3", "pool"),
            LayerSpec("fc1", "dense", 48), LayerSpec("r4", "relu"),
            LayerSpec("head", "dense", 2),
        )
    elif arch == "mini-vgg-b":
        layers = (
            LayerSpec("c1a", "conv", 8), LayerSpec("r1a", "relu"),
            LayerSpec("c1b", "conv", 8), LayerSpec("r1b", "relu"), LayerSpec("p1", "pool"),
            LayerSpec("c2a", "conv", 16), LayerSpec("r2a", "relu"),
            LayerSpec("c2b", "conv", 16), LayerSpec("r2b", "relu"), LayerSpec("p2", "pool"),
            LayerSpec("c3a", "conv", 32), LayerSpec("r3a", "relu"), LayerSpec("p3", "pool"),
            LayerSpec("fc1", "dense", 64), LayerSpec("r4", "relu"),
            LayerSpec("head", "dense", 2),
        )
    elif arch == "mini-dense":
        # growth marks convs whose input is carried forward by concatenation
        layers = (
            LayerSpec("stem", "conv", 12), LayerSpec("r0", "relu"), LayerSpec("p0", "pool"),
            LayerSpec("d1", "conv", 8, growth=1), LayerSpec("r1", "relu"),
            LayerSpec("d2", "conv", 8, growth=1), LayerSpec("r2", "relu"),
            LayerSpec("p1", "pool"),
            LayerSpec("d3", "conv", 16, growth=1), LayerSpec("r3", "relu"),
            LayerSpec("p2", "pool"),
            LayerSpec("fc1", "dense", 48), LayerSpec("r4", "relu"),
            LayerSpec("head", "dense", 2),
        )
    else:
        raise ShapeError(f"unknown architecture {arch!r}; "
                         "expected mini-vgg-a, mini-vgg-b, or mini-dense")
    return NetworkSpec(name=arch, input_size=(size, size, 3), layers=layers)


# ---------------------------------------------------------------------------
# initialization and forward passes
# ---------------------------------------------------------------------------


def init_weights(spec: NetworkSpec, seed: int) -> WeightBundle:
    """He-normal kernels, zero biases; one derived stream per layer."""
    tensors: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for index, (name, (kshape, bshape)) in enumerate(spec.parameter_shapes().items()):
        rng = seeding.generator(seed, "init", spec.name, index)
        fan_in = int(np.prod(kshape[:-1]))
        kernel = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=kshape)
        tensors[name] = (kernel, np.zeros(bshape))
    return WeightBundle(spec_name=spec.name, seed=seed, tensors=tensors)


def _check_bundle(spec: NetworkSpec, bundle: WeightBundle) -> None:
    expected = spec.parameter_shapes()
    for name, (kshape, bshape) in expected.items():
        if name not in bundle.tensors:
            raise ShapeError(f"weights missing layer {name!r} for network {spec.name!r}")
        kern, bias = bundle.tensors[name]
        if kern.shape != kshape or bias.shape != bshape:
            raise ShapeError(
                f"layer {name!r}: weights {kern.shape}/{bias.shape} "
                f"do not match spec {kshape}/{bshape}"
            )


class NetParameters:
    """Trainable view of a WeightBundle: gradient-tracking tensors that
    share the bundle's arrays, so in-place optimizer steps update both."""

    def __init__(self, spec: NetworkSpec, bundle: WeightBundle):
        _check_bundle(spec, bundle)
        self.spec = spec
        self.bundle = bundle
        self.tensors: dict[str, tuple[Tensor, Tensor]] = {}
        for name, (kern, bias) in bundle.tensors.items():
            kt = Tensor(kern, requires_grad=True)
            bt = Tensor(bias, requires_grad=True)
            bundle.tensors[name] = (kt.data, bt.data)
            self.tensors[name] = (kt, bt)

    def flat(self) -> list[Tensor]:
        return [t for name in sorted(self.tensors) for t in self.tensors[name]]


def run_network(
    spec: NetworkSpec,
    bundle: WeightBundle,
    x: Tensor,
    capture: frozenset[str] | set[str] = frozenset(),
    stop_after_capture: bool = False,
    train: bool = False,
    dropout_rate: float = 0.0,
    dropout_rng: np.random.Generator | None = None,
    params: dict[str, tuple[Tensor, Tensor]] | None = None,
) -> tuple[Tensor | None, dict[str, Tensor]]:
    """Run the layer stack, capturing named activations as graph tensors.

    Returns (final output, captures). With ``stop_after_capture`` the walk
    ends once every requested layer has been seen and the final output is
    None. Dropout (inverted, train only) applies to the input of the last
    dense layer. ``params`` substitutes trainable tensors for the bundle's
    plain arrays so gradients reach the weights.
    """
    unknown = set(capture) - set(spec.layer_names())
    if unknown:
        raise ShapeError(
            f"unknown layer(s) {sorted(unknown)}; valid names: {spec.layer_names()}"
        )
    if params is None:
        _check_bundle(spec, bundle)

    def layer_params(name: str) -> tuple[Tensor, Tensor]:
        if params is not None:
            return params[name]
        kern, bias = bundle.tensors[name]
        return Tensor(kern), Tensor(bias)

    last_dense = next(
        (l.name for l in reversed(spec.layers) if l.kind == "dense"), None
    )
    captures: dict[str, Tensor] = {}
    pending = set(capture)
    out = x
    dense_entered = False
    for layer in spec.layers:
        if layer.kind == "conv":
            kt, bt = layer_params(layer.name)
            result = ad.conv2d(out, kt, bt, padding="same")
            if layer.growth:
                result = ad.concat_channels([out, result])
            out = result
        elif layer.kind == "pool":
            out = ad.max_pool2d(out)
        elif layer.kind == "relu":
            out = ad.relu(out)
        elif layer.kind == "dense":
            if not dense_entered:
                data_ndim = out.data.ndim
                if data_ndim == 4:
                    n = out.data.shape[0]
                    out = ad.reshape(out, (n, int(np.prod(out.data.shape[1:]))))
                elif data_ndim == 3:
                    out = ad.reshape(out, (int(np.prod(out.data.shape)),))
                dense_entered = True
            if (
                train
                and dropout_rate > 0.0
                and layer.name == last_dense
                and dropout_rng is not None
            ):
                keep = (dropout_rng.random(out.data.shape) >= dropout_rate)
                mask = Tensor(keep.astype(np.float64) / (1.0 - dropout_rate))
                out = out * mask
            kt, bt = layer_params(layer.name)
            out = ad.dense(out, kt, bt)
        if layer.name in pending:
            captures[layer.name] = out
            pending.discard(layer.name)
            if stop_after_capture and not pending:
                return None, captures
    return out, captures


def forward_features(
    spec: NetworkSpec, bundle: WeightBundle, image: np.ndarray, layers
) -> FeatureActivations:
    """Activations of the requested layers for one image (pure function)."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != spec.input_size:
        raise ShapeError(
            f"image shape {image.shape} does not match network input {spec.input_size}"
        )
    _, caps = run_network(
        spec, bundle, Tensor(image), capture=set(layers), stop_after_capture=True
    )
    return FeatureActivations({name: t.data for name, t in caps.items()})


def forward_logits(spec: NetworkSpec, bundle: WeightBundle, images: np.ndarray) -> np.ndarray:
    """Logits for a batch (N,H,W,C); prediction path, no gradient graph."""
    out, _ = run_network(spec, bundle, Tensor(np.asarray(images, dtype=np.float64)))
    return out.data


def predict_probs(spec: NetworkSpec, bundle: WeightBundle, images: np.ndarray) -> np.ndarray:
    """Per-class probabilities, computed one image at a time.

    The per-image loop keeps scores bit-identical whether callers batch
    their requests or not.
    """
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    probs = np.empty((arr.shape[0], 2), dtype=np.float64)
    for i in range(arr.shape[0]):
        logits = forward_logits(spec, bundle, arr[i][None])
        probs[i] = ad.softmax_probs(logits[0])
    return probs


# ---------------------------------------------------------------------------
# feature-extractor training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatnetTrainConfig:
    epochs: int = 12
    batch_size: int = 32
    learning_rate: float = 1e-3
    holdout_fraction: float = 0.2


def train_feature_extractor(
    corpus: list[tuple[str, np.ndarray]],
    spec: NetworkSpec,
    config: FeatnetTrainConfig,
    seed: int,
) -> WeightBundle:
    """Train the feature net as a 2-way classifier on the generated corpus.

    ``corpus`` is a list of (class label, image array) pairs. A stratified
    20% holdout measures head accuracy, which is stored in the bundle
    metadata. Deterministic given (corpus, spec, config, seed).
    """
    by_class: dict[str, list[np.ndarray]] = {}
    for label, image in corpus:
        by_class.setdefault(label, []).append(image)
    if len(by_class) < 2:
        raise CorpusError(
            f"feature training needs >= 2 classes with >= 20 images each; "
            f"got classes {sorted(by_class)}"
        )
    small = {label: len(imgs) for label, imgs in by_class.items() if len(imgs) < 20}
    if small:
        raise CorpusError(
            f"feature training needs >= 20 images per class; too small: {small}"
        )

    class_names = sorted(by_class)
    train_x, train_y, hold_x, hold_y = [], [], [], []
    for class_index, label in enumerate(class_names):
        images = by_class[label]
        order = seeding.generator(seed, "featnet-holdout", label).permutation(len(images))
        n_hold = max(1, int(round(len(images) * config.holdout_fraction)))
        for pos, img_index in enumerate(order):
            if pos < n_hold:
                hold_x.append(images[img_index]); hold_y.append(class_index)
            else:
                train_x.append(images[img_index]); train_y.append(class_index)
    xs = np.asarray(train_x, dtype=np.float64)
    ys = np.asarray(train_y, dtype=np.int64)
    hx = np.asarray(hold_x, dtype=np.float64)
    hy = np.asarray(hold_y, dtype=np.int64)

    live = init_weights(spec, seed)
    net = NetParameters(spec, live)
    optimizer = ad.Adam(net.flat(), lr=config.learning_rate)
    epoch_rng = seeding.generator(seed, "featnet-batches")

    for _ in range(config.epochs):
        order = epoch_rng.permutation(len(xs))
        for start in range(0, len(xs), config.batch_size):
            batch = order[start:start + config.batch_size]
            logits, _ = run_network(spec, live, Tensor(xs[batch]),
                                    params=net.tensors)
            loss = ad.cross_entropy_logits(logits, ys[batch])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

    probs = predict_probs(spec, live, hx)
    accuracy = float((probs.argmax(axis=1) == hy).mean())
    result = live.copy()
    result.meta["holdout_accuracy"] = f"{accuracy:.6f}"
    result.meta["classes"] = ",".join(class_names)
    return result


# ---------------------------------------------------------------------------
# weight file format (.sfwb)
# ---------------------------------------------------------------------------
#
#   magic "SFWB" | u32 version | u64 seed | u16 len + spec name
#   u16 len + meta string ("k=v;k=v") | u32 record count
#   per record: u16 len + name | u8 rank | u32 dims... | f64le data
#
# Records come in pairs "<layer>.kernel" / "<layer>.bias". All integers
# little-endian.


def save_weights(bundle: WeightBundle, path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", bundle.version))
    buf.write(struct.pack("<Q", bundle.seed))
    _write_str(buf, bundle.spec_name)
    meta = ";".join(f"{k}={v}" for k, v in sorted(bundle.meta.items()))
    _write_str(buf, meta)
    records = []
    for name in sorted(bundle.tensors):
        kern, bias = bundle.tensors[name]
        records.append((f"{name}.kernel", kern))
        records.append((f"{name}.bias", bias))
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        _write_str(buf, name)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(buf.getvalue())


def load_weights(path, spec: NetworkSpec | None = None) -> WeightBundle:
    """Read an .sfwb file; optionally validate shapes against a spec."""
    raw = Path(path).read_bytes()
    reader = _Reader(raw, str(path))
    if reader.take(4, "magic") != MAGIC:
        raise WeightFormatError(f"{path}: bad magic bytes, not a weight bundle")
    version = reader.u32("version")
    if version != FORMAT_VERSION:
        raise WeightVersionError(
            f"{path}: format version {version}, expected {FORMAT_VERSION}"
        )
    seed = reader.u64("seed")
    spec_name = reader.string("spec name")
    meta_str = reader.string("metadata")
    meta = dict(item.split("=", 1) for item in meta_str.split(";") if item)
    count = reader.u32("record count")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = reader.string("record name")
        rank = reader.u8(f"rank of {name}")
        dims = tuple(reader.u32(f"dim of {name}") for _ in range(rank))
        n_bytes = int(np.prod(dims)) * 8 if dims else 8
        data = reader.take(n_bytes, f"data of {name}")
        arrays[name] = np.frombuffer(data, dtype="<f8").reshape(dims).copy()
    tensors: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for name in sorted(arrays):
        if name.endswith(".kernel"):
            base = name[: -len(".kernel")]
            bias_name = f"{base}.bias"
            if bias_name not in arrays:
                raise TruncatedWeightsError(f"{path}: layer {base!r} has kernel but no bias")
            tensors[base] = (arrays[name], arrays[bias_name])
    bundle = WeightBundle(
        spec_name=spec_name, seed=seed, tensors=tensors, version=version, meta=meta
    )
    if spec is not None:
        _check_bundle(spec, bundle)
    return bundle


def _write_str(buf, text: str) -> None:
    raw = text.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


class _Reader:
    def __init__(self, raw: bytes, origin: str):
        self.raw = raw
        self.pos = 0
        self.origin = origin

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedWeightsError(
                f"{self.origin}: truncated while reading {what} "
                f"(need {n} bytes at offset {self.pos}, have {len(self.raw) - self.pos})"
            )
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self, what: str) -> int:
        return struct.unpack("<B", self.take(1, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def string(self, what: str) -> str:
        length = struct.unpack("<H", self.take(2, what))[0]
        return self.take(length, what).decode("utf-8")
