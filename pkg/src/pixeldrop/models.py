"""Small residual convnets and their checkpoint format.

The architecture is the classic image-classification residual family at desk
scale: a 3x3 stem, three stages of n two-conv residual blocks (widths
16/32/64, spatial halving between stages via strided convs and 1x1
projection shortcuts), global average pooling and a linear head. Total
weighted layers 6n+2. Post-activation ordering: conv -> norm -> relu.

Checkpoints are a single binary file: magic "PXDROP1", a little-endian
uint64 header length, a canonical JSON header (spec, metadata, tensor
manifest with byte offsets), then raw float32 little-endian tensor data.
Loading and re-saving a checkpoint is byte-identical.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import rng_for

MAGIC = b"PXDROP1"
DEFAULT_WIDTHS = (16, 32, 64)


@dataclass
class ModelSpec:
    """Architecture hyperparameters: depth parameter n gives 6n+2 layers."""

    n: int = 1
    widths: tuple = DEFAULT_WIDTHS
    num_classes: int = 10
    side: int = 32

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.n < 1:
            raise ValueError(f"depth parameter n must be >= 1, got {self.n}")
        if len(self.widths) != 3 or any(w <= 0 for w in self.widths):
            raise ValueError(f"need three positive stage widths, got {self.widths}")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.side < 8:
            raise ValueError(f"input side must be >= 8, got {self.side}")

    @property
    def total_layers(self):
        return 6 * self.n + 2

    def to_dict(self):
        return {"n": self.n, "widths": list(self.widths),
                "num_classes": self.num_classes, "side": self.side}

    @classmethod
    def from_dict(cls, d):
        return cls(n=d["n"], widths=tuple(d["widths"]),
                   num_classes=d["num_classes"], side=d["side"])


class _Conv:
    """3x3 or 1x1 convolution, no bias (normalization supplies the shift)."""

    def __init__(self, model, name, in_ch, out_ch, ksize, stride, rng, dtype):
        fan_in = in_ch * ksize * ksize
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, ksize, ksize))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.stride = stride
        self.padding = ksize // 2
        model._register(f"{name}.weight", self.weight)

    def __call__(self, x, training):
        return ad.conv2d(x, self.weight, stride=self.stride, padding=self.padding)


class _Norm:
    """Per-channel statistic normalization with learned scale and shift."""

    def __init__(self, model, name, channels, dtype):
        self.gamma = Tensor(np.ones((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        model._register(f"{name}.gamma", self.gamma)
        model._register(f"{name}.beta", self.beta)
        model._register_buffer(f"{name}.running_mean", self.running_mean)
        model._register_buffer(f"{name}.running_var", self.running_var)

    def __call__(self, x, training, update_stats=None):
        return ad.batch_stat_norm(x, self.gamma, self.beta,
                                  self.running_mean, self.running_var, training,
                                  update_running=update_stats)


class _Block:
    """Two 3x3 convs with identity or strided 1x1 projection shortcut."""

    def __init__(self, model, name, in_ch, out_ch, stride, rng, dtype):
        self.conv1 = _Conv(model, f"{name}.conv1", in_ch, out_ch, 3, stride, rng, dtype)
        self.norm1 = _Norm(model, f"{name}.norm1", out_ch, dtype)
        self.conv2 = _Conv(model, f"{name}.conv2", out_ch, out_ch, 3, 1, rng, dtype)
        self.norm2 = _Norm(model, f"{name}.norm2", out_ch, dtype)
        if stride != 1 or in_ch != out_ch:
            self.proj = _Conv(model, f"{name}.proj", in_ch, out_ch, 1, stride, rng, dtype)
            self.proj_norm = _Norm(model, f"{name}.proj_norm", out_ch, dtype)
        else:
            self.proj = None

    def __call__(self, x, training, update_stats=None):
        h = ad.relu(self.norm1(self.conv1(x, training), training, update_stats))
        h = self.norm2(self.conv2(h, training), training, update_stats)
        shortcut = x
        if self.proj is not None:
            shortcut = self.proj_norm(self.proj(x, training), training, update_stats)
        return ad.relu(h + shortcut)


class Model:
    """A built network: ordered named parameters, buffers, and a forward pass."""

    def __init__(self, spec: ModelSpec, init_seed: int, dtype=np.float32):
        self.spec = spec
        self._params = {}
        self._buffers = {}
        rng = rng_for(init_seed, "init")
        w1, w2, w3 = spec.widths

        self.stem_conv = _Conv(self, "stem", 3, w1, 3, 1, rng, dtype)
        self.stem_norm = _Norm(self, "stem_norm", w1, dtype)
        self.blocks = []
        for stage, (width, in_width) in enumerate(
                [(w1, w1), (w2, w1), (w3, w2)]):
            for b in range(spec.n):
                stride = 2 if (stage > 0 and b == 0) else 1
                in_ch = in_width if b == 0 else width
                self.blocks.append(
                    _Block(self, f"stage{stage}.block{b}", in_ch, width, stride, rng, dtype))
        # Zero-initialized head: a fresh model outputs exactly uniform
        # probabilities, which keeps early training well-conditioned.
        self.head_weight = Tensor(np.zeros((w3, spec.num_classes), dtype=dtype),
                                  requires_grad=True)
        self.head_bias = Tensor(np.zeros((1, spec.num_classes), dtype=dtype),
                                requires_grad=True)
        self._register("head.weight", self.head_weight)
        self._register("head.bias", self.head_bias)

    def _register(self, name, tensor):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name}")
        self._params[name] = tensor

    def _register_buffer(self, name, arr):
        if name in self._buffers:
            raise ValueError(f"duplicate buffer name {name}")
        self._buffers[name] = arr

    def parameters(self):
        return list(self._params.items())

    def buffers(self):
        return list(self._buffers.items())

    def requires_grad_(self, flag: bool):
        for t in self._params.values():
            t.requires_grad = flag
        return self

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def forward(self, x, training=False, update_stats=None):
        """Batch [N,3,side,side] -> logits [N,num_classes].

        ``update_stats`` (default: same as ``training``) can be cleared for
        a training-mode pass that must leave the running buffers untouched.
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        n, c, h, w = x.data.shape
        if c != 3 or h != self.spec.side or w != self.spec.side:
            raise ValueError(
                f"expected [N,3,{self.spec.side},{self.spec.side}] input, got {x.data.shape}")
        h1 = ad.relu(self.stem_norm(self.stem_conv(x, training), training, update_stats))
        for block in self.blocks:
            h1 = block(h1, training, update_stats)
        pooled = ad.global_avg_pool(h1)
        return (pooled @ self.head_weight) + self.head_bias

    def param_count(self):
        return sum(t.data.size for t in self._params.values())


def build(spec: ModelSpec, init_seed: int, dtype=np.float32) -> Model:
    """Construct a freshly initialized model; same seed, same weights."""
    return Model(spec, init_seed, dtype)


@dataclass
class Checkpoint:
    """A serialized model: spec, all named tensors, and training metadata."""

    spec: ModelSpec
    tensors: dict
    meta: dict = field(default_factory=dict)


def checkpoint_from_model(model: Model, meta=None) -> Checkpoint:
    tensors = {}
    for name, t in model.parameters():
        tensors[name] = t.data.astype(np.float32, copy=True)
    for name, arr in model.buffers():
        tensors[name] = arr.astype(np.float32, copy=True)
    return Checkpoint(spec=model.spec, tensors=tensors, meta=dict(meta or {}))


def model_from_checkpoint(ckpt: Checkpoint, dtype=np.float32) -> Model:
    """Rebuild a runnable model carrying exactly the checkpoint's tensors."""
    model = Model(ckpt.spec, init_seed=0, dtype=dtype)
    expected = [n for n, _ in model.parameters()] + [n for n, _ in model.buffers()]
    missing = [n for n in expected if n not in ckpt.tensors]
    extra = [n for n in ckpt.tensors if n not in expected]
    if missing or extra:
        raise ValueError(f"checkpoint manifest mismatch: missing {missing}, extra {extra}")
    for name, t in model.parameters():
        stored = ckpt.tensors[name]
        if stored.shape != t.data.shape:
            raise ValueError(f"{name}: stored shape {stored.shape} != model {t.data.shape}")
        t.data = stored.astype(dtype, copy=True)
    for name, arr in model.buffers():
        arr[...] = ckpt.tensors[name]
    return model


def write_container(path, extra_header: dict, tensors: dict):
    """Write the PXDROP1 container: magic, uint64 LE header length, canonical
    JSON header (extra fields + tensor manifest), raw float32 LE data."""
    manifest = []
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    header_fields = dict(extra_header)
    header_fields["tensors"] = manifest
    header = json.dumps(header_fields, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.array([len(header)], dtype="<u8").tobytes())
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_container(path):
    """Read a PXDROP1 container back as (header dict, {name: float32 array})."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    hlen = int(np.frombuffer(blob, dtype="<u8", count=1, offset=len(MAGIC))[0])
    start = len(MAGIC) + 8
    header = json.loads(blob[start:start + hlen].decode("utf-8"))
    data = blob[start + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(shape).copy()
    return header, tensors


def save_checkpoint(path, ckpt: Checkpoint):
    """Write a model checkpoint; loading and re-saving is byte-identical."""
    write_container(path, {"spec": ckpt.spec.to_dict(), "meta": ckpt.meta},
                    ckpt.tensors)


def load_checkpoint(path) -> Checkpoint:
    header, tensors = read_container(path)
    if "spec" not in header:
        raise ValueError(f"{path}: container carries no model spec")
    return Checkpoint(spec=ModelSpec.from_dict(header["spec"]),
                      tensors=tensors, meta=header["meta"])
