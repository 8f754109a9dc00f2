"""Signal translators: fully connected nets, 1D/2D U-Nets, SE blocks, averaging."""

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import InvalidSpec, ShapeError
from .rng import CounterRNG

CHECKPOINT_MAGIC = b"SSTK1"
CHECKPOINT_VERSION = 1
KINDS = ("fully_connected", "unet1d", "unet2d")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    window_len: int
    hidden_units: int = 20
    layers: int = 1  # hidden layers, fully connected only
    depth: int = 3
    base_channels: int = 16
    se_enabled: bool = False
    se_reduction: int = 8

    def validate(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.window_len < 1:
            raise InvalidSpec("window_len must be positive")
        if self.kind == "fully_connected":
            if self.hidden_units < 1 or self.layers < 1:
                raise InvalidSpec("fully connected nets need hidden_units >= 1 and layers >= 1")
            return self
        if self.depth < 1 or self.base_channels < 1 or self.se_reduction < 1:
            raise InvalidSpec("depth, base_channels and se_reduction must be positive")
        step = 2 ** self.depth
        if self.kind == "unet1d" and self.window_len % step:
            raise InvalidSpec(f"unet1d window {self.window_len} not divisible by 2**{self.depth}")
        if self.kind == "unet2d":
            side = math.isqrt(self.window_len)
            if side * side != self.window_len:
                raise InvalidSpec(f"unet2d window {self.window_len} is not a perfect square")
            if side % step:
                raise InvalidSpec(f"unet2d side {side} not divisible by 2**{self.depth}")
        return self

    @property
    def side(self):
        return math.isqrt(self.window_len)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown ModelSpec fields: {sorted(unknown)}")
        return cls(**d)


def _se_shapes(prefix, c, reduction):
    hidden = max(1, c // reduction)
    return [(f"{prefix}.se.fc1.weight", (c, hidden)), (f"{prefix}.se.fc1.bias", (hidden,)),
            (f"{prefix}.se.fc2.weight", (hidden, c)), (f"{prefix}.se.fc2.bias", (c,))]


def param_shapes(spec):
    """Ordered ``(name, shape)`` list; a pure function of the spec."""
    spec.validate()
    if spec.kind == "fully_connected":
        shapes = []
        width = spec.window_len
        for i in range(spec.layers):
            shapes += [(f"fc{i + 1}.weight", (width, spec.hidden_units)), (f"fc{i + 1}.bias", (spec.hidden_units,))]
            width = spec.hidden_units
        shapes += [("out.weight", (width, spec.window_len)), ("out.bias", (spec.window_len,))]
        return shapes

    kernel = (3,) if spec.kind == "unet1d" else (3, 3)
    unit = (1,) if spec.kind == "unet1d" else (1, 1)
    chans = [spec.base_channels * 2 ** i for i in range(spec.depth + 1)]

    def conv(name, cout, cin, k=kernel):
        return [(f"{name}.weight", (cout, cin) + k), (f"{name}.bias", (cout,))]

    shapes = []
    cin = 1
    for i in range(spec.depth):
        shapes += conv(f"enc{i}.conv1", chans[i], cin) + conv(f"enc{i}.conv2", chans[i], chans[i])
        if spec.se_enabled:
            shapes += _se_shapes(f"enc{i}", chans[i], spec.se_reduction)
        cin = chans[i]
    shapes += conv("bottleneck.conv1", chans[-1], cin) + conv("bottleneck.conv2", chans[-1], chans[-1])
    for i in reversed(range(spec.depth)):
        shapes += conv(f"dec{i}.up", chans[i], chans[i + 1])
        shapes += conv(f"dec{i}.conv1", chans[i], 2 * chans[i]) + conv(f"dec{i}.conv2", chans[i], chans[i])
        if spec.se_enabled:
            shapes += _se_shapes(f"dec{i}", chans[i], spec.se_reduction)
    shapes += conv("head", 1, chans[0], unit)
    return shapes


def parameter_count(spec):
    return sum(int(np.prod(s)) for _, s in param_shapes(spec))


def _fans(shape):
    if len(shape) == 2:  # dense weights are stored (in, out)
        return shape[0], shape[1]
    receptive = int(np.prod(shape[2:]))
    return shape[1] * receptive, shape[0] * receptive


def se_block(x, w1, b1, w2, b2):
    """Squeeze (channel means), excite (bottleneck MLP + sigmoid), rescale channels."""
    s = T.global_avg_pool(x)
    s = T.relu(T.add_bias(T.matmul(s, w1), b1))
    s = T.sigmoid(T.add_bias(T.matmul(s, w2), b2))
    return T.channel_scale(x, s)


class Model:
    def __init__(self, spec, params, seed=0):
        self.spec = spec.validate()
        self.seed = int(seed)
        self.extra = {}
        expected = param_shapes(spec)
        if [n for n, _ in expected] != list(params):
            raise InvalidSpec("parameter names do not match the model spec")
        for name, shape in expected:
            if tuple(params[name].shape) != tuple(shape):
                raise InvalidSpec(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.params = {n: p if isinstance(p, T.Tensor) else T.Tensor(p, requires_grad=True)
                       for n, p in params.items()}

    @property
    def n_params(self):
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def forward(self, x):
        """Map a batch of windows (N, window_len) to translated windows of the same shape."""
        x = T.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.spec.window_len:
            raise ShapeError(f"{self.spec.kind}: expected (N, {self.spec.window_len}) windows, got {x.shape}")
        if self.spec.kind == "fully_connected":
            return self._fc(x)
        n = x.shape[0]
        if self.spec.kind == "unet1d":
            y = self._unet(T.reshape(x, (n, 1, self.spec.window_len)), T.conv1d, T.maxpool1d, T.upsample_nearest1d)
        else:
            side = self.spec.side
            y = self._unet(T.reshape(x, (n, 1, side, side)), T.conv2d, T.maxpool2d, T.upsample_nearest2d)
        return T.reshape(y, (n, self.spec.window_len))

    __call__ = forward

    def _fc(self, x):
        p = self.params
        h = x
        for i in range(1, self.spec.layers + 1):
            h = T.relu(T.add_bias(T.matmul(h, p[f"fc{i}.weight"]), p[f"fc{i}.bias"]))
        return T.add_bias(T.matmul(h, p["out.weight"]), p["out.bias"])

    def _se(self, x, prefix):
        if not self.spec.se_enabled:
            return x
        p = self.params
        return se_block(x, p[f"{prefix}.se.fc1.weight"], p[f"{prefix}.se.fc1.bias"],
                        p[f"{prefix}.se.fc2.weight"], p[f"{prefix}.se.fc2.bias"])

    def _unet(self, x, conv, pool, upsample):
        p = self.params

        def cr(h, name):
            return T.relu(conv(h, p[f"{name}.weight"], p[f"{name}.bias"], pad=1))

        skips = []
        h = x
        for i in range(self.spec.depth):
            h = self._se(cr(cr(h, f"enc{i}.conv1"), f"enc{i}.conv2"), f"enc{i}")
            skips.append(h)
            h = pool(h)
        h = cr(cr(h, "bottleneck.conv1"), "bottleneck.conv2")
        for i in reversed(range(self.spec.depth)):
            h = conv(upsample(h), p[f"dec{i}.up.weight"], p[f"dec{i}.up.bias"], pad=1)
            h = T.concat([h, skips[i]], axis=1)
            h = self._se(cr(cr(h, f"dec{i}.conv1"), f"dec{i}.conv2"), f"dec{i}")
        return conv(h, p["head.weight"], p["head.bias"], pad=0)

    def predict(self, windows, batch_size=64):
        """Inference on an (n, window_len) array, without recording a tape."""
        w = np.asarray(windows, dtype=np.float64)
        if w.ndim == 1:
            w = w[None, :]
        with T.no_grad():
            out = [self.forward(w[i:i + batch_size]).data for i in range(0, len(w), batch_size)]
        return np.concatenate(out, axis=0)

    def state_arrays(self):
        return {n: p.data for n, p in self.params.items()}

    def copy(self):
        m = Model(self.spec, {n: p.data.copy() for n, p in self.params.items()}, self.seed)
        m.extra = dict(self.extra)
        return m


def build(spec, seed=0):
    """Glorot-uniform weights, zero biases, one named RNG stream per parameter."""
    spec.validate()
    rng = CounterRNG(seed)
    params = {}
    for name, shape in param_shapes(spec):
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
            continue
        fan_in, fan_out = _fans(shape)
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.child(name).uniform(int(np.prod(shape)), -bound, bound).reshape(shape)
    return Model(spec, params, seed)


def model_avg(predictions):
    preds = [np.asarray(p, dtype=np.float64) for p in predictions]
    if len(preds) < 2:
        raise ShapeError("model_avg needs at least two member predictions")
    for p in preds[1:]:
        if p.shape != preds[0].shape:
            raise ShapeError(f"model_avg: member shapes {preds[0].shape} and {p.shape} differ")
    total = preds[0].copy()
    for p in preds[1:]:
        total = total + p
    return total / len(preds)


# -- checkpoints ----------------------------------------------------------------
# Layout: b"SSTK1\n" + compact sorted-key JSON manifest + b"\n" + little-endian
# float64 arrays concatenated in manifest order.

def checkpoint_bytes(model, extra=None):
    arrays, offset = [], 0
    for name, p in model.params.items():
        arrays.append({"name": name, "shape": list(p.shape), "offset": offset, "count": int(p.size)})
        offset += int(p.size)
    manifest = {"format_version": CHECKPOINT_VERSION, "spec": model.spec.to_dict(),
                "seed": model.seed, "arrays": arrays}
    extra = model.extra if extra is None else extra
    if extra:
        manifest["extra"] = extra
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in model.params.values())
    return CHECKPOINT_MAGIC + b"\n" + head + b"\n" + body


def model_from_bytes(blob):
    if not blob.startswith(CHECKPOINT_MAGIC + b"\n"):
        raise InvalidSpec("not a surroforge checkpoint (bad magic)")
    start = len(CHECKPOINT_MAGIC) + 1
    end = blob.index(b"\n", start)
    manifest = json.loads(blob[start:end])
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise InvalidSpec(f"unsupported checkpoint version {manifest.get('format_version')}")
    data = np.frombuffer(blob, dtype="<f8", offset=end + 1)
    params = {}
    for a in manifest["arrays"]:
        params[a["name"]] = data[a["offset"]:a["offset"] + a["count"]].astype(np.float64).reshape(a["shape"])
    model = Model(ModelSpec.from_dict(manifest["spec"]), params, manifest["seed"])
    model.extra = manifest.get("extra", {})
    return model


def save_checkpoint(model, path, extra=None):
    """Write atomically; ``extra`` (JSON-able) defaults to the model's own ``extra``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, extra))
    tmp.replace(path)
    return path


def load_checkpoint(path):
    return model_from_bytes(Path(path).read_bytes())
