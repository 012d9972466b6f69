"""Hash-grid encoded MLPs: the radiance network and the parameter networks."""
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .autodiff import Parameter, TapeValue, constant, leaky_relu, linear, make_op, concat, sigmoid, softplus


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 16
    base_resolution: int = 2
    max_resolution: int = 2 ** 16
    features_per_level: int = 2
    table_size: int = 2 ** 17

    @classmethod
    def desk(cls, **kw):
        kw.setdefault("levels", 8)
        kw.setdefault("table_size", 2 ** 14)
        return cls(**kw)

    @property
    def resolutions(self):
        if self.levels == 1:
            return np.array([self.base_resolution], dtype=np.int64)
        growth = math.exp((math.log(self.max_resolution) - math.log(self.base_resolution)) / (self.levels - 1))
        res = []
        for lvl in range(self.levels):
            r = int(math.floor(self.base_resolution * growth ** lvl + 1e-9))
            if res and r <= res[-1]:
                r = res[-1] + 1
            res.append(r)
        return np.array(res, dtype=np.int64)

    @property
    def output_dim(self):
        return self.levels * self.features_per_level


def init_hash_table(config: HashGridConfig, rng, dtype=np.float32, scale=1e-4):
    return rng.uniform(-scale, scale, size=(config.levels * config.table_size, config.features_per_level)).astype(dtype)


def hash_encode(x, config: HashGridConfig, table) -> TapeValue:
    """Concatenated per-level trilinear features of points ``x`` in [0, 1]^3.

    ``table`` is the ``(levels * table_size, features)`` array, either as a
    tape leaf (gradients scatter back into the touched entries) or constant.
    """
    table = constant(table)
    pos = np.clip(np.asarray(x, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
    tv = table.value
    feats, idx, wts = kernels.hash_grid_forward(pos, config.resolutions, tv, config.table_size)
    n_rows, nfeat = tv.shape

    def vjp(g):
        return kernels.hash_grid_backward(idx, wts, np.ascontiguousarray(g, dtype=tv.dtype), n_rows, nfeat)
    return make_op(feats, [(table, vjp)])


@dataclass(frozen=True)
class MlpSpec:
    input_width: int
    hidden_layers: int
    hidden_width: int
    output_width: int
    output_activation: str = "softplus"
    slope: float = 0.01

    @property
    def layer_shapes(self):
        widths = [self.input_width] + [self.hidden_width] * self.hidden_layers + [self.output_width]
        return list(zip(widths[:-1], widths[1:]))


def init_mlp(spec: MlpSpec, rng, dtype=np.float32, prefix="mlp"):
    """Glorot-uniform weights, zero biases."""
    params = []
    for k, (fan_in, fan_out) in enumerate(spec.layer_shapes):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        params.append(Parameter(f"{prefix}.w{k}", rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)))
        params.append(Parameter(f"{prefix}.b{k}", np.zeros(fan_out, dtype=dtype)))
    return params


_OUTPUT = {"softplus": softplus, "sigmoid": sigmoid, "none": lambda v: v}


def mlp_forward(spec: MlpSpec, weights, x, activate_output=True) -> TapeValue:
    """Affine layers with leaky-ReLU hidden activations.

    ``weights`` alternates ``w0, b0, w1, b1, ...`` (arrays or tape values).
    """
    x = constant(x)
    if x.shape[-1] != spec.input_width:
        raise ValueError(f"input width {x.shape[-1]} != {spec.input_width}")
    if len(weights) != 2 * len(spec.layer_shapes):
        raise ValueError("weight list does not match the layer layout")
    h = x
    last = len(spec.layer_shapes) - 1
    for k in range(len(spec.layer_shapes)):
        h = linear(h, weights[2 * k], weights[2 * k + 1])
        if k < last:
            h = leaky_relu(h, spec.slope)
    return _OUTPUT[spec.output_activation](h) if activate_output else h


def _bind(params, tape):
    if tape is None:
        return [constant(p.data) for p in params]
    return [tape.watch(p) for p in params]


class EncodedMLP:
    """hash_encode(x) (+ extra inputs) -> MLP."""

    def __init__(self, name, hash_config, hidden_layers, hidden_width, output_width, extra_inputs=0,
                 output_activation="softplus", seed=0, dtype=np.float32, bounds=None):
        rng = np.random.default_rng(seed)
        self.name = name
        self.hash_config = hash_config
        self.dtype = np.dtype(dtype)
        self.spec = MlpSpec(hash_config.output_dim + extra_inputs, hidden_layers, hidden_width, output_width,
                            output_activation)
        self.table = Parameter(f"{name}.hash", init_hash_table(hash_config, rng, self.dtype))
        self.weights = init_mlp(self.spec, rng, self.dtype, prefix=name)
        self.bounds = bounds if bounds is not None else (np.zeros(3), np.ones(3))

    @property
    def params(self):
        return [self.table] + self.weights

    def normalize(self, x):
        lo, hi = self.bounds
        return np.clip((np.asarray(x, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)

    def forward(self, x, extra=None, tape=None, activate_output=True):
        table, *weights = _bind(self.params, tape)
        enc = hash_encode(self.normalize(x), self.hash_config, table)
        if extra is not None:
            parts = extra if isinstance(extra, (list, tuple)) else [extra]
            parts = [p if isinstance(p, TapeValue) else constant(np.asarray(p, dtype=self.dtype)) for p in parts]
            enc = concat([enc] + parts, axis=1)
        return mlp_forward(self.spec, weights, enc, activate_output)

    def config_dict(self):
        return {"name": self.name, "hash": asdict(self.hash_config), "mlp": asdict(self.spec),
                "dtype": self.dtype.name, "bounds": [list(map(float, self.bounds[0])), list(map(float, self.bounds[1]))]}


class RadianceField(EncodedMLP):
    """Outgoing radiance from (position, direction, normal, albedo)."""

    def __init__(self, bounds=None, hash_config=None, hidden_layers=3, hidden_width=64, seed=0,
                 dtype=np.float32, name="radiance"):
        super().__init__(name, hash_config or HashGridConfig.desk(), hidden_layers, hidden_width, 3,
                         extra_inputs=9, output_activation="softplus", seed=seed, dtype=dtype, bounds=bounds)

    @classmethod
    def paper_config(cls, bounds=None, **kw):
        return cls(bounds, HashGridConfig(), hidden_layers=3, hidden_width=256, **kw)

    def query(self, x, wo, n, albedo, tape=None) -> TapeValue:
        x = np.asarray(x).reshape(-1, 3)
        geo = np.concatenate([np.asarray(wo).reshape(-1, 3), np.asarray(n).reshape(-1, 3)], axis=1)
        if not isinstance(albedo, TapeValue):
            albedo = np.broadcast_to(np.asarray(albedo), (len(x), 3))
        return self.forward(x, [geo, albedo], tape)

    def set_constant(self, value):
        """Make the field output ``value`` everywhere (zero weights, matched output bias)."""
        value = np.broadcast_to(np.asarray(value, dtype=np.float64), (3,))
        for w in self.weights:
            w.data[:] = 0
        self.weights[-1].data[:] = np.log(np.expm1(value)).astype(self.dtype)
        return self

    def save(self, path):
        save_checkpoint(path, {"kind": "radiance_field", **self.config_dict()}, self.params)

    @classmethod
    def load(cls, path):
        header, tensors = load_checkpoint(path)
        field = cls(bounds=(np.array(header["bounds"][0]), np.array(header["bounds"][1])),
                    hash_config=HashGridConfig(**header["hash"]), hidden_layers=header["mlp"]["hidden_layers"],
                    hidden_width=header["mlp"]["hidden_width"], dtype=header["dtype"], name=header["name"])
        for p in field.params:
            p.data = tensors[p.name].astype(field.dtype)
        return field


def radiance_query(field, x, wo, n, albedo_hint, tape=None):
    return field.query(x, wo, n, albedo_hint, tape)


# ---------------------------------------------------------------------------
# checkpoint file: text header, then flat little-endian float32 tensors
# (float64 tensors, e.g. scene logits, are stored as float64 and tagged in the header)

MAGIC = "RADIPRIOR-CHECKPOINT 1"


def _storage_dtype(a):
    return "<f8" if np.asarray(a).dtype == np.float64 else "<f4"


def save_checkpoint(path, config, params):
    header = dict(config)
    header["tensors"] = []
    for p in params:
        rec = {"name": p.name, "shape": list(p.data.shape)}
        if _storage_dtype(p.data) != "<f4":
            rec["dtype"] = _storage_dtype(p.data)
        header["tensors"].append(rec)
    with open(path, "wb") as f:
        f.write((MAGIC + "\n" + json.dumps(header, sort_keys=True) + "\nEND\n").encode("utf-8"))
        for p in params:
            f.write(np.ascontiguousarray(p.data, dtype=_storage_dtype(p.data)).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.readline().decode("utf-8").rstrip("\n")
        if magic != MAGIC:
            raise ValueError(f"{path}: not a radiprior checkpoint")
        header = json.loads(f.readline().decode("utf-8"))
        if f.readline() != b"END\n":
            raise ValueError(f"{path}: malformed checkpoint header")
        tensors = {}
        for t in header["tensors"]:
            dt = np.dtype(t.get("dtype", "<f4"))
            count = int(np.prod(t["shape"])) if t["shape"] else 1
            buf = f.read(dt.itemsize * count)
            if len(buf) != dt.itemsize * count:
                raise ValueError(f"{path}: truncated tensor {t['name']}")
            tensors[t["name"]] = np.frombuffer(buf, dtype=dt).reshape(t["shape"]).astype(dt.newbyteorder("="))
    return header, tensors
