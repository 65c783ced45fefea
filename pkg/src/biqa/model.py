"""Two-stream fusion model: backbones -> GAP -> spatial attention -> channel
attention -> flatten -> concatenate -> dense head -> linear output.

Backbones come in two variants. A `toy_cnn` is a stack of conv3x3+relu stages
with optional 2x max-pool downsampling, trained end to end. A `feature_file`
stream reads one precomputed descriptor per image from disk (little-endian
float32, `<feature_dir>/<image stem>.f32`), so externally extracted features
can be fused without re-implementing their networks; such streams are frozen
by construction. Each enabled stream ends in a (N,1,1,C) descriptor that the
attention blocks gate before the head.

Checkpoints are a binary container: magic "BIQA", little-endian uint32
version, length-prefixed JSON (model config + training metadata), then one
record per parameter: uint32 name length, name bytes, uint32 rank, uint32
extents, float32 values. Records run to end of file.
"""

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from biqa import attention as att
from biqa import autodiff as ad
from biqa.errors import CorruptCheckpoint, InvalidConfig, ParseError, ShapeMismatch

CHECKPOINT_MAGIC = b"BIQA"
CHECKPOINT_VERSION = 1

ABLATION_SWITCHES = frozenset({"no_stream_a", "no_stream_b", "no_spatial", "no_channel"})


@dataclass
class StageSpec:
    out_channels: int
    convs: int = 2
    downsample: bool = True


@dataclass
class BackboneSpec:
    variant: str = "toy_cnn"  # "toy_cnn" | "feature_file"
    stages: list = field(default_factory=lambda: [
        StageSpec(16), StageSpec(32), StageSpec(64)])
    feature_width: int = 0
    feature_dir: str = ""

    def out_width(self):
        if self.variant == "toy_cnn":
            return self.stages[-1].out_channels
        return self.feature_width


@dataclass
class ModelConfig:
    input_size: tuple = (224, 224)
    stream_a: BackboneSpec = field(default_factory=BackboneSpec)
    stream_b: BackboneSpec = field(default_factory=BackboneSpec)
    enable_stream_a: bool = True
    enable_stream_b: bool = True
    enable_spatial_attention: bool = True
    enable_channel_attention: bool = True
    head_widths: list = field(default_factory=lambda: [1024, 512, 256])
    head_dropout: list = field(default_factory=lambda: [0.25, 0.25, 0.5])
    num_outputs: int = 1

    def validate(self):
        if not (self.enable_stream_a or self.enable_stream_b):
            raise InvalidConfig("at least one stream must be enabled")
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise InvalidConfig(f"bad input size {self.input_size}")
        if not self.head_widths or any(w < 1 for w in self.head_widths):
            raise InvalidConfig(f"head widths must be positive: {self.head_widths}")
        if len(self.head_dropout) != len(self.head_widths):
            raise InvalidConfig("head_dropout must match head_widths in length")
        if any(not 0.0 <= r < 1.0 for r in self.head_dropout):
            raise InvalidConfig(f"dropout rates must be in [0,1): {self.head_dropout}")
        if self.num_outputs < 1:
            raise InvalidConfig("num_outputs must be positive")
        for name, spec in (("stream_a", self.stream_a), ("stream_b", self.stream_b)):
            if spec.variant == "toy_cnn":
                if not spec.stages:
                    raise InvalidConfig(f"{name}: toy backbone needs at least one stage")
                for st in spec.stages:
                    if st.out_channels < 1 or st.convs < 1:
                        raise InvalidConfig(f"{name}: bad stage {st}")
            elif spec.variant == "feature_file":
                if spec.feature_width < 1:
                    raise InvalidConfig(f"{name}: feature_width must be positive")
            else:
                raise InvalidConfig(f"{name}: unknown backbone variant {spec.variant!r}")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            d = dict(d)
            for key in ("stream_a", "stream_b"):
                sd = dict(d[key])
                sd["stages"] = [StageSpec(**dict(s)) for s in sd.get("stages", [])]
                d[key] = BackboneSpec(**sd)
            d["input_size"] = tuple(d["input_size"])
            cfg = cls(**d)
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidConfig(f"malformed model config: {e}") from e
        return cfg.validate()

    @classmethod
    def from_json_file(cls, path):
        try:
            with open(path) as f:
                return cls.from_dict(json.load(f))
        except json.JSONDecodeError as e:
            raise InvalidConfig(f"{path}: not valid JSON ({e})") from e


def ablate(config, switches):
    """Variant config with parts of the network removed; identity for no switches."""
    unknown = set(switches) - ABLATION_SWITCHES
    if unknown:
        raise InvalidConfig(f"unknown ablation switches: {sorted(unknown)}")
    cfg = dataclasses.replace(
        config,
        enable_stream_a=config.enable_stream_a and "no_stream_a" not in switches,
        enable_stream_b=config.enable_stream_b and "no_stream_b" not in switches,
        enable_spatial_attention=config.enable_spatial_attention and "no_spatial" not in switches,
        enable_channel_attention=config.enable_channel_attention and "no_channel" not in switches,
    )
    return cfg.validate()


class Model:
    """A built network: config plus parameter store. Eval-mode forward is a
    pure function of (parameters, input); train mode additionally consumes
    batch statistics and the supplied dropout generator."""

    def __init__(self, config, params, dtype):
        self.config = config
        self.params = params
        self.dtype = dtype
        self._spatial = {}
        self._channel = {}

    # --- structure ---

    def _streams(self):
        cfg = self.config
        out = []
        if cfg.enable_stream_a:
            out.append(("stream_a", cfg.stream_a))
        if cfg.enable_stream_b:
            out.append(("stream_b", cfg.stream_b))
        return out

    def concat_width(self):
        return sum(spec.out_width() for _, spec in self._streams())

    def conv_layer_names(self):
        names = []
        for sname, spec in self._streams():
            if spec.variant != "toy_cnn":
                continue
            for i, st in enumerate(spec.stages):
                for j in range(st.convs):
                    names.append(f"{sname}.stage{i}.conv{j}")
        return names

    # --- forward ---

    def forward(self, batch, mode, rng=None, paths=None, capture=None):
        cfg = self.config
        x_in = batch if isinstance(batch, ad.Tensor) else ad.Tensor(batch, dtype=self.dtype)
        n, h, w, c = x_in.shape if x_in.data.ndim == 4 else (0, 0, 0, 0)
        if (h, w) != tuple(cfg.input_size) or c != 3:
            raise ShapeMismatch(
                f"batch {x_in.shape} does not match input size {cfg.input_size} x 3")
        if mode == "train" and rng is None and any(r > 0 for r in cfg.head_dropout):
            raise ValueError("train-mode forward needs a dropout generator")

        feats = []
        for sname, spec in self._streams():
            if spec.variant == "toy_cnn":
                x = x_in
                for i, st in enumerate(spec.stages):
                    for j in range(st.convs):
                        kern = self.params[f"{sname}.stage{i}.conv{j}.kernel"]
                        bias = self.params[f"{sname}.stage{i}.conv{j}.bias"]
                        x = ad.relu(ad.conv2d_3x3(x, kern, bias))
                        if capture is not None:
                            capture[f"{sname}.stage{i}.conv{j}"] = x
                    if st.downsample:
                        x = ad.maxpool2x2(x)
                x = ad.pool(x, "avg", "spatial")  # (N,1,1,C)
            else:
                x = ad.Tensor(self._load_features(spec, paths, n), dtype=self.dtype)
            if cfg.enable_spatial_attention:
                x = att.spatial_attention(x, self._spatial[sname])
            if cfg.enable_channel_attention:
                x = att.channel_attention(x, self._channel[sname])
            flat = ad.flatten(x)
            if capture is not None:
                capture[f"{sname}.features"] = flat
            feats.append(flat)

        z = feats[0] if len(feats) == 1 else ad.concat_last_axis(feats[0], feats[1])
        for i, rate in enumerate(cfg.head_dropout):
            z = ad.relu(ad.dense(z, self.params[f"head.fc{i}.w"], self.params[f"head.fc{i}.b"]))
            z = ad.batchnorm(z, self.params[f"head.bn{i}.gamma"], self.params[f"head.bn{i}.beta"],
                             self.params[f"head.bn{i}.running_mean"].data,
                             self.params[f"head.bn{i}.running_var"].data, mode)
            z = ad.dropout(z, rate, mode, rng)
        return ad.dense(z, self.params["head.out.w"], self.params["head.out.b"])

    def predict(self, batch, paths=None):
        """Eval-mode predictions as a plain (N, num_outputs) array."""
        return self.forward(batch, "eval", paths=paths).data.copy()

    def _load_features(self, spec, paths, n):
        if paths is None:
            raise ValueError("feature_file stream needs the image paths")
        if len(paths) != n:
            raise ShapeMismatch(f"{len(paths)} paths for a batch of {n}")
        out = np.empty((n, 1, 1, spec.feature_width), dtype=self.dtype)
        for i, p in enumerate(paths):
            fpath = Path(spec.feature_dir) / (Path(p).stem + ".f32")
            vec = np.fromfile(fpath, dtype="<f4")
            if vec.size != spec.feature_width:
                raise ParseError(
                    f"{fpath}: expected {spec.feature_width} floats, found {vec.size}")
            out[i, 0, 0, :] = vec
        return out


def build_model(config, seed, dtype=np.float32):
    """Instantiate parameters for `config` from the given seed.

    He-uniform initialization ahead of relu, Glorot-uniform ahead of sigmoid
    or the linear output, zero biases, unit-gamma/zero-beta normalization.
    Parameter creation order is fixed, so equal seeds give bit-identical
    stores.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    store = ad.ParamStore()
    model = Model(config, store, dtype)

    for sname, spec in model._streams():
        if spec.variant == "toy_cnn":
            cin = 3
            for i, st in enumerate(spec.stages):
                for j in range(st.convs):
                    store.add(f"{sname}.stage{i}.conv{j}.kernel",
                              att.he_uniform(rng, (3, 3, cin, st.out_channels), dtype))
                    store.add(f"{sname}.stage{i}.conv{j}.bias",
                              np.zeros(st.out_channels, dtype=dtype))
                    cin = st.out_channels
        width = spec.out_width()
        if config.enable_spatial_attention:
            model._spatial[sname] = att.init_spatial_attention(store, f"{sname}.spatial", rng, dtype)
        if config.enable_channel_attention:
            model._channel[sname] = att.init_channel_attention(store, f"{sname}.channel", width, rng, dtype)

    fan_in = model.concat_width()
    for i, width in enumerate(config.head_widths):
        store.add(f"head.fc{i}.w", att.he_uniform(rng, (fan_in, width), dtype))
        store.add(f"head.fc{i}.b", np.zeros(width, dtype=dtype))
        store.add(f"head.bn{i}.gamma", np.ones(width, dtype=dtype))
        store.add(f"head.bn{i}.beta", np.zeros(width, dtype=dtype))
        store.add(f"head.bn{i}.running_mean", np.zeros(width, dtype=dtype), trainable=False)
        store.add(f"head.bn{i}.running_var", np.ones(width, dtype=dtype), trainable=False)
        fan_in = width
    store.add("head.out.w", att.glorot_uniform(rng, (fan_in, config.num_outputs), dtype))
    store.add("head.out.b", np.zeros(config.num_outputs, dtype=dtype))
    return model


# --- checkpoint serialization ---

def save_checkpoint(model, path, meta=None):
    doc = json.dumps({"config": model.config.to_dict(), "meta": meta or {}},
                     sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC,
             struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack("<I", len(doc)), doc]
    for name, entry in model.params.entries():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(entry.tensor.data, dtype="<f4")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise CorruptCheckpoint(f"truncated checkpoint while reading {what}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def done(self):
        return self.pos == len(self.blob)


def load_checkpoint(path, expect_config=None):
    """Rebuild a model (always float32) from a checkpoint; returns (model, meta)."""
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic bytes")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported version {version}")
    doc = r.take(r.u32("header length"), "header")
    try:
        parsed = json.loads(doc.decode("utf-8"))
        config = ModelConfig.from_dict(parsed["config"])
        meta = parsed.get("meta", {})
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, InvalidConfig) as e:
        raise CorruptCheckpoint(f"{path}: bad header ({e})") from e
    if expect_config is not None and config != expect_config:
        raise CorruptCheckpoint(f"{path}: config mismatch: checkpoint was built "
                                f"for a different model configuration")

    model = build_model(config, seed=0, dtype=np.float32)
    seen = set()
    while not r.done():
        name = r.take(r.u32("name length"), "name").decode("utf-8", errors="replace")
        rank = r.u32("rank")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, "extents"))
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(r.take(4 * count, f"values of {name}"), dtype="<f4")
        if name not in model.params:
            raise CorruptCheckpoint(f"{path}: unknown parameter {name!r}")
        if name in seen:
            raise CorruptCheckpoint(f"{path}: duplicate parameter {name!r}")
        tensor = model.params[name]
        if tuple(shape) != tensor.shape:
            raise CorruptCheckpoint(
                f"{path}: parameter {name!r} has shape {shape}, expected {tensor.shape}")
        tensor.data[...] = values.reshape(shape)
        seen.add(name)
    missing = [n for n in model.params.names() if n not in seen]
    if missing:
        raise CorruptCheckpoint(f"{path}: missing parameters {missing[:3]}...")
    return model, meta
