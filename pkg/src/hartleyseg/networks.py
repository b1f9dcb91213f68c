"""HNOSeg, HartleyMHA and the FNO baseline, plus checkpoints.

All three networks share the same skeleton::

    input (C_in) -> stride-2 conv (kernel 2) -> N_B blocks -> transposed conv -> softmax

HNOSeg and HartleyMHA use residual blocks and deep-supervision heads; the
FNO baseline uses plain per-frequency Fourier layers without either.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import blocks as B

VARIANTS = ("hnoseg", "hartleymha", "fno")
DEFAULT_BLOCKS = {"hnoseg": 32, "hartleymha": 16, "fno": 32}

CHECKPOINT_MAGIC = b"HSEGCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _triple(value):
    if isinstance(value, str):
        value = [int(v) for v in value.split(",")]
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ValueError(f"expected three integers, got {value}")
    return value


@dataclass
class NetworkConfig:
    """Architecture hyperparameters (reference-scale defaults unless overridden)."""

    variant: str = "hnoseg"
    in_channels: int = 4
    n_classes: int = 4
    width: int = 12
    k_max: tuple = (14, 14, 10)
    n_blocks: int | None = None
    n_heads: int = 4
    deep_supervision_taps: tuple | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        self.k_max = _triple(self.k_max)
        if self.n_blocks is None:
            self.n_blocks = DEFAULT_BLOCKS[self.variant]
        for name in ("in_channels", "n_classes", "width", "n_blocks", "n_heads"):
            setattr(self, name, int(getattr(self, name)))
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.deep_supervision_taps is None:
            if self.variant == "fno":
                self.deep_supervision_taps = ()
            else:
                n = self.n_blocks
                self.deep_supervision_taps = tuple(sorted({n // 3, (2 * n) // 3}))
        elif isinstance(self.deep_supervision_taps, str):
            text = self.deep_supervision_taps.strip()
            self.deep_supervision_taps = tuple(int(t) for t in text.split(",")) if text else ()
        self.deep_supervision_taps = tuple(int(t) for t in self.deep_supervision_taps)
        if min(self.k_max) < 1:
            raise ValueError("k_max must be positive")
        if self.variant == "fno" and self.deep_supervision_taps:
            raise ValueError("the FNO baseline has no deep supervision")
        if any(not 0 <= t < self.n_blocks for t in self.deep_supervision_taps):
            raise ValueError("deep-supervision taps must index existing blocks")

    def to_text(self) -> str:
        """Canonical ``key=value`` lines, sorted by key."""
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, mapping) -> NetworkConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(mapping) - names
        if unknown:
            raise ValueError(f"unknown network keys: {sorted(unknown)}")
        kwargs = dict(mapping)
        if "n_blocks" in kwargs and kwargs["n_blocks"] in ("", "None"):
            kwargs["n_blocks"] = None
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> NetworkConfig:
        return cls.from_mapping(parse_key_values(text))


def parse_key_values(text: str) -> dict:
    """Parse a flat ``key=value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def _block_kind(variant):
    return {"hnoseg": "hno", "hartleymha": "mha"}.get(variant)


def param_shapes(config: NetworkConfig) -> dict:
    """Ordered parameter names and shapes; nothing is allocated."""
    d, c, k = config.width, config.n_classes, config.k_max
    shapes = {
        "input.W": (d, config.in_channels, 2, 2, 2),
        "input.b": (d,),
    }
    for i in range(config.n_blocks):
        if config.variant == "fno":
            layers = [("0", "fourier", 1)]
        else:
            second = "hartley_mha" if config.variant == "hartleymha" else "hartley_shared"
            layers = [("0", "hartley_shared", 1), ("1", second, config.n_heads)]
        for tag, kernel, heads in layers:
            for name, shape in B.layer_shapes(kernel, d, d, k, heads).items():
                shapes[f"block{i}.{tag}.{name}"] = shape
    shapes["head.W"] = (d, c, 2, 2, 2)
    shapes["head.b"] = (c,)
    for t in config.deep_supervision_taps:
        shapes[f"ds{t}.lin.W"] = (c, d)
        shapes[f"ds{t}.lin.b"] = (c,)
        shapes[f"ds{t}.up.W"] = (c, c, 2, 2, 2)
        shapes[f"ds{t}.up.b"] = (c,)
    return shapes


def count_params(config_or_model) -> int:
    """Number of learnable scalars (closed form from the config)."""
    if isinstance(config_or_model, Model):
        return int(sum(v.size for v in config_or_model.params.values()))
    return int(sum(math.prod(s) for s in param_shapes(config_or_model).values()))


def param_breakdown(config: NetworkConfig) -> dict:
    """Parameter subtotals for input, blocks, head and deep supervision."""
    groups = {"input": 0, "blocks": 0, "head": 0, "deep_supervision": 0}
    for name, shape in param_shapes(config).items():
        root = name.split(".", 1)[0]
        if root.startswith("block"):
            key = "blocks"
        elif root.startswith("ds"):
            key = "deep_supervision"
        else:
            key = root
        groups[key] += math.prod(shape)
    return groups


def _init(name, shape, rng):
    leaf = name.rsplit(".", 1)[1]
    if leaf in ("b", "beta"):
        return np.zeros(shape)
    if leaf == "gamma":
        return np.ones(shape)
    if leaf == "R":
        fan_out, fan_in = shape[-5:-3] if len(shape) >= 5 else shape[:2]
    elif len(shape) == 5:  # resampling convolutions
        a, b_ = shape[0], shape[1]
        fan_in, fan_out = (b_ * 8, a * 8) if name.startswith("input") else (a * 8, b_ * 8)
    else:
        fan_out, fan_in = shape[-2], shape[-1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class Model:
    config: NetworkConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def build(cls, config: NetworkConfig, seed: int = 0) -> Model:
        rng = np.random.default_rng(seed)
        params = {name: _init(name, shape, rng) for name, shape in param_shapes(config).items()}
        return cls(config, params)

    def count_params(self) -> int:
        return count_params(self)

    # ------------------------------------------------------------------ forward

    def forward(self, x, tape: ad.Tape | None = None, params: dict | None = None):
        """Class probabilities for one ``(channel, x, y, z)`` volume.

        Returns ``(main, aux)`` where ``aux`` holds one prediction per
        deep-supervision tap. With a recording ``tape`` the outputs are
        :class:`DiffValue` nodes and the parameters are leaves named as in
        :attr:`params`; otherwise plain arrays are returned. ``params`` may
        supply ready-made nodes (and ``x`` may be a node) instead.
        """
        cfg = self.config
        if isinstance(x, ad.DiffValue):
            tape = x.tape
        else:
            x = np.asarray(x, dtype=np.float64)
        inference = tape is None
        tape = tape or ad.Tape(enabled=False)
        if len(x.shape) != 4 or x.shape[0] != cfg.in_channels:
            raise ValueError(f"expected ({cfg.in_channels}, x, y, z) input, got {x.shape}")
        p = params if params is not None else {
            k: tape.leaf(v, name=k) for k, v in self.params.items()}

        dims = x.shape[1:]
        extra = [n % 2 for n in dims]
        if not isinstance(x, ad.DiffValue):
            if any(extra):
                x = np.pad(x, [(0, 0)] + [(0, e) for e in extra])
            x = tape.constant(x)
        elif any(extra):
            raise ValueError("odd-sized inputs must be arrays so they can be padded")
        h = ad.conv_down(x, p["input.W"], p["input.b"])

        taps = {}
        kind = _block_kind(cfg.variant)
        for i in range(cfg.n_blocks):
            bp = {k[len(f"block{i}."):]: v for k, v in p.items() if k.startswith(f"block{i}.")}
            if kind is None:
                h = B.operator_layer(h, {k[2:]: v for k, v in bp.items()}, "fourier", cfg.k_max)
            else:
                kernel = "hartley_mha" if kind == "mha" else "hartley_shared"
                h = B.residual_block(h, bp, kernel, cfg.k_max)
            if i in cfg.deep_supervision_taps:
                taps[i] = h

        crop = (slice(None),) + tuple(slice(0, n) for n in dims)

        def finish(logits):
            if any(extra):
                logits = logits[crop]
            return ad.softmax(logits, axis=0)

        main = finish(ad.conv_up(h, p["head.W"], p["head.b"]))
        aux = []
        for t in cfg.deep_supervision_taps:
            z = B._mix_impl(p[f"ds{t}.lin.W"], taps[t]) + p[f"ds{t}.lin.b"].reshape(-1, 1, 1, 1)
            aux.append(finish(ad.conv_up(z, p[f"ds{t}.up.W"], p[f"ds{t}.up.b"])))
        if inference:
            return main.value, [a.value for a in aux]
        return main, aux

    def predict_proba(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=0).astype(np.uint8)

    # -------------------------------------------------------------- checkpoint

    def save(self, path) -> None:
        Path(path).write_bytes(dump_checkpoint(self))

    @classmethod
    def load(cls, path) -> Model:
        return load_checkpoint(Path(path).read_bytes())

    def copy(self) -> Model:
        return Model(NetworkConfig.from_text(self.config.to_text()),
                     {k: v.copy() for k, v in self.params.items()})


def dump_checkpoint(model: Model) -> bytes:
    """Serialize: magic, version, config text, then named float64 tensors.

    Layout (all integers little-endian)::

        b"HSEGCKPT" | u32 version | u32 len | config utf-8 | u32 n_tensors
        per tensor: u16 name_len | name | u8 ndim | u32 dims... | f64 data (C order)
    """
    config = model.config.to_text().encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(config)), config,
           struct.pack("<I", len(model.params))]
    for name, value in model.params.items():
        raw = name.encode()
        out.append(struct.pack("<HB", len(raw), value.ndim) + raw)
        out.append(struct.pack(f"<{value.ndim}I", *value.shape))
        out.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return b"".join(out)


def load_checkpoint(data: bytes) -> Model:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(
                f"checkpoint truncated: needed {pos + n} bytes, file has {len(view)}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(len(CHECKPOINT_MAGIC))) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, clen = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = NetworkConfig.from_text(bytes(take(clen)).decode())
    (n,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(n):
        name_len, ndim = struct.unpack("<HB", take(3))
        name = bytes(take(name_len)).decode()
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = math.prod(shape)
        params[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(view):
        raise CheckpointError("trailing bytes after the last tensor")
    expected = param_shapes(config)
    if {k: tuple(v.shape) for k, v in params.items()} != {k: tuple(v) for k, v in expected.items()}:
        raise CheckpointError("checkpoint tensors do not match its config")
    return Model(config, params)
