"""Convolutional VAE encoders, the transposed-conv decoder, and checkpoints.

Three encoders share one architecture and differ only in input channels:

* ``appearance``  -- RGB -> appearance code
* ``structure_A`` -- RGB -> structure code
* ``structure_B`` -- depth -> structure code

Each conv block is conv(3x3, stride 2, pad 1) -> batch-norm -> relu. The
flattened features feed two linear heads (mean and log-variance). The decoder
mirrors this with stride-2 transposed convs and ends in a sigmoid.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .tensorio import FormatError, decode_array, encode_array

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

ENCODERS = {"appearance": "enc_app", "structure_A": "enc_sA", "structure_B": "enc_sB"}
CKPT_MAGIC = b"JCK1"


@dataclass(frozen=True)
class EncoderConfig:
    input_channels: int
    input_size: int
    conv_blocks: int
    base_channels: int
    channel_growth: int
    latent_dim: int

    def __post_init__(self):
        if self.input_size % (2**self.conv_blocks) != 0:
            raise ValueError(
                f"input_size {self.input_size} not divisible by 2**conv_blocks ({2**self.conv_blocks})"
            )
        if self.latent_dim < 2:
            raise ValueError("latent_dim must be >= 2")
        if self.conv_blocks < 1 or self.base_channels < 1 or self.channel_growth < 1:
            raise ValueError("conv_blocks, base_channels and channel_growth must be >= 1")

    @property
    def channels(self) -> list:
        return [self.base_channels * self.channel_growth**b for b in range(self.conv_blocks)]

    @property
    def feature_size(self) -> int:
        return self.input_size // 2**self.conv_blocks

    @property
    def feature_dim(self) -> int:
        return self.channels[-1] * self.feature_size**2


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    conv_blocks: int = 3
    base_channels: int = 16
    channel_growth: int = 2
    latent_dim: int = 16
    rgb_channels: int = 3
    depth_channels: int = 1
    # > 0 selects the baseline: a per-image lookup table replaces the appearance encoder
    lookup_rows: int = 0

    def encoder(self, which: str) -> EncoderConfig:
        chans = self.depth_channels if which == "structure_B" else self.rgb_channels
        return EncoderConfig(
            chans, self.image_size, self.conv_blocks, self.base_channels, self.channel_growth, self.latent_dim
        )

    @property
    def encoder_names(self) -> list:
        names = ["appearance", "structure_A", "structure_B"]
        return names[1:] if self.lookup_rows > 0 else names


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)  # name -> Tensor(requires_grad=True)
    buffers: dict = field(default_factory=dict)  # name -> ndarray (batch-norm running stats)

    def names(self, prefix: str = "") -> list:
        return [n for n in self.tensors if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def clone(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )


# ---------------------------------------------------------------------------
# initialization


def _he(rng, shape, fan_in):
    return Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape):
    return Tensor(np.ones(shape), requires_grad=True)


def fan_in(name: str, shape) -> int:
    """Fan-in used for He initialization of the weight ``name``."""
    if len(shape) == 4:
        # conv weights (O, C, k, k); transposed-conv weights (Cin, Cout, k, k)
        return shape[0] * shape[2] * shape[3] if ".up" in name else shape[1] * shape[2] * shape[3]
    return shape[0]


def _init_encoder(p: ModelParams, prefix: str, cfg: EncoderConfig, rng) -> None:
    cin = cfg.input_channels
    for b, c in enumerate(cfg.channels):
        shape = (c, cin, 3, 3)
        p.tensors[f"{prefix}.conv{b}.w"] = _he(rng, shape, fan_in("conv", shape))
        p.tensors[f"{prefix}.bn{b}.gamma"] = _ones(c)
        p.tensors[f"{prefix}.bn{b}.beta"] = _zeros(c)
        p.buffers[f"{prefix}.bn{b}.mean"] = np.zeros(c)
        p.buffers[f"{prefix}.bn{b}.var"] = np.ones(c)
        cin = c
    for head in ("mu", "logvar"):
        p.tensors[f"{prefix}.{head}.w"] = _he(rng, (cfg.feature_dim, cfg.latent_dim), cfg.feature_dim)
        p.tensors[f"{prefix}.{head}.b"] = _zeros(cfg.latent_dim)


def _init_decoder(p: ModelParams, cfg: ModelConfig, rng) -> None:
    enc = cfg.encoder("structure_A")
    chans = enc.channels
    d2 = 2 * cfg.latent_dim
    p.tensors["dec.fc.w"] = _he(rng, (d2, enc.feature_dim), d2)
    p.tensors["dec.fc.b"] = _zeros(enc.feature_dim)
    p.tensors["dec.bn0.gamma"] = _ones(chans[-1])
    p.tensors["dec.bn0.beta"] = _zeros(chans[-1])
    p.buffers["dec.bn0.mean"] = np.zeros(chans[-1])
    p.buffers["dec.bn0.var"] = np.ones(chans[-1])
    outs = list(reversed(chans[:-1])) + [cfg.rgb_channels]
    cin = chans[-1]
    for k, cout in enumerate(outs):
        name = f"dec.up{k}.w"
        shape = (cin, cout, 3, 3)
        p.tensors[name] = _he(rng, shape, fan_in(name, shape))
        if k < len(outs) - 1:
            p.tensors[f"dec.bn{k + 1}.gamma"] = _ones(cout)
            p.tensors[f"dec.bn{k + 1}.beta"] = _zeros(cout)
            p.buffers[f"dec.bn{k + 1}.mean"] = np.zeros(cout)
            p.buffers[f"dec.bn{k + 1}.var"] = np.ones(cout)
        cin = cout
    p.tensors["dec.out.b"] = _zeros(cfg.rgb_channels)


def init_params(config: ModelConfig, rng=0) -> ModelParams:
    """He-normal weights, zero biases, unit/zero batch-norm affine, N(0, 0.01) lookup table."""
    rng = np.random.default_rng(rng)
    p = ModelParams(config)
    for which in config.encoder_names:
        _init_encoder(p, ENCODERS[which], config.encoder(which), rng)
    _init_decoder(p, config, rng)
    if config.lookup_rows > 0:
        p.tensors["lookup.table"] = Tensor(
            rng.normal(0.0, 0.01, (config.lookup_rows, config.latent_dim)), requires_grad=True
        )
    return p


# ---------------------------------------------------------------------------
# forward passes


def _bn(p: ModelParams, name: str, x: Tensor, train: bool) -> Tensor:
    gamma, beta = p.tensors[f"{name}.gamma"], p.tensors[f"{name}.beta"]
    if train:
        out, mu, var = ad.batch_norm(x, gamma, beta, eps=BN_EPS)
        p.buffers[f"{name}.mean"] = (1 - BN_MOMENTUM) * p.buffers[f"{name}.mean"] + BN_MOMENTUM * mu
        p.buffers[f"{name}.var"] = (1 - BN_MOMENTUM) * p.buffers[f"{name}.var"] + BN_MOMENTUM * var
        return out
    out, _, _ = ad.batch_norm(x, gamma, beta, p.buffers[f"{name}.mean"], p.buffers[f"{name}.var"], BN_EPS)
    return out


def _check_mode(mode: str) -> bool:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def encoder_forward(params: ModelParams, which: str, x, mode: str = "eval"):
    """Encode an image batch; returns ``(mu, logvar)`` each of shape (B, d)."""
    train = _check_mode(mode)
    if which not in ENCODERS:
        raise KeyError(f"unknown encoder {which!r}")
    if which not in params.config.encoder_names:
        raise KeyError(f"encoder {which!r} is not part of this model")
    cfg = params.config.encoder(which)
    x = ad.as_tensor(x)
    want = (cfg.input_channels, cfg.input_size, cfg.input_size)
    if x.ndim != 4 or x.shape[1:] != want:
        raise ShapeError(f"encoder {which}: expected (B, {', '.join(map(str, want))}), got {x.shape}")
    prefix = ENCODERS[which]
    h = x
    for b in range(cfg.conv_blocks):
        h = ad.conv2d(h, params.tensors[f"{prefix}.conv{b}.w"], stride=2, padding=1)
        h = ad.relu(_bn(params, f"{prefix}.bn{b}", h, train))
    h = ad.reshape(h, (x.shape[0], cfg.feature_dim))
    mu = ad.add_bias(ad.matmul(h, params.tensors[f"{prefix}.mu.w"]), params.tensors[f"{prefix}.mu.b"])
    lv = ad.add_bias(ad.matmul(h, params.tensors[f"{prefix}.logvar.w"]), params.tensors[f"{prefix}.logvar.b"])
    return mu, ad.clamp(lv, LOGVAR_MIN, LOGVAR_MAX)


def sample_latent(mu: Tensor, logvar: Tensor, rng=None, mode: str = "train") -> Tensor:
    """Reparameterized sample ``mu + exp(logvar / 2) * eps``; ``mu`` itself in eval mode."""
    if mu.shape != logvar.shape:
        raise ShapeError(f"sample_latent: shape mismatch {mu.shape} vs {logvar.shape}")
    if not _check_mode(mode):
        return mu
    eps = Tensor(np.random.default_rng(rng).standard_normal(mu.shape))
    return ad.add(mu, ad.mul(ad.exp(ad.mul_scalar(logvar, 0.5)), eps))


def decoder_forward(params: ModelParams, z_a, z_s, mode: str = "eval") -> Tensor:
    """Decode the concatenation ``z_a ++ z_s`` (appearance first) to an RGB batch in [0, 1]."""
    train = _check_mode(mode)
    cfg = params.config
    enc = cfg.encoder("structure_A")
    z_a, z_s = ad.as_tensor(z_a), ad.as_tensor(z_s)
    d = cfg.latent_dim
    if z_a.ndim != 2 or z_s.ndim != 2 or z_a.shape[1] != d or z_s.shape[1] != d or z_a.shape[0] != z_s.shape[0]:
        raise ShapeError(f"decoder: expected two (B, {d}) latents, got {z_a.shape} and {z_s.shape}")
    b = z_a.shape[0]
    h = ad.add_bias(ad.matmul(ad.concat([z_a, z_s], axis=1), params.tensors["dec.fc.w"]), params.tensors["dec.fc.b"])
    h = ad.reshape(h, (b, enc.channels[-1], enc.feature_size, enc.feature_size))
    h = ad.relu(_bn(params, "dec.bn0", h, train))
    for k in range(cfg.conv_blocks):
        h = ad.conv_transpose2d(h, params.tensors[f"dec.up{k}.w"], stride=2, padding=1, output_padding=1)
        if k < cfg.conv_blocks - 1:
            h = ad.relu(_bn(params, f"dec.bn{k + 1}", h, train))
    return ad.sigmoid(ad.add_bias(h, params.tensors["dec.out.b"]))


def lookup_appearance(params: ModelParams, index) -> Tensor:
    """Row(s) of the baseline appearance lookup table, gradient-carrying."""
    if "lookup.table" not in params.tensors:
        raise KeyError("model has no appearance lookup table")
    return ad.take_rows(params.tensors["lookup.table"], index)


def reconstruct(params: ModelParams, rgb) -> Tensor:
    """Plain eval-mode reconstruction with z = mu for both RGB codes."""
    z_a, _ = encoder_forward(params, "appearance", rgb, "eval")
    z_s, _ = encoder_forward(params, "structure_A", rgb, "eval")
    return decoder_forward(params, z_a, z_s, "eval")


# ---------------------------------------------------------------------------
# checkpoints: JCK1 magic, u32 header length, UTF-8 JSON header, TSR1 records


def checkpoint_bytes(params: ModelParams, meta: dict | None = None) -> bytes:
    blobs, index, offset = [], {}, 0
    for kind, store in (("param", params.tensors), ("buffer", params.buffers)):
        for name, val in store.items():
            blob = encode_array(val.data if isinstance(val, Tensor) else val)
            index[name] = {"offset": offset, "kind": kind}
            blobs.append(blob)
            offset += len(blob)
    cfg = params.config
    header = {
        "model_config": asdict(cfg),
        "encoders": {w: asdict(cfg.encoder(w)) for w in cfg.encoder_names},
        "tensors": index,
        "meta": meta or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(blobs)


def save_checkpoint(params: ModelParams, path, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params, meta))


def load_checkpoint(path):
    """Returns ``(ModelParams, meta)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    if len(buf) < 8:
        raise FormatError("truncated checkpoint header length", 4)
    (hlen,) = struct.unpack_from("<I", buf, 4)
    if 8 + hlen > len(buf):
        raise FormatError("truncated checkpoint header", 8)
    header = json.loads(buf[8 : 8 + hlen].decode("utf-8"))
    base = 8 + hlen
    params = ModelParams(ModelConfig(**header["model_config"]))
    for name, info in sorted(header["tensors"].items(), key=lambda kv: kv[1]["offset"]):
        arr, _ = decode_array(buf, base + info["offset"])
        if info["kind"] == "param":
            params.tensors[name] = Tensor(arr, requires_grad=True)
        else:
            params.buffers[name] = arr
    return params, header.get("meta", {})
