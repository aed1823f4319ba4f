"""ILD-VIT: patch encoder, pre-LN transformer blocks, LN -> GAP -> sigmoid head."""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    channels: int = 3
    patch_size: int = 8
    proj_len: int = 64
    # four blocks reproduce the 349506 total; three gives 266306
    n_blocks: int = 4
    n_heads: int = 4
    head_dim: int = 64
    mlp_dims: tuple = (128, 64)
    dropout: float = 0.3
    n_classes: int = 2
    ln_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "mlp_dims", tuple(int(d) for d in self.mlp_dims))
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not self.mlp_dims or self.mlp_dims[-1] != self.proj_len:
            raise ValueError(f"last MLP width must equal proj_len ({self.proj_len}), got {self.mlp_dims}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if min(self.n_blocks, self.n_heads, self.head_dim, self.proj_len, self.n_classes) < 1:
            raise ValueError("model dimensions must be positive")

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.channels * self.patch_size**2

    @property
    def attn_dim(self):
        return self.n_heads * self.head_dim

    def to_dict(self):
        d = asdict(self)
        d["mlp_dims"] = list(self.mlp_dims)
        return d


def parameter_shapes(config):
    """Ordered ``name -> shape`` for every trainable tensor."""
    c = config
    shapes = {
        "patch_encoder.kernel": (c.patch_dim, c.proj_len),
        "patch_encoder.bias": (c.proj_len,),
        "patch_encoder.position": (c.n_patches, c.proj_len),
    }
    for b in range(c.n_blocks):
        p = f"block{b + 1}."
        shapes[p + "ln1.gamma"] = (c.proj_len,)
        shapes[p + "ln1.beta"] = (c.proj_len,)
        for proj in ("query", "key", "value"):
            shapes[p + f"mha.{proj}.kernel"] = (c.proj_len, c.attn_dim)
            shapes[p + f"mha.{proj}.bias"] = (c.attn_dim,)
        shapes[p + "mha.output.kernel"] = (c.attn_dim, c.proj_len)
        shapes[p + "mha.output.bias"] = (c.proj_len,)
        shapes[p + "ln2.gamma"] = (c.proj_len,)
        shapes[p + "ln2.beta"] = (c.proj_len,)
        width = c.proj_len
        for i, d in enumerate(c.mlp_dims):
            shapes[p + f"mlp.dense{i + 1}.kernel"] = (width, d)
            shapes[p + f"mlp.dense{i + 1}.bias"] = (d,)
            width = d
    shapes["final_ln.gamma"] = (c.proj_len,)
    shapes["final_ln.beta"] = (c.proj_len,)
    shapes["head.kernel"] = (c.proj_len, c.n_classes)
    shapes["head.bias"] = (c.n_classes,)
    return shapes


def count_parameters(config=None):
    """Per-stage trainable scalar counts plus ``total``."""
    config = config or ModelConfig()
    ledger = {}
    for name, shape in parameter_shapes(config).items():
        stage = name.split(".", 1)[0]
        ledger[stage] = ledger.get(stage, 0) + math.prod(shape)
    ledger["total"] = sum(ledger.values())
    return ledger


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.arrays[name]

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    @property
    def n_parameters(self):
        return sum(a.size for a in self.arrays.values())

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype):
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def tensors(self, requires_grad=False):
        return {k: ad.Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.arrays.items()}


def init_params(config=None, seed=0, dtype=np.float64):
    """Glorot-uniform kernels, zero biases, N(0, 0.02^2) positions, unit LN scales."""
    config = config or ModelConfig()
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "kernel":
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-limit, limit, size=shape)
        elif leaf == "position":
            arr = rng.normal(0.0, 0.02, size=shape)
        elif leaf == "gamma":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        arrays[name] = arr.astype(dtype)
    return ModelParams(config, arrays)


# ---------------------------------------------------------------- patches

def patchify(images, patch_size=8):
    """(H, W, C) or (B, H, W, C) -> (..., n_patches, P*P*C).

    Patches run left-to-right then top-to-bottom; each is the row-major
    flattening of its P x P x C block.
    """
    x = np.asarray(getattr(images, "pixels", images))
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected an (H, W, C) image or a batch, got shape {x.shape}")
    b, h, w, c = x.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible into {patch_size}x{patch_size} patches")
    gh, gw = h // patch_size, w // patch_size
    p = x.reshape(b, gh, patch_size, gw, patch_size, c).transpose(0, 1, 3, 2, 4, 5)
    p = p.reshape(b, gh * gw, patch_size * patch_size * c)
    return p[0] if single else p


def unpatchify(patches, image_size=64, patch_size=8, channels=3):
    p = np.asarray(patches)
    single = p.ndim == 2
    if single:
        p = p[None]
    g = image_size // patch_size
    x = p.reshape(p.shape[0], g, g, patch_size, patch_size, channels).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(p.shape[0], image_size, image_size, channels)
    return x[0] if single else x


# ---------------------------------------------------------------- layers

class DropoutStream:
    """Hands out one generator per dropout site, keyed by (seed, step, site)."""

    def __init__(self, seed, step=0):
        self.seed = int(seed)
        self.step = int(step)
        self.site = 0

    def next(self):
        rng = np.random.default_rng([self.seed, self.step, self.site])
        self.site += 1
        return rng


def _dense(x, p, name):
    return ad.add(ad.matmul(x, p[name + ".kernel"]), p[name + ".bias"])


def _drop(x, rate, training, stream):
    if not training or rate == 0.0:
        return x
    return ad.dropout(x, rate, True, stream.next())


def encode_patches(patches, p, config):
    """Linear projection + bias + learned position row per patch index."""
    x = patches if isinstance(patches, ad.Tensor) else ad.Tensor(patches)
    return ad.add(_dense(x, p, "patch_encoder"), p["patch_encoder.position"])


def mha_forward(y, p, prefix, config, training=False, stream=None):
    """Multi-head self-attention. Returns (output, attention weights (B, H, N, N))."""
    c = config
    batch, n = y.shape[0], y.shape[1]

    def heads(name):
        t = _dense(y, p, prefix + f"mha.{name}")
        return ad.transpose(ad.reshape(t, (batch, n, c.n_heads, c.head_dim)), (0, 2, 1, 3))

    q, k, v = heads("query"), heads("key"), heads("value")
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(c.head_dim))
    attn = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(attn, v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (batch, n, c.attn_dim))
    return _dense(ctx, p, prefix + "mha.output"), attn


def transformer_block(y, p, index, config, training=False, stream=None):
    """Pre-LN block with identity skips; returns (output, attention weights)."""
    c = config
    prefix = f"block{index}."
    h = ad.layer_norm(y, p[prefix + "ln1.gamma"], p[prefix + "ln1.beta"], c.ln_eps)
    h, attn = mha_forward(h, p, prefix, c, training, stream)
    y = ad.add(_drop(h, c.dropout, training, stream), y)

    h = ad.layer_norm(y, p[prefix + "ln2.gamma"], p[prefix + "ln2.beta"], c.ln_eps)
    # every MLP dense is GELU + dropout; the last dropout is the block's residual dropout
    for i in range(len(c.mlp_dims)):
        h = ad.gelu(_dense(h, p, prefix + f"mlp.dense{i + 1}"))
        h = _drop(h, c.dropout, training, stream)
    return ad.add(h, y), attn


@dataclass
class ForwardResult:
    probs: object
    logits: object
    gap_embedding: object
    attention_maps: list


def forward(p, patches, config, training=False, stream=None):
    """Tensor-level forward on a batch of patch matrices (B, N, P*P*C)."""
    if training and config.dropout > 0 and stream is None:
        raise ValueError("training-mode forward needs a DropoutStream")
    y = encode_patches(patches, p, config)
    maps = []
    for b in range(config.n_blocks):
        y, attn = transformer_block(y, p, b + 1, config, training, stream)
        maps.append(attn)
    y = ad.layer_norm(y, p["final_ln.gamma"], p["final_ln.beta"], config.ln_eps)
    gap = ad.mean(y, axis=1)
    logits = _dense(gap, p, "head")
    return ForwardResult(ad.sigmoid(logits), logits, gap, maps)


def model_forward(img, params, training=False, seed=0, step=0):
    """Numpy-level forward for one image or a batch of images."""
    x = np.asarray(getattr(img, "pixels", img), dtype=params.dtype)
    single = x.ndim == 3
    patches = patchify(x if not single else x[None], params.config.patch_size)
    stream = DropoutStream(seed, step) if training else None
    out = forward(params.tensors(), patches, params.config, training, stream)
    res = ForwardResult(out.probs.data, out.logits.data, out.gap_embedding.data,
                        [a.data for a in out.attention_maps])
    if single:
        res = ForwardResult(res.probs[0], res.logits[0], res.gap_embedding[0],
                            [a[0] for a in res.attention_maps])
    return res


def predict(params, images, batch_size=64, keep_attention=False):
    """Inference over many images; returns (probs (N, 2), embeddings (N, D), attention or None)."""
    images = np.asarray(images)
    probs, embs, attn = [], [], []
    for start in range(0, len(images), batch_size):
        res = model_forward(images[start:start + batch_size], params)
        probs.append(res.probs)
        embs.append(res.gap_embedding)
        if keep_attention:
            attn.append(np.stack(res.attention_maps, axis=1))
    if not probs:
        d = params.config.proj_len
        return np.zeros((0, params.config.n_classes)), np.zeros((0, d)), None
    return (np.concatenate(probs), np.concatenate(embs),
            np.concatenate(attn) if keep_attention else None)


# ---------------------------------------------------------------- checkpoints
#
# Layout (little-endian):
#   8 bytes   magic b"ILDVCKPT"
#   uint32    format version
#   uint32    header length L
#   L bytes   UTF-8 JSON header: {"version", "config", "metadata",
#             "tensors": [{"name", "shape", "dtype", "offset", "nbytes"}]}
#   data      row-major tensor payloads; offsets are relative to the data start

CHECKPOINT_MAGIC = b"ILDVCKPT"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(params, metadata=None):
    entries, blobs, offset = [], [], 0
    for name, arr in params.arrays.items():
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"version": CHECKPOINT_VERSION, "config": params.config.to_dict(),
              "metadata": metadata or {}, "tensors": entries}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(hb)))
    buf.write(hb)
    for raw in blobs:
        buf.write(raw)
    return buf.getvalue()


def save_checkpoint(path, params, metadata=None):
    data = checkpoint_bytes(params, metadata)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def parse_checkpoint(data):
    """Returns (ModelParams, metadata dict)."""
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not an ILD-VIT checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    cfg = ModelConfig(**header["config"])
    arrays = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(data[start:start + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
    expected = parameter_shapes(cfg)
    if list(arrays) != list(expected) or any(arrays[k].shape != tuple(s) for k, s in expected.items()):
        raise ValueError("checkpoint tensors do not match its model config")
    return ModelParams(cfg, arrays), header.get("metadata", {})


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
