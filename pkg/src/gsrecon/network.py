"""The feed-forward reconstructor: convolutional tokenizer, multi-view
transformer encoder, windowed-attention upsampler, and linear heads that
emit raw Gaussian attribute maps."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .cameras import Camera, pixel_rays, plucker_embed
from .gaussians import AttributeMap, GaussianSet, activate, merge_views

CHECKPOINT_MAGIC = b"GSRC0001"

ATTR_GROUPS_DEPTH = [("depth", 1), ("rotation", 4), ("scale", 3),
                     ("opacity", 1), ("color", 3)]
ATTR_GROUPS_XYZ = [("xyz", 3), ("rotation", 4), ("scale", 3),
                   ("opacity", 1), ("color", 3)]


@dataclass
class NetworkConfig:
    """Desk-scale reconstructor hyperparameters.

    The upsampler doubles the token grid per block, so the attribute maps
    come out at (H/patch)*2^up_blocks per side; with patch == 2^up_blocks
    they match the input resolution exactly.
    """

    patch: int = 8
    width: int = 64
    enc_layers: int = 4
    heads: int = 4
    up_blocks: int = 2
    window: int = 256
    views: int = 4
    image_hw: tuple[int, int] = (64, 64)
    pos_enc_per_view: bool = False
    upsampler: str = "attention"        # "attention" | "conv"
    head_mode: str = "split"            # "split" | "joint"
    position_head: str = "depth"        # "depth" | "xyz"
    depth_activation: str = "sigmoid"   # "sigmoid" | "softplus"
    scale_activation: str = "interp"    # "interp" | "exp"
    s_min: float = 0.005
    s_max: float = 0.02

    def __post_init__(self):
        h, w = self.image_hw
        if h % self.patch or w % self.patch:
            raise ValueError(f"image {h}x{w} not divisible by patch {self.patch}")
        if 2 ** self.up_blocks > self.patch:
            raise ValueError(f"2^up_blocks={2 ** self.up_blocks} exceeds patch "
                             f"{self.patch}; the output grid would outgrow the image")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        for b in range(self.up_blocks):
            c_out = self.width // 2 ** (b + 1)
            if c_out < 1 or (self.width // 2 ** b) % 2:
                raise ValueError(f"width {self.width} cannot halve {self.up_blocks} times")
            if c_out % self.heads:
                raise ValueError(f"upsampler width {c_out} at block {b} not "
                                 f"divisible by heads {self.heads}")
            length = self.views * self.grid_hw(b + 1)[0] * self.grid_hw(b + 1)[1]
            if length % self.window and self.window < length:
                raise ValueError(f"window {self.window} neither divides sequence "
                                 f"length {length} at block {b} nor exceeds it")
        if self.upsampler not in ("attention", "conv"):
            raise ValueError(f"unknown upsampler {self.upsampler!r}")
        if self.head_mode not in ("split", "joint"):
            raise ValueError(f"unknown head_mode {self.head_mode!r}")
        if self.position_head not in ("depth", "xyz"):
            raise ValueError(f"unknown position_head {self.position_head!r}")
        if self.s_min >= self.s_max:
            raise ValueError("need s_min < s_max")

    def grid_hw(self, level: int = 0) -> tuple[int, int]:
        """Token grid per view after `level` upsampler blocks."""
        h, w = self.image_hw
        return (h // self.patch) * 2 ** level, (w // self.patch) * 2 ** level

    @property
    def map_hw(self) -> tuple[int, int]:
        return self.grid_hw(self.up_blocks)

    @property
    def final_width(self) -> int:
        return self.width // 2 ** self.up_blocks

    @property
    def out_channels(self) -> int:
        return 14 if self.position_head == "xyz" else 12

    @property
    def attr_groups(self):
        return ATTR_GROUPS_XYZ if self.position_head == "xyz" else ATTR_GROUPS_DEPTH


def param_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Deterministic name -> shape manifest for a config."""
    gh, gw = cfg.grid_hw(0)
    c = cfg.width
    shapes: dict[str, tuple[int, ...]] = {
        "tokenizer.weight": (cfg.patch * cfg.patch * 9, c),
        "tokenizer.bias": (c,),
    }
    if cfg.pos_enc_per_view:
        shapes["pos_enc"] = (cfg.views, gh * gw, c)
    else:
        shapes["pos_enc"] = (gh * gw, c)
    for i in range(cfg.enc_layers):
        p = f"enc{i}."
        shapes[p + "ln1.gain"] = (c,)
        shapes[p + "ln1.bias"] = (c,)
        shapes[p + "qkv.weight"] = (c, 3 * c)
        shapes[p + "qkv.bias"] = (3 * c,)
        shapes[p + "proj.weight"] = (c, c)
        shapes[p + "proj.bias"] = (c,)
        shapes[p + "ln2.gain"] = (c,)
        shapes[p + "ln2.bias"] = (c,)
        shapes[p + "fc1.weight"] = (c, 4 * c)
        shapes[p + "fc1.bias"] = (4 * c,)
        shapes[p + "fc2.weight"] = (4 * c, c)
        shapes[p + "fc2.bias"] = (c,)
    for b in range(cfg.up_blocks):
        cin = cfg.width // 2 ** b
        cout = cin // 2
        p = f"up{b}."
        if cfg.upsampler == "attention":
            shapes[p + "fc.weight"] = (cin, 4 * cout)
            shapes[p + "fc.bias"] = (4 * cout,)
            for a in range(2):
                q = f"{p}attn{a}."
                shapes[q + "ln.gain"] = (cout,)
                shapes[q + "ln.bias"] = (cout,)
                shapes[q + "qkv.weight"] = (cout, 3 * cout)
                shapes[q + "qkv.bias"] = (3 * cout,)
                shapes[q + "proj.weight"] = (cout, cout)
                shapes[q + "proj.bias"] = (cout,)
        else:
            shapes[p + "conv.weight"] = (9 * cin, 4 * cout)
            shapes[p + "conv.bias"] = (4 * cout,)
    cf = cfg.final_width
    if cfg.head_mode == "split":
        for name, ch in cfg.attr_groups:
            shapes[f"head.{name}.weight"] = (cf, ch)
            shapes[f"head.{name}.bias"] = (ch,)
    else:
        shapes["head.all.weight"] = (cf, cfg.out_channels)
        shapes["head.all.bias"] = (cfg.out_channels,)
    return shapes


def count_params(cfg: NetworkConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_weights(cfg: NetworkConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Seed-deterministic initialization: N(0, 0.02) linears, unit layernorm
    gains, zero biases; the rotation head bias starts at the identity
    quaternion so raw maps activate to valid sets from step one."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("ln.gain") or ".ln1.gain" in name or ".ln2.gain" in name:
            weights[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".bias") or name.endswith("ln.bias"):
            weights[name] = np.zeros(shape, dtype=np.float32)
        elif name == "pos_enc":
            weights[name] = rng.normal(0.0, 0.02, shape).astype(np.float32)
        else:
            weights[name] = rng.normal(0.0, 0.02, shape).astype(np.float32)
    if cfg.head_mode == "split":
        weights["head.rotation.bias"][0] = 1.0
    else:
        idx = 3 if cfg.position_head == "xyz" else 1
        weights["head.all.bias"][idx] = 1.0
    return weights


def weights_to_values(weights: dict[str, np.ndarray],
                      watch: bool = True) -> dict[str, T.Value]:
    return {k: T.Value(v, watch=watch) for k, v in weights.items()}


def _linear(x: T.Value, w: dict, prefix: str) -> T.Value:
    return x @ w[prefix + ".weight"] + w[prefix + ".bias"]


def _attention(x: T.Value, w: dict, prefix: str, heads: int,
               window: int | None) -> T.Value:
    """Multi-head self-attention over (L, C); with a window, attention is
    restricted to consecutive length-`window` chunks of the sequence."""
    length, c = x.shape
    hd = c // heads
    nw = 1 if window is None or window >= length else length // window
    win = length // nw
    qkv = _linear(x, w, prefix + ".qkv")                    # (L, 3C)
    qkv = qkv.reshape(nw, win, 3, heads, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]                        # (nw, heads, win, hd)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
    attn = T.softmax(scores)
    out = attn @ v                                          # (nw, heads, win, hd)
    out = out.transpose(0, 2, 1, 3).reshape(length, c)
    return _linear(out, w, prefix + ".proj")


def tokenize(images: np.ndarray, pluckers: np.ndarray, w: dict,
             cfg: NetworkConfig) -> T.Value:
    """Strided patch convolution over images concatenated with their
    Plucker ray channels; returns (V, gh, gw, width)."""
    v, h, wd, _ = images.shape
    if (v, h, wd) != (cfg.views, *cfg.image_hw):
        raise T.ShapeError(f"tokenize: images {images.shape} do not match "
                           f"config {cfg.views}x{cfg.image_hw}")
    dtype = w["tokenizer.weight"].dtype
    x = np.concatenate([images, pluckers], axis=-1).astype(dtype)
    cols = T.patches(T.Value(x), cfg.patch, cfg.patch)      # (V, gh, gw, p*p*9)
    gh, gw = cfg.grid_hw(0)
    flat = cols.reshape(v * gh * gw, cfg.patch * cfg.patch * 9)
    tokens = _linear(flat, w, "tokenizer")
    return tokens.reshape(v, gh, gw, cfg.width)


def encode(tokens: T.Value, w: dict, cfg: NetworkConfig) -> T.Value:
    """Global self-attention across all views' tokens; pre-norm blocks."""
    v, gh, gw, c = tokens.shape
    x = tokens.reshape(v, gh * gw, c)
    pos = w["pos_enc"]
    x = (x + pos).reshape(v * gh * gw, c)
    for i in range(cfg.enc_layers):
        p = f"enc{i}"
        x = x + _attention(T.layer_norm(x, w[p + ".ln1.gain"], w[p + ".ln1.bias"]),
                           w, p, cfg.heads, window=None)
        h = T.layer_norm(x, w[p + ".ln2.gain"], w[p + ".ln2.bias"])
        h = T.gelu(_linear(h, w, p + ".fc1"))
        x = x + _linear(h, w, p + ".fc2")
    return x


def pixel_shuffle(x: T.Value) -> T.Value:
    """(..., h, w, 4c) -> (..., 2h, 2w, c) channel-to-space rearrangement."""
    *lead, h, w, c4 = x.shape
    if c4 % 4:
        raise T.ShapeError(f"pixel_shuffle: channels {c4} not divisible by 4")
    c = c4 // 4
    x = x.reshape(*lead, h, w, 2, 2, c)
    nd = len(lead)
    perm = tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3, nd + 4)
    return x.transpose(perm).reshape(*lead, 2 * h, 2 * w, c)


def upsample_block(x: T.Value, w: dict, cfg: NetworkConfig, block: int,
                   window: int | None = "cfg") -> T.Value:
    """One upsampler block: linear to 4x the output channels, pixel shuffle,
    then a windowed and a half-window-shifted windowed attention pass.
    Channel width halves, the token grid doubles per side."""
    if window == "cfg":
        window = cfg.window
    v, h, wd, c = x.shape
    p = f"up{block}"
    if cfg.upsampler == "conv":
        padded = T.pad2d(x, 1, 1)
        cols = T.patches(padded, 3, 1).reshape(v * h * wd, 9 * c)
        out = _linear(cols, w, p + ".conv").reshape(v, h, wd, 2 * c)
        return pixel_shuffle(out)
    flat = x.reshape(v * h * wd, c)
    flat = _linear(flat, w, p + ".fc")
    x = pixel_shuffle(flat.reshape(v, h, wd, 2 * c))        # (V, 2h, 2w, c/2)
    c2 = c // 2
    length = v * 2 * h * 2 * wd
    seq = x.reshape(length, c2)
    q0 = f"{p}.attn0"
    seq = seq + _attention(
        T.layer_norm(seq, w[q0 + ".ln.gain"], w[q0 + ".ln.bias"]),
        w, q0, cfg.heads, window)
    q1 = f"{p}.attn1"
    shift = 0 if window is None or window >= length else window // 2
    rolled = T.roll(seq, shift, axis=0) if shift else seq
    rolled = rolled + _attention(
        T.layer_norm(rolled, w[q1 + ".ln.gain"], w[q1 + ".ln.bias"]),
        w, q1, cfg.heads, window)
    seq = T.roll(rolled, -shift, axis=0) if shift else rolled
    return seq.reshape(v, 2 * h, 2 * wd, c2)


def apply_heads(feats: T.Value, w: dict, cfg: NetworkConfig) -> T.Value:
    """Linear heads mapping final features to raw attribute channels."""
    v, h, wd, c = feats.shape
    flat = feats.reshape(v * h * wd, c)
    if cfg.head_mode == "joint":
        raw = _linear(flat, w, "head.all")
    else:
        raw = T.concat([_linear(flat, w, f"head.{name}")
                        for name, _ in cfg.attr_groups], axis=-1)
    return raw.reshape(v, h, wd, cfg.out_channels)


def reconstruct(images: np.ndarray, cameras: list[Camera],
                w: dict, cfg: NetworkConfig) -> GaussianSet:
    """Full pipeline: tokenize -> encode -> upsample -> heads -> activate
    -> merge. Returns V * map_h * map_w pixel-aligned Gaussians."""
    if len(cameras) != cfg.views:
        raise ValueError(f"reconstruct: got {len(cameras)} cameras, "
                         f"config expects {cfg.views}")
    pluckers = np.stack([plucker_embed(pixel_rays(c)) for c in cameras])
    tokens = tokenize(images, pluckers, w, cfg)
    x = encode(tokens, w, cfg)
    gh, gw = cfg.grid_hw(0)
    x = x.reshape(cfg.views, gh, gw, cfg.width)
    for b in range(cfg.up_blocks):
        x = upsample_block(x, w, cfg, b)
    raw = apply_heads(x, w, cfg)
    mh, mw = cfg.map_hw
    sets = []
    for vi, cam in enumerate(cameras):
        map_cam = cam if (mh, mw) == (cam.height, cam.width) \
            else cam.resized(mw, mh)
        amap = AttributeMap(raw[vi], xyz_mode=cfg.position_head == "xyz")
        sets.append(activate(amap, map_cam, cfg.s_min, cfg.s_max,
                             cfg.depth_activation, cfg.scale_activation))
    return merge_views(sets)


# -- checkpoint io -----------------------------------------------------------

def save_checkpoint(path, cfg: NetworkConfig, weights: dict[str, np.ndarray],
                    extra: dict | None = None):
    """Single-file checkpoint: magic, json header (config echo + parameter
    manifest with shapes), then little-endian float32 data."""
    names = sorted(weights)
    header = {
        "config": asdict(cfg),
        "params": [{"name": n, "shape": list(weights[n].shape)} for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(weights[n], dtype="<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        cfg_dict = dict(header["config"])
        cfg_dict["image_hw"] = tuple(cfg_dict["image_hw"])
        cfg = NetworkConfig(**cfg_dict)
        weights = {}
        for p in header["params"]:
            shape = tuple(p["shape"])
            n = int(np.prod(shape))
            arr = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
            weights[p["name"]] = arr.copy()
    return cfg, weights, header.get("extra", {})
