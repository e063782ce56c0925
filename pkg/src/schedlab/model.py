"""Shared-encoder speech model with an acoustic (masked prediction) branch
and an audio-visual branch.

Topology: conv frontend -> shared transformer encoder; on top of it a
speech decoder + grouped quantizer for the masked-contrastive branch, and
a temporal downsampler + audio transformer with a CLS token paired with
an image transformer with a CLS token for the audio-visual branch.

Parameters are partitioned into groups {shared, ssl_only,
vgs_audio_only, image_only}; only groups reached by the active loss
receive gradients.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as T
from .quantize import gumbel_softmax_st
from .serialization import file_sha256, read_tensors, write_tensors
from .tensor import Tensor


class ModelError(Exception):
    pass


@dataclass
class ModelConfig:
    frame_dim: int = 13
    image_dim: int = 16
    frontend_channels: tuple[int, ...] = (64, 64)
    frontend_kernel: int = 3
    frontend_strides: tuple[int, ...] = (2, 2)
    model_dim: int = 64
    heads: int = 4
    enc_layers: int = 4
    dec_layers: int = 2
    mlp_ratio: int = 4
    vgs_audio_layers: int = 2
    image_layers: int = 2
    groups: int = 2
    entries: int = 16
    code_dim: int = 8
    cmp_dim: int = 64
    emb_dim: int = 32
    mask_p_start: float = 0.15
    mask_span: int = 3
    quant_temperature: float = 0.5
    dropout: float = 0.0
    vgs_uses_masked_stream: bool = False
    max_len: int = 1024
    # scale on the init of the latent->encoder projection, relative to the
    # variance-preserving 1/sqrt(d_in).  Below 1 the untrained encoder is
    # dominated by its positional code (features start near chance); training
    # grows the projection back as the content becomes useful.
    content_gain: float = 1.0

    def __post_init__(self):
        for name in ("frontend_channels", "frontend_strides"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ModelError("need at least one encoder and one decoder layer")
        if self.groups * self.entries < 2:
            raise ModelError("codebook must have at least 2 codes")
        if self.model_dim % self.heads:
            raise ModelError("model_dim must be divisible by heads")
        if len(self.frontend_channels) != len(self.frontend_strides):
            raise ModelError("frontend channels/strides length mismatch")

    @property
    def latent_dim(self) -> int:
        return self.frontend_channels[-1]

    @property
    def n_speech_layers(self) -> int:
        return self.enc_layers + self.dec_layers

    @property
    def total_stride(self) -> int:
        s = 1
        for st in self.frontend_strides:
            s *= st
        return s

    @property
    def receptive_field(self) -> int:
        rf, stride = 1, 1
        for s in self.frontend_strides:
            rf += (self.frontend_kernel - 1) * stride
            stride *= s
        return rf

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name == "toy":
            cfg = {}
        elif name == "paper":
            cfg = dict(frontend_channels=(512,) * 6, frontend_strides=(2, 2, 1, 1, 1, 1),
                       model_dim=768, heads=12, enc_layers=8, dec_layers=4,
                       image_layers=6, entries=32, code_dim=128,
                       cmp_dim=256, emb_dim=256)
        else:
            raise ModelError(f"unknown model preset {name!r} (valid: toy, paper)")
        cfg.update(overrides)
        return cls(**cfg)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise ModelError(f"unknown model config keys: {sorted(bad)}")
        return cls(**d)


@dataclass
class MaskSpec:
    indices: np.ndarray  # masked latent-frame indices, sorted
    p_start: float
    span: int


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, Tensor]
    groups: dict[str, str]  # param name -> group tag

    def group_params(self, tag: str) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if self.groups[n] == tag}

    def set_requires_grad(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = np.zeros_like(p.data) if flag else None


GROUPS = ("shared", "ssl_only", "vgs_audio_only", "image_only")


# ---------------------------------------------------------------------------
# initialization


def init_model(config: ModelConfig, seed: int, dtype=np.float32) -> ModelState:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xE0]))
    params: dict[str, Tensor] = {}
    groups: dict[str, str] = {}

    def add(name, group, arr):
        params[name] = Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)
        groups[name] = group

    def linear(prefix, group, d_in, d_out):
        # Variance-preserving scale: keeps projected content comparable to
        # the O(1) sinusoid positions added downstream.
        add(f"{prefix}.w", group, rng.normal(0, 1.0 / np.sqrt(d_in), (d_in, d_out)))
        add(f"{prefix}.b", group, np.zeros(d_out))

    def block(prefix, group, d, ratio):
        add(f"{prefix}.ln1.g", group, np.ones(d))
        add(f"{prefix}.ln1.b", group, np.zeros(d))
        for nm in ("wq", "wk", "wv", "wo"):
            linear(f"{prefix}.attn.{nm}", group, d, d)
        add(f"{prefix}.ln2.g", group, np.ones(d))
        add(f"{prefix}.ln2.b", group, np.zeros(d))
        linear(f"{prefix}.mlp.fc1", group, d, ratio * d)
        linear(f"{prefix}.mlp.fc2", group, ratio * d, d)

    c = config
    c_in = c.frame_dim
    for i, (c_out, _s) in enumerate(zip(c.frontend_channels, c.frontend_strides)):
        scale = 1.0 / np.sqrt(c_in * c.frontend_kernel)
        add(f"frontend.conv{i}.w", "shared",
            rng.normal(0, scale, (c_out, c_in, c.frontend_kernel)))
        add(f"frontend.conv{i}.b", "shared", np.zeros(c_out))
        c_in = c_out
    linear("proj_in", "shared", c.latent_dim, c.model_dim)
    if c.content_gain != 1.0:
        params["proj_in.w"].data *= c.content_gain
    for i in range(c.enc_layers):
        block(f"enc.{i}", "shared", c.model_dim, c.mlp_ratio)

    add("mask_emb", "ssl_only", rng.normal(0, 0.1, c.latent_dim))
    for i in range(c.dec_layers):
        block(f"dec.{i}", "ssl_only", c.model_dim, c.mlp_ratio)
    linear("quant.logits", "ssl_only", c.latent_dim, c.groups * c.entries)
    add("quant.codebook", "ssl_only", rng.normal(0, 1.0, (c.groups, c.entries, c.code_dim)))
    linear("ssl.c_proj", "ssl_only", c.model_dim, c.cmp_dim)
    linear("ssl.q_proj", "ssl_only", c.groups * c.code_dim, c.cmp_dim)

    for i in range(2):
        scale = 1.0 / np.sqrt(c.model_dim * 3)
        add(f"vgs.down{i}.w", "vgs_audio_only", rng.normal(0, scale, (c.model_dim, c.model_dim, 3)))
        add(f"vgs.down{i}.b", "vgs_audio_only", np.zeros(c.model_dim))
    add("vgs.audio_cls", "vgs_audio_only", rng.normal(0, 0.02, c.model_dim))
    for i in range(c.vgs_audio_layers):
        block(f"vgs.audio.{i}", "vgs_audio_only", c.model_dim, c.mlp_ratio)
    add("vgs.audio_ln.g", "vgs_audio_only", np.ones(c.model_dim))
    add("vgs.audio_ln.b", "vgs_audio_only", np.zeros(c.model_dim))
    linear("vgs.a_proj", "vgs_audio_only", c.model_dim, c.emb_dim)

    linear("img.proj", "image_only", c.image_dim, c.model_dim)
    add("img.cls", "image_only", rng.normal(0, 0.02, c.model_dim))
    for i in range(c.image_layers):
        block(f"img.{i}", "image_only", c.model_dim, c.mlp_ratio)
    add("img.ln.g", "image_only", np.ones(c.model_dim))
    add("img.ln.b", "image_only", np.zeros(c.model_dim))
    linear("img.v_proj", "image_only", c.model_dim, c.emb_dim)

    return ModelState(config, params, groups)


# ---------------------------------------------------------------------------
# building blocks


@lru_cache(maxsize=8)
def _sinusoid_table(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim // 2)[None, :]
    angles = pos / np.power(10000.0, 2 * i / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table.astype(np.float32)


def _linear(state, prefix, x):
    return T.add(T.matmul(x, state.params[f"{prefix}.w"]), state.params[f"{prefix}.b"])


def _transformer_layer(state, prefix, x: Tensor, key_valid: np.ndarray,
                       rng=None, rate: float = 0.0) -> Tensor:
    """Pre-LN self-attention + MLP residual block.

    key_valid: (B, T) boolean; padded keys are excluded from attention.
    """
    p = state.params
    cfg = state.config
    B, L, d = x.shape
    heads = cfg.heads
    dh = d // heads

    h = T.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    q = _linear(state, f"{prefix}.attn.wq", h)
    k = _linear(state, f"{prefix}.attn.wk", h)
    v = _linear(state, f"{prefix}.attn.wv", h)

    def split(t):
        return T.transpose(T.reshape(t, (B, L, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(q), split(k), split(v)
    scores = T.div(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), float(np.sqrt(dh)))
    bias = np.where(key_valid[:, None, None, :], 0.0, -1e9).astype(x.dtype)
    att = T.softmax(T.add(scores, bias), axis=-1)
    att = T.dropout(att, rate, rng)
    ctx = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, L, d))
    x = T.add(x, T.dropout(_linear(state, f"{prefix}.attn.wo", ctx), rate, rng))

    h2 = T.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    m = _linear(state, f"{prefix}.mlp.fc2", T.gelu(_linear(state, f"{prefix}.mlp.fc1", h2)))
    return T.add(x, T.dropout(m, rate, rng))


def pad_batch(frame_list) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad (F, T_i) arrays to (B, F, T_max) plus a length vector."""
    lengths = np.array([f.shape[1] for f in frame_list])
    fdim = frame_list[0].shape[0]
    # keep the caller's precision: a float64 model must see a float64 graph
    dtype = np.result_type(np.float32, *(f.dtype for f in frame_list))
    out = np.zeros((len(frame_list), fdim, lengths.max()), dtype=dtype)
    for i, f in enumerate(frame_list):
        out[i, :, :f.shape[1]] = f
    return out, lengths


def latent_lengths(config: ModelConfig, lengths: np.ndarray) -> np.ndarray:
    out = np.asarray(lengths)
    for s in config.frontend_strides:
        out = -(-out // s)
    return out


# ---------------------------------------------------------------------------
# forward passes


def forward_frontend_batch(state: ModelState, frames: np.ndarray,
                           lengths: np.ndarray):
    """(B, F, T) frames -> latent Tensor (B, T_z, d_z), latent lengths, valid mask."""
    cfg = state.config
    if int(np.min(lengths)) < cfg.receptive_field:
        raise ModelError(
            f"utterance of {int(np.min(lengths))} frames is shorter than the "
            f"frontend receptive field ({cfg.receptive_field})")
    x = Tensor(frames)
    for i, stride in enumerate(cfg.frontend_strides):
        x = T.gelu(T.conv1d(x, state.params[f"frontend.conv{i}.w"],
                            state.params[f"frontend.conv{i}.b"], stride=stride))
    z_len = latent_lengths(cfg, lengths)
    z = T.transpose(x, (0, 2, 1))
    valid = np.arange(z.shape[1])[None, :] < z_len[:, None]
    z = T.mul(z, valid[:, :, None].astype(z.dtype))
    return z, z_len, valid


def forward_frontend(state: ModelState, frames: np.ndarray) -> Tensor:
    """Single utterance (F, T) -> latent (d_z, T_z)."""
    z, z_len, _ = forward_frontend_batch(state, frames[None, :, :],
                                         np.array([frames.shape[1]]))
    return T.transpose(T.reshape(z, z.shape[1:]), (1, 0))


def span_mask_indices(length: int, p_start: float, span: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Span-start sampling; if no span starts, one random span is forced."""
    starts = np.flatnonzero(rng.random(length) < p_start)
    if starts.size == 0:
        starts = np.array([int(rng.integers(0, length))])
    mask = np.zeros(length, dtype=bool)
    for s in starts:
        mask[s:s + span] = True
    return np.flatnonzero(mask)


def apply_span_mask(z: Tensor, state: ModelState, rng: np.random.Generator,
                    p_start: float | None = None, span: int | None = None):
    """Replace masked latent positions (z: (T_z, d_z)) with the mask embedding."""
    cfg = state.config
    p_start = cfg.mask_p_start if p_start is None else p_start
    span = cfg.mask_span if span is None else span
    idx = span_mask_indices(z.shape[0], p_start, span, rng)
    m = np.zeros((z.shape[0], 1), dtype=z.dtype)
    m[idx] = 1.0
    z_masked = T.add(T.mul(z, 1.0 - m), T.mul(T.reshape(state.params["mask_emb"], (1, -1)), m))
    return z_masked, MaskSpec(idx, p_start, span)


def _encode_shared(state, z: Tensor, valid: np.ndarray, rng=None, rate=0.0,
                   collect: list | None = None) -> Tensor:
    cfg = state.config
    x = _linear(state, "proj_in", z)
    x = T.add(x, _sinusoid_table(x.shape[1], cfg.model_dim)[None].astype(x.dtype))
    for i in range(cfg.enc_layers):
        x = _transformer_layer(state, f"enc.{i}", x, valid, rng, rate)
        if collect is not None:
            collect.append(x)
    return x


def _decode_ssl(state, x: Tensor, valid: np.ndarray, rng=None, rate=0.0,
                collect: list | None = None) -> Tensor:
    for i in range(state.config.dec_layers):
        x = _transformer_layer(state, f"dec.{i}", x, valid, rng, rate)
        if collect is not None:
            collect.append(x)
    return x


def _quantize(state, z: Tensor, rng):
    """Latents -> (target code vectors (B,T,G*code_dim), soft probs (B,T,G,V))."""
    cfg = state.config
    logits = _linear(state, "quant.logits", z)
    logits = T.reshape(logits, (z.shape[0], z.shape[1], cfg.groups, cfg.entries))
    hard, soft = gumbel_softmax_st(logits, cfg.quant_temperature, rng)
    parts = []
    for g in range(cfg.groups):
        parts.append(T.matmul(hard[:, :, g, :], state.params["quant.codebook"][g]))
    return T.concat(parts, axis=-1), soft


@dataclass
class SslForward:
    c: Tensor                 # (B, T_z, cmp) context projections (masked stream)
    q: Tensor                 # (B, T_z, cmp) quantized-target projections
    soft: Tensor              # (B, T_z, G, V) soft code probabilities
    mask: np.ndarray          # (B, T_z) bool, masked positions
    valid: np.ndarray         # (B, T_z) bool, non-pad positions
    layers: list[Tensor] = field(default_factory=list)


def forward_ssl_batch(state: ModelState, frame_list, rng: np.random.Generator,
                      train: bool = False, collect_layers: bool = False) -> SslForward:
    cfg = state.config
    frames, lengths = pad_batch(frame_list)
    z, z_len, valid = forward_frontend_batch(state, frames, lengths)
    B, Tz, _ = z.shape

    mask = np.zeros((B, Tz), dtype=bool)
    for b in range(B):
        idx = span_mask_indices(int(z_len[b]), cfg.mask_p_start, cfg.mask_span, rng)
        mask[b, idx] = True

    codes, soft = _quantize(state, z, rng if train else None)
    q = _linear(state, "ssl.q_proj", codes)

    m = mask[:, :, None].astype(z.dtype)
    z_m = T.add(T.mul(z, 1.0 - m), T.mul(T.reshape(state.params["mask_emb"], (1, 1, -1)), m))
    rate = cfg.dropout if train else 0.0
    collect: list | None = [] if collect_layers else None
    x = _encode_shared(state, z_m, valid, rng if train else None, rate, collect)
    x = _decode_ssl(state, x, valid, rng if train else None, rate, collect)
    c = _linear(state, "ssl.c_proj", x)
    return SslForward(c, q, soft, mask, valid, collect or [])


def forward_ssl(state: ModelState, utterance, rng: np.random.Generator,
                **kw) -> SslForward:
    return forward_ssl_batch(state, [utterance.frames], rng, **kw)


def forward_vgs_batch(state: ModelState, frame_list, token_list,
                      rng: np.random.Generator | None = None,
                      train: bool = False):
    """Batched audio-visual forward -> L2-normalized (B, emb) CLS embeddings."""
    cfg = state.config
    rate = cfg.dropout if train else 0.0
    drop_rng = rng if train else None

    frames, lengths = pad_batch(frame_list)
    z, z_len, valid = forward_frontend_batch(state, frames, lengths)
    if cfg.vgs_uses_masked_stream and rng is not None:
        B, Tz, _ = z.shape
        mask = np.zeros((B, Tz), dtype=bool)
        for b in range(B):
            mask[b, span_mask_indices(int(z_len[b]), cfg.mask_p_start, cfg.mask_span, rng)] = True
        m = mask[:, :, None].astype(z.dtype)
        z = T.add(T.mul(z, 1.0 - m), T.mul(T.reshape(state.params["mask_emb"], (1, 1, -1)), m))
    h = _encode_shared(state, z, valid, drop_rng, rate)

    # temporal downsampler: two conv+pool stages, each halving time.
    # Invalid (pad) positions are re-zeroed before every stage so the
    # stride-1 convs and pools cannot leak batch padding into the tail
    # of a shorter utterance.
    x = T.transpose(h, (0, 2, 1))
    ds_len = z_len.copy()
    for i in range(2):
        keep = (np.arange(x.shape[2])[None, :] < ds_len[:, None]).astype(x.dtype)
        x = T.mul(x, keep[:, None, :])
        x = T.gelu(T.conv1d(x, state.params[f"vgs.down{i}.w"],
                            state.params[f"vgs.down{i}.b"], stride=1))
        x = T.mul(x, keep[:, None, :])
        x = T.avgpool1d(x, 2)
        ds_len = -(-ds_len // 2)
    x = T.transpose(x, (0, 2, 1))
    B, Td, d = x.shape
    cls = T.reshape(state.params["vgs.audio_cls"], (1, 1, -1))
    cls = T.mul(cls, np.ones((B, 1, 1), dtype=x.dtype))
    x = T.concat([cls, x], axis=1)
    x = T.add(x, _sinusoid_table(Td + 1, d)[None].astype(x.dtype))
    a_valid = np.concatenate([np.ones((B, 1), dtype=bool),
                              np.arange(Td)[None, :] < ds_len[:, None]], axis=1)
    for i in range(cfg.vgs_audio_layers):
        x = _transformer_layer(state, f"vgs.audio.{i}", x, a_valid, drop_rng, rate)
    a = T.layer_norm(x[:, 0, :], state.params["vgs.audio_ln.g"], state.params["vgs.audio_ln.b"])
    a_emb = T.l2_normalize(_linear(state, "vgs.a_proj", a))

    n_tok = np.array([t.shape[0] for t in token_list])
    tok_dtype = np.result_type(np.float32, *(t.dtype for t in token_list))
    tok = np.zeros((len(token_list), int(n_tok.max()), cfg.image_dim), dtype=tok_dtype)
    for i, t in enumerate(token_list):
        tok[i, :t.shape[0]] = t
    y = _linear(state, "img.proj", Tensor(tok))
    icls = T.mul(T.reshape(state.params["img.cls"], (1, 1, -1)),
                 np.ones((len(token_list), 1, 1), dtype=y.dtype))
    y = T.concat([icls, y], axis=1)  # image tokens are a set: no positions
    i_valid = np.concatenate([np.ones((len(token_list), 1), dtype=bool),
                              np.arange(tok.shape[1])[None, :] < n_tok[:, None]], axis=1)
    for i in range(cfg.image_layers):
        y = _transformer_layer(state, f"img.{i}", y, i_valid, drop_rng, rate)
    v = T.layer_norm(y[:, 0, :], state.params["img.ln.g"], state.params["img.ln.b"])
    v_emb = T.l2_normalize(_linear(state, "img.v_proj", v))
    return a_emb, v_emb


def forward_vgs(state: ModelState, utterance, scene, **kw):
    a, v = forward_vgs_batch(state, [utterance.frames], [scene.tokens], **kw)
    return T.reshape(a, (-1,)), T.reshape(v, (-1,))


def speech_layer_features(state: ModelState, frame_list) -> tuple[list[np.ndarray], np.ndarray]:
    """Per-layer activations of the unmasked speech stream.

    Returns ([layer_1 .. layer_{L_enc+L_dec}] each (B, T_z, d), z_lengths).
    """
    frames, lengths = pad_batch(frame_list)
    z, z_len, valid = forward_frontend_batch(state, frames, lengths)
    collect: list = []
    x = _encode_shared(state, z, valid, collect=collect)
    _decode_ssl(state, x, valid, collect=collect)
    return [c.data for c in collect], z_len


def extract_layer_features(state: ModelState, utterance, layer: int) -> np.ndarray:
    """Frame-level features of transformer layer ``layer`` (1-based) for one
    utterance, computed on the unmasked stream."""
    n = state.config.n_speech_layers
    if not 1 <= layer <= n:
        raise ModelError(f"layer {layer} out of range 1..{n}")
    layers, z_len = speech_layer_features(state, [utterance.frames])
    return layers[layer - 1][0, :int(z_len[0]), :]


# ---------------------------------------------------------------------------
# checkpoints


def save_model(state: ModelState, out_dir, extra: dict | None = None):
    os.makedirs(out_dir, exist_ok=True)
    params_path = os.path.join(out_dir, "params.bin")
    write_tensors(params_path, {n: p.data for n, p in state.params.items()})
    meta = {
        "schema_version": 1,
        "config": asdict(state.config),
        "param_names": list(state.params),
        "groups": state.groups,
        "params_sha256": file_sha256(params_path),
    }
    if extra:
        meta.update(extra)
    with open(os.path.join(out_dir, "model.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True, separators=(",", ":"))


def load_model(model_dir) -> ModelState:
    with open(os.path.join(model_dir, "model.json"), encoding="utf-8") as f:
        meta = json.load(f)
    params_path = os.path.join(model_dir, "params.bin")
    digest = file_sha256(params_path)
    if digest != meta["params_sha256"]:
        raise ModelError(f"checkpoint {model_dir} corrupt: params.bin hash mismatch")
    config = ModelConfig.from_dict(meta["config"])
    raw = read_tensors(params_path)
    params = {n: Tensor(raw[n], requires_grad=True) for n in meta["param_names"]}
    return ModelState(config, params, dict(meta["groups"]))
