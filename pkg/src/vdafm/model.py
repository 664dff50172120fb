"""The vision-conditioned dual-alignment fusion network.

Data flow for a batch ``(X_img, X_txt, X_tab)``::

    V_img = MLP_dr_img(X_img)            E_txt = MLP_dr_txt(X_txt)
    E_img = MLP_v2i(V_img)
    (E'_img, E'_txt) = encoder([E_img, E_txt])     # two tokens, no positions
    V_txt = MLP_t2v(E'_txt)
    F_f   = [L_img(V_img), L_txt(E_txt)]           # or (E'_img, E'_txt)
    logit = classifier([F_f, X_tab])
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, asdict, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embio import decode_emb, encode_emb
from .errors import ChecksumMismatch, ConfigError, CorruptFile, DimMismatch, ShapeMismatch

MODALITIES = ("image", "text", "tabular")


@dataclass
class VdafmConfig:
    d_img_in: int = 2048
    d_txt_in: int = 3072
    d_tab: int = 16
    d_hidden: int = 512
    d_model: int = 256
    n_layers: int = 1
    n_heads: int = 16
    d_fuse: int = 128
    dropout: float = 0.5
    d_cls_hidden: int = 128
    ffn_mult: int = 4
    fuse_post_transformer: bool = False

    def problems(self) -> list[str]:
        out = []
        for f in ("d_img_in", "d_txt_in", "d_hidden", "d_model", "n_layers",
                  "n_heads", "d_fuse", "d_cls_hidden", "ffn_mult"):
            if int(getattr(self, f)) <= 0:
                out.append(f"model.{f}: must be positive")
        if self.d_tab < 0:
            out.append("model.d_tab: must be >= 0")
        if self.n_heads > 0 and self.d_model % self.n_heads:
            out.append(f"model.n_heads: d_model={self.d_model} not divisible by {self.n_heads}")
        if not 0 <= self.dropout < 1:
            out.append("model.dropout: must lie in [0, 1)")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ConfigError(problems)


class ModelParams(OrderedDict):
    """Parameter name -> Tensor, in the fixed order used by checkpoints."""

    def arrays(self) -> dict:
        return {k: t.data for k, t in self.items()}

    def copy_arrays(self) -> dict:
        return {k: t.data.copy() for k, t in self.items()}

    def load_arrays(self, arrays: dict) -> None:
        for k, t in self.items():
            if arrays[k].shape != t.shape:
                raise ShapeMismatch(f"{k}: {arrays[k].shape} vs {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self.values())


def param_shapes(cfg: VdafmConfig) -> list[tuple[str, tuple]]:
    """Ordered (name, shape) list; weights are stored as (fan_in, fan_out)."""
    d, h = cfg.d_model, cfg.d_hidden
    spec = [
        ("dr_img.w1", (cfg.d_img_in, h)), ("dr_img.b1", (h,)),
        ("dr_img.w2", (h, d)), ("dr_img.b2", (d,)),
        ("dr_txt.w1", (cfg.d_txt_in, h)), ("dr_txt.b1", (h,)),
        ("dr_txt.w2", (h, d)), ("dr_txt.b2", (d,)),
        ("v2i.w1", (d, d)), ("v2i.b1", (d,)), ("v2i.w2", (d, d)), ("v2i.b2", (d,)),
    ]
    for layer in range(cfg.n_layers):
        p = f"enc{layer}."
        spec += [
            (p + "wq", (d, d)), (p + "bq", (d,)),
            (p + "wk", (d, d)), (p + "bk", (d,)),
            (p + "wv", (d, d)), (p + "bv", (d,)),
            (p + "wo", (d, d)), (p + "bo", (d,)),
            (p + "ln1.gamma", (d,)), (p + "ln1.beta", (d,)),
            (p + "ff.w1", (d, cfg.ffn_mult * d)), (p + "ff.b1", (cfg.ffn_mult * d,)),
            (p + "ff.w2", (cfg.ffn_mult * d, d)), (p + "ff.b2", (d,)),
            (p + "ln2.gamma", (d,)), (p + "ln2.beta", (d,)),
        ]
    spec += [
        ("t2v.w1", (d, d)), ("t2v.b1", (d,)), ("t2v.w2", (d, d)), ("t2v.b2", (d,)),
        ("fuse_img.w", (d, cfg.d_fuse)), ("fuse_img.b", (cfg.d_fuse,)),
        ("fuse_txt.w", (d, cfg.d_fuse)), ("fuse_txt.b", (cfg.d_fuse,)),
        ("cls.w1", (2 * cfg.d_fuse + cfg.d_tab, cfg.d_cls_hidden)), ("cls.b1", (cfg.d_cls_hidden,)),
        ("cls.w2", (cfg.d_cls_hidden, 1)), ("cls.b2", (1,)),
    ]
    return spec


def init_params(cfg: VdafmConfig, seed: int) -> ModelParams:
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases, unit layer-norm gains."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = ModelParams()
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            bound = np.sqrt(1.0 / shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


@dataclass
class ForwardTrace:
    V_img: Tensor
    E_txt: Tensor
    E_img: Tensor
    E_img_prime: Tensor
    E_txt_prime: Tensor
    V_txt: Tensor
    F_f: Tensor
    logit: Tensor
    p: Tensor


def _linear(x, params, prefix, w="w", b="b"):
    return ad.add(ad.matmul(x, params[f"{prefix}.{w}"]), params[f"{prefix}.{b}"])


def _mlp(x, params, prefix, dropout=0.0, rng=None, train=False):
    h = ad.relu(_linear(x, params, prefix, "w1", "b1"))
    h = ad.dropout(h, dropout, rng, train)
    return _linear(h, params, prefix, "w2", "b2")


def _attention(x, params, p, n_heads):
    bsz, n_tok, d = x.shape
    dk = d // n_heads

    def heads(t):
        return ad.transpose(ad.reshape(t, (bsz, n_tok, n_heads, dk)), (0, 2, 1, 3))

    q = heads(_linear(x, params, p, "wq", "bq"))
    k = heads(_linear(x, params, p, "wk", "bk"))
    v = heads(_linear(x, params, p, "wv", "bv"))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
    ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (bsz, n_tok, d))
    return _linear(ctx, params, p, "wo", "bo")


def _affine_norm(x, params, p):
    return ad.add(ad.mul(ad.layer_norm(x, axis=-1), params[p + ".gamma"]), params[p + ".beta"])


def encode_tokens(tokens, params: ModelParams, cfg: VdafmConfig) -> Tensor:
    """Post-norm transformer encoder stack over a (batch, tokens, d_model) input."""
    x = ad.as_tensor(tokens)
    for layer in range(cfg.n_layers):
        p = f"enc{layer}"
        x = _affine_norm(ad.add(x, _attention(x, params, p, cfg.n_heads)), params, p + ".ln1")
        ff = _linear(ad.relu(_linear(x, params, p + ".ff", "w1", "b1")), params, p + ".ff", "w2", "b2")
        x = _affine_norm(ad.add(x, ff), params, p + ".ln2")
    return x


def _check_batch(cfg: VdafmConfig, x_img, x_txt, x_tab):
    n = x_img.shape[0]
    for name, x, width in (("image", x_img, cfg.d_img_in), ("text", x_txt, cfg.d_txt_in),
                           ("tabular", x_tab, cfg.d_tab)):
        if x.ndim != 2 or x.shape[1] != width or x.shape[0] != n:
            raise ShapeMismatch(f"{name} batch has shape {x.shape}, model expects (n, {width})")


def forward(params: ModelParams, cfg: VdafmConfig, batch, train: bool = False,
            rng: Optional[np.random.Generator] = None) -> ForwardTrace:
    x_img, x_txt, x_tab = (ad.as_tensor(x) for x in batch)
    _check_batch(cfg, x_img, x_txt, x_tab)
    if train and cfg.dropout > 0 and rng is None:
        raise ValueError("training forward with dropout needs an rng")
    bsz, d = x_img.shape[0], cfg.d_model

    v_img = _mlp(x_img, params, "dr_img", cfg.dropout, rng, train)
    e_txt = _mlp(x_txt, params, "dr_txt", cfg.dropout, rng, train)
    e_img = _mlp(v_img, params, "v2i")
    tokens = ad.concat([ad.reshape(e_img, (bsz, 1, d)), ad.reshape(e_txt, (bsz, 1, d))], axis=1)
    enc = encode_tokens(tokens, params, cfg)
    e_img_p = ad.reshape(ad.slice_(enc, 1, 0, 1), (bsz, d))
    e_txt_p = ad.reshape(ad.slice_(enc, 1, 1, 2), (bsz, d))
    v_txt = _mlp(e_txt_p, params, "t2v")

    left, right = (e_img_p, e_txt_p) if cfg.fuse_post_transformer else (v_img, e_txt)
    f_f = ad.concat([_linear(left, params, "fuse_img"), _linear(right, params, "fuse_txt")], axis=1)
    h = ad.relu(_linear(ad.concat([f_f, x_tab], axis=1), params, "cls", "w1", "b1"))
    h = ad.dropout(h, cfg.dropout, rng, train)
    logit = ad.reshape(_linear(h, params, "cls", "w2", "b2"), (bsz,))
    return ForwardTrace(v_img, e_txt, e_img, e_img_p, e_txt_p, v_txt, f_f, logit, ad.sigmoid(logit))


def predict(params: ModelParams, cfg: VdafmConfig, batch, chunk: int = 256) -> np.ndarray:
    """Inference-mode probabilities, computed in chunks without a tape."""
    x_img, x_txt, x_tab = (np.asarray(x, dtype=np.float64) for x in batch)
    out = []
    for s in range(0, x_img.shape[0], chunk):
        sl = slice(s, s + chunk)
        out.append(forward(params, cfg, (x_img[sl], x_txt[sl], x_tab[sl]), train=False).p.data)
    return np.concatenate(out) if out else np.zeros(0)


def ablate_modality(batch, which) -> tuple:
    """Replace the named modalities by zero matrices of the same shape."""
    which = set(which)
    if not which:
        raise ValueError("name at least one modality to ablate")
    unknown = which - set(MODALITIES)
    if unknown:
        raise ValueError(f"unknown modalities: {sorted(unknown)}")
    return tuple(np.zeros_like(x) if m in which else x for m, x in zip(MODALITIES, batch))


# ------------------------------------------------------------- checkpoints
#
# File layout: b"VCK1", uint32 LE header length, UTF-8 JSON header, then one
# EMB1 block per parameter in param_shapes() order (vectors stored as one
# row). The header carries a SHA-256 of the concatenated blocks.

CKPT_MAGIC = b"VCK1"


def save_checkpoint(path, params: ModelParams, cfg: VdafmConfig, meta: dict) -> None:
    blocks = b"".join(encode_emb(params[name].data.reshape(shape[0], -1) if len(shape) > 1
                                 else params[name].data.reshape(1, -1))
                      for name, shape in param_shapes(cfg))
    header = {
        "config": asdict(cfg),
        "params": [[name, list(shape)] for name, shape in param_shapes(cfg)],
        "sha256": hashlib.sha256(blocks).hexdigest(),
        **meta,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + blocks)


def load_checkpoint(path) -> tuple[ModelParams, VdafmConfig, dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC or len(buf) < 8:
        raise CorruptFile(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    try:
        header = json.loads(buf[8:8 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable header ({exc})") from None
    blocks = buf[8 + hlen:]
    if hashlib.sha256(blocks).hexdigest() != header.get("sha256"):
        raise ChecksumMismatch(f"{path}: parameter checksum mismatch")
    known = {f.name for f in fields(VdafmConfig)}
    cfg = VdafmConfig(**{k: v for k, v in header["config"].items() if k in known})
    params = ModelParams()
    offset = 0
    for name, shape in param_shapes(cfg):
        mat, offset = decode_emb(blocks, offset, source=f"{path}:{name}")
        params[name] = Tensor(mat.reshape(shape), requires_grad=True, name=name)
    if offset != len(blocks):
        raise CorruptFile(f"{path}: trailing bytes after parameters")
    return params, cfg, header


def check_data_dims(cfg: VdafmConfig, dims: tuple[int, int, int]) -> None:
    expected = (cfg.d_img_in, cfg.d_txt_in, cfg.d_tab)
    names = ("d_img_in", "d_txt_in", "d_tab")
    bad = [f"model.{n}={e} but data has {g}" for n, e, g in zip(names, expected, dims) if e != g]
    if bad:
        raise DimMismatch("; ".join(bad))
