"""Small conv encoder/decoder with hand-written reverse mode.

Layout is channels-last (B, H, W, C) throughout. Two variants share one
parameter naming scheme:

``plain``
    encoder: three stride-2 3x3 convs (8/16/32 channels), global average pool,
    two linear 50-unit heads. Decoder: linear projection of z to a
    (P/8, P/8, 32) map, then three [3x3 conv, x2 nearest upsample] stages and
    a 3x3 output conv giving 2 class logits. The decoder sees the image only
    through z.
``unet``
    as ``plain`` plus a stride-1 conv stage at the bottom of the encoder and
    of the decoder, with encoder features concatenated into every decoder
    stage at matching resolution.

Everything is float64 so that central finite differences can check the
gradients to 1e-4.
"""
from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import bottleneck as bn
from . import mgd
from .errors import DataFormatError, DimensionMismatchError, InvalidParameterError, NumericError
from .mgd import GaussianND

LEAK = 0.01
DEFAULT_BETA = 5.0
JACCARD_SMOOTH = 1e-6
VARIANTS = ("plain", "unet")


@dataclass(frozen=True)
class Architecture:
    variant: str = "plain"
    patch: int = 32
    channels: int = 3
    widths: tuple = (8, 16, 32)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidParameterError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.patch % 8 or self.patch < 8:
            raise InvalidParameterError(f"patch size must be a positive multiple of 8, got {self.patch}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def unet(self) -> bool:
        return self.variant == "unet"

    @property
    def bottom(self) -> int:
        return self.patch // 8

    def shapes(self) -> OrderedDict:
        c1, c2, c3 = self.widths
        s = self.bottom
        skip = self.unet
        sh = OrderedDict()
        sh["enc1.w"], sh["enc1.b"] = (3, 3, self.channels, c1), (c1,)
        sh["enc2.w"], sh["enc2.b"] = (3, 3, c1, c2), (c2,)
        sh["enc3.w"], sh["enc3.b"] = (3, 3, c2, c3), (c3,)
        if skip:
            sh["enc4.w"], sh["enc4.b"] = (3, 3, c3, c3), (c3,)
        sh["mu_head.w"], sh["mu_head.b"] = (c3, bn.HEAD_WIDTH), (bn.HEAD_WIDTH,)
        sh["sigma_head.w"], sh["sigma_head.b"] = (c3, bn.HEAD_WIDTH), (bn.HEAD_WIDTH,)
        sh["dec_in.w"], sh["dec_in.b"] = (bn.HEAD_WIDTH, s * s * c3), (s * s * c3,)
        if skip:
            sh["dec0.w"], sh["dec0.b"] = (3, 3, 2 * c3, c3), (c3,)
        sh["dec1.w"], sh["dec1.b"] = (3, 3, c3 * (2 if skip else 1), c2), (c2,)
        sh["dec2.w"], sh["dec2.b"] = (3, 3, c2 * (2 if skip else 1), c1), (c1,)
        sh["dec3.w"], sh["dec3.b"] = (3, 3, c1 * (2 if skip else 1), c1), (c1,)
        sh["outc.w"], sh["outc.b"] = (3, 3, c1, 2), (2,)
        return sh


@dataclass(eq=False)
class NetworkParams:
    arch: Architecture
    tensors: OrderedDict

    def __post_init__(self):
        expected = self.arch.shapes()
        if list(expected) != list(self.tensors):
            raise DimensionMismatchError(f"tensor names {list(self.tensors)} do not match {list(expected)}")
        for name, shape in expected.items():
            t = np.asarray(self.tensors[name], dtype=np.float64)
            if t.shape != tuple(shape):
                raise DimensionMismatchError(f"{name}: shape {t.shape}, expected {shape}")
            self.tensors[name] = t

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self) -> NetworkParams:
        return NetworkParams(self.arch, OrderedDict((k, v.copy()) for k, v in self.tensors.items()))

    def count(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_params(arch: Architecture, seed: int) -> NetworkParams:
    """He-normal convolutions, 1/sqrt(fan_in) linear layers, zero biases."""
    rng = np.random.default_rng([int(seed), 0x4E4554])
    out = OrderedDict()
    for name, shape in arch.shapes().items():
        if name.endswith(".b"):
            out[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[:-1]))
        gain = 1.0 if "head" in name else 2.0
        out[name] = rng.normal(0.0, math.sqrt(gain / fan_in), shape)
    return NetworkParams(arch, out)


# ---------------------------------------------------------------- primitives

def conv2d(x, w, b, stride=1):
    """3x3 convolution with zero padding 1. Returns (out, windows) for backward."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    out = np.tensordot(win, w, axes=([4, 5, 3], [0, 1, 2])) + b
    return out, win


def conv2d_backward(dout, win, w, x_shape, stride=1):
    dw = np.tensordot(win, dout, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    db = dout.sum(axis=(0, 1, 2))
    B, H, W, C = x_shape
    dxp = np.zeros((B, H + 2, W + 2, C))
    ho, wo = dout.shape[1], dout.shape[2]
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dout @ w[i, j].T
    return dxp[:, 1:-1, 1:-1, :], dw, db


def leaky(x):
    return np.where(x > 0, x, LEAK * x)


def leaky_backward(d, pre):
    return d * np.where(pre > 0, 1.0, LEAK)


def upsample2(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(d):
    B, H, W, C = d.shape
    return d.reshape(B, H // 2, 2, W // 2, 2, C).sum(axis=(2, 4))


# ---------------------------------------------------------------- encoder

def _check_batch(params, x):
    a = params.arch
    if x.ndim != 4 or x.shape[1:] != (a.patch, a.patch, a.channels):
        raise DimensionMismatchError(f"batch must be B x {a.patch} x {a.patch} x {a.channels}, got {x.shape}")


def _encode(params: NetworkParams, x):
    _check_batch(params, x)
    tape = {"x": x}
    h = x
    stages = [("enc1", 2), ("enc2", 2), ("enc3", 2)] + ([("enc4", 1)] if params.arch.unet else [])
    feats = []
    for name, stride in stages:
        pre, win = conv2d(h, params[name + ".w"], params[name + ".b"], stride)
        tape[name] = (h.shape, win, pre, stride)
        h = leaky(pre)
        feats.append(h)
    pooled = h.mean(axis=(1, 2))
    tape["pooled"] = pooled
    tape["last_shape"] = h.shape
    heads = bn.HeadActivations(
        pooled @ params["mu_head.w"] + params["mu_head.b"],
        pooled @ params["sigma_head.w"] + params["sigma_head.b"],
    )
    return feats, heads, tape


def encoder_forward(params: NetworkParams, batch):
    """Returns (per-stage feature maps, HeadActivations)."""
    feats, heads, _ = _encode(params, np.asarray(batch, dtype=float))
    return feats, heads


def _encode_backward(params, tape, d_mu_head, d_sigma_head, d_feats, grads):
    pooled = tape["pooled"]
    grads["mu_head.w"] = pooled.T @ d_mu_head
    grads["mu_head.b"] = d_mu_head.sum(axis=0)
    grads["sigma_head.w"] = pooled.T @ d_sigma_head
    grads["sigma_head.b"] = d_sigma_head.sum(axis=0)
    d_pooled = d_mu_head @ params["mu_head.w"].T + d_sigma_head @ params["sigma_head.w"].T
    B, H, W, C = tape["last_shape"]
    d_h = np.broadcast_to(d_pooled[:, None, None, :] / (H * W), (B, H, W, C)).copy()
    names = ["enc1", "enc2", "enc3"] + (["enc4"] if params.arch.unet else [])
    for k in range(len(names) - 1, -1, -1):
        name = names[k]
        if d_feats is not None and d_feats[k] is not None:
            d_h = d_h + d_feats[k]
        x_shape, win, pre, stride = tape[name]
        d_pre = leaky_backward(d_h, pre)
        d_h, grads[name + ".w"], grads[name + ".b"] = conv2d_backward(d_pre, win, params[name + ".w"], x_shape, stride)
    return d_h


# ---------------------------------------------------------------- decoder

def _decode(params: NetworkParams, z, skips):
    a = params.arch
    if skips is not None and not a.unet:
        raise InvalidParameterError("the plain variant takes no skip connections")
    if a.unet and skips is None:
        raise InvalidParameterError("the unet variant needs encoder skips")
    z = np.asarray(z, dtype=float)
    if z.ndim != 3 or z.shape[1:] != (bn.N_VARS, bn.N_PER_VAR):
        raise DimensionMismatchError(f"z must be B x 5 x 10, got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite latent sample")
    B = z.shape[0]
    flat = z.reshape(B, bn.HEAD_WIDTH)
    tape = {"flat": flat}
    pre = flat @ params["dec_in.w"] + params["dec_in.b"]
    tape["dec_in"] = pre
    h = leaky(pre).reshape(B, a.bottom, a.bottom, a.widths[2])
    stages = (["dec0"] if a.unet else []) + ["dec1", "dec2", "dec3"]
    # skip attached to each stage, by index into the encoder feature list
    skip_of = {"dec0": 3, "dec1": 2, "dec2": 1, "dec3": 0}
    for name in stages:
        if a.unet:
            s = skips[skip_of[name]]
            if s.shape[:3] != h.shape[:3]:
                raise DimensionMismatchError(f"{name}: skip shape {s.shape} vs decoder {h.shape}")
            h = np.concatenate([h, s], axis=-1)
        conv_pre, win = conv2d(h, params[name + ".w"], params[name + ".b"], 1)
        tape[name] = (h.shape, win, conv_pre)
        h = leaky(conv_pre)
        if name != "dec0":
            h = upsample2(h)
    logits, win = conv2d(h, params["outc.w"], params["outc.b"], 1)
    tape["outc"] = (h.shape, win)
    return logits, tape


def decoder_forward(params: NetworkParams, z, skips=None):
    """Class logits (B x P x P x 2) from latent samples (B x 5 x 10)."""
    logits, _ = _decode(params, z, skips)
    return logits


def _decode_backward(params, tape, d_logits, grads):
    a = params.arch
    x_shape, win = tape["outc"]
    d_h, grads["outc.w"], grads["outc.b"] = conv2d_backward(d_logits, win, params["outc.w"], x_shape, 1)
    stages = (["dec0"] if a.unet else []) + ["dec1", "dec2", "dec3"]
    skip_of = {"dec0": 3, "dec1": 2, "dec2": 1, "dec3": 0}
    d_skips = [None] * (4 if a.unet else 0)
    for name in reversed(stages):
        if name != "dec0":
            d_h = upsample2_backward(d_h)
        x_shape, win, conv_pre = tape[name]
        d_pre = leaky_backward(d_h, conv_pre)
        d_in, grads[name + ".w"], grads[name + ".b"] = conv2d_backward(d_pre, win, params[name + ".w"], x_shape, 1)
        if a.unet:
            c = d_in.shape[-1] // 2
            d_h, d_skips[skip_of[name]] = d_in[..., :c], d_in[..., c:]
        else:
            d_h = d_in
    B = d_h.shape[0]
    d_pre = leaky_backward(d_h.reshape(B, -1), tape["dec_in"])
    grads["dec_in.w"] = tape["flat"].T @ d_pre
    grads["dec_in.b"] = d_pre.sum(axis=0)
    d_z = (d_pre @ params["dec_in.w"].T).reshape(B, bn.N_VARS, bn.N_PER_VAR)
    return d_z, (d_skips if a.unet else None)


# ---------------------------------------------------------------- losses

def softmax2(logits):
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def foreground_prob(logits):
    return softmax2(np.asarray(logits, dtype=float))[..., 1]


def class_weights(gt) -> np.ndarray:
    """Per-patch (w_background, w_foreground): inverse class frequency, summing to 2."""
    g = np.asarray(gt, dtype=float)
    npix = g.shape[-1] * g.shape[-2]
    f = np.clip(g.reshape(g.shape[0], -1).mean(axis=1), 1.0 / npix, 1.0 - 1.0 / npix)
    return np.stack([2.0 * f, 2.0 * (1.0 - f)], axis=1)


def _check_gt(logits, gt):
    gt = np.asarray(gt)
    if gt.shape != logits.shape[:3]:
        raise DimensionMismatchError(f"gt shape {gt.shape} vs logits {logits.shape}")
    if not np.all((gt == 0) | (gt == 1)):
        raise InvalidParameterError("gt must be binary")
    return gt.astype(float)


def _construction(logits, gt):
    """Loss parts and dL/dlogits, averaged over the batch."""
    logits = np.asarray(logits, dtype=float)
    g = _check_gt(logits, gt)
    B, P, Q, _ = logits.shape
    npix = P * Q
    m = logits.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(logits - m).sum(axis=-1))
    logp1 = logits[..., 1] - lse
    logp0 = logits[..., 0] - lse
    p1 = np.exp(logp1)
    w = class_weights(g)
    wpix = np.where(g > 0, w[:, 1, None, None], w[:, 0, None, None])
    nll_pix = -np.where(g > 0, logp1, logp0)
    l_ce = float(np.mean(np.sum(wpix * nll_pix, axis=(1, 2)) / npix))

    inter = np.sum(p1 * g, axis=(1, 2))
    union = np.sum(p1 + g - p1 * g, axis=(1, 2))
    jac = (inter + JACCARD_SMOOTH) / (union + JACCARD_SMOOTH)
    l_j = float(np.mean(1.0 - jac))

    # d/dlogits of the weighted cross entropy
    onehot1 = g
    d_ce = np.empty_like(logits)
    p0 = 1.0 - p1
    d_ce[..., 1] = wpix * (p1 - onehot1)
    d_ce[..., 0] = wpix * (p0 - (1.0 - onehot1))
    d_ce /= npix * B
    # d/dp1 of (1 - J), then through the softmax
    U = (union + JACCARD_SMOOTH)[:, None, None]
    I = (inter + JACCARD_SMOOTH)[:, None, None]
    d_p1 = -(g * U - I * (1.0 - g)) / (U * U) / B
    s = p1 * p0 * d_p1
    d_j = np.stack([-s, s], axis=-1)
    return l_ce, l_j, d_ce + d_j


def loss_construction(logits, gt) -> float:
    """Class-weighted cross entropy + (1 - soft Jaccard), averaged over the batch."""
    l_ce, l_j, _ = _construction(logits, gt)
    return l_ce + l_j


def loss_total(l_cons: float, l_kl: float, beta: float = DEFAULT_BETA) -> float:
    if beta < 0:
        raise InvalidParameterError("beta must be non-negative")
    return l_cons + beta * l_kl


@dataclass
class LossBreakdown:
    total: float
    cons: float
    ce: float
    jaccard: float
    kl: float


def draw_eps(prior: GaussianND, batch: int, rng: np.random.Generator) -> np.ndarray:
    """B x 50 prior draws laid out 10 per variable (see bottleneck.arrange_prior_samples)."""
    return bn.arrange_prior_samples(mgd.sample(prior, batch * bn.N_PER_VAR, rng), batch)


@dataclass(eq=False)
class ForwardResult:
    logits: np.ndarray
    heads: bn.HeadActivations
    posterior: bn.PosteriorParams
    eps: np.ndarray
    z: np.ndarray


def forward(params: NetworkParams, batch, prior: GaussianND, rng=None, eps=None):
    """Full stochastic pass; returns a ForwardResult plus the tapes for backward."""
    x = np.asarray(batch, dtype=float)
    feats, heads, etape = _encode(params, x)
    post = bn.posterior_from_heads(heads)
    if eps is None:
        eps = draw_eps(prior, x.shape[0], rng)
    z = bn.reparameterize(prior, post, eps)
    logits, dtape = _decode(params, z, feats if params.arch.unet else None)
    return ForwardResult(logits, heads, post, eps, z), (etape, dtape)


def backward(params: NetworkParams, batch, gt, prior: GaussianND, rng=None, beta: float = DEFAULT_BETA, eps=None):
    """Loss breakdown and exact gradients of cons + beta*KL(q || prior) for every tensor."""
    res, (etape, dtape) = forward(params, batch, prior, rng, eps)
    l_ce, l_j, d_logits = _construction(res.logits, gt)
    kl, d_mu_kl, d_sig_kl = mgd.kl_divergence_grad(res.posterior.gaussian(), prior)
    cons = l_ce + l_j
    total = loss_total(cons, kl, beta)
    terms = {"ce": l_ce, "jaccard": l_j, "kl": kl}
    if not all(math.isfinite(v) for v in terms.values()):
        bad = ", ".join(f"{k}={v}" for k, v in terms.items() if not math.isfinite(v))
        raise NumericError(f"non-finite loss term: {bad}", terms)

    grads = {}
    d_z, d_skips = _decode_backward(params, dtape, d_logits, grads)
    d_mu_r, d_sig_r = bn.reparameterize_backward(prior, res.posterior, res.eps, d_z)
    d_mu = beta * d_mu_kl + d_mu_r
    d_sig = beta * d_sig_kl + d_sig_r
    B = res.heads.batch
    d_mu_head = bn.mean_head_backward(d_mu, B)
    d_sigma_head = bn.cov_head_backward(d_sig, res.heads.sigma_head)
    _encode_backward(params, etape, d_mu_head, d_sigma_head, d_skips, grads)
    ordered = OrderedDict((k, grads[k]) for k in params.tensors)
    return LossBreakdown(total, cons, l_ce, l_j, kl), ordered


def loss_only(params: NetworkParams, batch, gt, prior, beta=DEFAULT_BETA, eps=None, rng=None) -> float:
    res, _ = forward(params, batch, prior, rng, eps)
    return loss_total(loss_construction(res.logits, gt), mgd.kl_divergence(res.posterior.gaussian(), prior), beta)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = "mvprior-checkpoint-v1"


def save_checkpoint(path, params: NetworkParams, *, seed: int, step: int, extra: dict | None = None,
                    meta: dict | None = None) -> None:
    """One JSON header line, then float32 little-endian payload in header order.

    ``extra`` holds additional named tensors (optimizer moments).
    """
    tensors = list(params.tensors.items()) + list((extra or {}).items())
    header = {
        "format": CHECKPOINT_MAGIC,
        "architecture": asdict(params.arch),
        "seed": int(seed),
        "step": int(step),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors],
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, v in tensors:
            fh.write(np.asarray(v, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (NetworkParams, header, extra tensors)."""
    path = Path(path)
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    try:
        header = json.loads(raw[:nl].decode())
        if header.get("format") != CHECKPOINT_MAGIC:
            raise ValueError("bad magic")
        arch = Architecture(**{**header["architecture"], "widths": tuple(header["architecture"]["widths"])})
    except (ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"{path}: not a checkpoint ({exc})") from exc
    payload = raw[nl + 1:]
    need = sum(4 * int(np.prod(t["shape"])) for t in header["tensors"])
    if len(payload) != need:
        raise DataFormatError(f"{path}: payload has {len(payload)} bytes, header needs {need}")
    out, off = OrderedDict(), 0
    for t in header["tensors"]:
        n = int(np.prod(t["shape"]))
        out[t["name"]] = np.frombuffer(payload, dtype="<f4", count=n, offset=off).astype(np.float64).reshape(t["shape"])
        off += 4 * n
    names = list(arch.shapes())
    params = NetworkParams(arch, OrderedDict((k, out.pop(k)) for k in names))
    return params, header, out
