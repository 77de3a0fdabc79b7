"""Training loop: batching, RAdam, triangular cyclical learning rate, validation.

Every random draw in a step comes from a generator seeded by ``(seed, step, stream)``.
Parameters and optimizer moments are rounded to float32 after each update.
Together these make a checkpointed run resume bit-for-bit.
"""
from __future__ import annotations

import csv
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import bottleneck as bn
from . import metrics, mgd
from . import network as net
from .errors import InvalidParameterError
from .mgd import GaussianND

_BATCH_STREAM = 1
_EPS_STREAM = 2
_VAL_STREAM = 3


@dataclass
class TrainConfig:
    beta: float = net.DEFAULT_BETA
    batch: int = 32
    lr_min: float = 5e-5
    lr_max: float = 1e-4
    cycle: int = 200
    steps: int = 2000
    val_interval: int = 100
    seed: int = 0
    variant: str = "plain"
    patch: int = 32

    def __post_init__(self):
        if self.lr_min > self.lr_max:
            raise InvalidParameterError("lr_min must not exceed lr_max")
        if self.batch < 2:
            raise InvalidParameterError("batch size must be >= 2 (the covariance head needs batch statistics)")
        if self.cycle <= 0:
            raise InvalidParameterError("cycle length must be positive")
        if self.beta < 0:
            raise InvalidParameterError("beta must be non-negative")

    def architecture(self, channels: int = 3) -> net.Architecture:
        return net.Architecture(self.variant, self.patch, channels)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Triangular wave: lr_min at multiples of the cycle, lr_max half way through."""
    half = cfg.cycle / 2
    pos = step % cfg.cycle
    frac = 1.0 - abs(pos / half - 1.0)
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * frac


@dataclass
class RAdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def optimizer_update(params: dict, grads: dict, lr: float, state: RAdamState, *, beta1: float = 0.9,
                     beta2: float = 0.999, eps: float = 1e-8, round32: bool = False) -> dict:
    """One rectified-Adam step. Returns new parameter arrays; ``state`` is updated in place.

    While the variance rectification is undefined (rho_t <= 4) the step falls
    back to the bias-corrected momentum direction.
    """
    state.t += 1
    t = state.t
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    b2t = beta2 ** t
    rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t)
    rect = None
    if rho_t > 4.0:
        rect = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
    out = OrderedDict()
    for name, w in params.items():
        g = grads[name]
        m = beta1 * state.m.get(name, 0.0) + (1 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        if rect is None:
            new = w - lr * m_hat
        else:
            new = w - lr * rect * m_hat / (np.sqrt(v / (1 - b2t)) + eps)
        if round32:
            new, m, v = _f32(new), _f32(m), _f32(v)
        state.m[name], state.v[name] = m, v
        out[name] = new
    return out


@dataclass
class StepRecord:
    step: int
    lr: float
    l_total: float
    l_cons: float
    l_kl: float


@dataclass
class ValRecord:
    step: int
    d_mah: float
    nll: float
    mse: float
    j: float
    f: float


@dataclass
class TrainReport:
    steps: list = field(default_factory=list)
    vals: list = field(default_factory=list)

    def write(self, train_csv, val_csv) -> None:
        _write_csv(train_csv, StepRecord, self.steps)
        _write_csv(val_csv, ValRecord, self.vals)


def _write_csv(path, cls, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f.name for f in fields(cls)])
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in asdict(r).values()])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


@dataclass(eq=False)
class PatchSet:
    """Stacked training patches: images (N, P, P, C) in [0, 1] and masks (N, P, P)."""

    images: np.ndarray
    masks: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.masks = np.asarray(self.masks).astype(np.float64)
        if len(self.images) != len(self.masks):
            raise InvalidParameterError("images and masks disagree on count")

    def __len__(self):
        return len(self.images)

    @classmethod
    def from_patches(cls, patches) -> PatchSet:
        return cls(np.stack([p.image for p in patches]), np.stack([p.gt_mask for p in patches]))


@dataclass(eq=False)
class TrainState:
    params: net.NetworkParams
    opt: RAdamState
    step: int = 0


def init_state(cfg: TrainConfig, channels: int = 3) -> TrainState:
    p = net.init_params(cfg.architecture(channels), cfg.seed)
    p = net.NetworkParams(p.arch, OrderedDict((k, _f32(v)) for k, v in p.tensors.items()))
    return TrainState(p, RAdamState())


def step_rng(seed: int, step: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(step), int(stream)])


def sample_batch(data: PatchSet, cfg: TrainConfig, step: int):
    idx = step_rng(cfg.seed, step, _BATCH_STREAM).choice(len(data), size=cfg.batch, replace=len(data) < cfg.batch)
    return data.images[idx], data.masks[idx]


def train_step(state: TrainState, batch, cfg: TrainConfig, prior: GaussianND) -> StepRecord:
    """Sample eps, forward, KL + construction loss, backward, RAdam update. Mutates ``state``."""
    x, gt = batch
    lr = lr_schedule(state.step, cfg)
    losses, grads = net.backward(state.params, x, gt, prior, step_rng(cfg.seed, state.step, _EPS_STREAM),
                                 beta=cfg.beta)
    new = optimizer_update(state.params.tensors, grads, lr, state.opt, round32=True)
    state.params = net.NetworkParams(state.params.arch, new)
    rec = StepRecord(state.step, lr, losses.total, losses.cons, losses.kl)
    state.step += 1
    return rec


@dataclass(eq=False)
class Prediction:
    probs: np.ndarray
    masks: np.ndarray
    posterior: bn.PosteriorParams


def predict(params: net.NetworkParams, images, prior: GaussianND, rng: np.random.Generator) -> Prediction:
    """One stochastic pass. Masks are the argmax over the two class logits."""
    res, _ = net.forward(params, images, prior, rng)
    return Prediction(net.foreground_prob(res.logits), res.logits[..., 1] > res.logits[..., 0], res.posterior)


def _chunks(n: int, size: int):
    if n <= size:
        return [slice(0, n)]
    out = [slice(i, i + size) for i in range(0, n - size + 1, size)]
    rest = n % size
    if rest >= 2:
        out.append(slice(n - rest, n))
    return out


def validate(state: TrainState, val: PatchSet, cfg: TrainConfig, prior: GaussianND) -> ValRecord:
    """Pooled-posterior Mahalanobis distance plus mean NLL, MSE, J and F over the set.

    The val set is cut into batches of ``cfg.batch``. The pooled posterior
    averages the per-batch mu' and Sigma'. The noise stream is the same at
    every call, so records are comparable across steps.
    """
    if len(val) == 0:
        raise InvalidParameterError("empty validation set")
    rng = step_rng(cfg.seed, 0, _VAL_STREAM)
    mus, sigmas, rows = [], [], []
    for sl in _chunks(len(val), cfg.batch):
        pred = predict(state.params, val.images[sl], prior, rng)
        mus.append(pred.posterior.mu_prime)
        sigmas.append(pred.posterior.sigma_prime)
        for prob, mask, gt in zip(pred.probs, pred.masks, val.masks[sl]):
            rows.append((metrics.nll(prob, gt), metrics.mse(prob, gt), metrics.jaccard(mask, gt),
                         metrics.boundary_f(mask, gt)))
    pooled = GaussianND(np.mean(mus, axis=0), np.mean(sigmas, axis=0))
    d = mgd.mahalanobis(prior, pooled)
    nll, mse, j, f = (float(v) for v in np.mean(rows, axis=0))
    return ValRecord(state.step, d, nll, mse, j, f)


def fit(cfg: TrainConfig, train_data: PatchSet, val_data: PatchSet | None, prior: GaussianND,
        state: TrainState | None = None, report: TrainReport | None = None, until: int | None = None,
        log=None) -> tuple[TrainState, TrainReport]:
    """Run (or resume) training up to ``until`` (default ``cfg.steps``) steps.

    Validation runs at step 0, every ``cfg.val_interval`` steps and at the end.
    """
    state = state or init_state(cfg, train_data.images.shape[-1])
    report = report or TrainReport()
    until = cfg.steps if until is None else until
    if val_data is not None and state.step == 0 and not report.vals:
        report.vals.append(validate(state, val_data, cfg, prior))
    while state.step < until:
        rec = train_step(state, sample_batch(train_data, cfg, state.step), cfg, prior)
        report.steps.append(rec)
        if log is not None and (state.step % 50 == 0 or state.step == until):
            log(f"step {rec.step:5d} lr {rec.lr:.2e} total {rec.l_total:.4f} cons {rec.l_cons:.4f} kl {rec.l_kl:.4f}")
        due = state.step % cfg.val_interval == 0 or state.step == cfg.steps
        if val_data is not None and due and (not report.vals or report.vals[-1].step != state.step):
            v = validate(state, val_data, cfg, prior)
            report.vals.append(v)
            if log is not None:
                log(f"  val step {v.step}: d_mah {v.d_mah:.4g} nll {v.nll:.4f} mse {v.mse:.4f} j {v.j:.3f} f {v.f:.3f}")
    return state, report


def save_state(path, state: TrainState, cfg: TrainConfig, prior: GaussianND | None = None) -> None:
    """Checkpoint with optimizer moments, the config and (optionally) the prior used."""
    extra = OrderedDict()
    for name in state.params.tensors:
        if name in state.opt.m:
            extra["m/" + name] = state.opt.m[name]
            extra["v/" + name] = state.opt.v[name]
    meta = {"optimizer_t": state.opt.t, "config": asdict(cfg)}
    if prior is not None:
        meta["prior"] = prior.to_dict()
    net.save_checkpoint(path, state.params, seed=cfg.seed, step=state.step, extra=extra, meta=meta)


def load_state(path) -> tuple[TrainState, TrainConfig]:
    state, cfg, _ = load_run(path)
    return state, cfg


def load_run(path) -> tuple[TrainState, TrainConfig, GaussianND | None]:
    """Like :func:`load_state`, also returning the stored prior if there is one."""
    params, header, extra = net.load_checkpoint(path)
    opt = RAdamState(int(header["meta"].get("optimizer_t", 0)))
    for key, val in extra.items():
        kind, name = key.split("/", 1)
        (opt.m if kind == "m" else opt.v)[name] = val
    meta = header["meta"]
    cfg = TrainConfig(**meta["config"]) if "config" in meta else TrainConfig(seed=header["seed"])
    prior = GaussianND.from_dict(meta["prior"]) if "prior" in meta else None
    return TrainState(params, opt, int(header["step"])), cfg, prior


@dataclass(eq=False)
class TiledResult:
    """B stochastic decodings of one tiled frame, and the pick closest to the annotation."""

    prediction: Prediction
    best: int
    best_j: float

    @property
    def mask(self) -> np.ndarray:
        return self.prediction.masks[self.best]

    @property
    def prob(self) -> np.ndarray:
        return self.prediction.probs[self.best]

    def distinct(self) -> int:
        return len({m.tobytes() for m in self.prediction.masks})

    def pairwise_j(self) -> float:
        return metrics.mean_pairwise_jaccard(self.prediction.masks)


def tiled_inference(params: net.NetworkParams, image, gt, prior: GaussianND, batch: int,
                    rng: np.random.Generator) -> TiledResult:
    """Repeat one patch ``batch`` times, decode once and keep the best-J mask.

    The posterior is estimated per batch, so a tiled batch gives one posterior
    for the frame and ``batch`` independent latent draws from it.
    """
    if batch < 2:
        raise InvalidParameterError("tiled inference needs batch >= 2")
    x = np.repeat(np.asarray(image, dtype=np.float64)[None], batch, axis=0)
    pred = predict(params, x, prior, rng)
    k, _, j = metrics.best_of_batch(pred.masks, gt)
    return TiledResult(pred, k, j)
