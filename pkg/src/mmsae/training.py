"""Losses, analytic gradients and the Adam training loop for SAE/GSAE/MGSAE.

Per pair the objective is::

    L = |x - x_hat|^2 + |y - y_hat|^2 + lam * sum_i sqrt(z_i^2 + w_i^2)

and batch losses are means over pairs. Gradients pass only through
coordinates that survive TopK with a positive value (straight-through on the
active set); the L2,1 term uses the minimum-norm subgradient 0 where both
codes vanish.
"""

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .embedding_store import BatchIterator
from .errors import ArgumentError, ConfigError, NumericError, ShapeError, TrainingDiverged
from .rng import Xoshiro256, derive_seed
from .sae_model import SaeParams, draw_masks, encode_dense, init_params, save_checkpoint

VARIANTS = ("SAE", "GSAE", "MGSAE")
F32_MAX = float(np.finfo(np.float32).max)


def default_p_mask(modalities):
    """0.1 for audio/text pairs, 0.2 otherwise (image/text)."""
    return 0.1 if "audio" in {m.lower() for m in modalities} else 0.2


@dataclass
class TrainConfig:
    variant: str = "MGSAE"
    k: int = 32
    expansion: int = 16
    lambda_gs: float = 0.05
    p_mask: float | None = None  # None: picked from the dataset modalities
    lr: float = 1e-4
    steps: int = 25_000
    batch_size: int = 128
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    renorm_decoder: bool = True
    tie_pre_bias: bool = False  # one pre-coding bias for both sides
    log_every: int = 100
    checkpoint_every: int = 0
    n_bias_rows: int = 4096

    def __post_init__(self):
        self.variant = str(self.variant).upper()
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "SAE":
            # the standard SAE baseline: one pre-coding bias, reconstruction only
            self.lambda_gs = 0.0
            self.p_mask = 0.0
            self.tie_pre_bias = True
        elif self.variant == "GSAE":
            self.p_mask = 0.0
        if self.lambda_gs < 0:
            raise ConfigError(f"lambda_gs must be >= 0, got {self.lambda_gs}")
        if self.p_mask is not None and not 0.0 <= self.p_mask <= 1.0:
            raise ConfigError(f"p_mask must lie in [0, 1], got {self.p_mask}")
        if self.k < 1 or self.expansion < 1 or self.batch_size < 1 or self.steps < 0:
            raise ConfigError("k, expansion and batch_size must be >= 1 and steps >= 0")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")

    def resolved(self, modalities):
        if self.p_mask is not None:
            return self
        return replace(self, p_mask=default_p_mask(modalities))

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class LossReport:
    """Batch-mean loss terms; ``fve_*`` is NaN when the batch has no variance."""

    recon_a: float
    recon_b: float
    gs: float
    total: float
    fve_a: float
    fve_b: float

    def to_dict(self):
        return asdict(self)


def group_sparse_loss(z, w):
    """L2,1 norm of the stacked pair ``[z; w]``, i.e. ``sum_i sqrt(z_i^2 + w_i^2)``.

    Works row-wise on 2-D inputs.
    """
    z = np.asarray(z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if z.shape != w.shape:
        raise ShapeError(f"code shapes differ: {z.shape} vs {w.shape}")
    return np.sqrt(z * z + w * w).sum(axis=-1)


def _fve(x, x_hat):
    err = ((x - x_hat) ** 2).sum()
    var = ((x - x.mean(axis=0)) ** 2).sum()
    return 1.0 - err / var if var > 0 else float("nan")


def fraction_explained_variance(x, x_hat):
    return float(_fve(np.atleast_2d(x), np.atleast_2d(x_hat)))


def _as_kept(mask, n):
    if mask is None:
        return None
    kept = getattr(mask, "kept", mask)
    kept = np.asarray(kept, dtype=bool)
    return np.broadcast_to(kept, (n, kept.shape[-1]))


def loss_and_grad(params, x, y, k, mask=None, lam=0.0, need_grad=True):
    """Batch loss report and (optionally) gradients as a :class:`SaeParams`.

    ``x`` and ``y`` are (n, d) arrays of paired rows or single vectors; ``mask``
    is an (n, p) / (p,) boolean ``kept`` array or a :class:`Mask`, shared by
    the two sides of each pair.
    """
    # overflow is reported through NumericError / the non-finite loss instead
    with np.errstate(over="ignore", invalid="ignore"):
        return _loss_and_grad(params, x, y, k, mask, lam, need_grad)


def _loss_and_grad(params, x, y, k, mask, lam, need_grad):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape:
        raise ShapeError(f"paired batches differ in shape: {x.shape} vs {y.shape}")
    n = x.shape[0]
    kept = _as_kept(mask, n)
    za = encode_dense(params, x, "a", k, kept)
    zb = encode_dense(params, y, "b", k, kept)
    xa = za @ params.w_dec.T + params.b_pre_a
    yb = zb @ params.w_dec.T + params.b_pre_b
    ea, eb = xa - x, yb - y
    recon_a = float((ea * ea).sum() / n)
    recon_b = float((eb * eb).sum() / n)
    gs = float(group_sparse_loss(za, zb).sum() / n)
    total = recon_a + recon_b + lam * gs if lam else recon_a + recon_b
    report = LossReport(recon_a, recon_b, gs, total, float(_fve(x, xa)), float(_fve(y, yb)))
    if not need_grad:
        return report, None

    ga, gb = (2.0 / n) * ea, (2.0 / n) * eb
    g_dec = ga.T @ za + gb.T @ zb
    dza = ga @ params.w_dec
    dzb = gb @ params.w_dec
    if lam:
        norm = np.sqrt(za * za + zb * zb)
        safe = np.where(norm > 0, norm, 1.0)
        dza += (lam / n) * np.where(norm > 0, za / safe, 0.0)
        dzb += (lam / n) * np.where(norm > 0, zb / safe, 0.0)
    dua = np.where(za > 0, dza, 0.0)
    dub = np.where(zb > 0, dzb, 0.0)
    xc = x - params.b_pre_a
    yc = y - params.b_pre_b
    grads = SaeParams(
        w_enc=dua.T @ xc + dub.T @ yc,
        w_dec=g_dec,
        b_enc=dua.sum(axis=0) + dub.sum(axis=0),
        b_pre_a=ga.sum(axis=0) - dua.sum(axis=0) @ params.w_enc,
        b_pre_b=gb.sum(axis=0) - dub.sum(axis=0) @ params.w_enc,
    )
    for name, g in grads.as_dict().items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}", name=name)
    return report, grads


def total_loss(params, x, y, k, mask=None, lam=0.0):
    return loss_and_grad(params, x, y, k, mask, lam, need_grad=False)[0]


def backward(params, x, y, k, mask=None, lam=0.0):
    return loss_and_grad(params, x, y, k, mask, lam)[1]


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, t=None,
              renorm_decoder=True):
    """One bias-corrected Adam update, in place; returns ``(params, state)``.

    Moments live in ``state`` keyed by parameter name. With ``renorm_decoder``
    the dictionary columns are rescaled to unit norm afterwards.
    """
    t = state.t + 1 if t is None else int(t)
    if t < 1:
        raise ArgumentError(f"step index must be >= 1, got {t}")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new = {}
    for name, value in params.as_dict().items():
        g = getattr(grads, name) if not isinstance(grads, dict) else grads[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if not np.isfinite(update).all():
            raise NumericError(f"non-finite Adam update for {name}", name=name)
        state.m[name], state.v[name] = m, v
        new[name] = value - update
    for name, value in new.items():
        setattr(params, name, value)
    if renorm_decoder:
        params.normalize_decoder()
    state.t = t
    return params, state


def _toml_inline(record):
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        if isinstance(v, (float, np.floating)):
            v = float(v)
            if math.isnan(v):
                return "nan"
            if math.isinf(v):
                return "inf" if v > 0 else "-inf"
            return repr(v)
        if v is None:
            return '""'
        return json.dumps(str(v))

    return "{ " + ", ".join(f"{k} = {fmt(v)}" for k, v in record.items()) + " }"


@dataclass
class TrainResult:
    params: SaeParams
    config: TrainConfig
    loss_trace: np.ndarray
    records: list


def train(ds, cfg, log_path=None, checkpoint_path=None, init=None):
    """Train one model on a :class:`PairedDataset`; fully deterministic in ``cfg.seed``.

    ``log_path`` receives a config header line and one inline-TOML record every
    ``cfg.log_every`` steps. With ``checkpoint_path`` and
    ``cfg.checkpoint_every > 0`` an MSC1 checkpoint is rewritten periodically.
    Raises :class:`TrainingDiverged` (carrying the last finite parameters) if
    the loss stops being finite.
    """
    cfg = cfg.resolved(ds.modalities)
    d = ds.d
    p = d * cfg.expansion
    if cfg.k > p:
        raise ConfigError(f"k={cfg.k} exceeds dictionary size p={p}")
    xa, xb = ds.side_a.data, ds.side_b.data
    if init is None:
        params = init_params(d, p, Xoshiro256(derive_seed(cfg.seed, "init")),
                             xa, xb, n_bias_rows=cfg.n_bias_rows)
    else:
        params = init.copy()
    if cfg.tie_pre_bias:
        pooled = 0.5 * (params.b_pre_a + params.b_pre_b)
        params.b_pre_a, params.b_pre_b = pooled, pooled.copy()
    batches = iter(BatchIterator(ds, cfg.batch_size, seed=derive_seed(cfg.seed, "batches")))
    mask_rng = Xoshiro256(derive_seed(cfg.seed, "mask"))
    state = AdamState()
    trace = np.empty(cfg.steps)
    records = []
    log = None
    if log_path is not None:
        log = open(log_path, "a", encoding="utf-8")
        log.write("config = " + _toml_inline(cfg.to_dict()) + "\n")
    t0 = time.perf_counter()
    try:
        for step in range(1, cfg.steps + 1):
            idx = next(batches)
            kept = draw_masks(idx.size, p, cfg.p_mask, mask_rng) if cfg.p_mask > 0 else None
            try:
                report, grads = loss_and_grad(params, xa[idx], xb[idx], cfg.k, kept, cfg.lambda_gs)
            except NumericError as err:
                raise TrainingDiverged(str(err), last_good=params.copy(), step=step) from None
            if cfg.tie_pre_bias:
                tied = grads.b_pre_a + grads.b_pre_b
                grads.b_pre_a, grads.b_pre_b = tied, tied.copy()
            if not math.isfinite(report.total):
                raise TrainingDiverged(f"loss became non-finite at step {step}",
                                       last_good=params.copy(), step=step)
            trace[step - 1] = report.total
            last_good = params.copy()
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    adam_step(params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps,
                              renorm_decoder=cfg.renorm_decoder)
            except NumericError as err:
                raise TrainingDiverged(str(err), last_good=last_good, step=step) from None
            if not _storable(params):
                raise TrainingDiverged(f"parameters left float32 range at step {step}",
                                       last_good=last_good, step=step)
            if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps):
                rec = {"step": step, **report.to_dict(),
                       "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
                records.append(rec)
                if log is not None:
                    log.write(_toml_inline(rec) + "\n")
                    log.flush()
            if checkpoint_path is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, params, cfg.k, checkpoint_meta(cfg, step, ds.modalities))
    finally:
        if log is not None:
            log.close()
    return TrainResult(params, cfg, trace, records)


def _storable(params):
    # checkpoints are float32, so anything beyond its range counts as divergence
    return all(np.isfinite(v).all() and np.abs(v).max(initial=0.0) < F32_MAX
               for v in params.as_dict().values())


def checkpoint_meta(cfg, steps=None, modalities=None):
    meta = {"variant": cfg.variant, "lambda_gs": float(cfg.lambda_gs),
            "p_mask": float(cfg.p_mask or 0.0), "seed": int(cfg.seed),
            "steps": int(cfg.steps if steps is None else steps), "lr": float(cfg.lr),
            "expansion": int(cfg.expansion)}
    if modalities is not None:
        meta["modalities"] = [str(m) for m in modalities]
    return meta


def evaluate_loss(params, ds, k, lam=0.0):
    """Loss report over a whole dataset (no masking)."""
    return total_loss(params, ds.side_a.data, ds.side_b.data, k, None, lam)

