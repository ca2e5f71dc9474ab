"""Image-appearance denoising autoencoder (DAE) and shape VAE.

Both are small strided-conv encoders into a dense latent with a mirrored
transposed-conv decoder.  ROI edges must be divisible by 8.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import _container, nnet
from .errors import FormatError, NumericError, ValidationError
from .grid import NUM_LABELS, LabelMap, Volume
from .stats import mean_dsc

logger = logging.getLogger(__name__)

MAGIC = b"SQENC001"
VERSION = 1
DICE_EPS = 1e-6


@dataclass(frozen=True)
class EncoderConfig:
    latent_dim: int = 64
    channels: tuple[int, int, int] = (8, 16, 32)
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    noise_range: tuple[float, float] = (0.01, 0.1)
    kl_weight: float = 1.0
    val_fraction: float = 0.2

    @classmethod
    def from_json(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        for k in ("channels", "noise_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


DAE_DEFAULTS = EncoderConfig(epochs=15)
VAE_DEFAULTS = EncoderConfig(latent_dim=32, epochs=15, batch_size=4,
                             lr=3e-3, kl_weight=1.0)


def _arch(roi: Sequence[int], in_ch: int, cfg: EncoderConfig, variational: bool):
    roi = tuple(int(r) for r in roi)
    if any(r % 8 for r in roi):
        raise ValidationError(f"ROI {roi} must be divisible by 8")
    c1, c2, c3 = cfg.channels
    code = tuple(r // 8 for r in roi)
    flat = c3 * math.prod(code)
    d = cfg.latent_dim
    enc = [nnet.Conv3D(in_ch, c1, 2, 2, 0), nnet.ReLU(),
           nnet.Conv3D(c1, c2, 3, 2, 1), nnet.ReLU(),
           nnet.Conv3D(c2, c3, 3, 2, 1), nnet.ReLU(),
           nnet.Flatten()]
    if variational:
        enc += [nnet.Dense(flat, 2 * d), nnet.SampleGaussian(d, cfg.kl_weight)]
    else:
        enc += [nnet.Dense(flat, d)]
    dec = [nnet.Dense(d, flat), nnet.ReLU(), nnet.Reshape((c3,) + code),
           nnet.ConvTranspose3D(c3, c2, 4, 2, 1), nnet.ReLU(),
           nnet.ConvTranspose3D(c2, c1, 4, 2, 1), nnet.ReLU(),
           nnet.ConvTranspose3D(c1, in_ch, 2, 2, 0)]
    dec += [nnet.VoxelBias((in_ch,) + roi), nnet.Softmax() if variational else nnet.Sigmoid()]
    rng = np.random.SeedSequence(cfg.seed).spawn(2)
    seeds = [int(s.generate_state(1)[0]) for s in rng]
    return nnet.Network(enc, seed=seeds[0]), nnet.Network(dec, seed=seeds[1])


# --------------------------------------------------------------------------
# losses

def dae_loss(input_img: np.ndarray, output_img: np.ndarray) -> float:
    """Mean squared error over all voxels."""
    a = np.asarray(input_img, dtype=np.float64)
    b = np.asarray(output_img, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def _soft_dice(g: np.ndarray, p: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean soft Dice loss over channels and its gradient w.r.t. ``p``.

    Arrays are ``(B, L, ...)``; per sample the loss is
    ``mean_l 1 - (2 sum pg + eps) / (sum p^2 + sum g^2 + eps)``.
    """
    b, l = p.shape[:2]
    p2 = p.reshape(b, l, -1).astype(np.float64)
    g2 = g.reshape(b, l, -1).astype(np.float64)
    num = 2.0 * np.sum(p2 * g2, axis=2) + DICE_EPS
    den = np.sum(p2 * p2, axis=2) + np.sum(g2 * g2, axis=2) + DICE_EPS
    loss = float(np.mean(1.0 - num / den))
    grad = -(2.0 * g2 * den[..., None] - num[..., None] * 2.0 * p2) / (den[..., None] ** 2)
    grad /= b * l
    return loss, grad.reshape(p.shape)


def vae_loss(s_true: np.ndarray, s_prob: np.ndarray, mu: np.ndarray,
             log_sigma: np.ndarray) -> float:
    """Soft Dice over all label channels plus KL to the unit Gaussian.

    ``s_true`` / ``s_prob`` are ``(L, ...)`` or batched ``(B, L, ...)``;
    ``mu`` / ``log_sigma`` are ``(d,)`` or ``(B, d)``.  Batched inputs are
    averaged over the batch.
    """
    g = np.asarray(s_true, dtype=np.float64)
    p = np.asarray(s_prob, dtype=np.float64)
    if g.shape != p.shape:
        raise ValidationError(f"shape mismatch {g.shape} vs {p.shape}")
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    log_sigma = np.atleast_2d(np.asarray(log_sigma, dtype=np.float64))
    if mu.shape != log_sigma.shape:
        raise ValidationError("mu and log_sigma shapes differ")
    if g.ndim == 4:
        g, p = g[None], p[None]
    dice, _ = _soft_dice(g, p)
    kl = float(nnet.kl_divergence(mu, log_sigma).mean())
    return dice + kl


# --------------------------------------------------------------------------
# trained models

@dataclass
class _Trained:
    encoder: nnet.Network
    decoder: nnet.Network
    config: EncoderConfig
    roi: tuple[int, int, int]
    trace: list = field(default_factory=list)
    best_epoch: int = -1

    kind = "base"

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def to_arrays(self) -> tuple[dict, dict]:
        em, ea = nnet.network_arrays(self.encoder)
        dm, da = nnet.network_arrays(self.decoder)
        meta = {"kind": self.kind, "config": asdict(self.config), "roi": list(self.roi),
                "trace": self.trace, "best_epoch": self.best_epoch,
                "encoder": em, "decoder": dm}
        arrays = {**_container.nest("enc", ea), **_container.nest("dec", da)}
        return meta, arrays

    def save(self, path) -> Path:
        meta, arrays = self.to_arrays()
        return _container.save(path, MAGIC, VERSION, meta, arrays)


class TrainedDAE(_Trained):
    kind = "dae"


class TrainedVAE(_Trained):
    kind = "vae"


def model_from_arrays(meta: dict, arrays: dict) -> _Trained:
    cls = {"dae": TrainedDAE, "vae": TrainedVAE}.get(meta.get("kind"))
    if cls is None:
        raise FormatError(f"unknown encoder kind {meta.get('kind')!r}")
    enc = nnet.network_from_arrays(meta["encoder"], _container.unnest("enc", arrays))
    dec = nnet.network_from_arrays(meta["decoder"], _container.unnest("dec", arrays))
    return cls(enc, dec, EncoderConfig.from_json(meta["config"]), tuple(meta["roi"]),
               list(meta["trace"]), int(meta["best_epoch"]))


def load_model(path) -> _Trained:
    meta, arrays = _container.load(path, MAGIC, VERSION)
    return model_from_arrays(meta, arrays)


# --------------------------------------------------------------------------
# training

def _check_finite(loss: float, what: str, epoch: int) -> None:
    if not math.isfinite(loss):
        raise NumericError(f"{what} diverged at epoch {epoch} (loss={loss})")


def _split(n: int, cfg: EncoderConfig) -> tuple[np.ndarray, np.ndarray]:
    n_val = max(1, int(round(n * cfg.val_fraction))) if n > 1 else 0
    idx = np.arange(n)
    return idx[: n - n_val], idx[n - n_val:]


def _stack_volumes(volumes: Sequence[Volume]) -> np.ndarray:
    dims = {v.dims for v in volumes}
    if len(dims) != 1:
        raise ValidationError(f"volumes have mixed dims {sorted(dims)}")
    return np.stack([v.data for v in volumes])[:, None].astype(np.float32)


def _onehot_batch(labels: np.ndarray) -> np.ndarray:
    return np.moveaxis(np.eye(NUM_LABELS, dtype=np.float32)[labels], -1, 1)


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def _mean_predictor_mse(train: np.ndarray, val: np.ndarray) -> float:
    return float(np.mean((val - train.mean(axis=0, keepdims=True)) ** 2))


def train_dae(volumes: Sequence[Volume], config: EncoderConfig = DAE_DEFAULTS,
              val_volumes: Optional[Sequence[Volume]] = None) -> TrainedDAE:
    """Denoising autoencoder: Gaussian-corrupted input, clean target.

    Corruption sigma is drawn uniformly from ``config.noise_range`` per batch.
    The returned model is the epoch with the lowest validation MSE.
    """
    if len(volumes) < 10:
        raise ValidationError(f"train_dae needs >= 10 volumes, got {len(volumes)}")
    x_all = _stack_volumes(list(volumes) + list(val_volumes or []))
    if val_volumes:
        tr, va = np.arange(len(volumes)), np.arange(len(volumes), len(x_all))
    else:
        tr, va = _split(len(x_all), config)
    x_tr, x_va = x_all[tr], x_all[va]
    roi = x_all.shape[2:]
    enc, dec = _arch(roi, 1, config, variational=False)
    _init_image_prior(dec, x_tr)
    opt_e, opt_d = nnet.Adam(enc, config.lr), nnet.Adam(dec, config.lr)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 11]))
    best = (math.inf, None, None, -1)
    trace = []
    baseline = _mean_predictor_mse(x_tr, x_va) if len(x_va) else math.nan
    for epoch in range(config.epochs):
        losses = []
        for idx in _batches(len(x_tr), config.batch_size, rng):
            clean = x_tr[idx]
            sigma = rng.uniform(*config.noise_range)
            noisy = clean + rng.normal(0.0, sigma, clean.shape).astype(np.float32)
            out = dec.forward(enc.forward(noisy, True, rng), True, rng)
            loss, g = nnet.mse_loss(out, clean)
            _check_finite(loss, "DAE training", epoch)
            enc.backward(dec.backward(g))
            opt_e.step()
            opt_d.step()
            losses.append(loss * len(idx))
        train_loss = float(np.sum(losses) / len(x_tr))
        val_loss = _dae_mse(enc, dec, x_va) if len(x_va) else train_loss
        trace.append({"epoch": epoch, "train": train_loss, "val": val_loss})
        logger.info("dae epoch %d train %.5f val %.5f (mean-image %.5f)",
                    epoch, train_loss, val_loss, baseline)
        if val_loss < best[0]:
            best = (val_loss, enc.copy(), dec.copy(), epoch)
    return TrainedDAE(best[1], best[2], config, tuple(roi), trace, best[3])


def _dae_mse(enc, dec, x: np.ndarray, batch: int = 8) -> float:
    tot = 0.0
    for i in range(0, len(x), batch):
        xb = x[i:i + batch]
        out = dec.forward(enc.forward(xb))
        tot += float(np.sum((out.astype(np.float64) - xb) ** 2))
    return tot / x.size


def _init_image_prior(dec: nnet.Network, x: np.ndarray) -> None:
    # decoder starts at the mean training image (the mean-predictor baseline)
    m = np.clip(x.mean(axis=0), 1e-3, 1 - 1e-3)
    dec.layers[-2].params["b"] = np.log(m / (1 - m)).astype(np.float32)
    last = dec.layers[-3]
    last.params["w"] = (last.params["w"] * 0.5).astype(np.float32)


def _init_shape_prior(dec: nnet.Network, labels: np.ndarray) -> None:
    # start the decoder at the training-set label frequency map so early
    # epochs refine a plausible mean shape instead of discovering it
    freq = np.stack([(labels == l).mean(axis=0) for l in range(NUM_LABELS)])
    prior = np.log(freq + 1e-3)
    prior -= prior.mean(axis=0, keepdims=True)
    dec.layers[-2].params["b"] = prior.astype(np.float32)
    last = dec.layers[-3]
    last.params["w"] = (last.params["w"] * 0.5).astype(np.float32)


def train_vae(label_maps: Sequence[LabelMap], config: EncoderConfig = VAE_DEFAULTS,
              val_maps: Optional[Sequence[LabelMap]] = None) -> TrainedVAE:
    """Shape VAE on reference label maps (soft Dice + weighted KL).

    The returned model is the epoch with the best validation reconstruction
    DSC (mean over structures 1..9, using ``mu`` at inference).
    """
    if len(label_maps) < 10:
        raise ValidationError(f"train_vae needs >= 10 label maps, got {len(label_maps)}")
    maps = list(label_maps) + list(val_maps or [])
    dims = {m.dims for m in maps}
    if len(dims) != 1:
        raise ValidationError(f"label maps have mixed dims {sorted(dims)}")
    lab_all = np.stack([m.labels for m in maps])
    if val_maps:
        tr, va = np.arange(len(label_maps)), np.arange(len(label_maps), len(maps))
    else:
        tr, va = _split(len(maps), config)
    l_tr, l_va = lab_all[tr], lab_all[va]
    roi = lab_all.shape[1:]
    enc, dec = _arch(roi, NUM_LABELS, config, variational=True)
    _init_shape_prior(dec, l_tr)
    sampler = enc.layers[-1]
    opt_e, opt_d = nnet.Adam(enc, config.lr), nnet.Adam(dec, config.lr)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 23]))
    best = (-math.inf, None, None, -1)
    trace = []
    for epoch in range(config.epochs):
        dice_sum = kl_sum = 0.0
        for idx in _batches(len(l_tr), config.batch_size, rng):
            g = _onehot_batch(l_tr[idx])
            p = dec.forward(enc.forward(g, True, rng), True, rng)
            dice, grad = _soft_dice(g, p)
            _check_finite(dice + sampler.last_kl, "VAE training", epoch)
            enc.backward(dec.backward(grad.astype(np.float32)))
            opt_e.step()
            opt_d.step()
            dice_sum += dice * len(idx)
            kl_sum += sampler.last_kl * len(idx)
        model = TrainedVAE(enc, dec, config, tuple(roi))
        val_dsc = (float(np.mean([mean_dsc(_reconstruct_labels(model, l[None])[0], l)
                                  for l in l_va])) if len(l_va) else math.nan)
        rec = {"epoch": epoch, "dice": dice_sum / len(l_tr), "kl": kl_sum / len(l_tr),
               "val_dsc": val_dsc}
        trace.append(rec)
        logger.info("vae epoch %d dice %.4f kl %.3f val dsc %.4f", epoch, rec["dice"],
                    rec["kl"], val_dsc)
        score = val_dsc if len(l_va) else -rec["dice"]
        if score > best[0]:
            best = (score, enc.copy(), dec.copy(), epoch)
    return TrainedVAE(best[1], best[2], config, tuple(roi), trace, best[3])


# --------------------------------------------------------------------------
# inference

def _require(model, cls) -> None:
    if not isinstance(model, cls) or model.encoder is None:
        raise ValidationError(f"expected a trained {cls.kind.upper()}")


def _check_roi(model: _Trained, dims) -> None:
    if tuple(dims) != tuple(model.roi):
        raise ValidationError(f"input dims {tuple(dims)} != model ROI {model.roi}")


def encode(model: _Trained, item) -> np.ndarray:
    """Latent vector for a volume (DAE) or label map (VAE, returns mu)."""
    if isinstance(model, TrainedDAE):
        if not isinstance(item, Volume):
            raise ValidationError("DAE encodes Volumes")
        _check_roi(model, item.dims)
        x = item.data[None, None].astype(np.float32)
    elif isinstance(model, TrainedVAE):
        labels = item.labels if isinstance(item, LabelMap) else np.asarray(item)
        _check_roi(model, labels.shape)
        x = _onehot_batch(labels[None])
    else:
        raise ValidationError("encode needs a trained DAE or VAE")
    z = model.encoder.forward(x)[0].astype(np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite latent")
    return z


def encode_many(model: TrainedDAE, volumes: Sequence[Volume], batch: int = 8) -> np.ndarray:
    _require(model, TrainedDAE)
    x = _stack_volumes(volumes)
    _check_roi(model, x.shape[2:])
    out = [model.encoder.forward(x[i:i + batch]) for i in range(0, len(x), batch)]
    return np.concatenate(out).astype(np.float64)


def _reconstruct_labels(model: TrainedVAE, labels: np.ndarray, batch: int = 8) -> np.ndarray:
    outs = []
    for i in range(0, len(labels), batch):
        p = model.decoder.forward(model.encoder.forward(_onehot_batch(labels[i:i + batch])))
        outs.append(np.argmax(p, axis=1).astype(np.uint8))
    return np.concatenate(outs)


def reconstruct(model: _Trained, item):
    """VAE: label map -> argmax of decoded mu.  DAE: volume -> decoded volume."""
    if isinstance(model, TrainedVAE):
        if not isinstance(item, LabelMap):
            raise ValidationError("VAE reconstructs LabelMaps")
        _check_roi(model, item.dims)
        return item.with_labels(_reconstruct_labels(model, item.labels[None])[0])
    if isinstance(model, TrainedDAE):
        if not isinstance(item, Volume):
            raise ValidationError("DAE reconstructs Volumes")
        _check_roi(model, item.dims)
        out = model.decoder.forward(model.encoder.forward(item.data[None, None].astype(np.float32)))
        return item.with_data(out[0, 0].astype(np.float32))
    raise ValidationError("reconstruct needs a trained DAE or VAE")


def reconstruct_many(model: TrainedVAE, maps: Sequence[LabelMap]) -> list[LabelMap]:
    _require(model, TrainedVAE)
    if not maps:
        return []
    labels = np.stack([m.labels for m in maps])
    _check_roi(model, labels.shape[1:])
    return [m.with_labels(r) for m, r in zip(maps, _reconstruct_labels(model, labels))]
