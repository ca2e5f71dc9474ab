"""Direct baseline: regress DSC from (image, segmentation) with a small CNN.

Both inputs are average-pooled to 12^3 (the segmentation as per-label
fractions), passed through separate 3-layer conv branches, concatenated and
reduced by two conv and two dense layers to 100 DSC bins (step 0.01).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .. import _container, nnet
from ..errors import NumericError, ValidationError
from ..grid import NUM_LABELS, LabelMap, Volume
from .base import FittedRegressor

logger = logging.getLogger(__name__)

N_BINS = 100
POOLED = 12


@dataclass(frozen=True)
class DirectNetConfig:
    epochs: int = 15
    batch_size: int = 16
    lr: float = 1e-3
    width: int = 4
    seed: int = 0


def _pool(a: np.ndarray, f: int) -> np.ndarray:
    *lead, x, y, z = a.shape
    return a.reshape(*lead, x // f, f, y // f, f, z // f, f).mean(axis=(-5, -3, -1))


def prepare_inputs(volumes: Sequence[Volume], segs: Sequence[LabelMap]) -> tuple[np.ndarray, np.ndarray]:
    if len(volumes) != len(segs):
        raise ValidationError("volumes and segmentations differ in length")
    if not volumes:
        raise ValidationError("no inputs")
    dims = volumes[0].dims
    if any(v.dims != dims for v in volumes) or any(s.dims != dims for s in segs):
        raise ValidationError("all inputs must share dims")
    if any(d % POOLED for d in dims):
        raise ValidationError(f"dims {dims} must be multiples of {POOLED}")
    f = dims[0] // POOLED
    if any(d // POOLED != f for d in dims):
        raise ValidationError("direct net expects a cubic ROI")
    img = _pool(np.stack([v.data for v in volumes]).astype(np.float32), f)[:, None]
    eye = np.eye(NUM_LABELS, dtype=np.float32)
    seg = np.stack([_pool(np.moveaxis(eye[s.labels], -1, 0), f) for s in segs])
    return img.astype(np.float32), seg.astype(np.float32)


def _branch(in_ch: int, w: int) -> list:
    return [nnet.Conv3D(in_ch, w, 3, 1, 1), nnet.ReLU(),
            nnet.Conv3D(w, w, 3, 2, 1), nnet.ReLU(),
            nnet.Conv3D(w, 2 * w, 3, 1, 1), nnet.ReLU()]


def _build(cfg: DirectNetConfig):
    w = cfg.width
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(cfg.seed).spawn(3)]
    img = nnet.Network(_branch(1, w), seed=seeds[0])
    seg = nnet.Network(_branch(NUM_LABELS, w), seed=seeds[1])
    code = POOLED // 4
    trunk = nnet.Network([nnet.Conv3D(4 * w, 2 * w, 3, 1, 1), nnet.ReLU(),
                          nnet.Conv3D(2 * w, 2 * w, 3, 2, 1), nnet.ReLU(),
                          nnet.Flatten(), nnet.Dense(2 * w * code ** 3, 64), nnet.ReLU(),
                          nnet.Dense(64, N_BINS)], seed=seeds[2])
    return img, seg, trunk


class DirectNet:
    def __init__(self, img: nnet.Network, seg: nnet.Network, trunk: nnet.Network):
        self.img, self.seg, self.trunk = img, seg, trunk
        self._split = None

    def forward(self, xi: np.ndarray, xs: np.ndarray, train: bool = False) -> np.ndarray:
        a = self.img.forward(xi, train)
        b = self.seg.forward(xs, train)
        self._split = a.shape[1]
        return self.trunk.forward(np.concatenate([a, b], axis=1), train)

    def backward(self, g: np.ndarray) -> None:
        gc = self.trunk.backward(g)
        self.img.backward(gc[:, :self._split])
        self.seg.backward(gc[:, self._split:])

    def networks(self) -> tuple[nnet.Network, ...]:
        return self.img, self.seg, self.trunk


def to_bins(y: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(y, dtype=np.float64) * N_BINS), 0, N_BINS - 1).astype(np.int64)


def fit_direct_net(volumes: Sequence[Volume], segs: Sequence[LabelMap], y,
                   config: DirectNetConfig = DirectNetConfig(),
                   min_pairs: int = 20) -> FittedRegressor:
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(volumes) < min_pairs:
        raise ValidationError(f"direct net needs >= {min_pairs} training pairs, got {len(volumes)}")
    if y.size != len(volumes):
        raise ValidationError("one target per pair required")
    xi, xs = prepare_inputs(volumes, segs)
    target = to_bins(y)
    net = DirectNet(*_build(config))
    opts = [nnet.Adam(n, config.lr) for n in net.networks()]
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 31]))
    trace = []
    n = len(y)
    for epoch in range(config.epochs):
        total = 0.0
        order = rng.permutation(n)
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            logits = net.forward(xi[idx], xs[idx], train=True)
            loss, g = nnet.softmax_cross_entropy(logits, target[idx])
            if not math.isfinite(loss):
                raise NumericError(f"direct net diverged at epoch {epoch}")
            net.backward(g)
            for o in opts:
                o.step()
            total += loss * len(idx)
        trace.append(total / n)
    params = {}
    metas = {}
    for name, sub in zip(("img", "seg", "trunk"), net.networks()):
        meta, arrays = nnet.network_arrays(sub)
        metas[name] = meta
        params.update(_container.nest(name, arrays))
    cfg = {"config": asdict(config), "networks": metas, "train_loss": trace}
    return FittedRegressor("direct_net", params, cfg, config.seed)


def load_direct_net(model: FittedRegressor) -> DirectNet:
    nets = [nnet.network_from_arrays(model.config["networks"][k], _container.unnest(k, model.params))
            for k in ("img", "seg", "trunk")]
    return DirectNet(*nets)


def predict_direct_net(model: FittedRegressor, volumes: Sequence[Volume],
                       segs: Sequence[LabelMap]) -> np.ndarray:
    """Bin index / 100 of the arg-max class (ties resolve to the lower bin)."""
    if model.method != "direct_net":
        raise ValidationError(f"not a direct_net model: {model.method}")
    net = load_direct_net(model)
    xi, xs = prepare_inputs(volumes, segs)
    out = []
    for i in range(0, len(xi), 16):
        logits = net.forward(xi[i:i + 16], xs[i:i + 16])
        out.append(np.argmax(logits, axis=1) / N_BINS)
    return np.concatenate(out)
