"""Self-recursive height predictor.

Every BEV cell carries a 5-vector embedding ``(y_norm, h_norm, log_sigma_y,
log_sigma_h, logit)``. Layer ``l`` refines it with a residual perceptron that
also sees the BEV query gathered at the heights of layer ``l - 1``::

    E_l = E_{l-1} + mlp_l([E_{l-1}, Q_l])

Gradients are computed by hand; ``Q_l`` is treated as an input (it depends
on the previous heights only through the non-differentiated sampling step).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .bevgrid import GridSpec
from .errors import DataError, DivergenceDetected, NonFiniteGradient, NonFiniteLoss, ShapeMismatch

log = logging.getLogger(__name__)

__all__ = [
    "EMBED_DIM",
    "INIT_EMBEDDING",
    "PredictorParams",
    "Decoded",
    "LossReport",
    "Batch",
    "TrainConfig",
    "init_embeddings",
    "init_params",
    "forward",
    "forward_stack",
    "decode",
    "height_loss",
    "focal_loss",
    "loss_and_grad",
    "backward",
    "grad_check",
    "fit",
    "save_checkpoint",
    "load_checkpoint",
    "write_training_log",
    "read_training_log",
]

EMBED_DIM = 5
INIT_EMBEDDING = (0.5, 1.0, 0.0, 0.0, 0.0)
LOG_SIGMA_CLAMP = 10.0
SEG_WEIGHT = 0.5
SQRT2 = math.sqrt(2.0)


@dataclass
class PredictorParams:
    """Per-layer weights: ``W1 (5 + C, H)``, ``b1 (H,)``, ``W2 (H, 5)``, ``b2 (5,)``."""

    layers: list[dict]
    query_channels: int
    hidden: int
    seed: int = 0

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([p[k].ravel() for p in self.layers for k in ("W1", "b1", "W2", "b2")])

    def with_flat(self, vec: np.ndarray) -> "PredictorParams":
        vec = np.asarray(vec, dtype=float)
        layers = []
        pos = 0
        for p in self.layers:
            new = {}
            for k in ("W1", "b1", "W2", "b2"):
                n = p[k].size
                new[k] = vec[pos : pos + n].reshape(p[k].shape).copy()
                pos += n
            layers.append(new)
        if pos != vec.size:
            raise ShapeMismatch(f"expected {pos} parameters, got {vec.size}")
        return replace(self, layers=layers)

    def zeros_like(self) -> "PredictorParams":
        return self.with_flat(np.zeros(self.flat().size))


def init_params(query_channels: int = 32, hidden: int = 64, n_layers: int = 3, seed: int = 0) -> PredictorParams:
    """Random first layer, zero output layer, so the untrained stack is the identity."""
    rng = np.random.default_rng(seed)
    d_in = EMBED_DIM + query_channels
    layers = []
    for _ in range(n_layers):
        layers.append(
            {
                "W1": rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, hidden)),
                "b1": np.zeros(hidden),
                "W2": np.zeros((hidden, EMBED_DIM)),
                "b2": np.zeros(EMBED_DIM),
            }
        )
    return PredictorParams(layers, query_channels, hidden, seed)


def init_embeddings(g: GridSpec) -> np.ndarray:
    """Initial embeddings: centered in the height range, spanning all of it."""
    return np.broadcast_to(np.asarray(INIT_EMBEDDING), g.shape + (EMBED_DIM,)).copy()


# --- forward / decode ------------------------------------------------------------


def _layer_forward(p: dict, E: np.ndarray, Q: np.ndarray):
    x = np.concatenate([E, Q], axis=-1)
    a = np.tanh(x @ p["W1"] + p["b1"])
    return E + a @ p["W2"] + p["b2"], (x, a)


def _layer_backward(p: dict, cache, dE_out: np.ndarray):
    x, a = cache
    grads = {
        "W2": a.T @ dE_out,
        "b2": dE_out.sum(axis=0),
    }
    dz = (dE_out @ p["W2"].T) * (1.0 - a * a)
    grads["W1"] = x.T @ dz
    grads["b1"] = dz.sum(axis=0)
    dx = dz @ p["W1"].T
    return dE_out + dx[:, :EMBED_DIM], grads


def forward(E_prev: np.ndarray, Q: np.ndarray, params: PredictorParams, layer: int) -> np.ndarray:
    """One refinement step on embeddings ``(..., 5)`` with queries ``(..., C)``."""
    E_prev = np.asarray(E_prev, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if E_prev.shape[-1] != EMBED_DIM or Q.shape[-1] != params.query_channels or E_prev.shape[:-1] != Q.shape[:-1]:
        raise ShapeMismatch(f"embeddings {E_prev.shape} and queries {Q.shape} do not fit the predictor")
    lead = E_prev.shape[:-1]
    out, _ = _layer_forward(params.layers[layer], E_prev.reshape(-1, EMBED_DIM), Q.reshape(-1, Q.shape[-1]))
    return out.reshape(lead + (EMBED_DIM,))


def forward_stack(E0: np.ndarray, queries, params: PredictorParams, return_all: bool = False):
    """Run all layers.

    ``queries`` is either a sequence of per-layer query arrays or a callable
    ``queries(layer, E_prev) -> Q`` that gathers them on the fly.
    """
    E = np.asarray(E0, dtype=float)
    history = [E]
    for layer in range(params.n_layers):
        Q = queries(layer, E) if callable(queries) else queries[layer]
        E = forward(E, Q, params, layer)
        history.append(E)
    return history if return_all else E


@dataclass
class Decoded:
    y: np.ndarray
    h: np.ndarray
    sigma_y: np.ndarray
    sigma_h: np.ndarray
    seg_prob: np.ndarray
    logit: np.ndarray


def decode(E: np.ndarray, g: GridSpec, clamp: bool = True) -> Decoded:
    """Physical heights, uncertainties and segmentation probability.

    With ``clamp=False`` heights are the raw linear decode; the loss uses
    that form so that out-of-range predictions still receive gradients.
    """
    E = np.asarray(E, dtype=float)
    lo, _ = g.height_range
    span = g.y_span
    y_n, h_n = E[..., 0], E[..., 1]
    if clamp:
        y_n, h_n = np.clip(y_n, 0.0, 1.0), np.clip(h_n, 0.0, 1.0)
    return Decoded(
        y=lo + y_n * span,
        h=h_n * span,
        sigma_y=np.exp(np.clip(E[..., 2], -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)),
        sigma_h=np.exp(np.clip(E[..., 3], -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)),
        seg_prob=expit(E[..., 4]),
        logit=E[..., 4].copy(),
    )


# --- losses ------------------------------------------------------------------------


@dataclass
class LossReport:
    total: float
    height_term: float
    y_term: float
    seg_term: float
    residual_y: Optional[np.ndarray] = None
    residual_h: Optional[np.ndarray] = None


def _laplace_terms(pred, target, sigma, indicator):
    """Per-cell Laplacian NLL for covered cells, ``1/sigma`` elsewhere."""
    r = pred - target
    occ = indicator.astype(bool)
    return np.where(occ, SQRT2 * np.abs(r) / sigma + np.log(sigma), 1.0 / sigma), r


def height_loss(pred: Decoded, gt, weights=None, seg_weight: float = SEG_WEIGHT) -> LossReport:
    """Joint height/uncertainty loss plus the focal segmentation term.

    ``gt`` exposes ``y``, ``h`` and ``indicator`` arrays shaped like ``pred``.
    """
    w = np.ones_like(pred.y) if weights is None else np.asarray(weights, dtype=float)
    ind = np.asarray(gt.indicator)
    th, rh = _laplace_terms(pred.h, np.asarray(gt.h), pred.sigma_h, ind)
    ty, ry = _laplace_terms(pred.y, np.asarray(gt.y), pred.sigma_y, ind)
    h_term = float(np.mean(w * th))
    y_term = float(np.mean(w * ty))
    s_term = focal_loss(pred.logit, ind, weights=w)
    total = h_term + y_term + seg_weight * s_term
    if not np.isfinite(total):
        raise NonFiniteLoss(f"loss is {total}")
    return LossReport(total, h_term, y_term, s_term, ry, rh)


def _focal_parts(logits, labels, gamma, alpha):
    x = np.asarray(logits, dtype=float)
    pos = np.asarray(labels).astype(bool)
    # p_t is the probability of the true class; log p_t via softplus for stability
    z = np.where(pos, x, -x)
    log_pt = -np.logaddexp(0.0, -z)
    pt = np.exp(log_pt)
    one_minus = expit(-z)
    a_t = np.where(pos, alpha, 1.0 - alpha)
    loss = -a_t * one_minus**gamma * log_pt
    # d loss / d z, then chain through z = +-x
    dz = a_t * (gamma * pt * one_minus**gamma * log_pt - one_minus ** (gamma + 1.0))
    return loss, np.where(pos, dz, -dz)


def focal_loss(logits, labels, gamma: float = 2.0, alpha: float = 0.25, weights=None) -> float:
    """Mean binary focal loss over cells."""
    loss, _ = _focal_parts(logits, labels, gamma, alpha)
    if weights is not None:
        loss = loss * weights
    return float(np.mean(loss))


def loss_and_grad(E: np.ndarray, gt, g: GridSpec, weights=None, seg_weight: float = SEG_WEIGHT):
    """Loss report and its gradient w.r.t. the final embeddings ``E (N, 5)``."""
    E = np.asarray(E, dtype=float)
    n = E.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    pred = decode(E, g, clamp=False)
    report = height_loss(pred, gt, w, seg_weight)
    occ = np.asarray(gt.indicator).astype(bool)
    span = g.y_span
    dE = np.zeros_like(E)
    for col, ls_col, value, target in ((0, 2, pred.y, gt.y), (1, 3, pred.h, gt.h)):
        ls = E[:, ls_col]
        inv_sigma = np.exp(-np.clip(ls, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP))
        r = value - np.asarray(target)
        d_val = np.where(occ, SQRT2 * np.sign(r) * inv_sigma, 0.0)
        d_ls = np.where(occ, 1.0 - SQRT2 * np.abs(r) * inv_sigma, -inv_sigma)
        dE[:, col] = w / n * d_val * span
        dE[:, ls_col] = w / n * d_ls * (np.abs(ls) <= LOG_SIGMA_CLAMP)
    _, d_logit = _focal_parts(E[:, 4], occ, 2.0, 0.25)
    dE[:, 4] = seg_weight * w / n * d_logit
    return report, dE


# --- batches, backprop, gradient check ------------------------------------------


@dataclass
class Batch:
    """Frozen inputs for one loss evaluation over ``N`` cells."""

    E0: np.ndarray  # (N, 5)
    queries: list  # per layer, (N, C)
    y: np.ndarray
    h: np.ndarray
    indicator: np.ndarray
    weights: np.ndarray
    grid: GridSpec = field(default_factory=GridSpec)


def _batch_loss(params: PredictorParams, batch: Batch, supervise_all: bool = False):
    caches = []
    E = batch.E0
    outs = []
    for layer, p in enumerate(params.layers):
        E, cache = _layer_forward(p, E, batch.queries[layer])
        caches.append(cache)
        outs.append(E)
    supervised = range(len(outs)) if supervise_all else [len(outs) - 1]
    total = 0.0
    dEs = {}
    report = None
    for k in supervised:
        report_k, dE = loss_and_grad(outs[k], batch, batch.grid, batch.weights)
        total += report_k.total
        dEs[k] = dE
        report = report_k
    return total, report, caches, dEs


def backward(params: PredictorParams, batch: Batch, supervise_all: bool = False):
    """Total loss, its report (last layer) and gradients shaped like ``params``."""
    total, report, caches, dEs = _batch_loss(params, batch, supervise_all)
    grads = []
    dE = np.zeros_like(batch.E0)
    for layer in reversed(range(params.n_layers)):
        if layer in dEs:
            dE = dE + dEs[layer]
        dE, g = _layer_backward(params.layers[layer], caches[layer], dE)
        grads.append(g)
    grads.reverse()
    out = replace(params, layers=grads)
    if not np.all(np.isfinite(out.flat())):
        raise NonFiniteGradient("gradient has non-finite entries")
    return total, report, out


def grad_check(params: PredictorParams, batch: Batch, step: float = 1e-5, supervise_all: bool = False) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    _, _, grads = backward(params, batch, supervise_all)
    analytic = grads.flat()
    work = params.with_flat(params.flat())  # private copy, perturbed in place
    last = work.n_layers - 1
    prefix = [batch.E0]
    for layer in range(work.n_layers):
        prefix.append(_layer_forward(work.layers[layer], prefix[-1], batch.queries[layer])[0])

    def loss_from(layer: int) -> float:
        # layers before ``layer`` are unaffected by the perturbation
        E = prefix[layer]
        total = 0.0
        for k in range(layer, work.n_layers):
            E = _layer_forward(work.layers[k], E, batch.queries[k])[0]
            if supervise_all or k == last:
                total += height_loss(decode(E, batch.grid, clamp=False), batch, batch.weights).total
        if supervise_all:
            for k in range(layer):
                total += height_loss(decode(prefix[k + 1], batch.grid, clamp=False), batch, batch.weights).total
        return total

    numeric = []
    for layer, p in enumerate(work.layers):
        for key in ("W1", "b1", "W2", "b2"):
            arr = p[key].reshape(-1)
            for k in range(arr.size):
                old = arr[k]
                arr[k] = old + step
                fp = loss_from(layer)
                arr[k] = old - step
                fm = loss_from(layer)
                arr[k] = old
                numeric.append((fp - fm) / (2 * step))
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# --- training ------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Training knobs.

    ``optimizer="adam"`` uses ``momentum`` as its first-moment decay;
    ``"momentum"`` is plain gradient descent with heavy-ball momentum.
    ``batch_scenes=0`` makes one deterministic update per epoch over all
    scenes; a positive value updates after every group of that many scenes.
    """

    epochs: int = 60
    lr: float = 0.003
    momentum: float = 0.9
    seed: int = 0
    hidden: int = 64
    n_layers: int = 3
    n_anchors: int = 4
    supervise_all: bool = False
    batch_scenes: int = 0
    ring_cells: int = 3
    background_cells: int = 512
    grad_clip: float = 0.0  # 0 disables norm clipping
    cosine_decay: bool = True  # anneal lr to zero over the epoch budget
    optimizer: str = "adam"
    beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class EpochLog:
    epoch: int
    total_loss: float
    height_term: float
    y_term: float
    seg_term: float
    y_mae_occupied_m: float


LOG_FIELDS = ["epoch", "total_loss", "height_term", "y_term", "seg_term", "y_mae_occupied_m"]


def fit(
    scenes: Sequence,
    config: TrainConfig = TrainConfig(),
    params: Optional[PredictorParams] = None,
    callback: Optional[Callable[[EpochLog], None]] = None,
):
    """Train the predictor on prepared scenes.

    Each scene must provide ``cell_batch(rng, config) -> (ci, cj, weights)``,
    ``targets(ci, cj)`` and ``gather(y, h, ci, cj, n_anchors)``; see
    :class:`heightbev.pipeline.SceneData`. Gradients are accumulated over
    scenes in index order, so results do not depend on scheduling. Returns
    the trained parameters and one :class:`EpochLog` per epoch.
    """
    if not scenes:
        raise ValueError("need at least one scene")
    channels = scenes[0].channels
    if params is None:
        params = init_params(channels, config.hidden, config.n_layers, config.seed)
    grid = scenes[0].grid
    cells = [s.cell_batch(np.random.default_rng([config.seed, k]), config) for k, s in enumerate(scenes)]
    if config.optimizer not in ("adam", "momentum"):
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    velocity = np.zeros(params.flat().size)
    second = np.zeros_like(velocity)
    step = 0
    theta = params.flat()
    history: list[EpochLog] = []
    per_update = config.batch_scenes or len(scenes)
    for epoch in range(config.epochs):
        sums = np.zeros(5)
        abs_err, n_occ = 0.0, 0
        for start in range(0, len(scenes), per_update):
            group = range(start, min(start + per_update, len(scenes)))
            grad = np.zeros_like(theta)
            current = params.with_flat(theta)
            for k in group:
                scene = scenes[k]
                ci, cj, w = cells[k]
                batch, E_last = _scene_batch(scene, current, ci, cj, w, config.n_anchors, grid)
                try:
                    total, report, g = backward(current, batch, config.supervise_all)
                except (NonFiniteLoss, NonFiniteGradient) as exc:
                    raise DivergenceDetected(f"training diverged in epoch {epoch}: {exc}") from exc
                grad += g.flat() / len(group)
                sums += (total, report.height_term, report.y_term, report.seg_term, 1)
                occ = batch.indicator.astype(bool)
                abs_err += float(np.abs(decode(E_last, grid).y[occ] - batch.y[occ]).sum())
                n_occ += int(occ.sum())
            if not np.isfinite(sums[0]):
                raise DivergenceDetected(f"loss became non-finite in epoch {epoch}")
            norm = np.linalg.norm(grad)
            if config.grad_clip and norm > config.grad_clip:
                grad *= config.grad_clip / norm
            lr = config.lr
            if config.cosine_decay:
                lr *= 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))
            if config.optimizer == "momentum":
                velocity = config.momentum * velocity - lr * grad
                theta = theta + velocity
            else:
                # Adam: per-parameter step sizes, the momentum term is the first moment
                step += 1
                velocity = config.momentum * velocity + (1 - config.momentum) * grad
                second = config.beta2 * second + (1 - config.beta2) * grad * grad
                m_hat = velocity / (1 - config.momentum**step)
                v_hat = second / (1 - config.beta2**step)
                theta = theta - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        entry = EpochLog(
            epoch,
            sums[0] / sums[4],
            sums[1] / sums[4],
            sums[2] / sums[4],
            sums[3] / sums[4],
            abs_err / max(n_occ, 1),
        )
        history.append(entry)
        log.debug("epoch %d loss %.5f y-mae %.3f", epoch, entry.total_loss, entry.y_mae_occupied_m)
        if callback:
            callback(entry)
    return params.with_flat(theta), history


def _scene_batch(scene, params: PredictorParams, ci, cj, weights, n_anchors: int, grid: GridSpec):
    """Run the recursion on a cell subset, collecting the queries each layer saw."""
    E = np.broadcast_to(np.asarray(INIT_EMBEDDING), (ci.size, EMBED_DIM)).copy()
    E0 = E
    queries = []
    for layer in range(params.n_layers):
        d = decode(E, grid)
        Q = scene.gather(d.y, d.h, ci, cj, n_anchors)
        queries.append(Q)
        E = forward(E, Q, params, layer)
    y, h, ind = scene.targets(ci, cj)
    return Batch(E0, queries, y, h, ind, weights, grid), E


# --- persistence ---------------------------------------------------------------------


def save_checkpoint(params: PredictorParams, path, epoch: int = 0) -> None:
    header = {
        "layer_sizes": [EMBED_DIM + params.query_channels, params.hidden, EMBED_DIM],
        "n_layers": params.n_layers,
        "seed": params.seed,
        "epoch": epoch,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        f.write(params.flat().astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[PredictorParams, dict]:
    try:
        with open(path, "rb") as f:
            header = json.loads(f.readline().decode("utf-8"))
            data = np.frombuffer(f.read(), dtype="<f8")
        d_in, hidden, _ = header["layer_sizes"]
        template = init_params(d_in - EMBED_DIM, hidden, header["n_layers"], header.get("seed", 0))
        return template.with_flat(data), header
    except (OSError, ValueError, KeyError, ShapeMismatch) as exc:
        raise DataError(f"bad checkpoint {path}: {exc}") from exc


def write_training_log(history: Sequence[EpochLog], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_FIELDS)
        for e in history:
            w.writerow([e.epoch] + [repr(float(getattr(e, k))) for k in LOG_FIELDS[1:]])


def read_training_log(path) -> list[EpochLog]:
    with open(path, newline="") as f:
        return [
            EpochLog(int(r["epoch"]), *(float(r[k]) for k in LOG_FIELDS[1:]))
            for r in csv.DictReader(f)
        ]
