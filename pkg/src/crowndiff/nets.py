"""Reference networks: set encoder, noise predictor, boundary regressor.

Both models share the same skeleton: a per-point MLP encodes each tooth's
point cloud, max-pooling condenses it to a per-tooth latent, inter-tooth
attention layers exchange information across the arch, and a task head maps
the result back out (per-point noise vectors for the generator, five
cylinder parameters per tooth for the boundary regressor).

Everything runs on the float64 autodiff engine, so training is exact-
gradient and fully deterministic given a seed.  Checkpoints are a versioned
binary format of named tensors with shape headers (little-endian float64).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, replace as dc_replace
from pathlib import Path

import numpy as np

from .attention import InterToothAttention
from .autodiff import Tensor, concat, dropout
from .boundary import CylBound, bound_from_array, fit_bound
from .dentition import (
    Dentition,
    MIRROR_MAP,
    Scenario,
    mirror_dentition,
    random_scenario,
    scale_dentition,
    shuffle_points,
    zigzag_index,
)
from .diffusion import (
    DiffusionSchedule,
    cyl_normalize,
    forward_closed,
    reverse_sample,
)

# Cylinder parameters and world coordinates are divided by this before they
# enter a network; 40 mm keeps a full dental arch inside tanh's linear-ish
# range.
COND_SCALE = 40.0

FDI_EMBED_DIM = 8


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 zero_init: bool = False):
        if zero_init:
            w = np.zeros((out_dim, in_dim))
        else:
            w = rng.standard_normal((out_dim, in_dim)) / math.sqrt(in_dim)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w.transpose(1, 0) + self.b

    def params(self, prefix: str) -> dict:
        return {prefix + ".w": self.w, prefix + ".b": self.b}


class MLP:
    """Stack of Linear layers with tanh between them (none after the last)."""

    def __init__(self, dims, rng, zero_init_last: bool = False):
        self.layers = [
            Linear(a, b, rng, zero_init=(zero_init_last and i == len(dims) - 2))
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))
        ]

    def __call__(self, x: Tensor, drop: float = 0.0,
                 rng: np.random.Generator | None = None,
                 training: bool = False) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.tanh()
                if training and drop > 0.0:
                    x = dropout(x, drop, rng, training)
        return x

    def params(self, prefix: str) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"{prefix}.{i}"))
        return out


class Embedding:
    def __init__(self, count: int, dim: int, rng: np.random.Generator):
        self.table = Tensor(0.1 * rng.standard_normal((count, dim)), requires_grad=True)

    def __call__(self, indices) -> Tensor:
        return self.table.take(np.asarray(indices, dtype=np.intp), axis=0)

    def params(self, prefix: str) -> dict:
        return {prefix + ".table": self.table}


def timestep_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal encoding of an integer timestep."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def smooth_l1_tensor(x: Tensor) -> Tensor:
    """Differentiable Smooth-L1, matching boundary.smooth_l1 elementwise."""
    ax = x.abs()
    small = (ax.data < 1.0).astype(np.float64)
    return Tensor(small) * (x * x * 0.5) + Tensor(1.0 - small) * (ax - 0.5)


def _broadcast_rows(per_tooth: Tensor, n_points: int) -> Tensor:
    """(K, D) -> (K, N, D) by repetition (gradients sum back over N)."""
    k, d = per_tooth.shape
    return per_tooth.reshape(k, 1, d).broadcast_to((k, n_points, d))


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------

@dataclass
class ToothBatch:
    """Stacked per-tooth network inputs for one restoration scenario.

    ``points`` are cylinder-local coordinates (one local frame per tooth);
    target rows hold the clean targets during training and are overwritten
    with the diffusing sample during generation.
    """

    fdis: tuple
    points: np.ndarray        # (K, N, 3) local coordinates
    indicator: np.ndarray     # (K,) 1.0 for targets, 0.0 for context
    indices: np.ndarray       # (K,) zig-zag ordinal indices
    bounds: np.ndarray        # (K, 5) world-frame cylinder parameters
    target_mask: np.ndarray   # (K,) bool

    @property
    def n_points(self) -> int:
        return self.points.shape[1]

    def target_rows(self) -> np.ndarray:
        return np.flatnonzero(self.target_mask)


def assemble_batch(
    dentition: Dentition,
    scenario: Scenario,
    target_bounds: dict[int, CylBound],
    context_bounds: dict[int, CylBound] | None = None,
    n_points: int | None = None,
) -> ToothBatch:
    """Build the stacked network input for one scenario.

    Context teeth come from ``dentition`` and are normalized by their own
    fitted cylinders (or by ``context_bounds`` when precomputed).  Target
    rows are normalized by ``target_bounds``; if the dentition does not
    contain a target tooth (generation time), its row is zero-filled.
    """
    fdis = tuple(
        sorted(scenario.context | scenario.targets, key=zigzag_index)
    )
    if n_points is None:
        present = [f for f in fdis if f in dentition]
        if not present:
            raise ValueError("cannot infer point count: no teeth present")
        n_points = dentition.get(present[0]).n_points

    rows, indicator, bounds, mask = [], [], [], []
    for fdi in fdis:
        is_target = fdi in scenario.targets
        if is_target:
            bound = target_bounds[fdi]
        elif context_bounds is not None and fdi in context_bounds:
            bound = context_bounds[fdi]
        else:
            bound = fit_bound(dentition.get(fdi).points)
        if fdi in dentition:
            pts = dentition.get(fdi).points
            if pts.shape[0] != n_points:
                raise ValueError(
                    f"tooth {fdi} has {pts.shape[0]} points, expected {n_points}"
                )
            rows.append(cyl_normalize(pts, bound))
        else:
            if not is_target:
                raise ValueError(f"context tooth {fdi} missing from dentition")
            rows.append(np.zeros((n_points, 3)))
        indicator.append(1.0 if is_target else 0.0)
        bounds.append(bound.as_array())
        mask.append(is_target)

    return ToothBatch(
        fdis=fdis,
        points=np.stack(rows),
        indicator=np.asarray(indicator),
        indices=np.asarray([zigzag_index(f) for f in fdis], dtype=np.int64),
        bounds=np.stack(bounds),
        target_mask=np.asarray(mask, dtype=bool),
    )


# ---------------------------------------------------------------------------
# Noise-prediction network
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserConfig:
    enc_hidden: int = 64
    latent: int = 128
    heads: int = 4
    attn_layers: int = 2
    time_dim: int = 32
    dec_hidden: int = 128
    dropout: float = 0.1

    @property
    def in_channels(self) -> int:
        # xyz + target indicator + FDI embedding + cylinder parameters
        return 3 + 1 + FDI_EMBED_DIM + 5


class Denoiser:
    """Predicts the corruption noise for every tooth point cloud."""

    def __init__(self, config: DenoiserConfig | None = None, seed: int = 0):
        cfg = config or DenoiserConfig()
        if cfg.latent % cfg.heads:
            raise ValueError("latent width must divide by head count")
        self.config = cfg
        rng = np.random.default_rng(seed)
        self.fdi_emb = Embedding(28, FDI_EMBED_DIM, rng)
        self.encoder = MLP([cfg.in_channels, cfg.enc_hidden, cfg.latent], rng)
        self.time_proj = Linear(cfg.time_dim, cfg.latent, rng)
        self.attn = [
            InterToothAttention(cfg.latent, cfg.heads, rng)
            for _ in range(cfg.attn_layers)
        ]
        self.decoder = MLP(
            [2 * cfg.latent, cfg.dec_hidden, 3], rng, zero_init_last=True
        )

    def params(self) -> dict:
        out = {}
        out.update(self.fdi_emb.params("fdi_emb"))
        out.update(self.encoder.params("enc"))
        out.update(self.time_proj.params("time"))
        for i, layer in enumerate(self.attn):
            out.update(layer.params(f"attn.{i}."))
        out.update(self.decoder.params("dec"))
        return out

    def forward(
        self,
        points: np.ndarray,
        indicator: np.ndarray,
        indices: np.ndarray,
        bounds: np.ndarray,
        t: int,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """(K, N, 3) local points -> (K, N, 3) predicted noise."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 3 or pts.shape[2] != 3:
            raise ValueError("points must be (K, N, 3)")
        if not np.isfinite(pts).all():
            raise ValueError("NaN or Inf in denoiser input")
        k, n, _ = pts.shape
        cfg = self.config
        drop = cfg.dropout if training else 0.0

        ind = np.broadcast_to(
            np.asarray(indicator, dtype=np.float64)[:, None, None], (k, n, 1)
        )
        bnd = np.broadcast_to(
            (np.asarray(bounds, dtype=np.float64) / COND_SCALE)[:, None, :], (k, n, 5)
        )
        emb = _broadcast_rows(self.fdi_emb(indices), n)
        feats = concat([Tensor(pts), Tensor(ind.copy()), emb, Tensor(bnd.copy())], axis=2)

        h = self.encoder(
            feats.reshape(k * n, cfg.in_channels), drop=drop, rng=rng, training=training
        )
        per_point = h.reshape(k, n, cfg.latent)
        latent = per_point.max(axis=1)
        temb = Tensor(timestep_embedding(t, cfg.time_dim).reshape(1, cfg.time_dim))
        latent = latent + self.time_proj(temb)
        for layer in self.attn:
            latent = layer.forward(latent, indices)
        dec_in = concat([per_point, _broadcast_rows(latent, n)], axis=2)
        out = self.decoder(
            dec_in.reshape(k * n, 2 * cfg.latent), drop=drop, rng=rng, training=training
        )
        return out.reshape(k, n, 3)


def denoise(
    model: Denoiser,
    schedule: DiffusionSchedule,
    batch: ToothBatch,
    x_t: np.ndarray,
    t: int,
) -> np.ndarray:
    """Predicted noise for the target rows of ``batch`` at timestep t."""
    t = schedule.check_t(t)
    rows = batch.target_rows()
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != (len(rows), batch.n_points, 3):
        raise ValueError("x_t must be (n_targets, N, 3)")
    pts = batch.points.copy()
    pts[rows] = x_t
    out = model.forward(pts, batch.indicator, batch.indices, batch.bounds, t)
    return out.data[rows]


def make_eps_fn(model: Denoiser, schedule: DiffusionSchedule, batch: ToothBatch):
    """Conditional noise predictor closure for the reverse sampler."""

    def eps_fn(x_local: np.ndarray, t: int) -> np.ndarray:
        return denoise(model, schedule, batch, x_local, t)

    return eps_fn


def sample_crowns(
    model: Denoiser,
    dentition: Dentition,
    scenario: Scenario,
    target_bounds: dict[int, CylBound],
    schedule: DiffusionSchedule,
    seed: int,
    context_bounds: dict[int, CylBound] | None = None,
    n_points: int | None = None,
) -> dict[int, np.ndarray]:
    """Generate world-frame point clouds for the scenario's target teeth."""
    batch = assemble_batch(
        dentition,
        scenario,
        target_bounds,
        context_bounds=context_bounds,
        n_points=n_points,
    )
    order = scenario.target_order
    clouds = reverse_sample(
        make_eps_fn(model, schedule, batch),
        [target_bounds[f] for f in order],
        batch.n_points,
        schedule,
        seed,
        stream_keys=order,
    )
    return {fdi: clouds[i] for i, fdi in enumerate(order)}


# ---------------------------------------------------------------------------
# Boundary regression network
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegressorConfig:
    enc_hidden: int = 64
    latent: int = 128
    heads: int = 4
    attn_layers: int = 2
    dropout: float = 0.3
    out_scale: float = COND_SCALE

    @property
    def in_channels(self) -> int:
        # xyz + target indicator + FDI embedding
        return 3 + 1 + FDI_EMBED_DIM


class BoundaryRegressor:
    """Regresses the five cylinder parameters for masked-out teeth.

    Target rows keep their identity channels (indicator, FDI embedding) but
    their point coordinates are hard-zeroed, so stale geometry cannot leak
    in, and they are excluded from the attention keys.
    """

    def __init__(self, config: RegressorConfig | None = None, seed: int = 0):
        cfg = config or RegressorConfig()
        if cfg.latent % cfg.heads:
            raise ValueError("latent width must divide by head count")
        self.config = cfg
        rng = np.random.default_rng(seed)
        self.fdi_emb = Embedding(28, FDI_EMBED_DIM, rng)
        self.encoder = MLP([cfg.in_channels, cfg.enc_hidden, cfg.latent], rng)
        self.attn = [
            InterToothAttention(cfg.latent, cfg.heads, rng)
            for _ in range(cfg.attn_layers)
        ]
        self.head = Linear(cfg.latent, 5, rng, zero_init=True)
        # Per-tooth additive head bias: learns the population-mean cylinder
        # per arch position, leaving the attention path to model the
        # dentition-specific correction.
        self.head_bias = Tensor(np.zeros((28, 5)), requires_grad=True)

    def params(self) -> dict:
        out = {}
        out.update(self.fdi_emb.params("fdi_emb"))
        out.update(self.encoder.params("enc"))
        for i, layer in enumerate(self.attn):
            out.update(layer.params(f"attn.{i}."))
        out.update(self.head.params("head"))
        out["head.bias_table"] = self.head_bias
        return out

    def forward(
        self,
        points: np.ndarray,
        is_context: np.ndarray,
        indices: np.ndarray,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """(K, N, 3) world points -> (K, 5) cylinder parameters in mm."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 3 or pts.shape[2] != 3:
            raise ValueError("points must be (K, N, 3)")
        if not np.isfinite(pts).all():
            raise ValueError("NaN or Inf in regressor input")
        ctx = np.asarray(is_context, dtype=bool)
        if not ctx.any():
            raise ValueError("boundary regression needs at least one context tooth")
        k, n, _ = pts.shape
        cfg = self.config
        drop = cfg.dropout if training else 0.0

        # Zero the geometry of every target row; identity channels stay.
        masked_pts = (pts / COND_SCALE) * ctx.astype(np.float64)[:, None, None]
        ind = np.broadcast_to(
            (~ctx).astype(np.float64)[:, None, None], (k, n, 1)
        )
        emb = _broadcast_rows(self.fdi_emb(indices), n)
        feats = concat([Tensor(masked_pts), Tensor(ind.copy()), emb], axis=2)
        h = self.encoder(
            feats.reshape(k * n, cfg.in_channels), drop=drop, rng=rng, training=training
        )
        latent = h.reshape(k, n, cfg.latent).max(axis=1)
        for layer in self.attn:
            latent = layer.forward(latent, indices, key_mask=ctx)
        per_tooth = self.head(latent) + self.head_bias.take(
            np.asarray(indices, dtype=np.intp), axis=0
        )
        return per_tooth * cfg.out_scale


def predict_bounds(
    model: BoundaryRegressor,
    dentition: Dentition,
    target_fdis,
    n_points: int | None = None,
) -> np.ndarray:
    """Predicted (n_targets, 5) cylinder parameters, world frame, mm.

    ``dentition`` provides the context teeth; ``target_fdis`` may or may not
    be present in it (their geometry is ignored either way).
    """
    targets = tuple(sorted({int(f) for f in target_fdis}, key=zigzag_index))
    if not targets:
        raise ValueError("no target teeth given")
    context = [f for f in dentition.fdis if f not in targets]
    if not context:
        raise ValueError("boundary regression needs at least one context tooth")
    if n_points is None:
        n_points = dentition.get(context[0]).n_points

    fdis = tuple(sorted(set(context) | set(targets), key=zigzag_index))
    rows, ctx_mask = [], []
    for fdi in fdis:
        if fdi in targets or fdi not in dentition:
            rows.append(np.zeros((n_points, 3)))
            ctx_mask.append(False)
        else:
            pts = dentition.get(fdi).points
            if pts.shape[0] != n_points:
                raise ValueError(f"tooth {fdi}: inconsistent point count")
            rows.append(pts)
            ctx_mask.append(True)
    indices = np.asarray([zigzag_index(f) for f in fdis], dtype=np.int64)
    out = model.forward(np.stack(rows), np.asarray(ctx_mask), indices)
    target_rows = [fdis.index(f) for f in targets]
    return out.data[target_rows]


def bounds_from_predictions(params: np.ndarray, targets, min_extent: float = 0.5) -> dict:
    """Turn raw (n, 5) predictions into usable bounds (r, h floored).

    Rows pair with ``targets`` in zig-zag order, matching the row order
    produced by :func:`predict_bounds` for the same target set.
    """
    params = np.asarray(params, dtype=np.float64)
    ordered = sorted({int(f) for f in targets}, key=zigzag_index)
    if params.shape != (len(ordered), 5):
        raise ValueError(f"expected ({len(ordered)}, 5) parameters, got {params.shape}")
    out = {}
    for row, fdi in zip(params, ordered):
        row = row.copy()
        row[3] = max(row[3], min_extent)
        row[4] = max(row[4], min_extent)
        out[fdi] = bound_from_array(row)
    return out


# ---------------------------------------------------------------------------
# Optimizer and training
# ---------------------------------------------------------------------------

class Adam:
    """Adam with the usual default moment coefficients."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * p.grad
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * p.grad**2
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    lr_decay: float = 1.0      # multiply lr by this every lr_decay_every epochs
    lr_decay_every: int = 0    # 0 disables decay
    min_targets: int = 1
    max_targets: int = 6
    augment: bool = True


def _augmented(dentition: Dentition, bounds: dict, rng: np.random.Generator):
    """Apply the training augmentations; bounds transform analytically."""
    if rng.random() < 0.5:
        dentition = mirror_dentition(dentition)
        bounds = {
            MIRROR_MAP[f]: dc_replace(b, c_x=-b.c_x) for f, b in bounds.items()
        }
    s = float(rng.uniform(0.95, 1.05))
    dentition = scale_dentition(dentition, s)
    bounds = {
        f: CylBound(b.c_x * s, b.c_y * s, b.c_z * s, b.r * s, b.h * s)
        for f, b in bounds.items()
    }
    teeth = tuple(
        shuffle_points(t, int(rng.integers(0, 2**31 - 1))) for t in dentition.teeth
    )
    return Dentition(teeth=teeth, frame=dentition.frame), bounds


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_decay_every <= 0 or cfg.lr_decay == 1.0:
        return cfg.lr
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


def train_denoiser(
    model: Denoiser,
    dentitions,
    schedule: DiffusionSchedule,
    cfg: TrainConfig,
    seed: int,
) -> list[float]:
    """Noise-matching training; returns the per-epoch mean loss trace."""
    dentitions = list(dentitions)
    if not dentitions:
        raise ValueError("empty training dataset")
    rng = np.random.default_rng(seed)
    opt = Adam(model.params(), lr=cfg.lr)
    base_bounds = [
        {t.fdi: fit_bound(t.points) for t in d.teeth} for d in dentitions
    ]

    trace = []
    for epoch in range(cfg.epochs):
        opt.lr = _epoch_lr(cfg, epoch)
        losses = []
        for di in rng.permutation(len(dentitions)):
            d, bounds = dentitions[di], base_bounds[di]
            if cfg.augment:
                d, bounds = _augmented(d, bounds, rng)
            n_targets = int(rng.integers(cfg.min_targets, cfg.max_targets + 1))
            scenario = random_scenario(d, n_targets, rng)
            batch = assemble_batch(
                d,
                scenario,
                {f: bounds[f] for f in scenario.targets},
                context_bounds=bounds,
            )
            rows = batch.target_rows()
            x0 = batch.points[rows]
            t = int(rng.integers(1, schedule.T + 1))
            noise = rng.standard_normal(x0.shape)
            pts = batch.points.copy()
            pts[rows] = forward_closed(schedule, x0, t, noise)

            out = model.forward(
                pts, batch.indicator, batch.indices, batch.bounds, t,
                training=True, rng=rng,
            )
            diff = out.take(rows, axis=0) - Tensor(noise)
            loss = (diff * diff).sum(axis=2).mean()
            if not np.isfinite(loss.data):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        trace.append(float(np.mean(losses)))
    return trace


def train_regressor(
    model: BoundaryRegressor,
    dentitions,
    cfg: TrainConfig,
    seed: int,
) -> list[float]:
    """Masked Smooth-L1 training of the boundary regressor."""
    dentitions = list(dentitions)
    if not dentitions:
        raise ValueError("empty training dataset")
    rng = np.random.default_rng(seed)
    opt = Adam(model.params(), lr=cfg.lr)
    base_bounds = [
        {t.fdi: fit_bound(t.points) for t in d.teeth} for d in dentitions
    ]

    trace = []
    for epoch in range(cfg.epochs):
        opt.lr = _epoch_lr(cfg, epoch)
        losses = []
        for di in rng.permutation(len(dentitions)):
            d, bounds = dentitions[di], base_bounds[di]
            if cfg.augment:
                d, bounds = _augmented(d, bounds, rng)
            n_targets = int(rng.integers(cfg.min_targets, cfg.max_targets + 1))
            scenario = random_scenario(d, n_targets, rng)

            fdis = tuple(sorted(d.fdis, key=zigzag_index))
            ctx = np.asarray([f not in scenario.targets for f in fdis])
            pts = np.stack(
                [
                    d.get(f).points if c else np.zeros_like(d.get(f).points)
                    for f, c in zip(fdis, ctx)
                ]
            )
            indices = np.asarray([zigzag_index(f) for f in fdis], dtype=np.int64)
            out = model.forward(pts, ctx, indices, training=True, rng=rng)
            rows = [i for i, f in enumerate(fdis) if f in scenario.targets]
            gt = np.stack([bounds[fdis[i]].as_array() for i in rows])
            resid = out.take(np.asarray(rows), axis=0) - Tensor(gt)
            loss = smooth_l1_tensor(resid).sum(axis=1).mean()
            if not np.isfinite(loss.data):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        trace.append(float(np.mean(losses)))
    return trace


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CROWNDIFF-CKPT-V1\n"


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    """Write named tensors: magic, JSON header with shapes, then raw <f8 data."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(params)
    header = {
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(np.shape(_data(params[n])))} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(_data(params[n]), dtype="<f8").tobytes())


def _data(value):
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read a checkpoint; returns ({name: array}, meta)."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a crowndiff checkpoint")
        (blob_len,) = struct.unpack("<q", fh.read(8))
        header = json.loads(fh.read(blob_len))
        tensors = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"{path}: truncated tensor {spec['name']!r}")
            tensors[spec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return tensors, header.get("meta", {})


def _load_params(model, tensors: dict) -> None:
    params = model.params()
    missing = set(params) - set(tensors)
    extra = set(tensors) - set(params)
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing={sorted(missing)}, extra={sorted(extra)}")
    for name, p in params.items():
        arr = tensors[name]
        if arr.shape != p.data.shape:
            raise ValueError(f"checkpoint tensor {name}: shape {arr.shape} != {p.data.shape}")
        p.data = arr.astype(np.float64)


def save_denoiser(path, model: Denoiser, extra_meta: dict | None = None) -> None:
    meta = {"kind": "denoiser", "config": asdict(model.config)}
    meta.update(extra_meta or {})
    save_checkpoint(path, model.params(), meta)


def load_denoiser(path) -> Denoiser:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "denoiser":
        raise ValueError(f"{path}: checkpoint is not a denoiser")
    model = Denoiser(DenoiserConfig(**meta["config"]))
    _load_params(model, tensors)
    return model


def save_regressor(path, model: BoundaryRegressor, extra_meta: dict | None = None) -> None:
    meta = {"kind": "boundary_regressor", "config": asdict(model.config)}
    meta.update(extra_meta or {})
    save_checkpoint(path, model.params(), meta)


def load_regressor(path) -> BoundaryRegressor:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "boundary_regressor":
        raise ValueError(f"{path}: checkpoint is not a boundary regressor")
    model = BoundaryRegressor(RegressorConfig(**meta["config"]))
    _load_params(model, tensors)
    return model
