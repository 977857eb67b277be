"""Unpaired training loop: generator step, then one step per discriminator.

Every random draw of epoch ``e`` comes from ``Rng(seed).spawn("epoch", e, ...)``,
so a run resumed from an end-of-epoch checkpoint continues bitwise.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
import queue
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import losses as L
from .checkpoint import Checkpoint, array_checksum, config_digest, load_checkpoint, save_checkpoint
from .metrics import RandomProjection, embed, fid, moments
from .nets import Discriminator, Generator, cyclegan_specs
from .optim import Adam, AdamState
from .rng import Rng
from .tensor import Tensor, no_grad
from .voldata import AugmentConfig, Volume, apply_augment, depth_window, draw_augment

log = logging.getLogger(__name__)

LOG_COLUMNS = ["iteration", "epoch", "lr", "loss_adv_G", "loss_adv_F", "loss_D_X", "loss_D_Y",
               "loss_cyc", "loss_id", "loss_gl", "total"]
DEPTH_GRID = (5, 7, 9, 11)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term, iteration):
        super().__init__(f"loss term {term} became non-finite at iteration {iteration}")
        self.term = term


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    decay_start: int = 200
    lr: float = 2e-5
    batch: int = 1
    weights: L.LossWeights = L.LossWeights()
    n_down: int = 3
    base_filters: int = 64
    n_blocks: int = 9
    disc_filters: int = 64
    use_gradient_loss: bool = True
    saturating_gan: bool = False
    pool_size: int = 50
    seed: int = 0
    depth_slices: int = 9
    crop: tuple | None = None
    augment: bool = True
    precision: str = "single"
    checkpoint_every: int = 25
    workers: int = 1

    def __post_init__(self):
        if self.batch != 1:
            raise ValueError("batch size is fixed at 1")
        if not 0 <= self.decay_start <= self.epochs:
            raise ValueError(f"need 0 <= decay_start <= epochs, got {self.decay_start} and {self.epochs}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.depth_slices not in DEPTH_GRID:
            raise ValueError(f"depth_slices must be one of {DEPTH_GRID}, got {self.depth_slices}")
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")
        if self.pool_size < 0 or self.checkpoint_every < 1 or self.workers < 1:
            raise ValueError("pool_size >= 0, checkpoint_every >= 1 and workers >= 1 required")
        if self.crop is not None:
            object.__setattr__(self, "crop", tuple(int(c) for c in self.crop))

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["crop"] = list(self.crop) if self.crop else None
        return d

    def run_digest(self):
        """Digest of the fields that decide the trajectory (not workers or checkpoint cadence)."""
        d = self.to_dict()
        for k in ("workers", "checkpoint_every"):
            d.pop(k)
        return config_digest(d)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = L.LossWeights(**d["weights"])
        return cls(**d)


def lr_at_epoch(e, cfg):
    """Constant until ``decay_start``, then linear to exactly 0 at ``epochs``."""
    if not 0 <= e <= cfg.epochs:
        raise ValueError(f"epoch {e} outside [0, {cfg.epochs}]")
    if e < cfg.decay_start:
        return cfg.lr
    span = cfg.epochs - cfg.decay_start
    if span == 0:
        return 0.0
    return cfg.lr * (1.0 - (e - cfg.decay_start) / span)


# ------------------------------------------------------------------ pool

class ImagePool:
    """History buffer of generated volumes shown to the discriminators."""

    def __init__(self, capacity=50):
        self.capacity = int(capacity)
        self.items = []

    def __len__(self):
        return len(self.items)

    def query(self, fake, rng):
        if self.capacity == 0:
            return fake
        if len(self.items) < self.capacity:
            self.items.append(fake.copy())
            return fake
        if rng.random() < 0.5:
            return fake
        i = int(rng.integers(0, self.capacity))
        old = self.items[i]
        self.items[i] = fake.copy()
        return old


def pool_query(pool, fake, rng):
    return pool.query(fake, rng)


# ----------------------------------------------------------------- model

class CycleGAN:
    """G: OCT -> confocal, F: confocal -> OCT, D_X judges OCT, D_Y judges confocal."""

    NETS = ("G", "F", "D_X", "D_Y")

    def __init__(self, cfg):
        self.cfg = cfg
        specs = cyclegan_specs(cfg.n_down, cfg.base_filters, cfg.n_blocks, cfg.disc_filters)
        init = Rng(cfg.seed).spawn("init")
        self.G = Generator(specs["G"], init.spawn("G"), cfg.dtype)
        self.F = Generator(specs["F"], init.spawn("F"), cfg.dtype)
        self.D_X = Discriminator(specs["D_X"], init.spawn("D_X"), cfg.dtype)
        self.D_Y = Discriminator(specs["D_Y"], init.spawn("D_Y"), cfg.dtype)
        gen_params = {f"G/{k}": v for k, v in self.G.params.items()}
        gen_params.update({f"F/{k}": v for k, v in self.F.params.items()})
        self.opt_G = Adam(gen_params, cfg.lr)
        self.opt_D_X = Adam(self.D_X.params, cfg.lr)
        self.opt_D_Y = Adam(self.D_Y.params, cfg.lr)
        self.pool_X = ImagePool(cfg.pool_size)
        self.pool_Y = ImagePool(cfg.pool_size)

    def net(self, name):
        return getattr(self, name)

    def optimizers(self):
        return {"opt_G": self.opt_G, "opt_D_X": self.opt_D_X, "opt_D_Y": self.opt_D_Y}

    def checksums(self):
        return {n: array_checksum({k: p.data for k, p in self.net(n).params.items()}) for n in self.NETS}

    # -- checkpoint glue
    def to_checkpoint(self, epoch, iteration=0):
        arrays = {}
        for n in self.NETS:
            arrays.update({f"{n}/{k}": p.data for k, p in self.net(n).params.items()})
        steps = {}
        for oname, opt in self.optimizers().items():
            for k in opt.state.m:
                arrays[f"{oname}/m/{k}"] = opt.state.m[k]
                arrays[f"{oname}/v/{k}"] = opt.state.v[k]
            steps[oname] = opt.state.t
        for pname in ("pool_X", "pool_Y"):
            for i, item in enumerate(getattr(self, pname).items):
                arrays[f"{pname}/{i:04d}"] = item
        meta = {"opt_steps": steps, "iteration": iteration, "config": self.cfg.to_dict(),
                "run_digest": self.cfg.run_digest()}
        return Checkpoint(arrays=arrays, epoch=epoch, meta=meta)

    def load_state(self, ckpt):
        for n in self.NETS:
            got = ckpt.group(n)
            params = self.net(n).params
            if set(got) != set(params):
                raise ValueError(f"checkpoint parameters for {n} do not match the configured architecture")
            for k, p in params.items():
                if got[k].shape != p.shape:
                    raise ValueError(f"{n}/{k}: checkpoint shape {got[k].shape}, model {p.shape}")
                p.data = got[k].astype(p.dtype, copy=True)
        for oname, opt in self.optimizers().items():
            opt.state = AdamState(m={k: a.copy() for k, a in ckpt.group(f"{oname}/m").items()},
                                  v={k: a.copy() for k, a in ckpt.group(f"{oname}/v").items()},
                                  t=int(ckpt.meta["opt_steps"][oname]))
        for pname in ("pool_X", "pool_Y"):
            items = ckpt.group(pname)
            getattr(self, pname).items = [items[k].copy() for k in sorted(items)]


@contextmanager
def frozen(*param_dicts):
    """Temporarily stop gradient flow into the given parameters."""
    saved = []
    for params in param_dicts:
        for p in params.values():
            saved.append((p, p.requires_grad))
            p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad = flag


def _set_trainable(*param_dicts):
    for params in param_dicts:
        for p in params.values():
            p.requires_grad = True
            p.grad = None


def _finite(value, term, iteration):
    v = L.as_float(value)
    if not math.isfinite(v):
        raise NonFiniteLossError(term, iteration)
    return v


def train_step(x, y, model, lr, rng, iteration=0, epoch=0):
    """One generator update followed by D_Y and D_X updates; returns a log record."""
    cfg = model.cfg
    _set_trainable(model.G.params, model.F.params)
    with frozen(model.D_X.params, model.D_Y.params):
        total, parts, fake_y, fake_x = L.generator_objective(
            x, y, model.G, model.F, model.D_X, model.D_Y, cfg.weights,
            cfg.use_gradient_loss, cfg.saturating_gan)
        values = {k: _finite(v, k, iteration) for k, v in parts.items()}
        values["total"] = _finite(total, "total", iteration)
        total.backward()
    model.opt_G.lr = lr
    model.opt_G.step()

    with frozen(model.G.params, model.F.params):
        _set_trainable(model.D_Y.params)
        fake = Tensor(model.pool_Y.query(fake_y.data, rng.spawn("pool_Y")))
        loss_dy = L.adv_loss_discriminator(model.D_Y(y), model.D_Y(fake))
        values["D_Y"] = _finite(loss_dy, "D_Y", iteration)
        loss_dy.backward()
        model.opt_D_Y.lr = lr
        model.opt_D_Y.step()

        _set_trainable(model.D_X.params)
        fake = Tensor(model.pool_X.query(fake_x.data, rng.spawn("pool_X")))
        loss_dx = L.adv_loss_discriminator(model.D_X(x), model.D_X(fake))
        values["D_X"] = _finite(loss_dx, "D_X", iteration)
        loss_dx.backward()
        model.opt_D_X.lr = lr
        model.opt_D_X.step()

    return {
        "iteration": iteration, "epoch": epoch, "lr": lr,
        "loss_adv_G": values["adv_G"], "loss_adv_F": values["adv_F"],
        "loss_D_X": values["D_X"], "loss_D_Y": values["D_Y"],
        "loss_cyc": values["cyc"], "loss_id": values.get("id"), "loss_gl": values.get("gl"),
        "total": values["total"],
    }


# ------------------------------------------------------------------ data

@dataclass
class UnpairedDataset:
    oct: list
    confocal: list

    def __post_init__(self):
        if not self.oct or not self.confocal:
            raise ValueError("both domains need at least one volume")
        for name, vols, modality in (("oct", self.oct, "oct"), ("confocal", self.confocal, "confocal")):
            shapes = {v.shape for v in vols}
            if len(shapes) > 1:
                raise ValueError(f"inconsistent {name} volume shapes: {sorted(shapes)}")
            if any(v.modality != modality for v in vols):
                raise ValueError(f"{name} list contains a volume of another modality")
        if self.oct[0].shape[1:] != self.confocal[0].shape[1:]:
            raise ValueError(f"plane size differs between domains: {self.oct[0].shape} vs {self.confocal[0].shape}")

    @property
    def steps_per_epoch(self):
        return max(len(self.oct), len(self.confocal))


def _cycled_order(n, steps, rng):
    order, k = [], 0
    while len(order) < steps:
        order.extend(rng.spawn("perm", k).permutation(n).tolist())
        k += 1
    return order[:steps]


def _prepare(vol, n_slices, rng, cfg):
    vol = depth_window(vol, n_slices, rng.spawn("window"))
    if cfg.augment:
        vol = apply_augment(vol, draw_augment(rng.spawn("augment")), cfg.crop)
    elif cfg.crop:
        vol = apply_augment(vol, draw_augment(rng.spawn("augment"), AugmentConfig(0.0, (1.0, 1.0))), cfg.crop)
    return Tensor(vol.batch().astype(cfg.dtype))


def epoch_batches(dataset, cfg, epoch):
    """Deterministic (x, y, step_rng) triples for one epoch."""
    er = Rng(cfg.seed).spawn("epoch", epoch)
    steps = dataset.steps_per_epoch
    ox = _cycled_order(len(dataset.oct), steps, er.spawn("order", "oct"))
    oy = _cycled_order(len(dataset.confocal), steps, er.spawn("order", "confocal"))
    for i in range(steps):
        sr = er.spawn("step", i)
        x = _prepare(dataset.oct[ox[i]], cfg.depth_slices, sr.spawn("x"), cfg)
        y = _prepare(dataset.confocal[oy[i]], cfg.depth_slices, sr.spawn("y"), cfg)
        yield x, y, sr


def prefetch(iterable, depth=2):
    """Run ``iterable`` on a helper thread, at most ``depth`` items ahead."""
    q = queue.Queue(maxsize=depth)
    done = object()

    def worker():
        try:
            for item in iterable:
                q.put(item)
        except BaseException as exc:  # surfaced on the consumer side
            q.put(exc)
        q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


# -------------------------------------------------------------- logging

@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    epoch_checksums: list = field(default_factory=list)

    def append(self, rec):
        self.records.append(rec)

    def column(self, name):
        return [r[name] for r in self.records]

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow([_fmt(r[c]) for c in LOG_COLUMNS])

    def write_checksums(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch"] + list(CycleGAN.NETS))
            for row in self.epoch_checksums:
                w.writerow([row["epoch"]] + [row[n] for n in CycleGAN.NETS])

    @classmethod
    def read_csv(cls, path):
        out = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                out.append({k: (None if v == "" else float(v)) for k, v in row.items()})
        return out


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ------------------------------------------------------------------ fit

def translate(generator, vol_or_tensor, n_slices=None):
    """Apply a generator in evaluation mode (centered depth window, no graph)."""
    if isinstance(vol_or_tensor, Volume):
        vol = vol_or_tensor if n_slices is None else depth_window(vol_or_tensor, n_slices)
        x = vol.batch()
    else:
        x = np.asarray(vol_or_tensor)
    dtype = generator.params["stem.conv.weight"].dtype
    with no_grad():
        return generator(Tensor(x.astype(dtype))).data


def fid_translated(model, oct_vols, confocal_vols, dim=768, seed=0):
    """FID between G(oct) and real confocal volumes under a random projection."""
    n = model.cfg.depth_slices
    fakes = [translate(model.G, v, n)[0] for v in oct_vols]
    reals = [depth_window(v, n).voxels for v in confocal_vols]
    emb = RandomProjection(dim, seed)
    return fid(moments(embed(reals, emb)), moments(embed(fakes, emb)))


@dataclass
class FitResult:
    model: CycleGAN
    log: TrainLog
    checkpoint: Checkpoint
    best_epoch: int | None = None
    best_fid: float | None = None


def fit(dataset, cfg, out_dir=None, resume=None, eval_data=None, stop_after=None, progress=None):
    """Train for ``cfg.epochs`` epochs (or until ``stop_after`` completed epochs).

    ``resume`` is a checkpoint path or object saved at the end of an epoch.
    ``eval_data`` = (oct_volumes, confocal_volumes) enables best-checkpoint
    selection by FID at each checkpoint.
    """
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    n_slices = cfg.depth_slices
    for v in dataset.oct + dataset.confocal:
        if v.shape[0] < n_slices:
            raise ValueError(f"{v.name or 'volume'} has depth {v.shape[0]} < depth_slices {n_slices}")
    model = CycleGAN(cfg)
    start = 0
    trainlog = TrainLog()
    if resume is not None:
        ckpt = load_checkpoint(resume) if isinstance(resume, (str, os.PathLike)) else resume
        if ckpt.meta.get("run_digest") != cfg.run_digest():
            raise ValueError("checkpoint was written under a different training config")
        model.load_state(ckpt)
        start = ckpt.epoch
    end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    steps = dataset.steps_per_epoch
    best_epoch, best_fid = None, None
    ckpt = None

    with threadpool_limits(cfg.workers):
        for epoch in range(start, end):
            lr = lr_at_epoch(epoch, cfg)
            t0 = time.perf_counter()
            for i, (x, y, sr) in enumerate(prefetch(epoch_batches(dataset, cfg, epoch))):
                rec = train_step(x, y, model, lr, sr, epoch * steps + i, epoch)
                trainlog.append(rec)
                if progress:
                    progress(rec)
            sums = model.checksums()
            trainlog.epoch_checksums.append({"epoch": epoch + 1, **sums})
            log.info("epoch %d/%d lr=%.3g %.1fs", epoch + 1, cfg.epochs, lr, time.perf_counter() - t0)
            done = epoch + 1
            if done % cfg.checkpoint_every == 0 or done == end:
                ckpt = model.to_checkpoint(done, done * steps)
                if out_dir:
                    save_checkpoint(os.path.join(out_dir, f"epoch_{done:04d}.v3cg"), ckpt)
                if eval_data is not None:
                    score = fid_translated(model, *eval_data, seed=cfg.seed)
                    if best_fid is None or score < best_fid:
                        best_epoch, best_fid = done, score
                        if out_dir:
                            save_checkpoint(os.path.join(out_dir, "best.v3cg"), ckpt)
    if ckpt is None:
        ckpt = model.to_checkpoint(max(start, end), max(start, end) * steps)
    if out_dir:
        trainlog.write_csv(os.path.join(out_dir, "train_log.csv"))
        trainlog.write_checksums(os.path.join(out_dir, "epoch_checksums.csv"))
    return FitResult(model, trainlog, ckpt, best_epoch, best_fid)


def model_from_checkpoint(ckpt):
    ckpt = load_checkpoint(ckpt) if isinstance(ckpt, (str, os.PathLike)) else ckpt
    cfg = TrainConfig.from_dict(ckpt.meta["config"])
    model = CycleGAN(cfg)
    model.load_state(ckpt)
    return model
