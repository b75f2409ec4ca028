"""Alternating update schedule and checkpointing.

Each outer iteration runs three phases:

1. ``reid``: shape encoder on identity + triplet losses over the RGB and
   gray streams.
2. ``generator`` (``gen_iters_per_cycle`` times): shape encoder on the
   label-flipped feature-adversarial surrogate (both streams by default,
   see ``encoder_adv_streams``), then shape encoder,
   color encoder and generator on reconstruction + image-adversarial
   surrogate.
3. ``discriminator`` (``disc_iters_per_cycle`` times): feature
   discriminator, then image discriminator.

Features are recomputed with a fresh forward pass before every update.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import archive
from .data.sampler import TrainingBatch, sample_batch
from .errors import CheckpointError, ConfigError, DivergenceError
from .losses import (HyperParams, LossValues, discriminator_loss, feature_adv_loss, generator_loss,
                     identity_loss, image_adv_loss, reconstruction_loss, triplet_loss)
from .models import (NETWORKS, ModelBundle, ModelConfig, classify, color_encode, discriminate_features,
                     discriminate_image, generate_image, shape_encode)

log = logging.getLogger(__name__)

LOSS_NAMES = ("l_id", "l_tri", "l_adv_DF", "l_rec", "l_adv_DI")
CHECKPOINT_SCHEMA = 1

DEFAULT_LR = {
    "shape_encoder": 1e-4,
    "color_encoder": 1e-4,
    "feature_discriminator": 2e-4,
    "generator": 2e-4,
    "image_discriminator": 2e-4,
}


@dataclass
class TrainConfig:
    total_iters: int = 2000
    gen_iters_per_cycle: int = 1
    disc_iters_per_cycle: int = 1
    hyper: HyperParams = field(default_factory=HyperParams)
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    betas: tuple = (0.5, 0.999)
    weight_decay: float = 0.0
    lr_decay_every: int = 0          # 0 keeps the step size constant
    lr_decay_gamma: float = 0.5
    grad_clip: float | None = 5.0
    batch_size: int = 32
    num_instances: int = 4
    seed: int = 0
    checkpoint_every: int = 0        # 0 disables periodic checkpoints
    mode: str = "casenet"            # or "baseline": RGB-only identity + triplet
    disabled: tuple = ()             # subset of LOSS_NAMES
    encoder_adv_streams: str = "both"  # "both" or "gray": streams the encoder's adversarial update sees
    ema_decay: float = 0.98

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        from .config import strict_fields
        kw = strict_fields(cls, d, "train")
        if "hyper" in kw:
            kw["hyper"] = HyperParams(**strict_fields(HyperParams, kw["hyper"], "train.hyper"))
        if "lr" in kw:
            lr = dict(DEFAULT_LR)
            from .config import reject_unknown
            reject_unknown(kw["lr"], DEFAULT_LR, "train.lr")
            lr.update(kw["lr"])
            kw["lr"] = lr
        for k in ("betas", "disabled"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["disabled"] = list(self.disabled)
        return d

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.total_iters >= 0, f"total_iters must be >= 0 (got {self.total_iters})")
        need(self.gen_iters_per_cycle >= 1 and self.disc_iters_per_cycle >= 1, "cycle counts must be >= 1")
        need(all(v >= 0 for v in self.lr.values()), "step sizes must be >= 0")
        need(self.mode in ("casenet", "baseline"), f"unknown training mode {self.mode!r}")
        need(self.encoder_adv_streams in ("gray", "both"),
             f"encoder_adv_streams must be 'gray' or 'both' (got {self.encoder_adv_streams!r})")
        unknown = set(self.disabled) - set(LOSS_NAMES)
        need(not unknown, f"unknown losses to disable: {sorted(unknown)}")
        need(len(set(self.disabled)) < len(LOSS_NAMES), "cannot disable every loss")
        need(self.batch_size % self.num_instances == 0, "batch_size must be a multiple of num_instances")
        need(self.checkpoint_every >= 0, "checkpoint_every must be >= 0")
        self.hyper.validate()

    def enabled(self, name: str) -> bool:
        if self.mode == "baseline" and name in ("l_adv_DF", "l_rec", "l_adv_DI"):
            return False
        return name not in self.disabled

    def hash(self, model_cfg: ModelConfig) -> str:
        d = self.to_dict()
        for k in ("total_iters", "checkpoint_every"):
            d.pop(k)
        blob = json.dumps({"train": d, "model": model_cfg.to_dict()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TrainState:
    step: int
    bundle: ModelBundle
    optimizers: dict
    rng: np.random.Generator
    running: dict = field(default_factory=dict)
    config: TrainConfig | None = None


def _make_optimizers(bundle: ModelBundle, cfg: TrainConfig) -> dict:
    return {
        name: torch.optim.Adam(bundle.group(name).parameters(), lr=cfg.lr[name], betas=tuple(cfg.betas),
                               weight_decay=cfg.weight_decay)
        for name in NETWORKS
    }


def init_state(model_cfg: ModelConfig, cfg: TrainConfig) -> TrainState:
    cfg.validate()
    torch.manual_seed(cfg.seed)
    bundle = ModelBundle(model_cfg)
    return TrainState(step=0, bundle=bundle, optimizers=_make_optimizers(bundle, cfg),
                      rng=np.random.default_rng([cfg.seed, 1]), config=cfg)


def _finite(name: str, value: torch.Tensor, step: int) -> float:
    v = float(value.detach())
    if not math.isfinite(v):
        raise DivergenceError(name, step, v)
    return v


def _update(state: TrainState, cfg: TrainConfig, names, loss: torch.Tensor) -> None:
    bundle = state.bundle
    for n in NETWORKS:
        bundle.group(n).zero_grad(set_to_none=True)
    loss.backward()
    params = [p for n in names for p in bundle.group(n).parameters() if p.grad is not None]
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    for n in names:
        state.optimizers[n].step()
    for n in NETWORKS:
        bundle.group(n).zero_grad(set_to_none=True)


def _set_lr(state: TrainState, cfg: TrainConfig) -> None:
    factor = 1.0
    if cfg.lr_decay_every:
        factor = cfg.lr_decay_gamma ** (state.step // cfg.lr_decay_every)
    for n, opt in state.optimizers.items():
        for g in opt.param_groups:
            g["lr"] = cfg.lr[n] * factor


def phase_reid(state, batch, cfg, values):
    bundle, step = state.bundle, state.step
    two_stream = cfg.mode == "casenet"
    f_rgb = shape_encode(bundle, batch.x_rgb).vector
    f_gray = shape_encode(bundle, batch.x_gray).vector if two_stream else None
    l_id = identity_loss(classify(bundle, f_rgb), classify(bundle, f_gray) if two_stream else None, batch.labels)
    l_tri = triplet_loss(f_rgb, f_gray, batch.pos_idx, batch.neg_idx, cfg.hyper.margin)
    values.l_id = _finite("l_id", l_id, step)
    values.l_tri = _finite("l_tri", l_tri, step)
    terms = []
    if cfg.enabled("l_id"):
        terms.append(l_id)
    if cfg.enabled("l_tri"):
        terms.append(cfg.hyper.lambda_tri * l_tri)
    if terms:
        _update(state, cfg, ["shape_encoder"], sum(terms))


def phase_generator(state, batch, cfg, values):
    bundle, step = state.bundle, state.step
    if cfg.enabled("l_adv_DF"):
        f_gray = shape_encode(bundle, batch.x_gray)
        enc_adv = generator_loss(discriminate_features(bundle, f_gray))
        if cfg.encoder_adv_streams == "both":
            # flipped labels on the RGB side as well, so color-dependent RGB features are penalized directly
            f_rgb = shape_encode(bundle, batch.x_rgb)
            enc_adv = enc_adv + generator_loss(1.0 - discriminate_features(bundle, f_rgb))
        _finite("encoder feature-adversarial surrogate", enc_adv, step)
        _update(state, cfg, ["shape_encoder"], enc_adv)
    use_rec, use_di = cfg.enabled("l_rec"), cfg.enabled("l_adv_DI")
    if use_rec or use_di:
        f_gray = shape_encode(bundle, batch.x_gray)
        f_c = color_encode(bundle, batch.x_rgb_prime)
        x_hat = generate_image(bundle, f_gray.map, f_c)
        l_rec = reconstruction_loss(x_hat, batch.x_rgb)
        values.l_rec = _finite("l_rec", l_rec, step)
        loss = l_rec if use_rec else 0.0
        if use_di:
            gen_adv = generator_loss(discriminate_image(bundle, x_hat))
            _finite("generator image-adversarial surrogate", gen_adv, step)
            loss = loss + cfg.hyper.lambda_I * gen_adv
        _update(state, cfg, ["shape_encoder", "color_encoder", "generator"], loss)


def phase_discriminator(state, batch, cfg, values):
    bundle, step = state.bundle, state.step
    if cfg.enabled("l_adv_DF"):
        with torch.no_grad():
            f_rgb = shape_encode(bundle, batch.x_rgb)
            f_gray = shape_encode(bundle, batch.x_gray)
        value = feature_adv_loss(discriminate_features(bundle, f_rgb), discriminate_features(bundle, f_gray))
        values.l_adv_DF = _finite("l_adv_DF", value, step)
        _update(state, cfg, ["feature_discriminator"], -value)
    if cfg.enabled("l_adv_DI"):
        with torch.no_grad():
            f_gray = shape_encode(bundle, batch.x_gray)
            x_hat = generate_image(bundle, f_gray.map, color_encode(bundle, batch.x_rgb_prime))
        value = image_adv_loss(discriminate_image(bundle, batch.x_rgb), discriminate_image(bundle, x_hat))
        values.l_adv_DI = _finite("l_adv_DI", value, step)
        _update(state, cfg, ["image_discriminator"], -value)


def train_step(state: TrainState, batch: TrainingBatch, cfg: TrainConfig | None = None, on_phase=None):
    """One outer iteration. ``on_phase(name, state)`` is called after each phase."""
    cfg = cfg or state.config
    _set_lr(state, cfg)
    values = LossValues()
    state.bundle.train()
    phase_reid(state, batch, cfg, values)
    if on_phase:
        on_phase("reid", state)
    if cfg.mode == "casenet":
        for _ in range(cfg.gen_iters_per_cycle):
            phase_generator(state, batch, cfg, values)
        if on_phase:
            on_phase("generator", state)
        for _ in range(cfg.disc_iters_per_cycle):
            phase_discriminator(state, batch, cfg, values)
        if on_phase:
            on_phase("discriminator", state)
    state.step += 1
    for k, v in values.to_dict().items():
        if v is None:
            continue
        prev = state.running.get(k)
        state.running[k] = v if prev is None else cfg.ema_decay * prev + (1 - cfg.ema_decay) * v
    return state, values


def train(manifest, cfg: TrainConfig, model_cfg: ModelConfig | None = None, out_dir=None, resume=None,
          on_step=None):
    """Run until ``cfg.total_iters``; returns ``(state, log_records)``.

    Log records are appended to ``out_dir/train_log.jsonl`` when ``out_dir``
    is given; checkpoints go to ``out_dir/checkpoints/step_XXXXXX``.
    """
    cfg.validate()
    if model_cfg is None:
        h, w = manifest.image_size
        model_cfg = ModelConfig(height=h, width=w, num_classes=len(manifest.train_labels()))
    state = load_checkpoint(resume, cfg) if resume is not None else init_state(model_cfg, cfg)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.jsonl", "a" if resume is not None else "w")
    records = []
    try:
        while state.step < cfg.total_iters:
            t0 = time.perf_counter()
            batch = sample_batch(manifest, cfg.batch_size, state.rng, cfg.num_instances)
            _, values = train_step(state, batch, cfg)
            rec = {"step": state.step, **values.to_dict(),
                   "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
            records.append(rec)
            if log_file is not None:
                log_file.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(state, rec)
            if out_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(state, out_dir / "checkpoints" / f"step_{state.step:06d}")
    finally:
        if log_file is not None:
            log_file.close()
    return state, records


def _state_arrays(module: torch.nn.Module) -> dict:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _optim_arrays(opt: torch.optim.Optimizer) -> dict:
    out = {}
    params = [p for g in opt.param_groups for p in g["params"]]
    for i, p in enumerate(params):
        for k, v in opt.state.get(p, {}).items():
            out[f"{i}.{k}"] = torch.as_tensor(v).detach().cpu().numpy()
    return out


def save_checkpoint(state: TrainState, path) -> Path:
    """Write a checkpoint directory atomically; a failed write leaves nothing behind."""
    path = Path(path)
    tmp = path.with_name(f".tmp-{path.name}")
    cfg = state.config
    try:
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        meta = {
            "schema_version": CHECKPOINT_SCHEMA,
            "step": state.step,
            "config_hash": cfg.hash(state.bundle.config),
            "train_config": cfg.to_dict(),
            "model_config": state.bundle.config.to_dict(),
            "rng": {"numpy": state.rng.bit_generator.state, "torch": torch.get_rng_state().tolist()},
            "running": state.running,
            "networks": {n: f"{n}.bin" for n in NETWORKS},
        }
        for n in NETWORKS:
            archive.save(tmp / f"{n}.bin", _state_arrays(state.bundle.group(n)))
            archive.save(tmp / f"{n}.optim.bin", _optim_arrays(state.optimizers[n]))
        (tmp / "checkpoint.json").write_text(json.dumps(meta, indent=1))
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except OSError as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc
    return path


def load_bundle(path) -> ModelBundle:
    """Network parameters only (for evaluation)."""
    path = Path(path)
    meta = _read_meta(path)
    bundle = ModelBundle(ModelConfig.from_dict(meta["model_config"]))
    _load_networks(bundle, path)
    bundle.eval()
    return bundle


def _read_meta(path: Path) -> dict:
    f = path / "checkpoint.json"
    if not f.is_file():
        raise CheckpointError(f"missing checkpoint.json in {path}")
    meta = json.loads(f.read_text())
    if meta.get("schema_version") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"unsupported checkpoint schema {meta.get('schema_version')!r}")
    return meta


def _load_networks(bundle: ModelBundle, path: Path) -> None:
    for n in NETWORKS:
        f = path / f"{n}.bin"
        if not f.is_file():
            raise CheckpointError(f"missing parameter archive {f}")
        arrays = archive.load(f)
        bundle.group(n).load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})


def load_checkpoint(path, cfg: TrainConfig | None = None) -> TrainState:
    """Restore a full training state. ``cfg`` (if given) must hash like the saved one."""
    path = Path(path)
    meta = _read_meta(path)
    saved_cfg = TrainConfig.from_dict(meta["train_config"])
    model_cfg = ModelConfig.from_dict(meta["model_config"])
    if cfg is None:
        cfg = saved_cfg
    elif cfg.hash(model_cfg) != meta["config_hash"]:
        raise CheckpointError("checkpoint was written with a different configuration "
                              f"(hash {meta['config_hash']} vs {cfg.hash(model_cfg)})")
    bundle = ModelBundle(model_cfg)
    _load_networks(bundle, path)
    optimizers = _make_optimizers(bundle, cfg)
    for n, opt in optimizers.items():
        arrays = archive.load(path / f"{n}.optim.bin")
        params = [p for g in opt.param_groups for p in g["params"]]
        for key, arr in arrays.items():
            i, k = key.split(".", 1)
            opt.state[params[int(i)]][k] = torch.from_numpy(arr.copy())
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]["numpy"]
    torch.set_rng_state(torch.tensor(meta["rng"]["torch"], dtype=torch.uint8))
    return TrainState(step=int(meta["step"]), bundle=bundle, optimizers=optimizers, rng=rng,
                      running=dict(meta["running"]), config=cfg)
