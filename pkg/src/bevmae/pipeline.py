"""Pre-training loop, checkpointing, encoder export and the mask-ratio sweep."""
from __future__ import annotations

import glob
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .config import RunConfig
from .decoder import DecoderConfig, decode, init_decoder_params, predict_at
from .encoder import (EncoderConfig, bind, build_encoder_plans, init_encoder_params, run_encoder,
                      substitute_token)
from .geometry import GridSpec, Occupancy, PointCloud, SparseTensor, build_bev_occupancy, voxelize_mean
from .io import Checkpoint, export_encoder, load_bin_cloud
from .losses import scene_targets, targets_for, total_loss
from .masking import MaskPlan, plan_mask, visible_ordinals
from .optim import AdamState, OneCycle, adam_step
from .sparse import bev_flatten
from .synthetic import generate_scene

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


def derive_seed(*words: int) -> int:
    """64-bit seed from a tuple of integers (run seed, step, slot, ...)."""
    return int(np.random.SeedSequence([int(w) % (1 << 63) for w in words]).generate_state(1, np.uint64)[0])


@dataclass
class Scene:
    """A cloud plus everything about it that does not depend on the mask."""

    cloud: PointCloud
    occupancy: Occupancy
    full: SparseTensor
    plans: list
    targets: dict           # grid -> (normalized offsets, density)


def prepare_scene(cloud: PointCloud, spec: GridSpec, enc: EncoderConfig) -> Scene:
    occ = build_bev_occupancy(cloud, spec)
    if len(occ) == 0:
        raise ValueError(f"scene {cloud.frame_id!r} has no points inside the grid")
    full = voxelize_mean(cloud, spec)
    return Scene(cloud, occ, full, build_encoder_plans(full.sites, full.shape[:3], enc),
                 scene_targets(cloud, occ, spec))


class BevMae:
    """Parameters plus the architecture needed to run them."""

    def __init__(self, spec: GridSpec, enc: EncoderConfig, dec: DecoderConfig, params: dict,
                 lambda_d: float = 1.0, beta: float = 1.0, density_scale: float = 1e-3):
        enc.validate(spec)
        self.spec, self.enc, self.dec = spec, enc, dec
        self.params = params
        self.lambda_d, self.beta, self.density_scale = lambda_d, beta, density_scale

    @classmethod
    def initialize(cls, cfg: RunConfig, seed: Optional[int] = None) -> "BevMae":
        spec, enc, dec = cfg.grid_spec(), cfg.encoder_config(), cfg.decoder_config()
        rng = np.random.default_rng(derive_seed(cfg.seed if seed is None else seed, 0xB3A))
        params = init_encoder_params(enc, rng, cfg.token_std)
        params.update(init_decoder_params(dec, rng))
        dtype = np.dtype(cfg.dtype)
        params = {k: v.astype(dtype) for k, v in params.items()}
        return cls(spec, enc, dec, params, cfg.lambda_d, cfg.smooth_l1_beta, cfg.density_scale)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def descriptor(self) -> dict:
        return {
            "kind": "pretrain",
            "grid": self.spec.to_dict(),
            "encoder": self.enc.to_dict(),
            "decoder": self.dec.to_dict(),
            "losses": {"lambda_d": self.lambda_d, "beta": self.beta, "density_scale": self.density_scale},
            "dtype": str(self.dtype),
        }

    def scene_loss(self, tape: Tape, p: dict, scene: Scene, plan: MaskPlan):
        """Build the graph for one masked scene; returns (total, chamfer, density)."""
        visible = voxelize_mean(scene.cloud.subset(visible_ordinals(scene.occupancy, plan)), self.spec)
        x = substitute_token(scene.full, visible, plan, p["token"], self.spec)
        bev = bev_flatten(run_encoder(x, p, self.enc, scene.plans)[-1])
        hidden = decode(bev, p, self.dec)
        preds = predict_at(hidden, plan, p, self.dec.num_points)
        targets = targets_for(plan.masked, scene.targets)
        return total_loss(preds, targets, self.lambda_d, self.beta, self.density_scale)

    def batch_loss(self, scenes: list, plans: list, need_grad: bool = True, track_branches: bool = False):
        """Mean losses over a batch.

        Returns ``(values, grads, signature)``; ``grads`` is None unless
        ``need_grad`` and ``signature`` is None unless ``track_branches``.
        """
        tape = Tape(self.dtype, track_branches)
        p = bind(tape, self.params)
        parts = [self.scene_loss(tape, p, s, m) for s, m in zip(scenes, plans)]
        tot = ad.mean([x[0] for x in parts])
        values = {
            "loss_total": float(tot.data),
            "loss_chamfer": math.fsum(float(x[1].data) for x in parts) / len(parts),
            "loss_density": math.fsum(float(x[2].data) for x in parts) / len(parts),
        }
        grads = tape.backward(tot) if need_grad else None
        return values, grads, ad.branch_signature(tape) if track_branches else None


# ---------------------------------------------------------------- checkpoints

def make_checkpoint(model: BevMae, step: int, opt: Optional[AdamState] = None,
                    schedule: Optional[OneCycle] = None) -> Checkpoint:
    desc = model.descriptor()
    desc["step"] = int(step)
    tensors = {k: np.array(v) for k, v in model.params.items()}
    if opt is not None:
        desc["optimizer"] = {"adam_step": opt.step, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                             "schedule": schedule.to_dict() if schedule else None}
        for k in opt.m:
            tensors[f"opt.m/{k}"] = np.array(opt.m[k])
            tensors[f"opt.v/{k}"] = np.array(opt.v[k])
    return Checkpoint(desc, tensors)


def model_from_checkpoint(ckpt: Checkpoint) -> BevMae:
    d = ckpt.descriptor
    spec = GridSpec.from_dict(d["grid"])
    enc = EncoderConfig.from_dict(d["encoder"])
    dec = DecoderConfig.from_dict(d["decoder"]) if "decoder" in d else None
    losses = d.get("losses", {})
    params = {k: v.copy() for k, v in ckpt.tensors.items() if not k.startswith("opt.")}
    model = BevMae.__new__(BevMae)
    model.spec, model.enc, model.dec, model.params = spec, enc, dec, params
    model.lambda_d = losses.get("lambda_d", 1.0)
    model.beta = losses.get("beta", 1.0)
    model.density_scale = losses.get("density_scale", 1e-3)
    return model


def encoder_forward(params: dict, enc: EncoderConfig, spec: GridSpec, cloud: PointCloud) -> np.ndarray:
    """Encoder BEV map on an unmasked cloud (as a fine-tuning detector would see it)."""
    x = voxelize_mean(cloud, spec)
    return bev_flatten(run_encoder(x, params, enc)[-1])


# ---------------------------------------------------------------- data

def load_scenes(cfg: RunConfig, spec: GridSpec, enc: EncoderConfig) -> list[Scene]:
    if cfg.data == "synthetic":
        clouds = [generate_scene(cfg.scene_config(derive_seed(cfg.seed, 0x5CE, k)), spec)
                  for k in range(cfg.n_scenes)]
    else:
        paths = sorted(glob.glob(cfg.data))
        if not paths:
            raise FileNotFoundError(f"no scans match {cfg.data!r}")
        clouds = [load_bin_cloud(p) for p in paths]
    return [prepare_scene(c, spec, enc) for c in clouds]


def batch_plans(cfg: RunConfig, scenes: list, step: int):
    """Scenes and fresh mask plans for one step, fully determined by (seed, step)."""
    rng = np.random.default_rng(derive_seed(cfg.seed, 0xBA7C, step))
    picks = rng.choice(len(scenes), size=cfg.batch_size, replace=len(scenes) < cfg.batch_size)
    chosen = [scenes[int(k)] for k in picks]
    plans = [plan_mask(s.occupancy, cfg.mask_ratio, derive_seed(cfg.seed, 0x3A5C, step, b))
             for b, s in enumerate(chosen)]
    return chosen, plans


# ---------------------------------------------------------------- training

@dataclass
class RunResult:
    checkpoint: Checkpoint
    metrics: list
    model: BevMae


def pretrain(cfg: RunConfig, scenes: Optional[list] = None,
             on_metrics: Optional[Callable[[dict], None]] = None) -> RunResult:
    """Run pre-training; writes metrics and checkpoints under ``cfg.out_dir`` if set."""
    cfg.validate()
    spec, enc = cfg.grid_spec(), cfg.encoder_config()
    model = BevMae.initialize(cfg)
    scenes = scenes if scenes is not None else load_scenes(cfg, spec, enc)
    schedule = OneCycle(cfg.max_lr, max(cfg.steps, 1), cfg.pct_start, cfg.div_factor, cfg.final_div_factor)
    opt = AdamState()
    out = Path(cfg.out_dir) if cfg.out_dir else None
    metrics_fh = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "run_config.txt").write_text(cfg.to_text(), encoding="utf-8")
        (out / "run_meta.json").write_text(json.dumps(
            {"config": cfg.to_dict(), "schedule": schedule.to_dict(), "adam": {"beta1": opt.beta1,
             "beta2": opt.beta2, "eps": opt.eps}}, indent=2, sort_keys=True), encoding="utf-8")
        metrics_fh = open(out / "metrics.jsonl", "w", encoding="utf-8")

    def save(step):
        ckpt = make_checkpoint(model, step, opt, schedule)
        if out:
            ckpt.save(out / f"ckpt_step{step:06d}.bvma")
        return ckpt

    metrics = []
    ckpt = save(0)
    try:
        for step in range(cfg.steps):
            chosen, plans = batch_plans(cfg, scenes, step)
            values, grads, _ = model.batch_loss(chosen, plans)
            if not all(math.isfinite(v) for v in values.values()):
                raise TrainingAborted(f"non-finite loss at step {step}: {values}; last good checkpoint "
                                      f"is step {ckpt.step}")
            lr = schedule(step)
            record = {"step": step, **values, "lr": lr}
            metrics.append(record)
            if metrics_fh:
                metrics_fh.write(json.dumps(record) + "\n")
                metrics_fh.flush()
            if on_metrics:
                on_metrics(record)
            adam_step(opt, model.params, grads, lr)
            done = step + 1
            if done % cfg.checkpoint_every == 0 or done == cfg.steps:
                ckpt = save(done)
    finally:
        if metrics_fh:
            metrics_fh.close()
    if out:
        ckpt.save(out / "final.bvma")
    return RunResult(ckpt, metrics, model)


def tail_mean(metrics: list, key: str, n: int = 10) -> float:
    vals = [m[key] for m in metrics[-n:]]
    return math.fsum(vals) / len(vals) if vals else float("nan")


def sweep_mask_ratio(cfg: RunConfig, ratios, scenes: Optional[list] = None, tail: int = 10) -> list[dict]:
    """One pre-training run per ratio with shared seeds and data."""
    rows = []
    spec, enc = cfg.grid_spec(), cfg.encoder_config()
    scenes = scenes if scenes is not None else load_scenes(cfg, spec, enc)
    for r in ratios:
        if not 0 < r < 1:
            raise ValueError(f"mask ratio {r} outside (0, 1)")
        sub = cfg.replace(mask_ratio=float(r), out_dir=str(Path(cfg.out_dir) / f"ratio_{r:.2f}") if cfg.out_dir else "")
        res = pretrain(sub, scenes)
        rows.append({
            "mask_ratio": float(r),
            "steps": len(res.metrics),
            "loss_total": tail_mean(res.metrics, "loss_total", tail),
            "loss_chamfer": tail_mean(res.metrics, "loss_chamfer", tail),
            "loss_density": tail_mean(res.metrics, "loss_density", tail),
        })
    if cfg.out_dir:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        (Path(cfg.out_dir) / "sweep.json").write_text(json.dumps(rows, indent=2), encoding="utf-8")
    return rows


def format_sweep_table(rows: list) -> str:
    head = f"{'mask_ratio':>10}  {'steps':>5}  {'loss_total':>12}  {'loss_chamfer':>12}  {'loss_density':>12}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['mask_ratio']:>10.2f}  {r['steps']:>5d}  {r['loss_total']:>12.6f}  "
                     f"{r['loss_chamfer']:>12.6f}  {r['loss_density']:>12.6f}")
    return "\n".join(lines)


def export_encoder_file(path, out_path=None) -> Path:
    src = Path(path)
    out_path = Path(out_path) if out_path else src.with_name(src.stem + ".encoder.bvma")
    return export_encoder(Checkpoint.load(src)).save(out_path)


# ---------------------------------------------------------------- gradient check

def gradcheck_scene(n_points: int = 200, seed: int = 0, spec: Optional[GridSpec] = None) -> PointCloud:
    """Small scene: ``n_points`` drawn from a synthetic scene (f64 coordinates)."""
    from .synthetic import SceneConfig

    spec = spec or GridSpec()
    cloud = generate_scene(SceneConfig(points_budget=4000, seed=seed), spec)
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(cloud), size=min(n_points, len(cloud)), replace=False))
    return cloud.subset(keep)


def pipeline_grad_check(cfg: Optional[RunConfig] = None, n_points: int = 200, samples_per_param: int = 12,
                        h: float = 1e-4, seed: int = 0):
    """Central-difference check of every parameter tensor on one masked scene (f64)."""
    cfg = (cfg or RunConfig()).replace(dtype="float64", seed=seed)
    model = BevMae.initialize(cfg)
    # Move to a generic point: zero biases and a tiny token put many
    # pre-activations within h of a ReLU kink, so probes would keep crossing.
    rng = np.random.default_rng(seed + 1)
    for k, v in model.params.items():
        if k.endswith("bias"):
            v[...] = rng.normal(0.0, 0.2, v.shape)
    model.params["token"][...] = rng.normal(0.0, 1.0, model.params["token"].shape)
    scene = prepare_scene(gradcheck_scene(n_points, seed, model.spec), model.spec, model.enc)
    plan = plan_mask(scene.occupancy, cfg.mask_ratio, seed)

    def f(params, need_grad):
        model.params = params
        values, grads, sig = model.batch_loss([scene], [plan], need_grad, track_branches=True)
        return values["loss_total"], grads, sig

    params = model.params
    return ad.grad_check(f, params, h=h, samples_per_param=samples_per_param, seed=seed)
