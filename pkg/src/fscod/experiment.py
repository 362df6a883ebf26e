"""Experiment stages: dataset generation, training, evaluation.

Each stage writes into a run directory and records the relevant config
hash, and each later stage refuses inputs whose hash does not match the
config it was handed:

    out/
      dataset/   train.fscd, val.fscd, manifest.json
      params/    {baseline,coop}_c{N}.{extractor,detector}.fsnn,
                 loss_log.csv, manifest.json
      eval/      detections.jsonl  plus everything report.py derives

Evaluation replays each validation frame end to end: the cooperating
vehicle's features are byte-encoded, pushed through the channel model,
decoded, and only then fused, so the scored pipeline is the one that
would run over a real link.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from . import dataset_io, report, transport
from .config import ConfigError, ExperimentConfig
from .evaluate import decode, nms
from .geometry import project_bev, rotate_to_global
from .nn import NonFiniteError, load_params_into, save_params
from .pipeline import (
    DIHEDRAL_COUNT,
    FsCodModel,
    Trainer,
    TrainingSample,
    build_loss_targets,
    dihedral_box,
    dihedral_sample,
)
from .sim import SceneInfeasibleError, generate_scene, simulate_lidar
from .transport import ChannelModel, Delivered

log = logging.getLogger("fscod")


class RuntimeAbortError(RuntimeError):
    """A stage cannot continue: diverged training, impossible scene."""


def _seed_int(*words: int) -> int:
    return int(np.random.SeedSequence(list(words)).generate_state(1, np.uint64)[0])


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _load_json(path: Path, what: str) -> dict:
    if not path.exists():
        raise ConfigError(f"{what} not found at {path}; run the earlier stage first")
    return json.loads(path.read_text())


# dataset


def _generate_frame(cfg: ExperimentConfig, split: int, index: int) -> dataset_io.SceneRecord:
    params = cfg.scene_params()
    spec = cfg.lidar_spec()
    last_err: Exception | None = None
    for attempt in range(64):
        seed = _seed_int(cfg.seed, split, index, attempt)
        try:
            scene = generate_scene(params, seed)
        except SceneInfeasibleError as e:
            last_err = e
            continue
        ego = simulate_lidar(scene, scene.ego_pose, spec)
        coop = simulate_lidar(scene, scene.coop_pose, spec)
        return dataset_io.SceneRecord(scene=scene, ego_cloud=ego, coop_cloud=coop)
    raise RuntimeAbortError(
        f"could not generate a feasible scene for split {split} frame {index}: {last_err}"
    )


def generate_dataset(cfg: ExperimentConfig, out_dir: Path) -> dict:
    ds_dir = Path(out_dir) / "dataset"
    ds_dir.mkdir(parents=True, exist_ok=True)
    for split, name, count in ((0, "train", cfg.train_frames), (1, "val", cfg.val_frames)):
        records = []
        for i in range(count):
            records.append(_generate_frame(cfg, split, i))
            if (i + 1) % 100 == 0:
                log.info("%s: %d/%d frames", name, i + 1, count)
        dataset_io.write_dataset(records, ds_dir / f"{name}.fscd")
    manifest = {
        "data_hash": cfg.data_hash(),
        "preset": cfg.preset,
        "train_frames": cfg.train_frames,
        "val_frames": cfg.val_frames,
        "train_file": "train.fscd",
        "val_file": "val.fscd",
    }
    _write_json(ds_dir / "manifest.json", manifest)
    return manifest


def _check_data_hash(cfg: ExperimentConfig, out_dir: Path) -> dict:
    manifest = _load_json(Path(out_dir) / "dataset" / "manifest.json", "dataset manifest")
    if manifest.get("data_hash") != cfg.data_hash():
        raise ConfigError(
            f"dataset at {out_dir} was generated with data hash "
            f"{manifest.get('data_hash')}, config says {cfg.data_hash()}"
        )
    return manifest


def _load_split(cfg: ExperimentConfig, out_dir: Path, name: str) -> list:
    path = Path(out_dir) / "dataset" / f"{name}.fscd"
    if not path.exists():
        raise ConfigError(f"dataset split {name} not found at {path}")
    return dataset_io.read_dataset(path)


# training


def _ego_frame_targets(scene) -> list:
    ex, ey = scene.ego_pose.x, scene.ego_pose.y
    return [t.box.translated(-ex, -ey) for t in scene.targets]


def _training_samples(cfg: ExperimentConfig, records: list) -> list[TrainingSample]:
    grid = cfg.grid()
    samples = []
    for i, rec in enumerate(records):
        scene = rec.scene
        samples.append(
            TrainingSample(
                bev_ego=project_bev(rotate_to_global(rec.ego_cloud, scene.ego_pose), grid),
                bev_coop=project_bev(rotate_to_global(rec.coop_cloud, scene.coop_pose), grid),
                ego_pose=scene.ego_pose,
                coop_pose=scene.coop_pose,
                targets=_ego_frame_targets(scene),
                frame_id=i,
            )
        )
    return samples


def _param_paths(params_dir: Path, role: str, c_t: int) -> dict[str, Path]:
    stem = f"{role}_c{c_t}"
    return {
        "extractor": params_dir / f"{stem}.extractor.fsnn",
        "detector": params_dir / f"{stem}.detector.fsnn",
    }


def _train_one(
    cfg: ExperimentConfig,
    samples: list[TrainingSample],
    loss_targets: list,
    c_t: int,
    role: str,
) -> tuple[FsCodModel, list[float]]:
    pcfg = cfg.pipeline_config(c_t)
    role_idx = 0 if role == "baseline" else 1
    model = FsCodModel(pcfg, seed=_seed_int(cfg.seed, 2, c_t, role_idx))
    trainer = Trainer(model, lr=cfg.lr, momentum=cfg.momentum, optimizer=cfg.optimizer)
    order_rng = np.random.default_rng(
        np.random.SeedSequence([cfg.seed, 3, c_t, role_idx])
    )
    step = trainer.step_single if role == "baseline" else trainer.step_coop
    epoch_means = []
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(samples))
        ks = (
            order_rng.integers(0, DIHEDRAL_COUNT, size=len(order))
            if cfg.augment
            else np.zeros(len(order), dtype=int)
        )
        total = 0.0
        for j, k in zip(order, ks):
            sample = dihedral_sample(samples[j], int(k))
            try:
                total += step(sample, loss_targets[j][int(k)])
            except NonFiniteError as e:
                raise RuntimeAbortError(
                    f"training diverged: {role} c_t={c_t} epoch {epoch} "
                    f"frame {samples[j].frame_id}: {e}"
                ) from e
        mean = total / len(samples)
        epoch_means.append(mean)
        log.info("%s c_t=%d epoch %d/%d mean loss %.4f", role, c_t, epoch + 1, cfg.epochs, mean)
    return model, epoch_means


def train(cfg: ExperimentConfig, out_dir: Path) -> dict:
    out_dir = Path(out_dir)
    _check_data_hash(cfg, out_dir)
    records = _load_split(cfg, out_dir, "train")
    samples = _training_samples(cfg, records)
    pcfg0 = cfg.pipeline_config(cfg.ct[0])
    # assignment geometry is independent of c_t, so one table serves every
    # width; index [frame][symmetry], collapsed to the identity without
    # augmentation
    n_sym = DIHEDRAL_COUNT if cfg.augment else 1
    loss_targets = [
        [
            build_loss_targets([dihedral_box(b, k) for b in s.targets], pcfg0)
            for k in range(n_sym)
        ]
        for s in samples
    ]

    params_dir = out_dir / "params"
    params_dir.mkdir(parents=True, exist_ok=True)
    loss_rows = []
    models: dict[str, dict] = {}
    for c_t in cfg.ct:
        entry = {}
        for role in ("baseline", "coop"):
            model, means = _train_one(cfg, samples, loss_targets, c_t, role)
            paths = _param_paths(params_dir, role, c_t)
            save_params(model.extractor, paths["extractor"])
            save_params(model.detector, paths["detector"])
            entry[role] = {k: p.name for k, p in paths.items()}
            loss_rows.extend(
                (role, c_t, e, m) for e, m in enumerate(means)
            )
        models[str(c_t)] = entry

    with open(params_dir / "loss_log.csv", "w") as fh:
        fh.write(f"# train_hash={cfg.train_hash()}\n")
        fh.write("model,c_t,epoch,mean_loss\n")
        for role, c_t, epoch, mean in loss_rows:
            fh.write(f"{role},{c_t},{epoch},{mean:.6f}\n")

    manifest = {
        "data_hash": cfg.data_hash(),
        "train_hash": cfg.train_hash(),
        "models": models,
        "epochs": cfg.epochs,
        "optimizer": cfg.optimizer,
        "lr": cfg.lr,
    }
    _write_json(params_dir / "manifest.json", manifest)
    return manifest


def load_model(cfg: ExperimentConfig, out_dir: Path, role: str, c_t: int) -> FsCodModel:
    """Rebuild a trained model; parameter manifests must agree with the
    architecture the config describes."""
    params_dir = Path(out_dir) / "params"
    manifest = _load_json(params_dir / "manifest.json", "training manifest")
    if manifest.get("train_hash") != cfg.train_hash():
        raise ConfigError(
            f"parameters at {params_dir} were trained with hash "
            f"{manifest.get('train_hash')}, config says {cfg.train_hash()}"
        )
    entry = manifest.get("models", {}).get(str(c_t), {}).get(role)
    if entry is None:
        raise ConfigError(f"no trained {role} model for c_t={c_t} in {params_dir}")
    model = FsCodModel(cfg.pipeline_config(c_t), seed=0)
    load_params_into(model.extractor, params_dir / entry["extractor"])
    load_params_into(model.detector, params_dir / entry["detector"])
    return model


# evaluation


def _det_row(det) -> dict:
    b = det.box
    return {
        "cx": b.cx, "cy": b.cy, "w": b.w, "l": b.l, "yaw": b.yaw,
        "conf": det.confidence,
    }


def evaluate_run(cfg: ExperimentConfig, out_dir: Path) -> Path:
    """Score the validation split and persist every raw detection.

    Per frame and per channel width: the single-view model runs on each
    vehicle's own BEV, and the cooperative model runs with the partner
    features round-tripped through the byte channel. All boxes are stored
    in the ego frame. Reports are derived from the persisted file alone.
    """
    out_dir = Path(out_dir)
    _check_data_hash(cfg, out_dir)
    records = _load_split(cfg, out_dir, "val")
    grid = cfg.grid()
    channel = ChannelModel(
        drop_probability=cfg.drop_probability,
        latency_ms=cfg.latency_ms,
        jitter_ms=cfg.jitter_ms,
    )
    channel_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))

    models = {
        c_t: {role: load_model(cfg, out_dir, role, c_t) for role in ("baseline", "coop")}
        for c_t in cfg.ct
    }

    eval_dir = out_dir / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    header = {
        "kind": "header",
        "config_hash": cfg.config_hash(),
        "preset": cfg.preset,
        "ct": list(cfg.ct),
        "cells": grid.size // cfg.s,
        "frames": len(records),
        "range_m": cfg.extent_m,
        "conf_threshold": cfg.conf_threshold,
        "iou_threshold": cfg.iou_threshold,
        "nms_iou": cfg.nms_iou,
        "iou_sweep": list(cfg.iou_sweep),
        "message_dtype": cfg.message_dtype,
        "drop_probability": cfg.drop_probability,
    }
    lines.append(json.dumps(header, sort_keys=True))

    for i, rec in enumerate(records):
        scene = rec.scene
        ego, coop = scene.ego_pose, scene.coop_pose
        bev_ego = project_bev(rotate_to_global(rec.ego_cloud, ego), grid)
        bev_coop = project_bev(rotate_to_global(rec.coop_cloud, coop), grid)

        gt_rows = []
        for t_idx, t in enumerate(scene.targets):
            b = t.box.translated(-ego.x, -ego.y)
            gt_rows.append({
                "cx": b.cx, "cy": b.cy, "w": b.w, "l": b.l, "yaw": b.yaw,
                "in_range": bool(np.hypot(b.cx, b.cy) <= cfg.extent_m),
                "occluded": t_idx == scene.occluded_target,
            })

        runs: dict[str, list] = {}
        transport_rows: dict[str, dict] = {}
        dx, dy = coop.x - ego.x, coop.y - ego.y
        for c_t in cfg.ct:
            base = models[c_t]["baseline"]
            dets_ego = nms(decode(base.run_baseline(bev_ego, ego), cfg.conf_threshold), cfg.nms_iou)
            dets_coop = nms(decode(base.run_baseline(bev_coop, coop), cfg.conf_threshold), cfg.nms_iou)
            runs[f"baseline_c{c_t}_ego"] = [_det_row(d) for d in dets_ego]
            runs[f"baseline_c{c_t}_coop"] = [
                {**_det_row(d), "cx": d.box.cx + dx, "cy": d.box.cy + dy} for d in dets_coop
            ]

            fscod = models[c_t]["coop"]
            fmap = fscod.extract(bev_coop, coop)
            wire = transport.encode(fmap, frame_id=i, sender_id=1, dtype=cfg.message_dtype)
            outcome = transport.simulate_channel(wire, channel, rng=channel_rng)
            if isinstance(outcome, Delivered):
                message = transport.decode(outcome.data)
                trow = {"bytes": len(wire), "dropped": False,
                        "latency_ms": round(outcome.latency_ms, 3)}
            else:
                message = None
                trow = {"bytes": len(wire), "dropped": True, "latency_ms": None}
            dg = fscod.run_coop(bev_ego, ego, message)
            runs[f"coop_c{c_t}"] = [
                _det_row(d) for d in nms(decode(dg, cfg.conf_threshold), cfg.nms_iou)
            ]
            transport_rows[f"coop_c{c_t}"] = trow

        lines.append(json.dumps(
            {"kind": "frame", "frame": i, "gt": gt_rows, "runs": runs,
             "transport": transport_rows},
            sort_keys=True,
        ))
        if (i + 1) % 25 == 0:
            log.info("eval: %d/%d frames", i + 1, len(records))

    det_path = eval_dir / "detections.jsonl"
    det_path.write_text("\n".join(lines) + "\n")
    report.generate(eval_dir)
    return det_path
