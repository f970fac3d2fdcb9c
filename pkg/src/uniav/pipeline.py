"""Training loop, evaluation harness, checkpointing, and ablation grids.

One model instance is trained end to end on the enabled objective subset and
then evaluated on localization, separation, and recognition from the same
checkpoint. Everything is deterministic under a fixed seed in single-worker
CPU mode: batch order, mixing partners, and the validation split all come
from named seed streams, so a run can be resumed or replayed bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import shutil
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import (
    DataConfig,
    Manifest,
    load_gt_mask,
    load_manifest_resolved,
    load_sample,
    random_derangement,
)
from .dsp import (
    ComplexSpectrogram,
    DspConfig,
    SoftMask,
    Waveform,
    apply_mask,
    stft,
    target_binary_mask,
)
from .errors import (
    CheckpointError,
    ConfigurationError,
    DataError,
    EvaluationTaskError,
    InputError,
    TrainingDivergenceError,
)
from .metrics import (
    MetricsReport,
    f1_from_percent,
    localization_heatmap,
    nn_accuracy,
    piap,
    precision_f1,
    retrieval_accuracy,
    sdr_sar,
    write_per_sample_csv,
)
from .model import (
    TASK_REQUIRED_PREFIXES,
    ModelConfig,
    UnifiedAVModel,
    build_model,
)
from .objectives import (
    contrastive_loss,
    mva_loss,
    score_matrix,
    separation_loss,
    total_loss,
)

OBJECTIVES = ("cl", "mas", "mva")
EVAL_TASKS = ("loc", "sep", "recog")
CHECKPOINT_FORMAT = 1

# named sub-streams of the run seed, so consumers can't perturb each other
_STREAM_SPLIT = 11
_STREAM_ORDER = 13
_STREAM_PARTNER = 17
_STREAM_VAL = 19
_SEP_PAIR_SEED = 7919  # evaluation pairing is fixed, independent of train seed

# fields that legitimately differ between two otherwise identical runs
VOLATILE_LOG_FIELDS = ("time", "wall_clock_s")


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; model/data sub-configs ride along so a single
    object fully describes a run."""

    objectives: tuple = OBJECTIVES
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 1e-4
    alpha: float = 0.5
    seed: int = 0
    device: str | None = None    # None: UNIAV_DEVICE env var, then cpu
    val_fraction: float = 0.1
    val_max_records: int = 64    # per-epoch snapshots stay cheap on CPU
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        objs = tuple(self.objectives)
        if not objs:
            raise ConfigurationError("at least one objective must be enabled")
        unknown = [o for o in objs if o not in OBJECTIVES]
        if unknown or len(set(objs)) != len(objs):
            raise ConfigurationError(
                f"objectives must be a subset of {OBJECTIVES} without repeats, got {objs}")
        object.__setattr__(self, "objectives", tuple(o for o in OBJECTIVES if o in objs))
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha {self.alpha} outside [0, 1]")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 (mixing needs a partner)")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigurationError("val_fraction must be in [0, 1)")

    def enabled(self, name: str) -> bool:
        return name in self.objectives


def train_config_to_dict(cfg: TrainConfig) -> dict:
    """JSON-safe nested dict (tuples become lists)."""
    return json.loads(json.dumps(asdict(cfg)))


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    model = ModelConfig(**d.pop("model", {}))
    data_d = dict(d.pop("data", {}))
    dsp_d = data_d.pop("dsp", {})
    data_d = {k: tuple(v) if isinstance(v, list) else v for k, v in data_d.items()}
    data = DataConfig(dsp=DspConfig(**dsp_d), **data_d)
    if "objectives" in d:
        d["objectives"] = tuple(d["objectives"])
    return TrainConfig(model=model, data=data, **d)


def _resolve_device(hint: str | None) -> torch.device:
    name = hint if hint else os.environ.get("UNIAV_DEVICE", "cpu")
    if name.startswith("cuda") and not torch.cuda.is_available():
        raise ConfigurationError(f"device {name!r} requested but CUDA is unavailable")
    return torch.device(name)


def manifest_hash(path) -> str:
    """Content hash of the manifest file, in git blob form."""
    data = Path(path).read_bytes()
    h = hashlib.sha1(b"blob %d\x00" % len(data))
    h.update(data)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# run log

class RunLog:
    """Append-only JSON-lines log with a monotone step counter.

    Every record carries a wall-clock timestamp; canonical() strips the
    volatile fields so two identical seeded runs compare equal.
    """

    def __init__(self, path, records=None):
        self.path = Path(path)
        self.records = list(records or [])

    @classmethod
    def create(cls, path) -> "RunLog":
        log = cls(path)
        log.path.write_text("")
        return log

    @classmethod
    def read(cls, path) -> "RunLog":
        path = Path(path)
        if not path.exists():
            raise InputError(f"run log not found: {path}")
        records = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise InputError(f"run log line {lineno} is not valid JSON: {exc}")
        steps = [r.get("step") for r in records]
        if any(not isinstance(s, int) for s in steps) or steps != sorted(set(steps)):
            raise InputError(f"run log {path} has a non-monotone step counter")
        return cls(path, records)

    @classmethod
    def open_resume(cls, path) -> "RunLog":
        path = Path(path)
        return cls.read(path) if path.exists() else cls.create(path)

    def append(self, kind: str, **fields) -> dict:
        step = self.records[-1]["step"] + 1 if self.records else 0
        rec = {"step": step, "time": time.time(), "kind": kind, **fields}
        self.records.append(rec)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec

    def of_kind(self, kind: str) -> list:
        return [r for r in self.records if r.get("kind") == kind]

    def canonical(self) -> list:
        return [{k: v for k, v in r.items() if k not in VOLATILE_LOG_FIELDS}
                for r in self.records]


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model: UnifiedAVModel, train_cfg: TrainConfig | None, *,
                    epoch: int, step: int, optimizer=None, val_metric=None,
                    extra: dict | None = None) -> Path:
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "model_config": asdict(model.cfg),
        "train_config": train_config_to_dict(train_cfg) if train_cfg else None,
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "step": step,
        "val_metric": val_metric,
        "torch_rng": torch.get_rng_state(),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)
    return Path(path)


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}")
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"{path} is not a format-{CHECKPOINT_FORMAT} checkpoint")
    for key in ("model_config", "state_dict", "epoch"):
        if key not in payload:
            raise CheckpointError(f"checkpoint {path} lacks required key {key!r}")
    return payload


def strip_parameters(checkpoint_in, checkpoint_out, prefixes) -> Path:
    """Copy a checkpoint with all parameters under the given key prefixes
    removed. Surgery tool for studying partial checkpoints; evaluation must
    refuse tasks whose parameters are gone."""
    payload = load_checkpoint(checkpoint_in)
    prefixes = tuple(prefixes)
    payload["state_dict"] = {
        k: v for k, v in payload["state_dict"].items() if not k.startswith(prefixes)}
    torch.save(payload, checkpoint_out)
    return Path(checkpoint_out)


# ---------------------------------------------------------------------------
# feature cache

class _FeatureCache:
    """Per-record tensors loaded once and reused every epoch.

    Images are stored as normalized float32 CHW (pixel mixup commutes with
    the per-channel affine normalization, so mixing normalized tensors is
    exact). Audio is stored as the complex64 STFT plus its model-sized
    log-magnitude grid; mixtures are reassembled per batch via STFT
    linearity instead of re-transforming summed waveforms.
    """

    def __init__(self, manifest: Manifest, data_cfg: DataConfig, model_cfg: ModelConfig,
                 mask_ids: set | None = None, keep_waves: bool = False):
        eval_cfg = replace(data_cfg, crop="center")
        n = len(manifest)
        self.ids = [r.id for r in manifest.records]
        self.labels = (np.array([r.label for r in manifest.records], dtype=np.int64)
                       if manifest.labeled else None)
        self.dsp = eval_cfg.dsp
        self.log_eps = eval_cfg.dsp.log_epsilon

        images, stfts, logmags, waves = [], [], [], []
        self.gt_masks = {}
        for i, rec in enumerate(manifest.records):
            img, wave = load_sample(rec, eval_cfg)
            images.append(torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))))
            spec = stft(wave, eval_cfg.dsp)
            stfts.append(spec.values.astype(np.complex64))
            logmags.append(np.log(np.abs(spec.values) + self.log_eps).astype(np.float32))
            if keep_waves:
                waves.append(wave.samples)
            if mask_ids is None or rec.id in mask_ids:
                if rec.gt_mask_path is not None:
                    self.gt_masks[i] = load_gt_mask(rec, eval_cfg.image_size)
        self.images = torch.stack(images)
        self.stfts = np.stack(stfts)
        self.waves = np.stack(waves) if keep_waves else None

        s = model_cfg.audio_input_size
        grids = torch.from_numpy(np.stack(logmags))[:, None]
        chunks = [F.interpolate(grids[i:i + 256], size=(s, s), mode="bilinear",
                                align_corners=False)
                  for i in range(0, n, 256)]
        self.logmags = torch.cat(chunks)

    def __len__(self):
        return len(self.ids)

    def batch(self, idx: np.ndarray, partner: np.ndarray, cfg: TrainConfig) -> dict:
        """Assemble the tensors needed by the enabled objectives only."""
        obj = cfg.objectives
        ti = torch.from_numpy(np.ascontiguousarray(idx)).long()
        tp = torch.from_numpy(np.ascontiguousarray(partner)).long()
        out = {}
        if "cl" in obj or "mas" in obj:
            out["base_images"] = self.images[ti]
        if "cl" in obj or "mva" in obj:
            out["base_logmag"] = self.logmags[ti]
        if "mva" in obj:
            out["mixed_images"] = (cfg.alpha * self.images[ti]
                                   + (1.0 - cfg.alpha) * self.images[tp])
            out["partner_logmag"] = self.logmags[tp]
        if "mas" in obj:
            s_i = self.stfts[idx]
            s_j = self.stfts[partner]
            s_mix = s_i + s_j
            logmag = np.log(np.abs(s_mix) + self.log_eps).astype(np.float32)
            grid = torch.from_numpy(logmag)[:, None]
            size = out.get("base_logmag", self.logmags).shape[-2:]
            out["mixture_logmag"] = F.interpolate(
                grid, size=size, mode="bilinear", align_corners=False)
            if self.dsp.mask_rule == "paper_strict":
                tgt = np.abs(s_i) > np.abs(s_mix)
            else:
                tgt = np.abs(s_i) >= np.abs(s_j)  # |mix - base| is exactly |s_j|
            out["target_masks"] = torch.from_numpy(tgt.astype(np.float32))
        return out


# ---------------------------------------------------------------------------
# forward pass shared by training and validation

def _forward_losses(model: UnifiedAVModel, cfg: TrainConfig, t: dict):
    """Loss bundle over one batch; disabled objectives stay exact zeros and
    their heads are never even forwarded."""
    obj = cfg.objectives
    tau = model.cfg.temperature
    cl_term, mas_term, mva_term = 0.0, 0.0, 0.0

    vis_base = (model.encode_visual(t["base_images"])
                if ("cl" in obj or "mas" in obj) else None)
    aud_base = (model.encode_audio(t["base_logmag"])
                if ("cl" in obj or "mva" in obj) else None)

    if "cl" in obj:
        grid = vis_base.grid
        b, h, w, d = grid.shape
        cells = grid.reshape(b, h * w, d)
        a_glb = F.normalize(model.heads["a_glb"](aud_base.vector), dim=-1)
        a_loc = F.normalize(model.heads["a_loc"](aud_base.vector), dim=-1)
        v_glb = F.normalize(model.heads["v_glb"](cells.amax(dim=1)), dim=-1)
        v_loc = F.normalize(model.heads["v_loc"](cells), dim=-1)
        cl_term = contrastive_loss(score_matrix(a_glb, a_loc, v_glb, v_loc, tau))

    if "mas" in obj:
        pred = model.separation_mask(t["mixture_logmag"], model.pooled_visual(vis_base))
        target = t["target_masks"]
        pred_up = F.interpolate(pred, size=target.shape[-2:], mode="bilinear",
                                align_corners=False).squeeze(1)
        mas_term = separation_loss(pred_up, target)

    if "mva" in obj:
        mixed = model.encode_visual(t["mixed_images"])
        b, h, w, d = mixed.grid.shape
        v_mva = F.normalize(model.heads["v_mva"](mixed.grid.reshape(b, h * w, d)), dim=-1)
        aud_partner = model.encode_audio(t["partner_logmag"])
        a_base = F.normalize(model.heads["a_mva"](aud_base.vector), dim=-1)
        a_partner = F.normalize(model.heads["a_mva"](aud_partner.vector), dim=-1)
        mva_term = mva_loss(v_mva, a_base, a_partner, cfg.alpha, tau)

    return total_loss(cl_term, mas_term, mva_term)


def _batch_starts(n: int, batch: int):
    return range(0, n, batch)


def _validate(model, cache: _FeatureCache, val_idx: np.ndarray, cfg: TrainConfig) -> dict:
    """Per-epoch snapshot: enabled-objective losses on the validation split,
    plus localization F1 when ground-truth masks exist."""
    if val_idx.size < 2:
        return {}
    model.eval()
    sums = {"cl": 0.0, "mas": 0.0, "mva": 0.0, "total": 0.0}
    count = 0
    with torch.no_grad():
        for batch_no, start in enumerate(_batch_starts(val_idx.size, cfg.batch_size)):
            idx = val_idx[start:start + cfg.batch_size]
            if idx.size < 2:
                continue
            rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, _STREAM_VAL, batch_no]))
            partner = idx[random_derangement(idx.size, rng)]
            bundle = _forward_losses(model, cfg, cache.batch(idx, partner, cfg))
            vals = bundle.detached()
            for k in sums:
                sums[k] += vals[k] * idx.size
            count += idx.size
    snap = {f"val_{k}": v / count for k, v in sums.items()}
    masked = [i for i in val_idx if i in cache.gt_masks]
    if masked and "cl" in cfg.objectives:
        embs = _embeddings(model, cache, np.array(masked), ("a_loc", "V_loc"),
                           cfg.batch_size)
        ps, rs = [], []
        size = cache.gt_masks[masked[0]].shape[0]
        for row, i in enumerate(masked):
            heat = localization_heatmap(embs["a_loc"][row], embs["V_loc"][row], size)
            pr = precision_f1(heat, cache.gt_masks[i])
            if pr is not None:
                ps.append(pr[0])
                rs.append(pr[1])
        if ps:
            snap["val_f1"] = f1_from_percent(float(np.mean(ps)), float(np.mean(rs)))
    model.train()
    return snap


def _embeddings(model, cache: _FeatureCache, idx: np.ndarray, names,
                batch_size: int = 32) -> dict:
    """Batched projected embeddings as numpy arrays, keyed by head name.
    'pooled_visual' gives the pre-head conditioning vector for separation."""
    want_visual = any(n in names for n in ("v_glb", "V_loc", "pooled_visual"))
    want_audio = any(n in names for n in ("a_glb", "a_loc"))
    out = {n: [] for n in names}
    with torch.no_grad():
        for start in _batch_starts(idx.size, batch_size):
            ti = torch.from_numpy(np.ascontiguousarray(idx[start:start + batch_size])).long()
            if want_visual:
                vis = model.encode_visual(cache.images[ti])
                grid = vis.grid
                b, h, w, d = grid.shape
                cells = grid.reshape(b, h * w, d)
                if "V_loc" in out:
                    v = F.normalize(model.heads["v_loc"](cells), dim=-1)
                    out["V_loc"].append(v.reshape(b, h, w, -1).numpy())
                if "v_glb" in out:
                    out["v_glb"].append(
                        F.normalize(model.heads["v_glb"](cells.amax(dim=1)), dim=-1).numpy())
                if "pooled_visual" in out:
                    out["pooled_visual"].append(cells.amax(dim=1).numpy())
            if want_audio:
                aud = model.encode_audio(cache.logmags[ti])
                if "a_glb" in out:
                    out["a_glb"].append(
                        F.normalize(model.heads["a_glb"](aud.vector), dim=-1).numpy())
                if "a_loc" in out:
                    out["a_loc"].append(
                        F.normalize(model.heads["a_loc"](aud.vector), dim=-1).numpy())
    return {k: np.concatenate(v) for k, v in out.items()}


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    checkpoint: Path        # best epoch under the selection rule
    last_checkpoint: Path
    runlog_path: Path
    runlog: RunLog
    epochs_run: int
    final_val: dict


def train(cfg: TrainConfig, manifest_path, out_dir, resume_from=None,
          init_checkpoint=None, stage: str | None = None,
          stage_configs: dict | None = None) -> TrainResult:
    """Optimize the enabled objectives; returns the best checkpoint path.

    resume_from continues an interrupted run (same config, optimizer state
    restored). init_checkpoint seeds the weights from another run but starts
    a fresh optimizer (the fine-tune path). Model selection: best validation
    F1 when the localization heads are being trained (cl enabled), otherwise
    lowest validation total loss; without a validation split the last epoch
    wins.
    """
    if resume_from is not None and init_checkpoint is not None:
        raise ConfigurationError("resume_from and init_checkpoint are exclusive")
    t_start = time.time()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    device = _resolve_device(cfg.device)
    torch.set_num_threads(1)  # bitwise reproducibility on CPU

    manifest = load_manifest_resolved(manifest_path)
    if len(manifest) < 2:
        raise DataError(f"need at least 2 records to train, got {len(manifest)}")
    mhash = manifest_hash(manifest_path)

    split_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _STREAM_SPLIT]))
    perm = split_rng.permutation(len(manifest))
    n_val = min(int(round(len(manifest) * cfg.val_fraction)), cfg.val_max_records)
    if len(manifest) - n_val < 2:
        n_val = len(manifest) - 2
    if n_val < 2:
        n_val = 0
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    torch.manual_seed(cfg.seed)
    model = build_model(cfg.model).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)

    start_epoch = 0
    global_step = 0
    best_metric = None
    best_name = None
    cfg_dict = train_config_to_dict(cfg)

    if init_checkpoint is not None:
        payload = load_checkpoint(init_checkpoint)
        if payload["model_config"] != asdict(cfg.model):
            raise ConfigurationError(
                "architecture mismatch: init checkpoint was built with a different model config")
        model.load_state_dict(payload["state_dict"], strict=True)

    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        # epochs may grow on resume; everything that shapes the data stream
        # and the optimization itself must match exactly
        stored = dict(payload.get("train_config") or {})
        stored.pop("epochs", None)
        ours = dict(cfg_dict)
        ours.pop("epochs", None)
        if stored != ours:
            raise ConfigurationError("resume config differs from the checkpoint's")
        model.load_state_dict(payload["state_dict"], strict=True)
        if payload.get("optimizer") is None:
            raise CheckpointError("checkpoint carries no optimizer state; cannot resume")
        optimizer.load_state_dict(payload["optimizer"])
        torch.set_rng_state(payload["torch_rng"])
        start_epoch = payload["epoch"] + 1
        global_step = payload.get("step", 0)
        best_metric = payload.get("best_val_metric")
        best_name = payload.get("best_checkpoint")
        runlog = RunLog.open_resume(out / "runlog.jsonl")
        runlog.append("resume", from_checkpoint=Path(resume_from).name,
                      epoch_start=start_epoch)
    else:
        runlog = RunLog.create(out / "runlog.jsonl")
        config_rec = {
            "config": cfg_dict, "manifest": str(manifest_path),
            "manifest_hash": mhash, "n_train": int(train_idx.size),
            "n_val": int(val_idx.size),
        }
        if stage:
            config_rec["stage"] = stage
        if stage_configs:
            config_rec["stage_configs"] = stage_configs
        if init_checkpoint is not None:
            config_rec["init_from"] = Path(init_checkpoint).name
        runlog.append("config", **config_rec)

    val_set = set(val_idx.tolist())
    val_ids = {r.id for i, r in enumerate(manifest.records) if i in val_set}
    cache = _FeatureCache(manifest, cfg.data, cfg.model, mask_ids=val_ids)

    last_name = None
    final_val = {}
    for epoch in range(start_epoch, cfg.epochs):
        model.train()
        order_rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, _STREAM_ORDER, epoch]))
        order = train_idx[order_rng.permutation(train_idx.size)]
        for batch_no, start in enumerate(_batch_starts(order.size, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if idx.size < 2:
                continue  # a singleton tail cannot be deranged
            prng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, _STREAM_PARTNER, epoch, batch_no]))
            partner = idx[random_derangement(idx.size, prng)]
            tensors = cache.batch(idx, partner, cfg)
            try:
                bundle = _forward_losses(model, cfg, tensors)
            except TrainingDivergenceError as exc:
                diag = out / "diverged.pt"
                save_checkpoint(diag, model, cfg, epoch=epoch, step=global_step,
                                optimizer=optimizer,
                                extra={"diverged_batch_ids": [cache.ids[i] for i in idx]})
                runlog.append("divergence", epoch=epoch, batch=batch_no,
                              checkpoint=diag.name, error=str(exc))
                raise TrainingDivergenceError(
                    f"{exc} (diagnostic checkpoint: {diag})") from exc
            optimizer.zero_grad(set_to_none=True)
            bundle.total.backward()
            optimizer.step()
            runlog.append("step", epoch=epoch, batch=batch_no,
                          train_step=global_step, losses=bundle.detached())
            global_step += 1

        snap = _validate(model, cache, val_idx, cfg)
        final_val = snap
        if "val_f1" in snap and cfg.enabled("cl"):
            selection = snap["val_f1"]
        elif "val_total" in snap:
            selection = -snap["val_total"]
        else:
            selection = None
        epoch_name = f"epoch_{epoch:03d}.pt"
        if selection is not None and (best_metric is None or selection > best_metric):
            best_metric = selection
            best_name = epoch_name
        save_checkpoint(out / epoch_name, model, cfg, epoch=epoch, step=global_step,
                        optimizer=optimizer, val_metric=selection,
                        extra={"best_val_metric": best_metric, "best_checkpoint": best_name})
        shutil.copyfile(out / epoch_name, out / "last.pt")
        last_name = epoch_name
        if best_name == epoch_name:
            shutil.copyfile(out / epoch_name, out / "best.pt")
        runlog.append("epoch", epoch=epoch, val=snap, checkpoint=epoch_name,
                      best=best_name, selection=selection)

    if last_name is None:
        # zero-epoch run (or resume already at the end): freeze current weights
        save_checkpoint(out / "last.pt", model, cfg, epoch=start_epoch - 1,
                        step=global_step, optimizer=optimizer, val_metric=None)
        last_name = "last.pt"
    if best_name is None:
        best_name = last_name
    if not (out / "best.pt").exists():
        # resumed into a fresh directory, or a zero-epoch run: fall back to last
        shutil.copyfile(out / "last.pt", out / "best.pt")

    runlog.append("final", epochs=cfg.epochs, best=best_name, last=last_name,
                  wall_clock_s=time.time() - t_start)
    return TrainResult(
        checkpoint=out / "best.pt", last_checkpoint=out / "last.pt",
        runlog_path=runlog.path, runlog=runlog,
        epochs_run=max(cfg.epochs - start_epoch, 0), final_val=final_val,
    )


# ---------------------------------------------------------------------------
# evaluation

def _cross_class_pairs(labels: np.ndarray | None, n: int) -> np.ndarray:
    """Deterministic partner assignment for separation: a seeded derangement,
    upgraded to different-class partners when labels are available."""
    rng = np.random.default_rng(np.random.SeedSequence([_SEP_PAIR_SEED, n]))
    if labels is None or np.unique(labels).size < 2:
        return random_derangement(n, rng)
    order = rng.permutation(n)
    pos = np.empty(n, dtype=np.int64)
    pos[order] = np.arange(n)
    partner = np.empty(n, dtype=np.int64)
    for i in range(n):
        p = pos[i]
        for k in range(1, n):
            j = order[(p + k) % n]
            if labels[j] != labels[i]:
                partner[i] = j
                break
        else:
            raise DataError("could not find a different-class partner")
    return partner


def evaluate(checkpoint, manifest_path, tasks=EVAL_TASKS, out_dir=None,
             sep_mask_source: str = "model", batch_size: int = 32) -> MetricsReport:
    """Score one checkpoint on the requested tasks from a single model load.

    Raises EvaluationTaskError when the checkpoint lacks the parameters a
    requested task needs (a partial checkpoint must fail loudly, not degrade).
    Missing ground truth instead yields a task_errors entry so the remaining
    tasks still report. sep_mask_source switches the separation estimate:
    'model' (the decoder), 'ideal' (oracle dominant mask, an upper bound), or
    'mixture' (no masking, the trivial baseline).
    """
    tasks = tuple(tasks)
    if not tasks or any(t not in EVAL_TASKS for t in tasks) or len(set(tasks)) != len(tasks):
        raise InputError(f"tasks must be a nonempty subset of {EVAL_TASKS}, got {tasks}")
    tasks = tuple(t for t in EVAL_TASKS if t in tasks)
    if sep_mask_source not in ("model", "ideal", "mixture"):
        raise InputError(f"unknown sep_mask_source {sep_mask_source!r}")

    payload = load_checkpoint(checkpoint)
    model_cfg = ModelConfig(**payload["model_config"])
    model = build_model(model_cfg)
    sd = payload["state_dict"]
    keys = set(sd.keys())
    for prefix in ("visual_backbone.", "audio_backbone."):
        if not any(k.startswith(prefix) for k in keys):
            raise CheckpointError(f"checkpoint lacks encoder parameters {prefix!r}")
    for task in tasks:
        if task == "sep" and sep_mask_source != "model":
            continue  # oracle/baseline masks never touch the decoder
        for prefix in TASK_REQUIRED_PREFIXES[task]:
            if not any(k.startswith(prefix) for k in keys):
                raise EvaluationTaskError(
                    f"checkpoint has no parameters under {prefix!r}, required by "
                    f"task {task!r}", task=task)
    missing, unexpected = model.load_state_dict(sd, strict=False)
    if unexpected:
        raise CheckpointError(f"checkpoint has unexpected parameters: {unexpected[:4]}")
    required = set()
    for t in tasks:
        if t == "sep" and sep_mask_source != "model":
            continue
        required.update(TASK_REQUIRED_PREFIXES[t])
    optional = ({f"heads.{h}." for h in ("a_glb", "a_loc", "a_mva",
                                         "v_glb", "v_loc", "v_mva")}
                | {"decoder."}) - required
    for key in missing:
        if not key.startswith(tuple(optional)):
            raise CheckpointError(f"checkpoint is missing required parameter {key}")
    model.eval()
    torch.set_num_threads(1)

    tc = payload.get("train_config")
    data_cfg = (train_config_from_dict(tc).data if tc else DataConfig())

    manifest = load_manifest_resolved(manifest_path)
    if len(manifest) == 0:
        raise DataError("evaluation manifest is empty")
    cache = _FeatureCache(manifest, data_cfg, model_cfg,
                          mask_ids=None if "loc" in tasks else set(),
                          keep_waves="sep" in tasks)

    report_kw: dict = {"n_samples": len(manifest), "extras": {}, "task_errors": {}}
    per_sample: list[dict] = []
    idx_all = np.arange(len(manifest))

    names = []
    if "loc" in tasks:
        names += ["a_loc", "V_loc"]
    if "recog" in tasks:
        names += ["a_glb", "v_glb"]
    if "sep" in tasks:
        names += ["pooled_visual"]
    embs = _embeddings(model, cache, idx_all, names, batch_size) if names else {}

    if "loc" in tasks:
        have = [i for i in idx_all if i in cache.gt_masks]
        if not have:
            report_kw["task_errors"]["loc"] = "no ground-truth masks in manifest"
        else:
            size = cache.gt_masks[have[0]].shape[0]
            heatmaps, masks, ps, rs = [], [], [], []
            for i in have:
                heat = localization_heatmap(embs["a_loc"][i], embs["V_loc"][i], size)
                heatmaps.append(heat)
                masks.append(cache.gt_masks[i])
                pr = precision_f1(heat, cache.gt_masks[i])
                if pr is not None:
                    ps.append(pr[0])
                    rs.append(pr[1])
                    per_sample.append({"id": cache.ids[i], "task": "loc",
                                       "precision": pr[0], "recall": pr[1], "f1": pr[2]})
            piap_pct, skipped = piap(heatmaps, masks)
            report_kw["piap"] = piap_pct
            report_kw["precision"] = float(np.mean(ps)) if ps else None
            report_kw["recall"] = float(np.mean(rs)) if rs else None
            report_kw["extras"]["loc_n"] = len(have)
            if skipped:
                report_kw["extras"]["loc_skipped_empty_gt"] = skipped

    if "sep" in tasks:
        if len(manifest) < 2:
            report_kw["task_errors"]["sep"] = "separation needs at least 2 records to mix"
        else:
            partner = _cross_class_pairs(cache.labels, len(manifest))
            dsp_cfg = data_cfg.dsp
            s = model_cfg.audio_input_size
            sdrs, sars, base_sdrs = [], [], []
            for i in idx_all:
                j = int(partner[i])
                w_i, w_j = cache.waves[i], cache.waves[j]
                spec_i = stft(Waveform(w_i, dsp_cfg.sample_rate), dsp_cfg)
                spec_j = stft(Waveform(w_j, dsp_cfg.sample_rate), dsp_cfg)
                mix = ComplexSpectrogram(spec_i.values + spec_j.values, dsp_cfg)
                if sep_mask_source == "mixture":
                    est = w_i + w_j
                else:
                    if sep_mask_source == "ideal":
                        mask_vals = target_binary_mask(spec_i, mix).values
                    else:
                        logmag = np.log(np.abs(mix.values) + dsp_cfg.log_epsilon)
                        grid = torch.from_numpy(logmag.astype(np.float32))[None, None]
                        grid = F.interpolate(grid, size=(s, s), mode="bilinear",
                                             align_corners=False)
                        cond = torch.from_numpy(embs["pooled_visual"][i][None])
                        with torch.no_grad():
                            pred = model.separation_mask(grid, cond)
                        mask_vals = pred[0, 0].numpy().astype(np.float64)
                    est = apply_mask(mix, SoftMask(np.clip(mask_vals, 0.0, 1.0)),
                                     dsp_cfg, out_len=w_i.size).samples
                sdr, sar = sdr_sar(est, w_i, w_j)
                base = sdr_sar(w_i + w_j, w_i, w_j)[0]
                sdrs.append(sdr)
                sars.append(sar)
                base_sdrs.append(base)
                per_sample.append({"id": cache.ids[i], "task": "sep",
                                   "partner": cache.ids[j], "sdr": sdr, "sar": sar,
                                   "sdr_baseline": base})
            report_kw["sdr"] = float(np.mean(sdrs))
            report_kw["sar"] = float(np.mean(sars))
            report_kw["extras"]["sdr_baseline"] = float(np.mean(base_sdrs))
            report_kw["extras"]["sep_mask_source"] = sep_mask_source
            report_kw["extras"]["sep_pairing"] = (
                "cross_class" if cache.labels is not None else "derangement")

    if "recog" in tasks:
        if cache.labels is None:
            report_kw["task_errors"]["recog"] = "manifest records are not all labeled"
        else:
            a, v = embs["a_glb"], embs["v_glb"]
            report_kw["ir_acc"] = retrieval_accuracy(a, v)
            report_kw["xnn_acc"] = nn_accuracy((a, v), cache.labels, mode="cross")
            report_kw["wnn_acc"] = (nn_accuracy(a, cache.labels, mode="within")
                                    + nn_accuracy(v, cache.labels, mode="within")) / 2.0

    report = MetricsReport(**report_kw)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json() + "\n")
        if per_sample:
            # tasks contribute different fields; pad to one uniform schema
            keys = ["id", "task"]
            for row in per_sample:
                keys += [k for k in row if k not in keys]
            rows = [{k: row.get(k, "") for k in keys} for row in per_sample]
            write_per_sample_csv(rows, out / "per_sample.csv")
    return report


# ---------------------------------------------------------------------------
# pretrain -> finetune

@dataclass
class PretrainFinetuneResult:
    pretrain: TrainResult
    finetune: TrainResult
    checkpoint: Path


def pretrain_finetune(cfg_pre: TrainConfig, manifest_pre, cfg_fine: TrainConfig,
                      manifest_fine, out_dir) -> PretrainFinetuneResult:
    """Train on the first corpus, then continue on the second from the
    resulting weights with a fresh optimizer."""
    if asdict(cfg_pre.model) != asdict(cfg_fine.model):
        raise ConfigurationError("architecture mismatch between the two stages")
    out = Path(out_dir)
    pre = train(cfg_pre, manifest_pre, out / "pretrain", stage="pretrain")
    fine = train(cfg_fine, manifest_fine, out / "finetune", stage="finetune",
                 init_checkpoint=pre.checkpoint,
                 stage_configs={"pretrain": train_config_to_dict(cfg_pre),
                                "finetune": train_config_to_dict(cfg_fine)})
    return PretrainFinetuneResult(pretrain=pre, finetune=fine,
                                  checkpoint=fine.checkpoint)


# ---------------------------------------------------------------------------
# ablation grids

OBJECTIVE_GRID = (("cl",), ("mas",), ("cl", "mas"), ("cl", "mva"),
                  ("mas", "mva"), ("cl", "mas", "mva"))
DEPTH_GRID = (4, 8, 12, 16)
ALPHA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))

ABLATION_AXES = ("objectives", "depth", "alpha")

CSV_METRICS = ("piap", "precision", "recall", "f1", "sdr", "sar",
               "ir_acc", "xnn_acc", "wnn_acc")


def ablation_grid(axis: str, base: TrainConfig) -> list:
    """(label, config) pairs for one sweep axis."""
    if axis == "objectives":
        return [("+".join(objs), replace(base, objectives=objs))
                for objs in OBJECTIVE_GRID]
    if axis == "depth":
        return [(str(d), replace(base, model=replace(base.model, decoder_depth=d)))
                for d in DEPTH_GRID]
    if axis == "alpha":
        return [(f"{a:.1f}", replace(base, alpha=a)) for a in ALPHA_GRID]
    raise InputError(f"unknown ablation axis {axis!r}, expected one of {ABLATION_AXES}")


def run_ablation(axis: str, base: TrainConfig, train_manifest, eval_manifest,
                 out_dir, seeds=(0,), tasks=EVAL_TASKS) -> list:
    """Train/evaluate the full grid and write a combined CSV; returns rows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for label, cfg in ablation_grid(axis, base):
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed)
            run_dir = out / axis / label / f"seed{seed}"
            result = train(run_cfg, train_manifest, run_dir)
            report = evaluate(result.checkpoint, eval_manifest, tasks, out_dir=run_dir)
            row = {"axis": axis, "value": label, "seed": seed}
            for m in CSV_METRICS:
                val = getattr(report, m)
                row[m] = "" if val is None else val
            row["sdr_baseline"] = report.extras.get("sdr_baseline", "")
            row["run_dir"] = str(run_dir)
            rows.append(row)
    csv_path = out / f"{axis}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return rows
