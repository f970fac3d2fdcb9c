"""Dataset plumbing: manifests, sample loading, synthetic scene generation,
and training-batch construction.

The synthetic corpus pairs harmonic tones with rendered glyph scenes. Class
identity fixes the tone's base fundamental and the glyph's shape and hue
family; three per-record latent draws couple fine pitch to hue, envelope
slope to glyph brightness, and loudness to glyph size, so instance-level
audio-visual matching is learnable while glyph position stays independent
of the audio (localization cannot cheat off a positional cue).
"""

from __future__ import annotations

import colorsys
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.signal
from PIL import Image

from .dsp import (
    DspConfig,
    Waveform,
    read_wav,
    resize_bilinear,
    stft,
    target_binary_mask,
    write_wav,
)
from .errors import ConfigurationError, DataError, InputError

log = logging.getLogger(__name__)

NYQUIST_GUARD = 0.95  # harmonics above this fraction of Nyquist are dropped

IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)


@dataclass
class SampleRecord:
    """One audio-visual pair plus optional supervision."""

    id: str
    audio_path: str
    image_path: str
    label: int | None = None
    bbox: tuple[int, int, int, int] | None = None  # x0, y0, x1, y1 inclusive
    gt_mask_path: str | None = None

    def __post_init__(self):
        if self.bbox is not None:
            x0, y0, x1, y1 = self.bbox
            if not (0 <= x0 <= x1 and 0 <= y0 <= y1):
                raise InputError(f"record {self.id}: malformed bbox {self.bbox}")
            self.bbox = (int(x0), int(y0), int(x1), int(y1))


@dataclass
class Manifest:
    records: list[SampleRecord]

    @property
    def labeled(self) -> bool:
        return all(r.label is not None for r in self.records)

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for the synthetic audio-visual corpus.

    Class k's tone has fundamental tone_fundamental_base + k * step with
    n_harmonics partials at 1/h amplitude; its glyph is a filled regular
    polygon with k + 3 vertices. The *_coupling fields control how much the
    per-record latents (pitch jitter, envelope slope, gain) show up in the
    glyph's hue, brightness, and radius. Setting couple_instances=False
    renders class-only scenes with no instance-level cross-modal signal.
    """

    n_classes: int = 8
    samples_per_class: int = 250
    image_size: int = 224
    tone_fundamental_base: float = 400.0
    tone_fundamental_step: float = 300.0
    n_harmonics: int = 3
    snr_db: float = 20.0
    seed: int = 0
    sample_rate: int = 8000
    clip_seconds: float = 3.0
    couple_instances: bool = True
    pitch_jitter_hz: float = 100.0
    envelope_slope_max: float = 2.0
    gain_range: tuple[float, float] = (0.4, 1.0)
    hue_jitter: float = 0.04
    brightness_range: tuple[float, float] = (0.55, 0.9)
    radius_range: tuple[float, float] = (25.0, 45.0)

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigurationError("need at least 2 classes")
        if self.samples_per_class < 1:
            raise ConfigurationError("samples_per_class must be positive")
        nyquist = self.sample_rate / 2.0
        top = (self.tone_fundamental_base
               + (self.n_classes - 1) * self.tone_fundamental_step
               + self.pitch_jitter_hz)
        if top >= nyquist:
            raise ConfigurationError(
                f"highest class fundamental {top:.0f} Hz reaches Nyquist {nyquist:.0f} Hz"
            )
        if self.tone_fundamental_base - self.pitch_jitter_hz <= 0:
            raise ConfigurationError("fundamental jitter reaches 0 Hz")
        if self.n_harmonics < 1:
            raise ConfigurationError("need at least one harmonic")
        if 2 * self.pitch_jitter_hz >= self.tone_fundamental_step:
            raise ConfigurationError("pitch jitter ranges of adjacent classes overlap")


@dataclass
class TrainingBatch:
    """Arrays for one optimization step.

    Images are normalized float32 HWC; audio is float64 at the dsp rate.
    mixed_images = alpha * base + (1 - alpha) * partner, mixture_audio =
    base + partner, and target_masks mark where the base source dominates
    the mixture. Partner assignment within the batch has no fixed points.
    validate() checks the arithmetic identities (kept out of the hot path).
    """

    base_images: np.ndarray
    partner_images: np.ndarray
    mixed_images: np.ndarray
    base_audio: np.ndarray
    partner_audio: np.ndarray
    mixture_audio: np.ndarray
    target_masks: np.ndarray
    alpha: float

    def __len__(self) -> int:
        return self.base_images.shape[0]

    def validate(self) -> None:
        want = self.alpha * self.base_images + (1.0 - self.alpha) * self.partner_images
        if not np.allclose(self.mixed_images, want, atol=1e-5):
            raise InputError("mixed_images is not the stated convex combination")
        if not np.allclose(self.mixture_audio, self.base_audio + self.partner_audio, atol=1e-9):
            raise InputError("mixture_audio is not the elementwise sum")
        if not np.isin(self.target_masks, (0.0, 1.0)).all():
            raise InputError("target_masks must be binary")
        if not 0.0 <= self.alpha <= 1.0:
            raise InputError(f"alpha {self.alpha} outside [0, 1]")


@dataclass
class DataConfig:
    """Loading/preprocessing knobs shared by training and evaluation."""

    image_size: int = 224
    image_mean: tuple = IMAGE_MEAN
    image_std: tuple = IMAGE_STD
    crop: str = "center"  # or "random" during training
    dsp: DspConfig = field(default_factory=DspConfig)

    def __post_init__(self):
        if self.crop not in ("center", "random"):
            raise ConfigurationError(f"unknown crop mode {self.crop!r}")


# ---------------------------------------------------------------------------
# manifest I/O

def write_manifest(manifest: Manifest, path) -> None:
    """One JSON object per line; paths are stored as given (keep them
    relative to the manifest's directory for a relocatable corpus)."""
    path = Path(path)
    with open(path, "w") as fh:
        for r in manifest.records:
            row = {"id": r.id, "audio_path": r.audio_path, "image_path": r.image_path}
            if r.label is not None:
                row["label"] = int(r.label)
            if r.bbox is not None:
                row["bbox"] = list(r.bbox)
            if r.gt_mask_path is not None:
                row["gt_mask_path"] = r.gt_mask_path
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"manifest line {lineno} is not valid JSON: {exc}")
            try:
                records.append(SampleRecord(
                    id=row["id"], audio_path=row["audio_path"],
                    image_path=row["image_path"], label=row.get("label"),
                    bbox=tuple(row["bbox"]) if "bbox" in row else None,
                    gt_mask_path=row.get("gt_mask_path"),
                ))
            except KeyError as exc:
                raise DataError(f"manifest line {lineno} missing field {exc}")
    if not records:
        raise DataError(f"manifest {path} has no records")
    return Manifest(records)


def resolve_record(rec: SampleRecord, root) -> SampleRecord:
    """Return a copy with paths resolved against the manifest directory."""
    root = Path(root)

    def fix(p):
        return p if p is None or Path(p).is_absolute() else str(root / p)

    return replace(rec, audio_path=fix(rec.audio_path), image_path=fix(rec.image_path),
                   gt_mask_path=fix(rec.gt_mask_path))


def load_manifest_resolved(path) -> Manifest:
    path = Path(path)
    m = read_manifest(path)
    return Manifest([resolve_record(r, path.parent) for r in m.records])


# ---------------------------------------------------------------------------
# synthetic corpus

def _record_rng(seed: int, class_id: int, idx: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, class_id, idx]))


def _synth_tone(spec: SyntheticSpec, class_id: int, rng: np.random.Generator):
    """Harmonic tone with per-record latents; returns (waveform, latents)."""
    u_pitch = float(rng.uniform(-1.0, 1.0))
    u_slope = float(rng.uniform(-1.0, 1.0))
    u_gain = float(rng.uniform(0.0, 1.0))

    f0 = (spec.tone_fundamental_base + class_id * spec.tone_fundamental_step
          + (u_pitch * spec.pitch_jitter_hz if spec.couple_instances else 0.0))
    slope = u_slope * spec.envelope_slope_max if spec.couple_instances else 0.0
    g_lo, g_hi = spec.gain_range
    gain = g_lo + (g_hi - g_lo) * u_gain if spec.couple_instances else 1.0

    n = int(round(spec.clip_seconds * spec.sample_rate))
    t = np.arange(n) / spec.sample_rate
    nyquist = spec.sample_rate / 2.0
    x = np.zeros(n)
    for h in range(1, spec.n_harmonics + 1):
        if h * f0 >= NYQUIST_GUARD * nyquist:
            break  # keep the synthesis bandlimited
        phase = rng.uniform(0.0, 2.0 * np.pi)
        x += (1.0 / h) * np.sin(2.0 * np.pi * h * f0 * t + phase)
    env = np.exp(slope * (t / spec.clip_seconds - 0.5))
    env /= env.max()
    x = gain * env * x

    rms = np.sqrt(np.mean(x ** 2))
    noise = rng.standard_normal(n)
    noise *= rms / (10.0 ** (spec.snr_db / 20.0)) / np.sqrt(np.mean(noise ** 2))
    x = x + noise
    latents = {"pitch": u_pitch, "slope": u_slope, "gain": u_gain, "f0": f0}
    return Waveform(x, spec.sample_rate), latents


def _polygon_mask(size: int, cx: float, cy: float, radius: float,
                  n_vertices: int, rotation: float) -> np.ndarray:
    """Boolean raster of a filled regular polygon over pixel centers."""
    angles = rotation + 2.0 * np.pi * np.arange(n_vertices) / n_vertices
    vx = cx + radius * np.cos(angles)
    vy = cy + radius * np.sin(angles)
    ys, xs = np.mgrid[0:size, 0:size]
    px = xs.ravel() + 0.5
    py = ys.ravel() + 0.5
    # even-odd crossing test, vectorized over all pixels at once
    inside = np.zeros(px.size, dtype=bool)
    j = n_vertices - 1
    for i in range(n_vertices):
        xi, yi = vx[i], vy[i]
        xj, yj = vx[j], vy[j]
        crosses = (yi > py) != (yj > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = (xj - xi) * (py - yi) / (yj - yi) + xi
        inside ^= crosses & (px < x_at)
        j = i
    return inside.reshape(size, size)


def _render_scene(spec: SyntheticSpec, class_id: int, latents: dict,
                  rng: np.random.Generator):
    """Textured background plus one class glyph; returns (rgb uint8, mask bool)."""
    size = spec.image_size
    coarse = rng.uniform(0.30, 0.48, size=(8, 8, 3))
    bg = np.stack([resize_bilinear(coarse[:, :, c], (size, size)) for c in range(3)], axis=2)

    r_lo, r_hi = spec.radius_range
    b_lo, b_hi = spec.brightness_range
    if spec.couple_instances:
        radius = r_lo + (r_hi - r_lo) * latents["gain"]
        bright = b_lo + (b_hi - b_lo) * (latents["slope"] + 1.0) / 2.0
        hue = (class_id / spec.n_classes + latents["pitch"] * spec.hue_jitter) % 1.0
    else:
        radius = (r_lo + r_hi) / 2.0
        bright = (b_lo + b_hi) / 2.0
        hue = class_id / spec.n_classes
    rgb = colorsys.hsv_to_rgb(hue, 0.85, bright)

    margin = radius + 3.0
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    rotation = rng.uniform(0.0, 2.0 * np.pi)
    mask = _polygon_mask(size, cx, cy, radius, class_id + 3, rotation)

    img = bg
    img[mask] = rgb
    return np.round(img * 255.0).astype(np.uint8), mask


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Manifest:
    """Write the corpus (WAV + PNG + mask PNG per record) and its manifest.

    Fully deterministic: every record draws from its own seed stream keyed
    by (spec.seed, class, index), so the same spec reproduces byte-identical
    files regardless of generation order.
    """
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    records = []
    for k in range(spec.n_classes):
        for idx in range(spec.samples_per_class):
            rng = _record_rng(spec.seed, k, idx)
            rec_id = f"c{k:02d}_s{idx:04d}"
            wave, latents = _synth_tone(spec, k, rng)
            img, mask = _render_scene(spec, k, latents, rng)

            audio_rel = f"audio/{rec_id}.wav"
            image_rel = f"images/{rec_id}.png"
            mask_rel = f"masks/{rec_id}.png"
            write_wav(out / audio_rel, wave)
            Image.fromarray(img, mode="RGB").save(out / image_rel)
            Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(out / mask_rel)

            ys, xs = np.nonzero(mask)
            bbox = (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))
            records.append(SampleRecord(
                id=rec_id, audio_path=audio_rel, image_path=image_rel,
                label=k, bbox=bbox, gt_mask_path=mask_rel,
            ))

    manifest = Manifest(records)
    write_manifest(manifest, out / "manifest.jsonl")
    with open(out / "meta.json", "w") as fh:
        json.dump({"n_classes": spec.n_classes,
                   "samples_per_class": spec.samples_per_class,
                   "seed": spec.seed,
                   "couple_instances": spec.couple_instances}, fh, indent=2)
    log.info("synthetic corpus: %d records under %s", len(records), out)
    return manifest


# ---------------------------------------------------------------------------
# loading

def load_sample(rec: SampleRecord, cfg: DataConfig,
                rng: np.random.Generator | None = None):
    """Load one record as (normalized image HWC float32, Waveform).

    Images are resized to cfg.image_size and channel-normalized. Audio is
    resampled to the dsp rate, cropped to the clip length (random crop when
    cfg.crop == "random", center otherwise), zero-padded at the end if short.
    """
    try:
        img = _load_image(rec.image_path, cfg)
    except (OSError, ValueError) as exc:
        raise DataError(f"image unreadable: {exc}", record_id=rec.id)
    try:
        wave = _load_audio(rec.audio_path, cfg, rng)
    except (OSError, ValueError, InputError) as exc:
        raise DataError(f"audio unreadable: {exc}", record_id=rec.id)
    if rec.bbox is not None:
        x0, y0, x1, y1 = rec.bbox
        if x1 >= cfg.image_size or y1 >= cfg.image_size:
            # bbox is stated in native pixels; only same-size images keep it
            log.debug("record %s: bbox exceeds resized image, ignoring", rec.id)
    return img, wave


def _load_image(path, cfg: DataConfig) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (cfg.image_size, cfg.image_size):
            im = im.resize((cfg.image_size, cfg.image_size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    mean = np.asarray(cfg.image_mean, dtype=np.float32)
    std = np.asarray(cfg.image_std, dtype=np.float32)
    return (arr - mean) / std


def _load_audio(path, cfg: DataConfig, rng) -> Waveform:
    wave = read_wav(path)
    target_rate = cfg.dsp.sample_rate
    x = wave.samples
    if wave.sample_rate != target_rate:
        g = np.gcd(wave.sample_rate, target_rate)
        x = scipy.signal.resample_poly(x, target_rate // g, wave.sample_rate // g)
    n_target = cfg.dsp.clip_samples
    if x.size > n_target:
        if cfg.crop == "random":
            if rng is None:
                raise InputError("random crop requested without an rng")
            start = int(rng.integers(0, x.size - n_target + 1))
        else:
            start = (x.size - n_target) // 2
        x = x[start:start + n_target]
    elif x.size < n_target:
        x = np.pad(x, (0, n_target - x.size))
    return Waveform(x, target_rate)


def load_gt_mask(rec: SampleRecord, image_size: int) -> np.ndarray:
    """Ground-truth localization mask as a bool array at image resolution."""
    if rec.gt_mask_path is None:
        raise DataError("record has no ground-truth mask", record_id=rec.id)
    try:
        with Image.open(rec.gt_mask_path) as im:
            im = im.convert("L")
            if im.size != (image_size, image_size):
                im = im.resize((image_size, image_size), Image.NEAREST)
            return np.asarray(im) > 127
    except (OSError, ValueError) as exc:
        raise DataError(f"mask unreadable: {exc}", record_id=rec.id)


# ---------------------------------------------------------------------------
# batch assembly

def random_derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation with no fixed points (rejection sampled)."""
    if n < 2:
        raise InputError("derangement needs n >= 2")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def make_training_batch(records: list[SampleRecord], alpha: float,
                        rng: np.random.Generator,
                        cfg: DataConfig | None = None) -> TrainingBatch:
    """Load records, assign mixing partners, and build all mixture views.

    Partners are a uniform random derangement of the batch, so no sample
    mixes with itself. Target masks compare each base source against its
    mixture on the full time-frequency grid under the configured rule.
    """
    if len(records) < 2:
        raise InputError(f"need a batch of >= 2 records, got {len(records)}")
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"alpha {alpha} outside [0, 1]")
    cfg = cfg if cfg is not None else DataConfig(crop="random")

    images, waves = [], []
    for rec in records:
        img, wave = load_sample(rec, cfg, rng)
        images.append(img)
        waves.append(wave.samples)
    images = np.stack(images)
    audio = np.stack(waves)

    perm = random_derangement(len(records), rng)
    partner_images = images[perm]
    partner_audio = audio[perm]
    mixed_images = (alpha * images + (1.0 - alpha) * partner_images).astype(np.float32)
    mixture_audio = audio + partner_audio

    masks = np.zeros((len(records), cfg.dsp.n_freq,
                      1 + int(np.ceil(audio.shape[1] / cfg.dsp.hop_length))))
    for b in range(len(records)):
        s_base = stft(Waveform(audio[b], cfg.dsp.sample_rate), cfg.dsp)
        s_mix = stft(Waveform(mixture_audio[b], cfg.dsp.sample_rate), cfg.dsp)
        masks[b] = target_binary_mask(s_base, s_mix).values

    return TrainingBatch(
        base_images=images, partner_images=partner_images, mixed_images=mixed_images,
        base_audio=audio, partner_audio=partner_audio, mixture_audio=mixture_audio,
        target_masks=masks, alpha=float(alpha),
    )
