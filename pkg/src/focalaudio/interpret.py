"""From cached modulator to mask, interpretation spectrogram and audio.

The pipeline: the channel-wise L2 norm of the final block's modulator gives a
nonnegative saliency map at feature resolution; the map is bilinearly
upsampled to full spectrogram resolution and thresholded at its q-quantile
(ties kept, so q = 0 retains everything); the binary mask multiplies the
log-spectrogram ("for_model" mode, what the metrics evaluate) or floors
masked cells to silence ("for_listening" mode, what gets reconstructed into
a playable waveform).

Thresholding happens after upsampling by default, which keeps the retained
fraction of the final mask at 1 - q; thresholding at feature resolution with
nearest-neighbor upsampling is available behind `upsample_first=False` for
comparison.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .audio import LOG_EPS, Spectrogram, Waveform, istft_reconstruct, preprocess, save_wav, write_pgm
from .focalnet import ModulatorCache
from .tensor import bilinear_resize_array


@dataclass
class ModulationMap:
    """Saliency at feature resolution: per-location L2 norm over channels."""

    values: np.ndarray  # [h, w], nonnegative
    clip_id: str = ""
    model_id: str = ""

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError("modulation map must be 2-d")
        if (self.values < 0).any():
            raise ValueError("modulation map must be nonnegative")


@dataclass
class InterpretationMask:
    """Binary time-frequency mask at spectrogram resolution."""

    mask: np.ndarray  # uint8, entries in {0, 1}
    quantile_order: float
    threshold: float

    def __post_init__(self):
        u = np.unique(self.mask)
        if not np.isin(u, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")

    @property
    def retained_fraction(self) -> float:
        return float(self.mask.mean())


def modulation_map(cache: ModulatorCache, clip_id: str = "", model_id: str = "") -> ModulationMap:
    """L2 norm of the cached modulator across the channel dimension, cropped
    to the feature cells covering the unpadded input."""
    if cache is None:
        raise ValueError("no modulator cache: run forward with cache_modulator=True")
    m = cache.modulator
    if m.ndim != 3:
        raise ValueError(f"expected a single-clip modulator [C, h, w], got {m.shape}")
    vh, vw = cache.valid_hw
    values = np.sqrt((m.astype(np.float64) ** 2).sum(axis=0))[:vh, :vw]
    return ModulationMap(values=values, clip_id=clip_id, model_id=model_id)


def quantile(m: ModulationMap | np.ndarray, q: float) -> float:
    """Linear-interpolation quantile (type 7) over the flattened map."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"quantile order must be in [0, 1], got {q}")
    values = m.values if isinstance(m, ModulationMap) else np.asarray(m)
    return float(np.quantile(values.reshape(-1), q))  # numpy default is type 7


def threshold_mask(m: ModulationMap, q: float, target_shape: tuple,
                   upsample_first: bool = True) -> InterpretationMask:
    """Binary mask keeping cells at or above the q-quantile (ties retained).

    `upsample_first=True` (default): bilinearly upsample the map to
    `target_shape`, then threshold at the quantile of the upsampled map.
    `upsample_first=False`: threshold at feature resolution, then
    nearest-neighbor upsample the binary mask.
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"quantile order must be in [0, 1], got {q}")
    th, tw = target_shape
    if upsample_first:
        up = bilinear_resize_array(m.values, th, tw)
        thr = quantile(up, q)
        mask = (up >= thr).astype(np.uint8)
    else:
        thr = quantile(m, q)
        small = (m.values >= thr).astype(np.uint8)
        rows = np.clip(np.round(np.linspace(0, small.shape[0] - 1, th)).astype(int), 0, small.shape[0] - 1)
        cols = np.clip(np.round(np.linspace(0, small.shape[1] - 1, tw)).astype(int), 0, small.shape[1] - 1)
        mask = small[np.ix_(rows, cols)]
    return InterpretationMask(mask=mask, quantile_order=float(q), threshold=float(thr))


def apply_mask(s: Spectrogram, m: InterpretationMask, mode: str = "for_model") -> Spectrogram:
    """Mask a spectrogram.

    for_model: elementwise product of the log magnitude with the mask (the
    masked cells read log-magnitude 0, i.e. magnitude 1).
    for_listening: masked cells floored to log(eps) so they reconstruct as
    silence. Phase passes through untouched in both modes.
    """
    if m.mask.shape != s.log_mag.shape:
        raise ValueError(f"mask shape {m.mask.shape} != spectrogram shape {s.log_mag.shape}")
    if mode == "for_model":
        out = s.log_mag * m.mask
    elif mode == "for_listening":
        out = np.where(m.mask == 1, s.log_mag, np.float32(np.log(s.params.eps)))
    else:
        raise ValueError(f"unknown masking mode {mode!r}")
    return s.copy_with(out.astype(np.float32))


def interpret_spectrogram(model, spec: Spectrogram, q: float, input_size: int,
                          upsample_first: bool = True, clip_id: str = ""):
    """One clip through the model; returns (mask, map, predicted class, probs)."""
    from .audio import to_model_input
    from . import tensor as T

    x = to_model_input(spec, out=input_size)
    with T.no_grad():
        logits, cache = model.forward(x, cache_modulator=True)
        probs = T.softmax(logits, axis=-1).data
    mmap = modulation_map(cache, clip_id=clip_id)
    mask = threshold_mask(mmap, q, spec.log_mag.shape, upsample_first=upsample_first)
    return mask, mmap, int(np.argmax(probs)), probs


def listenable_interpretation(clip: Waveform, model, frontend, q: float,
                              upsample_first: bool = True) -> Waveform:
    """Full pipeline: preprocess, forward with cache, mask, reconstruct."""
    spec, _ = preprocess(clip, frontend)
    mask, _, _, _ = interpret_spectrogram(model, spec, q, frontend.input_size,
                                          upsample_first=upsample_first)
    masked = apply_mask(spec, mask, mode="for_listening")
    return istft_reconstruct(masked.log_mag, masked.phase, masked.params)


def export_interpretation(out_dir, stem: str, spec: Spectrogram, mask: InterpretationMask,
                          predicted_class: int, class_name: str = "",
                          clip_id: str = "") -> dict:
    """Write the greymap pair, the reconstructed WAV and a metadata sidecar.

    Returns the metadata record. Files: `<stem>_interp.pgm` (masked
    spectrogram), `<stem>_mask.pgm`, `<stem>_interp.wav`, `<stem>_meta.json`.
    """
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    masked_model = apply_mask(spec, mask, mode="for_model")
    masked_listen = apply_mask(spec, mask, mode="for_listening")
    wav = istft_reconstruct(masked_listen.log_mag, masked_listen.phase, masked_listen.params)
    write_pgm(masked_model.log_mag, out_dir / f"{stem}_interp.pgm")
    write_pgm(mask.mask * 255, out_dir / f"{stem}_mask.pgm")
    save_wav(wav, out_dir / f"{stem}_interp.wav")
    meta = {
        "clip_id": clip_id or stem,
        "predicted_class": int(predicted_class),
        "predicted_class_name": class_name,
        "quantile_order": mask.quantile_order,
        "threshold": mask.threshold,
        "retained_fraction": mask.retained_fraction,
    }
    with open(out_dir / f"{stem}_meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return meta
