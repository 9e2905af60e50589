"""Reconstruction quality: NMSE, CNR sweeps, and CSV result emission.

NMSE is the mean over samples of ||reconstruction - truth||^2 / ||truth||^2,
reported in dB (lower is better).  The ratio is computed on de-normalized
matrices using each sample's stored scale, so the metric describes the
physical channel rather than the [-1, 1] training representation.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .channel import ChannelDataset
from .errors import DataFormatError, DegenerateSampleError, DimensionError
from .model import Decoder, Denoiser, Encoder, ModelConfig
from .training import INFERENCE_BATCH

DB_FLOOR = -300.0


@dataclass(frozen=True)
class NmseValue:
    """Mean error ratio with its dB form; ``floored`` marks an exact-zero ratio."""

    ratio: float
    db: float
    floored: bool


@dataclass(frozen=True)
class EvalResult:
    model: str
    gamma: Fraction | None
    cnr_db: float
    nmse_db: float
    n_samples: int


def nmse(pred: np.ndarray, label: np.ndarray,
         scales: np.ndarray | None = None) -> NmseValue:
    """NMSE of a reconstructed batch against its labels.

    Both arrays are (n, 2, h, w); ``scales`` de-normalizes per sample when
    given (it cannot change the per-sample ratio unless pred and label were
    scaled differently, but the metric is defined on physical matrices).
    """
    if pred.shape != label.shape:
        raise DimensionError(f"prediction shape {pred.shape} != label shape {label.shape}")
    pred = pred.astype(np.float64)
    label = label.astype(np.float64)
    if scales is not None:
        s = np.asarray(scales, dtype=np.float64).reshape(-1, 1, 1, 1)
        pred = pred * s
        label = label * s
    sig = (label ** 2).sum(axis=(1, 2, 3))
    if np.any(sig == 0.0):
        raise DegenerateSampleError("zero-norm label: NMSE undefined")
    err = ((pred - label) ** 2).sum(axis=(1, 2, 3))
    ratio = float(np.mean(err / sig))
    if ratio <= 0.0:
        return NmseValue(0.0, DB_FLOOR, True)
    return NmseValue(ratio, float(10.0 * np.log10(ratio)), False)


class FeedbackModel:
    """A trained denoise+compress+reconstruct chain under one name."""

    def __init__(self, name: str, mcfg: ModelConfig,
                 denoiser_weights: Mapping[str, np.ndarray],
                 encoder_weights: Mapping[str, np.ndarray],
                 decoder_weights: Mapping[str, np.ndarray]):
        self.name = name
        self.gamma: Fraction | None = mcfg.gamma
        self.mcfg = mcfg
        self._den = Denoiser(mcfg)
        self._den.load_weights(denoiser_weights)
        self._enc = Encoder(mcfg)
        self._enc.load_weights(encoder_weights)
        self._dec = Decoder(mcfg)
        self._dec.load_weights(decoder_weights)

    def denoise(self, inputs: np.ndarray) -> np.ndarray:
        return self._batched(lambda x: self._den.forward(x, train=False), inputs)

    def encode(self, denoised: np.ndarray) -> np.ndarray:
        return self._batched(lambda x: self._enc.forward(x, train=False), denoised)

    def decode(self, codewords: np.ndarray) -> np.ndarray:
        return self._batched(lambda s: self._dec.forward(s, train=False), codewords)

    def reconstruct(self, inputs: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(self.denoise(inputs)))

    @staticmethod
    def _batched(fn, arr: np.ndarray) -> np.ndarray:
        out = [fn(arr[i:i + INFERENCE_BATCH]) for i in range(0, arr.shape[0], INFERENCE_BATCH)]
        return np.concatenate(out, axis=0)


class IdentityBaseline:
    """Pass-through pseudo-model: the noisy input is the reconstruction."""

    name = "identity"
    gamma: Fraction | None = None

    def reconstruct(self, inputs: np.ndarray) -> np.ndarray:
        return inputs


def evaluate_model(model, ds: ChannelDataset) -> NmseValue:
    out = model.reconstruct(ds.inputs)
    return nmse(out, ds.labels, ds.scales)


def per_sample_nmse_db(model, ds: ChannelDataset) -> np.ndarray:
    """Per-sample NMSE in dB, for distribution analysis."""
    out = model.reconstruct(ds.inputs).astype(np.float64)
    lab = ds.labels.astype(np.float64)
    sig = (lab ** 2).sum(axis=(1, 2, 3))
    if np.any(sig == 0.0):
        raise DegenerateSampleError("zero-norm label: NMSE undefined")
    err = ((out - lab) ** 2).sum(axis=(1, 2, 3))
    return 10.0 * np.log10(np.maximum(err / sig, 10.0 ** (DB_FLOOR / 10.0)))


def write_per_sample_csv(model, ds: ChannelDataset, path) -> None:
    values = per_sample_nmse_db(model, ds)
    with open(path, "w") as f:
        f.write("sample_idx,nmse_db\n")
        for i, v in enumerate(values):
            f.write(f"{i},{v!r}\n")


def evaluate_sweep(models: Sequence, datasets: Sequence[ChannelDataset]) -> list[EvalResult]:
    """One EvalResult per (model, dataset); deterministic inference-mode passes."""
    results = []
    for model in models:
        for ds in datasets:
            mcfg = getattr(model, "mcfg", None)
            if mcfg is not None and (ds.n_cc, ds.n_t) != (mcfg.n_cc, mcfg.n_t):
                raise DimensionError(
                    f"dataset image {ds.n_cc}x{ds.n_t} does not match model config "
                    f"{mcfg.n_cc}x{mcfg.n_t}")
            value = evaluate_model(model, ds)
            results.append(EvalResult(model.name, model.gamma, float(ds.cnr_db),
                                      value.db, len(ds)))
    return sort_results(results)


def sort_results(results: Sequence[EvalResult]) -> list[EvalResult]:
    """Stable result order: model name, gamma descending, CNR ascending."""
    def key(r: EvalResult):
        g = float(r.gamma) if r.gamma is not None else -1.0
        return (r.model, -g, r.cnr_db)
    return sorted(results, key=key)


RESULTS_HEADER = "model,gamma,cnr_db,nmse_db,n_samples"


def format_gamma(gamma: Fraction | None) -> str:
    if gamma is None:
        return "-"
    return f"{gamma.numerator}/{gamma.denominator}" if gamma.denominator != 1 else str(gamma.numerator)


def write_results_csv(results: Sequence[EvalResult], path) -> None:
    rows = sort_results(results)
    with open(path, "w") as f:
        f.write(RESULTS_HEADER + "\n")
        for r in rows:
            f.write(f"{r.model},{format_gamma(r.gamma)},{r.cnr_db!r},{r.nmse_db!r},{r.n_samples}\n")


def read_results_csv(path) -> list[EvalResult]:
    out = []
    with open(path) as f:
        header = f.readline().strip()
        if header != RESULTS_HEADER:
            raise DataFormatError(f"unexpected results header {header!r} in {path}")
        for line in f:
            model, gamma, cnr_db, nmse_db, n = line.strip().split(",")
            out.append(EvalResult(model, None if gamma == "-" else Fraction(gamma),
                                  float(cnr_db), float(nmse_db), int(n)))
    return out
