"""Synthetic sparse channel data in the angular-delay domain.

The generator draws clustered channels directly in the angular-delay domain:
each cluster is a Gaussian-shaped envelope at a configured (delay, angle)
center, filled with an i.i.d. circularly-symmetric complex field drawn per
sample.  The spatial-frequency matrix follows by the inverse unitary 2-D DFT,
so the forward transform of a generated channel reproduces the sparse image
exactly and the configured delay centers bound where its energy lives.

Pipeline per sample: generate -> angular-delay transform -> keep the first
``n_cc`` delay rows -> add estimation noise at a target channel-to-noise
ratio -> split into real/imaginary channels scaled to [-1, 1].
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from io import BufferedReader

import numpy as np

from . import seeds
from .errors import (DataFormatError, DegenerateSampleError, DimensionError,
                     ParameterError)

_ROW_MAJOR_F32 = "<f4"


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GeneratorParams:
    """Cluster geometry and grid dimensions for the channel generator."""

    n_c: int = 256
    n_t: int = 32
    n_cc: int = 32
    delay_centers: tuple[float, ...] = (3.0, 9.0, 18.0)
    angle_centers: tuple[float, ...] = (6.0, 16.0, 26.0)
    delay_spreads: tuple[float, ...] = (1.0, 1.4, 1.8)
    angle_spreads: tuple[float, ...] = (1.2, 1.6, 2.2)
    cluster_powers: tuple[float, ...] = (1.0, 0.5, 0.25)

    @property
    def n_clusters(self) -> int:
        return len(self.delay_centers)

    def validate(self) -> None:
        if not (_is_pow2(self.n_c) and self.n_c >= 8):
            raise ParameterError(f"n_c must be a power of two >= 8, got {self.n_c}")
        if not (_is_pow2(self.n_t) and self.n_t >= 8):
            raise ParameterError(f"n_t must be a power of two >= 8, got {self.n_t}")
        if not 1 <= self.n_cc <= self.n_c:
            raise ParameterError(f"n_cc must lie in [1, n_c], got {self.n_cc}")
        lists = (self.delay_centers, self.angle_centers, self.delay_spreads,
                 self.angle_spreads, self.cluster_powers)
        if self.n_clusters < 1:
            raise ParameterError("need at least one cluster")
        if any(len(l) != self.n_clusters for l in lists):
            raise ParameterError("per-cluster parameter lists must share one length")
        for dc in self.delay_centers:
            if not 0 <= dc < self.n_cc:
                raise ParameterError(
                    f"delay center {dc} outside [0, n_cc={self.n_cc}); truncation would drop its energy")
        for ac in self.angle_centers:
            if not 0 <= ac < self.n_t:
                raise ParameterError(f"angle center {ac} outside [0, n_t={self.n_t})")
        if any(s < 0 for s in self.delay_spreads + self.angle_spreads):
            raise ParameterError("spreads must be non-negative")
        if any(p <= 0 for p in self.cluster_powers):
            raise ParameterError("cluster powers must be positive")


def to_angular_delay(h: np.ndarray) -> np.ndarray:
    """Unitary 2-D DFT from spatial-frequency to angular-delay domain."""
    hd = np.fft.fft(h, axis=0, norm="ortho")
    return np.fft.ifft(hd, axis=1, norm="ortho")


def from_angular_delay(hd: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_angular_delay`."""
    h = np.fft.fft(hd, axis=1, norm="ortho")
    return np.fft.ifft(h, axis=0, norm="ortho")


def _axis_profile(n: int, center: float, spread: float, circular: bool) -> np.ndarray:
    grid = np.arange(n, dtype=np.float64)
    if circular:
        dist = np.mod(grid - center + n / 2.0, n) - n / 2.0
    else:
        dist = grid - center
    if spread == 0.0:
        profile = np.zeros(n)
        profile[int(round(center)) % n] = 1.0
        return profile
    return np.exp(-0.5 * (dist / spread) ** 2)


def cluster_envelopes(params: GeneratorParams) -> np.ndarray:
    """Unit-energy envelope per cluster, shape (n_clusters, n_c, n_t).

    Delay envelopes decay on the open grid (no wrap: rows past the truncation
    point must stay empty); angle envelopes wrap, matching the circular DFT
    angle axis.
    """
    envs = np.empty((params.n_clusters, params.n_c, params.n_t))
    for i in range(params.n_clusters):
        d = _axis_profile(params.n_c, params.delay_centers[i], params.delay_spreads[i], circular=False)
        a = _axis_profile(params.n_t, params.angle_centers[i], params.angle_spreads[i], circular=True)
        e = np.outer(d, a)
        envs[i] = e / np.sqrt((e ** 2).sum())
    return envs


def generate_channel(params: GeneratorParams, rng: np.random.Generator) -> np.ndarray:
    """Spatial-frequency channel matrix (n_c, n_t) with a sparse angular-delay image."""
    params.validate()
    envs = cluster_envelopes(params)
    image = np.zeros((params.n_c, params.n_t), dtype=np.complex128)
    for i in range(params.n_clusters):
        f = rng.standard_normal((params.n_c, params.n_t)) + 1j * rng.standard_normal((params.n_c, params.n_t))
        image += np.sqrt(params.cluster_powers[i] / 2.0) * envs[i] * f
    return from_angular_delay(image)


def truncate(hd: np.ndarray, n_cc: int) -> np.ndarray:
    """First ``n_cc`` delay rows of an angular-delay matrix."""
    if not 1 <= n_cc <= hd.shape[0]:
        raise ParameterError(f"n_cc={n_cc} outside [1, {hd.shape[0]}]")
    return hd[:n_cc]


def add_noise(hs: np.ndarray, cnr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Noisy copy of ``hs`` at the requested channel-to-noise ratio.

    The noise is i.i.d. circularly-symmetric complex Gaussian whose per-entry
    variance is this sample's mean per-entry power divided by 10^(cnr/10).
    """
    if not np.isfinite(cnr_db):
        raise ParameterError(f"cnr_db must be finite, got {cnr_db}")
    power = float(np.mean(np.abs(hs) ** 2))
    if power == 0.0:
        raise DegenerateSampleError("all-zero channel matrix: noise power undefined")
    sigma2 = power * 10.0 ** (-float(cnr_db) / 10.0)
    noise = rng.standard_normal(hs.shape) + 1j * rng.standard_normal(hs.shape)
    return hs + np.sqrt(sigma2 / 2.0) * noise


def normalize_and_split(noisy: np.ndarray, clean: np.ndarray):
    """Split into (input, label, scale): 2-channel float32 images in [-1, 1].

    The scale is the max absolute real/imaginary component of the noisy
    matrix and divides both matrices, so input and label stay consistent and
    multiplying by the scale recovers the physical values.
    """
    if noisy.shape != clean.shape:
        raise DimensionError(f"noisy shape {noisy.shape} != clean shape {clean.shape}")
    parts = np.stack([noisy.real, noisy.imag])
    scale = float(np.max(np.abs(parts)))
    if scale == 0.0:
        raise DegenerateSampleError("all-zero noisy matrix cannot be normalized")
    inp = (parts / scale).astype(np.float32)
    lab = (np.stack([clean.real, clean.imag]) / scale).astype(np.float32)
    return inp, lab, np.float32(scale)


def recombine(split: np.ndarray, scale: float) -> np.ndarray:
    """De-normalize a 2-channel split image back to a complex matrix."""
    arr = np.asarray(split, dtype=np.float64) * float(scale)
    return arr[0] + 1j * arr[1]


@dataclass
class ChannelDataset:
    """A stack of (noisy input, clean label) pairs at one CNR."""

    inputs: np.ndarray          # (n, 2, n_cc, n_t) float32
    labels: np.ndarray          # (n, 2, n_cc, n_t) float32
    scales: np.ndarray          # (n,) float32
    cnr_db: float
    master_seed: int
    params: GeneratorParams
    index_offset: int = 0

    def __post_init__(self):
        if self.inputs.shape != self.labels.shape or self.inputs.shape[0] != self.scales.shape[0]:
            raise DimensionError("inputs, labels and scales disagree on sample count")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_cc(self) -> int:
        return self.inputs.shape[2]

    @property
    def n_t(self) -> int:
        return self.inputs.shape[3]


def make_sample(params: GeneratorParams, cnr_db: float, master_seed: int, index: int):
    """One (input, label, scale) triple; fully determined by (seed, index, cnr)."""
    chan_rng = seeds.stream(master_seed, seeds.CHANNEL, index)
    noise_rng = seeds.stream(master_seed, seeds.NOISE, index, seeds.cnr_key(cnr_db))
    h = generate_channel(params, chan_rng)
    hs = truncate(to_angular_delay(h), params.n_cc)
    noisy = add_noise(hs, cnr_db, noise_rng)
    return normalize_and_split(noisy, hs)


def make_dataset(params: GeneratorParams, n_samples: int, cnr_db: float,
                 master_seed: int, index_offset: int = 0) -> ChannelDataset:
    """Generate ``n_samples`` consecutive samples starting at ``index_offset``.

    Every sample derives its own random streams from (seed, global index), so
    splits with disjoint offsets never share randomness and any degree of
    parallel generation would produce the identical dataset.
    """
    params.validate()
    if n_samples < 1:
        raise ParameterError("dataset needs at least one sample")
    shape = (n_samples, 2, params.n_cc, params.n_t)
    inputs = np.empty(shape, dtype=np.float32)
    labels = np.empty(shape, dtype=np.float32)
    scales = np.empty(n_samples, dtype=np.float32)
    for i in range(n_samples):
        inputs[i], labels[i], scales[i] = make_sample(params, cnr_db, master_seed, index_offset + i)
    return ChannelDataset(inputs, labels, scales, float(cnr_db), master_seed, params, index_offset)


def empirical_cnr_db(ds: ChannelDataset) -> float:
    """Measured CNR: mean sample power over mean noise power, in dB."""
    noise = ds.inputs.astype(np.float64) - ds.labels.astype(np.float64)
    num = (ds.labels.astype(np.float64) ** 2).sum(axis=(1, 2, 3))
    den = (noise ** 2).sum(axis=(1, 2, 3))
    return float(10.0 * np.log10(np.mean(num / den)))


# ---------------------------------------------------------------------------
# dataset files
#
# magic "ACNT", version u16, u32 n_c/n_t/n_cc/count, f64 cnr_db, u64 seed,
# generator params (u32 cluster count, then per cluster f64 delay center,
# angle center, delay spread, angle spread, power), then per sample: f32
# scale, label tensor, input tensor (each 2*n_cc*n_t little-endian float32,
# channel-major row-major).  All integers little-endian.
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"ACNT"
DATASET_VERSION = 1


def dataset_header_size(n_clusters: int) -> int:
    return 4 + 2 + 4 * 4 + 8 + 8 + 4 + n_clusters * 5 * 8


def dataset_file_size(n_clusters: int, n_samples: int, n_cc: int, n_t: int) -> int:
    return dataset_header_size(n_clusters) + n_samples * (4 + 2 * 2 * n_cc * n_t * 4)


def write_dataset(ds: ChannelDataset, path) -> None:
    if len(ds) == 0:
        raise ParameterError("refusing to write an empty dataset")
    p = ds.params
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<H", DATASET_VERSION))
        f.write(struct.pack("<4I", p.n_c, p.n_t, p.n_cc, len(ds)))
        f.write(struct.pack("<d", float(ds.cnr_db)))
        f.write(struct.pack("<Q", int(ds.master_seed) & 0xFFFFFFFFFFFFFFFF))
        f.write(struct.pack("<I", p.n_clusters))
        for i in range(p.n_clusters):
            f.write(struct.pack("<5d", p.delay_centers[i], p.angle_centers[i],
                                p.delay_spreads[i], p.angle_spreads[i], p.cluster_powers[i]))
        for i in range(len(ds)):
            f.write(struct.pack("<f", float(ds.scales[i])))
            f.write(np.ascontiguousarray(ds.labels[i], dtype=_ROW_MAJOR_F32).tobytes())
            f.write(np.ascontiguousarray(ds.inputs[i], dtype=_ROW_MAJOR_F32).tobytes())


def _read_exact(f: BufferedReader, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DataFormatError(f"truncated dataset file: wanted {n} bytes for {what} "
                              f"at offset {f.tell() - len(buf)}")
    return buf


def read_dataset(path) -> ChannelDataset:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != DATASET_MAGIC:
            raise DataFormatError(f"bad magic {magic!r} at offset 0, expected {DATASET_MAGIC!r}")
        (version,) = struct.unpack("<H", _read_exact(f, 2, "version"))
        if version != DATASET_VERSION:
            raise DataFormatError(f"unsupported dataset version {version} at offset 4")
        n_c, n_t, n_cc, count = struct.unpack("<4I", _read_exact(f, 16, "dimensions"))
        (cnr_db,) = struct.unpack("<d", _read_exact(f, 8, "cnr"))
        (seed,) = struct.unpack("<Q", _read_exact(f, 8, "seed"))
        (n_clusters,) = struct.unpack("<I", _read_exact(f, 4, "cluster count"))
        cols = ([], [], [], [], [])
        for _ in range(n_clusters):
            vals = struct.unpack("<5d", _read_exact(f, 40, "cluster parameters"))
            for c, v in zip(cols, vals):
                c.append(v)
        params = GeneratorParams(n_c=n_c, n_t=n_t, n_cc=n_cc,
                                 delay_centers=tuple(cols[0]), angle_centers=tuple(cols[1]),
                                 delay_spreads=tuple(cols[2]), angle_spreads=tuple(cols[3]),
                                 cluster_powers=tuple(cols[4]))
        shape = (count, 2, n_cc, n_t)
        tensor_bytes = 2 * n_cc * n_t * 4
        inputs = np.empty(shape, dtype=np.float32)
        labels = np.empty(shape, dtype=np.float32)
        scales = np.empty(count, dtype=np.float32)
        for i in range(count):
            (scales[i],) = struct.unpack("<f", _read_exact(f, 4, f"sample {i} scale"))
            labels[i] = np.frombuffer(_read_exact(f, tensor_bytes, f"sample {i} label"),
                                      dtype=_ROW_MAJOR_F32).reshape(2, n_cc, n_t)
            inputs[i] = np.frombuffer(_read_exact(f, tensor_bytes, f"sample {i} input"),
                                      dtype=_ROW_MAJOR_F32).reshape(2, n_cc, n_t)
        trailing = f.read(1)
        if trailing:
            raise DataFormatError(f"unexpected trailing bytes at offset {f.tell() - 1}")
    return ChannelDataset(inputs, labels, scales, cnr_db, seed, params)
