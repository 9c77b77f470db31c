"""Synthetic massive-MIMO OFDM channels from a geometric multipath model.

Users are dropped uniformly in a box, every remote radio head (RRH) carries a
uniform planar array in its local x-z plane with broadside along +y, and the
scene holds a fixed set of point scatterers. Each snapshot perturbs scatterer
and user positions with Gaussian jitter; labels keep the nominal position.

Datasets round-trip through a small little-endian binary format (see
:func:`save_dataset`).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    DatasetFormatError,
    DatasetHeaderError,
    DatasetTruncatedError,
    DatasetVersionError,
    DegenerateGeometry,
    InvalidArgument,
)

SPEED_OF_LIGHT = 299_792_458.0

DATASET_MAGIC = b"SWITDS1\0"
DATASET_VERSION = 1
_HEADER = struct.Struct("<IIIIIddd")

# named RNG sub-streams, mixed into the root seed
_STREAM_SCENE = 1
_STREAM_USER = 2
_STREAM_SNAPSHOT = 3
_STREAM_SAMPLE = 4


@dataclass(frozen=True)
class ScenarioConfig:
    region_min: tuple[float, float, float] = (0.0, 0.0, 1.0)
    region_max: tuple[float, float, float] = (20.0, 20.0, 2.0)
    num_users: int = 4096
    num_scatterers: int = 12
    rrh_positions: tuple[tuple[float, float, float], ...] = ((10.0, -5.0, 3.0),)
    array_rows: int = 4
    array_cols: int = 4
    carrier_freq: float = 3.5e9
    subcarrier_spacing: float = 625e3
    num_subcarriers: int = 32
    element_spacing: float | None = None  # None -> half wavelength
    scatterer_jitter_var: float = 0.01
    user_jitter_var: float = 1e-4
    snapshots: int = 1
    snr_db: float | None = 20.0  # None -> noiseless
    los_enabled: bool = True
    spot_grid: tuple[int, int] = (2, 2)  # (cells along y, cells along x)
    scatterer_margin: float = 5.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = np.asarray(self.region_min, float), np.asarray(self.region_max, float)
        if lo.shape != (3,) or hi.shape != (3,):
            raise InvalidArgument("region bounds must be 3D points")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise InvalidArgument("region bounds must be finite")
        if np.any(hi[:2] <= lo[:2]) or hi[2] < lo[2]:
            raise InvalidArgument("empty region")
        if self.num_users < 1:
            raise InvalidArgument("num_users must be >= 1")
        if self.num_scatterers < 0:
            raise InvalidArgument("num_scatterers must be >= 0")
        if len(self.rrh_positions) < 1:
            raise InvalidArgument("at least one RRH is required")
        for b in self.rrh_positions:
            if len(b) != 3 or not all(math.isfinite(c) for c in b):
                raise InvalidArgument(f"bad RRH position {b!r}")
        if self.array_rows < 1 or self.array_cols < 1:
            raise InvalidArgument("array needs at least one element")
        if self.num_subcarriers < 2:
            raise InvalidArgument("need at least two subcarriers")
        if not self.subcarrier_spacing > 0 or not self.carrier_freq > 0:
            raise InvalidArgument("frequencies must be positive")
        if self.element_spacing is not None and not self.element_spacing > 0:
            raise InvalidArgument("element spacing must be positive")
        if self.scatterer_jitter_var < 0 or self.user_jitter_var < 0:
            raise InvalidArgument("jitter variances must be >= 0")
        if self.snapshots < 1:
            raise InvalidArgument("snapshots must be >= 1")
        if self.spot_grid[0] < 1 or self.spot_grid[1] < 1:
            raise InvalidArgument("spot grid needs at least one cell")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_freq

    @property
    def spacing(self) -> float:
        return self.wavelength / 2 if self.element_spacing is None else self.element_spacing

    @property
    def antennas_per_rrh(self) -> int:
        return self.array_rows * self.array_cols

    @property
    def num_antennas(self) -> int:
        return len(self.rrh_positions) * self.antennas_per_rrh

    @property
    def spot_count(self) -> int:
        return self.spot_grid[0] * self.spot_grid[1]

    def geometry(self) -> "ArrayGeometry":
        return ArrayGeometry(
            rows=self.array_rows,
            cols=self.array_cols,
            spacing=self.spacing,
            wavelength=self.wavelength,
            subcarrier_spacing=self.subcarrier_spacing,
        )


@dataclass(frozen=True)
class ArrayGeometry:
    rows: int  # M_z
    cols: int  # M_x
    spacing: float
    wavelength: float
    subcarrier_spacing: float

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise InvalidArgument("array needs at least one element")
        if self.rows * self.cols > 1 << 20:
            raise InvalidArgument("array dimension overflow")
        if not (self.spacing > 0 and self.wavelength > 0 and self.subcarrier_spacing > 0):
            raise InvalidArgument("geometry lengths must be positive")


@dataclass(frozen=True)
class PathParams:
    complex_gain: complex
    delay: float  # seconds
    azimuth: float  # radians, (-pi, pi]
    elevation: float  # radians, [0, pi]


@dataclass(frozen=True)
class ChannelSample:
    channel: np.ndarray  # (N_r, N_c) complex
    position: np.ndarray  # (3,)
    spot_label: int
    pathloss_db: float
    snapshot_index: int | None


def _check_angles(*angles: float) -> None:
    if not all(np.all(np.isfinite(a)) for a in angles):
        raise InvalidArgument("angles must be finite")


def steering_vector_x(azimuth, elevation, cols: int, spacing: float, wavelength: float) -> np.ndarray:
    """Horizontal steering vector, entry m = exp(j k d m sin(el) sin(az))."""
    if cols < 1 or not wavelength > 0:
        raise InvalidArgument("need cols >= 1 and a positive wavelength")
    _check_angles(azimuth, elevation)
    phase = 2 * np.pi / wavelength * spacing * np.sin(elevation) * np.sin(azimuth)
    return np.exp(1j * phase * np.arange(cols))


def steering_vector_z(elevation, rows: int, spacing: float, wavelength: float) -> np.ndarray:
    if rows < 1 or not wavelength > 0:
        raise InvalidArgument("need rows >= 1 and a positive wavelength")
    _check_angles(elevation)
    phase = 2 * np.pi / wavelength * spacing * np.cos(elevation)
    return np.exp(1j * phase * np.arange(rows))


def array_response(azimuth: float, elevation: float, geometry: ArrayGeometry) -> np.ndarray:
    """UPA response a_z(el) kron a_x(az, el), length rows*cols."""
    a_x = steering_vector_x(azimuth, elevation, geometry.cols, geometry.spacing, geometry.wavelength)
    a_z = steering_vector_z(elevation, geometry.rows, geometry.spacing, geometry.wavelength)
    return np.kron(a_z, a_x)


def _array_responses(azimuth: np.ndarray, elevation: np.ndarray, geometry: ArrayGeometry) -> np.ndarray:
    # vectorized over paths: (P,) -> (P, rows*cols), same element order as np.kron
    k = 2 * np.pi / geometry.wavelength * geometry.spacing
    px = k * np.sin(elevation) * np.sin(azimuth)
    pz = k * np.cos(elevation)
    ax = np.exp(1j * px[:, None] * np.arange(geometry.cols))
    az = np.exp(1j * pz[:, None] * np.arange(geometry.rows))
    return (az[:, :, None] * ax[:, None, :]).reshape(len(azimuth), -1)


def arrival_angles(source, rrh) -> tuple[float, float]:
    """(azimuth, elevation) of the direction rrh -> source in the array frame.

    Azimuth is measured from broadside (+y) towards +x, elevation from +z.
    """
    v = np.asarray(source, float) - np.asarray(rrh, float)
    r = float(np.linalg.norm(v))
    if r == 0.0:
        raise DegenerateGeometry("source coincides with the array")
    az = math.atan2(v[0], v[1])
    if az == -math.pi:
        az = math.pi
    el = math.acos(max(-1.0, min(1.0, v[2] / r)))
    return az, el


def path_params(user, rrh, scatterer, carrier_freq: float, los: bool, phase: float = 0.0) -> PathParams:
    """Delay, arrival angles and complex gain of one propagation path.

    The gain magnitude is the free-space amplitude over the total path length.
    Its phase is the scatterer phase ``phase`` plus the carrier rotation
    -2*pi*f_c*tau; the result is wrapped to (-pi, pi].
    """
    u = np.asarray(user, float)
    b = np.asarray(rrh, float)
    if los:
        length = float(np.linalg.norm(u - b))
        if length == 0.0:
            raise DegenerateGeometry("user coincides with the RRH")
        source = u
    else:
        p = np.asarray(scatterer, float)
        d1 = float(np.linalg.norm(u - p))
        d2 = float(np.linalg.norm(p - b))
        if d1 == 0.0 or d2 == 0.0:
            raise DegenerateGeometry("scatterer coincides with an endpoint")
        length = d1 + d2
        source = p
    tau = length / SPEED_OF_LIGHT
    wavelength = SPEED_OF_LIGHT / carrier_freq
    amplitude = wavelength / (4 * np.pi * SPEED_OF_LIGHT * tau)
    angle = _wrap_phase(phase - 2 * np.pi * carrier_freq * tau)
    az, el = arrival_angles(source, b)
    return PathParams(complex(amplitude * np.exp(1j * angle)), tau, az, el)


def _wrap_phase(x):
    # maps onto (-pi, pi]
    return np.pi - np.mod(np.pi - x, 2 * np.pi)


def channel_vector(n: int, paths: Sequence[PathParams], geometry: ArrayGeometry) -> np.ndarray:
    """Channel of subcarrier ``n`` (zero-based): sum of eta * exp(j2pi n df tau) * a."""
    if geometry is None:
        raise InvalidArgument("geometry is required")
    if n < 0:
        raise InvalidArgument("subcarrier index must be >= 0")
    h = np.zeros(geometry.rows * geometry.cols, dtype=complex)
    if not paths:
        return h
    gains = np.array([p.complex_gain for p in paths])
    delays = np.array([p.delay for p in paths])
    a = _array_responses(
        np.array([p.azimuth for p in paths]), np.array([p.elevation for p in paths]), geometry
    )
    weights = gains * np.exp(1j * 2 * np.pi * n * geometry.subcarrier_spacing * delays)
    return weights @ a


def channel_matrix(paths: Sequence[PathParams], geometry: ArrayGeometry, num_subcarriers: int) -> np.ndarray:
    """Stack of :func:`channel_vector` over subcarriers 0..N_c-1, shape (N_ant, N_c)."""
    if not paths:
        return np.zeros((geometry.rows * geometry.cols, num_subcarriers), dtype=complex)
    gains = np.array([p.complex_gain for p in paths])
    delays = np.array([p.delay for p in paths])
    a = _array_responses(
        np.array([p.azimuth for p in paths]), np.array([p.elevation for p in paths]), geometry
    )
    freq = np.exp(1j * 2 * np.pi * geometry.subcarrier_spacing * np.outer(delays, np.arange(num_subcarriers)))
    return np.einsum("p,pa,pn->an", gains, a, freq)


def apply_uncertainty(
    scatterers: np.ndarray,
    user: np.ndarray,
    scatterer_var: float,
    user_var: float,
    scatterer_rng: np.random.Generator,
    user_rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian jitter on every coordinate of scatterer and user positions."""
    scatterers = np.asarray(scatterers, float)
    user = np.asarray(user, float)
    p = scatterers + math.sqrt(scatterer_var) * scatterer_rng.standard_normal(scatterers.shape)
    u = user + math.sqrt(user_var) * user_rng.standard_normal(user.shape)
    return p, u


def add_estimation_noise(h: np.ndarray, snr_db: float | None, rng: np.random.Generator) -> np.ndarray:
    """Add circularly-symmetric Gaussian noise at ``snr_db`` relative to the mean power of ``h``."""
    if snr_db is None or snr_db == math.inf:
        return h
    power = float(np.mean(np.abs(h) ** 2))
    noise_var = power / 10 ** (snr_db / 10)
    w = rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape)
    return h + math.sqrt(noise_var / 2) * w


def spot_label(position, config: ScenarioConfig) -> int:
    """Row-major index of the spot-grid cell holding ``position`` (rows along y)."""
    lo, hi = config.region_min, config.region_max
    n_rows, n_cols = config.spot_grid
    col = int((position[0] - lo[0]) / (hi[0] - lo[0]) * n_cols)
    row = int((position[1] - lo[1]) / (hi[1] - lo[1]) * n_rows)
    col = min(max(col, 0), n_cols - 1)
    row = min(max(row, 0), n_rows - 1)
    return row * n_cols + col


def pathloss_db(h: np.ndarray) -> float:
    power = float(np.sum(np.abs(h.astype(np.complex128)) ** 2)) / h.size
    return -10 * math.log10(power)


@dataclass(eq=False)
class Dataset:
    """Column-oriented channel dataset.

    ``channels`` is (R, N_r, N_c) complex64; positions and path loss are stored
    in float32 so that the binary round trip is exact.
    """

    channels: np.ndarray
    positions: np.ndarray
    spot_labels: np.ndarray
    pathloss_db: np.ndarray
    spot_count: int
    deltas: tuple[float, float, float]
    snapshot_index: np.ndarray | None = None
    config: ScenarioConfig | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.channels) == 0:
            raise InvalidArgument("dataset must not be empty")
        if not all(d > 0 for d in self.deltas):
            raise InvalidArgument("normalization constants must be positive")

    def __len__(self) -> int:
        return len(self.channels)

    def __getitem__(self, i: int) -> ChannelSample:
        return ChannelSample(
            channel=self.channels[i],
            position=self.positions[i],
            spot_label=int(self.spot_labels[i]),
            pathloss_db=float(self.pathloss_db[i]),
            snapshot_index=None if self.snapshot_index is None else int(self.snapshot_index[i]),
        )

    def __iter__(self) -> Iterator[ChannelSample]:
        return (self[i] for i in range(len(self)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.spot_count == other.spot_count
            and tuple(self.deltas) == tuple(other.deltas)
            and _same(self.channels, other.channels)
            and _same(self.positions, other.positions)
            and _same(self.spot_labels, other.spot_labels)
            and _same(self.pathloss_db, other.pathloss_db)
        )

    @property
    def num_antennas(self) -> int:
        return self.channels.shape[1]

    @property
    def num_subcarriers(self) -> int:
        return self.channels.shape[2]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            channels=self.channels[idx],
            positions=self.positions[idx],
            spot_labels=self.spot_labels[idx],
            pathloss_db=self.pathloss_db[idx],
            spot_count=self.spot_count,
            deltas=self.deltas,
            snapshot_index=None if self.snapshot_index is None else self.snapshot_index[idx],
            config=self.config,
        )


def _same(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def normalization_constants(channels: np.ndarray) -> tuple[float, float, float]:
    c = channels.astype(np.complex128)
    return (
        float(np.max(np.abs(c.real))),
        float(np.max(np.abs(c.imag))),
        float(np.max(np.abs(c))),
    )


def scene_scatterers(config: ScenarioConfig) -> np.ndarray:
    """Nominal scatterer positions: uniform over the region grown by the margin."""
    rng = np.random.default_rng([config.seed, _STREAM_SCENE])
    lo = np.array(config.region_min, float)
    hi = np.array(config.region_max, float)
    m = config.scatterer_margin
    lo = lo - np.array([m, m, lo[2]])
    hi = hi + np.array([m, m, m / 2])
    return rng.uniform(lo, hi, size=(config.num_scatterers, 3))


def sample_channel(
    user: np.ndarray,
    scatterers: np.ndarray,
    scatterer_phases: np.ndarray,
    config: ScenarioConfig,
) -> np.ndarray:
    """Noiseless (N_r, N_c) channel of one user; per-RRH blocks are stacked."""
    geometry = config.geometry()
    blocks = []
    for b in config.rrh_positions:
        paths = [
            path_params(user, b, p, config.carrier_freq, los=False, phase=ph)
            for p, ph in zip(scatterers, scatterer_phases)
        ]
        if config.los_enabled:
            paths.append(path_params(user, b, None, config.carrier_freq, los=True))
        blocks.append(channel_matrix(paths, geometry, config.num_subcarriers))
    return np.concatenate(blocks, axis=0)


def generate_dataset(config: ScenarioConfig) -> Dataset:
    """R*T labelled samples, ordered user-major then snapshot.

    Every sample draws from its own RNG stream keyed by (seed, sample index),
    so the result does not depend on evaluation order.
    """
    nominal = scene_scatterers(config)
    snapshots = []
    for t in range(config.snapshots):
        rng = np.random.default_rng([config.seed, _STREAM_SNAPSHOT, t])
        jittered = nominal + math.sqrt(config.scatterer_jitter_var) * rng.standard_normal(nominal.shape)
        phases = rng.uniform(-np.pi, np.pi, size=config.num_scatterers)
        snapshots.append((jittered, phases))

    lo = np.array(config.region_min, float)
    hi = np.array(config.region_max, float)
    total = config.num_users * config.snapshots
    channels = np.empty((total, config.num_antennas, config.num_subcarriers), dtype=np.complex64)
    positions = np.empty((total, 3), dtype=np.float32)
    spots = np.empty(total, dtype=np.int64)
    losses = np.empty(total, dtype=np.float32)
    snap_idx = np.empty(total, dtype=np.int64)
    for r in range(config.num_users):
        u_nominal = np.random.default_rng([config.seed, _STREAM_USER, r]).uniform(lo, hi)
        label = spot_label(u_nominal, config)
        for t, (scat, phases) in enumerate(snapshots):
            k = r * config.snapshots + t
            rng = np.random.default_rng([config.seed, _STREAM_SAMPLE, k])
            u = u_nominal + math.sqrt(config.user_jitter_var) * rng.standard_normal(3)
            h = add_estimation_noise(sample_channel(u, scat, phases, config), config.snr_db, rng)
            if not np.all(np.isfinite(h)):
                raise InvalidArgument(f"non-finite channel for sample {k}")
            channels[k] = h
            positions[k] = u_nominal
            spots[k] = label
            losses[k] = pathloss_db(channels[k])
            snap_idx[k] = t
    return Dataset(
        channels=channels,
        positions=positions,
        spot_labels=spots,
        pathloss_db=losses,
        spot_count=config.spot_count,
        deltas=normalization_constants(channels),
        snapshot_index=snap_idx,
        config=config,
    )


def _record_dtype(n_ant: int, n_sub: int) -> np.dtype:
    return np.dtype(
        [("u", "<f4", (3,)), ("spot", "<u4"), ("pl", "<f4"), ("h", "<f4", (2 * n_ant * n_sub,))]
    )


def save_dataset(dataset: Dataset, path) -> None:
    """Write the binary format.

    Layout: magic ``SWITDS1\\0``; header ``<u32 version, u32 R, u32 N_r,
    u32 N_c, u32 spot_count, f64 d_re, f64 d_im, f64 d_abs>``; then R records of
    ``f32 u[3], u32 spot, f32 pathloss_db, f32 h[2*N_r*N_c]`` with the channel
    flattened antenna-major and re/im interleaved.
    """
    n, n_ant, n_sub = dataset.channels.shape
    rec = np.zeros(n, dtype=_record_dtype(n_ant, n_sub))
    rec["u"] = dataset.positions
    rec["spot"] = dataset.spot_labels
    rec["pl"] = dataset.pathloss_db
    rec["h"] = dataset.channels.astype(np.complex64).reshape(n, -1).view(np.float32)
    header = _HEADER.pack(DATASET_VERSION, n, n_ant, n_sub, dataset.spot_count, *dataset.deltas)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(header)
        f.write(rec.tobytes())
    tmp.replace(path)


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: not a SWITDS1 dataset")
    off = len(DATASET_MAGIC)
    if len(raw) < off + _HEADER.size:
        raise DatasetHeaderError(f"{path}: header is incomplete")
    version, n, n_ant, n_sub, spot_count, *deltas = _HEADER.unpack_from(raw, off)
    if version != DATASET_VERSION:
        raise DatasetVersionError(f"{path}: version {version}, expected {DATASET_VERSION}")
    if n == 0 or n_ant == 0 or n_sub == 0 or spot_count == 0:
        raise DatasetHeaderError(f"{path}: zero-sized dimension in header")
    if not all(math.isfinite(d) and d > 0 for d in deltas):
        raise DatasetHeaderError(f"{path}: invalid normalization constants")
    dtype = _record_dtype(n_ant, n_sub)
    body = raw[off + _HEADER.size :]
    if len(body) < n * dtype.itemsize:
        raise DatasetTruncatedError(f"{path}: payload holds {len(body)} of {n * dtype.itemsize} bytes")
    if len(body) > n * dtype.itemsize:
        raise DatasetHeaderError(f"{path}: trailing bytes after {n} records")
    rec = np.frombuffer(body, dtype=dtype, count=n)
    channels = np.ascontiguousarray(rec["h"]).view(np.complex64).reshape(n, n_ant, n_sub)
    spots = rec["spot"].astype(np.int64)
    if np.any(spots >= spot_count):
        raise DatasetHeaderError(f"{path}: spot label outside [0, {spot_count})")
    return Dataset(
        channels=channels,
        positions=np.ascontiguousarray(rec["u"]),
        spot_labels=spots,
        pathloss_db=np.ascontiguousarray(rec["pl"]),
        spot_count=spot_count,
        deltas=tuple(deltas),
    )
