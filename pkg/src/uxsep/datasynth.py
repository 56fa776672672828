"""Synthetic reverberant two-source mixtures.

Rooms, source/microphone geometry, reverberation times, overlap ratios and
mixing SNRs are sampled from fixed ranges. Impulse responses come from a
vectorized image-source model with uniform wall reflectivity solved from the
requested T60 (Eyring relation), truncated at 1.1 * T60. Each mixture is a
sum of convolved sources; training targets are the sources convolved with
either the full reference-mic response (separation) or only its early part
(separation + dereverberation).

Mixing conventions, chosen and fixed here: the SNR is measured at the
reference (first) microphone over the region where both sources are active,
with the first source as the reference; overlap is realized by restricting
each later source to a contiguous active segment.
"""

from __future__ import annotations

import functools
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.signal import butter, fftconvolve, sosfilt

from .io import wav_read, wav_write

SPEED_OF_SOUND = 343.0
EARLY_SECONDS = 0.050
RIR_TAIL_FACTOR = 1.1


@dataclass(frozen=True)
class RoomSpec:
    length: float
    width: float
    height: float
    t60: float

    def __post_init__(self):
        if min(self.length, self.width, self.height) <= 0:
            raise ValueError("room dimensions must be positive")
        if self.t60 <= 0:
            raise ValueError("t60 must be positive")

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    @property
    def surface(self) -> float:
        l, w, h = self.length, self.width, self.height
        return 2.0 * (l * w + l * h + w * h)


@dataclass(frozen=True)
class SceneSpec:
    room: RoomSpec
    source_positions: tuple      # C x (x, y, z)
    mic_positions: tuple         # M x (x, y, z)
    overlap_ratio: float
    snr_db: float
    sample_rate: int = 8000
    duration: float = 4.0
    seed: tuple = (0,)

    def __post_init__(self):
        dims = (self.room.length, self.room.width, self.room.height)
        for pos in self.source_positions:
            for c, ext in zip(pos, dims):
                if not (0.5 <= c <= ext - 0.5):
                    raise ValueError(f"source {pos} closer than 0.5 m to a wall")
        for pos in self.mic_positions:
            for c, ext in zip(pos, dims):
                if not (0.0 < c < ext):
                    raise ValueError(f"microphone {pos} outside the room")
        if not (0.0 < self.overlap_ratio <= 1.0):
            raise ValueError("overlap ratio must be in (0, 1]")

    @property
    def num_sources(self) -> int:
        return len(self.source_positions)

    @property
    def num_mics(self) -> int:
        return len(self.mic_positions)

    @property
    def num_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))


def sample_scene(seed, num_sources: int = 2, num_mics: int = 5,
                 duration: float = 4.0, sample_rate: int = 8000) -> SceneSpec:
    """Draw a scene uniformly from the dataset recipe's ranges: rooms 5-10 m
    by 5-10 m by 2-5 m, T60 0.1-0.5 s, a 5 cm-radius circular array at the
    room center, sources at least 0.5 m from every wall, overlap 5-95%,
    SNR 0-5 dB. Deterministic given the seed."""
    rng = np.random.default_rng(seed)
    room = RoomSpec(length=rng.uniform(5.0, 10.0), width=rng.uniform(5.0, 10.0),
                    height=rng.uniform(2.0, 5.0), t60=rng.uniform(0.1, 0.5))
    center = np.array([room.length / 2, room.width / 2, room.height / 2])
    angles = 2.0 * np.pi * (np.arange(num_mics) / num_mics) + rng.uniform(0, 2 * np.pi)
    mics = tuple(
        tuple(center + 0.05 * np.array([np.cos(a), np.sin(a), 0.0]))
        for a in angles)
    sources = []
    while len(sources) < num_sources:
        pos = np.array([rng.uniform(0.5, room.length - 0.5),
                        rng.uniform(0.5, room.width - 0.5),
                        rng.uniform(0.5, room.height - 0.5)])
        if np.linalg.norm(pos - center) < 0.2:       # resample degenerate draws
            continue
        sources.append(tuple(pos))
    return SceneSpec(room=room, source_positions=tuple(sources),
                     mic_positions=mics, overlap_ratio=rng.uniform(0.05, 0.95),
                     snr_db=rng.uniform(0.0, 5.0), sample_rate=sample_rate,
                     duration=duration, seed=tuple(np.atleast_1d(seed).tolist()))


def reflection_coefficient(room: RoomSpec) -> float:
    """Uniform wall reflection coefficient from the requested T60 via the
    Eyring relation (valid at high absorption, where Sabine's linear formula
    breaks down). Errors if the decay is so fast that the required absorption
    saturates at 1: walls cannot absorb more than everything."""
    gamma = 0.161 * room.volume / (room.surface * room.t60)
    absorption = 1.0 - np.exp(-gamma)
    if absorption >= 1.0:
        raise ValueError(
            f"t60={room.t60} s in this room needs absorption >= 1")
    return float(np.exp(-0.5 * gamma))


def schroeder_decay_db(h: np.ndarray) -> np.ndarray:
    """Backward-integrated energy decay curve in dB, normalized to 0 at t=0."""
    e = np.asarray(h, dtype=np.float64) ** 2
    edc = np.cumsum(e[::-1])[::-1]
    return 10.0 * np.log10(np.maximum(edc / edc[0], 1e-300))


def measure_t60(h: np.ndarray, sample_rate: int,
                fit_range: tuple[float, float] = (-5.0, -25.0)) -> float:
    """Reverberation time from the Schroeder curve: fit the decay slope
    between fit_range dB and extrapolate to -60 dB."""
    db = schroeder_decay_db(h)
    t = np.arange(len(h)) / sample_rate
    hi, lo = fit_range
    mask = (db <= hi) & (db >= lo)
    if mask.sum() < 8:
        return 0.0
    slope = np.polyfit(t[mask], db[mask], 1)[0]
    if slope >= 0:
        return float("inf")
    return -60.0 / slope


@functools.lru_cache(maxsize=256)
def calibrated_beta(room: RoomSpec, sample_rate: int = 8000) -> float:
    """Reflection coefficient tuned so the generated responses actually decay
    at the requested T60.

    The Eyring coefficient systematically overshoots here: the rectangular
    image lattice with uniform walls is not a diffuse field, its late decay
    is dominated by low-order axial paths and comes out 50-70% slow. Eyring
    supplies the initial bracket; bisection against the measured Schroeder
    decay of a probe response closes the gap."""
    dims = np.array([room.length, room.width, room.height])
    src = np.clip(np.array([0.31, 0.57, 0.53]) * dims, 0.5, dims - 0.5)
    mic = np.clip(np.array([0.62, 0.41, 0.49]) * dims, 0.5, dims - 0.5)

    def measured(beta):
        return measure_t60(generate_rir(room, src, mic, sample_rate, beta=beta),
                           sample_rate)

    hi = reflection_coefficient(room)
    for _ in range(4):                      # widen if even Eyring decays fast
        if measured(hi) >= room.t60:
            break
        hi = 0.5 * (1.0 + hi)
    lo = 0.0
    for _ in range(12):
        mid = 0.5 * (lo + hi)
        if measured(mid) < room.t60:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def direct_delay_samples(source, mic, sample_rate: int) -> int:
    d = float(np.linalg.norm(np.asarray(source) - np.asarray(mic)))
    return int(round(d / SPEED_OF_SOUND * sample_rate))


def generate_rir(room: RoomSpec, source, mic, sample_rate: int = 8000,
                 beta: float | None = None) -> np.ndarray:
    """Image-source impulse response from source to mic, truncated at
    1.1 * T60. Each image contributes beta^reflections / (4 pi d) at the
    nearest sample to d / c."""
    if beta is None:
        beta = calibrated_beta(room, sample_rate)
    src = np.asarray(source, dtype=np.float64)
    rcv = np.asarray(mic, dtype=np.float64)
    dims = np.array([room.length, room.width, room.height])
    if np.any(src <= 0) or np.any(src >= dims) or np.any(rcv <= 0) or np.any(rcv >= dims):
        raise ValueError("source and mic must be strictly inside the room")
    n_taps = int(np.ceil(RIR_TAIL_FACTOR * room.t60 * sample_rate)) + 1
    max_dist = n_taps * SPEED_OF_SOUND / sample_rate
    h = np.zeros(n_taps)

    if beta == 0.0:
        d = float(np.linalg.norm(src - rcv))
        tap = int(round(d / SPEED_OF_SOUND * sample_rate))
        if tap < n_taps:
            h[tap] = 1.0 / (4.0 * np.pi * d)
        return h

    # per-axis image coordinates (1-2q)*s + 2nL with reflection count |n-q|+|n|
    coords, refl = [], []
    for axis in range(3):
        n_max = int(np.ceil(max_dist / (2.0 * dims[axis]))) + 1
        n = np.arange(-n_max, n_max + 1)[:, None]
        q = np.array([0, 1])[None, :]
        coords.append(((1 - 2 * q) * src[axis] + 2 * n * dims[axis] - rcv[axis]).ravel())
        refl.append((np.abs(n - q) + np.abs(n)).ravel())
    dx, dy, dz = np.meshgrid(coords[0], coords[1], coords[2], indexing="ij")
    rx, ry, rz = np.meshgrid(refl[0], refl[1], refl[2], indexing="ij")
    dist = np.sqrt(dx * dx + dy * dy + dz * dz).ravel()
    order = (rx + ry + rz).ravel()
    keep = dist <= max_dist
    dist, order = dist[keep], order[keep]
    taps = np.round(dist / SPEED_OF_SOUND * sample_rate).astype(np.int64)
    keep = taps < n_taps
    dist, order, taps = dist[keep], order[keep], taps[keep]
    amps = beta ** order / (4.0 * np.pi * dist)
    np.add.at(h, taps, amps)
    return h


def early_cutoff(source, mic, sample_rate: int) -> int:
    """Last tap index counted as 'early': direct-path delay plus 50 ms."""
    return direct_delay_samples(source, mic, sample_rate) + \
        int(round(EARLY_SECONDS * sample_rate))


def split_rir(h: np.ndarray, cutoff: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact partition of an impulse response into its early part (taps up to
    and including the cutoff) and the late complement."""
    early = np.zeros_like(h)
    late = np.zeros_like(h)
    early[:cutoff + 1] = h[:cutoff + 1]
    late[cutoff + 1:] = h[cutoff + 1:]
    return early, late


@dataclass
class RIRSet:
    """h[m][i]: response from source i to mic m, plus its early/late split."""
    full: list
    early: list
    late: list
    cutoffs: list


def render_rirs(scene: SceneSpec, beta: float | None = None) -> RIRSet:
    full, early, late, cutoffs = [], [], [], []
    for mic in scene.mic_positions:
        f_row, e_row, l_row, c_row = [], [], [], []
        for src in scene.source_positions:
            h = generate_rir(scene.room, src, mic, scene.sample_rate, beta=beta)
            cut = early_cutoff(src, mic, scene.sample_rate)
            e, l = split_rir(h, cut)
            f_row.append(h)
            e_row.append(e)
            l_row.append(l)
            c_row.append(cut)
        full.append(f_row)
        early.append(e_row)
        late.append(l_row)
        cutoffs.append(c_row)
    return RIRSet(full, early, late, cutoffs)


@dataclass
class MixtureResult:
    mixture: np.ndarray          # [M, T]
    targets: np.ndarray          # [C, T] at the reference mic
    activity: np.ndarray         # [C, T] boolean source-active masks
    gains: np.ndarray            # [C] applied source gains


def synthesize_mixture(scene: SceneSpec, sources: np.ndarray,
                       rirs: RIRSet | None = None,
                       dereverb: bool = False) -> MixtureResult:
    """Render the convolutive mixture and per-source training targets.

    sources: [C, T]. The first source stays fully active; each later source
    is restricted to a contiguous segment of length overlap_ratio * T (the
    overlapped region) and scaled to the scene SNR against the first source
    at the reference mic.
    """
    sources = np.atleast_2d(np.asarray(sources, dtype=np.float64))
    C, T = sources.shape
    if C != scene.num_sources:
        raise ValueError(f"{C} signals for {scene.num_sources} scene sources")
    if T != scene.num_samples:
        reshaped = np.zeros((C, scene.num_samples))
        reshaped[:, :min(T, scene.num_samples)] = sources[:, :scene.num_samples]
        sources = reshaped
        T = scene.num_samples
    for i in range(C):
        if not np.any(sources[i]):
            raise ValueError(f"source {i} is silent")
    if rirs is None:
        rirs = render_rirs(scene)

    rng = np.random.default_rng(tuple(scene.seed) + (7,))
    activity = np.zeros((C, T), dtype=bool)
    activity[0] = True
    active = sources.copy()
    seg = max(1, int(round(scene.overlap_ratio * T)))
    for i in range(1, C):
        start = int(rng.integers(0, T - seg + 1))
        mask = np.zeros(T, dtype=bool)
        mask[start:start + seg] = True
        activity[i] = mask
        active[i] = np.where(mask, sources[i], 0.0)

    ref = [fftconvolve(active[i], rirs.full[0][i])[:T] for i in range(C)]
    gains = np.ones(C)
    for i in range(1, C):
        region = activity[i]
        e_ref = float(np.sum(ref[0][region] ** 2))
        e_i = float(np.sum(ref[i][region] ** 2))
        if e_i == 0.0:
            raise ValueError(f"source {i} inaudible in its active region")
        gains[i] = np.sqrt(e_ref / (e_i * 10.0 ** (scene.snr_db / 10.0)))

    mixture = np.zeros((scene.num_mics, T))
    for m in range(scene.num_mics):
        for i in range(C):
            mixture[m] += gains[i] * fftconvolve(active[i], rirs.full[m][i])[:T]
    target_rirs = rirs.early if dereverb else rirs.full
    targets = np.stack([
        gains[i] * fftconvolve(active[i], target_rirs[0][i])[:T] for i in range(C)])
    return MixtureResult(mixture.astype(np.float32), targets.astype(np.float32),
                         activity, gains)


# -- built-in synthetic sources --------------------------------------------

DEFAULT_BANDS = ((200.0, 900.0), (1300.0, 3200.0))


def synthetic_utterance(rng: np.random.Generator, duration: float,
                        sample_rate: int, band: tuple[float, float]) -> np.ndarray:
    """A self-contained stand-in for a clean utterance: band-limited noise
    plus a harmonic tone complex, slowly amplitude-modulated. Sources drawn
    from disjoint bands are spectrally separable by construction."""
    T = int(round(duration * sample_rate))
    t = np.arange(T) / sample_rate
    lo, hi = band
    sos = butter(4, [lo, hi], btype="bandpass", fs=sample_rate, output="sos")
    noise = sosfilt(sos, rng.standard_normal(T))
    f0 = rng.uniform(lo, min(hi, lo * 2.0))
    tones = np.zeros(T)
    k = 1
    while k * f0 < hi and k <= 4:
        tones += np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi)) / k
        k += 1
    env = 0.75 + 0.25 * np.sin(2 * np.pi * rng.uniform(1.0, 4.0) * t
                               + rng.uniform(0, 2 * np.pi))
    x = env * (noise / (np.std(noise) + 1e-12) + 0.5 * tones)
    return (0.2 * x / (np.max(np.abs(x)) + 1e-12)).astype(np.float64)


# -- dataset persistence ---------------------------------------------------

SPLITS = ("train", "val", "test")


def make_dataset(out_dir, n_train: int = 200, n_val: int = 40, n_test: int = 40,
                 seed: int = 0, duration: float = 4.0, num_sources: int = 2,
                 single_channel: bool = False, dereverb: bool = False,
                 anechoic: bool = False, source_pool=None) -> dict:
    """Render and persist a dataset; returns {split: manifest_path}.

    Fully deterministic in (seed, arguments): each mixture owns an RNG stream
    derived from (seed, split, index). source_pool, when given, is a list of
    clean waveforms sampled instead of the built-in synthetic sources.
    """
    if source_pool is not None and len(source_pool) < num_sources:
        raise ValueError("source pool smaller than the number of sources")
    counts = dict(zip(SPLITS, (n_train, n_val, n_test)))
    num_mics = 1 if single_channel else 5
    manifests = {}
    for split_idx, split in enumerate(SPLITS):
        split_dir = os.path.join(out_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        manifest_path = os.path.join(out_dir, f"{split}.jsonl")
        with open(manifest_path, "w") as manifest:
            for idx in range(counts[split]):
                scene = sample_scene((seed, split_idx, idx),
                                     num_sources=num_sources, num_mics=num_mics,
                                     duration=duration)
                rng = np.random.default_rng((seed, split_idx, idx, 1))
                if source_pool is not None:
                    picks = rng.choice(len(source_pool), size=num_sources,
                                       replace=False)
                    sources = np.stack([
                        np.asarray(source_pool[p], dtype=np.float64)[:scene.num_samples]
                        for p in picks])
                else:
                    bands = [DEFAULT_BANDS[i % len(DEFAULT_BANDS)]
                             for i in range(num_sources)]
                    sources = np.stack([
                        synthetic_utterance(rng, duration, scene.sample_rate, b)
                        for b in bands])
                rirs = render_rirs(scene, beta=0.0 if anechoic else None)
                result = synthesize_mixture(scene, sources, rirs=rirs,
                                            dereverb=dereverb)
                mix_path = os.path.join(split_dir, f"mix_{idx:04d}.wav")
                wav_write(mix_path, result.mixture, scene.sample_rate)
                src_paths = []
                for j in range(num_sources):
                    sp = os.path.join(split_dir, f"src{j}_{idx:04d}.wav")
                    wav_write(sp, result.targets[j], scene.sample_rate)
                    src_paths.append(sp)
                record = {
                    "index": idx,
                    "mixture": os.path.relpath(mix_path, out_dir),
                    "targets": [os.path.relpath(p, out_dir) for p in src_paths],
                    "target_kind": "early" if dereverb else "full",
                    "anechoic": anechoic,
                    "snr_db": scene.snr_db,
                    "overlap_ratio": scene.overlap_ratio,
                    "t60": scene.room.t60,
                    "room": [scene.room.length, scene.room.width, scene.room.height],
                    "seed": list(scene.seed),
                }
                manifest.write(json.dumps(record) + "\n")
        manifests[split] = manifest_path
    return manifests


def load_dataset(manifest_path) -> list:
    """Read a manifest back into a list of (mixture [M, T], targets [C, T])."""
    base = os.path.dirname(manifest_path)
    out = []
    with open(manifest_path) as fh:
        for line in fh:
            rec = json.loads(line)
            mix, _ = wav_read(os.path.join(base, rec["mixture"]))
            refs = [wav_read(os.path.join(base, p))[0][0] for p in rec["targets"]]
            out.append((mix, np.stack(refs)))
    return out


def dataset_digest(out_dir) -> str:
    """SHA-256 over every manifest and WAV, for regeneration checks."""
    digest = hashlib.sha256()
    for root, _, files in sorted(os.walk(out_dir)):
        for name in sorted(files):
            path = os.path.join(root, name)
            digest.update(os.path.relpath(path, out_dir).encode())
            with open(path, "rb") as fh:
                digest.update(fh.read())
    return digest.hexdigest()
