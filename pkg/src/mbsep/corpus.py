"""Synthetic source families, SNR-controlled mixing, and corpus generation.

Four deterministic source families stand in for real speech/noise/music
recordings at desk scale (8 kHz mono, ~1 s segments):

* ``speech_a`` / ``speech_b`` -- harmonic stacks with a slow amplitude
  modulation envelope. The two families draw fundamentals and modulation
  rates from disjoint sub-ranges, so they model two distinct "speaker
  populations".
* ``noise``    -- spectrally tilted (pink-ish) filtered noise.
* ``music``    -- a sustained three-note equal-tempered chord with vibrato.

Every generated sample is a pure function of (family, duration, rate, seed),
and each corpus example keys its own seeds off (corpus seed, example index),
so generation order never matters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import Signal, wav_read, wav_write

FAMILIES = ("speech_a", "speech_b", "noise", "music")

MANIFEST_NAME = "manifest.csv"
MANIFEST_FIELDS = ("id", "kind", "snr_db", "seed_fg", "seed_bg", "path_mix", "path_s", "path_e")

PEAK_LEVEL = 0.5
# family metadata: disjoint fundamental and AM-rate sub-ranges for the two
# speech-like families (asserted by tests)
SPEECH_A_F0_RANGE = (105.0, 175.0)
SPEECH_B_F0_RANGE = (205.0, 295.0)
SPEECH_A_MOD_RANGE = (2.2, 4.3)
SPEECH_B_MOD_RANGE = (5.7, 7.8)


class DegenerateSourceError(ValueError):
    """Raised when a source signal has no energy to mix with."""


@dataclass
class LabeledExample:
    """Mixture plus its ground-truth source pair (background stored post-scaling)."""

    mixture: Signal
    source_s: Signal
    source_e: Signal
    snr_db: float

    def __post_init__(self):
        sigs = (self.mixture, self.source_s, self.source_e)
        if len({len(s) for s in sigs}) != 1:
            raise ValueError("mixture and sources must share length")
        if len({s.sample_rate for s in sigs}) != 1:
            raise ValueError("mixture and sources must share sample rate")

    @classmethod
    def from_sources(cls, source_s: Signal, source_e: Signal, snr_db: float) -> "LabeledExample":
        mixture = Signal(source_s.samples + source_e.samples, source_s.sample_rate)
        return cls(mixture, source_s, source_e, snr_db)


@dataclass
class UnlabeledExample:
    """A mixture without ground truth."""

    mixture: Signal


@dataclass
class CorpusSpec:
    foreground_family: str
    background_family: str
    count: int
    duration_s: float = 1.0
    sample_rate: int = 8000
    snr_lo_db: float = 0.0
    snr_hi_db: float = 5.0
    seed: int = 0
    labeled: bool = True

    def __post_init__(self):
        for fam in (self.foreground_family, self.background_family):
            if fam not in FAMILIES:
                raise ValueError(f"unknown source family {fam!r}; valid: {', '.join(FAMILIES)}")
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if self.snr_lo_db > self.snr_hi_db:
            raise ValueError(f"snr_lo_db {self.snr_lo_db} exceeds snr_hi_db {self.snr_hi_db}")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")


def mix_at_snr(s: Signal, e: Signal, snr_db: float) -> tuple[Signal, Signal]:
    """Scale ``e`` so the s/e energy ratio equals ``snr_db``, then add.

    Returns (mixture, scaled_e); mixture[i] == s[i] + scaled_e[i] exactly.
    """
    if len(s) != len(e):
        raise ValueError(f"source lengths differ: {len(s)} vs {len(e)}")
    if s.sample_rate != e.sample_rate:
        raise ValueError(f"sample rates differ: {s.sample_rate} vs {e.sample_rate}")
    energy_e = e.energy()
    if energy_e == 0.0:
        raise DegenerateSourceError("interference signal has zero energy")
    gain = np.sqrt(s.energy() / energy_e) * 10.0 ** (-snr_db / 20.0)
    scaled = Signal(gain * e.samples, e.sample_rate)
    mixture = Signal(s.samples + scaled.samples, s.sample_rate)
    return mixture, scaled


def draw_source_params(family: str, rng: np.random.Generator) -> dict:
    """Draw the per-utterance random parameters of one source family.

    Exposed so tests can recover generator metadata (e.g. the fundamental
    frequency) for a given seed; :func:`synth_source` uses the same draws.
    """
    if family == "speech_a" or family == "speech_b":
        f0_lo, f0_hi = SPEECH_A_F0_RANGE if family == "speech_a" else SPEECH_B_F0_RANGE
        mod_lo, mod_hi = SPEECH_A_MOD_RANGE if family == "speech_a" else SPEECH_B_MOD_RANGE
        params = {
            "f0_hz": rng.uniform(f0_lo, f0_hi),
            "mod_hz": rng.uniform(mod_lo, mod_hi),
            "mod_depth": rng.uniform(0.55, 0.85),
            "mod_phase": rng.uniform(0.0, 2.0 * np.pi),
            "n_harmonics": 0,  # fixed below once f0 is known
        }
        return params
    if family == "noise":
        return {
            "tilt": rng.uniform(0.8, 1.6),
        }
    if family == "music":
        return {
            "root_midi": int(rng.integers(45, 70)),
            "minor": bool(rng.integers(0, 2)),
            "vibrato_hz": rng.uniform(4.5, 6.5),
            "vibrato_depth": rng.uniform(0.002, 0.006),
        }
    raise ValueError(f"unknown source family {family!r}; valid: {', '.join(FAMILIES)}")


def _peak_normalize(x: np.ndarray) -> np.ndarray:
    return x * (PEAK_LEVEL / np.max(np.abs(x)))


def _harmonic_stack(t, f0, rng, amp_exponent=1.15, max_hz_fraction=0.95):
    """Sum of harmonics of f0 with 1/h^p amplitudes and random phases.

    The fundamental carries no amplitude jitter and higher harmonics are
    jittered in [0.7, 1.2], which keeps the fundamental the largest single
    spectral line even under the worst draw.
    """
    nyquist = max_hz_fraction * 0.5 / (t[1] - t[0])
    n_harm = max(1, min(40, int(nyquist / f0)))
    h = np.arange(1, n_harm + 1)
    amps = h.astype(np.float64) ** -amp_exponent
    jitter = rng.uniform(0.7, 1.2, size=n_harm)
    jitter[0] = 1.0
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_harm)
    # (n_harm, T) sin table evaluated in one vectorized call
    waves = np.sin(2.0 * np.pi * np.outer(h * f0, t) + phases[:, None])
    return (amps * jitter) @ waves


def synth_source(family: str, duration_s: float, sample_rate: int, seed: int) -> Signal:
    """Generate one deterministic source utterance, peak-normalized to 0.5."""
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    rng = np.random.default_rng(seed)
    params = draw_source_params(family, rng)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate

    if family in ("speech_a", "speech_b"):
        carrier = _harmonic_stack(t, params["f0_hz"], rng)
        env = 1.0 - params["mod_depth"] * (
            0.5 + 0.5 * np.sin(2.0 * np.pi * params["mod_hz"] * t + params["mod_phase"])
        )
        x = carrier * env
    elif family == "noise":
        white = rng.standard_normal(n)
        spec = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
        shaped = np.maximum(freqs, 50.0) ** (-params["tilt"] / 2.0)
        spec *= shaped
        spec[0] = 0.0  # zero DC keeps the sample mean at zero
        x = np.fft.irfft(spec, n=n)
    elif family == "music":
        offsets = (0, 3, 7) if params["minor"] else (0, 4, 7)
        vib = np.sin(2.0 * np.pi * params["vibrato_hz"] * t)
        x = np.zeros(n)
        for off in offsets:
            f = 440.0 * 2.0 ** ((params["root_midi"] + off - 69) / 12.0)
            level = rng.uniform(0.8, 1.2)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            # FM vibrato: peak frequency deviation = vibrato_depth * f
            beta = params["vibrato_depth"] * f / params["vibrato_hz"]
            inst_phase = 2.0 * np.pi * f * t + beta * vib
            for h in (1, 2, 3, 4):
                x += level * h ** -1.5 * np.sin(h * inst_phase + phase * h)
    else:
        raise ValueError(f"unknown source family {family!r}; valid: {', '.join(FAMILIES)}")

    return Signal(_peak_normalize(x), sample_rate)


def example_seeds(corpus_seed: int, index: int) -> tuple[int, int, float]:
    """Derive (seed_fg, seed_bg, snr_unit) for example ``index`` of a corpus.

    Keyed so that distinct corpus seeds and distinct indices never collide,
    and so examples can be generated in any order (or in parallel).
    """
    ss = np.random.SeedSequence([int(corpus_seed) & 0x7FFFFFFFFFFFFFFF, int(index)])
    state = ss.generate_state(5, dtype=np.uint64)
    seed_fg = int(state[0])
    seed_bg = int(state[1])
    # 53-bit uniform in [0, 1) for the SNR draw
    snr_unit = float(state[2] >> np.uint64(11)) / float(1 << 53)
    return seed_fg, seed_bg, snr_unit


def synth_example(spec: CorpusSpec, index: int) -> tuple[LabeledExample, int, int]:
    """Generate example ``index`` of a corpus (always with ground truth in memory).

    If the raw mixture peak exceeds the WAV-safe level the whole triple is
    scaled down jointly, which preserves both additivity and the SNR.
    """
    seed_fg, seed_bg, snr_unit = example_seeds(spec.seed, index)
    fg = synth_source(spec.foreground_family, spec.duration_s, spec.sample_rate, seed_fg)
    bg = synth_source(spec.background_family, spec.duration_s, spec.sample_rate, seed_bg)
    snr_db = spec.snr_lo_db + snr_unit * (spec.snr_hi_db - spec.snr_lo_db)
    mixture, scaled_bg = mix_at_snr(fg, bg, snr_db)
    peak = np.max(np.abs(mixture.samples))
    if peak > 0.99:
        scale = 0.99 / peak
        fg = Signal(fg.samples * scale, fg.sample_rate)
        scaled_bg = Signal(scaled_bg.samples * scale, scaled_bg.sample_rate)
        mixture = Signal(fg.samples + scaled_bg.samples, fg.sample_rate)
    return LabeledExample(mixture, fg, scaled_bg, snr_db), seed_fg, seed_bg


def build_corpus(spec: CorpusSpec, out_dir) -> Path:
    """Materialize a corpus as WAV files plus a manifest CSV; returns the manifest path.

    Labeled corpora store mixture, foreground, and scaled background per
    example; unlabeled corpora store the mixture only.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / MANIFEST_NAME
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for k in range(spec.count):
            ex, seed_fg, seed_bg = synth_example(spec, k)
            ex_id = f"ex{k:06d}"
            path_mix = f"{ex_id}_mix.wav"
            wav_write(ex.mixture, out_dir / path_mix)
            if spec.labeled:
                path_s = f"{ex_id}_s.wav"
                path_e = f"{ex_id}_e.wav"
                wav_write(ex.source_s, out_dir / path_s)
                wav_write(ex.source_e, out_dir / path_e)
            else:
                path_s = ""
                path_e = ""
            writer.writerow([
                ex_id,
                "labeled" if spec.labeled else "unlabeled",
                f"{ex.snr_db:.6f}",
                seed_fg,
                seed_bg,
                path_mix,
                path_s,
                path_e,
            ])
    return manifest_path


@dataclass
class Corpus:
    """A loaded corpus; samples kept as int16 to stay compact in memory."""

    directory: Path
    sample_rate: int
    labeled: bool
    mixtures: list[np.ndarray]
    sources_s: list[np.ndarray]
    sources_e: list[np.ndarray]
    snrs_db: list[float]

    def __len__(self) -> int:
        return len(self.mixtures)

    @property
    def name(self) -> str:
        return self.directory.name

    def mixture_f64(self, i: int) -> np.ndarray:
        return self.mixtures[i].astype(np.float64) / 32767.0

    def sources_f64(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        if not self.labeled:
            raise ValueError(f"corpus {self.name} is unlabeled; no ground truth available")
        return (
            self.sources_s[i].astype(np.float64) / 32767.0,
            self.sources_e[i].astype(np.float64) / 32767.0,
        )

    def labeled_example(self, i: int) -> LabeledExample:
        s, e = self.sources_f64(i)
        return LabeledExample(
            Signal(self.mixture_f64(i), self.sample_rate),
            Signal(s, self.sample_rate),
            Signal(e, self.sample_rate),
            self.snrs_db[i],
        )

    def unlabeled_example(self, i: int) -> UnlabeledExample:
        return UnlabeledExample(Signal(self.mixture_f64(i), self.sample_rate))


def _read_pcm(path: Path) -> tuple[np.ndarray, int]:
    sig = wav_read(path)
    return np.round(sig.samples * 32767.0).astype(np.int16), sig.sample_rate


def load_corpus(directory) -> Corpus:
    """Load a corpus directory produced by :func:`build_corpus`."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest at {manifest_path}")
    mixtures, sources_s, sources_e, snrs = [], [], [], []
    labeled = True
    rate = None
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ValueError(f"{manifest_path}: unexpected manifest header {reader.fieldnames}")
        for row in reader:
            pcm, r = _read_pcm(directory / row["path_mix"])
            rate = rate or r
            mixtures.append(pcm)
            snrs.append(float(row["snr_db"]))
            if row["kind"] == "labeled":
                s, _ = _read_pcm(directory / row["path_s"])
                e, _ = _read_pcm(directory / row["path_e"])
                sources_s.append(s)
                sources_e.append(e)
            else:
                labeled = False
    if not mixtures:
        raise ValueError(f"{manifest_path}: empty corpus")
    return Corpus(directory, rate, labeled, mixtures, sources_s, sources_e, snrs)
