"""Synthetic ground truth, SDR/NSDR metrics and the method comparison harness."""
import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

from .score import NoteEvent, group_notes, parse_notes, sort_notes
from .signal import AudioClip, DEFAULT_SAMPLE_RATE

log = logging.getLogger(__name__)

SDR_CAP = 100.0
METHODS = ("A", "B", "C", "D")
METHOD_NAMES = {
    "A": "NMF baseline",
    "B": "autoencoder",
    "C": "autoencoder, non-negative decoder",
    "D": "autoencoder, non-negative decoder, multi-frame input",
}
TOY_PIECES = ("toy_piece_1.csv", "toy_piece_2.csv", "toy_piece_3.csv")
TOY_SEEDS = (101, 202, 303)


@dataclass
class SynthConfig:
    sample_rate: int = DEFAULT_SAMPLE_RATE
    partials: int = 8
    partial_decay: float = 1.0
    attack: float = 0.01
    decay: float = 0.1
    sustain_level: float = 0.7
    release: float = 0.1
    note_amplitude: float = 0.25
    timbre_seed: int = 0
    peak: float = 0.9

    def __post_init__(self):
        for name in ("sample_rate", "partials", "partial_decay", "attack", "decay",
                     "sustain_level", "release", "note_amplitude", "peak"):
            if getattr(self, name) <= 0:
                raise ValueError(f"SynthConfig.{name} must be positive")


def midi_to_hz(pitch):
    return 440.0 * 2.0 ** ((pitch - 69) / 12.0)


def _timbre(instrument_id, config):
    rng = np.random.default_rng([config.timbre_seed, instrument_id])
    phases = rng.uniform(0.0, 2.0 * np.pi, config.partials)
    gains = rng.uniform(0.6, 1.4, config.partials)
    return phases, gains


def adsr(t, duration, config):
    """Envelope at times ``t`` (seconds from onset) for a note held ``duration`` s."""
    a, d, s = config.attack, config.decay, config.sustain_level

    def held(tt):
        return np.interp(tt, [0.0, a, a + d], [0.0, 1.0, s], right=s)

    env = held(t)
    level = held(duration)
    rel = t > duration
    env[rel] = level * np.clip(1.0 - (t[rel] - duration) / config.release, 0.0, None)
    return env


def render_note(note, config, length):
    sr = config.sample_rate
    out = np.zeros(length)
    start = int(round(note.onset_time * sr))
    stop = min(length, int(np.ceil((note.offset_time + config.release) * sr)))
    if stop <= start:
        return out
    t = np.arange(stop - start) / sr
    f0 = midi_to_hz(note.midi_pitch)
    phases, gains = _timbre(note.instrument_id, config)
    wave = np.zeros_like(t)
    for p in range(1, config.partials + 1):
        if p * f0 >= sr / 2:
            break
        amp = gains[p - 1] * p ** (-config.partial_decay)
        wave += amp * np.sin(2.0 * np.pi * p * f0 * t + phases[p - 1])
    out[start:stop] = config.note_amplitude * wave * adsr(t, note.offset_time - note.onset_time,
                                                           config)
    return out


def synthesize(notes, groups=None, config=None):
    """Render notes additively; returns ``(mixture, stems)``.

    ``groups`` maps a name to a list of notes (default: group by tag). One
    gain normalises the mixture peak and is applied to every stem, and the
    mixture is the sum of the scaled stems, so it equals their sum exactly.
    """
    config = config or SynthConfig()
    if groups is None:
        groups = group_notes(notes, "tag")
    sr = config.sample_rate
    end = max((n.offset_time + config.release for n in notes), default=0.0)
    length = max(1, int(np.ceil(end * sr)) + 1)
    stems = {}
    for name, members in groups.items():
        stem = np.zeros(length)
        for note in sort_notes(members):
            stem += render_note(note, config, length)
        stems[name] = stem
    total = sum(stems.values()) if stems else np.zeros(length)
    peak = np.max(np.abs(total)) if np.size(total) else 0.0
    gain = config.peak / peak if peak > 0 else 1.0
    stems = {name: s * gain for name, s in stems.items()}
    mixture = np.zeros(length)
    for s in stems.values():
        mixture = mixture + s
    return AudioClip(mixture, sr), {k: AudioClip(v, sr) for k, v in stems.items()}


def _samples(x):
    return np.asarray(getattr(x, "samples", x), dtype=np.float64)


def sdr(reference, estimate):
    """SDR in dB after projecting the estimate onto the reference.

    Clamped to ``[-100, 100]``; +100 means the error energy vanished and
    -100 that nothing of the reference was recovered.
    """
    s, e = _samples(reference), _samples(estimate)
    if s.shape != e.shape:
        raise ValueError(f"reference and estimate lengths differ: {s.shape} vs {e.shape}")
    ss = float(s @ s)
    if ss == 0.0:
        raise ValueError("reference signal is identically zero")
    target = (float(e @ s) / ss) * s
    err = e - target
    num, den = float(target @ target), float(err @ err)
    # a silent (or orthogonal) estimate recovers nothing, even with zero error energy
    if num == 0.0:
        return -SDR_CAP
    if den == 0.0:
        return SDR_CAP
    return float(np.clip(10.0 * np.log10(num / den), -SDR_CAP, SDR_CAP))


def nsdr(reference, estimate, mixture):
    """SDR gain over using the unprocessed mixture as the estimate."""
    return sdr(reference, estimate) - sdr(reference, mixture)


def oracle_masks(stems, window_len, hop, eps=1e-10):
    """Ideal ratio masks from ground-truth stem magnitudes."""
    from .signal import magnitude, stft

    mags = {name: magnitude(stft(clip, window_len, hop)) for name, clip in stems.items()}
    denom = sum(mags.values()) + eps
    return {name: m / denom for name, m in mags.items()}


def oracle_separation(mixture, stems, window_len, hop):
    from .signal import istft, stft

    X = stft(mixture, window_len, hop)
    masks = oracle_masks(stems, window_len, hop)
    return {name: istft(X.with_values(m * X.complex)) for name, m in masks.items()}


# toy dataset --------------------------------------------------------------

def _voice(rng, tag, lo, hi, start_pitch, durations, gaps, total):
    notes = []
    t, pitch = 0.0, start_pitch
    while True:
        dur = float(rng.choice(durations))
        if t + dur > total:
            break
        notes.append(NoteEvent(0, int(pitch), round(t, 3), round(t + dur, 3), tag))
        t += dur + float(rng.choice(gaps))
        step = int(rng.choice([-5, -4, -3, -2, -1, 1, 2, 3, 4, 5]))
        pitch = pitch + step if lo <= pitch + step <= hi else pitch - step
    return notes


def generate_toy_piece(seed, duration=10.0):
    """Two-voice piece: right hand in MIDI 60-84, left hand in 40-59."""
    rng = np.random.default_rng(seed)
    right = _voice(rng, "right", 60, 84, int(rng.integers(64, 80)),
                   [0.5, 0.75, 1.0, 1.25], [0.0, 0.25], duration)
    left = _voice(rng, "left", 40, 59, int(rng.integers(43, 56)),
                  [1.0, 1.5, 2.0], [0.0, 0.5], duration)
    return sort_notes(right + left)


def load_toy_piece(index):
    """Bundled toy piece ``index`` in 1..3."""
    text = resources.files("weaksep").joinpath("data", TOY_PIECES[index - 1]).read_text("utf-8")
    return parse_notes(io.StringIO(text))


# experiment harness ---------------------------------------------------------

@dataclass
class Piece:
    name: str
    notes: list
    groups: dict = None

    def __post_init__(self):
        if self.groups is None:
            self.groups = group_notes(self.notes, "tag")


@dataclass
class EvalReport:
    piece: str
    method: str
    sdr: dict = field(default_factory=dict)
    nsdr: dict = field(default_factory=dict)
    status: str = "ok"
    config: dict = field(default_factory=dict)

    @property
    def mean_nsdr(self):
        return float(np.mean(list(self.nsdr.values()))) if self.nsdr else float("nan")


def evaluate_stems(references, estimates, mixture):
    """Per-group SDR and NSDR for every reference group that is not silent."""
    out_sdr, out_nsdr = {}, {}
    for name, ref in references.items():
        if not np.any(_samples(ref)):
            continue
        est = estimates[name]
        out_sdr[name] = sdr(ref, est)
        out_nsdr[name] = out_sdr[name] - sdr(ref, mixture)
    return out_sdr, out_nsdr


def run_experiment(dataset, methods=("A", "B", "C", "D"), config=None, synth_config=None,
                   include_oracle=False):
    """Synthesize, label, train, separate and score every (piece, method).

    A training failure marks that report ``failed`` and the run continues.
    Reports come back sorted by (piece, method).
    """
    from .pipeline import PipelineConfig, run_method

    config = config or PipelineConfig()
    synth_config = synth_config or SynthConfig(timbre_seed=config.sub_seed("synth"))
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
    reports = []
    echo = config.to_dict()
    for piece in dataset:
        mixture, refs = synthesize(piece.notes, piece.groups, synth_config)
        if include_oracle:
            est = oracle_separation(mixture, refs, config.window, config.hop)
            s, ns = evaluate_stems(refs, est, mixture)
            reports.append(EvalReport(piece.name, "oracle", s, ns, "ok", echo))
        for method in methods:
            try:
                result = run_method(method, mixture, piece.notes, piece.groups, config)
            except (FloatingPointError, ValueError) as exc:
                log.warning("%s / %s failed: %s", piece.name, method, exc)
                reports.append(EvalReport(piece.name, method, status=f"failed: {exc}",
                                          config=echo))
                continue
            s, ns = evaluate_stems(refs, result.stems, mixture)
            reports.append(EvalReport(piece.name, method, s, ns, "ok", echo))
    return sorted(reports, key=lambda r: (r.piece, r.method))


def average_reports(reports):
    """Mean NSDR/SDR per method over all pieces and groups of successful runs."""
    rows = {}
    for r in reports:
        if r.status != "ok":
            continue
        acc = rows.setdefault(r.method, {"sdr": [], "nsdr": []})
        acc["sdr"].extend(r.sdr.values())
        acc["nsdr"].extend(r.nsdr.values())
    return {m: {"sdr": float(np.mean(v["sdr"])), "nsdr": float(np.mean(v["nsdr"]))}
            for m, v in sorted(rows.items())}


REPORT_FIELDS = ("piece", "method", "group", "sdr_db", "nsdr_db", "status")


def reports_to_csv(reports):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_FIELDS)
    for r in reports:
        if r.status != "ok":
            writer.writerow([r.piece, r.method, "", "", "", r.status])
            continue
        for group in r.nsdr:
            writer.writerow([r.piece, r.method, group, f"{r.sdr[group]:.4f}",
                             f"{r.nsdr[group]:.4f}", r.status])
    for method, avg in average_reports(reports).items():
        writer.writerow(["(mean)", method, "", f"{avg['sdr']:.4f}", f"{avg['nsdr']:.4f}", "ok"])
    return buf.getvalue()


def reports_to_table(reports):
    lines = [f"{'piece':<16}{'method':<8}{'group':<10}{'SDR dB':>9}{'NSDR dB':>9}  status"]
    for r in reports:
        if r.status != "ok":
            lines.append(f"{r.piece:<16}{r.method:<8}{'':<10}{'':>9}{'':>9}  {r.status}")
        for group in r.nsdr:
            lines.append(f"{r.piece:<16}{r.method:<8}{group:<10}{r.sdr[group]:>9.2f}"
                         f"{r.nsdr[group]:>9.2f}  {r.status}")
    for method, avg in average_reports(reports).items():
        label = METHOD_NAMES.get(method, method)
        lines.append(f"mean {method} ({label}): SDR {avg['sdr']:.2f} dB, "
                     f"NSDR {avg['nsdr']:.2f} dB")
    return "\n".join(lines) + "\n"


def report_dicts(reports):
    return [asdict(r) for r in reports]
