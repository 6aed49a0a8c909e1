"""Two synthetic pseudo-languages over a shared 20-symbol acoustic
inventory, for exercising cross-language encoder transfer and multitask
training at desk scale.

Each symbol is an 80 ms tone or chirp (log-spaced carriers, 300-6000 Hz);
a word is a 2-3 symbol string; an utterance concatenates a word template
drawn from an intent's grammar, with short silences between words and
white noise over everything. Languages A (rich: 40 words) and B (low
resource: 16 words) share the symbol inventory but have disjoint lexicons
and grammars, so an encoder trained on A meets familiar acoustics and an
unfamiliar language in B.

Every intent owns a head word that appears in all of its templates and in
no other intent's, and the heads' symbol sets are pairwise distinct, so
intent identity is recoverable from which symbols occur.
"""

from __future__ import annotations

import json
import pathlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import make_rng
from .errors import ConfigError, InputError
from .features import Waveform, write_wav

SYMBOLS = "abcdefghijklmnopqrst"
SAMPLE_RATE = 16000
SEGMENT_MS = 80
SEGMENT_SAMPLES = SAMPLE_RATE * SEGMENT_MS // 1000
RAMP_SAMPLES = SAMPLE_RATE * 5 // 1000
AMPLITUDE = 0.3
F_LOW, F_HIGH = 300.0, 6000.0


def symbol_frequency(index: int) -> float:
    return float(F_LOW * (F_HIGH / F_LOW) ** (index / (len(SYMBOLS) - 1)))


def symbol_template(symbol: str) -> np.ndarray:
    """The 80 ms segment for one symbol: even symbols are pure tones, odd
    ones linear up-chirps to 1.3x the carrier. 5 ms cosine ramps at both
    ends keep segment joins click-free."""
    idx = SYMBOLS.index(symbol)
    f0 = symbol_frequency(idx)
    t = np.arange(SEGMENT_SAMPLES, dtype=np.float64) / SAMPLE_RATE
    if idx % 2 == 0:
        phase = 2.0 * np.pi * f0 * t
    else:
        dur = SEGMENT_SAMPLES / SAMPLE_RATE
        phase = 2.0 * np.pi * (f0 * t + (0.3 * f0) * t * t / (2.0 * dur))
    seg = AMPLITUDE * np.sin(phase)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(RAMP_SAMPLES) / RAMP_SAMPLES)
    seg[:RAMP_SAMPLES] *= ramp
    seg[-RAMP_SAMPLES:] *= ramp[::-1]
    return seg.astype(np.float32)


@dataclass
class SyntheticTaskSpec:
    language: str
    lexicon: list[str]  # each word is a 2-3 symbol string
    grammar: dict[str, list[list[str]]]  # intent -> word-sequence templates
    noise_level: float = 0.1
    seed: int = 0
    gap_ms: int = 40
    lead_ms: int = 40

    def __post_init__(self):
        if not self.lexicon:
            raise ConfigError("lexicon is empty")
        for w in self.lexicon:
            if not w or any(c not in SYMBOLS for c in w):
                raise ConfigError(f"word '{w}' uses symbols outside the inventory")
        if len(set(self.lexicon)) != len(self.lexicon):
            raise ConfigError("lexicon words must be unique")
        if not self.grammar:
            raise ConfigError("grammar has no intents")
        lex = set(self.lexicon)
        for intent, templates in self.grammar.items():
            if not templates:
                raise ConfigError(f"intent '{intent}' has no templates")
            for tpl in templates:
                bad = [w for w in tpl if w not in lex]
                if bad:
                    raise ConfigError(f"intent '{intent}' uses unknown words {bad}")
        if self.noise_level < 0:
            raise ConfigError("noise_level must be nonnegative")

    @property
    def intents(self) -> list[str]:
        return sorted(self.grammar)


def _sample_word(rng, alphabet: str, taken: set[str], must_include: str = "") -> str:
    """2-3 symbol word over `alphabet`, unique across `taken`. must_include
    forces one occurrence of that symbol at a random position."""
    while True:
        length = int(rng.integers(2, 4))
        chars = list(must_include)
        chars += [alphabet[rng.integers(0, len(alphabet))] for _ in range(length - len(chars))]
        rng.shuffle(chars)
        word = "".join(chars)
        if word not in taken:
            taken.add(word)
            return word


def _sample_words(rng, count: int, taken: set[str]) -> list[str]:
    return [_sample_word(rng, SYMBOLS, taken) for _ in range(count)]


def _build_grammar(rng, words: list[str], n_intents: int) -> dict[str, list[list[str]]]:
    # heads must have pairwise-distinct symbol sets so max-pooled symbol
    # presence separates the intents; words holding a symbol that appears
    # nowhere else in the lexicon make the cleanest heads, so they go first
    counts: dict[str, int] = {}
    for w in words:
        for c in set(w):
            counts[c] = counts.get(c, 0) + 1
    flagged = [w for w in words if any(counts[c] == 1 for c in set(w))]
    candidates = flagged + [w for w in words if w not in flagged]
    heads, seen_sets = [], []
    for w in candidates:
        s = frozenset(w)
        if all(s != t for t in seen_sets):
            heads.append(w)
            seen_sets.append(s)
        if len(heads) == n_intents:
            break
    if len(heads) < n_intents:
        raise ConfigError(f"lexicon supports only {len(heads)} separable intents")
    fillers = [w for w in words if w not in heads]

    def pick() -> str:
        return fillers[int(rng.integers(0, len(fillers)))]

    grammar = {}
    for i, head in enumerate(heads):
        templates = [
            [head, pick()],
            [head, pick(), pick()],
            [pick(), head],
        ]
        grammar[f"intent_{i}"] = templates
    return grammar


def default_task_specs(seed: int = 0, noise_level: float = 0.1,
                       n_intents: int = 8) -> tuple[SyntheticTaskSpec, SyntheticTaskSpec]:
    """Language A (40 words) and language B (16 words) with disjoint
    lexicons over the shared symbol inventory.

    Each intent's head word carries a signature symbol that no other word
    in its language uses, so symbol-level evidence fully separates the
    intents. The two languages share the signature symbols (same inventory,
    the way real languages share phones) while sharing no words, which is
    what makes encoder transfer between them measurable.
    """
    if not 0 < n_intents <= len(SYMBOLS) - 2:
        raise ConfigError(f"n_intents must lie in [1, {len(SYMBOLS) - 2}], got {n_intents}")
    rng = make_rng(seed)
    order = [SYMBOLS[i] for i in rng.permutation(len(SYMBOLS))]
    signatures = order[:n_intents]
    free = "".join(sorted(order[n_intents:]))
    taken: set[str] = set()

    def lexicon(count: int) -> list[str]:
        if count < n_intents:
            raise ConfigError(f"lexicon of {count} words cannot host {n_intents} intents")
        heads = [_sample_word(rng, free, taken, must_include=c) for c in signatures]
        fillers = [_sample_word(rng, free, taken) for _ in range(count - n_intents)]
        return heads + fillers

    words_a = lexicon(40)
    words_b = lexicon(16)
    spec_a = SyntheticTaskSpec(
        language="A",
        lexicon=words_a,
        grammar=_build_grammar(rng, words_a, n_intents),
        noise_level=noise_level,
        seed=seed * 1000 + 1,
    )
    spec_b = SyntheticTaskSpec(
        language="B",
        lexicon=words_b,
        grammar=_build_grammar(rng, words_b, n_intents),
        noise_level=noise_level,
        seed=seed * 1000 + 2,
    )
    return spec_a, spec_b


@dataclass
class Utterance:
    utt_id: str
    samples: np.ndarray  # f32 mono at 16 kHz
    text: str
    intent: str
    spans: list[tuple[int, str]] = field(default_factory=list)  # (start, symbol)


def _assemble(spec: SyntheticTaskSpec, words: list[str], rng) -> tuple[np.ndarray, list]:
    gap = np.zeros(SAMPLE_RATE * spec.gap_ms // 1000, dtype=np.float32)
    lead = np.zeros(SAMPLE_RATE * spec.lead_ms // 1000, dtype=np.float32)
    pieces, spans = [lead], []
    cursor = lead.size
    for wi, word in enumerate(words):
        if wi:
            pieces.append(gap)
            cursor += gap.size
        for sym in word:
            seg = symbol_template(sym)
            spans.append((cursor, sym))
            pieces.append(seg)
            cursor += seg.size
    pieces.append(lead.copy())
    samples = np.concatenate(pieces)
    if spec.noise_level > 0:
        samples = samples + (spec.noise_level * rng.standard_normal(samples.size)).astype(
            np.float32
        )
    return samples.astype(np.float32), spans


def synth_generate(spec: SyntheticTaskSpec, n: int) -> list[Utterance]:
    """Deterministic function of (spec, n): a shorter run is a prefix of a
    longer one with the same spec."""
    if n < 1:
        raise InputError(f"utterance count must be >= 1, got {n}")
    rng = make_rng(spec.seed)
    intents = spec.intents
    out = []
    for i in range(n):
        intent = intents[int(rng.integers(0, len(intents)))]
        templates = spec.grammar[intent]
        words = templates[int(rng.integers(0, len(templates)))]
        samples, spans = _assemble(spec, words, rng)
        out.append(
            Utterance(
                utt_id=f"{spec.language}{spec.seed}_{i:05d}",
                samples=samples,
                text=" ".join(words),
                intent=f"{spec.language}_{intent}",
                spans=spans,
            )
        )
    return out


def matched_filter_symbols(samples: np.ndarray, spans) -> list[str]:
    """Oracle decoder: correlate each span against all symbol templates
    and pick the best match. Independent of the model stack."""
    templates = {s: symbol_template(s).astype(np.float64) for s in SYMBOLS}
    out = []
    for start, _ in spans:
        seg = samples[start : start + SEGMENT_SAMPLES].astype(np.float64)
        scores = {s: float(np.dot(seg, t)) for s, t in templates.items()}
        out.append(max(scores, key=scores.get))
    return out


def write_synth_dataset(out_dir, spec: SyntheticTaskSpec, n: int,
                        manifest_name: str = "manifest.jsonl") -> pathlib.Path:
    """Generate n utterances, write WAVs plus a manifest, and return the
    manifest path."""
    out_dir = pathlib.Path(out_dir)
    wav_dir = out_dir / "wavs"
    wav_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / manifest_name
    with open(manifest, "w", encoding="utf-8") as fh:
        for utt in synth_generate(spec, n):
            rel = f"wavs/{utt.utt_id}.wav"
            write_wav(out_dir / rel, Waveform(utt.samples))
            fh.write(
                json.dumps(
                    {"id": utt.utt_id, "audio": rel, "text": utt.text, "intent": utt.intent}
                )
                + "\n"
            )
    return manifest
