"""Manifest ingestion, feature preparation, and batching.

Manifests are line-delimited JSON, one utterance per line:

    {"id": "utt1", "audio": "wavs/utt1.wav", "text": "ab cd", "intent": "A_intent_0"}

Exactly one of "audio" (a 16 kHz mono WAV to run through the front-end) or
"features" (a precomputed feature container) must be present. Relative
paths resolve against the manifest's directory.

A Batch is a padded transport container. Models always consume utterances
sliced back to their true lengths, so the padding is arithmetically inert:
extending it cannot change any loss bit.
"""

from __future__ import annotations

import json
import pathlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import make_rng
from .errors import ConfigError, InputError, ValidationError
from .features import FeatureConfig, extract_features, load_features, read_wav
from .models import PAD_ID, IntentLabelSet, Vocabulary


@dataclass
class ManifestEntry:
    utt_id: str
    text: str
    intent: str
    audio: str | None = None
    features: str | None = None

    def __post_init__(self):
        if (self.audio is None) == (self.features is None):
            raise ValidationError(
                f"utterance '{self.utt_id}': exactly one of audio/features required"
            )
        if not self.utt_id:
            raise ValidationError("utterance id must be nonempty")


def load_manifest(path, labels: IntentLabelSet | None = None) -> list[ManifestEntry]:
    path = pathlib.Path(path)
    root = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: malformed JSON ({exc.msg})")
            if not isinstance(obj, dict):
                raise InputError(f"{path}:{lineno}: expected a JSON object")
            for key in ("id", "text", "intent"):
                if key not in obj:
                    raise InputError(f"{path}:{lineno}: missing field '{key}'")
            if obj["id"] in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate utterance id '{obj['id']}'")
            seen.add(obj["id"])
            audio = obj.get("audio")
            feats = obj.get("features")
            try:
                entry = ManifestEntry(
                    utt_id=str(obj["id"]),
                    text=str(obj["text"]),
                    intent=str(obj["intent"]),
                    audio=str(root / audio) if audio else None,
                    features=str(root / feats) if feats else None,
                )
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}")
            if labels is not None and entry.intent not in labels.names:
                raise ValidationError(
                    f"{path}:{lineno}: unknown intent '{entry.intent}'"
                )
            entries.append(entry)
    return entries


def intent_label_set(entries) -> IntentLabelSet:
    return IntentLabelSet(sorted({e.intent for e in entries}))


def transcript_corpus(entries) -> list[str]:
    return [e.text for e in entries]


@dataclass
class PreparedExample:
    utt_id: str
    feats: np.ndarray  # (T', stacked dim) f32, front-end already applied
    tokens: np.ndarray  # int64, [BOS, transcript..., EOS]
    intent_id: int


def prepare_examples(entries, vocab: Vocabulary, labels: IntentLabelSet,
                     feat_cfg: FeatureConfig | None = None) -> list[PreparedExample]:
    feat_cfg = feat_cfg or FeatureConfig()
    out = []
    for e in entries:
        if e.audio is not None:
            feats = extract_features(read_wav(e.audio), feat_cfg).frames
        else:
            feats = load_features(e.features).frames
        tokens = np.asarray(vocab.with_sentinels(vocab.encode(e.text)), dtype=np.int64)
        out.append(
            PreparedExample(
                utt_id=e.utt_id,
                feats=feats,
                tokens=tokens,
                intent_id=labels.id_of(e.intent),
            )
        )
    return out


@dataclass
class Batch:
    features: np.ndarray  # (B, T_max, d) f32, zero-padded
    feat_lengths: np.ndarray  # (B,)
    tokens: np.ndarray  # (B, L_max) int64, PAD-filled
    token_lengths: np.ndarray  # (B,)
    intent_ids: np.ndarray  # (B,)
    utt_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        b, t_max, _ = self.features.shape
        if self.tokens.shape[0] != b or self.feat_lengths.shape[0] != b:
            raise ValidationError("batch arrays disagree on batch size")
        if self.feat_lengths.max(initial=0) > t_max:
            raise ValidationError("feature length exceeds padded time axis")
        if self.token_lengths.max(initial=0) > self.tokens.shape[1]:
            raise ValidationError("token length exceeds padded token axis")

    def __len__(self) -> int:
        return self.features.shape[0]

    def feats_of(self, i: int) -> np.ndarray:
        return self.features[i, : self.feat_lengths[i]]

    def tokens_of(self, i: int) -> np.ndarray:
        return self.tokens[i, : self.token_lengths[i]]


def _build_batch(group: list[PreparedExample]) -> Batch:
    b = len(group)
    t_max = max(ex.feats.shape[0] for ex in group)
    l_max = max(ex.tokens.shape[0] for ex in group)
    dim = group[0].feats.shape[1]
    feats = np.zeros((b, t_max, dim), dtype=np.float32)
    tokens = np.full((b, l_max), PAD_ID, dtype=np.int64)
    flen = np.zeros(b, dtype=np.int64)
    tlen = np.zeros(b, dtype=np.int64)
    intents = np.zeros(b, dtype=np.int64)
    ids = []
    for i, ex in enumerate(group):
        feats[i, : ex.feats.shape[0]] = ex.feats
        tokens[i, : ex.tokens.shape[0]] = ex.tokens
        flen[i] = ex.feats.shape[0]
        tlen[i] = ex.tokens.shape[0]
        intents[i] = ex.intent_id
        ids.append(ex.utt_id)
    return Batch(feats, flen, tokens, tlen, intents, ids)


def make_batches(examples: list[PreparedExample], batch_size: int, seed: int) -> list[Batch]:
    """Seeded shuffle, then length-bucketed grouping (stable sort by frame
    count keeps the shuffle as tiebreak), then a seeded shuffle of batch
    order. Every example appears exactly once."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if not examples:
        return []
    rng = make_rng(seed)
    perm = rng.permutation(len(examples))
    lengths = np.array([examples[i].feats.shape[0] for i in perm])
    order = perm[np.argsort(lengths, kind="stable")]
    groups = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    groups = [groups[i] for i in rng.permutation(len(groups))]
    return [_build_batch([examples[j] for j in g]) for g in groups]
