"""The four trainable systems: intent classification from speech, the
speech-recognition decoder branch, the multitask composite of both, and
the text-fusion decoder variant.

Intent path: encode, max-pool over time, linear, softmax posterior.
Recognition path: teacher-forced decoder; per-utterance loss is the SUM of
per-position cross-entropies (positions carry equal weight regardless of
utterance length). The multitask objective is slu + lambda * asr computed
from one shared encoder pass. All forwards take a single utterance; the
trainer handles batching and averaging.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import transformer as tf
from .autodiff import Module, Tensor
from .errors import ConfigError, InputError, ValidationError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
MASK_ID = 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<mask>")


class IntentLabelSet:
    """Dense id <-> name map for the intent inventory."""

    def __init__(self, names):
        names = list(names)
        if not names:
            raise ValidationError("intent label set is empty")
        if len(set(names)) != len(names):
            raise ValidationError("intent names must be unique")
        self.names = names
        self._ids = {n: i for i, n in enumerate(names)}

    @property
    def size(self) -> int:
        return len(self.names)

    def id_of(self, name: str) -> int:
        if name not in self._ids:
            raise InputError(f"unknown intent '{name}'")
        return self._ids[name]

    def name_of(self, intent_id: int) -> str:
        if not 0 <= intent_id < len(self.names):
            raise InputError(f"intent id {intent_id} out of range [0, {len(self.names)})")
        return self.names[intent_id]

    def to_metadata(self) -> str:
        return json.dumps(self.names)

    @classmethod
    def from_metadata(cls, blob: str) -> "IntentLabelSet":
        return cls(json.loads(blob))


class Vocabulary:
    """Token inventory with fixed reserved ids: PAD=0, BOS=1, EOS=2, MASK=3.

    `unit` selects the modeling unit: "char" splits transcripts into
    characters (the default), "word" on whitespace.
    """

    def __init__(self, tokens, unit: str = "char"):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED_TOKENS:
            raise ValidationError(f"vocabulary must start with {RESERVED_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ValidationError("vocabulary tokens must be unique")
        if unit not in ("char", "word"):
            raise ConfigError(f"unknown modeling unit '{unit}'")
        self.tokens = tokens
        self.unit = unit
        self._ids = {t: i for i, t in enumerate(tokens)}

    @property
    def size(self) -> int:
        return len(self.tokens)

    @staticmethod
    def _split(text: str, unit: str):
        return list(text) if unit == "char" else text.split()

    @classmethod
    def from_corpus(cls, texts, unit: str = "char") -> "Vocabulary":
        seen = set()
        for text in texts:
            seen.update(cls._split(text, unit))
        return cls(list(RESERVED_TOKENS) + sorted(seen), unit)

    def encode(self, text: str) -> list[int]:
        out = []
        for tok in self._split(text, self.unit):
            if tok not in self._ids:
                raise InputError(f"token '{tok}' not in vocabulary")
            out.append(self._ids[tok])
        return out

    def decode(self, ids) -> str:
        toks = []
        for i in ids:
            if not 0 <= i < self.size:
                raise InputError(f"token id {i} out of range")
            if i >= len(RESERVED_TOKENS):
                toks.append(self.tokens[i])
        return ("" if self.unit == "char" else " ").join(toks)

    def with_sentinels(self, ids) -> list[int]:
        return [BOS_ID] + list(ids) + [EOS_ID]

    def to_metadata(self) -> str:
        return json.dumps({"tokens": self.tokens, "unit": self.unit})

    @classmethod
    def from_metadata(cls, blob: str) -> "Vocabulary":
        obj = json.loads(blob)
        return cls(obj["tokens"], obj["unit"])


@dataclass
class MultiTaskConfig:
    lam: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")


@dataclass
class FusionConfig:
    text_encoder_checkpoint: str
    fusion_projection_dim: int

    def __post_init__(self):
        if self.fusion_projection_dim <= 0:
            raise ConfigError("fusion_projection_dim must be positive")


@dataclass
class LossTerms:
    total: Tensor
    slu: Tensor | None
    asr: Tensor | None
    n_tokens: int  # teacher-forced target positions behind `asr`
    intent_pred: int | None = None  # argmax of the intent logits, when computed


def _strip_and_check_tokens(token_ids) -> np.ndarray:
    """Validate a padded [BOS, transcript..., EOS, PAD...] sequence and
    return it without the trailing padding. Padding never reaches the
    decoder, so extending it cannot change the loss."""
    seq = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    nonpad = np.nonzero(seq != PAD_ID)[0]
    if nonpad.size == 0:
        raise InputError("token sequence is all padding")
    end = nonpad[-1] + 1
    seq = seq[:end]
    if np.any(seq == PAD_ID):
        raise ValidationError("PAD inside the token sequence (only trailing PAD allowed)")
    if seq[0] != BOS_ID:
        raise ValidationError("token sequence must begin with BOS")
    if seq[-1] != EOS_ID:
        raise ValidationError("token sequence must end with EOS")
    if seq.size < 3:
        raise InputError("empty transcript (nothing between BOS and EOS)")
    return seq


def _one_hot(ids: np.ndarray, width: int, dtype) -> Tensor:
    out = np.zeros((ids.size, width), dtype=dtype)
    out[np.arange(ids.size), ids] = 1
    return Tensor(out)


def _sequence_ce(logits: Tensor, targets: np.ndarray) -> Tensor:
    return ad.cross_entropy(logits, _one_hot(targets, logits.shape[-1], logits.data.dtype))


class SluModel(Module):
    """Shared encoder with an intent head and a recognition decoder."""

    def __init__(self, rng, cfg: tf.ModelConfig):
        self.encoder = tf.Encoder(rng, cfg)
        self.intent_head = tf.Linear(rng, cfg.d_model, cfg.intent_count, cfg.dtype)
        self.decoder = tf.Decoder(rng, cfg)
        self._cfg = cfg

    @property
    def config(self) -> tf.ModelConfig:
        return self._cfg

    # -- intent branch

    def _intent_logits(self, enc_out: Tensor) -> Tensor:
        pooled = ad.max_over_axis(enc_out, axis=0)
        return self.intent_head.forward(ad.reshape(pooled, (1, self._cfg.d_model)))

    def slu_forward(self, x: Tensor) -> Tensor:
        """Intent posterior, a length-I probability vector."""
        enc_out = self.encoder.forward(x)
        logits = self._intent_logits(enc_out)
        return ad.reshape(ad.softmax(logits, axis=-1), (self._cfg.intent_count,))

    def slu_loss(self, x: Tensor, intent_id: int) -> Tensor:
        return self.loss_terms(x, intent_id).total

    # -- recognition branch

    def _decode_logits(self, inputs: np.ndarray, enc_out: Tensor, rng=None) -> Tensor:
        return self.decoder.forward(inputs, enc_out, rng)

    def _asr_from_encoding(self, enc_out: Tensor, token_ids, rng=None) -> tuple[Tensor, int]:
        seq = _strip_and_check_tokens(token_ids)
        inputs, targets = seq[:-1], seq[1:]
        logits = self._decode_logits(inputs, enc_out, rng)
        return _sequence_ce(logits, targets), targets.size

    def asr_loss(self, x: Tensor, token_ids) -> Tensor:
        enc_out = self.encoder.forward(x)
        loss, _ = self._asr_from_encoding(enc_out, token_ids)
        return loss

    # -- composite

    def loss_terms(self, x: Tensor, intent_id: int | None, token_ids=None,
                   lam: float | None = None, rng=None) -> LossTerms:
        """One shared encoder pass feeding whichever branches are requested.

        With token_ids absent this is the plain intent objective. With
        token_ids present, lam weights the recognition term. intent_id of
        None drops the intent branch entirely (recognition pretraining);
        at least one branch must be requested.
        """
        if intent_id is None and token_ids is None:
            raise InputError("loss_terms needs an intent id or token ids")
        enc_out = self.encoder.forward(x, rng)
        slu = pred = None
        if intent_id is not None:
            if not 0 <= intent_id < self._cfg.intent_count:
                raise InputError(
                    f"intent id {intent_id} out of range [0, {self._cfg.intent_count})"
                )
            logits = self._intent_logits(enc_out)
            pred = int(np.argmax(logits.data))
            target = _one_hot(np.array([intent_id]), self._cfg.intent_count, enc_out.data.dtype)
            slu = ad.cross_entropy(logits, target)
        if token_ids is None:
            return LossTerms(total=slu, slu=slu, asr=None, n_tokens=0, intent_pred=pred)
        asr, n_tok = self._asr_from_encoding(enc_out, token_ids, rng)
        if slu is None:
            return LossTerms(total=asr, slu=None, asr=asr, n_tokens=n_tok)
        lam = MultiTaskConfig(1.0 if lam is None else float(lam)).lam
        total = ad.add(slu, ad.scale(asr, lam))
        return LossTerms(total=total, slu=slu, asr=asr, n_tokens=n_tok, intent_pred=pred)

    def multitask_loss(self, x: Tensor, token_ids, intent_id: int, lam: float) -> Tensor:
        return self.loss_terms(x, intent_id, token_ids, lam).total

    # -- inference

    def predict_intent(self, x: Tensor) -> int:
        with ad.no_grad():
            return int(np.argmax(self.slu_forward(x).data))

    def greedy_decode(self, x: Tensor, max_len: int = 64) -> list[int]:
        """Argmax decoding from BOS; stops after emitting EOS or max_len
        tokens. Returns the emitted ids (EOS included when produced)."""
        with ad.no_grad():
            enc_out = self.encoder.forward(x)
            seq = [BOS_ID]
            out: list[int] = []
            for _ in range(max_len):
                logits = self._decode_logits(np.asarray(seq), enc_out)
                nxt = int(np.argmax(logits.data[-1]))
                out.append(nxt)
                if nxt == EOS_ID:
                    break
                seq.append(nxt)
        return out


# ---------------------------------------------------------------------------
# text encoder (the fusion branch's frozen language component)


class TextEncoder(Module):
    """Small bidirectional transformer over token sequences, pretrained by
    masked-token prediction. Stands in for a large pretrained language
    model at a size this kit can train on a desk."""

    def __init__(self, rng, cfg: tf.ModelConfig):
        self.embed = ad.glorot_uniform(
            rng, (cfg.vocab_size, cfg.d_model), cfg.vocab_size, cfg.d_model, dtype=cfg.dtype
        )
        self.layers = [tf.EncoderLayer(rng, cfg) for _ in range(cfg.n_enc_layers)]
        self.out_proj = tf.Linear(rng, cfg.d_model, cfg.vocab_size, cfg.dtype)
        self._cfg = cfg

    @property
    def config(self) -> tf.ModelConfig:
        return self._cfg

    def hidden(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens)
        cfg = self._cfg
        emb = ad.embedding_lookup(self.embed, tokens)
        pos = tf.sinusoidal_positions(tokens.shape[0], cfg.d_model, cfg.max_positions, cfg.dtype)
        h = ad.add(emb, pos)
        for layer in self.layers:
            h = layer.forward(h, None)
        return h

    def logits(self, tokens: np.ndarray) -> Tensor:
        return self.out_proj.forward(self.hidden(tokens))


def masked_prediction_loss(model: TextEncoder, tokens: np.ndarray,
                           masked_pos: np.ndarray) -> Tensor:
    """Cross-entropy of the original ids at `masked_pos`, with those
    positions replaced by MASK in the input."""
    tokens = np.asarray(tokens)
    corrupted = tokens.copy()
    corrupted[masked_pos] = MASK_ID
    logits = model.logits(corrupted)
    # constant 0/1 selection matrix picks out the masked rows
    sel = np.zeros((masked_pos.size, tokens.size), dtype=logits.data.dtype)
    sel[np.arange(masked_pos.size), masked_pos] = 1
    picked = ad.matmul(Tensor(sel), logits)
    return _sequence_ce(picked, tokens[masked_pos])


def pretrain_text_encoder(corpus: list[list[int]], cfg: tf.ModelConfig, seed: int = 0,
                          epochs: int = 20, lr: float = 1e-3,
                          mask_rate: float = 0.15,
                          on_epoch=None) -> tuple[TextEncoder, float]:
    """Train a TextEncoder by masked-token prediction (mask_rate of each
    sequence's positions, at least one). Returns the model and the final
    epoch's mean loss per masked position. on_epoch, when given, is called
    as on_epoch(epoch, per_mask_loss) after each epoch (epoch counts from 1)."""
    corpus = [np.asarray(seq, dtype=np.int64) for seq in corpus if len(seq) > 0]
    if not corpus:
        raise InputError("text pretraining corpus is empty")
    model = TextEncoder(ad.make_rng(seed), cfg)
    state = ad.AdamState(lr=lr)
    params = model.named_parameters()
    per_mask = float("inf")
    for epoch in range(epochs):
        rng = ad.derive_rng(seed, epoch)
        total, count = 0.0, 0
        for seq in corpus:
            k = max(1, int(round(mask_rate * seq.size)))
            pos = np.sort(rng.choice(seq.size, size=k, replace=False))
            model.zero_grads()
            loss = masked_prediction_loss(model, seq, pos)
            ad.backward(loss)
            ad.adam_step(params, {n: p.grad for n, p in params.items()}, state)
            total += loss.item()
            count += k
        per_mask = total / count
        if on_epoch is not None:
            on_epoch(epoch + 1, per_mask)
    return model, per_mask


# ---------------------------------------------------------------------------
# fusion model


class FusionModel(SluModel):
    """SluModel whose decoder output is fused, position by position, with a
    frozen text encoder's hidden states before the shared output layer.
    Teacher-forced token inputs go to both components; gradients stop at
    the frozen side."""

    def __init__(self, rng, cfg: tf.ModelConfig, text_encoder: TextEncoder):
        tcfg = text_encoder.config
        if tcfg.vocab_size != cfg.vocab_size:
            raise ConfigError(
                f"text encoder vocab {tcfg.vocab_size} != model vocab {cfg.vocab_size}"
            )
        for p in text_encoder.named_parameters().values():
            if p.trainable or p.requires_grad:
                raise ConfigError("fusion requires a frozen text encoder")
        super().__init__(rng, cfg)
        self.text_encoder = text_encoder
        self.fusion_proj = tf.Linear(rng, cfg.d_model + tcfg.d_model, cfg.d_model, cfg.dtype)

    def fusion_decode(self, tokens: np.ndarray, enc_out: Tensor, rng=None) -> Tensor:
        dec_h = self.decoder.hidden(tokens, enc_out, rng)
        txt_h = self.text_encoder.hidden(tokens)
        fused = self.fusion_proj.forward(ad.concat([dec_h, txt_h], axis=1))
        return self.decoder.out_proj.forward(fused)

    def _decode_logits(self, inputs: np.ndarray, enc_out: Tensor, rng=None) -> Tensor:
        return self.fusion_decode(inputs, enc_out, rng)
