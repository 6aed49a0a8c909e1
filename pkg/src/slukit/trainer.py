"""Training orchestration: config files, metrics, the epoch loop, and the
command bodies behind the CLI.

Everything here is deterministic for a fixed seed: batch order comes from
seeds derived per epoch, losses are accumulated in utterance order, and
metrics are written with repr() floats so two runs produce byte-identical
CSV files. Wall-clock columns stay 0.0 unless timing is requested.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import os
import pathlib
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import transformer as tf
from .autodiff import Tensor
from .data import (
    Batch,
    PreparedExample,
    intent_label_set,
    load_manifest,
    make_batches,
    prepare_examples,
    transcript_corpus,
)
from .errors import CheckpointError, ConfigError, RunLockError, ValidationError
from .models import (
    FusionModel,
    IntentLabelSet,
    MultiTaskConfig,
    SluModel,
    TextEncoder,
    Vocabulary,
    pretrain_text_encoder,
)
from .transfer import (
    TransferPolicy,
    load_checkpoint,
    load_into_model,
    save_model,
    transfer_encoder,
)

RUN_DIR_ENV = "SLUKIT_RUN_DIR"
LOCK_NAME = ".slukit.lock"

METRICS_COLUMNS = (
    "epoch",
    "split",
    "intent_accuracy",
    "slu_loss",
    "asr_loss",
    "asr_loss_per_token",
    "total_loss",
    "wall_seconds",
)
METRICS_HEADER = ",".join(METRICS_COLUMNS)


# ---------------------------------------------------------------------------
# metrics rows


@dataclass
class MetricsRow:
    """One line of a metrics CSV. Loss cells are None when the run has no
    such branch; they serialize as empty cells."""

    epoch: int
    split: str
    intent_accuracy: float | None
    slu_loss: float | None
    asr_loss: float | None
    asr_loss_per_token: float | None
    total_loss: float
    wall_seconds: float = 0.0

    def __post_init__(self):
        if self.epoch < 0:
            raise ValidationError(f"epoch must be nonnegative, got {self.epoch}")
        if not self.split or any(c in self.split for c in ",\n\r"):
            raise ValidationError(f"bad split name {self.split!r}")
        if self.intent_accuracy is not None and not 0.0 <= self.intent_accuracy <= 1.0:
            raise ValidationError(f"intent accuracy {self.intent_accuracy} outside [0, 1]")
        for name in ("slu_loss", "asr_loss", "asr_loss_per_token", "total_loss"):
            v = getattr(self, name)
            if v is None:
                continue
            if not np.isfinite(v) or v < 0:
                raise ValidationError(f"{name} must be finite and nonnegative, got {v}")
        if not np.isfinite(self.wall_seconds) or self.wall_seconds < 0:
            raise ValidationError(f"bad wall_seconds {self.wall_seconds}")

    def to_line(self) -> str:
        def cell(v):
            return "" if v is None else repr(float(v))

        return ",".join(
            [
                str(self.epoch),
                self.split,
                cell(self.intent_accuracy),
                cell(self.slu_loss),
                cell(self.asr_loss),
                cell(self.asr_loss_per_token),
                cell(self.total_loss),
                cell(self.wall_seconds),
            ]
        )


def write_metrics(path, rows: list[MetricsRow]) -> pathlib.Path:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = METRICS_HEADER + "\n" + "".join(r.to_line() + "\n" for r in rows)
    path.write_text(text, encoding="utf-8")
    return path


def read_metrics(path) -> list[MetricsRow]:
    lines = pathlib.Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise ValidationError(f"{path}: not a metrics file (bad header)")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != len(METRICS_COLUMNS):
            raise ValidationError(f"{path}: row has {len(parts)} cells, want {len(METRICS_COLUMNS)}")
        f = [None if p == "" else float(p) for p in parts[2:]]
        rows.append(MetricsRow(int(parts[0]), parts[1], f[0], f[1], f[2], f[3], f[4], f[5]))
    return rows


# ---------------------------------------------------------------------------
# config files

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_config_file(path) -> dict[str, str]:
    """Flat key = value file. '#' starts a comment, blank lines are skipped,
    and an `include = other.cfg` line splices in another file (relative to
    the including file); keys seen later override earlier ones."""
    return _parse_config(pathlib.Path(path).resolve(), ())


def _parse_config(path: pathlib.Path, stack: tuple) -> dict[str, str]:
    if path in stack:
        chain = " -> ".join(str(p) for p in (*stack, path))
        raise ConfigError(f"config include cycle: {chain}")
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key == "include":
            inc = (path.parent / value).resolve()
            values.update(_parse_config(inc, (*stack, path)))
        else:
            values[key] = value
    return values


@dataclass
class TrainConfig:
    train_manifest: str | None = None
    valid_manifest: str | None = None
    checkpoint_out: str | None = None
    metrics_out: str | None = None
    init_encoder: str | None = None
    policy: str | None = None
    text_encoder: str | None = None
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    lam: float = 1.0
    patience: int = 0  # 0 disables early stopping
    timing: bool = False
    unit: str = "char"
    mask_rate: float = 0.15
    # model shape
    n_enc_layers: int = 2
    n_dec_layers: int = 1
    n_heads: int = 2
    d_k: int = 16
    d_v: int = 16
    d_model: int = 32
    d_inner: int = 64
    input_dim: int = 320
    max_positions: int = 512
    dropout: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be at least 1, got {self.batch_size}")
        if self.lr <= 0 or not np.isfinite(self.lr):
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {b}")
        if self.adam_eps <= 0:
            raise ConfigError(f"adam_eps must be positive, got {self.adam_eps}")
        if self.patience < 0:
            raise ConfigError(f"patience must be nonnegative, got {self.patience}")
        if not 0.0 < self.mask_rate <= 1.0:
            raise ConfigError(f"mask_rate must lie in (0, 1], got {self.mask_rate}")
        MultiTaskConfig(self.lam)  # shares the lambda bounds check
        if self.policy is not None:
            self.policy = TransferPolicy.parse(self.policy)

    def model_config(self, vocab_size: int, intent_count: int,
                     n_dec_layers: int | None = None) -> tf.ModelConfig:
        return tf.ModelConfig(
            n_enc_layers=self.n_enc_layers,
            n_dec_layers=self.n_dec_layers if n_dec_layers is None else n_dec_layers,
            n_heads=self.n_heads,
            d_k=self.d_k,
            d_v=self.d_v,
            d_model=self.d_model,
            d_inner=self.d_inner,
            vocab_size=vocab_size,
            intent_count=intent_count,
            input_dim=self.input_dim,
            max_positions=self.max_positions,
            dropout=self.dropout,
        )


_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _coerce(name: str, value: str):
    kind = _FIELDS[name]
    try:
        if kind.startswith("int"):
            return int(value)
        if kind.startswith("float"):
            return float(value)
        if kind.startswith("bool"):
            low = value.strip().lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(value)
        return value
    except ValueError:
        raise ConfigError(f"config key '{name}': cannot parse {value!r} as {kind}") from None


def load_train_config(config_path=None, overrides: dict | None = None) -> TrainConfig:
    """Defaults, then config file keys, then explicit overrides (CLI flags)."""
    merged: dict = {}
    if config_path is not None:
        for key, value in parse_config_file(config_path).items():
            if key not in _FIELDS:
                raise ConfigError(f"unknown config key '{key}'")
            merged[key] = _coerce(key, value)
    for key, value in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key '{key}'")
        merged[key] = value
    return TrainConfig(**merged)


# ---------------------------------------------------------------------------
# run directories


def run_root() -> pathlib.Path:
    return pathlib.Path(os.environ.get(RUN_DIR_ENV, "."))


def resolve_out(path) -> pathlib.Path:
    """Relative output paths land under the run directory root."""
    p = pathlib.Path(path)
    if not p.is_absolute():
        p = run_root() / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


@contextmanager
def run_lock():
    """One training process per run directory. The lock file is created
    exclusively and holds the owner pid; a leftover file from a crashed run
    must be removed by hand."""
    root = run_root()
    root.mkdir(parents=True, exist_ok=True)
    lock = root / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockError(
            f"run directory already locked by {lock}; "
            "remove the file if no training run is active"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode("ascii"))
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _require_file(path, what: str) -> pathlib.Path:
    if path is None:
        raise ConfigError(f"{what} is required")
    p = pathlib.Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------------------
# data assembly


def load_training_data(tc: TrainConfig):
    """Manifest(s) to prepared examples. The label set and vocabulary come
    from the training manifest; the validation manifest must stay inside
    them."""
    entries = load_manifest(_require_file(tc.train_manifest, "train manifest"))
    labels = intent_label_set(entries)
    vocab = Vocabulary.from_corpus(transcript_corpus(entries), unit=tc.unit)
    train_ex = prepare_examples(entries, vocab, labels)
    valid_ex = None
    if tc.valid_manifest is not None:
        ventries = load_manifest(_require_file(tc.valid_manifest, "valid manifest"), labels)
        valid_ex = prepare_examples(ventries, vocab, labels)
    return train_ex, valid_ex, vocab, labels


# ---------------------------------------------------------------------------
# checkpoint metadata

_DTYPE_NAMES = {"float32": np.float32, "float64": np.float64}


def model_config_to_json(cfg: tf.ModelConfig) -> str:
    d = dataclasses.asdict(cfg)
    d["dtype"] = np.dtype(cfg.dtype).name
    return json.dumps(d, sort_keys=True)


def model_config_from_json(blob: str) -> tf.ModelConfig:
    d = json.loads(blob)
    name = d.pop("dtype", "float32")
    if name not in _DTYPE_NAMES:
        raise CheckpointError(f"unsupported model dtype '{name}'")
    return tf.ModelConfig(dtype=_DTYPE_NAMES[name], **d)


def save_model_checkpoint(path, model, kind: str, vocab: Vocabulary,
                          labels: IntentLabelSet, tc: TrainConfig,
                          extra: dict | None = None) -> pathlib.Path:
    md = {
        "kind": kind,
        "model_config": model_config_to_json(model.config),
        "vocab": vocab.to_metadata(),
        "labels": labels.to_metadata(),
        "seed": str(tc.seed),
        "epochs": str(tc.epochs),
    }
    if extra:
        md.update(extra)
    out = resolve_out(path)
    save_model(out, model, md)
    return out


def build_from_checkpoint(path):
    """Rebuild the model a checkpoint describes and load its weights.

    Returns (model, vocab, labels, metadata). The architecture comes from
    the stored config, so the checkpoint is self-describing.
    """
    ckpt = load_checkpoint(path)
    md = ckpt.metadata
    for key in ("kind", "model_config", "vocab", "labels"):
        if key not in md:
            raise CheckpointError(f"{path}: metadata lacks '{key}'; not a model checkpoint")
    cfg = model_config_from_json(md["model_config"])
    vocab = Vocabulary.from_metadata(md["vocab"])
    labels = IntentLabelSet.from_metadata(md["labels"])
    kind = md["kind"]
    if kind == "textenc":
        model = TextEncoder(ad.make_rng(0), cfg)
    elif kind == "fusion":
        if "text_config" not in md:
            raise CheckpointError(f"{path}: fusion checkpoint lacks text_config metadata")
        tcfg = model_config_from_json(md["text_config"])
        text = TextEncoder(ad.make_rng(0), tcfg)
        text.freeze()
        model = FusionModel(ad.make_rng(0), cfg, text)
    else:
        model = SluModel(ad.make_rng(0), cfg)
    load_into_model(ckpt, model, strict=True)
    return model, vocab, labels, md


# ---------------------------------------------------------------------------
# the epoch loop


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


class _RunningMeans:
    """Per-utterance loss sums in a fixed order, so the reported means are
    reproducible bit for bit."""

    def __init__(self):
        self.n = 0
        self.correct = 0
        self.has_intent = False
        self.has_asr = False
        self.slu_sum = 0.0
        self.asr_sum = 0.0
        self.total_sum = 0.0
        self.token_count = 0

    def add(self, terms, intent_id: int):
        self.n += 1
        self.total_sum += terms.total.item()
        if terms.slu is not None:
            self.has_intent = True
            self.slu_sum += terms.slu.item()
            if terms.intent_pred == intent_id:
                self.correct += 1
        if terms.asr is not None:
            self.has_asr = True
            self.asr_sum += terms.asr.item()
            self.token_count += terms.n_tokens

    def row(self, epoch: int, split: str, wall: float = 0.0) -> MetricsRow:
        if self.n == 0:
            raise ValidationError("no examples aggregated")
        return MetricsRow(
            epoch=epoch,
            split=split,
            intent_accuracy=self.correct / self.n if self.has_intent else None,
            slu_loss=self.slu_sum / self.n if self.has_intent else None,
            asr_loss=self.asr_sum / self.n if self.has_asr else None,
            asr_loss_per_token=self.asr_sum / self.token_count if self.has_asr else None,
            total_loss=self.total_sum / self.n,
            wall_seconds=wall,
        )

    def score(self) -> float:
        # early-stopping figure of merit: accuracy when there is an intent
        # branch, otherwise improvement means the loss went down
        if self.has_intent:
            return self.correct / self.n
        return -self.total_sum / self.n


def _example_terms(model: SluModel, batch: Batch, i: int, mode: str, lam):
    x = Tensor(batch.feats_of(i))
    if mode == "slu":
        return model.loss_terms(x, int(batch.intent_ids[i]))
    if mode == "asr":
        return model.loss_terms(x, None, batch.tokens_of(i))
    return model.loss_terms(x, int(batch.intent_ids[i]), batch.tokens_of(i), lam)


def evaluate_model(model: SluModel, examples: list[PreparedExample], mode: str,
                   lam: float | None = None) -> _RunningMeans:
    """Forward-only pass over examples; never touches parameters or grads."""
    agg = _RunningMeans()
    with ad.no_grad():
        for ex in examples:
            x = Tensor(ex.feats)
            if mode == "slu":
                terms = model.loss_terms(x, ex.intent_id)
            elif mode == "asr":
                terms = model.loss_terms(x, None, ex.tokens)
            else:
                terms = model.loss_terms(x, ex.intent_id, ex.tokens, lam)
            agg.add(terms, ex.intent_id)
    return agg


def train_model(model, tc: TrainConfig, train_ex, valid_ex, mode: str) -> list[MetricsRow]:
    """Adam over batch-mean losses. mode selects the branches: 'slu' trains
    the intent objective, 'asr' the recognition objective, 'mt' their
    lambda-weighted sum. Returns one train row per epoch plus a valid row
    when a validation set is given.

    With patience > 0 and a validation set, training stops once the
    validation score has not improved for that many consecutive epochs, and
    the best parameters are restored before returning.
    """
    if mode not in ("slu", "asr", "mt"):
        raise ConfigError(f"unknown training mode '{mode}'")
    lam = tc.lam if mode == "mt" else None
    params = model.named_parameters()
    state = ad.AdamState(lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.adam_eps)
    rows: list[MetricsRow] = []
    best_score = None
    best_snap = None
    stale = 0
    for epoch in range(1, tc.epochs + 1):
        start = time.monotonic()
        agg = _RunningMeans()
        for batch in make_batches(train_ex, tc.batch_size, _epoch_seed(tc.seed, epoch)):
            model.zero_grads()
            totals = []
            for i in range(len(batch)):
                terms = _example_terms(model, batch, i, mode, lam)
                agg.add(terms, int(batch.intent_ids[i]))
                totals.append(terms.total)
            mean = ad.scale(functools.reduce(ad.add, totals), 1.0 / len(totals))
            ad.backward(mean)
            ad.adam_step(params, {n: p.grad for n, p in params.items()}, state)
        wall = time.monotonic() - start if tc.timing else 0.0
        rows.append(agg.row(epoch, "train", wall))
        if valid_ex:
            vagg = evaluate_model(model, valid_ex, mode, lam)
            rows.append(vagg.row(epoch, "valid"))
            if tc.patience > 0:
                score = vagg.score()
                if best_score is None or score > best_score:
                    best_score = score
                    best_snap = {n: p.data.copy() for n, p in params.items()}
                    stale = 0
                else:
                    stale += 1
                    if stale >= tc.patience:
                        for name, p in params.items():
                            p.data[...] = best_snap[name]
                        break
    return rows


# ---------------------------------------------------------------------------
# commands


def _finish_run(tc: TrainConfig, rows, model, kind, vocab, labels, extra=None):
    written = {}
    if tc.metrics_out is not None:
        written["metrics"] = write_metrics(resolve_out(tc.metrics_out), rows)
    if tc.checkpoint_out is not None:
        written["checkpoint"] = save_model_checkpoint(
            tc.checkpoint_out, model, kind, vocab, labels, tc, extra
        )
    return written


def _maybe_transfer(tc: TrainConfig, model) -> dict:
    if tc.init_encoder is None:
        if tc.policy is not None:
            raise ConfigError("--policy is only meaningful with --init-encoder")
        return {}
    ckpt = load_checkpoint(_require_file(tc.init_encoder, "encoder checkpoint"))
    policy = tc.policy or TransferPolicy.FINETUNE
    transfer_encoder(ckpt, model, policy)
    return {"policy": policy, "init_encoder": str(tc.init_encoder)}


def cmd_pretrain_asr(tc: TrainConfig):
    """Recognition-only pretraining; its artifact is the encoder+decoder
    checkpoint, so checkpoint_out is mandatory."""
    if tc.n_dec_layers < 1:
        raise ConfigError("recognition pretraining needs n_dec_layers >= 1")
    if tc.checkpoint_out is None:
        raise ConfigError("pretraining requires checkpoint_out")
    train_ex, valid_ex, vocab, labels = load_training_data(tc)
    model = SluModel(ad.make_rng(tc.seed), tc.model_config(vocab.size, labels.size))
    with run_lock():
        rows = train_model(model, tc, train_ex, valid_ex, "asr")
        written = _finish_run(tc, rows, model, "asr", vocab, labels)
    return rows, written


def cmd_train_slu(tc: TrainConfig):
    train_ex, valid_ex, vocab, labels = load_training_data(tc)
    model = SluModel(ad.make_rng(tc.seed), tc.model_config(vocab.size, labels.size))
    extra = _maybe_transfer(tc, model)
    with run_lock():
        rows = train_model(model, tc, train_ex, valid_ex, "slu")
        written = _finish_run(tc, rows, model, "slu", vocab, labels, extra)
    return rows, written


def cmd_train_multitask(tc: TrainConfig):
    if tc.n_dec_layers < 1:
        raise ConfigError("multitask training needs n_dec_layers >= 1")
    train_ex, valid_ex, vocab, labels = load_training_data(tc)
    model = SluModel(ad.make_rng(tc.seed), tc.model_config(vocab.size, labels.size))
    extra = _maybe_transfer(tc, model)
    extra["lam"] = repr(tc.lam)
    with run_lock():
        rows = train_model(model, tc, train_ex, valid_ex, "mt")
        written = _finish_run(tc, rows, model, "mt", vocab, labels, extra)
    return rows, written


def cmd_pretrain_textenc(tc: TrainConfig):
    if tc.checkpoint_out is None:
        raise ConfigError("pretraining requires checkpoint_out")
    entries = load_manifest(_require_file(tc.train_manifest, "train manifest"))
    labels = intent_label_set(entries)
    texts = transcript_corpus(entries)
    vocab = Vocabulary.from_corpus(texts, unit=tc.unit)
    corpus = [vocab.encode(t) for t in texts]
    cfg = tc.model_config(vocab.size, max(1, labels.size), n_dec_layers=0)
    rows: list[MetricsRow] = []

    def on_epoch(epoch, per_mask):
        rows.append(
            MetricsRow(
                epoch=epoch,
                split="train",
                intent_accuracy=None,
                slu_loss=None,
                asr_loss=None,
                asr_loss_per_token=per_mask,
                total_loss=per_mask,
            )
        )

    with run_lock():
        model, per_mask = pretrain_text_encoder(
            corpus, cfg, seed=tc.seed, epochs=tc.epochs, lr=tc.lr,
            mask_rate=tc.mask_rate, on_epoch=on_epoch,
        )
        model.freeze()
        written = _finish_run(
            tc, rows, model, "textenc", vocab, labels,
            {"mask_rate": repr(tc.mask_rate), "per_mask_loss": repr(per_mask)},
        )
    return rows, written


def _load_frozen_text_encoder(path, vocab: Vocabulary) -> tuple[TextEncoder, str]:
    ckpt = load_checkpoint(_require_file(path, "text encoder checkpoint"))
    if ckpt.metadata.get("kind") != "textenc":
        raise ConfigError(f"{path} is not a text encoder checkpoint")
    tvocab = Vocabulary.from_metadata(ckpt.metadata["vocab"])
    if tvocab.tokens != vocab.tokens or tvocab.unit != vocab.unit:
        raise ConfigError("text encoder vocabulary does not match the training data")
    tcfg = model_config_from_json(ckpt.metadata["model_config"])
    text = TextEncoder(ad.make_rng(0), tcfg)
    load_into_model(ckpt, text, strict=True)
    text.freeze()
    return text, ckpt.metadata["model_config"]


def cmd_train_fusion(tc: TrainConfig):
    if tc.text_encoder is None:
        raise ConfigError("fusion training requires a text encoder checkpoint")
    if tc.n_dec_layers < 1:
        raise ConfigError("fusion training needs n_dec_layers >= 1")
    train_ex, valid_ex, vocab, labels = load_training_data(tc)
    text, text_cfg_json = _load_frozen_text_encoder(tc.text_encoder, vocab)
    cfg = tc.model_config(vocab.size, labels.size)
    model = FusionModel(ad.make_rng(tc.seed), cfg, text)
    extra = _maybe_transfer(tc, model)
    extra["lam"] = repr(tc.lam)
    extra["text_config"] = text_cfg_json
    with run_lock():
        rows = train_model(model, tc, train_ex, valid_ex, "mt")
        written = _finish_run(tc, rows, model, "fusion", vocab, labels, extra)
    return rows, written


def cmd_eval(checkpoint, manifest, metrics_out=None, token_match=False):
    """Evaluate a checkpoint on a manifest and return (row, token_rate).

    Side-effect free apart from the optional metrics file: parameters are
    untouched and repeat calls give identical numbers. token_match adds the
    exact-match rate of greedy transcription against the references.
    """
    model, vocab, labels, md = build_from_checkpoint(_require_file(checkpoint, "checkpoint"))
    if isinstance(model, TextEncoder):
        raise ConfigError("text encoder checkpoints take no utterance input; nothing to eval")
    entries = load_manifest(_require_file(manifest, "eval manifest"), labels)
    examples = prepare_examples(entries, vocab, labels)
    kind = md["kind"]
    mode = kind if kind in ("slu", "asr") else "mt"
    lam = float(md["lam"]) if "lam" in md else (1.0 if mode == "mt" else None)
    row = evaluate_model(model, examples, mode, lam).row(0, "eval")
    rate = None
    if token_match:
        hits = 0
        for ex in examples:
            want = list(ex.tokens[1:])  # transcript plus the closing EOS
            got = model.greedy_decode(Tensor(ex.feats), max_len=len(want) + 8)
            hits += int(got == want)
        rate = hits / len(examples)
    if metrics_out is not None:
        write_metrics(resolve_out(metrics_out), [row])
    return row, rate
