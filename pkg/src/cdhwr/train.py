"""Adam training and evaluation for the recognizer."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .ctc import ctc_loss_batch, decode_beam, decode_best_path
from .data import CharVocab, Sample, Split
from .dct import encode_plane
from .metrics import EvalReport
from .network import Checkpoint, HWRCNet, HwrcnetConfig, save_checkpoint
from .preprocess import preprocess

log = logging.getLogger(__name__)

INPUT_MODES = ("normal", "dct8", "dct4")


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 50
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mode: str = "normal"
    quality: int | None = None
    seed: int = 0
    checkpoint_dir: str | None = None
    decode: str = "best"
    eval_every: int = 1
    # optional early stop once the test report meets both targets
    target_wa: float | None = None
    target_cer: float | None = None
    max_steps: int | None = None

    def __post_init__(self):
        if self.lr < 0 or self.eps <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning rate, epsilon, batch size and epochs must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.mode not in INPUT_MODES:
            raise ValueError(f"mode must be one of {INPUT_MODES}, got {self.mode!r}")
        if self.decode not in ("best", "beam"):
            raise ValueError(f"decode must be 'best' or 'beam', got {self.decode!r}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": a for k, a in self.m.items()}
        out.update({f"v/{k}": a for k, a in self.v.items()})
        out["step"] = np.array([self.step], dtype=np.float32)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "AdamState":
        m = {k[2:]: a for k, a in arrays.items() if k.startswith("m/")}
        v = {k[2:]: a for k, a in arrays.items() if k.startswith("v/")}
        return cls(m, v, int(arrays["step"][0]))


def adam_step(params: dict[str, tn.Tensor], grads: dict[str, np.ndarray],
              state: AdamState, config: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Every gradient is checked before any parameter moves, so a non-finite
    gradient leaves the model and the optimizer state untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name}")
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name] = m.astype(p.dtype)
        state.v[name] = v.astype(p.dtype)
        update = config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
        p.data = (p.data - update).astype(p.dtype)
    state.step = t
    return state


def prepare_inputs(samples: Sequence[Sample], mode: str, quality: int | None = None) -> np.ndarray:
    """Preprocessed (and, for dct modes, block-transformed) planes [n, 128, 32]."""
    planes = [encode_plane(preprocess(s.load()), mode, quality) for s in samples]
    return np.stack(planes).astype(np.float32)


def predict(model: HWRCNet, inputs: np.ndarray, vocab: CharVocab, decode: str = "best",
            batch_size: int = 50, beam_width: int = 25) -> list[str]:
    out = []
    for start in range(0, len(inputs), batch_size):
        lp = model.forward(inputs[start:start + batch_size], training=False).data
        for row in lp:
            if decode == "beam":
                out.append(decode_beam(row, vocab, beam_width))
            else:
                out.append(decode_best_path(row, vocab))
    return out


def _check_vocab(samples: Sequence[Sample], vocab: CharVocab) -> None:
    for s in samples:
        missing = set(s.transcription) - set(vocab.chars)
        if missing:
            raise ValueError(f"sample {s.id}: characters {''.join(sorted(missing))!r} "
                             "are not in the model vocabulary")


def evaluate(checkpoint: Checkpoint, samples: Sequence[Sample], decode: str = "best",
             mode: str | None = None, inputs: np.ndarray | None = None,
             batch_size: int = 50) -> EvalReport:
    """Recognize ``samples`` with the checkpoint's own input mode and score them."""
    if not samples:
        raise ValueError("cannot evaluate an empty sample list")
    ckpt_mode = checkpoint.meta.get("input_mode", "normal")
    if mode is not None and mode != ckpt_mode:
        raise ValueError(f"checkpoint was trained on {ckpt_mode!r} inputs; refusing to evaluate on {mode!r}")
    vocab = CharVocab(checkpoint.vocab)
    _check_vocab(samples, vocab)
    if inputs is None:
        inputs = prepare_inputs(samples, ckpt_mode, checkpoint.meta.get("quality"))
    preds = predict(checkpoint.model, inputs, vocab, decode, batch_size)
    return EvalReport.from_pairs([(s.transcription, p) for s, p in zip(samples, preds)])


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    step_losses: list[float]
    best_cer: float | None = None


def _meta(config: TrainConfig) -> dict:
    return {"input_mode": config.mode, "quality": config.quality,
            "dct_rescale": "divide by block size", "loss_reduction": "mean",
            "train_config": asdict(config)}


def train_loop(split: Split, vocab: CharVocab, config: TrainConfig,
               model: HWRCNet | None = None,
               on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Mini-batch Adam on mean CTC loss, evaluating on ``split.test`` each epoch.

    With ``checkpoint_dir`` set, writes ``latest.ckpt``, ``best.ckpt`` (lowest
    test CER) and ``train_log.jsonl``.
    """
    if not split.train:
        raise ValueError("training set is empty")
    _check_vocab(list(split.train) + list(split.test), vocab)
    if model is None:
        model = HWRCNet(HwrcnetConfig(num_classes=vocab.num_classes), seed=config.seed,
                        dtype=np.float32)
    if model.config.num_classes != vocab.num_classes:
        raise ValueError(f"model has {model.config.num_classes} classes, vocabulary needs {vocab.num_classes}")
    out_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    log_fh = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "w", encoding="utf-8")
        log_fh.write(json.dumps({"header": {**_meta(config), "vocab": vocab.chars,
                                            "train_samples": len(split.train),
                                            "test_samples": len(split.test), "split_seed": split.seed,
                                            "parameters": model.parameter_count}}) + "\n")
    meta = _meta(config)
    x_train = prepare_inputs(split.train, config.mode, config.quality)
    labels = [vocab.encode(s.transcription) for s in split.train]
    ids = [s.id for s in split.train]
    x_test = prepare_inputs(split.test, config.mode, config.quality) if split.test else None
    names = list(model.params)
    params = [model.params[n] for n in names]
    state = AdamState()
    rng = np.random.default_rng([config.seed, 1])
    history: list[dict] = []
    step_losses: list[float] = []
    best_cer = None
    ckpt = Checkpoint(model, vocab.chars, 0, None, meta)
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(x_train))
            total = 0.0
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                with tn.Tape() as tape:
                    lp = model.forward(x_train[idx], training=True)
                    loss = ctc_loss_batch(lp, [labels[i] for i in idx], ids=[ids[i] for i in idx])
                grads = tape.gradient(loss, params)
                adam_step(model.params, dict(zip(names, grads)), state, config)
                step_losses.append(float(loss.data))
                total += float(loss.data) * len(idx)
                if config.max_steps is not None and state.step >= config.max_steps:
                    break
            entry = {"epoch": epoch, "mean_loss": total / len(order) if len(order) else 0.0}
            stop = config.max_steps is not None and state.step >= config.max_steps
            ckpt = Checkpoint(model, vocab.chars, state.step, state.to_arrays(), meta)
            if x_test is not None and (epoch % config.eval_every == 0 or epoch == config.epochs or stop):
                report = evaluate(ckpt, split.test, config.decode, inputs=x_test)
                entry.update(cer=report.cer, wa=report.wa, waf=report.waf, wer=report.wer)
                if best_cer is None or report.cer < best_cer:
                    best_cer = report.cer
                    if out_dir:
                        save_checkpoint(out_dir / "best.ckpt", ckpt)
                if (config.target_wa is not None and report.wa >= config.target_wa
                        and (config.target_cer is None or report.cer <= config.target_cer)):
                    stop = True
            entry["wall_time"] = time.perf_counter() - t0
            history.append(entry)
            log.info("epoch %d: %s", epoch, {k: round(v, 4) for k, v in entry.items() if k != "epoch"})
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
                save_checkpoint(out_dir / "latest.ckpt", ckpt)
            if on_epoch:
                on_epoch(entry)
            if stop:
                break
        if out_dir and not history:
            save_checkpoint(out_dir / "latest.ckpt", ckpt)
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(ckpt, history, step_losses, best_cer)
