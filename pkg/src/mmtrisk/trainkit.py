"""Training, checkpoint files, and top-k ensembles.

Detector features arrive precomputed in the data, so only the tokenizer,
encoder and head are trained. Sequences are processed one at a time and
gradients are accumulated to an effective batch before each Adam step.
"""

import json
import logging
import os
import struct
import tempfile
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numcore as nc
from .cohort import _rng
from .evalkit import TASKS, DegenerateLabels, auprc, auroc, predict_scores
from .model import MMTModel, ModelConfig

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"MMTRISK-CKPT\n"


class TrainingDiverged(ArithmeticError):
    def __init__(self, batch_index, value):
        super().__init__(f"non-finite loss {value} in batch {batch_index}")
        self.batch_index = batch_index


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-5
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    d: int = 128
    n_layers: int = 2
    n_heads: int = 4
    k: int = 10
    dropout: float = 0.1
    patience: int = 5
    head_offset: float = -3.0
    ablation: str = "full"  # inputs are filtered this way during training and validation

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def model_config(self, widths):
        return ModelConfig(
            d=self.d,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            k=self.k,
            dropout=self.dropout,
            head_offset=self.head_offset,
            widths=dict(widths),
        )


@dataclass
class Checkpoint:
    config: TrainConfig
    widths: dict
    params: dict  # canonical name -> ndarray
    validation_metrics: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def model(self):
        m = MMTModel.init(self.config.model_config(self.widths), self.config.seed)
        m.load_arrays(self.params)
        return m

    def predict(self, seq):
        if not hasattr(self, "_model"):
            self._model = self.model()
        return self._model.predict(seq)


def _validation_metrics(model, data, ablation):
    out = {}
    for name, task in TASKS.items():
        _, scores, y = predict_scores(model, data, task, ablation)
        entry = {"auroc": None, "auprc": None}
        try:
            entry["auroc"] = auroc(scores, y)
            entry["auprc"] = auprc(scores, y)
        except DegenerateLabels:
            pass
        out[name] = entry
    return out


def _trainable(data):
    return [(s, l) for s, l in zip(data.sequences, data.labels) if any(l.mask)]


def _fill_untouched(params):
    # a batch with no exam of some modality never reaches that projection;
    # the loss does not depend on it, so its gradient is exactly zero
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def train(train_data, val_data, cfg, widths=None):
    """Fit one model; returns the epoch snapshot with the best validation AUROC (120-day)."""
    from .evalkit import AblationMode
    from .model import infer_widths

    examples = _trainable(train_data)
    if not examples:
        raise ValueError("no training example has an unmasked horizon")
    if len(val_data) == 0:
        raise ValueError("validation data is empty")
    ablation = AblationMode.parse(cfg.ablation)
    widths = widths or infer_widths(train_data.sequences)
    model = MMTModel.init(cfg.model_config(widths), cfg.seed)
    params = model.parameters()
    state = nc.AdamState(lr=cfg.lr)
    shuffle_rng = _rng(cfg.seed, "shuffle")
    dropout_rng = _rng(cfg.seed, "dropout")

    history = {"train_loss": [], "val_auroc": []}
    best = None
    stale = 0
    batch_index = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(examples))
        total = 0.0
        model.zero_grad()
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            for i in chunk:
                seq, label = examples[i]
                loss = model.loss(seq, label, ablation, cfg.dropout, dropout_rng)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDiverged(batch_index, value)
                total += value
                nc.backward(nc.scale(loss, 1.0 / len(chunk)))
            _fill_untouched(params)
            nc.adam_step(params, state)
            model.zero_grad()
            batch_index += 1
        history["train_loss"].append(total / len(examples))

        metrics = _validation_metrics(model, val_data, ablation)
        score = metrics["diagnosis"]["auroc"]
        history["val_auroc"].append(score)
        log.info("epoch %d loss %.5f val auroc %s", epoch, total / len(examples), score)
        if best is None or (score is not None and (best[0] is None or score > best[0])):
            best = (score, model.state_arrays(), metrics, epoch)
            stale = 0
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                break

    _, arrays, metrics, epoch = best
    history["best_epoch"] = epoch
    return Checkpoint(cfg, dict(widths), arrays, metrics, history)


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------


def _header(ckpt):
    tensors, offset = [], 0
    for name in sorted(ckpt.params):
        a = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
        tensors.append(
            {
                "name": name,
                "shape": list(a.shape),
                "offset": offset,
                "crc32": zlib.crc32(a.tobytes()),
            }
        )
        offset += a.size
    return {
        "format_version": ckpt.format_version,
        "config": asdict(ckpt.config),
        "widths": ckpt.widths,
        "validation_metrics": ckpt.validation_metrics,
        "history": ckpt.history,
        "tensors": tensors,
    }


def save_checkpoint(ckpt, path):
    """Write header + little-endian float64 payload; atomic via temp file and rename."""
    header = json.dumps(_header(ckpt), sort_keys=True).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for name in sorted(ckpt.params):
                fh.write(np.ascontiguousarray(ckpt.params[name], dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt header") from None
    pos += hlen
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported version {version} (this build reads {FORMAT_VERSION})"
        )
    params = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        start = pos + 8 * t["offset"]
        raw = blob[start:start + 8 * n]
        if len(raw) != 8 * n:
            raise CheckpointError(f"{path}: truncated payload at {t['name']}")
        if zlib.crc32(raw) != t["crc32"]:
            raise CheckpointError(f"{path}: checksum mismatch at {t['name']}")
        params[t["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(t["shape"])
    if len(blob) != pos + 8 * sum(int(np.prod(t["shape"], dtype=np.int64)) for t in header["tensors"]):
        raise CheckpointError(f"{path}: payload size does not match the tensor index")
    return Checkpoint(
        TrainConfig(**header["config"]),
        header["widths"],
        params,
        header["validation_metrics"],
        header["history"],
        version,
    )


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------

LAYER_CHOICES = (2, 3, 4)
HEAD_CHOICES = (2, 4)


@dataclass
class Ensemble:
    members: list  # Checkpoint objects or checkpoint paths, best validation AUROC first

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")

    @property
    def size(self):
        return len(self.members)

    def loaded(self):
        """Members as Checkpoint objects; paths are read on first use."""
        out = []
        for i, m in enumerate(self.members):
            if isinstance(m, (str, os.PathLike)):
                try:
                    m = load_checkpoint(m)
                except (OSError, CheckpointError) as exc:
                    raise CheckpointError(f"ensemble member {i} ({self.members[i]}): {exc}") from None
                self.members[i] = m
            out.append(m)
        return out

    def predict(self, seq):
        return ensemble_predict(self, seq)


def _val_auroc(ckpt):
    v = ckpt.validation_metrics.get("diagnosis", {}).get("auroc")
    return -np.inf if v is None else v


def select_top(checkpoints, top_k):
    """Highest validation AUROC first; earlier runs win ties."""
    if not 1 <= top_k <= len(checkpoints):
        raise ValueError(f"top_k={top_k} must lie in [1, {len(checkpoints)}]")
    order = sorted(range(len(checkpoints)), key=lambda i: (-_val_auroc(checkpoints[i]), i))
    return Ensemble([checkpoints[i] for i in order[:top_k]])


def member_configs(n_models, base_cfg):
    """Per-member seeds and jittered depth/heads, drawn from the jitter stream."""
    rng = _rng(base_cfg.seed, "ensemble-jitter")
    cfgs = []
    for _ in range(n_models):
        n_layers = int(rng.choice(LAYER_CHOICES))
        heads = [h for h in HEAD_CHOICES if base_cfg.d % h == 0] or [1]
        n_heads = int(rng.choice(heads))
        seed = int(rng.integers(0, 2**31 - 1))
        cfgs.append(replace(base_cfg, seed=seed, n_layers=n_layers, n_heads=n_heads))
    return cfgs


def _train_job(args):
    return train(*args)


def train_ensemble(n_models, top_k, base_cfg, train_data, val_data, jobs=1):
    if not 1 <= top_k <= n_models:
        raise ValueError(f"top_k={top_k} must lie in [1, n_models={n_models}]")
    cfgs = member_configs(n_models, base_cfg)
    args = [(train_data, val_data, c) for c in cfgs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_train_job, args))
    else:
        runs = [_train_job(a) for a in args]
    return select_top(runs, top_k)


def ensemble_predict(ens, seq):
    """Elementwise mean of the members' cumulative predictions."""
    preds = [m.predict(seq) for m in ens.loaded()]
    return np.mean(np.stack(preds), axis=0)


# ---------------------------------------------------------------------------
# end-to-end gradient check
# ---------------------------------------------------------------------------


def gradcheck_fixture(n_tokens=3, width=4, seed=0):
    """A one-exam sequence with ``n_tokens`` ROIs and a label with every horizon observed."""
    from .cohort import ExamRecord, OutcomeLabel, RoiFeature, SequenceInput

    rng = _rng(seed, "gradcheck")
    rois = tuple(
        RoiFeature(rng.normal(size=width), float(s), 0)
        for s in np.linspace(0.9, 0.5, n_tokens)
    )
    exam = ExamRecord("G-e0", "G", "FFDM", 5000, "L", "CC", "50-59", rois)
    return SequenceInput(exam), OutcomeLabel.from_times(400, 400)


def gradcheck_model(d=8, n_layers=1, n_heads=2, n_tokens=3, width=4, seed=0, step=1e-5, jitter=0.3):
    """Max relative error of backprop against central differences on the full loss.

    Covers tokenizer, encoder, head and masked BCE, over every parameter
    (including ones the fixture never touches, which must come out zero).
    """
    seq, label = gradcheck_fixture(n_tokens, width, seed)
    cfg = ModelConfig(d=d, n_layers=n_layers, n_heads=n_heads, k=n_tokens, dropout=0.0,
                      widths={"FFDM": width, "DBT": width, "US": width})
    model = MMTModel.init(cfg, seed)
    # move off the initial point so ReLUs and layer norms are in generic positions
    prng = _rng(seed, "gradcheck-params")
    for p in model.parameters():
        p.data = p.data + prng.normal(0.0, jitter, size=p.shape)
    return nc.finite_diff_check(lambda: model.loss(seq, label), model.parameters(), step)

