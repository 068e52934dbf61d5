"""The full model: tokenizer -> encoder -> risk head."""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .cohort import MODALITIES, _rng
from .encoder import EncoderParams, encode
from .evalkit import FULL
from .hazard import HeadParams, hazard_logits, head_forward, masked_bce
from .tokenizer import TokenizerParams, tokenize


@dataclass
class ModelConfig:
    d: int = 128
    n_layers: int = 2
    n_heads: int = 4
    k: int = 10
    dropout: float = 0.1
    head_offset: float = -3.0
    widths: dict = field(default_factory=lambda: {"FFDM": 32, "DBT": 32, "US": 48})

    def to_dict(self):
        return asdict(self)


class MMTModel:
    def __init__(self, cfg, tokenizer, encoder, head):
        self.cfg = cfg
        self.tokenizer = tokenizer
        self.encoder = encoder
        self.head = head
        self._params = self.named_parameters()

    @classmethod
    def init(cls, cfg, seed):
        rng = _rng(seed, "init")
        tok = TokenizerParams.init(rng, cfg.d, cfg.widths)
        enc = EncoderParams.init(rng, cfg.d, cfg.n_layers, cfg.n_heads)
        head = HeadParams.init(rng, cfg.d, cfg.head_offset)
        return cls(cfg, tok, enc, head)

    def named_parameters(self):
        out = {}
        out.update(self.tokenizer.named_tensors())
        out.update(self.encoder.named_tensors())
        out.update(self.head.named_tensors())
        return out

    def parameters(self):
        return list(self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def load_arrays(self, arrays):
        """Overwrite parameter values from a name -> ndarray mapping."""
        missing = set(self._params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in self._params.items():
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != p.shape:
                raise ValueError(f"{name}: shape {a.shape} != {p.shape}")
            p.data = a.copy()

    def state_arrays(self):
        return {name: p.data.copy() for name, p in self._params.items()}

    def forward(self, seq, ablation=FULL, dropout=0.0, rng=None):
        """Interval scores L and logits (running sums plus offset) as Tensors."""
        tokens = tokenize(seq, self.tokenizer, self.cfg.k, ablation)
        cls_out = encode(tokens, self.encoder, dropout, rng)
        scores = head_forward(cls_out, self.head)
        return scores, hazard_logits(scores, self.head.offset)

    def loss(self, seq, label, ablation=FULL, dropout=0.0, rng=None):
        _, logits = self.forward(seq, ablation, dropout, rng)
        return masked_bce(logits, label.targets, label.mask)

    def predict(self, seq, ablation=FULL):
        """Cumulative probabilities for the six horizons (no graph recorded)."""
        with nc.no_grad():
            _, logits = self.forward(seq, ablation)
        return nc.sigmoid(logits).data


def infer_widths(sequences, default=None):
    """Feature width per modality as found in the data (falls back to ``default``)."""
    widths = dict(default or {"FFDM": 32, "DBT": 32, "US": 48})
    seen = {}
    for seq in sequences:
        for exam in seq.exams:
            seen.setdefault(exam.modality, exam.feature_width)
        if len(seen) == len(MODALITIES):
            break
    widths.update(seen)
    return widths
