"""Turn a patient's exam sequence into the transformer's token matrix.

Per image the top-k ROIs by detector score are kept. Each ROI feature vector
is projected into the shared width ``d`` by a modality-specific MLP, joined
with five 100-wide categorical embeddings (relative study date, laterality,
modality, view, age bucket) and reduced back to ``d`` by the fusion MLP.
"""

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .cohort import AGE_BUCKETS, LATERALITIES, MODALITIES, VIEWS, YEAR_DAYS
from .evalkit import FULL, filter_sequence
from .layers import init_mlp, mlp, param, trunc_normal

EMBED_DIM = 100
N_DATE_BUCKETS = 6
# order of the embedding blocks after the projected ROI features
CATEGORIES = ("date", "laterality", "modality", "view", "age")
VOCAB = {
    "date": tuple(range(N_DATE_BUCKETS)),
    "laterality": LATERALITIES,
    "modality": MODALITIES,
    "view": VIEWS,
    "age": AGE_BUCKETS,
}
_LOOKUP = {c: {v: i for i, v in enumerate(vals)} for c, vals in VOCAB.items()}


class TokenizerError(ValueError):
    pass


@dataclass
class TokenizerParams:
    d: int
    widths: dict  # modality -> input feature width d_m
    proj: dict  # modality -> MLP params (d_m -> d)
    emb: dict  # category -> (vocab, 100) table
    fuse: dict  # MLP params (d + 500 -> d)

    @classmethod
    def init(cls, rng, d, widths):
        widths = {m: int(widths[m]) for m in MODALITIES}
        proj = {m: init_mlp(rng, widths[m], d, d) for m in MODALITIES}
        emb = {c: param(trunc_normal(rng, (len(VOCAB[c]), EMBED_DIM))) for c in CATEGORIES}
        fuse = init_mlp(rng, d + EMBED_DIM * len(CATEGORIES), d, d)
        return cls(d, widths, proj, emb, fuse)

    def named_tensors(self):
        out = {}
        for m in MODALITIES:
            for k, t in self.proj[m].items():
                out[f"tokenizer.proj.{m}.{k}"] = t
        for c in CATEGORIES:
            out[f"tokenizer.emb.{c}"] = self.emb[c]
        for k, t in self.fuse.items():
            out[f"tokenizer.fuse.{k}"] = t
        return out


@dataclass
class TokenMatrix:
    tokens: nc.Tensor  # (n_tokens, d)
    meta: list  # per token: (exam_id, modality, exam_time_days)

    @property
    def n_tokens(self):
        return self.tokens.shape[0]


def select_topk(rois, k):
    """The ``k`` highest-scoring ROIs, best first.

    Ties go to the lower image_index, then to the earlier position in ``rois``.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    ranked = sorted(range(len(rois)), key=lambda i: (-rois[i].score, rois[i].image_index, i))
    return [rois[i] for i in ranked[:k]]


def date_bucket(index_time, exam_time):
    return min(N_DATE_BUCKETS - 1, max(0, (index_time - exam_time) // YEAR_DAYS))


def _check_width(params, modality, width):
    want = params.widths[modality]
    if width != want:
        raise TokenizerError(
            f"feature width {width} does not match modality {modality} (expects {want})"
        )


def project(features, modality, params):
    """Apply the modality's projection MLP to one ROI feature vector."""
    x = np.asarray(features, dtype=np.float64).reshape(1, -1)
    _check_width(params, modality, x.shape[1])
    return nc.reshape(mlp(nc.Tensor(x), params.proj[modality]), (params.d,))


def _category_indices(tags):
    out = []
    for c, v in zip(CATEGORIES, tags):
        try:
            out.append(_LOOKUP[c][v])
        except KeyError:
            raise TokenizerError(f"unknown {c} category {v!r}") from None
    return out


def _fuse_rows(b_rows, idx, params):
    """Eq.-1 style fusion for a block of projected rows; ``idx[c]`` holds per-row category ids."""
    blocks = [b_rows] + [nc.embedding_lookup(params.emb[c], idx[c]) for c in CATEGORIES]
    return mlp(nc.concat_last_axis(blocks), params.fuse)


def fuse_embeddings(b_row, tags, params):
    """Fuse one projected row with its tags ``(date, laterality, modality, view, age)``."""
    ids = _category_indices(tags)
    b = b_row if isinstance(b_row, nc.Tensor) else nc.Tensor(b_row)
    if b.shape != (params.d,):
        raise TokenizerError(f"projected row has shape {b.shape}, expected ({params.d},)")
    idx = {c: [i] for c, i in zip(CATEGORIES, ids)}
    return nc.reshape(_fuse_rows(nc.reshape(b, (1, params.d)), idx, params), (params.d,))


def _exam_rois(exam, k):
    by_image = {}
    for r in exam.rois:
        by_image.setdefault(r.image_index, []).append(r)
    chosen = []
    for image in sorted(by_image):
        chosen.extend(select_topk(by_image[image], k))
    # stable: equal scores stay in image order
    return sorted(chosen, key=lambda r: -r.score)


def tokenize(seq, params, k=10, ablation=FULL):
    """Token matrix for ``seq`` after applying ``ablation``.

    Tokens run over exams in ascending time (index exam last) and, within an
    exam, over selected ROIs by descending score.
    """
    seq = filter_sequence(seq, ablation)
    exams = seq.exams
    if not exams:
        raise TokenizerError("sequence has no exams left to tokenize")
    t0 = seq.index_exam.exam_time_days

    meta = []
    per_mod_rows = {m: [] for m in MODALITIES}
    per_mod_pos = {m: [] for m in MODALITIES}
    idx = {c: [] for c in CATEGORIES}
    for exam in exams:
        _check_width(params, exam.modality, exam.feature_width)
        tags = (
            date_bucket(t0, exam.exam_time_days),
            exam.laterality,
            exam.modality,
            exam.view,
            exam.age_bucket,
        )
        ids = _category_indices(tags)
        for r in _exam_rois(exam, k):
            per_mod_pos[exam.modality].append(len(meta))
            per_mod_rows[exam.modality].append(r.features)
            meta.append((exam.exam_id, exam.modality, exam.exam_time_days))
            for c, i in zip(CATEGORIES, ids):
                idx[c].append(i)

    blocks, positions = [], []
    for m in MODALITIES:
        if per_mod_rows[m]:
            feats = nc.Tensor(np.stack(per_mod_rows[m]))  # data, never a parameter
            blocks.append(mlp(feats, params.proj[m]))
            positions.extend(per_mod_pos[m])
    b_rows = blocks[0] if len(blocks) == 1 else nc.concat_rows(blocks)
    if positions != sorted(positions):
        # rows are grouped by modality; gather them back into token order
        b_rows = nc.embedding_lookup(b_rows, np.argsort(positions, kind="stable"))
    return TokenMatrix(_fuse_rows(b_rows, idx, params), meta)
