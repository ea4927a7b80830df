"""Downstream evaluation: feature extraction, linear probe, retrieval, class
code similarity and attention overlays."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import StandardScaler

from .conceptspace import compute_code
from .encoder import global_average_pool
from .errors import DegenerateInputError, InvalidInputError, InvalidSplitError
from .localcontrast import topk_mask
from .videokit import center_crop

SOURCES = ("v", "q_v", "q_v^s", "q_v^d", "F_v", "F_v^s", "F_v^d")
LABEL_KINDS = ("static", "dynamic", "action")


@dataclass
class ProbeResult:
    feature_source: str
    label_kind: str
    accuracy: float
    n_train: int = 0
    n_test: int = 0

    def as_dict(self):
        return asdict(self)


@dataclass
class RetrievalResult:
    recall_at: dict = field(default_factory=dict)

    def as_dict(self):
        return {f"R@{k}": v for k, v in self.recall_at.items()}


def _n_top(k, ratio):
    return max(1, int(round(k * ratio)))


def filtered_local_mean(local, code, ratio):
    """Average the local features of the top ``ratio`` fraction of concepts by code."""
    local, code = torch.as_tensor(local), torch.as_tensor(code)
    mask = topk_mask(code, _n_top(code.shape[-1], ratio)).to(local.dtype)
    return (local * mask.unsqueeze(-1)).sum(-2) / mask.sum(-1, keepdim=True)


def features_from_output(out, k_static, ratio=0.1):
    """All evaluation feature sources from a video-branch forward pass."""
    q_v, F_v = out.codes["v"], out.local["v"]
    feats = {
        "v": out.vecs["v"],
        "q_v": q_v,
        "q_v^s": q_v[:, :k_static],
        "q_v^d": q_v[:, k_static:],
        "F_v": filtered_local_mean(F_v, q_v, ratio),
        "F_v^s": filtered_local_mean(F_v[:, :k_static], q_v[:, :k_static], ratio),
        "F_v^d": filtered_local_mean(F_v[:, k_static:], q_v[:, k_static:], ratio),
    }
    return {k: v.detach().cpu().numpy().astype(np.float64) for k, v in feats.items()}


def _eval_batches(dataset, aug, scale, batch_size):
    for start in range(0, len(dataset), batch_size):
        clips = [center_crop(c, aug, scale) for c in dataset.clips[start:start + batch_size]]
        yield torch.from_numpy(np.stack(clips)).permute(0, 4, 1, 2, 3).contiguous()


@torch.no_grad()
def extract_all(model, dataset, cfg, batch_size=64):
    """Feature matrices ``{source: [N, dim]}`` plus the raw codes, one center crop
    per clip."""
    from .checkpoint import restore

    if isinstance(model, (str, Path)):
        model, _, _ = restore(model)
    model.eval()
    dtype = next(model.parameters()).dtype
    parts = []
    for x in _eval_batches(dataset, cfg.videokit.augment(), cfg.videokit.eval_crop_scale,
                           batch_size):
        out = model.encode_clip(x.to(dtype), with_local=True)
        parts.append(features_from_output(out, model.k_static, cfg.evalkit.top_ratio))
    return {k: np.concatenate([p[k] for p in parts]) for k in SOURCES}


def extract_features(model, dataset, source, cfg, batch_size=64):
    if source not in SOURCES:
        raise InvalidInputError(f"unknown feature source {source!r}; expected one of {SOURCES}")
    return extract_all(model, dataset, cfg, batch_size)[source]


def split_indices(labels, train_fraction=0.75, seed=0):
    labels = np.asarray(labels)
    idx = np.arange(len(labels))
    try:
        return train_test_split(idx, train_size=train_fraction, random_state=seed,
                                stratify=labels)
    except ValueError:
        return train_test_split(idx, train_size=train_fraction, random_state=seed)


def fit_probe(train_x, train_y, tol=1e-6, max_iter=10000, C=1.0):
    """Standardize, then multinomial logistic regression. Returns a predictor."""
    train_y = np.asarray(train_y)
    if len(np.unique(train_y)) < 2:
        raise InvalidSplitError("probe needs at least 2 classes in the train split")
    scaler = StandardScaler().fit(train_x)
    clf = LogisticRegression(tol=tol, max_iter=max_iter, C=C)
    clf.fit(scaler.transform(train_x), train_y)
    return lambda x: clf.predict(scaler.transform(x)), clf, scaler


def linear_probe(features, labels, train_fraction=0.75, seed=0, source="", label_kind="",
                 split=None, tol=1e-6, max_iter=10000, C=1.0):
    """Held-out top-1 accuracy of an affine classifier on frozen features.

    ``split`` may give explicit ``(train_idx, test_idx)``.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim == 1:
        features = features[:, None]
    tr, te = split if split is not None else split_indices(labels, train_fraction, seed)
    missing = set(np.unique(labels[te])) - set(np.unique(labels[tr]))
    if missing:
        raise InvalidSplitError(f"classes {sorted(missing)} absent from the train split")
    predict, _, _ = fit_probe(features[tr], labels[tr], tol, max_iter, C)
    acc = float(np.mean(predict(features[te]) == labels[te]))
    return ProbeResult(source, label_kind, acc, len(tr), len(te))


def probe_table(feats, dataset, cfg, sources=SOURCES, label_kinds=LABEL_KINDS):
    """Probe every (source, label kind) pair on one stratified split per label kind."""
    ev = cfg.evalkit
    results = []
    for kind in label_kinds:
        labels = dataset.labels(kind)
        split = split_indices(labels, ev.train_fraction, ev.split_seed)
        for src in sources:
            results.append(linear_probe(feats[src], labels, split=split, source=src,
                                        label_kind=kind, tol=ev.probe_tol,
                                        max_iter=ev.probe_max_iter, C=ev.probe_C))
    return results


def _unit_rows(x):
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norm == 0, 1.0, norm)


def retrieve(query, gallery, query_labels, gallery_labels, ks=(1, 5, 10, 20),
             exclude_self=False):
    """Recall@k: share of queries with a same-label item among their k nearest
    gallery items by cosine similarity. ``exclude_self`` drops the diagonal when
    query and gallery are the same set."""
    query, gallery = _unit_rows(query), _unit_rows(gallery)
    if len(query) == 0 or len(gallery) == 0:
        raise InvalidInputError("empty query or gallery")
    ql, gl = np.asarray(query_labels), np.asarray(gallery_labels)
    sims = query @ gallery.T
    if exclude_self:
        np.fill_diagonal(sims, -np.inf)
    order = np.argsort(-sims, axis=1, kind="stable")
    hits = gl[order] == ql[:, None]
    usable = gallery.shape[0] - (1 if exclude_self else 0)
    recall = {}
    for k in ks:
        kk = max(1, min(int(k), usable))
        recall[int(k)] = float(np.mean(hits[:, :kk].any(axis=1)))
    return RetrievalResult(recall)


def split_retrieval(features, labels, cfg):
    """Held-out clips query the training clips, the usual video retrieval protocol."""
    ev = cfg.evalkit
    labels = np.asarray(labels)
    tr, te = split_indices(labels, ev.train_fraction, ev.split_seed)
    return retrieve(features[te], features[tr], labels[te], labels[tr], ev.ks)


def code_similarity_heatmap(codes, labels, n_classes=None):
    """Cosine similarity between class-mean codes: [L, L], symmetric, unit diagonal."""
    codes = np.asarray(codes, dtype=np.float64)
    labels = np.asarray(labels)
    L = int(labels.max()) + 1 if n_classes is None else int(n_classes)
    means = []
    for c in range(L):
        sel = labels == c
        if not sel.any():
            raise InvalidInputError(f"class {c} has no samples")
        means.append(codes[sel].mean(axis=0))
    means = np.stack(means)
    norms = np.linalg.norm(means, axis=1)
    if (norms == 0).any():
        raise DegenerateInputError("a class-mean code has zero norm")
    unit = means / norms[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    sim = (sim + sim.T) / 2
    np.fill_diagonal(sim, 1.0)
    return sim


def heatmap_gap(sim, class_static, class_dynamic):
    """Mean similarity of class pairs sharing the static label minus pairs that
    differ in it (off-diagonal pairs only)."""
    cs, cd = np.asarray(class_static), np.asarray(class_dynamic)
    same, diff = [], []
    L = len(cs)
    for i in range(L):
        for j in range(L):
            if i == j:
                continue
            (same if cs[i] == cs[j] else diff).append(sim[i, j])
    return float(np.mean(same) - np.mean(diff))


# ------------------------------------------------------------------ overlays

def overlay_from_weights(weights, frame_shape):
    """Nearest-upsample a [T', H', W'] attention map to [T, H, W] and min-max
    normalize each frame to [0, 1]. Flat frames map to 0."""
    weights = np.asarray(weights, dtype=np.float64)
    T, H, W = frame_shape
    t, h, w = weights.shape
    if T % t or H % h or W % w:
        raise InvalidInputError(f"frame shape {frame_shape} not a multiple of map {weights.shape}")
    up = weights.repeat(T // t, 0).repeat(H // h, 1).repeat(W // w, 2)
    lo = up.min(axis=(1, 2), keepdims=True)
    span = up.max(axis=(1, 2), keepdims=True) - lo
    return np.where(span > 0, (up - lo) / np.where(span > 0, span, 1.0), 0.0)


def _heat_rgb(heat):
    return np.stack([heat, 0.25 * heat, 1.0 - heat], axis=-1)


def _blend(frame, heat, alpha=0.5):
    rgb = frame[..., :3] if frame.shape[-1] >= 3 else np.repeat(frame[..., :1], 3, -1)
    return np.clip((1 - alpha) * rgb + alpha * _heat_rgb(heat), 0, 1)


@torch.no_grad()
def export_attention_overlays(model, clips, out_dir, ids=None, cfg=None, write_images=True):
    """Per clip: the static and dynamic concepts with the highest activation in
    the video code, their attention maps and per-frame heat overlays.

    Writes ``<id>/attention.npz`` and, when ``write_images``, one PNG per frame
    (original | static overlay | dynamic overlay). Returns per-clip records.
    """
    from PIL import Image

    model.eval()
    out_dir = Path(out_dir)
    dtype = next(model.parameters()).dtype
    k_s = model.k_static
    records = []
    for i, clip in enumerate(clips):
        cid = ids[i] if ids is not None else f"clip_{i:04d}"
        if cfg is not None:
            clip = center_crop(clip, cfg.videokit.augment(), cfg.videokit.eval_crop_scale)
        x = torch.from_numpy(np.ascontiguousarray(clip)[None]).permute(0, 4, 1, 2, 3).to(dtype)
        fmap = model.backbone_for("v")(x)
        q_v = compute_code(model.sigmas["v"](global_average_pool(fmap)), model.prototypes.P_v)[0]
        _, weights, logits = model.attention(model.prototypes.P_v, fmap, return_logits=True)
        grid = tuple(fmap.shape[2:])
        post = weights[0].numpy().reshape((-1,) + grid)
        pre = logits[0].numpy().reshape((-1,) + grid)
        ks = int(torch.argmax(q_v[:k_s]))
        kd = k_s + int(torch.argmax(q_v[k_s:]))
        frames = np.asarray(clip)
        ov_s = overlay_from_weights(post[ks], frames.shape[:3])
        ov_d = overlay_from_weights(post[kd], frames.shape[:3])
        target = out_dir / str(cid)
        target.mkdir(parents=True, exist_ok=True)
        np.savez(target / "attention.npz", weights=post, logits=pre, static_concept=ks,
                 dynamic_concept=kd, static_overlay=ov_s, dynamic_overlay=ov_d,
                 code=q_v.numpy())
        if write_images:
            for t in range(frames.shape[0]):
                panel = np.concatenate([_blend(frames[t], np.zeros_like(ov_s[t]), 0.0),
                                        _blend(frames[t], ov_s[t]),
                                        _blend(frames[t], ov_d[t])], axis=1)
                Image.fromarray((panel * 255).round().astype(np.uint8)).save(
                    target / f"frame_{t:03d}.png")
        records.append({"id": str(cid), "static_concept": ks, "dynamic_concept": kd,
                        "weights": post, "static_overlay": ov_s, "dynamic_overlay": ov_d})
    return records


def dump_codes(feats, ids, path):
    """Save concept codes (and other feature sources) keyed by sample id."""
    arrays = {k.replace("^", "_"): v for k, v in feats.items()}
    np.savez(path, ids=np.array(ids), **arrays)
    return path


def write_records(records, path):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path
