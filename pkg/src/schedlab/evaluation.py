"""Evaluation suite: phoneme discriminability (ABX with dynamic time
warping over angular frame distances) and cross-modal recall@k, plus the
per-layer / per-checkpoint sweeps used for training-dynamics reports."""
from __future__ import annotations

import itertools
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._kernels import dtw_cost
from .corpus import Corpus
from .model import ModelState, forward_vgs_batch, speech_layer_features

log = logging.getLogger(__name__)


class EvalError(Exception):
    pass


def worker_count() -> int:
    cap = os.environ.get("SCHEDLAB_THREADS")
    n = os.cpu_count() or 1
    if cap:
        n = max(1, min(n, int(cap)))
    return n


@dataclass
class Segment:
    frames: np.ndarray  # (n_frames, dim)
    phone: int
    speaker: str
    domain: str = ""


@dataclass
class Triplet:
    a: Segment
    b: Segment
    x: Segment
    phone_a: int
    phone_b: int
    context: tuple  # aggregation cell context (speaker or speaker pair)


@dataclass
class TripletLimits:
    max_per_cell: int = 200
    max_tokens_per_group: int = 12


@dataclass
class AbxResult:
    rows: list[dict] = field(default_factory=list)  # layer, epoch, condition, error, n_triplets

    def best(self, condition: str, epoch: int | None = None):
        cand = [r for r in self.rows
                if r["condition"] == condition and (epoch is None or r["epoch"] == epoch)]
        if not cand:
            return None
        return min(cand, key=lambda r: r["error"])


@dataclass
class RetrievalResult:
    recalls: dict[int, dict[str, float]]  # k -> direction -> recall
    n_captions: int
    n_images: int


# ---------------------------------------------------------------------------
# DTW distance


def dtw_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Alignment cost between two frame sequences, normalized by the sum
    of their lengths. Frame distance is arccos of clamped cosine
    similarity, scaled to [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] == 0 or y.shape[0] == 0:
        raise EvalError("dtw_distance requires nonempty (frames, dim) inputs")
    xn = np.linalg.norm(x, axis=1, keepdims=True)
    yn = np.linalg.norm(y, axis=1, keepdims=True)
    if (xn == 0).any() or (yn == 0).any():
        log.warning("zero-norm frame vector in dtw_distance; perturbing by 1e-12")
        xn = np.maximum(xn, 1e-12)
        yn = np.maximum(yn, 1e-12)
    cos = np.clip((x / xn) @ (y / yn).T, -1.0, 1.0)
    dist = np.arccos(cos) / np.pi
    return dtw_cost(dist) / (x.shape[0] + y.shape[0])


# ---------------------------------------------------------------------------
# triplets and ABX scoring


def _by_group(segments) -> dict[tuple[int, str], list[Segment]]:
    groups: dict[tuple[int, str], list[Segment]] = {}
    for s in segments:
        groups.setdefault((s.phone, s.speaker), []).append(s)
    return groups


def _sample_combos(pools, cap, rng, forbid_ax_equal=True):
    """Deterministically sample up to ``cap`` (a, b, x) index combos."""
    na, nb, nx = (len(p) for p in pools)
    combos = [(i, j, l) for i, j, l in itertools.product(range(na), range(nb), range(nx))
              if not (forbid_ax_equal and pools[0] is pools[2] and i == l)]
    if len(combos) > cap:
        keep = rng.choice(len(combos), size=cap, replace=False)
        combos = [combos[i] for i in sorted(keep)]
    return combos


def make_triplets(segments, condition: str, limits: TripletLimits,
                  rng: np.random.Generator) -> list[Triplet]:
    """Build discrimination triplets (a, x same phone; b different phone).

    within: all three segments from one speaker. across: a and b from one
    speaker, x from a different one. Sampling is capped per cell and
    deterministic for a fixed rng seed; impossible cells are skipped.
    """
    if condition not in ("within", "across"):
        raise EvalError(f"unknown condition {condition!r}")
    groups = _by_group(segments)
    phones = sorted({p for p, _ in groups})
    speakers = sorted({s for _, s in groups})
    triplets: list[Triplet] = []
    if condition == "within":
        for spk in speakers:
            for p1, p2 in itertools.permutations(phones, 2):
                pa = groups.get((p1, spk), [])
                pb = groups.get((p2, spk), [])
                if len(pa) < 2 or not pb:
                    continue
                for i, j, l in _sample_combos((pa, pb, pa), limits.max_per_cell, rng):
                    triplets.append(Triplet(pa[i], pb[j], pa[l], p1, p2, (spk,)))
    else:
        if len(speakers) < 2:
            return []
        for s1, s2 in itertools.permutations(speakers, 2):
            for p1, p2 in itertools.permutations(phones, 2):
                pa = groups.get((p1, s1), [])
                pb = groups.get((p2, s1), [])
                px = groups.get((p1, s2), [])
                if not pa or not pb or not px:
                    continue
                for i, j, l in _sample_combos((pa, pb, px), limits.max_per_cell, rng):
                    triplets.append(Triplet(pa[i], pb[j], px[l], p1, p2, (s1, s2)))
    return triplets


def abx_error(triplets, distance_fn=dtw_distance) -> tuple[float, int]:
    """Aggregate discrimination error over triplets.

    A triplet scores 1 when x is closer to a (same phone) than to b, 0.5
    on ties. Accuracies are averaged within each (phone pair, context)
    cell, ordered phone pairs are symmetrized, cells are averaged, and
    the error 1 - accuracy is returned together with the triplet count.
    """
    if not triplets:
        raise EvalError("empty triplet set")
    # distance cache over unique segment pairs, filled in parallel
    pairs = {}
    for t in triplets:
        for u, v in ((t.a, t.x), (t.b, t.x)):
            key = (id(u), id(v)) if id(u) < id(v) else (id(v), id(u))
            pairs.setdefault(key, (u, v))
    keys = list(pairs)
    nw = worker_count()
    if nw > 1 and len(keys) > 64:
        with ThreadPoolExecutor(max_workers=nw) as ex:
            vals = list(ex.map(lambda k: distance_fn(pairs[k][0].frames, pairs[k][1].frames), keys))
    else:
        vals = [distance_fn(pairs[k][0].frames, pairs[k][1].frames) for k in keys]
    dist = dict(zip(keys, vals))

    def d(u, v):
        key = (id(u), id(v)) if id(u) < id(v) else (id(v), id(u))
        return dist[key]

    cells: dict[tuple, list[float]] = {}
    for t in triplets:
        dax = d(t.a, t.x)
        dbx = d(t.b, t.x)
        score = 1.0 if dax < dbx else (0.5 if dax == dbx else 0.0)
        cells.setdefault((t.phone_a, t.phone_b, t.context), []).append(score)
    ordered_acc = {cell: float(np.mean(scores)) for cell, scores in cells.items()}
    sym: dict[tuple, list[float]] = {}
    for (p1, p2, ctx), acc in ordered_acc.items():
        key = (frozenset((p1, p2)), ctx)
        sym.setdefault(key, []).append(acc)
    accuracy = float(np.mean([np.mean(v) for v in sym.values()]))
    return 1.0 - accuracy, len(triplets)


# ---------------------------------------------------------------------------
# retrieval


def recall_at_k(audio_emb: np.ndarray, image_emb: np.ndarray,
                caption_image_idx: np.ndarray, ks=(1, 10)) -> RetrievalResult:
    """Cosine-similarity retrieval.

    speech->image: a caption query hits when its paired image ranks in
    the top k images. image->speech: an image query hits when any of its
    captions ranks in the top k captions. Ties break by candidate index.
    """
    ks = [int(k) for k in (ks if hasattr(ks, "__iter__") else [ks])]
    if any(k < 1 for k in ks):
        raise EvalError("k must be >= 1")
    if audio_emb.size == 0 or image_emb.size == 0:
        raise EvalError("empty embedding set")
    a = audio_emb / np.maximum(np.linalg.norm(audio_emb, axis=1, keepdims=True), 1e-12)
    v = image_emb / np.maximum(np.linalg.norm(image_emb, axis=1, keepdims=True), 1e-12)
    sims = a @ v.T
    cap_img = np.asarray(caption_image_idx)
    n_cap, n_img = sims.shape

    order_s2i = np.argsort(-sims, axis=1, kind="stable")
    rank_s2i = np.empty(n_cap, dtype=int)
    for i in range(n_cap):
        rank_s2i[i] = int(np.flatnonzero(order_s2i[i] == cap_img[i])[0])

    order_i2s = np.argsort(-sims.T, axis=1, kind="stable")
    rank_i2s = np.full(n_img, n_cap, dtype=int)
    for j in range(n_img):
        mine = np.flatnonzero(cap_img == j)
        if mine.size:
            pos = np.flatnonzero(np.isin(order_i2s[j], mine))
            rank_i2s[j] = int(pos[0])

    recalls = {}
    for k in ks:
        recalls[k] = {
            "speech_to_image": float(np.mean(rank_s2i < k)),
            "image_to_speech": float(np.mean(rank_i2s < k)),
        }
    return RetrievalResult(recalls, n_cap, n_img)


def embed_split(state: ModelState, corpus: Corpus, image_ids,
                batch_size: int = 64):
    """Embed captions and images of a split -> (audio, image, caption_image_idx)."""
    image_ids = sorted(image_ids)
    img_index = {img: i for i, img in enumerate(image_ids)}
    captions = [u for u in corpus.utterances if u.image_id in img_index]
    audio = []
    for i in range(0, len(captions), batch_size):
        batch = captions[i:i + batch_size]
        a, _ = forward_vgs_batch(state, [u.frames for u in batch],
                                 [corpus.scenes[u.image_id].tokens for u in batch])
        audio.append(a.data)
    images = []
    for i in range(0, len(image_ids), batch_size):
        batch = image_ids[i:i + batch_size]
        # audio input is irrelevant for the image branch; reuse first caption
        _, v = forward_vgs_batch(state, [captions[0].frames] * len(batch),
                                 [corpus.scenes[img].tokens for img in batch])
        images.append(v.data)
    cap_idx = np.array([img_index[u.image_id] for u in captions])
    return np.concatenate(audio), np.concatenate(images), cap_idx


# ---------------------------------------------------------------------------
# segments from model features


def _latent_span(start: int, end: int, stride: int, t_z: int) -> tuple[int, int]:
    s = start // stride
    e = max(s + 1, -(-end // stride))
    return min(s, t_z - 1), min(e, t_z)


def corpus_segments(state: ModelState, corpus: Corpus, layer: int,
                    limits: TripletLimits, seed: int = 0,
                    batch_size: int = 32) -> list[Segment]:
    """Phone segments with features from one speech layer, capped per
    (phone, speaker) group."""
    feats = corpus_layer_segments(state, corpus, [layer], limits, seed, batch_size)
    return feats[layer]


def corpus_layer_segments(state: ModelState, corpus: Corpus, layers,
                          limits: TripletLimits, seed: int = 0,
                          batch_size: int = 32) -> dict[int, list[Segment]]:
    """Like :func:`corpus_segments` for several layers with one forward pass."""
    n_layers = state.config.n_speech_layers
    for layer in layers:
        if not 1 <= layer <= n_layers:
            raise EvalError(f"layer {layer} out of range 1..{n_layers}")
    stride = state.config.total_stride
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xAB]))
    # deterministic token subsample, shared across layers
    tokens: dict[tuple[int, str], list[tuple[int, int, int]]] = {}
    for ui, u in enumerate(corpus.utterances):
        for p, s, e in u.alignment:
            tokens.setdefault((p, u.speaker_id), []).append((ui, s, e))
    chosen: list[tuple[int, int, int, int, str]] = []
    for key in sorted(tokens):
        toks = tokens[key]
        if len(toks) > limits.max_tokens_per_group:
            keep = rng.choice(len(toks), size=limits.max_tokens_per_group, replace=False)
            toks = [toks[i] for i in sorted(keep)]
        chosen.extend((ui, s, e, key[0], key[1]) for ui, s, e in toks)

    needed = sorted({ui for ui, *_ in chosen})
    feats: dict[int, dict[int, np.ndarray]] = {layer: {} for layer in layers}
    lens: dict[int, int] = {}
    for i in range(0, len(needed), batch_size):
        idx = needed[i:i + batch_size]
        layer_acts, z_len = speech_layer_features(state, [corpus.utterances[ui].frames for ui in idx])
        for layer in layers:
            for bi, ui in enumerate(idx):
                feats[layer][ui] = layer_acts[layer - 1][bi]
                lens[ui] = int(z_len[bi])

    out: dict[int, list[Segment]] = {layer: [] for layer in layers}
    for ui, s, e, phone, spk in chosen:
        t_z = lens[ui]
        ls, le = _latent_span(s, e, stride, t_z)
        domain = corpus.utterances[ui].domain
        for layer in layers:
            out[layer].append(Segment(feats[layer][ui][ls:le], phone, spk, domain))
    return out


def layer_sweep_abx(run_dir, abx_corpus: Corpus, layers, epochs,
                    limits: TripletLimits | None = None, seed: int = 0,
                    conditions=("within", "across")) -> AbxResult:
    """ABX error for each (layer, epoch, condition) over saved checkpoints."""
    from .trainer import load_checkpoint

    limits = limits or TripletLimits()
    result = AbxResult()
    for epoch in epochs:
        state = load_checkpoint(run_dir, epoch)
        seg_by_layer = corpus_layer_segments(state, abx_corpus, layers, limits, seed)
        for layer in layers:
            segments = seg_by_layer[layer]
            for condition in conditions:
                rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xAC]))
                triplets = make_triplets(segments, condition, limits, rng)
                err, n = abx_error(triplets)
                result.rows.append({"layer": int(layer), "epoch": int(epoch),
                                    "condition": condition, "error": err,
                                    "n_triplets": n})
    return result


def write_abx_csv(result: AbxResult, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("layer,epoch,condition,error,n_triplets\n")
        for r in result.rows:
            f.write(f"{r['layer']},{r['epoch']},{r['condition']},"
                    f"{r['error']:.8f},{r['n_triplets']}\n")


def write_retrieval_csv(rows, path):
    """rows: iterable of dicts with direction, k, recall, n_queries, n_candidates
    (optionally epoch)."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch,direction,k,recall,n_queries,n_candidates\n")
        for r in rows:
            f.write(f"{r.get('epoch', '')},{r['direction']},{r['k']},"
                    f"{r['recall']:.8f},{r['n_queries']},{r['n_candidates']}\n")
