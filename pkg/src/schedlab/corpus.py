"""Deterministic synthetic paired speech/image corpora.

"Audio" is synthesized directly as F-dimensional feature frames (one
frame per 10 ms step): each phone category has a fixed multi-frame
template, words are phone sequences, and speakers apply an affine
transform plus i.i.d. Gaussian noise. Images are small sets of object
token vectors; each image is paired with C spoken captions whose word
sequences mention all of its objects. Two acoustic domains (A for the
paired training corpus, B for the audio-only discrimination corpus) use
disjoint speaker sets with different transform scales and noise levels.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np


class CorpusError(Exception):
    pass


@dataclass
class CorpusSpec:
    """Generator configuration; all sizes are desk-scale defaults."""

    n_train_images: int = 1000
    n_test_images: int = 200
    captions_per_image: int = 5
    n_speakers: int = 8
    n_phones: int = 20
    frame_dim: int = 13
    n_object_words: int = 30
    n_filler_words: int = 40
    phones_per_word: tuple[int, int] = (2, 4)
    template_frames: tuple[int, int] = (3, 8)
    objects_per_image: tuple[int, int] = (1, 4)
    fillers_per_caption: tuple[int, int] = (2, 5)
    noise_sigma: tuple[float, float] = (0.25, 0.45)
    speaker_scale: tuple[float, float] = (0.8, 1.25)
    speaker_bias: float = 0.1
    image_dim: int = 16
    scene_sigma: float = 0.05
    inventory_seed: int | None = None
    # audio-only (domain B) knobs
    abx_speakers: int = 4
    abx_noise_sigma: tuple[float, float] = (0.2, 0.35)
    abx_speaker_scale: tuple[float, float] = (0.9, 1.4)
    abx_utterances_per_speaker: int = 30
    abx_words_per_utterance: tuple[int, int] = (4, 8)
    abx_min_tokens_per_phone: int = 0
    # per-token duration jitter: each phone instance is time-stretched by a
    # factor drawn from U(1-j, 1+j); 0 disables (lengths then identify phones)
    duration_jitter: float = 0.0
    abx_duration_jitter: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        known = {f for f in cls.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise CorpusError(f"unknown corpus spec keys: {sorted(bad)}")
        kw = dict(d)
        for k, v in kw.items():
            if isinstance(v, list):
                kw[k] = tuple(v)
        return cls(**kw)


@dataclass
class PhoneInventory:
    templates: list[np.ndarray]  # each (F, L_p), L_p in template_frames range

    @property
    def n_phones(self):
        return len(self.templates)


@dataclass
class Speaker:
    id: str
    transform: np.ndarray  # (F, F)
    bias: np.ndarray       # (F,)
    sigma: float
    domain: str


@dataclass
class Utterance:
    id: str
    frames: np.ndarray  # (F, T) float32
    alignment: list[tuple[int, int, int]]  # (phone id, start, end)
    words: list[str]
    speaker_id: str
    domain: str
    image_id: int | None = None


@dataclass
class ImageScene:
    image_id: int
    objects: list[int]      # object-word indices
    tokens: np.ndarray      # (n_objects, D_img) float32


@dataclass
class Corpus:
    spec: CorpusSpec
    seed: int
    kind: str  # "paired" | "abx"
    lexicon: dict[str, list[int]]
    object_words: list[str]
    filler_words: list[str]
    speakers: dict[str, Speaker]
    utterances: list[Utterance]
    scenes: dict[int, ImageScene] = field(default_factory=dict)
    train_images: list[int] = field(default_factory=list)
    test_images: list[int] = field(default_factory=list)
    inventory: PhoneInventory | None = None

    def captions_for(self, image_ids) -> list[Utterance]:
        wanted = set(image_ids)
        return [u for u in self.utterances if u.image_id in wanted]


# ---------------------------------------------------------------------------
# inventory and lexicon


def _make_inventory(rng: np.random.Generator, spec: CorpusSpec) -> PhoneInventory:
    lo, hi = spec.template_frames
    templates = []
    for _ in range(spec.n_phones):
        while True:
            length = int(rng.integers(lo, hi + 1))
            t = rng.normal(0.0, 1.0, size=(spec.frame_dim, length))
            if all(np.linalg.norm(t.mean(1) - u.mean(1)) > 0.5 for u in templates):
                templates.append(t)
                break
    return PhoneInventory(templates)


def _make_lexicon(rng: np.random.Generator, spec: CorpusSpec):
    object_words = [f"obj{i:02d}" for i in range(spec.n_object_words)]
    filler_words = [f"fil{i:02d}" for i in range(spec.n_filler_words)]
    lo, hi = spec.phones_per_word
    lexicon: dict[str, list[int]] = {}
    for w in object_words + filler_words:
        n = int(rng.integers(lo, hi + 1))
        lexicon[w] = [int(p) for p in rng.integers(0, spec.n_phones, size=n)]
    # guarantee every phone is used by at least one word
    used = {p for phones in lexicon.values() for p in phones}
    missing = [p for p in range(spec.n_phones) if p not in used]
    words = sorted(lexicon)
    for i, p in enumerate(missing):
        lexicon[words[i % len(words)]].append(p)
    return lexicon, object_words, filler_words


def _make_speaker(rng: np.random.Generator, sid: str, domain: str, spec: CorpusSpec,
                  scale_range, sigma_range) -> Speaker:
    f = spec.frame_dim
    q, r = np.linalg.qr(rng.normal(size=(f, f)))
    q = q * np.sign(np.diag(r))  # deterministic sign convention
    scales = rng.uniform(scale_range[0], scale_range[1], size=f)
    transform = q @ np.diag(scales)
    bias = rng.normal(0.0, spec.speaker_bias, size=f)
    sigma = float(rng.uniform(sigma_range[0], sigma_range[1]))
    return Speaker(sid, transform, bias, sigma, domain)


# ---------------------------------------------------------------------------
# synthesis


def _stretch(template: np.ndarray, factor: float) -> np.ndarray:
    """Nearest-neighbour time stretch of an (F, L) template."""
    length = template.shape[1]
    new_len = max(1, int(round(length * factor)))
    if new_len == length:
        return template
    idx = np.minimum((np.arange(new_len) * length) // new_len, length - 1)
    return template[:, idx]


def synthesize_utterance(words, speaker: Speaker, lexicon, inventory: PhoneInventory,
                         rng: np.random.Generator, utt_id: str = "u",
                         image_id: int | None = None,
                         duration_jitter: float = 0.0) -> Utterance:
    """Concatenate phone templates, apply the speaker transform, add noise."""
    if not words:
        raise CorpusError("empty word sequence")
    if not 0.0 <= duration_jitter < 1.0:
        raise CorpusError("duration_jitter must be in [0, 1)")
    segments = []
    alignment = []
    pos = 0
    for w in words:
        if w not in lexicon:
            raise CorpusError(f"unknown word: {w!r}")
        for p in lexicon[w]:
            t = inventory.templates[p]
            if duration_jitter > 0:
                t = _stretch(t, float(rng.uniform(1.0 - duration_jitter,
                                                  1.0 + duration_jitter)))
            segments.append(t)
            alignment.append((p, pos, pos + t.shape[1]))
            pos += t.shape[1]
    clean = np.concatenate(segments, axis=1)
    frames = speaker.transform @ clean + speaker.bias[:, None]
    if speaker.sigma > 0:
        frames = frames + rng.normal(0.0, speaker.sigma, size=frames.shape)
    return Utterance(utt_id, frames.astype(np.float32), alignment, list(words),
                     speaker.id, speaker.domain, image_id)


def _caption_words(objects, object_words, filler_words, spec, rng) -> list[str]:
    words = [object_words[o] for o in objects]
    rng.shuffle(words)
    n_fill = int(rng.integers(spec.fillers_per_caption[0], spec.fillers_per_caption[1] + 1))
    for _ in range(n_fill):
        w = filler_words[int(rng.integers(0, len(filler_words)))]
        words.insert(int(rng.integers(0, len(words) + 1)), w)
    return words


def generate_corpus(spec: CorpusSpec, seed: int) -> Corpus:
    """Paired (domain A) corpus: images, scenes, and caption utterances."""
    if spec.n_speakers < 1:
        raise CorpusError("need at least one speaker")
    if spec.n_object_words < spec.objects_per_image[1]:
        raise CorpusError("object vocabulary smaller than max objects per image")
    inv_seed = spec.inventory_seed if spec.inventory_seed is not None else seed
    rng_inv = np.random.default_rng(np.random.SeedSequence([int(inv_seed), 0xC0]))
    inventory = _make_inventory(rng_inv, spec)
    lexicon, object_words, filler_words = _make_lexicon(rng_inv, spec)

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA0]))
    speakers = {}
    for i in range(spec.n_speakers):
        s = _make_speaker(rng, f"A{i:02d}", "A", spec, spec.speaker_scale, spec.noise_sigma)
        speakers[s.id] = s
    spk_ids = sorted(speakers)

    obj_emb = rng.normal(0.0, 1.0, size=(spec.n_object_words, spec.image_dim))
    n_images = spec.n_train_images + spec.n_test_images
    scenes = {}
    utterances = []
    for img in range(n_images):
        n_obj = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
        objects = sorted(int(o) for o in rng.choice(spec.n_object_words, size=n_obj, replace=False))
        tokens = obj_emb[objects] + rng.normal(0.0, spec.scene_sigma, size=(n_obj, spec.image_dim))
        scenes[img] = ImageScene(img, objects, tokens.astype(np.float32))
        for c in range(spec.captions_per_image):
            speaker = speakers[spk_ids[int(rng.integers(0, len(spk_ids)))]]
            words = _caption_words(objects, object_words, filler_words, spec, rng)
            utterances.append(synthesize_utterance(
                words, speaker, lexicon, inventory, rng,
                utt_id=f"img{img:05d}_c{c}", image_id=img,
                duration_jitter=spec.duration_jitter))

    order = rng.permutation(n_images)
    train = sorted(int(i) for i in order[:spec.n_train_images])
    test = sorted(int(i) for i in order[spec.n_train_images:])
    corpus = Corpus(spec, seed, "paired", lexicon, object_words, filler_words,
                    speakers, utterances, scenes, train, test, inventory)
    _check_phone_coverage(corpus)
    return corpus


def generate_abx_corpus(spec: CorpusSpec, seed: int) -> Corpus:
    """Audio-only domain-B corpus with disjoint speakers, no images."""
    inv_seed = spec.inventory_seed if spec.inventory_seed is not None else seed
    rng_inv = np.random.default_rng(np.random.SeedSequence([int(inv_seed), 0xC0]))
    inventory = _make_inventory(rng_inv, spec)
    lexicon, object_words, filler_words = _make_lexicon(rng_inv, spec)

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xB0]))
    speakers = {}
    for i in range(spec.abx_speakers):
        s = _make_speaker(rng, f"B{i:02d}", "B", spec, spec.abx_speaker_scale,
                          spec.abx_noise_sigma)
        speakers[s.id] = s

    all_words = sorted(lexicon)
    lo, hi = spec.abx_words_per_utterance
    utterances = []
    for sid in sorted(speakers):
        speaker = speakers[sid]
        counts = np.zeros(spec.n_phones, dtype=int)
        n = 0
        max_utts = max(spec.abx_utterances_per_speaker * 10, 50)
        while n < spec.abx_utterances_per_speaker or (
                spec.abx_min_tokens_per_phone and counts.min() < spec.abx_min_tokens_per_phone):
            if n >= max_utts:
                raise CorpusError(
                    f"could not reach {spec.abx_min_tokens_per_phone} tokens per phone "
                    f"for speaker {sid} within {max_utts} utterances")
            k = int(rng.integers(lo, hi + 1))
            words = [all_words[int(j)] for j in rng.integers(0, len(all_words), size=k)]
            u = synthesize_utterance(words, speaker, lexicon, inventory, rng,
                                     utt_id=f"{sid}_u{n:04d}",
                                     duration_jitter=spec.abx_duration_jitter)
            for p, _, _ in u.alignment:
                counts[p] += 1
            utterances.append(u)
            n += 1

    corpus = Corpus(spec, seed, "abx", lexicon, object_words, filler_words,
                    speakers, utterances, inventory=inventory)
    _check_phone_coverage(corpus)
    return corpus


def _check_phone_coverage(corpus: Corpus):
    seen = {p for u in corpus.utterances for p, _, _ in u.alignment}
    missing = set(range(corpus.spec.n_phones)) - seen
    if missing:
        raise CorpusError(f"phones never realized in corpus: {sorted(missing)}")


# ---------------------------------------------------------------------------
# on-disk format: manifest.json + frames.bin / scenes.bin


def save_corpus(corpus: Corpus, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    utt_index = []
    offset = 0
    with open(os.path.join(out_dir, "frames.bin"), "wb") as f:
        for u in corpus.utterances:
            blob = np.ascontiguousarray(u.frames, dtype="<f4").tobytes()
            f.write(blob)
            utt_index.append({
                "id": u.id, "image_id": u.image_id, "speaker": u.speaker_id,
                "domain": u.domain, "words": u.words,
                "alignment": [list(a) for a in u.alignment],
                "offset": offset, "n_frames": int(u.frames.shape[1]),
            })
            offset += len(blob)
    scene_index = []
    offset = 0
    with open(os.path.join(out_dir, "scenes.bin"), "wb") as f:
        for img in sorted(corpus.scenes):
            s = corpus.scenes[img]
            blob = np.ascontiguousarray(s.tokens, dtype="<f4").tobytes()
            f.write(blob)
            scene_index.append({"image_id": s.image_id, "objects": s.objects,
                                "offset": offset, "n_tokens": int(s.tokens.shape[0])})
            offset += len(blob)
    manifest = {
        "schema_version": 1,
        "kind": corpus.kind,
        "seed": corpus.seed,
        "spec": asdict(corpus.spec),
        "frame_dim": corpus.spec.frame_dim,
        "image_dim": corpus.spec.image_dim,
        "lexicon": corpus.lexicon,
        "speakers": [{"id": s.id, "domain": s.domain, "sigma": s.sigma}
                     for _, s in sorted(corpus.speakers.items())],
        "utterances": utt_index,
        "scenes": scene_index,
        "splits": {"train": corpus.train_images, "test": corpus.test_images},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, separators=(",", ":"))


def load_corpus(corpus_dir) -> Corpus:
    with open(os.path.join(corpus_dir, "manifest.json"), encoding="utf-8") as f:
        manifest = json.load(f)
    spec = CorpusSpec.from_dict(manifest["spec"])
    frame_dim = manifest["frame_dim"]
    with open(os.path.join(corpus_dir, "frames.bin"), "rb") as f:
        frames_blob = f.read()
    utterances = []
    for rec in manifest["utterances"]:
        count = frame_dim * rec["n_frames"]
        arr = np.frombuffer(frames_blob, dtype="<f4", count=count,
                            offset=rec["offset"]).reshape(frame_dim, rec["n_frames"])
        utterances.append(Utterance(rec["id"], arr.copy(),
                                    [tuple(a) for a in rec["alignment"]],
                                    rec["words"], rec["speaker"], rec["domain"],
                                    rec["image_id"]))
    scenes = {}
    image_dim = manifest["image_dim"]
    scenes_path = os.path.join(corpus_dir, "scenes.bin")
    if manifest["scenes"]:
        with open(scenes_path, "rb") as f:
            scenes_blob = f.read()
        for rec in manifest["scenes"]:
            arr = np.frombuffer(scenes_blob, dtype="<f4", count=rec["n_tokens"] * image_dim,
                                offset=rec["offset"]).reshape(rec["n_tokens"], image_dim)
            scenes[rec["image_id"]] = ImageScene(rec["image_id"], rec["objects"], arr.copy())
    speakers = {s["id"]: Speaker(s["id"], np.eye(frame_dim), np.zeros(frame_dim),
                                 s["sigma"], s["domain"])
                for s in manifest["speakers"]}
    obj_words = [w for w in manifest["lexicon"] if w.startswith("obj")]
    fil_words = [w for w in manifest["lexicon"] if w.startswith("fil")]
    # templates are not stored: regenerate them from the inventory seed,
    # exactly as generation did
    inv_seed = spec.inventory_seed if spec.inventory_seed is not None else manifest["seed"]
    rng_inv = np.random.default_rng(np.random.SeedSequence([int(inv_seed), 0xC0]))
    inventory = _make_inventory(rng_inv, spec)
    return Corpus(spec, manifest["seed"], manifest["kind"], manifest["lexicon"],
                  sorted(obj_words), sorted(fil_words), speakers, utterances, scenes,
                  manifest["splits"]["train"], manifest["splits"]["test"], inventory)
