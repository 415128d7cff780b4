"""Synthetic word corpus with exact frame alignments, target assignment and
offline attack datasets."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .asr import Utterance, Vocab, collapse
from .autodiff import load_tensor, save_tensor

log = logging.getLogger(__name__)

REFERENCE_RMS = 0.1
# length the L2 budgets are calibrated to: a typical ~12 s training utterance at 16 kHz
REFERENCE_SAMPLES = 196_800

# offline attack grids
L2_BUDGETS = (0.2, 0.5, 1.5, 1.9)
LINF_BUDGETS = (0.001, 0.01, 0.1)
OFFLINE_ITERATIONS = (10, 20, 50, 100, 200)


def utt_rng(seed: int, utt_id: str, purpose: str = "") -> np.random.Generator:
    """Stream keyed on (seed, utt_id, purpose) so results do not depend on processing order."""
    digest = hashlib.sha256(f"{seed}/{utt_id}/{purpose}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


@dataclass(frozen=True)
class CorpusConfig:
    vocab_size: int = 20
    n_train: int = 500
    n_test: int = 100
    min_words: int = 3
    max_words: int = 6
    word_frames: int = 8
    gap_frames: int = 4
    frame_shift: int = 16
    frame_len: int = 64
    sample_rate: int = 8000
    snr_db: float = 20.0
    cue_db: float = -12.0
    rms: float = REFERENCE_RMS
    seed: int = 0

    @property
    def n_frames(self) -> int:
        return self.gap_frames + self.max_words * (self.word_frames + self.gap_frames)

    @property
    def n_samples(self) -> int:
        return self.frame_shift * (self.n_frames - 1) + self.frame_len


@dataclass
class Corpus:
    vocab: Vocab
    train: list[Utterance]
    test: list[Utterance]
    config: CorpusConfig
    motifs: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def sample_rate(self) -> int:
        return self.config.sample_rate

    @property
    def scale_factor(self) -> float:
        """Signal level relative to the reference the attack budgets assume."""
        return self.config.rms / REFERENCE_RMS

    @property
    def l2_scale_factor(self) -> float:
        """L2 norms grow with sqrt(length), so L2 budgets also shrink with utterance length."""
        return self.scale_factor * float(np.sqrt(self.config.n_samples / REFERENCE_SAMPLES))

    def budget_scale(self, norm: str) -> float:
        return self.l2_scale_factor if norm == "L2" else self.scale_factor

    def split(self, name: str) -> list[Utterance]:
        return {"train": self.train, "test": self.test}[name]

    def render_labels(self, words: Sequence[str]) -> np.ndarray:
        return render_frame_labels(self.vocab, words, self.config)


CARRIER_BINS = (3, 5)


def word_tones(vocab_size: int, frame_len: int) -> list[tuple[int, int]]:
    """Two DFT-bin-centred cue tones per word, drawn from a fixed sparse tone set
    above the carrier bins."""
    n_words = vocab_size - 1
    n_tones = 2
    while n_tones * (n_tones - 1) // 2 < n_words:
        n_tones += 1
    top = frame_len // 2 - 2
    tones = np.linspace(max(CARRIER_BINS) + 3, top, n_tones).round().astype(int)
    pairs = list(combinations(tones.tolist(), 2))
    # spread the pairs so neighbouring word ids do not share tones
    order = np.random.default_rng(1234).permutation(len(pairs))[:n_words]
    return [pairs[i] for i in sorted(order)]


def render_frame_labels(vocab: Vocab, words: Sequence[str], cfg: CorpusConfig,
                        n_frames: int | None = None) -> np.ndarray:
    """Lay words out at the synthesis cadence, SIL-padded or truncated to ``n_frames``."""
    n_frames = cfg.n_frames if n_frames is None else n_frames
    labels = np.zeros(max(n_frames, cfg.gap_frames + len(words) * (cfg.word_frames + cfg.gap_frames)),
                      dtype=np.int64)
    t = cfg.gap_frames
    for w in words:
        labels[t:t + cfg.word_frames] = vocab.index(w)
        t += cfg.word_frames + cfg.gap_frames
    return labels[:n_frames]


def _motif(tones: tuple[int, int], cfg: CorpusConfig, rng: np.random.Generator) -> np.ndarray:
    """Shared loud carrier plus the word's two cue tones ``cue_db`` below it."""
    n = cfg.word_frames * cfg.frame_shift
    t = np.arange(n)
    phases = rng.uniform(0, 2 * np.pi, 4)
    cue = 10 ** (cfg.cue_db / 20)
    sig = sum(np.cos(2 * np.pi * k * t / cfg.frame_len + ph) for k, ph in zip(CARRIER_BINS, phases[:2]))
    sig += cue * sum(np.cos(2 * np.pi * k * t / cfg.frame_len + ph) for k, ph in zip(tones, phases[2:]))
    ramp = min(cfg.frame_shift, n // 4)
    env = np.ones(n)
    env[:ramp] = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
    env[-ramp:] = env[:ramp][::-1]
    return sig * env


def synthesize_utterance(utt_id: str, words: Sequence[str], corpus_vocab: Vocab,
                         motifs: dict[str, np.ndarray], cfg: CorpusConfig) -> Utterance:
    labels = render_frame_labels(corpus_vocab, words, cfg)
    clean = np.zeros(cfg.n_samples)
    # frame t is centred on sample shift*t + frame_len/2; word samples start half a hop early
    offset = cfg.frame_len // 2 - cfg.frame_shift // 2
    t = cfg.gap_frames
    for w in words:
        start = cfg.frame_shift * t + offset
        motif = motifs[w]
        clean[start:start + motif.size] += motif
        t += cfg.word_frames + cfg.gap_frames
    rng = utt_rng(cfg.seed, utt_id, "noise")
    noise = rng.normal(0, 1, cfg.n_samples)
    noise *= np.sqrt(np.mean(clean ** 2) / np.mean(noise ** 2) / 10 ** (cfg.snr_db / 10))
    wave = clean + noise
    wave *= cfg.rms / np.sqrt(np.mean(wave ** 2))
    return Utterance(utt_id, wave.astype(np.float32), tuple(words), labels)


def synthesize_corpus(cfg: CorpusConfig | None = None) -> Corpus:
    cfg = cfg or CorpusConfig()
    if cfg.vocab_size < 2:
        raise ValueError("vocab_size must be >= 2 (SIL plus one word)")
    vocab = Vocab(tuple(f"w{i:02d}" for i in range(1, cfg.vocab_size)))
    tones = word_tones(cfg.vocab_size, cfg.frame_len)
    motif_rng = np.random.default_rng([cfg.seed, 7])
    motifs = {w: _motif(tp, cfg, motif_rng) for w, tp in zip(vocab.words, tones)}
    rng = np.random.default_rng([cfg.seed, 11])
    splits: dict[str, list[Utterance]] = {"train": [], "test": []}
    seen: set[tuple[str, ...]] = set()
    for name, count in (("train", cfg.n_train), ("test", cfg.n_test)):
        while len(splits[name]) < count:
            n = int(rng.integers(cfg.min_words, cfg.max_words + 1))
            words = tuple(rng.choice(vocab.words, size=n).tolist())
            if words in seen:
                continue
            seen.add(words)
            utt_id = f"{name}-{len(splits[name]):04d}"
            utt = synthesize_utterance(utt_id, words, vocab, motifs, cfg)
            utt.validate(vocab)
            splits[name].append(utt)
    return Corpus(vocab, splits["train"], splits["test"], cfg, motifs)


def save_corpus(corpus: Corpus, directory) -> None:
    """JSON-lines manifest per split plus one ATEN waveform per utterance."""
    root = Path(directory)
    (root / "wav").mkdir(parents=True, exist_ok=True)
    for name in ("train", "test"):
        rows = []
        for u in corpus.split(name):
            wav = Path("wav") / f"{u.utt_id}.aten"
            save_tensor(root / wav, u.waveform)
            rows.append(json.dumps({"utt_id": u.utt_id, "words": list(u.words),
                                    "n_frames": int(u.frame_labels.size), "wav_path": str(wav)}))
        (root / f"{name}.jsonl").write_text("\n".join(rows) + "\n")
    meta = {"config": corpus.config.__dict__, "vocab": list(corpus.vocab.words)}
    (root / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_corpus(directory) -> Corpus:
    root = Path(directory)
    meta = json.loads((root / "corpus.json").read_text())
    cfg = CorpusConfig(**meta["config"])
    vocab = Vocab(tuple(meta["vocab"]))
    splits = {}
    for name in ("train", "test"):
        utts = []
        for line in (root / f"{name}.jsonl").read_text().splitlines():
            row = json.loads(line)
            labels = render_frame_labels(vocab, row["words"], cfg, row["n_frames"])
            utt = Utterance(row["utt_id"], load_tensor(root / row["wav_path"]), tuple(row["words"]), labels)
            utt.validate(vocab)
            utts.append(utt)
        splits[name] = utts
    return Corpus(vocab, splits["train"], splits["test"], cfg)


# ----------------------------------------------------------------------
# targets


def assign_target(utt: Utterance, pool: Sequence[Sequence[str]], seed: int,
                  tolerance: float = 0.2) -> tuple[str, ...]:
    """Uniform pick among pool transcripts of similar length, never the utterance's own."""
    if not pool:
        raise ValueError("empty target pool")
    n = len(utt.words)
    own = tuple(utt.words)
    rng = utt_rng(seed, utt.utt_id, "target")
    tol = tolerance
    while True:
        lo, hi = round(n * (1 - tol)), round(n * (1 + tol))
        cands = [tuple(p) for p in pool if lo <= len(p) <= hi and tuple(p) != own]
        if cands:
            return cands[int(rng.integers(len(cands)))]
        if lo <= 1 and hi >= max(len(p) for p in pool):
            raise ValueError("no target candidate differs from the utterance transcript")
        tol += 0.1


# ----------------------------------------------------------------------
# offline attack dataset


def rank_weights(n: int) -> np.ndarray:
    """Weights proportional to 1 + rank in an ascending grid."""
    w = np.arange(1, n + 1, dtype=float)
    return w / w.sum()


def sample_threat(rng: np.random.Generator, l2=L2_BUDGETS, linf=LINF_BUDGETS,
                  iterations=OFFLINE_ITERATIONS) -> tuple[str, float, int]:
    """Draw (norm, budget, iterations), biased towards large budgets and long attacks.

    Norm families are equally likely; within a family higher-ranked budgets weigh more.
    """
    norm = "L2" if rng.random() < 0.5 else "Linf"
    grid = sorted(l2 if norm == "L2" else linf)
    eps = float(grid[rng.choice(len(grid), p=rank_weights(len(grid)))])
    iters = sorted(iterations)
    n_iter = int(iters[rng.choice(len(iters), p=rank_weights(len(iters)))])
    return norm, eps, n_iter


@dataclass
class AttackRow:
    utt_id: str
    norm: str
    epsilon: float
    iterations: int
    seed: int
    path_to_delta: str
    target_text: str

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


@dataclass
class AttackDataset:
    rows: list[AttackRow]
    root: Path
    scale_factor: float = 1.0
    l2_scale_factor: float = 1.0

    def delta(self, row: AttackRow) -> np.ndarray:
        return load_tensor(self.root / row.path_to_delta)

    def pairs(self, utts: dict[str, Utterance]) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (benign, attacked) waveforms in manifest order."""
        benign = np.stack([utts[r.utt_id].waveform for r in self.rows])
        deltas = np.stack([self.delta(r) for r in self.rows])
        return benign, np.clip(benign + deltas, -1.0, 1.0).astype(np.float32)

    def save_manifest(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        lines = [r.to_json() for r in self.rows]
        (self.root / "manifest.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
        (self.root / "meta.json").write_text(json.dumps({"scale_factor": self.scale_factor, "l2_scale_factor": self.l2_scale_factor}))

    @classmethod
    def load(cls, directory) -> "AttackDataset":
        root = Path(directory)
        rows = [AttackRow(**json.loads(line))
                for line in (root / "manifest.jsonl").read_text().splitlines() if line]
        meta = json.loads((root / "meta.json").read_text())
        return cls(rows, root, meta["scale_factor"], meta["l2_scale_factor"])


def norm_ok(delta: np.ndarray, norm: str, eps: float) -> bool:
    # ATEN stores float32, so allow one ulp of slack on the stored copy
    if norm == "Linf":
        return float(np.abs(delta).max(initial=0.0)) <= np.float32(eps)
    return float(np.linalg.norm(delta.astype(np.float64))) <= eps + 1e-6


def generate_offline_attacks(chain, corpus: Corpus, out_dir, seed: int = 0,
                             utts: Sequence[Utterance] | None = None,
                             chunk_size: int = 32, workers: int = 1, grids=None) -> AttackDataset:
    """Targeted PGD against ``chain`` for every utterance, one sampled threat each.

    ``grids`` is any object with ``l2_budgets``, ``linf_budgets`` and
    ``iterations``; the default grids are used when it is None.
    """
    from .attacks import AttackSpec, pgd  # noqa: PLC0415  (attacks imports corpus helpers)
    from .parallel import map_chunks  # noqa: PLC0415

    root = Path(out_dir)
    (root / "delta").mkdir(parents=True, exist_ok=True)
    utts = list(corpus.train if utts is None else utts)
    pool = [u.words for u in corpus.train]
    plans = []
    for u in utts:
        rng = utt_rng(seed, u.utt_id, "threat")
        if grids is None:
            norm, eps, iters = sample_threat(rng)
        else:
            norm, eps, iters = sample_threat(rng, grids.l2_budgets, grids.linf_budgets, grids.iterations)
        target = assign_target(u, pool, seed)
        plans.append((u, norm, eps * corpus.budget_scale(norm), iters, target))

    # group identical specs so each PGD call sees one spec
    groups: dict[tuple[str, float, int], list[int]] = {}
    for i, (_, norm, eps, iters, _) in enumerate(plans):
        groups.setdefault((norm, eps, iters), []).append(i)

    deltas: dict[int, np.ndarray] = {}
    for (norm, eps, iters), members in sorted(groups.items()):
        spec = AttackSpec(norm=norm, epsilon=eps, iterations=iters)
        chunks = [members[i:i + chunk_size] for i in range(0, len(members), chunk_size)]

        def run(chunk, spec=spec):
            x = np.stack([plans[i][0].waveform for i in chunk])
            y = np.stack([corpus.render_labels(plans[i][4]) for i in chunk])
            ids = [plans[i][0].utt_id for i in chunk]
            _, delta = pgd(chain, x, y, spec, seed=seed, utt_ids=ids)
            return dict(zip(chunk, delta))

        for result in map_chunks(run, chunks, workers):
            deltas.update(result)

    rows = []
    for i, (u, norm, eps, iters, target) in enumerate(plans):
        delta = deltas[i].astype(np.float32)
        if not norm_ok(delta, norm, eps):
            log.warning("dropping %s: perturbation exceeds its %s budget", u.utt_id, norm)
            continue
        rel = f"delta/{u.utt_id}.aten"
        save_tensor(root / rel, delta)
        rows.append(AttackRow(u.utt_id, norm, eps, iters, seed, rel, " ".join(target)))
    ds = AttackDataset(rows, root, corpus.scale_factor, corpus.l2_scale_factor)
    ds.save_manifest()
    return ds
