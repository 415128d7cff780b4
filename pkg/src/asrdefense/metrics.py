"""Word error rate, the benign / GT / TGT evaluation protocol and summary tables."""

from __future__ import annotations

import csv
import io
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .asr import Utterance, decode
from .attacks import AttackFailed, AttackSpec, ModelChain, pgd
from .autodiff import Tensor, no_grad
from .corpus import utt_rng
from .parallel import map_chunks

log = logging.getLogger(__name__)

_PUNCT = re.compile(r"[^\w\s$]")


def normalize(text) -> list[str]:
    """Lowercase, drop punctuation other than ``$``, split on whitespace."""
    if not isinstance(text, str):
        text = " ".join(text)
    return _PUNCT.sub(" ", text.lower().replace("_", " ")).split()


@dataclass
class ErrorCounts:
    sub: int = 0
    ins: int = 0
    dele: int = 0
    ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.sub + self.ins + self.dele

    @property
    def wer(self) -> float:
        if self.ref_len == 0:
            raise ValueError("WER undefined for an empty reference")
        return 100.0 * self.errors / self.ref_len

    def __add__(self, other: "ErrorCounts") -> "ErrorCounts":
        return ErrorCounts(self.sub + other.sub, self.ins + other.ins,
                           self.dele + other.dele, self.ref_len + other.ref_len)


def align(ref: Sequence[str], hyp: Sequence[str]) -> ErrorCounts:
    """Unit-cost Levenshtein alignment; on ties the backtrace takes substitutions
    before deletions before insertions."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                          d[i - 1, j] + 1, d[i, j - 1] + 1)
    counts = ErrorCounts(ref_len=n)
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            counts.sub += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            counts.dele += 1
            i -= 1
        else:
            counts.ins += 1
            j -= 1
    return counts


def wer(ref, hyp) -> tuple[float, int, int, int]:
    """``(percentage, S, I, D)``; strings are normalized, sequences used as-is."""
    r = normalize(ref) if isinstance(ref, str) else list(ref)
    h = normalize(hyp) if isinstance(hyp, str) else list(hyp)
    if not r:
        raise ValueError("empty reference")
    c = align(r, h)
    return c.wer, c.sub, c.ins, c.dele


@dataclass
class TranscriptSet:
    actual: tuple[str, ...]
    benign: tuple[str, ...]
    target: tuple[str, ...] | None = None
    adversarial: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.actual:
            raise ValueError("actual transcript must be non-empty")


@dataclass
class WerReport:
    benign: ErrorCounts = field(default_factory=ErrorCounts)
    gt: ErrorCounts = field(default_factory=ErrorCounts)
    tgt: ErrorCounts | None = None
    n_utts: int = 0
    failed: list[str] = field(default_factory=list)

    @property
    def benign_wer(self) -> float:
        return self.benign.wer

    @property
    def gt_wer(self) -> float:
        return self.gt.wer

    @property
    def tgt_wer(self) -> float | None:
        return None if self.tgt is None else self.tgt.wer

    @property
    def partial(self) -> bool:
        return bool(self.failed)

    def add(self, ts: TranscriptSet) -> None:
        self.benign = self.benign + align(ts.actual, ts.benign)
        if ts.adversarial is not None:
            self.gt = self.gt + align(ts.actual, ts.adversarial)
            if ts.target is not None:
                pair = align(ts.target, ts.adversarial)
                self.tgt = pair if self.tgt is None else self.tgt + pair
        self.n_utts += 1


def pooled_report(sets: Sequence[TranscriptSet]) -> WerReport:
    report = WerReport()
    for ts in sets:
        report.add(ts)
    return report


def decode_chain(chain: ModelChain, x: np.ndarray, seed: int, utt_ids: Sequence[str]):
    """Decode a batch; a smoothing stage draws one fixed noise sample per utterance."""
    noise = None
    if chain.stochastic:
        noise = np.stack([utt_rng(seed, uid, "eval-noise").standard_normal(x.shape[-1])
                          for uid in utt_ids])
    with no_grad():
        logp = chain(Tensor(x), noise)
    return decode(logp, chain.recognizer.vocab)


def evaluate_cell(chain: ModelChain, utts: Sequence[Utterance], spec: AttackSpec,
                  targets: Mapping[str, Sequence[str]] | None = None, seed: int = 0,
                  render_labels=None, chunk_size: int = 50, workers: int = 1,
                  ) -> tuple[WerReport, list[TranscriptSet]]:
    """Attack every utterance and pool error counts over the split.

    Targeted specs need ``targets`` (utt_id -> words) and ``render_labels``
    (words -> frame labels). Attack failures are recorded in ``failed``.
    """
    targeted = spec.mode == "targeted"
    if targeted and (targets is None or render_labels is None):
        raise ValueError("targeted evaluation needs targets and a label renderer")
    chunks = [list(utts[i:i + chunk_size]) for i in range(0, len(utts), chunk_size)]

    def run(chunk: list[Utterance]):
        ids = [u.utt_id for u in chunk]
        x = np.stack([u.waveform for u in chunk])
        benign = decode_chain(chain, x, seed, ids)
        if targeted:
            labels = np.stack([render_labels(targets[u.utt_id]) for u in chunk])
        else:
            labels = np.stack([u.frame_labels for u in chunk])
        try:
            x_adv, _ = pgd(chain, x, labels, spec, seed=seed, utt_ids=ids)
            adv = decode_chain(chain, x_adv, seed, ids)
            failed: list[str] = []
        except AttackFailed:
            adv, failed = [], []
            for k, u in enumerate(chunk):
                try:
                    xa, _ = pgd(chain, x[k:k + 1], labels[k:k + 1], spec, seed=seed, utt_ids=[u.utt_id])
                    adv.append(decode_chain(chain, xa, seed, [u.utt_id])[0])
                except AttackFailed as exc:
                    log.warning("attack failed on %s: %s", u.utt_id, exc)
                    failed.append(u.utt_id)
                    adv.append(None)
        sets = []
        for u, b, a in zip(chunk, benign, adv):
            tgt = tuple(targets[u.utt_id]) if targeted else None
            sets.append(TranscriptSet(tuple(u.words), tuple(b), tgt, None if a is None else tuple(a)))
        return sets, failed

    all_sets: list[TranscriptSet] = []
    report = WerReport()
    for sets, failed in map_chunks(run, chunks, workers):
        for ts in sets:
            if ts.adversarial is not None:
                report.add(ts)
        all_sets.extend(sets)
        report.failed.extend(failed)
    return report, all_sets


# ----------------------------------------------------------------------
# summaries


@dataclass(frozen=True)
class CellResult:
    system: str
    norm: str
    epsilon: float
    iterations: int
    report: WerReport

    @property
    def attack(self) -> str:
        return "FGSM" if self.iterations == 1 else f"PGD-{self.iterations}"


@dataclass(frozen=True)
class BoxStats:
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    n: int


def nearest_rank(sorted_vals: Sequence[float], p: float) -> float:
    k = max(1, math.ceil(p * len(sorted_vals)))
    return sorted_vals[k - 1]


def box_stats(values: Sequence[float]) -> BoxStats:
    if not values:
        raise ValueError("no values to summarize")
    v = sorted(values)
    return BoxStats(v[0], nearest_rank(v, 0.25), nearest_rank(v, 0.5), nearest_rank(v, 0.75), v[-1], len(v))


def summarize_boxplot(cells: Sequence[CellResult], exclude_eps: Sequence[float] = (0.2,)
                      ) -> dict[str, BoxStats]:
    """GT WER quartiles per system across attack settings, skipping excluded budgets."""
    grouped: dict[str, list[float]] = {}
    for c in cells:
        grouped.setdefault(c.system, [])
        if any(math.isclose(c.epsilon, e) for e in exclude_eps):
            continue
        grouped[c.system].append(c.report.gt_wer)
    return {s: box_stats(v) for s, v in grouped.items() if v}


RESULT_COLUMNS = ("system", "norm", "epsilon", "iterations", "benign_wer", "gt_wer", "tgt_wer", "n_utts")
BOX_COLUMNS = ("system", "min", "q1", "median", "q3", "max", "n_settings")


def _fmt(v) -> str:
    return "" if v is None else f"{v:.2f}"


def results_csv(cells: Sequence[CellResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for c in cells:
        r = c.report
        w.writerow([c.system, c.norm, f"{c.epsilon:g}", c.iterations, _fmt(r.benign_wer),
                    _fmt(r.gt_wer), _fmt(r.tgt_wer), r.n_utts])
    return buf.getvalue()


def boxplot_csv(stats: Mapping[str, BoxStats]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BOX_COLUMNS)
    for system, s in stats.items():
        w.writerow([system, _fmt(s.minimum), _fmt(s.q1), _fmt(s.median), _fmt(s.q3), _fmt(s.maximum), s.n])
    return buf.getvalue()


def benign_report(chain: ModelChain, utts: Sequence[Utterance], seed: int = 0) -> WerReport:
    ids = [u.utt_id for u in utts]
    hyps = decode_chain(chain, np.stack([u.waveform for u in utts]), seed, ids)
    return pooled_report([TranscriptSet(tuple(u.words), tuple(h)) for u, h in zip(utts, hyps)])
