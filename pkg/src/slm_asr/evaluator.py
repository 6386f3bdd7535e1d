"""Levenshtein-aligned WER per language, macro averaging and table output."""

from __future__ import annotations

import csv
import logging
import unicodedata
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

logger = logging.getLogger(__name__)

TOKENIZATIONS = ("whitespace", "character")


def _strip_punct(token: str) -> str:
    start, end = 0, len(token)
    while start < end and unicodedata.category(token[start]).startswith("P"):
        start += 1
    while end > start and unicodedata.category(token[end - 1]).startswith("P"):
        end -= 1
    return token[start:end]


def normalize_text(text: str) -> str:
    """Lowercase, collapse whitespace, strip leading/trailing punctuation of each token."""
    tokens = (_strip_punct(t) for t in text.lower().split())
    return " ".join(t for t in tokens if t)


def tokenize(text: str, mode: str = "whitespace", normalize: bool = True) -> list[str]:
    if mode not in TOKENIZATIONS:
        raise ValueError(f"unknown tokenization {mode!r}; expected one of {TOKENIZATIONS}")
    if normalize:
        text = normalize_text(text)
    if mode == "whitespace":
        return text.split()
    return [ch for ch in text if not ch.isspace()]


def edit_ops(ref: list[str], hyp: list[str]) -> tuple[int, int, int]:
    """(substitutions, insertions, deletions) of a minimum-cost alignment.

    Among equal-cost alignments the backtrace prefers substitution/match, then
    insertion, then deletion.
    """
    n, m = len(ref), len(hyp)
    cost = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = i
    for j in range(1, m + 1):
        cost[0][j] = j
    for i in range(1, n + 1):
        row, prev = cost[i], cost[i - 1]
        r = ref[i - 1]
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (r != hyp[j - 1]), row[j - 1] + 1, prev[j] + 1)
    s = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i][j] == cost[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and cost[i][j] == cost[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return s, ins, dels


@dataclass
class LanguageStats:
    n_ref_tokens: int = 0
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    utterances: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        if self.n_ref_tokens == 0:
            return 0.0 if self.errors == 0 else float("inf")
        return self.errors / self.n_ref_tokens

    def to_dict(self) -> dict:
        d = asdict(self)
        d["wer"] = self.wer
        return d


@dataclass
class WerReport:
    per_language: dict[str, LanguageStats] = field(default_factory=dict)
    utterance_count: int = 0

    @property
    def macro_wer(self) -> float:
        """Unweighted mean over languages."""
        if not self.per_language:
            return 0.0
        return sum(s.wer for s in self.per_language.values()) / len(self.per_language)

    @property
    def micro_wer(self) -> float:
        """Token-weighted WER over all languages."""
        n = sum(s.n_ref_tokens for s in self.per_language.values())
        e = sum(s.errors for s in self.per_language.values())
        if n == 0:
            return 0.0 if e == 0 else float("inf")
        return e / n

    def to_dict(self) -> dict:
        return {
            "per_language": {k: v.to_dict() for k, v in sorted(self.per_language.items())},
            "macro_wer": self.macro_wer,
            "micro_wer": self.micro_wer,
            "utterance_count": self.utterance_count,
        }


def _as_hyp_map(hyps) -> dict[str, str]:
    if isinstance(hyps, Mapping):
        return dict(hyps)
    out: dict[str, str] = {}
    for utt, text in hyps:
        if utt in out:
            raise ValueError(f"duplicate hypothesis for {utt!r}")
        out[utt] = text
    return out


def score(
    refs: Iterable[tuple[str, str, str]],
    hyps: Mapping[str, str] | Iterable[tuple[str, str]],
    tokenization: str = "whitespace",
    normalize: bool = True,
) -> WerReport:
    """Score (utt_id, language, reference) triples against hypotheses."""
    hyp_map = _as_hyp_map(hyps)
    stats: dict[str, LanguageStats] = defaultdict(LanguageStats)
    count = 0
    seen = set()
    for utt, language, ref_text in refs:
        if utt in seen:
            raise ValueError(f"duplicate reference for {utt!r}")
        seen.add(utt)
        if utt not in hyp_map:
            logger.warning("no hypothesis for %s; scoring as empty", utt)
        ref_tokens = tokenize(ref_text, tokenization, normalize)
        hyp_tokens = tokenize(hyp_map.get(utt, ""), tokenization, normalize)
        s, i, d = edit_ops(ref_tokens, hyp_tokens)
        st = stats[language]
        st.n_ref_tokens += len(ref_tokens)
        st.substitutions += s
        st.insertions += i
        st.deletions += d
        st.utterances += 1
        count += 1
    return WerReport(dict(sorted(stats.items())), count)


# --- files -------------------------------------------------------------------


_LINE_BREAKERS = str.maketrans({c: " " for c in "\t\n\r\v\f\x1c\x1d\x1e\x85\u2028\u2029"})


def read_hypotheses(path) -> dict[str, str]:
    """Read ``utt_id<TAB>text`` lines; a duplicate utt_id is an error."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            utt, sep, text = line.partition("\t")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected 'utt_id<TAB>text'")
            if utt in out:
                raise ValueError(f"{path}:{lineno}: duplicate hypothesis for {utt!r}")
            out[utt] = text
    return out


def write_hypotheses(hyps: Mapping[str, str], path) -> None:
    # tabs and line breaks inside a text would corrupt the line format
    with open(path, "w", encoding="utf-8") as fh:
        for utt in sorted(hyps):
            text = hyps[utt].translate(_LINE_BREAKERS)
            fh.write(f"{utt}\t{text}\n")


def format_wer(wer: float) -> str:
    return f"{100.0 * wer:.2f}%"


def parse_wer(cell: str) -> float:
    return float(cell.rstrip("%")) / 100.0


def _aligned(rows: list[list[str]]) -> str:
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


LANGUAGE_COLUMNS = ["Language", "Utterances", "Ref tokens", "Sub", "Ins", "Del", "WER"]


def report_rows(report: WerReport) -> list[list[str]]:
    rows = []
    for lang, st in report.per_language.items():
        rows.append(
            [lang, str(st.utterances), str(st.n_ref_tokens), str(st.substitutions), str(st.insertions), str(st.deletions), format_wer(st.wer)]
        )
    total = LanguageStats(
        n_ref_tokens=sum(s.n_ref_tokens for s in report.per_language.values()),
        substitutions=sum(s.substitutions for s in report.per_language.values()),
        insertions=sum(s.insertions for s in report.per_language.values()),
        deletions=sum(s.deletions for s in report.per_language.values()),
        utterances=report.utterance_count,
    )
    rows.append(["macro", str(total.utterances), "", "", "", "", format_wer(report.macro_wer)])
    rows.append(
        ["micro", str(total.utterances), str(total.n_ref_tokens), str(total.substitutions), str(total.insertions), str(total.deletions), format_wer(report.micro_wer)]
    )
    return rows


def write_wer_report(report: WerReport, csv_path, text_path=None) -> None:
    """Per-language rows followed by macro and micro rows."""
    rows = report_rows(report)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LANGUAGE_COLUMNS)
        writer.writerows(rows)
    if text_path is not None:
        Path(text_path).write_text(_aligned([LANGUAGE_COLUMNS, *rows]), encoding="utf-8")


RUN_COLUMNS = ["Audio Encoder", "LLM", "LoRA", "Projector", "Train data", "Eval Set (WER)"]


@dataclass
class RunRow:
    audio_encoder: str
    llm: str
    lora: bool
    projector: str
    train_data: str
    wer: float

    def cells(self) -> list[str]:
        return [self.audio_encoder, self.llm, "yes" if self.lora else "", self.projector, self.train_data, format_wer(self.wer)]


def emit_report(runs: list[RunRow], csv_path, text_path=None) -> None:
    """One row per run, columns in a fixed order, WER as a two-decimal percentage."""
    rows = [r.cells() for r in runs]
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RUN_COLUMNS)
        writer.writerows(rows)
    if text_path is not None:
        Path(text_path).write_text(_aligned([RUN_COLUMNS, *rows]), encoding="utf-8")


def parse_report(csv_path) -> list[RunRow]:
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != RUN_COLUMNS:
            raise ValueError(f"{csv_path}: unexpected columns {header}")
        return [RunRow(enc, llm, lora == "yes", proj, data, parse_wer(wer)) for enc, llm, lora, proj, data, wer in reader]
