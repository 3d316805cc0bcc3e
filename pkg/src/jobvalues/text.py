"""Vacancy-text processing: cleaning, number flags, list extraction,
n-gram counts and dictionary matching of job attributes."""
from __future__ import annotations

import csv
import html
import json
import logging
import re
from collections import Counter
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigurationError, ContractError

logger = logging.getLogger(__name__)

PAY_CATEGORIES = ("compensation_scheme", "financial_benefits", "career_opportunities")
NONPAY_CATEGORIES = ("hours_of_work", "convenient_hours", "inconvenient_hours", "contract_duration",
                     "workplace_attributes", "task_related", "minor_perks")
CATEGORIES = PAY_CATEGORIES + NONPAY_CATEGORIES

META_COLUMNS = ("establishment_id", "html_detected", "n_lists", "n_words")
PERCENT_WORDS = frozenset({"%", "prosent", "percent", "percentage"})
BULLETS = "-–•·*▪◦"

_TAG = re.compile(r"<[^<>]*>")
_LI = re.compile(r"<\s*li\b[^<>]*>", re.IGNORECASE)
_BLOCK = re.compile(r"<\s*/?\s*(?:br|p|div|ul|ol|li|h[1-6]|tr|table|section)\b[^<>]*>", re.IGNORECASE)
_TOKEN = re.compile(r"(?:PCT|NUM)_[A-Z0-9_]+|\d+(?:[.,]\d+)?|%|/|[^\W\d_]+(?:-[^\W\d_]+)*")
_SENT_END = re.compile(r"[.!?]+(?=\s)")
_ITEM_MARK = "\x00"
_FLAG = re.compile(r"^(?:PCT|NUM)_[A-Z0-9_]+$")


def _read_lines(name: str, path=None) -> list[str]:
    text = Path(path).read_text(encoding="utf-8") if path else \
        resources.files("jobvalues.data").joinpath(name).read_text(encoding="utf-8")
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]


def load_stopwords(path=None) -> frozenset:
    return frozenset(w.lower() for w in _read_lines("stopwords.txt", path))


def load_abbreviations(path=None) -> frozenset:
    return frozenset(w.lower() for w in _read_lines("abbreviations.txt", path))


DEFAULT_ABBREVIATIONS = load_abbreviations()


# ---------------------------------------------------------------------------
# cleaning


@dataclass(frozen=True)
class Line:
    text: str
    is_item: bool


def split_lines(raw: str) -> tuple[list[Line], bool]:
    """Non-empty text lines with bullet/list-item markers resolved.

    ``<li>`` elements and lines starting with a bullet character are items.
    Returns the lines and whether any HTML tag was present.
    """
    raw = raw or ""
    html_flag = bool(_TAG.search(raw))
    text = _LI.sub("\n" + _ITEM_MARK, raw)
    text = _BLOCK.sub("\n", text)
    text = _TAG.sub(" ", text)
    text = html.unescape(text)
    lines = []
    for ln in text.splitlines():
        s = ln.strip()
        item = False
        if s.startswith(_ITEM_MARK):
            item = True
            s = s.lstrip(_ITEM_MARK).strip()
        if s and s[0] in BULLETS and (len(s) == 1 or not s[1].isdigit()):
            item = True
            s = s.lstrip(BULLETS).strip()
        if s:
            lines.append(Line(s, item))
    return lines, html_flag


def split_sentences(line: str, abbreviations=DEFAULT_ABBREVIATIONS) -> list[str]:
    """Split at sentence-final punctuation followed by whitespace, except
    after a listed abbreviation or an ordinal (``1. mars``)."""
    out, start = [], 0
    for m in _SENT_END.finditer(line):
        word = line[start:m.end()].split()[-1].lower() if line[start:m.end()].split() else ""
        if word in abbreviations:
            continue
        rest = line[m.end():].lstrip()
        if word[:-1].isdigit() and word.endswith(".") and rest[:1].islower():
            continue
        out.append(line[start:m.end()])
        start = m.end()
    out.append(line[start:])
    return [s.strip() for s in out if s.strip()]


def tokenize(sentence: str) -> list[str]:
    """Lower-case word, number, ``%`` and ``/`` tokens; flags pass through unchanged."""
    toks = []
    for t in _TOKEN.findall(sentence):
        toks.append(t if _FLAG.match(t) else t.lower())
    return toks


def _number(tok: str):
    try:
        return float(tok.replace(",", "."))
    except ValueError:
        return None


def flag_numbers(tokens: list[str]) -> list[str]:
    """Replace numbers by placeholders.

    A number below 100 followed by a percent sign or word becomes
    ``PCT_LT_100``, exactly 100 becomes ``PCT_100`` (the percent token is
    absorbed).  Otherwise integers 0 to 4 get their own flag (``NUM_0`` ..
    ``NUM_4``), other numbers below 100 ``NUM_5_99``, 100 ``NUM_100`` and
    larger numbers ``NUM_GT_100``.
    """
    out = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        x = _number(tok) if tok[:1].isdigit() else None
        if x is None:
            out.append(tok)
            i += 1
            continue
        pct = i + 1 < len(tokens) and tokens[i + 1] in PERCENT_WORDS
        if pct and x < 100:
            out.append("PCT_LT_100")
            i += 2
            continue
        if pct and x == 100:
            out.append("PCT_100")
            i += 2
            continue
        if x == int(x) and x <= 4:
            out.append(f"NUM_{int(x)}")
        elif x < 100:
            out.append("NUM_5_99")
        elif x == 100:
            out.append("NUM_100")
        else:
            out.append("NUM_GT_100")
        i += 1
    return out


def normalize(sentence: str) -> list[str]:
    return flag_numbers(tokenize(sentence))


def clean_text(raw: str, abbreviations=DEFAULT_ABBREVIATIONS) -> tuple[list[list[str]], bool]:
    """Token sentences (lower-cased, numbers flagged) and the HTML flag."""
    lines, html_flag = split_lines(raw)
    sentences = []
    for ln in lines:
        for s in split_sentences(ln.text, abbreviations):
            toks = normalize(s)
            if toks:
                sentences.append(toks)
    return sentences, html_flag


def extract_lists(raw: str, abbreviations=DEFAULT_ABBREVIATIONS) -> list[tuple[list[str], list[list[str]]]]:
    """Runs of two or more consecutive item lines, each paired with the last
    sentence of the line before the run as its header (empty if none)."""
    lines, _ = split_lines(raw)
    out = []
    i = 0
    while i < len(lines):
        if not lines[i].is_item:
            i += 1
            continue
        j = i
        while j < len(lines) and lines[j].is_item:
            j += 1
        if j - i >= 2:
            header = []
            if i > 0:
                sents = split_sentences(lines[i - 1].text, abbreviations)
                header = normalize(sents[-1]) if sents else []
            items = [normalize(s) for ln in lines[i:j] for s in split_sentences(ln.text, abbreviations)]
            out.append((header, [t for t in items if t]))
        i = j
    return out


def top_ngrams(sentences, n_max: int = 3, k: int = 200, stopwords=frozenset()) -> list[tuple[tuple, int]]:
    """Most frequent 1..n_max-grams within sentences, skipping any n-gram with a
    stopword; ties broken lexicographically."""
    counts: Counter = Counter()
    for toks in sentences:
        for n in range(1, n_max + 1):
            for i in range(len(toks) - n + 1):
                gram = tuple(toks[i:i + n])
                if not any(t in stopwords for t in gram):
                    counts[gram] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:k]


# ---------------------------------------------------------------------------
# dictionary


def normalize_expression(expr: str) -> tuple:
    return tuple(flag_numbers(tokenize(expr)))


_SURFACE = {"PCT_LT_100": "50 %", "PCT_100": "100 %", "NUM_5_99": "5", "NUM_100": "100", "NUM_GT_100": "250"}


def surface_form(expression: tuple) -> str:
    """A raw string that normalises back to ``expression``."""
    parts = []
    for t in expression:
        if t in _SURFACE:
            parts.append(_SURFACE[t])
        elif re.fullmatch(r"NUM_\d", t):
            parts.append(t[4:])
        else:
            parts.append(t)
    return " ".join(parts)


@dataclass(frozen=True)
class AttributeInfo:
    attribute_id: int
    name: str
    category: str


class AttributeDictionary:
    """Expressions (normalised token tuples of length 1-3) mapped to attributes."""

    def __init__(self, entries: dict, attributes: list[AttributeInfo]):
        self.attributes = sorted(attributes, key=lambda a: a.attribute_id)
        ids = [a.attribute_id for a in self.attributes]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("duplicate attribute ids")
        for a in self.attributes:
            if a.category not in CATEGORIES:
                raise ConfigurationError(f"unknown category {a.category!r} for attribute {a.name}")
        self.entries = dict(entries)
        known = set(ids)
        for expr, aid in self.entries.items():
            if aid not in known:
                raise ConfigurationError(f"expression {' '.join(expr)!r} refers to unknown attribute {aid}")
            if not 1 <= len(expr) <= 3:
                raise ConfigurationError(f"expression {' '.join(expr)!r} must have 1 to 3 tokens")
        covered = set(self.entries.values())
        empty = [a.name for a in self.attributes if a.attribute_id not in covered]
        if empty:
            raise ConfigurationError(f"attributes without expressions: {empty}")
        self._pos = {a.attribute_id: i for i, a in enumerate(self.attributes)}
        self._cat = np.array([CATEGORIES.index(a.category) for a in self.attributes])
        self._by_first: dict = {}
        for expr, aid in self.entries.items():
            self._by_first.setdefault(expr[0], []).append((expr, self._pos[aid]))

    @classmethod
    def from_csv(cls, path=None) -> "AttributeDictionary":
        if path is None:
            fh = resources.files("jobvalues.data").joinpath("dictionary.csv").open(encoding="utf-8")
        else:
            fh = open(path, encoding="utf-8", newline="")
        with fh:
            reader = csv.DictReader(fh)
            need = {"expression", "attribute_id", "attribute_name", "category"}
            if not need <= set(reader.fieldnames or ()):
                raise ConfigurationError(f"dictionary needs columns {sorted(need)}")
            entries, attrs = {}, {}
            for row in reader:
                expr = normalize_expression(row["expression"])
                if not expr:
                    raise ConfigurationError(f"empty expression for attribute {row['attribute_name']}")
                if expr in entries:
                    raise ConfigurationError(f"duplicate expression {' '.join(expr)!r}")
                aid = int(row["attribute_id"])
                info = AttributeInfo(aid, row["attribute_name"], row["category"])
                if attrs.setdefault(aid, info) != info:
                    raise ConfigurationError(f"inconsistent metadata for attribute {aid}")
                entries[expr] = aid
        return cls(entries, list(attrs.values()))

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    def __len__(self):
        return len(self.attributes)

    def expressions_for(self, name: str) -> list[tuple]:
        aid = next(a.attribute_id for a in self.attributes if a.name == name)
        return sorted(e for e, a in self.entries.items() if a == aid)

    def category_of(self, name: str) -> str:
        return next(a.category for a in self.attributes if a.name == name)

    def match(self, sentences) -> tuple[np.ndarray, np.ndarray]:
        """Attribute and category indicators for tokenised sentences."""
        hit = np.zeros(len(self.attributes), dtype=bool)
        for toks in sentences:
            n = len(toks)
            for i, t in enumerate(toks):
                for expr, pos in self._by_first.get(t, ()):
                    m = len(expr)
                    if i + m <= n and tuple(toks[i:i + m]) == expr:
                        hit[pos] = True
        cats = np.zeros(len(CATEGORIES), dtype=bool)
        cats[np.unique(self._cat[hit])] = True
        return hit, cats


def detect_attributes(sentences, dictionary: AttributeDictionary) -> tuple[np.ndarray, np.ndarray]:
    """An attribute is present iff one of its expressions occurs as a
    contiguous token run inside a single sentence; a category is present iff
    any of its attributes is."""
    return dictionary.match(sentences)


# ---------------------------------------------------------------------------
# ads


@dataclass(frozen=True)
class AdRecord:
    ad_id: int
    establishment_id: int
    posted_date: str
    text: str
    unlisted_date: str | None = None
    occupation: str = ""
    online_posted: bool = True
    employer_name_disclosed: bool = True

    def __post_init__(self):
        if self.unlisted_date is not None and self.unlisted_date < self.posted_date:
            raise ContractError(f"ad {self.ad_id}: unlisted before posted")

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AdRecord":
        fields = {k: d[k] for k in ("ad_id", "establishment_id", "posted_date", "text") if k in d}
        if len(fields) < 4:
            raise ContractError(f"ad record missing fields: {sorted(set(('ad_id', 'establishment_id', 'posted_date', 'text')) - set(d))}")
        for k in ("unlisted_date", "occupation", "online_posted", "employer_name_disclosed"):
            if k in d and d[k] is not None:
                fields[k] = d[k]
        return cls(**fields)


def extract_corpus(ads, dictionary: AttributeDictionary, abbreviations=DEFAULT_ABBREVIATIONS) -> pd.DataFrame:
    """One row per ad (sorted by id): establishment, HTML flag, number of
    extracted lists, word count, then attribute and ``cat_*`` indicators."""
    rows, meta = [], []
    for ad in sorted(ads, key=lambda a: a.ad_id):
        sents, html_flag = clean_text(ad.text, abbreviations)
        att, cat = dictionary.match(sents)
        rows.append(np.r_[att, cat].astype(np.int8))
        meta.append((ad.ad_id, ad.establishment_id, int(html_flag), len(extract_lists(ad.text, abbreviations)),
                     sum(len(s) for s in sents)))
    cols = dictionary.names + [f"cat_{c}" for c in CATEGORIES]
    out = pd.DataFrame(np.array(rows, dtype=np.int8).reshape(len(rows), len(cols)), columns=cols)
    meta = pd.DataFrame(meta, columns=["ad_id", "establishment_id", "html_detected", "n_lists", "n_words"])
    return pd.concat([meta, out], axis=1).set_index("ad_id")


def prevalence(detected: pd.DataFrame, groups=None, expected_groups=None, attribute_columns=None):
    """Share of ads with each attribute/category, overall or per group, plus
    the mean number of distinct attributes per ad.

    ``groups`` maps ads (aligned with ``detected``'s index) to a key.
    Groups listed in ``expected_groups`` without any ad are left out and
    returned in the warning list.
    """
    if attribute_columns is None:
        attribute_columns = [c for c in detected.columns if not str(c).startswith("cat_")
                             and c not in META_COLUMNS]
    share_cols = attribute_columns + [c for c in detected.columns if str(c).startswith("cat_")]
    d = detected[share_cols].astype(float)
    d = d.assign(mean_attribute_count=detected[attribute_columns].sum(axis=1).astype(float))
    if groups is None:
        if d.empty:
            raise ContractError("no ads")
        return d.mean().to_frame().T.assign(n_ads=len(d)), []
    key = pd.Series(groups, index=detected.index) if not isinstance(groups, pd.Series) else groups.reindex(detected.index)
    out = d.groupby(key.to_numpy()).mean()
    out["n_ads"] = d.groupby(key.to_numpy()).size()
    out.index.name = "group"
    warnings = []
    if expected_groups is not None:
        warnings = sorted(set(expected_groups) - set(out.index))
        if warnings:
            logger.warning("%d groups without ads excluded", len(warnings))
    return out, warnings


def validation_metrics(auto, manual) -> dict:
    """Success rate, precision and sensitivity of automatic against manual labels.

    Ratios with an empty denominator are ``None``.  2-D inputs (ads x
    attributes) give one result per column as a DataFrame.
    """
    a = np.asarray(auto).astype(bool)
    m = np.asarray(manual).astype(bool)
    if a.shape != m.shape:
        raise ContractError(f"label shapes differ: {a.shape} vs {m.shape}")
    if a.ndim == 2:
        cols = auto.columns if isinstance(auto, pd.DataFrame) else range(a.shape[1])
        return pd.DataFrame([validation_metrics(a[:, j], m[:, j]) for j in range(a.shape[1])], index=list(cols))
    tp = int(np.sum(a & m))
    fp = int(np.sum(a & ~m))
    fn = int(np.sum(~a & m))
    tn = int(np.sum(~a & ~m))
    n = tp + fp + fn + tn
    return {
        "n": n, "tp": tp, "fp": fp, "fn": fn, "tn": tn,
        "success": (tp + tn) / n if n else None,
        "precision": tp / (tp + fp) if tp + fp else None,
        "sensitivity": tp / (tp + fn) if tp + fn else None,
    }
