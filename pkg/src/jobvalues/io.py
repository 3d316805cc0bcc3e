"""File formats: panel CSV, ads JSONL, flow triplets, estimates and traces."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DataError
from .flows import FlowMatrices
from .text import AdRecord

PANEL_COLUMNS = ("worker_id", "period", "employer_id", "log_wage", "age", "gender", "education",
                 "spell_start_day", "spell_end_day")
PANEL_DTYPES = {"worker_id": "int64", "period": "int64", "employer_id": "int64", "log_wage": "float64",
                "age": "int64", "education": "int64", "spell_start_day": "int64", "spell_end_day": "int64"}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_csv(df: pd.DataFrame, path, index: bool = False) -> Path:
    """Deterministic CSV: ``\\n`` line endings, shortest round-trip floats."""
    path = Path(path)
    df.to_csv(path, index=index, lineterminator="\n")
    return path


def write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
    return path


def write_jsonl(rows, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(x):
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, Path):
        return str(x)
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def read_panel(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"gender": str, "occupation": str}, keep_default_na=True)
    missing = [c for c in PANEL_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"panel {path} lacks columns {missing}")
    try:
        df = df.astype(PANEL_DTYPES)
    except (ValueError, TypeError) as exc:
        raise DataError(f"panel {path}: {exc}") from exc
    if "occupation" in df.columns:
        df["occupation"] = df["occupation"].fillna("")
    bad = (df["spell_start_day"] > df["spell_end_day"]) | (df["spell_start_day"] < 1)
    if bad.any():
        raise DataError(f"panel {path}: invalid spell days for workers {sorted(df.loc[bad, 'worker_id'].unique())[:20]}")
    return df


def read_ads(path) -> list[AdRecord]:
    ads = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                ads.append(AdRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{n}: {exc}") from exc
    return ads


def write_ads(ads, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ad in ads:
            fh.write(ad.to_json() + "\n")
    return path


def ads_frame(ads) -> pd.DataFrame:
    cols = ["ad_id", "establishment_id", "posted_date", "unlisted_date", "occupation"]
    return pd.DataFrame([{c: getattr(a, c) for c in cols} for a in ads], columns=cols)


def flows_to_triplets(flows: FlowMatrices) -> pd.DataFrame:
    """Sparse triplets; non-employment appears as ``-1`` on either side."""
    coo = flows.ee.tocoo()
    order = np.lexsort((coo.col, coo.row))
    parts = [pd.DataFrame({"origin": flows.ids[coo.row[order]], "destination": flows.ids[coo.col[order]],
                           "count": coo.data[order]})]
    nz = flows.en > 0
    parts.append(pd.DataFrame({"origin": flows.ids[nz], "destination": -1, "count": flows.en[nz]}))
    nz = flows.ne > 0
    parts.append(pd.DataFrame({"origin": -1, "destination": flows.ids[nz], "count": flows.ne[nz]}))
    return pd.concat(parts, ignore_index=True)
