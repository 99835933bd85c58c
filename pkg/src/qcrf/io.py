"""Plain-text dataset and feature-table files."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from qcrf.crf import DomainError, FeatureTable, Sequence


def fmt(x: float) -> str:
    return f"{float(x):.17g}"


def read_dataset(path) -> list[Sequence]:
    """``observation<TAB>label`` per line, blank line between sequences."""
    sequences, obs, labels = [], [], []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            if obs:
                sequences.append(Sequence(obs, labels))
                obs, labels = [], []
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DomainError(f"{path}:{lineno}: expected 'observation<TAB>label'")
        obs.append(parts[0])
        labels.append(parts[1])
    if obs:
        sequences.append(Sequence(obs, labels))
    return sequences


def write_dataset(path, sequences) -> None:
    blocks = ["".join(f"{o}\t{y}\n" for o, y in zip(s.observations, s.labels)) for s in sequences]
    Path(path).write_text("\n".join(blocks), encoding="utf-8")


def read_feature_table(path) -> FeatureTable:
    """Header ``K n Q``, then one line of Q signs per ``(k, i)``, k outer."""
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    try:
        K, n, Q = (int(v) for v in lines[0].split())
    except (IndexError, ValueError):
        raise DomainError(f"{path}: header must be 'K n Q'") from None
    if len(lines) - 1 != K * n:
        raise DomainError(f"{path}: expected {K * n} sign rows, found {len(lines) - 1}")
    rows = [[int(v) for v in ln.split()] for ln in lines[1:]]
    if any(len(r) != Q for r in rows):
        raise DomainError(f"{path}: every row needs {Q} signs")
    return FeatureTable(np.array(rows, dtype=np.int8).reshape(K, n, Q))


def write_feature_table(path, table: FeatureTable) -> None:
    out = [f"{table.K} {table.n} {table.Q}"]
    for k in range(table.K):
        for i in range(table.n):
            out.append(" ".join(str(int(v)) for v in table.values[k, i]))
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")
