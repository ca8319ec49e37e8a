#!/usr/bin/env python3
"""Convert the raw Letter recognition table into gzipped libsvm splits.

Input: the 20,000-row comma-separated Letter table (16 integer attributes in
0..15 followed by the capital letter class). Output, in data/letter/:

    letter.scale.tr.gz   first 10,500 rows
    letter.scale.val.gz  next 4,500 rows
    letter.scale.t.gz    last 5,000 rows

Features are min-max scaled to [-1, 1]; labels are 0-based (A=0 .. Z=25).
Zero-valued features are omitted, as in the usual libsvm distribution.
"""
import gzip
import sys
from pathlib import Path


def main(src: str, out_dir: str) -> None:
    rows = []
    for line in Path(src).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("@"):
            continue
        *feats, cls = [t.strip() for t in line.split(",")]
        rows.append(([int(v) for v in feats], ord(cls) - ord("A")))
    assert len(rows) == 20000, len(rows)
    m = len(rows[0][0])
    lo = [min(r[0][j] for r in rows) for j in range(m)]
    hi = [max(r[0][j] for r in rows) for j in range(m)]

    def fmt(row):
        feats, label = row
        toks = [str(label)]
        for j, v in enumerate(feats):
            s = -1.0 + 2.0 * (v - lo[j]) / (hi[j] - lo[j]) if hi[j] > lo[j] else 0.0
            if s != 0.0:
                toks.append(f"{j + 1}:{s!r}")
        return " ".join(toks) + "\n"

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = {"letter.scale.tr.gz": rows[:10500],
              "letter.scale.val.gz": rows[10500:15000],
              "letter.scale.t.gz": rows[15000:]}
    for name, part in splits.items():
        # mtime=0 keeps the archives byte-stable across regenerations
        with open(out / name, "wb") as raw:
            with gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as gz:
                gz.write("".join(fmt(r) for r in part).encode())


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2] if len(sys.argv) > 2 else "data/letter")
