"""Rebuild the MovieLens100K files (u.data and the u1..u5 splits).

The GroupLens site is the canonical source. When it is not reachable, the
RecBole wheel on PyPI ships an ``ml-100k.inter`` file whose rows are ``u.data``
in its original order; the five provided splits are then regenerated with the
same chunking as the ``mku.sh`` script shipped with the dataset (test set i is
the i-th block of 20000 lines of ``u.data``).

Usage::

    python scripts/fetch_movielens100k.py [--out data/ml-100k]

The data is covered by the GroupLens terms of use and is not redistributed
with this repository.
"""
import argparse
import io
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

GROUPLENS_URL = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
RECBOLE_SPEC = "recbole==1.2.1"
INTER_MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def from_grouplens():
    with urllib.request.urlopen(GROUPLENS_URL, timeout=30) as resp:
        blob = resp.read()
    with zipfile.ZipFile(io.BytesIO(blob)) as z:
        return z.read("ml-100k/u.data").decode("latin-1").splitlines()


def from_recbole():
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q",
             RECBOLE_SPEC, "-d", tmp],
            check=True,
        )
        wheel = next(Path(tmp).glob("recbole-*.whl"))
        with zipfile.ZipFile(wheel) as z:
            text = z.read(INTER_MEMBER).decode("utf-8")
    lines = text.splitlines()
    if lines and lines[0].startswith("user_id"):
        lines = lines[1:]
    return lines


def mku_splits(lines):
    """The five (base, test) pairs, each sorted by user then item."""
    key = lambda s: (int(s.split("\t")[0]), int(s.split("\t")[1]))  # noqa: E731
    for i in range(1, 6):
        test = lines[(i - 1) * 20000:i * 20000]
        base = lines[:(i - 1) * 20000] + lines[i * 20000:]
        yield i, sorted(base, key=key), sorted(test, key=key)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/ml-100k")
    args = ap.parse_args(argv)
    try:
        lines = from_grouplens()
        source = "grouplens"
    except Exception:
        lines = from_recbole()
        source = "recbole wheel"
    if len(lines) != 100000:
        raise SystemExit(f"expected 100000 ratings, got {len(lines)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "u.data").write_text("\n".join(lines) + "\n")
    for i, base, test in mku_splits(lines):
        (out / f"u{i}.base").write_text("\n".join(base) + "\n")
        (out / f"u{i}.test").write_text("\n".join(test) + "\n")
    print(f"wrote u.data and u1..u5 splits to {out} (source: {source})")


if __name__ == "__main__":
    main()
