#!/usr/bin/env python3
"""Build the desk-scale datasets under data/ from package-bundled sources.

MNIST: the npm package `mnist` (1.1.0, MIT) ships 10,000 real MNIST digits as
normalized JSON arrays. They are written back out as gzip IDX files with a
fixed interleaving so that any prefix is class-balanced.

News: the PyPI package `tmtoolkit` (0.12.0, Apache-2.0) ships a corpus of news
articles. The four largest outlets become the four class labels; outlet names
are scrubbed from the article bodies.

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    pip download --no-deps tmtoolkit==0.12.0
    python3 scripts/make_datasets.py package tmtoolkit-0.12.0-py3-none-any.whl
"""
import csv
import gzip
import io
import json
import random
import re
import struct
import sys
import zipfile
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "data"


def write_gz(path, payload):
    # mtime=0 keeps the archives byte-stable across rebuilds
    with open(path, "wb") as raw:
        with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0, filename="") as gz:
            gz.write(payload)


def build_mnist(pkg_dir):
    per_class = []
    for digit in range(10):
        data = json.loads((Path(pkg_dir) / "src" / "digits" / f"{digit}.json").read_text())["data"]
        n = len(data) // 784
        imgs = [bytes(round(v * 255) for v in data[i * 784:(i + 1) * 784]) for i in range(n)]
        random.Random(digit).shuffle(imgs)
        per_class.append(imgs)
    images, labels = [], []
    cursor = [0] * 10
    while any(cursor[d] < len(per_class[d]) for d in range(10)):
        for d in range(10):
            if cursor[d] < len(per_class[d]):
                images.append(per_class[d][cursor[d]])
                labels.append(d)
                cursor[d] += 1
    n = len(images)
    write_gz(OUT / "mnist-10k-images-idx3-ubyte.gz",
             struct.pack(">IIII", 0x803, n, 28, 28) + b"".join(images))
    write_gz(OUT / "mnist-10k-labels-idx1-ubyte.gz",
             struct.pack(">II", 0x801, n) + bytes(labels))
    print(f"mnist: {n} images")


SOURCES = {
    "www.aljazeera.com": ("aljazeera", r"al[\s-]?jazeera"),
    "tass.com": ("tass", r"\btass\b"),
    "abcnews.go.com": ("abcnews", r"\babc(\s+news)?\b"),
    "www.rte.ie": ("rte", r"\brt[eé]\b"),
}


def build_news(wheel):
    outer = zipfile.ZipFile(wheel)
    inner = zipfile.ZipFile(io.BytesIO(outer.read("tmtoolkit/data/en/NewsArticles.zip")))
    rows = csv.DictReader(io.StringIO(inner.read("NewsArticles.csv").decode("utf-8")))
    records = []
    for row in rows:
        host = row["article_source_link"].split("/")[2]
        if host not in SOURCES:
            continue
        label, pattern = SOURCES[host]
        text = " ".join(filter(None, [row["title"], row["subtitle"], row["text"]]))
        text = re.sub(pattern, " ", text, flags=re.IGNORECASE)
        text = re.sub(r"\s+", " ", text).strip()
        if text:
            records.append((label, text))
    random.Random(2018).shuffle(records)
    with open(OUT / "news-4src.tsv", "w", encoding="utf-8") as f:
        for label, text in records:
            f.write(f"{label}\t{text}\n")
    print(f"news: {len(records)} documents")


if __name__ == "__main__":
    build_mnist(sys.argv[1])
    build_news(sys.argv[2])
