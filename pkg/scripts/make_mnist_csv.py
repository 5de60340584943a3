"""Build the gzipped MNIST CSV used by the desk-scale configs.

    python scripts/make_mnist_csv.py --idx DIR [--split train] [--limit 10000] OUT.csv.gz
    python scripts/make_mnist_csv.py --json DIR OUT.csv.gz

``--idx`` reads the standard IDX files. ``--json`` reads ``0.json`` ...
``9.json`` as shipped in the ``src/digits`` folder of the npm ``mnist``
package (pixel intensities in [0, 1], one array per digit).
Rows are 784 pixel bytes followed by the label.
"""
import argparse
import gzip
import json
import os

import numpy as np

from eqprop.data import load_mnist


def from_json(folder):
    rows = []
    for digit in range(10):
        with open(os.path.join(folder, f"{digit}.json")) as fh:
            pix = np.asarray(json.load(fh)["data"], dtype=np.float64).reshape(-1, 784)
        pix = np.clip(np.round(pix * 255), 0, 255).astype(np.int64)
        rows.append(np.concatenate([pix, np.full((len(pix), 1), digit)], axis=1))
    return np.concatenate(rows)


def from_idx(folder, split, limit):
    ds = load_mnist(folder, split)
    pix = np.round(ds.images.reshape(len(ds), -1) * 255).astype(np.int64)
    rows = np.concatenate([pix, ds.labels[:, None]], axis=1)
    return rows[:limit] if limit else rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--idx", metavar="DIR")
    src.add_argument("--json", metavar="DIR")
    ap.add_argument("--split", default="train")
    ap.add_argument("--limit", type=int, default=10000)
    ap.add_argument("out")
    args = ap.parse_args(argv)
    rows = from_json(args.json) if args.json else from_idx(args.idx, args.split, args.limit)
    with gzip.open(args.out, "wt") as fh:
        np.savetxt(fh, rows, fmt="%d", delimiter=",")
    print(f"{len(rows)} rows -> {args.out}")


if __name__ == "__main__":
    main()
