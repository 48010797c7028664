"""Convert the 5000-image MNIST sample shipped in the mlxtend wheel into IDX files.

Usage: python3 make_mnist_subset.py <mlxtend wheel> <out dir>

Rows are shuffled with a fixed seed so that any front-truncated prefix is
roughly class balanced (the source CSV is sorted by label).
"""
import gzip
import random
import struct
import sys
import zipfile


def main(wheel, out_dir):
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = [line.split(",") for line in gzip.decompress(raw).decode().strip().split("\n")]
    random.Random(20220101).shuffle(rows)
    n = len(rows)
    with open(f"{out_dir}/mnist5k-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for r in rows:
            f.write(bytes(int(float(v)) for v in r[:784]))
    with open(f"{out_dir}/mnist5k-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(int(float(r[784])) for r in rows))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
