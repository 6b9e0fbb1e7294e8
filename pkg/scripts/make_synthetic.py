"""Write a synthetic vessel-like volume to an EVF1 file."""

import argparse

from esegeta.synthetic import tube_volume
from esegeta.volume_io import write_evf


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out")
    p.add_argument("--shape", type=int, nargs="+", default=[16, 16, 16])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--radius", type=float, default=2.0)
    p.add_argument("--noise", type=float, default=0.1)
    a = p.parse_args()
    write_evf(tube_volume(tuple(a.shape), seed=a.seed, radius=a.radius, noise=a.noise), a.out)


if __name__ == "__main__":
    main()
