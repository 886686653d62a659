"""Reference embedding backend.

Run as ``python -m roadscope.nn.echo_backend --dim D``. Each tile is answered
with its per-channel mean and standard deviation (scaled to [0, 1]),
zero-padded or cut to D floats. ``--exit-after N`` answers N tiles and then
dies (exit 1) halfway through the next vector; ``--short-by K`` answers one
tile with K floats too few and exits cleanly.
"""
import argparse
import sys
from typing import BinaryIO, Optional, Sequence

import numpy as np


def tile_statistics(pixels: np.ndarray, dim: int) -> np.ndarray:
    rgb = pixels.reshape(-1, 3).astype(np.float64) / 255.0
    stats = np.concatenate([rgb.mean(axis=0), rgb.std(axis=0)])
    out = np.zeros(dim, dtype="<f4")
    n = min(dim, stats.size)
    out[:n] = stats[:n]
    return out


def serve(
    dim: int,
    stdin: BinaryIO,
    stdout: BinaryIO,
    exit_after: Optional[int] = None,
    short_by: int = 0,
) -> int:
    stdout.write(f"EMBED v1 dim={dim}\n".encode("ascii"))
    stdout.flush()
    served = 0
    while True:
        header = stdin.readline()
        if not header:
            return 0
        parts = header.decode("ascii", "replace").split()
        if len(parts) != 3 or parts[0] != "TILE":
            return 2
        size, n_bytes = int(parts[1]), int(parts[2])
        payload = stdin.read(n_bytes)
        if len(payload) != n_bytes or n_bytes != size * size * 3:
            return 2
        vector = tile_statistics(np.frombuffer(payload, dtype=np.uint8).reshape(size, size, 3), dim)
        if exit_after is not None and served >= exit_after:
            # crash halfway through a whole number of floats
            stdout.write(b"VEC\n" + vector[: max(1, dim // 2)].tobytes())
            stdout.flush()
            return 1
        stdout.write(b"VEC\n" + vector[: dim - short_by].tobytes())
        stdout.flush()
        served += 1
        if short_by:
            return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="roadscope-echo-backend", description=__doc__.splitlines()[0])
    parser.add_argument("--dim", type=int, default=8, help="Embedding dimension to declare")
    parser.add_argument("--exit-after", type=int, default=None, help="Exit after answering N tiles")
    parser.add_argument("--short-by", type=int, default=0, help="Send this many floats fewer than declared")
    args = parser.parse_args(argv)
    return serve(args.dim, sys.stdin.buffer, sys.stdout.buffer, args.exit_after, args.short_by)


if __name__ == "__main__":
    sys.exit(main())
