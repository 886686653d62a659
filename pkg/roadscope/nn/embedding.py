"""External embedding backends.

A backend is a child process speaking a line-framed protocol on its
stdin/stdout. It announces itself with ``EMBED v1 dim=<D>``; for each tile
the parent sends ``TILE <size> <n_bytes>`` followed by the raw RGB bytes and
the child answers ``VEC`` followed by D little-endian f32 values. A small
feed-forward head trained on those vectors stands in for fine-tuning a
pretrained backbone.
"""
import os
import re
import select
import shlex
import subprocess
import time
from typing import List, Optional, Sequence, Union

import numpy as np
import structlog
import torch

from roadscope.core.exceptions import BackendUnavailable, DimensionMismatch, ProtocolError
from roadscope.dataset.manifest import ManifestEntry
from roadscope.nn.inputs import TileLoader

logger = structlog.get_logger(__name__)

PROTOCOL_VERSION = "v1"
HANDSHAKE = re.compile(rb"^EMBED v1 dim=(\d+)$")
VECTOR_TAG = b"VEC"


class EmbeddingBackend:
    """Client side of the embedding protocol.

    Args:
        command: argv (or a shell-style string) that starts the backend
        timeout: seconds to wait for any single reply
    """

    def __init__(self, command: Union[str, Sequence[str]], timeout: float = 30.0):
        self.argv: List[str] = shlex.split(command) if isinstance(command, str) else list(command)
        self.command = " ".join(self.argv)
        self.timeout = timeout
        self.dim: Optional[int] = None
        self.last_good_index: Optional[int] = None
        self._sent = 0
        self._process: Optional[subprocess.Popen] = None
        self._buffer = bytearray()
        self._eof = False

    # -- process lifecycle -------------------------------------------------

    def start(self) -> "EmbeddingBackend":
        try:
            self._process = subprocess.Popen(
                self.argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
            )
        except OSError as e:
            raise BackendUnavailable(self.command, None, f"cannot start: {e}")

        line = self._read_line()
        if line is None:
            raise BackendUnavailable(self.command, None, "no handshake before exit")
        match = HANDSHAKE.match(line)
        if match is None:
            raise ProtocolError("bad handshake", line.decode("utf-8", "replace"))
        self.dim = int(match.group(1))
        if self.dim <= 0:
            raise ProtocolError("dimension must be positive", line.decode("utf-8", "replace"))
        logger.info("Embedding backend started", command=self.command, dim=self.dim, pid=self._process.pid)
        return self

    def close(self) -> None:
        if self._process is None:
            return
        try:
            if self._process.stdin:
                self._process.stdin.close()
            self._process.wait(timeout=5)
        except (OSError, subprocess.TimeoutExpired):
            self._process.kill()
            self._process.wait()
        finally:
            if self._process.stdout:
                self._process.stdout.close()
            self._process = None

    def __enter__(self) -> "EmbeddingBackend":
        return self.start() if self._process is None else self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- framing -----------------------------------------------------------

    def _fill(self, deadline: float) -> bool:
        """Read whatever is available; False on EOF or timeout."""
        if self._eof or self._process is None:
            return False
        fd = self._process.stdout.fileno()
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return False
        ready, _, _ = select.select([fd], [], [], remaining)
        if not ready:
            return False
        chunk = os.read(fd, 65536)
        if not chunk:
            self._eof = True
            return False
        self._buffer.extend(chunk)
        return True

    def _read_line(self) -> Optional[bytes]:
        deadline = time.monotonic() + self.timeout
        while b"\n" not in self._buffer:
            if not self._fill(deadline):
                return None
        line, _, rest = bytes(self._buffer).partition(b"\n")
        self._buffer = bytearray(rest)
        return line.rstrip(b"\r")

    def _read_exact(self, n: int) -> bytes:
        deadline = time.monotonic() + self.timeout
        while len(self._buffer) < n:
            if not self._fill(deadline):
                break
        data = bytes(self._buffer[:n])
        self._buffer = self._buffer[n:]
        return data

    def _alive(self) -> bool:
        return self._process is not None and self._process.poll() is None and not self._eof

    def _exit_status(self, wait: float = 2.0) -> Optional[int]:
        """Return code of a backend that closed its stdout, None if still running."""
        if self._process is None:
            return None
        try:
            return self._process.wait(timeout=wait)
        except subprocess.TimeoutExpired:
            return None

    # -- requests ----------------------------------------------------------

    def embed(self, pixels: np.ndarray) -> np.ndarray:
        """Embedding of one (size, size, 3) uint8 tile as a float32 vector."""
        if self._process is None or self.dim is None:
            raise BackendUnavailable(self.command, self.last_good_index, "backend not started")
        if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.shape[0] != pixels.shape[1]:
            raise ProtocolError("tiles must be square RGB arrays", str(pixels.shape))

        payload = np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()
        try:
            self._process.stdin.write(f"TILE {pixels.shape[0]} {len(payload)}\n".encode("ascii") + payload)
            self._process.stdin.flush()
        except (BrokenPipeError, OSError) as e:
            raise BackendUnavailable(self.command, self.last_good_index, f"write failed: {e}")

        tag = self._read_line()
        if tag is None:
            raise BackendUnavailable(
                self.command, self.last_good_index, "no reply" if self._alive() else "backend exited"
            )
        if tag != VECTOR_TAG:
            raise ProtocolError("expected VEC", tag.decode("utf-8", "replace"))

        want = self.dim * 4
        data = self._read_exact(want)
        if len(data) != want:
            if not self._eof:
                raise BackendUnavailable(
                    self.command, self.last_good_index, f"no reply after {len(data)} of {want} bytes"
                )
            # only a clean exit makes a short vector a miscount rather than a crash
            if self._exit_status() == 0 and data and len(data) % 4 == 0:
                raise DimensionMismatch(self.dim, len(data) // 4)
            raise BackendUnavailable(
                self.command, self.last_good_index, f"backend exited after {len(data)} of {want} bytes"
            )

        self.last_good_index = self._sent
        self._sent += 1
        return np.frombuffer(data, dtype="<f4").astype(np.float32)


def embed_external(backend: EmbeddingBackend, pixels: np.ndarray) -> np.ndarray:
    return backend.embed(pixels)


class EmbeddingLoader:
    """Training/evaluation loader that maps a manifest entry to its embedding.

    Requests go to the backend one at a time, so this loader must run with
    a single thread.
    """

    def __init__(self, backend: EmbeddingBackend, tiles: TileLoader):
        self.backend = backend
        self.tiles = tiles

    def __call__(self, entry: ManifestEntry, line: Optional[int] = None) -> torch.Tensor:
        return torch.from_numpy(self.backend.embed(self.tiles.pixels(entry, line)))
