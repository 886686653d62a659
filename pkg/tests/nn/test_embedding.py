"""Integration tests for the external embedding protocol and tile loaders."""

import io
import sys
from pathlib import Path

import numpy as np
import pytest

from roadscope.core.exceptions import BackendUnavailable, DimensionMismatch, ProtocolError, TileLoadError
from roadscope.dataset.manifest import ManifestEntry
from roadscope.geo.coords import GeoPoint
from roadscope.ingest.models import RoadClass
from roadscope.masking.maskgen import Mask, MaskMode, save_mask_png
from roadscope.nn.echo_backend import serve, tile_statistics
from roadscope.nn.embedding import EmbeddingBackend, EmbeddingLoader, embed_external
from roadscope.nn.inputs import TileLoader
from roadscope.raster.store import save_rgb_png


@pytest.fixture(autouse=True)
def importable_package(monkeypatch):
    """Let backend subprocesses import roadscope from any working directory."""
    monkeypatch.setenv("PYTHONPATH", str(Path(__file__).resolve().parents[2]))


def echo(*extra):
    return [sys.executable, "-m", "roadscope.nn.echo_backend", "--dim", "8", *extra]


@pytest.fixture
def tile():
    pixels = np.zeros((16, 16, 3), dtype=np.uint8)
    pixels[..., 0] = 255
    pixels[:8, :, 1] = 100
    return pixels


@pytest.fixture
def tile_entry(tmp_path, tile):
    save_rgb_png(tile, tmp_path / "tiles" / "a.png")
    bits = np.zeros((16, 16), dtype=bool)
    bits[:, :4] = True
    save_mask_png(Mask.from_bits(bits), tmp_path / "masks" / "a.png")
    return ManifestEntry(
        tile_path="tiles/a.png",
        mask_path="masks/a.png",
        road_class=RoadClass.MINOR,
        country="KE",
        road_id="r",
        center=GeoPoint(lon=36.8, lat=-1.3),
    )


def test_echo_serve_in_process(tile):
    """Test the reference backend's framing without a subprocess."""
    payload = tile.tobytes()
    stdin = io.BytesIO(f"TILE 16 {len(payload)}\n".encode() + payload)
    stdout = io.BytesIO()

    assert serve(4, stdin, stdout) == 0

    out = stdout.getvalue()
    assert out.startswith(b"EMBED v1 dim=4\nVEC\n")
    vector = np.frombuffer(out[len(b"EMBED v1 dim=4\nVEC\n"):], dtype="<f4")
    np.testing.assert_allclose(vector, tile_statistics(tile, 4))
    np.testing.assert_allclose(vector[:3], [1.0, 50 / 255, 0.0], rtol=1e-6)


@pytest.mark.integration
def test_backend_round_trip(tile):
    """Test handshake and vectors through a child process."""
    with EmbeddingBackend(echo()) as backend:
        assert backend.dim == 8
        first = embed_external(backend, tile)
        second = backend.embed(tile)

    assert first.dtype == np.float32 and first.shape == (8,)
    np.testing.assert_array_equal(first, second)
    np.testing.assert_allclose(first, tile_statistics(tile, 8))
    assert backend.last_good_index == 1


@pytest.mark.parametrize(
    "kwargs,expected_floats,code",
    [({"exit_after": 0}, 2, 1), ({"short_by": 1}, 3, 0)],
)
def test_echo_failure_modes_in_process(tile, kwargs, expected_floats, code):
    """Test the partial vectors written by the failure flags."""
    payload = tile.tobytes()
    stdin = io.BytesIO(f"TILE 16 {len(payload)}\n".encode() + payload)
    stdout = io.BytesIO()

    assert serve(4, stdin, stdout, **kwargs) == code

    body = stdout.getvalue()[len(b"EMBED v1 dim=4\nVEC\n"):]
    assert len(body) == 4 * expected_floats


@pytest.mark.integration
def test_backend_exits_mid_stream(tile):
    """Test that a backend dying inside an aligned vector reports the last good request."""
    backend = EmbeddingBackend(echo("--exit-after", "2"), timeout=10).start()
    try:
        backend.embed(tile)
        backend.embed(tile)
        with pytest.raises(BackendUnavailable) as exc_info:
            backend.embed(tile)
    finally:
        backend.close()

    assert exc_info.value.last_good_index == 1
    assert exc_info.value.details["last_good_index"] == 1


@pytest.mark.integration
def test_backend_short_vector(tile):
    """Test that a cleanly closed short vector is a dimension mismatch."""
    with EmbeddingBackend(echo("--short-by", "2"), timeout=10) as backend:
        with pytest.raises(DimensionMismatch) as exc_info:
            backend.embed(tile)

    assert exc_info.value.details == {"declared": 8, "received": 6}


STALLED_BACKEND = (
    "import sys, time\n"
    "out = sys.stdout.buffer\n"
    "out.write(b'EMBED v1 dim=8\\n'); out.flush()\n"
    "header = sys.stdin.buffer.readline()\n"
    "sys.stdin.buffer.read(int(header.split()[2]))\n"
    "out.write(b'VEC\\n' + bytes(8)); out.flush()\n"
    "time.sleep(3)\n"
)


@pytest.mark.integration
def test_backend_stalls_after_short_write(tile):
    """Test that a live backend stuck mid-vector is unavailable, not miscounted."""
    backend = EmbeddingBackend([sys.executable, "-c", STALLED_BACKEND], timeout=1).start()
    try:
        with pytest.raises(BackendUnavailable) as exc_info:
            backend.embed(tile)
    finally:
        backend.close()

    assert exc_info.value.last_good_index is None
    assert "no reply" in exc_info.value.message


@pytest.mark.integration
def test_backend_failures():
    """Test missing executables, bad handshakes and bad tiles."""
    with pytest.raises(BackendUnavailable):
        EmbeddingBackend(["/nonexistent/backend"]).start()
    with pytest.raises(ProtocolError):
        EmbeddingBackend([sys.executable, "-c", "print('HELLO')"], timeout=10).start()
    with pytest.raises(BackendUnavailable):
        EmbeddingBackend([sys.executable, "-c", "pass"], timeout=10).start()

    with EmbeddingBackend(echo()) as backend:
        with pytest.raises(ProtocolError):
            backend.embed(np.zeros((4, 5, 3), dtype=np.uint8))
    with pytest.raises(BackendUnavailable):
        EmbeddingBackend(echo()).embed(np.zeros((4, 4, 3), dtype=np.uint8))


def test_tile_loader_masking(tmp_path, tile_entry, tile):
    """Test that masks are applied before downscaling."""
    resolve = lambda rel: tmp_path / rel  # noqa: E731

    full = TileLoader(resolve, MaskMode.NONE, input_size=4)(tile_entry)
    road = TileLoader(resolve, MaskMode.ROAD_ONLY, input_size=4)(tile_entry)
    context = TileLoader(resolve, MaskMode.CONTEXT_ONLY, input_size=4)(tile_entry)

    assert full.shape == (3, 4, 4)
    assert float(road[0, 0, 0]) == pytest.approx(1.0)
    assert float(road[0, 0, 1:].abs().sum()) == 0.0
    assert float(context[0, :, 0].abs().sum()) == 0.0
    assert np.allclose((road + context).numpy(), full.numpy(), atol=1e-6)


def test_tile_loader_errors(tmp_path, tile_entry):
    """Test unreadable tiles and masked modes without masks."""
    loader = TileLoader(lambda rel: tmp_path / rel, MaskMode.ROAD_ONLY, input_size=4)

    with pytest.raises(TileLoadError):
        loader(tile_entry.model_copy(update={"mask_path": None}), 7)
    with pytest.raises(TileLoadError):
        loader(tile_entry.model_copy(update={"tile_path": "tiles/missing.png"}), 8)


@pytest.mark.integration
def test_embedding_loader(tmp_path, tile_entry, tile):
    """Test embeddings of manifest entries."""
    tiles = TileLoader(lambda rel: tmp_path / rel, MaskMode.NONE, input_size=4)
    with EmbeddingBackend(echo()) as backend:
        vector = EmbeddingLoader(backend, tiles)(tile_entry, 2)

    assert vector.shape == (8,)
    np.testing.assert_allclose(vector.numpy(), tile_statistics(tile, 8))
