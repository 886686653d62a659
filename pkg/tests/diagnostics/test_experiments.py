"""Integration tests for the masking and transfer experiment runners."""

import numpy as np
import pytest

from roadscope.config.settings import load_run_config
from roadscope.core.exceptions import EmptyResult, ExperimentError
from roadscope.dataset.manifest import Manifest, ManifestEntry, read_manifest, write_manifest
from roadscope.diagnostics.experiments import (
    MASKING_SCENARIOS,
    run_masking_experiment,
    run_transfer_experiment,
    select_split,
)
from roadscope.geo.coords import GeoPoint
from roadscope.ingest.models import ROAD_CLASSES
from roadscope.masking.maskgen import Mask, save_mask_png
from roadscope.raster.store import save_rgb_png

TINTS = {"major": (200, 60, 60), "minor": (60, 200, 60), "two_track": (60, 60, 200)}


@pytest.fixture
def cfg():
    return load_run_config(
        overrides={"train.input_size": 16, "train.epochs": 2, "train.batch_size": 4, "train.lr": 1e-3, "runtime.seed": 5}
    )


@pytest.fixture
def write_corpus(tmp_path):
    """Tiny tinted tiles with a road band, written as a split manifest."""

    def factory(country: str = "KE", per_class: int = 4, masks: bool = True):
        root = tmp_path / country
        entries = []
        for road_class in ROAD_CLASSES:
            for i in range(per_class):
                name = f"{road_class.value}_{i}"
                pixels = np.zeros((16, 16, 3), dtype=np.uint8)
                pixels[:] = TINTS[road_class.value]
                pixels[6:10] = 128
                save_rgb_png(pixels, root / "tiles" / f"{name}.png")
                bits = np.zeros((16, 16), dtype=bool)
                bits[6:10] = True
                save_mask_png(Mask.from_bits(bits), root / "masks" / f"{name}.png")
                entries.append(
                    ManifestEntry(
                        tile_path=f"tiles/{name}.png",
                        mask_path=f"masks/{name}.png" if masks else None,
                        road_class=road_class,
                        country=country,
                        road_id=name,
                        center=GeoPoint(lon=0.0, lat=0.0),
                        split="test" if i == 0 else "train",
                    )
                )
        return read_manifest(write_manifest(entries, root / "manifest.jsonl"))

    return factory


def test_select_split(write_corpus):
    """Test split selection and whole-manifest fallback."""
    manifest = write_corpus()

    test = select_split(manifest, "test")
    assert len(test.entries) == 3
    assert test.lines == [2, 6, 10]

    unsplit = Manifest(entries=[e.model_copy(update={"split": "none"}) for e in manifest.entries])
    assert len(select_split(unsplit, "train").entries) == 12
    with pytest.raises(EmptyResult):
        select_split(Manifest(), "train")


@pytest.mark.integration
def test_masking_experiment(tmp_path, write_corpus, cfg):
    """Test three scenarios from identical initial weights."""
    manifest = write_corpus()

    report = run_masking_experiment(manifest, manifest, cfg, model_dir=tmp_path / "models")

    assert [r.scenario for r in report.rows] == [name for name, _ in MASKING_SCENARIOS]
    assert all(r.n == 3 for r in report.rows)
    assert len(set(report.init_digests.values())) == 1
    assert report.seed == 5
    assert report.config_digest == cfg.digest()
    assert all(len(h) == 2 for h in report.histories.values())
    assert sorted(report.model_paths) == sorted(name for name, _ in MASKING_SCENARIOS)
    assert (tmp_path / "models" / "masking_no_mask.model").is_file()


@pytest.mark.integration
def test_masking_experiment_is_deterministic(write_corpus, cfg):
    """Test that reruns give identical rows."""
    manifest = write_corpus()

    first = run_masking_experiment(manifest, manifest, cfg)
    second = run_masking_experiment(manifest, manifest, cfg)

    assert [r.model_dump() for r in first.rows] == [r.model_dump() for r in second.rows]


def test_masking_needs_masks(write_corpus, cfg):
    """Test that entries without masks stop the experiment."""
    manifest = write_corpus(masks=False)

    with pytest.raises(ExperimentError):
        run_masking_experiment(manifest, manifest, cfg)


@pytest.mark.integration
def test_transfer_same_domain(write_corpus, cfg):
    """Test that with A = B every cross-domain row equals the in-domain one."""
    manifest = write_corpus()

    report = run_transfer_experiment(manifest, manifest, cfg)

    assert [r.scenario for r in report.rows] == ["KE->KE"] * 4
    accuracies = {r.accuracy for r in report.rows}
    assert len(accuracies) == 1


@pytest.mark.integration
def test_transfer_pooled(write_corpus, cfg):
    """Test row names for two countries plus the pooled model."""
    ke, pe = write_corpus("KE"), write_corpus("PE")

    report = run_transfer_experiment(ke, pe, cfg, pooled=True)

    assert [r.scenario for r in report.rows] == ["KE->KE", "KE->PE", "PE->PE", "PE->KE", "pooled->KE", "pooled->PE"]
    assert set(report.init_digests) == {"train_KE", "train_PE", "pooled"}
    assert len(set(report.init_digests.values())) == 1
    assert report.test_masking == "none"
