"""End-to-end checks on synthetic corpora with a known signal location.

Each test builds a small corpus through the command line, trains on it and
checks that the diagnostics point at the pixels that carry the label.
"""

import json

import numpy as np
import pytest
import torch

from roadscope.cli.main import main
from roadscope.dataset.manifest import read_manifest
from roadscope.diagnostics.cam import cam, cam_locality
from roadscope.ingest.models import ROAD_CLASSES
from roadscope.masking.maskgen import MaskMode, load_mask_png
from roadscope.nn.inputs import TileLoader
from roadscope.nn.serialization import load_model

pytestmark = pytest.mark.slow

TILE = 128


def corpus_config(tmp_path, road_radius_px=6, epochs=20):
    path = tmp_path / "synth.json"
    path.write_text(
        json.dumps(
            {
                "sampler": {"spacing_m": 16.0},
                "dataset": {"split_by": "road", "test_ratio": 0.4},
                "synth": {"road_radius_px": road_radius_px},
                "train": {"input_size": 64, "epochs": epochs, "lr": 1e-3, "batch_size": 16},
            }
        )
    )
    return path


def run(capsys, *argv):
    code = main(list(argv))
    out, _ = capsys.readouterr()
    assert code == 0
    return json.loads(out)


def synth(capsys, ws, config, signal, *extra):
    return run(
        capsys, "synth", "--signal", signal, "--out", str(ws), "--config", str(config),
        "--n-roads", "12", "--scene-size", "384", "--tile-size", str(TILE), "--seed", "7", *extra,
    )


def accuracies(path):
    return {r["scenario"]: r["accuracy"] for r in json.loads(path.read_text())["rows"]}


def mean_locality(ws, model_path, manifest_path):
    """Mean locality of the predicted-class map over correctly classified test tiles."""
    model, _ = load_model(model_path)
    manifest = read_manifest(manifest_path)
    loader = TileLoader.for_manifest(manifest, MaskMode.NONE, int(model.input_shape[-1]))
    scores = []
    for entry, line in zip(manifest.entries, manifest.line_numbers()):
        if entry.split != "test":
            continue
        x = loader(entry, line)
        with torch.no_grad():
            predicted = int(model(x.unsqueeze(0))[0].argmax())
        if ROAD_CLASSES[predicted] != entry.road_class:
            continue
        heat = cam(model, x, predicted, tile_size=TILE)
        scores.append(cam_locality(heat, load_mask_png(manifest.resolve(entry.mask_path))))
    assert len(scores) >= 5
    return float(np.mean(scores))


def test_context_signal_survives_road_occlusion(capsys, tmp_path):
    """Test that a context-borne label is read from the context."""
    ws = tmp_path / "ws"
    synth(capsys, ws, corpus_config(tmp_path), "context")
    run(capsys, "mask-experiment", "--workspace", str(ws))

    acc = accuracies(ws / "reports" / "masking.json")

    assert acc["road_occluded"] >= 0.90
    assert acc["context_occluded"] <= 0.45


def test_road_signal_survives_context_occlusion(capsys, tmp_path):
    """Test that a road-borne label is read from the road."""
    ws = tmp_path / "ws"
    synth(capsys, ws, corpus_config(tmp_path), "road")
    run(capsys, "mask-experiment", "--workspace", str(ws))

    acc = accuracies(ws / "reports" / "masking.json")

    assert acc["context_occluded"] >= 0.90
    assert acc["road_occluded"] <= 0.45


@pytest.mark.parametrize("signal", ["context", "road"])
def test_country_pair_transfer_gap(capsys, tmp_path, signal):
    """Test that only context-borne labels fail to cross styles."""
    ws = tmp_path / "ws"
    synth(capsys, ws, corpus_config(tmp_path), signal, "--country", "KE", "--style", "savanna", "--pair")
    run(capsys, "transfer", "--workspace", str(ws), "--country-a", "KE", "--country-b", "PE")

    acc = accuracies(ws / "reports" / "transfer.json")
    gaps = (acc["KE->KE"] - acc["KE->PE"], acc["PE->PE"] - acc["PE->KE"])

    if signal == "context":
        assert min(gaps) >= 0.20
    else:
        assert max(abs(g) for g in gaps) < 0.10


@pytest.mark.parametrize("signal,bound", [("road", 0.6), ("context", 0.4)])
def test_cam_locality_follows_signal(capsys, tmp_path, signal, bound):
    """Test that activation mass sits where the label is drawn."""
    ws = tmp_path / "ws"
    synth(capsys, ws, corpus_config(tmp_path, road_radius_px=16), signal)
    run(capsys, "mask-experiment", "--workspace", str(ws), "--save-models")

    locality = mean_locality(ws, ws / "models" / "masking_no_mask.model", ws / "manifests" / "dataset.jsonl")

    if signal == "road":
        assert locality >= bound
    else:
        assert locality <= bound
