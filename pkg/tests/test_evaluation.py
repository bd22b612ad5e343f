from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advtex.data import Dataset
from advtex.defenses import DefenseSpec
from advtex.evaluation import (CSV_HEADER, DetectionRateReport, FrameOutcome, evaluate, format_cell, load_report,
                               read_cells_csv, reference_illumination, registered_frames, render_report,
                               save_report, table_grid, transfer_evaluate, write_cells_csv)
from advtex.registration import TextureMap

KEYS = dict(split=["train", "test"], distance=["far", "near"], condition=["tree", "sky"],
            detector=["A", "B"], defense=["none"], attack=["clean", "x"])


def outcome(split="test", distance="near", condition="tree", detector="A", defense="none", attack="clean",
            detected=True, seq="s", image="f.png"):
    return FrameOutcome(split, seq, image, distance, condition, detector, defense, attack, detected,
                        detected, None, 0.9 if detected else 0.1)


records = st.lists(st.builds(
    outcome, **{k: st.sampled_from(v) for k, v in KEYS.items()}, detected=st.booleans()), max_size=60)


@settings(max_examples=50, deadline=None)
@given(records)
def test_cells_match_a_scalar_count(recs):
    rep = DetectionRateReport(recs)
    total, hit = Counter(), Counter()
    for r in recs:
        key = (r.split, r.distance, r.condition, r.detector, r.defense, r.attack)
        total[key] += 1
        hit[key] += r.detected
    assert rep.cells() == {k: (hit[k], total[k]) for k in total}


@settings(max_examples=30, deadline=None)
@given(records)
def test_cells_csv_round_trip(tmp_path_factory, recs):
    path = tmp_path_factory.mktemp("csv") / "cells.csv"
    rep = DetectionRateReport(recs)
    write_cells_csv(rep, path)
    assert read_cells_csv(path) == rep.cells()


def test_fully_fooled_cell_reads_zero_of_four():
    rep = DetectionRateReport([outcome(attack="x", detected=False, image=f"{i}.png") for i in range(4)],
                              {"x": "L"})
    grid = table_grid(rep.cells(), ["A", "B"], "none", rep.tiers)
    assert grid[1][:2] == ["tree", "L (x)"]
    assert grid[1][grid[0].index("test near")] == "0/4 ; n/a"
    assert grid[1][grid[0].index("train far")] == "n/a ; n/a"
    assert format_cell([(3, 5), (0, 5)]) == "3/5 ; 0/5"


def test_empty_report_renders_header_only(tmp_path):
    paths = render_report(DetectionRateReport(), tmp_path)
    assert paths["cells"].read_text().strip() == ",".join(CSV_HEADER)
    with pytest.raises(ValueError):
        DetectionRateReport().rate(split="test")


def test_corrupt_cells_csv_is_rejected(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("a,b\n")
    with pytest.raises(ValueError, match="header"):
        read_cells_csv(p)
    p.write_text(",".join(CSV_HEADER) + "\ntest,near,tree,A,none,clean,5,4\n")
    with pytest.raises(ValueError, match="5/4"):
        read_cells_csv(p)


def test_empty_dataset_gives_empty_report(dataset, untrained_grid):
    empty = Dataset(dataset.root, dataset.texture, dataset.root_vertices, [])
    rep = evaluate(None, empty, {"A": untrained_grid})
    assert rep.records == []
    assert registered_frames(empty) == []
    with pytest.raises(ValueError):
        reference_illumination(empty)


def test_reference_frame_has_unit_illumination(dataset):
    frame, view = registered_frames(dataset, "train")[0]
    assert view.illumination == pytest.approx(1.0, abs=1e-12)


def test_unperturbed_texture_equals_clean(dataset, detector_a):
    clean = evaluate(None, dataset, {"A": detector_a}, splits=("test",))
    same = evaluate(TextureMap(dataset.texture.pixels.copy(), dataset.texture.mask), dataset,
                    {"A": detector_a}, splits=("test",), attack_id="clean")
    assert clean.records == same.records
    assert len(clean.records) == 25


def test_evaluation_is_deterministic_and_persists(tmp_path, dataset, detector_a):
    rng = np.random.default_rng(0)
    tex = dataset.texture.replace(np.clip(dataset.texture.pixels + rng.normal(0, 0.05, dataset.texture.shape)
                                          * dataset.texture.mask[..., None], 0, 1))
    kw = dict(splits=("val",), defenses=(DefenseSpec(), DefenseSpec("down_up")), attack_id="noise", tier="L")
    a = evaluate(tex, dataset, {"A": detector_a}, **kw)
    b = evaluate(tex, dataset, {"A": detector_a}, workers=3, **kw)
    assert a.records == b.records
    assert {r.defense for r in a.records} == {"none", "down_up"}
    save_report(a, tmp_path / "report.json")
    back = load_report(tmp_path / "report.json")
    assert back.records == a.records and back.tiers == {"noise": "L"}
    paths = render_report(a, tmp_path, ["A"])
    assert read_cells_csv(paths["cells"]) == a.cells()
    assert "L (noise)" in paths["table_none"].read_text()


def test_transfer_to_itself_equals_evaluate(dataset, detector_a):
    a = evaluate(None, dataset, {"A": detector_a}, splits=("test",))
    t = transfer_evaluate(None, dataset, {"A": detector_a, "B": None}, "A", "A", splits=("test",))
    assert a.records == t.records


def test_transfer_report_lists_source_first(dataset, detector_a, detector_b):
    rep = transfer_evaluate(None, dataset, {"B": detector_b, "A": detector_a}, "A", "B", splits=("test",))
    assert list(dict.fromkeys(r.detector for r in rep.records)) == ["A", "B"]
    grid = table_grid(rep.cells(), ["A", "B"], "none", rep.tiers)
    assert all(" ; " in c for row in grid[1:] for c in row[2:])


def test_annotated_frames_are_written(tmp_path, dataset, detector_a):
    rep = evaluate(None, dataset, {"A": detector_a}, splits=("val",), keep_images=True)
    paths = render_report(rep, tmp_path)
    written = list(paths["annotated"].rglob("*.png"))
    assert len(written) == len(rep.records)
