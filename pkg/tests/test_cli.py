import json

import numpy as np
import pytest

from slideloop.annotations import ClassMap, parse_annotations, serialize_annotations
from slideloop.cli import EXIT_BACKEND, EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from slideloop.raster import rasterize_window
from slideloop.slide_io import (SyntheticShape, SyntheticSlideSpec,
                                generate_synthetic_slide)

RED = (170, 30, 30)


def add_slide(project, name, annotated=True, directory="WSI", xml_dir="REGIONS",
              shapes=None, width=600, height=520):
    shapes = shapes if shapes is not None else [
        SyntheticShape("ellipse", 1, RED, (width // 2, height // 2, 90, 70)),
        SyntheticShape("ellipse", 1, RED, (120, 120, 50, 40))]
    spec = SyntheticSlideSpec(width=width, height=height, shapes=shapes)
    xml = (project / xml_dir / f"{name}.xml") if annotated else None
    return generate_synthetic_slide(spec, project / directory / f"{name}.tif", xml)


def new_project(tmp_path, *extra):
    project = tmp_path / "proj"
    args = ["--option", "new", "--project", str(project),
            "--set", "tile_size=200", "--set", "augment_base=1",
            "--set", "epochs=1", "--set", "seed=7", *extra]
    assert main(args) == EXIT_OK
    return project


class TestNew:
    def test_creates_layout(self, tmp_path):
        project = new_project(tmp_path)
        for sub in ("WSI", "REGIONS", "PREDICTIONS", "HOLDOUT", "TRAINING", "MODELS"):
            assert (project / sub).is_dir()
        assert (project / "classmap.json").is_file()
        config = json.loads((project / "config.json").read_text())
        assert config["tile_size"] == 200
        assert config["augment_base"] == 1

    def test_new_twice_errors(self, tmp_path, capsys):
        project = new_project(tmp_path)
        code = main(["--option", "new", "--project", str(project)])
        assert code == EXIT_DATA
        assert "project exists" in capsys.readouterr().err

    def test_unknown_config_key_is_usage_error(self, tmp_path, capsys):
        code = main(["--option", "new", "--project", str(tmp_path / "p"),
                     "--set", "bogus=1"])
        assert code == EXIT_USAGE
        assert "unknown config key" in capsys.readouterr().err


class TestPreconditions:
    def test_predict_before_train(self, tmp_path, capsys):
        project = new_project(tmp_path)
        add_slide(project, "s1", annotated=False)
        code = main(["--option", "predict", "--project", str(project)])
        assert code == EXIT_DATA
        assert "no trained iteration" in capsys.readouterr().err

    def test_train_without_data(self, tmp_path, capsys):
        project = new_project(tmp_path)
        code = main(["--option", "train", "--project", str(project)])
        assert code == EXIT_DATA
        assert "empty training set" in capsys.readouterr().err

    def test_missing_project(self, tmp_path, capsys):
        code = main(["--option", "train", "--project", str(tmp_path / "ghost")])
        assert code == EXIT_DATA
        assert "not a project" in capsys.readouterr().err

    def test_lock_blocks_second_invocation(self, tmp_path, capsys):
        project = new_project(tmp_path)
        add_slide(project, "s1")
        (project / ".lock").write_text("123")
        code = main(["--option", "train", "--project", str(project)])
        assert code == EXIT_DATA
        assert "locked" in capsys.readouterr().err

    def test_validate_without_holdout(self, tmp_path, capsys):
        project = new_project(tmp_path)
        add_slide(project, "s1")
        assert main(["--option", "train", "--project", str(project)]) == EXIT_OK
        code = main(["--option", "validate", "--project", str(project)])
        assert code == EXIT_DATA
        assert "HOLDOUT" in capsys.readouterr().err


class TestLoop:
    def test_full_loop(self, tmp_path):
        project = new_project(tmp_path)
        add_slide(project, "s1")
        assert main(["--option", "train", "--project", str(project)]) == EXIT_OK
        for name in ("highres.json", "highres.bin", "lowres.json", "lowres.bin"):
            assert (project / "MODELS" / "0" / name).is_file()
        assert (project / "TRAINING" / "0" / "highres" / "manifest.txt").is_file()

        # predict the un-annotated slide; 'test' is an alias of 'predict'
        truth2 = add_slide(project, "s2", annotated=False)
        assert main(["--option", "test", "--project", str(project)]) == EXIT_OK
        out_xml = project / "PREDICTIONS" / "s2.xml"
        assert out_xml.is_file()
        first_bytes = out_xml.read_bytes()

        # predicted XML parses and re-rasterizes cleanly, close to truth
        doc = parse_annotations(out_xml.read_text())
        cmap = ClassMap.load(project / "classmap.json")
        pred = rasterize_window(doc, cmap, (0, 0), (600, 520), 1)
        truth = rasterize_window(truth2, cmap, (0, 0), (600, 520), 1)
        inter = ((pred.values == 1) & (truth.values == 1)).sum()
        union_sizes = (pred.values == 1).sum() + (truth.values == 1).sum()
        assert 2 * inter / union_sizes > 0.9  # dice

        # idempotent predict: byte-identical output
        assert main(["--option", "predict", "--project", str(project)]) == EXIT_OK
        assert out_xml.read_bytes() == first_bytes

        # human correction: move truth into REGIONS, then train iteration 1
        (project / "REGIONS" / "s2.xml").write_text(serialize_annotations(truth2))
        assert main(["--option", "train", "--project", str(project)]) == EXIT_OK
        assert (project / "MODELS" / "1" / "highres.json").is_file()

        # append-only history: iteration 0 untouched
        assert (project / "MODELS" / "0" / "highres.json").is_file()

        # validate over both iterations
        add_slide(project, "h1", directory="HOLDOUT", xml_dir="HOLDOUT")
        assert main(["--option", "validate", "--project", str(project)]) == EXIT_OK
        report = json.loads((project / "validation_report.json").read_text())
        assert [e["iteration"] for e in report["iterations"]] == [0, 1]
        for entry in report["iterations"]:
            assert entry["mean_f1"] > 0.9
            assert entry["correction_burden"] == 0.0
        assert (project / "validation_report.txt").is_file()

    def test_one_network_skips_lowres(self, tmp_path):
        project = new_project(tmp_path)
        add_slide(project, "s1")
        assert main(["--option", "train", "--project", str(project),
                     "--one_network", "true"]) == EXIT_OK
        assert (project / "MODELS" / "0" / "highres.json").is_file()
        assert not (project / "MODELS" / "0" / "lowres.json").exists()
        add_slide(project, "s2", annotated=False)
        assert main(["--option", "predict", "--project", str(project),
                     "--one_network", "true"]) == EXIT_OK
        assert (project / "PREDICTIONS" / "s2.xml").is_file()

    def test_transfer_copies_warm_start(self, tmp_path):
        source = new_project(tmp_path)
        add_slide(source, "s1")
        assert main(["--option", "train", "--project", str(source)]) == EXIT_OK

        target = tmp_path / "proj2"
        assert main(["--option", "new", "--project", str(target),
                     "--transfer", str(source)]) == EXIT_OK
        assert (target / "TRANSFER" / "highres.json").is_file()
        assert (target / "classmap.json").read_text() == \
               (source / "classmap.json").read_text()

    def test_nothing_to_predict_is_ok(self, tmp_path, capsys):
        project = new_project(tmp_path)
        add_slide(project, "s1")
        assert main(["--option", "train", "--project", str(project)]) == EXIT_OK
        assert main(["--option", "predict", "--project", str(project)]) == EXIT_OK
        assert "Nothing to predict" in capsys.readouterr().out
