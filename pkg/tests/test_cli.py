"""Command-line entry point: subcommands, exit statuses and recorded events."""

import json

import numpy as np
import pytest
from PIL import Image
from sqlalchemy import select

from compvocab.__main__ import build_parser, main
from compvocab.db.models import Event
from compvocab.db.session import session_scope
from compvocab.services import vocab_store
from compvocab.services.dataset import Split, load_manifest
from compvocab.services.vocabulary import Vocabulary


@pytest.fixture
def empty_vocab(tmp_path):
    path = tmp_path / "empty.cvoc"
    vocab_store.save(Vocabulary(num_orientations=6), path)
    return path


def _event_types():
    with session_scope() as session:
        return [e.event_type for e in session.scalars(select(Event).order_by(Event.id))]


class TestParser:
    def test_subcommands_registered(self):
        text = build_parser().format_help()
        for command in ("synth", "extract", "learn-generic", "learn-layer", "learn-class", "thresholds",
                        "detect", "evaluate", "classify-features", "inspect", "render"):
            assert command in text

    def test_global_options_parsed(self):
        args = build_parser().parse_args(["--seed", "3", "--workers", "2", "inspect", "v.cvoc"])
        assert (args.seed, args.workers, args.command) == (3, 2, "inspect")

    def test_usage_errors_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["inspect"])
        assert exc.value.code == 2
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2


class TestInspect:
    def test_table(self, empty_vocab, capsys):
        assert main(["inspect", str(empty_vocab)]) == 0
        out = capsys.readouterr().out
        assert "bytes, n=6, O=6" in out
        assert "violation" not in out

    def test_json(self, empty_vocab, capsys):
        assert main(["inspect", "--json", str(empty_vocab)]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["num_orientations"] == 6
        assert [entry["layer"] for entry in summary["layers"]] == [1, 2, 3, 4, 5, 6]
        assert summary["classes"] == {} and summary["violations"] == []
        assert summary["file_size"] == empty_vocab.stat().st_size

    def test_events_recorded(self, empty_vocab):
        main(["inspect", str(empty_vocab)])
        assert _event_types() == ["command_started", "command_finished"]


class TestFailures:
    def test_missing_vocabulary_exits_1(self, tmp_path):
        out = tmp_path / "dets.tsv"
        status = main(["detect", "--manifest", str(tmp_path / "m.json"), "--vocab", str(tmp_path / "nope.cvoc"), "--out", str(out)])
        assert status == 1
        assert not out.exists()
        assert _event_types() == ["command_started", "command_failed"]

    def test_missing_config_exits_1(self, tmp_path, empty_vocab):
        assert main(["--config", str(tmp_path / "absent.json"), "inspect", str(empty_vocab)]) == 1

    def test_corrupt_vocabulary_exits_1(self, tmp_path):
        path = tmp_path / "bad.cvoc"
        path.write_bytes(b"not a vocabulary at all")
        assert main(["inspect", str(path)]) == 1

    def test_unwritable_overlay_exits_1_and_leaves_nothing(self, tmp_path, empty_vocab):
        for name in ("img0", "img1"):
            Image.fromarray(np.zeros((40, 40), dtype=np.uint8)).save(tmp_path / f"{name}.png")
        manifest = tmp_path / "manifest.json"
        manifest.write_text(json.dumps({"version": 1, "records": [
            {"path": "img0.png", "split": "test"},
            {"path": "img1.png", "split": "test"},
        ]}))
        overlays = tmp_path / "overlays"
        (overlays / "img1.png").mkdir(parents=True)
        out = tmp_path / "dets.tsv"
        status = main(["--workers", "1", "detect", "--manifest", str(manifest), "--vocab", str(empty_vocab),
                       "--out", str(out), "--overlays", str(overlays)])
        assert status == 1
        assert not (overlays / "img0.png").exists()
        assert not out.exists()
        assert _event_types() == ["command_started", "command_failed"]


class TestCommands:
    def test_synth(self, tmp_path):
        out = tmp_path / "corpus"
        args = ["--seed", "1", "synth", "--out", str(out), "--classes", "1", "--natural", "1",
                "--train", "1", "--validation", "0", "--test", "1"]
        assert main(args) == 0
        manifest = load_manifest(out / "manifest.json")
        assert len(manifest.records) == 3
        assert [r.label for r in manifest.select(Split.TEST)] == ["bracket"]

    def test_evaluate(self, tmp_path):
        manifest = tmp_path / "manifest.json"
        manifest.write_text(json.dumps({"version": 1, "records": [
            {"path": "x.png", "label": "mug", "boxes": [[0, 0, 10, 10]], "split": "test"},
        ]}))
        detections = tmp_path / "dets.tsv"
        detections.write_text("x\tmug\t0\t0\t10\t10\t0.9\n")
        report_path = tmp_path / "report.json"
        status = main(["evaluate", "--manifest", str(manifest), "--detections", str(detections),
                       "--out", str(report_path), "--curves", str(tmp_path / "curves.png")])
        assert status == 0
        mug = json.loads(report_path.read_text())["classes"]["mug"]
        assert mug["num_truths"] == 1 and mug["rate_at_fppi"] == 1.0
        assert (tmp_path / "curves.png").exists()

    def test_evaluate_empty_split_exits_1(self, tmp_path):
        manifest = tmp_path / "manifest.json"
        manifest.write_text(json.dumps({"version": 1, "records": []}))
        detections = tmp_path / "dets.tsv"
        detections.write_text("")
        assert main(["evaluate", "--manifest", str(manifest), "--detections", str(detections),
                     "--out", str(tmp_path / "r.json")]) == 1
