import json
import struct

import pytest

from conftest import make_spec
from peguard.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from peguard.services.corpus import MANIFEST_NAME
from peguard.services.manifest import CorpusManifest, content_hash
from peguard.services.pe_format import write_pe


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """gen -> extract -> train chained through one work directory."""
    root = tmp_path_factory.mktemp("work")
    common = ["--workdir", str(root), "--seed", "3"]
    # 0.2 keeps 20 test rows per family plus a few to train on
    assert main(["gen", "--scale", "0.2", "--distinct-only", *common]) == EXIT_OK
    assert main(["extract", *common]) == EXIT_OK
    assert main(["train", "--family", "rf", *common]) == EXIT_OK
    return root


def _stdout_lines(capsys):
    return capsys.readouterr().out.splitlines()


# =========================
# USAGE / DATA ERRORS
# =========================
@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["train", "--family", "knn"],
        ["eval", "--set", "fs6"],
        ["gen", "--seed", "-1"],
        ["eval", "--trials", "0"],
        ["classify", "--model", "m.model"],
    ],
)
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert "error:" in capsys.readouterr().err


def test_classify_non_pe_exits_2(workdir, tmp_path, capsys):
    junk = tmp_path / "notes.txt"
    junk.write_bytes(b"definitely not a PE file")
    code = main(["classify", "--model", str(workdir / "model_rf.model"), str(junk)])
    assert code == EXIT_DATA
    assert "error: TruncatedHeader" in capsys.readouterr().err


def test_classify_invalid_pe_exits_2(workdir, tmp_path, capsys):
    data = bytearray(write_pe(make_spec()))
    struct.pack_into("<I", data, 0x80 + 24 + 32, 0x100)  # SectionAlignment below FileAlignment
    sample = tmp_path / "odd.exe"
    sample.write_bytes(bytes(data))
    code = main(["classify", "--model", str(workdir / "model_rf.model"), str(sample)])
    assert code == EXIT_DATA
    captured = capsys.readouterr()
    assert "error: InvalidPe: optional.section_alignment" in captured.err
    assert captured.out == ""


def test_corrupt_dataset_exits_2(workdir, tmp_path, capsys):
    lines = (workdir / "dataset_fs15.csv").read_text(encoding="utf-8").splitlines(keepends=True)
    cells = lines[1].split(",")
    cells[2] = "abc"
    lines[1] = ",".join(cells)
    broken = tmp_path / "broken.csv"
    broken.write_text("".join(lines), encoding="utf-8")
    code = main(["train", "--family", "rf", "--data", str(broken), "--workdir", str(tmp_path)])
    assert code == EXIT_DATA
    assert "error: SchemaMismatch" in capsys.readouterr().err


def test_missing_inputs_exit_2(tmp_path, capsys):
    assert main(["extract", "--workdir", str(tmp_path)]) == EXIT_DATA
    assert main(["classify", "--model", str(tmp_path / "none.model"), str(tmp_path / "x.exe")]) == EXIT_DATA
    err = capsys.readouterr().err
    assert "FileNotFoundError" in err


def test_effective_config_goes_to_stderr(tmp_path, capsys):
    main(["ingest", str(tmp_path), "--workdir", str(tmp_path), "--seed", "11"])
    captured = capsys.readouterr()
    line = next(l for l in captured.err.splitlines() if l.startswith("effective-config: "))
    effective = json.loads(line.split(": ", 1)[1])
    assert effective["seed"] == 11
    assert effective["command"] == "ingest"
    assert captured.out.splitlines() == ["ingested 0"]


# =========================
# PIPELINE
# =========================
def test_generated_manifest(workdir):
    manifest = CorpusManifest.load(workdir / MANIFEST_NAME)
    counts = manifest.label_counts()
    assert counts["Benign"] == 400
    assert counts["BlackCat"] == 24
    assert counts["Babuk"] == 28
    assert (workdir / "dataset_fs15.csv").is_file()
    assert (workdir / "model_rf.model").is_file()


def test_classify_prints_hash_label_score(workdir, capsys):
    record = CorpusManifest.load(workdir / MANIFEST_NAME).records[0]
    assert main(["classify", "--model", str(workdir / "model_rf.model"), record.path]) == EXIT_OK
    digest, label, score = _stdout_lines(capsys)[0].split(" ")
    assert digest == record.hash
    assert label == record.label
    assert 0.0 < float(score) <= 1.0
    assert len(score.split(".")[1]) == 6


def test_classify_unseen_pe(workdir, tmp_path, capsys):
    data = write_pe(make_spec())
    path = tmp_path / "sample.exe"
    path.write_bytes(data)
    assert main(["classify", "--model", str(workdir / "model_rf.model"), str(path)]) == EXIT_OK
    assert _stdout_lines(capsys)[0].startswith(content_hash(data) + " ")


def test_eval_outputs_are_reproducible(workdir, capsys):
    args = ["eval", "--workdir", str(workdir), "--seed", "5", "--trials", "2"]
    assert main([*args, "--out", str(workdir / "a")]) == EXIT_OK
    assert main([*args, "--out", str(workdir / "b"), "--jobs", "2"]) == EXIT_OK
    first = (workdir / "a" / "eval_rf_fs15" / "trials.csv").read_text()
    second = (workdir / "b" / "eval_rf_fs15" / "trials.csv").read_text()
    assert first == second
    assert first.splitlines()[0] == "trial,accuracy,rdr,bdr"

    report = json.loads((workdir / "a" / "eval_rf_fs15" / "report.json").read_text())
    assert report["n_trials"] == 2
    summary = _stdout_lines(capsys)[0]
    assert summary.startswith("rf fs15 trials=2 accuracy=")


def test_eval_sweep_writes_one_report_per_set(workdir, capsys):
    argv = ["eval", "--workdir", str(workdir), "--family", "svm", "--trials", "1", "--sweep"]
    assert main([*argv, "--out", str(workdir / "sweep")]) == EXIT_OK
    names = {p.name for p in (workdir / "sweep").iterdir()}
    assert names == {"eval_svm_fs5", "eval_svm_fs7", "eval_svm_fs10", "eval_svm_fs15"}
    assert len(_stdout_lines(capsys)) == 4


def test_zeroday_line(workdir, tmp_path, capsys):
    out = tmp_path / "zeroday.json"
    argv = ["zeroday", "--workdir", str(workdir), "--family", "wannacry-like", "--out", str(out)]
    assert main(argv) == EXIT_OK
    line = _stdout_lines(capsys)[0]
    assert line.startswith("WannaCry rf detection_rate=")
    rows = json.loads(out.read_text())
    assert rows[0]["held_out"] == "WannaCry"
    assert rows[0]["n_held_out"] == 28


def test_zeroday_unknown_family_exits_2(workdir, capsys):
    assert main(["zeroday", "--workdir", str(workdir), "--family", "Ryuk"]) == EXIT_DATA
    assert "error: UnknownFamily" in capsys.readouterr().err


def test_bench_reports_every_stage(workdir, capsys):
    assert main(["bench", "--workdir", str(workdir), "--samples", "100"]) == EXIT_OK
    lines = _stdout_lines(capsys)
    assert [l.split(" ")[0] for l in lines] == ["parse", "extract", "predict"]
    assert all(l.endswith("samples=100") for l in lines)


def test_ingest_relabels_generated_corpus(workdir, tmp_path, capsys):
    out = tmp_path / "manifest.tsv"
    argv = ["ingest", str(workdir / "Babuk"), "--rule", "*.exe=Hive", "--out", str(out), "--workdir", str(tmp_path)]
    assert main(argv) == EXIT_OK
    assert _stdout_lines(capsys)[0] == "ingested 28"
    assert set(CorpusManifest.load(out).label_counts().items()) >= {("Hive", 28), ("Babuk", 0)}


def test_ingest_merge_keeps_earlier_records(workdir, tmp_path, capsys):
    out = tmp_path / "manifest.tsv"
    common = ["--out", str(out), "--workdir", str(tmp_path)]
    babuk = ["ingest", str(workdir / "Babuk"), "--rule", "*.exe=Babuk", *common]
    blackcat = ["ingest", str(workdir / "BlackCat"), "--rule", "*.exe=BlackCat", *common]

    assert main(babuk) == EXIT_OK
    assert main([*blackcat, "--merge"]) == EXIT_OK
    assert main([*babuk, "--merge"]) == EXIT_OK
    counts = CorpusManifest.load(out).label_counts()
    assert (counts["Babuk"], counts["BlackCat"]) == (28, 24)

    assert main(blackcat) == EXIT_OK
    counts = CorpusManifest.load(out).label_counts()
    assert (counts["Babuk"], counts["BlackCat"]) == (0, 24)
    capsys.readouterr()
