import json

import numpy as np
import pytest

from cdisco import cli
from cdisco.interpret import concept_map
from cdisco.store import load_dump
from cdisco.tensor import DenseTensor, read_tensor


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory):
    """synth -> train -> dump on a small dataset, shared across tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    model = root / "model"
    dump = root / "dump"
    assert cli.main(["synth", "--out", str(data), "--n-per-class", "40",
                     "--seed", "3"]) == 0
    assert cli.main(["train", "--out", str(model), "--data", str(data),
                     "--channels", "4,8", "--epochs", "8", "--seed", "3"]) == 0
    assert cli.main(["dump", "--out", str(dump), "--data", str(data),
                     "--model", str(model), "--seed", "3"]) == 0
    return root, data, model, dump


class TestSubcommands:
    def test_discover_contract(self, pipeline_dirs, tmp_path):
        root, data, model, dump = pipeline_dirs
        out = tmp_path / "disc"
        assert cli.main(["discover", "--dump", str(dump), "--class", "0",
                         "--m", "1", "--out", str(out), "--seed", "3"]) == 0
        report = json.loads((out / "report.json").read_text())
        assert list(report["classes"].keys()) == ["0"]
        assert len(report["classes"]["0"]) == 1
        entry = report["classes"]["0"][0]
        assert (out / entry["file"]).is_file()
        vector = read_tensor(out / entry["file"])
        assert abs(np.linalg.norm(vector.array) - 1.0) <= 1e-5

    def test_maps_matches_concept_map_oracle(self, pipeline_dirs, tmp_path):
        root, data, model, dump_dir = pipeline_dirs
        disc = tmp_path / "disc"
        cli.main(["discover", "--dump", str(dump_dir), "--class", "0",
                  "--m", "1", "--out", str(disc), "--seed", "3"])
        entry = json.loads((disc / "report.json").read_text())["classes"]["0"][0]
        out = tmp_path / "maps"
        assert cli.main(["maps", "--dump", str(dump_dir),
                         "--concept", str(disc / entry["file"]),
                         "--sample", "s0005", "--out", str(out),
                         "--seed", "3"]) == 0
        pgm = (out / "map_s0005.pgm").read_bytes()
        assert pgm.startswith(b"P5\n16 16\n255\n")
        # regenerate the expected bytes from the dump and the concept file
        dump = load_dump(dump_dir)
        row = dump.sample_ids.index("s0005")
        direction = read_tensor(disc / entry["file"])
        cmap = concept_map(DenseTensor.from_array(dump.spatial.array[row]),
                           direction)
        import tempfile
        from cdisco.tensor import write_pgm
        with tempfile.TemporaryDirectory() as tmp:
            write_pgm(cmap.values, tmp + "/oracle.pgm", symmetric=True)
            oracle = open(tmp + "/oracle.pgm", "rb").read()
        assert pgm == oracle

    def test_refine_outputs_unit_vectors(self, pipeline_dirs, tmp_path):
        root, data, model, dump_dir = pipeline_dirs
        out = tmp_path / "ref"
        assert cli.main(["refine", "--dump", str(dump_dir), "--class", "1",
                         "--out", str(out), "--seed", "3",
                         "--top-count", "30"]) == 0
        refined = json.loads((out / "refined.json").read_text())
        assert refined["concepts"]
        for entry in refined["concepts"]:
            vec = read_tensor(out / entry["file"])
            assert abs(np.linalg.norm(vec.array) - 1.0) <= 1e-5

    def test_outliers_csv(self, pipeline_dirs, tmp_path):
        root, data, model, dump_dir = pipeline_dirs
        out = tmp_path / "outl"
        assert cli.main(["outliers", "--dump", str(dump_dir),
                         "--out", str(out), "--seed", "3"]) == 0
        lines = (out / "projection.csv").read_text().strip().splitlines()
        assert len(lines) == 121  # header + 3 * 40 samples
        payload = json.loads((out / "outliers.json").read_text())
        assert payload["fraction_flagged"] <= 0.10 + 1e-9


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self):
        assert cli.main(["discover", "--nonsense"]) == 1

    def test_missing_subcommand_is_usage_error(self):
        assert cli.main([]) == 1

    def test_missing_dump_is_data_error(self, tmp_path):
        assert cli.main(["discover", "--dump", str(tmp_path / "nope"),
                         "--out", str(tmp_path / "out")]) == 2

    def test_bad_magic_is_data_error(self, pipeline_dirs, tmp_path):
        root, data, model, dump_dir = pipeline_dirs
        bad = tmp_path / "bad.cdad"
        bad.write_bytes(b"JUNKJUNKJUNK")
        assert cli.main(["maps", "--dump", str(dump_dir),
                         "--concept", str(bad), "--sample", "s0001",
                         "--out", str(tmp_path / "o")]) == 2
