import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from liestats.cli import DATASET_SCHEMA, REPORT_SCHEMA, main
from liestats.groups import SE3, parse_group
from liestats.shape import TriangleMesh, write_mesh

from conftest import rot_z
from test_shape import blob

FIXTURES = Path(__file__).parent / "fixtures"
SE3_A, SE3_B = FIXTURES / "se3_a.json", FIXTURES / "se3_b.json"
GL_A, GL_B = FIXTURES / "glplus_a.json", FIXTURES / "glplus_b.json"


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def run_json(argv, capsys):
    code, out, err = run(argv, capsys)
    assert code == 0, err
    return json.loads(out)


def write_dataset(path, group, samples):
    path.write_text(json.dumps({"group": group, "samples": samples}))
    return path


class TestMean:
    def test_translation_example(self, tmp_path, capsys):
        path = write_dataset(tmp_path / "d.json", "translation:1", [[0.0], [2.0]])
        rep = run_json(["mean", path], capsys)
        assert rep["schema"] == REPORT_SCHEMA
        assert rep["result"]["mean"] == [1.0]

    def test_constant_dataset(self, tmp_path, capsys):
        g = {"R": rot_z(0.3).tolist(), "t": [1.0, 2.0, 3.0]}
        path = write_dataset(tmp_path / "d.json", "se3", [g] * 4)
        rep = run_json(["mean", path], capsys)
        np.testing.assert_allclose(rep["result"]["mean"]["R"], rot_z(0.3), atol=1e-15)
        np.testing.assert_allclose(rep["result"]["mean"]["t"], [1.0, 2.0, 3.0], atol=1e-15)
        assert rep["result"]["iterations"] <= 1

    def test_malformed_jsonl(self, tmp_path, capsys):
        path = tmp_path / "d.jsonl"
        path.write_text('{"group": "translation:1"}\n[0.0]\n[1.0\n')
        code, _, err = run(["mean", path], capsys)
        assert code == 1
        assert "line 3" in err

    def test_malformed_json(self, tmp_path, capsys):
        path = tmp_path / "d.json"
        path.write_text('{"group": "se3",\n "samples": [1, 2,, 3]}')
        code, _, err = run(["mean", path], capsys)
        assert code == 1
        assert "line 2" in err

    def test_invalid_sample_reported_by_index(self, tmp_path, capsys):
        path = write_dataset(tmp_path / "d.json", "so3", [np.eye(3).tolist(), np.diag([1, 1, -1.0]).tolist()])
        code, _, err = run(["mean", path], capsys)
        assert code == 1
        assert "sample 1" in err

    def test_unknown_group(self, tmp_path, capsys):
        path = write_dataset(tmp_path / "d.json", "sl:2", [[1.0]])
        assert run(["mean", path], capsys)[0] == 1

    def test_missing_file(self, tmp_path, capsys):
        assert run(["mean", tmp_path / "nope.json"], capsys)[0] == 1

    def test_not_converged_exits_2(self, capsys):
        code, _, err = run(["mean", SE3_A, "--max-iter", "1"], capsys)
        assert code == 2
        assert "residual" in err

    def test_usage_error_exits_1(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["mean"])
        assert info.value.code == 1

    def test_jsonl_input(self, tmp_path, capsys):
        path = tmp_path / "d.jsonl"
        path.write_text('{"group": "translation:2"}\n[0.0, 0.0]\n[2.0, 4.0]\n')
        assert run_json(["mean", path], capsys)["result"]["mean"] == [1.0, 2.0]
        synth = tmp_path / "s.jsonl"
        assert run(["synth", "--group", "translation:2", "--cov", "0", "-n", "3", "--jsonl",
                    "-o", synth], capsys)[0] == 0
        assert run_json(["mean", synth], capsys)["result"]["mean"] == [0.0, 0.0]


class TestTest:
    def test_identical_files(self, capsys):
        rep = run_json(["test", SE3_A, SE3_A, "--permutations", "200"], capsys)
        assert rep["result"]["p_value"] == 1.0
        assert rep["result"]["reject_null"] is False

    def test_shifted_fixtures(self, capsys):
        rep = run_json(["test", SE3_A, SE3_B, "--permutations", "500"], capsys)
        assert rep["result"]["p_value"] < 0.05
        assert rep["result"]["m"] == rep["result"]["n"] == 58

    def test_report_fields(self, capsys):
        rep = run_json(["test", SE3_A, SE3_B, "--permutations", "20", "--seed", "3",
                        "--statistic", "bhattacharyya", "--keep-stats"], capsys)
        assert rep["config"]["seed"] == 3
        assert rep["config"]["statistic"] == "bhattacharyya"
        assert len(rep["result"]["perm_stats"]) == 20
        assert {"baseline", "p_value", "degenerate_count"} <= set(rep["result"])

    def test_group_mismatch(self, capsys):
        assert run(["test", SE3_A, GL_A, "--permutations", "10"], capsys)[0] == 1

    def test_degenerate_baseline_exits_2(self, tmp_path, capsys):
        path = write_dataset(tmp_path / "c.json", "translation:1", [[1.0]] * 4)
        assert run(["test", path, path, "--permutations", "10"], capsys)[0] == 2


class TestLocalGlobal:
    def test_shifted_component_rejected(self, tmp_path, capsys):
        scalars = tmp_path / "p.txt"
        rep = run_json(["localtest", GL_A, GL_B, "--permutations", "200", "--scalars", scalars], capsys)
        res = rep["result"]
        assert res["reject"][0] is True
        assert res["n_rejected"] >= 1
        lines = scalars.read_text().split()
        assert [float(x) for x in lines] == res["p_values"]

    def test_identical_inputs(self, capsys):
        res = run_json(["localtest", GL_A, GL_A, "--permutations", "100"], capsys)["result"]
        assert res["p_values"] == [1.0] * 6
        assert not any(res["reject"])

    def test_unit_weights_identical(self, tmp_path, capsys):
        w = tmp_path / "w.json"
        w.write_text(json.dumps([1.0] * 6))
        plain = run_json(["globaltest", GL_A, GL_B, "--permutations", "100"], capsys)
        weighted = run_json(["globaltest", GL_A, GL_B, "--permutations", "100", "--weights", w], capsys)
        assert plain["result"] == weighted["result"]

    def test_bad_weights(self, tmp_path, capsys):
        w = tmp_path / "w.json"
        w.write_text(json.dumps([1.0, -1.0]))
        assert run(["globaltest", GL_A, GL_B, "--permutations", "50", "--weights", w], capsys)[0] == 1

    def test_too_few_permutations(self, capsys):
        res = run_json(["localtest", GL_A, GL_B, "--permutations", "5"], capsys)["result"]
        assert res["global_p"] is None
        assert run(["globaltest", GL_A, GL_B, "--permutations", "5"], capsys)[0] == 2

    def test_requires_product_group(self, capsys):
        assert run(["localtest", SE3_A, SE3_B, "--permutations", "10"], capsys)[0] == 1


class TestSynth:
    def test_zero_covariance(self, tmp_path, capsys):
        mean = tmp_path / "m.json"
        mean.write_text(json.dumps({"element": {"R": rot_z(0.5).tolist(), "t": [1.0, 0.0, 0.0]}}))
        doc = run_json(["synth", "--group", "se3", "--mean", mean, "--cov", "0", "-n", "3"], capsys)
        assert doc["schema"] == DATASET_SCHEMA
        assert len(doc["samples"]) == 3
        for s in doc["samples"]:
            np.testing.assert_allclose(s["R"], rot_z(0.5), atol=1e-15)
            np.testing.assert_allclose(s["t"], [1.0, 0.0, 0.0], atol=1e-15)

    def test_seeded(self, capsys):
        argv = ["synth", "--group", "power:glplus:3:2", "--cov", "0.01", "-n", "5", "--seed", "4"]
        assert run(argv, capsys)[1] == run(argv, capsys)[1]
        assert run(argv, capsys)[1] != run(argv[:-1] + ["5"], capsys)[1]

    def test_fixture_reproducible(self, capsys):
        out = run_json(["synth", "--group", "se3", "--cov", "0.01", "-n", "58", "--seed", "101"], capsys)
        assert out == json.loads(SE3_A.read_text())

    def test_covariance_file(self, tmp_path, capsys):
        cov = tmp_path / "c.json"
        cov.write_text(json.dumps([0.0, 0.0, 0.0, 0.0, 0.0, 0.04]))
        doc = run_json(["synth", "--group", "se3", "--cov", cov, "-n", "20"], capsys)
        t = np.array([s["t"] for s in doc["samples"]])
        np.testing.assert_allclose(t[:, :2], 0.0, atol=1e-15)
        assert t[:, 2].std() > 0.05

    def test_bad_covariance_shape(self, tmp_path, capsys):
        cov = tmp_path / "c.json"
        cov.write_text(json.dumps([[1.0, 0.0], [0.0, 1.0]]))
        assert run(["synth", "--group", "se3", "--cov", cov, "-n", "2"], capsys)[0] == 1

    def test_round_trip_recovers_mean(self, tmp_path, capsys):
        mean = tmp_path / "m.json"
        mean.write_text(json.dumps({"R": rot_z(0.7).tolist(), "t": [0.5, -1.0, 2.0]}))
        data = tmp_path / "d.json"
        assert run(["synth", "--group", "se3", "--mean", mean, "--cov", "0.01", "-n", "2000",
                    "--seed", "9", "-o", data], capsys)[0] == 0
        rep = run_json(["mean", data], capsys)["result"]["mean"]
        G = SE3()
        est = SE3.from_rt(rep["R"], rep["t"])
        err = np.linalg.norm(G.log(G.compose(G.inverse(SE3.from_rt(rot_z(0.7), [0.5, -1.0, 2.0])), est)))
        # 6 coordinates with standard error 0.1 / sqrt(2000)
        assert err < 5 * np.sqrt(6) * 0.1 / np.sqrt(2000)


@pytest.fixture
def mesh_files(tmp_path):
    ref = blob(0)
    c = ref.vertices.mean(0)
    rotated = TriangleMesh((ref.vertices - c) @ rot_z(0.2).T + c, ref.faces)
    paths = {}
    for name, mesh in (("ref", ref), ("rot", rotated), ("other", blob(1, n=30))):
        paths[name] = tmp_path / f"{name}.off"
        write_mesh(mesh, paths[name])
    paths["obj"] = tmp_path / "rot.obj"
    write_mesh(rotated, paths["obj"])
    return paths


class TestPoseDiffcoords:
    def test_identical_meshes_give_identity_pose(self, mesh_files, capsys):
        doc = run_json(["pose", mesh_files["ref"], mesh_files["ref"]], capsys)
        assert doc["group"] == "se3"
        np.testing.assert_allclose(doc["samples"][0]["R"], np.eye(3), atol=1e-12)
        np.testing.assert_allclose(doc["samples"][0]["t"], 0.0, atol=1e-12)

    def test_rotated_copy_gives_pure_rotation(self, mesh_files, capsys):
        doc = run_json(["pose", mesh_files["ref"], mesh_files["obj"]], capsys)
        np.testing.assert_allclose(doc["samples"][0]["R"], rot_z(0.2), atol=1e-9)
        np.testing.assert_allclose(doc["samples"][0]["t"], 0.0, atol=1e-12)

    def test_odd_mesh_count(self, mesh_files, capsys):
        assert run(["pose", mesh_files["ref"]], capsys)[0] == 1

    def test_diffcoords_identity_and_rotation(self, mesh_files, capsys):
        doc = run_json(["diffcoords", mesh_files["ref"], mesh_files["ref"], mesh_files["rot"]], capsys)
        group = parse_group(doc["group"])
        G = group.stacked(np.stack([group.from_payload(s) for s in doc["samples"]]))
        np.testing.assert_allclose(G[0], np.broadcast_to(np.eye(3), G[0].shape), atol=1e-12)
        np.testing.assert_allclose(G[1], np.broadcast_to(rot_z(0.2), G[1].shape), atol=1e-12)

    def test_align_removes_rotation(self, mesh_files, capsys):
        doc = run_json(["diffcoords", mesh_files["ref"], mesh_files["rot"], "--align"], capsys)
        group = parse_group(doc["group"])
        G = group.stacked(group.from_payload(doc["samples"][0]))
        np.testing.assert_allclose(G, np.broadcast_to(np.eye(3), G.shape), atol=1e-9)

    def test_face_count_mismatch(self, mesh_files, capsys):
        code, _, err = run(["diffcoords", mesh_files["ref"], mesh_files["other"]], capsys)
        assert code == 1
        assert "faces" in err


class TestDeterminism:
    @pytest.mark.parametrize("command", ["test", "localtest", "globaltest"])
    def test_byte_identical_across_runs_and_workers(self, command, tmp_path, capsys):
        a, b = (SE3_A, SE3_B) if command == "test" else (GL_A, GL_B)
        outputs = []
        for k, workers in enumerate((1, 1, 3)):
            out = tmp_path / f"{k}.json"
            argv = [command, a, b, "--permutations", "300", "--seed", "11",
                    "--workers", str(workers), "-o", out]
            assert run(argv, capsys)[0] == 0
            outputs.append(out.read_bytes())
        assert outputs[0] == outputs[1] == outputs[2]

    def test_module_entry_point(self, tmp_path):
        path = write_dataset(tmp_path / "d.json", "translation:1", [[0.0], [2.0]])
        proc = subprocess.run([sys.executable, "-m", "liestats", "mean", str(path)],
                              capture_output=True, text=True, check=True)
        assert json.loads(proc.stdout)["result"]["mean"] == [1.0]
