import io
import json

import numpy as np
import pytest

from herwcal import cli_io, herw, synth
from herwcal.cli_io import CalibReport, PoseFileWarning, main
from herwcal.errors import ConsistencyError, ParseError


def pose_text(problem_or_scenario):
    buf = io.StringIO()
    cli_io.write_poses(problem_or_scenario, buf)
    return buf.getvalue()


def same_problem(p, q):
    if (p.m_X, p.m_Y) != (q.m_X, q.m_Y) or len(p.measurements) != len(q.measurements):
        return False
    for a, b in zip(sorted(p.measurements, key=lambda m: m.key), sorted(q.measurements, key=lambda m: m.key)):
        if a.key != b.key:
            return False
        for P, R in ((a.A, b.A), (a.B, b.B)):
            if not (np.array_equal(P.rotation, R.rotation) and np.array_equal(P.translation, R.translation)):
                return False
    return True


class TestParsePoses:
    def test_empty(self):
        with pytest.raises(ParseError, match="empty"):
            cli_io.parse_poses(io.StringIO(cli_io.POSE_HEADER + "\n"))
        with pytest.raises(ParseError):
            cli_io.parse_poses(io.StringIO(""))

    def test_round_trip(self):
        sc = synth.add_noise(synth.generate_general(15, seed=7), 0.01, 0.1, seed=8)
        text = pose_text(sc)
        p = cli_io.parse_poses(io.StringIO(text))
        assert same_problem(p, sc.problem())
        assert pose_text(p) == text

    def test_round_trip_multi(self):
        sc = synth.generate_planar(n_per_sensor=(10, 5), targets=((0.6, 0, 1.78), (0, 0.5, 1.2)), seed=1)
        assert same_problem(cli_io.parse_poses(io.StringIO(pose_text(sc))), sc.problem())

    def test_non_unit_quaternion(self):
        text = cli_io.POSE_HEADER + "\nA,0,0,,0,0,0,1.01,0,0,0\nB,0,0,0,1,2,3,1,0,0,0\n"
        with pytest.warns(PoseFileWarning, match="line 2"):
            p = cli_io.parse_poses(io.StringIO(text))
        assert np.array_equal(p.measurements[0].A.rotation, [1.0, 0, 0, 0])

    def test_tiny_deviation_renormalized_silently(self, recwarn):
        text = cli_io.POSE_HEADER + "\nA,0,0,,0,0,0,1.00001,0,0,0\nB,0,0,0,1,2,3,1,0,0,0\n"
        p = cli_io.parse_poses(io.StringIO(text))
        assert not [w for w in recwarn if issubclass(w.category, PoseFileWarning)]
        assert p.measurements[0].A.rotation[0] == 1.0

    def test_b_without_a(self):
        text = cli_io.POSE_HEADER + "\nA,0,0,,0,0,0,1,0,0,0\nB,0,0,0,0,0,0,1,0,0,0\nB,1,0,0,0,0,0,1,0,0,0\n"
        with pytest.raises(ConsistencyError) as err:
            cli_io.parse_poses(io.StringIO(text))
        assert err.value.line == 4 and err.value.category == "parse-consistency"

    @pytest.mark.parametrize("row, needle", [
        ("A,0,0,,0,0,0,1,0,0", "fields"),
        ("C,0,0,,0,0,0,1,0,0,0", "kind"),
        ("A,x,0,,0,0,0,1,0,0,0", "number"),
        ("A,0,0,1,0,0,0,1,0,0,0", "sensor"),
        ("B,0,0,,0,0,0,1,0,0,0", "sensor"),
        ("A,0,0,,0,0,nan,1,0,0,0", "non-finite"),
        ("A,0,0,,0,0,0,0,0,0,0", "zero"),
        ("A,-1,0,,0,0,0,1,0,0,0", "non-negative"),
    ])
    def test_malformed_line_reports_position(self, row, needle):
        text = cli_io.POSE_HEADER + "\n# comment\n" + row + "\n"
        with pytest.raises(ParseError, match=needle) as err:
            cli_io.parse_poses(io.StringIO(text))
        assert err.value.line == 3

    def test_missing_header(self):
        with pytest.raises(ParseError, match="header"):
            cli_io.parse_poses(io.StringIO("A,0,0,,0,0,0,1,0,0,0\n"))

    def test_duplicate(self):
        text = cli_io.POSE_HEADER + "\nA,0,0,,0,0,0,1,0,0,0\nA,0,0,,0,0,0,1,0,0,0\n"
        with pytest.raises(ParseError, match="duplicate") as err:
            cli_io.parse_poses(io.StringIO(text))
        assert err.value.line == 3

    def test_timestamp_column(self):
        text = cli_io.POSE_HEADER + "\nA,0,0,,0,0,0,1,0,0,0,12.5\nB,0,0,0,0,0,0,1,0,0,0,12.5\n"
        recs = cli_io.read_records(io.StringIO(text))
        assert recs[0][1].timestamp == 12.5


class TestReport:
    def _report(self):
        sc = synth.add_noise(synth.generate_general(10, seed=3), 0.01, 0.1, seed=4)
        p = sc.problem()
        res = herw.calibrate(p)
        return cli_io.build_report(p, res, config={"seed": 0}, digest="abc")

    def test_round_trip(self):
        rep = self._report()
        text = rep.to_json()
        again = CalibReport.from_json(text)
        assert again.to_json() == text
        assert np.array_equal(again.X[0].rotation, rep.X[0].rotation)

    def test_fields(self):
        d = json.loads(self._report().to_json())
        assert d["format"] == "herwcal-report" and d["version"] == 1
        for key in ("X", "Y", "residual_cost", "duality_gap", "certified", "corrections", "signs",
                    "metrics", "tool_version", "input_digest"):
            assert key in d
        assert len(d["signs"]["0,0"]) == 10

    def test_rejects_foreign_json(self):
        with pytest.raises(ParseError):
            CalibReport.from_json('{"format": "other"}')


@pytest.fixture
def general_files(tmp_path):
    poses, truth = tmp_path / "g.csv", tmp_path / "g.json"
    assert main(["simulate", "--n", "15", "--seed", "7", "--poses", str(poses), "--truth", str(truth)]) == 0
    return poses, truth


@pytest.fixture
def planar_files(tmp_path):
    poses, truth = tmp_path / "p.csv", tmp_path / "p.json"
    assert main(["simulate", "--kind", "planar", "--n", "60", "--seed", "2",
                 "--poses", str(poses), "--truth", str(truth)]) == 0
    return poses, truth


class TestCommands:
    def test_end_to_end_noiseless(self, general_files, tmp_path, capsys):
        poses, truth = general_files
        rep = tmp_path / "r.json"
        assert main(["calibrate", str(poses), "-o", str(rep)]) == 0
        capsys.readouterr()
        figs = tmp_path / "figs"
        assert main(["evaluate", str(rep), str(truth), "--fig-dir", str(figs),
                     "--table", str(tmp_path / "t.tsv"), "--delimiter", "\t"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "unknown\teps_t_m\teps_r_deg"
        for line in out[1:]:
            _, et, er = line.split("\t")
            assert float(et) < 1e-6 and float(er) < 1e-6
        assert (figs / "calibration_errors.png").stat().st_size > 0
        assert (figs / "cycle_residuals.png").stat().st_size > 0
        assert (tmp_path / "t.tsv").read_text().splitlines() == out

    def test_reports_byte_identical(self, general_files, tmp_path):
        poses, _ = general_files
        for name in ("a.json", "b.json"):
            assert main(["calibrate", str(poses), "--seed", "3", "-o", str(tmp_path / name)]) == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_planar_without_prior(self, planar_files, capsys):
        poses, _ = planar_files
        assert main(["calibrate", str(poses)]) == cli_io.EXIT_DEGENERATE
        err = capsys.readouterr().err
        assert err.startswith("error[degenerate]:") and "--norm" in err and "prior" in err

    def test_planar_auto_without_prior(self, planar_files, capsys):
        poses, _ = planar_files
        assert main(["calibrate", str(poses), "--planar-auto"]) == cli_io.EXIT_DEGENERATE

    def test_planar_with_prior(self, planar_files, tmp_path, capsys):
        poses, truth = planar_files
        rep = tmp_path / "r.json"
        assert main(["calibrate", str(poses), "--norm", "target0=1.88", "-o", str(rep)]) == 0
        d = json.loads(rep.read_text())
        assert d["config"]["norms"] == {"0": 1.88}
        assert len(d["corrections"]) == 1 and d["corrections"][0]["gamma_m"] != 0
        assert d["planar_corrected"] == d["corrections"][0]["applied"]
        capsys.readouterr()
        assert main(["evaluate", str(rep), str(truth)]) == 0
        rows = capsys.readouterr().out.splitlines()[1:]
        # the prior is 2 mm off the true norm, so errors sit at the mm level
        assert all(float(r.split(",")[1]) < 0.01 for r in rows)

    def test_parse_error_exit(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text(cli_io.POSE_HEADER + "\nA,0,0\n")
        assert main(["calibrate", str(bad)]) == cli_io.EXIT_PARSE
        assert "error[parse]" in capsys.readouterr().err

    def test_missing_file(self, tmp_path, capsys):
        assert main(["calibrate", str(tmp_path / "none.csv")]) == cli_io.EXIT_PARSE
        assert "error[io]" in capsys.readouterr().err

    def test_bad_norm_flag(self, general_files, capsys):
        poses, _ = general_files
        assert main(["calibrate", str(poses), "--norm", "target0"]) == cli_io.EXIT_PARSE
        assert "error[invalid-input]" in capsys.readouterr().err

    def test_uncertified_exit(self, tmp_path, capsys):
        # a prior far from the data breaks tightness of the relaxation
        poses, truth = tmp_path / "g.csv", tmp_path / "g.json"
        main(["simulate", "--n", "15", "--seed", "8", "--sigma-t", "0.01", "--sigma-r", "0.1",
              "--poses", str(poses), "--truth", str(truth)])
        code = main(["calibrate", str(poses), "--norm", "target0=0.5", "-o", str(tmp_path / "r.json")])
        d = json.loads((tmp_path / "r.json").read_text())
        assert code == cli_io.EXIT_UNCERTIFIED and not d["certified"]

    @pytest.mark.parametrize("exc, code", [
        (ParseError("x"), 2), (ConsistencyError("x"), 2),
        (cli_io.DegeneracyError("x"), 3), (cli_io.SolverError("x"), 4),
    ])
    def test_exit_codes(self, exc, code):
        assert cli_io.exit_code_for(exc) == code

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as ex:
            main(["--version"])
        assert ex.value.code == 0 and "herwcal" in capsys.readouterr().out
