import subprocess
import sys

from msacontrol.cli import main

RUN_HEADER = "iter,J,J_stderr,mu,mu_stderr,descent,wall_ms"


def run_cli(args):
    return main(list(args))


def read_rows(path):
    lines = path.read_text().split("\n")
    assert lines[-1] == ""  # line-feed terminated
    return lines[:-1]


def strip_wall(lines):
    return [",".join(line.split(",")[:-1]) for line in lines]


class TestCmdRun:
    def test_csv_schema_and_roundtrip(self, tmp_path):
        out = tmp_path / "run.csv"
        code = run_cli(["run", "--problem", "example41", "--L", "0.1",
                        "--paths", "2000", "--steps", "20", "--iters", "3",
                        "--seed", "7", "--out", str(out)])
        assert code == 0
        rows = read_rows(out)
        assert rows[0] == RUN_HEADER
        assert len(rows) == 4
        # round-trip: every float parses back exactly to a binary64
        for row in rows[1:]:
            cells = row.split(",")
            assert int(cells[0]) >= 1
            for cell in cells[1:]:
                val = float(cell)
                assert format(val, ".17g") == cell

    def test_cost_settles_by_second_row(self, tmp_path):
        out = tmp_path / "run.csv"
        assert run_cli(["run", "--problem", "example41", "--L", "0.1",
                        "--paths", "4000", "--steps", "20", "--iters", "4",
                        "--seed", "7", "--out", str(out)]) == 0
        rows = read_rows(out)[1:]
        first = rows[0].split(",")
        assert float(first[1]) > 0.0
        for row in rows[1:]:
            cells = row.split(",")
            j, se = float(cells[1]), float(cells[2])
            assert abs(j) <= max(3 * se, 1e-12)

    def test_zero_iterations_header_only(self, tmp_path):
        out = tmp_path / "run.csv"
        assert run_cli(["run", "--iters", "0", "--paths", "100", "--steps", "5",
                        "--out", str(out)]) == 0
        assert read_rows(out) == [RUN_HEADER]

    def test_identical_configs_identical_files_modulo_walltime(self, tmp_path):
        args = ["run", "--problem", "lq", "--paths", "1000", "--steps", "10",
                "--iters", "3", "--seed", "11", "--degree", "1"]
        out1 = tmp_path / "a.csv"
        out2 = tmp_path / "b.csv"
        assert run_cli(args + ["--out", str(out1)]) == 0
        assert run_cli(args + ["--out", str(out2)]) == 0
        assert strip_wall(read_rows(out1)) == strip_wall(read_rows(out2))

    def test_unknown_problem_exits_2(self, capsys):
        assert run_cli(["run", "--problem", "nope"]) == 2
        assert "configuration error" in capsys.readouterr().err

    def test_unwritable_output_exits_2(self, tmp_path):
        missing = tmp_path / "no" / "such" / "dir" / "out.csv"
        assert run_cli(["run", "--paths", "100", "--steps", "5", "--iters", "1",
                        "--out", str(missing)]) == 2

    def test_bad_run_parameters_exit_2(self):
        assert run_cli(["run", "--paths", "0"]) == 2
        assert run_cli(["run", "--epsilon", "-1.0"]) == 2

    def test_config_file_flags_win(self, tmp_path):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text("problem=example41\nL=0.1\npaths=500\niters=2\n"
                       "steps=10\nseed=3\n# comment line\n")
        out = tmp_path / "run.csv"
        assert run_cli(["run", "--config", str(cfg), "--iters", "1",
                        "--out", str(out)]) == 0
        assert len(read_rows(out)) == 2  # header + 1 row: the flag won

    def test_custom_problem_file(self, tmp_path):
        prob = tmp_path / "myprob.py"
        prob.write_text(
            "import msacontrol as mc\n"
            "def make_problem():\n"
            "    return mc.example41(0.2)\n")
        out = tmp_path / "run.csv"
        assert run_cli(["run", "--problem", str(prob), "--paths", "200",
                        "--steps", "5", "--iters", "1", "--out", str(out)]) == 0
        assert len(read_rows(out)) == 2


class TestCmdOracle:
    def test_example41_prints_zero_optimum(self, capsys):
        assert run_cli(["oracle", "--problem", "example41", "--L", "0.1",
                        "--steps", "3"]) == 0
        out = capsys.readouterr().out
        assert "Jstar=0" in out
        assert out.count("node=") == 7

    def test_lq_desk_zero_optimum(self, capsys):
        assert run_cli(["oracle", "--problem", "lq", "--steps", "3"]) == 0
        assert "Jstar=0" in capsys.readouterr().out

    def test_budget_exceeded_exits_2(self, capsys):
        assert run_cli(["oracle", "--problem", "lq", "--steps", "4"]) == 2
        assert "budget" in capsys.readouterr().err


class TestCmdRate:
    def test_requires_lq(self, capsys):
        assert run_cli(["rate", "--problem", "example41"]) == 2

    def test_gap_table_and_summary(self, tmp_path, capsys):
        out = tmp_path / "rate.csv"
        assert run_cli(["rate", "--problem", "lq", "--paths", "4000",
                        "--steps", "10", "--iters", "6", "--seed", "3",
                        "--degree", "1", "--out", str(out)]) == 0
        rows = read_rows(out)
        assert rows[0] == "iter,gap,iter_times_gap"
        assert len(rows) == 7
        summary = capsys.readouterr().out
        assert "m0=" in summary and "C1=" in summary
        m0 = int(summary.split("m0=")[1].split()[0])
        c1 = float(summary.split("C1=")[1].split()[0])
        for row in rows[1:]:
            m, gap, mg = row.split(",")
            if int(m) >= m0:
                assert float(mg) <= c1 + 1e-12


class TestConsoleEntryPoint:
    def test_module_invocation(self, tmp_path):
        out = tmp_path / "run.csv"
        proc = subprocess.run(
            [sys.executable, "-m", "msacontrol.cli", "run", "--paths", "200",
             "--steps", "5", "--iters", "1", "--out", str(out)],
            capture_output=True, text=True)
        assert proc.returncode == 0
        assert out.exists()
