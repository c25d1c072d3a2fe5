import csv
import json
import os
import re
import signal
import subprocess
import sys

import pytest

from lanekeep.cli import main
from lanekeep.geometry import builtin_track, track_from_json
from lanekeep.protocol import EnvClient

FAST = ["--max-steps", "60", "--noise", "off"]


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


# ---------------------------------------------------------------------------
# exit codes


def test_no_command_is_usage_error(capsys):
    code, _, err = run(capsys)
    assert code == 1
    assert "usage" in err


def test_unknown_command_is_usage_error(capsys):
    code, _, err = run(capsys, "launch")
    assert code == 1
    assert "error" in err


def test_bad_flag_value_is_usage_error(capsys):
    code, _, err = run(capsys, "eval", "--noise", "maybe")
    assert code == 1


def test_ddpg_without_checkpoint_is_usage_error(capsys):
    code, _, err = run(capsys, "eval", "--controller", "ddpg", *FAST)
    assert code == 1
    assert "checkpoint" in err


def test_bad_preset_row_is_runtime_error(capsys):
    code, _, err = run(capsys, "eval", "--controller", "lqr", "--preset", "99", *FAST)
    assert code == 2
    assert "preset row" in err


def test_missing_track_file_is_runtime_error(capsys):
    code, _, err = run(capsys, "eval", "--track", "no/such/track.json", *FAST)
    assert code == 2
    assert "track" in err


def test_missing_config_file_is_runtime_error(capsys):
    code, _, err = run(capsys, "eval", "--config", "nope.cfg", *FAST)
    assert code == 2


# ---------------------------------------------------------------------------
# tracks


def test_tracks_list(capsys):
    code, out, _ = run(capsys, "tracks", "list")
    assert code == 0
    for name in ("oval", "river", "switchback", "loop"):
        assert name in out
    assert "length_m" in out


def test_tracks_emit_roundtrips(tmp_path, capsys):
    path = os.path.join(tmp_path, "oval.json")
    code, out, _ = run(capsys, "tracks", "emit", "oval", "--out", path)
    assert code == 0
    with open(path) as fh:
        track = track_from_json(fh.read())
    ref = builtin_track("oval")
    assert track.total_length == pytest.approx(ref.total_length)
    assert len(track.segments) == len(ref.segments)


def test_tracks_emit_to_stdout(capsys):
    code, out, _ = run(capsys, "tracks", "emit", "loop")
    assert code == 0
    json.loads(out)


def test_tracks_emit_unknown_name(capsys):
    code, _, err = run(capsys, "tracks", "emit", "mobius")
    assert code == 1
    assert "mobius" in err


def test_tracks_validate_accepts_emitted_file(tmp_path, capsys):
    path = os.path.join(tmp_path, "river.json")
    run(capsys, "tracks", "emit", "river", "--out", path)
    code, out, _ = run(capsys, "tracks", "validate", path)
    assert code == 0
    assert "OK" in out


def test_tracks_validate_rejects_open_gap(tmp_path, capsys):
    path = os.path.join(tmp_path, "bad.json")
    run(capsys, "tracks", "emit", "oval", "--out", path)
    with open(path) as fh:
        obj = json.load(fh)
    obj["segments"][0]["length"] += 5.0   # break the closure
    with open(path, "w") as fh:
        json.dump(obj, fh)
    code, _, err = run(capsys, "tracks", "validate", path)
    assert code == 2
    assert path in err


def test_tracks_evaluated_from_file(tmp_path, capsys):
    path = os.path.join(tmp_path, "oval.json")
    run(capsys, "tracks", "emit", "oval", "--out", path)
    code, out_file, _ = run(capsys, "eval", "--track", path, "--preset", "1", *FAST)
    code2, out_builtin, _ = run(capsys, "eval", "--track", "oval", "--preset", "1", *FAST)
    assert code == 0 and code2 == 0
    assert score_of(out_file) == score_of(out_builtin)


# ---------------------------------------------------------------------------
# eval


def score_of(out):
    return float(re.search(r"mean score: (\S+)", out).group(1))


def test_eval_runs_and_reports(capsys):
    code, out, _ = run(capsys, "eval", "--controller", "lqr", "--preset", "2",
                       "--track", "oval", "--seed", "3", *FAST)
    assert code == 0
    assert "eval lqr(row2) on oval" in out
    assert "episode 0" in out
    assert score_of(out) > 0


def test_eval_is_bit_deterministic(capsys):
    argv = ["eval", "--controller", "lqr", "--preset", "2", "--track", "river",
            "--seed", "7", "--max-steps", "80", "--noise", "on"]
    _, first, _ = run(capsys, *argv)
    _, second, _ = run(capsys, *argv)
    assert first == second


def test_eval_trace_file(tmp_path, capsys):
    path = os.path.join(tmp_path, "trace.csv")
    code, out, _ = run(capsys, "eval", "--controller", "lqr", "--trace", path, *FAST)
    assert code == 0
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "t", "s", "d", "theta", "action", "delta",
                       "reward", "vx", "vy"]
    assert len(rows) == 61
    with open(path, "rb") as fh:
        first = fh.read()
    run(capsys, "eval", "--controller", "lqr", "--trace", path, *FAST)
    with open(path, "rb") as fh:
        assert fh.read() == first


def test_eval_discounted_analysis_line(capsys):
    code, out, _ = run(capsys, "eval", "--controller", "lqr", "--gamma", "0.99", *FAST)
    assert code == 0
    m = re.search(r"discounted score \(gamma=0.99, analysis only\): (\S+)", out)
    assert m
    undiscounted = score_of(out)
    assert 0 < float(m.group(1)) < undiscounted


def test_eval_multiple_episodes_use_distinct_seeds(capsys):
    code, out, _ = run(capsys, "eval", "--controller", "lqr", "--episodes", "3",
                       "--seed", "1", "--max-steps", "60", "--noise", "on")
    assert code == 0
    scores = re.findall(r"episode \d: score=(\S+) ", out)
    assert len(scores) == 3
    assert len(set(scores)) > 1   # noise differs across the per-episode seeds


def test_eval_mpc_uses_preset_horizon(capsys):
    code, out, _ = run(capsys, "eval", "--controller", "mpc", "--preset", "7",
                       "--track", "loop", "--max-steps", "30", "--noise", "off")
    assert code == 0
    assert "mpc(hp8)" in out


# ---------------------------------------------------------------------------
# train


def test_train_zero_steps(tmp_path, capsys):
    out_dir = os.path.join(tmp_path, "run")
    code, out, _ = run(capsys, "train", "--steps", "0", "--out", out_dir, *FAST)
    assert code == 0
    assert "0 episodes completed" in out
    with open(os.path.join(out_dir, "training_log.csv")) as fh:
        rows = list(csv.reader(fh))
    assert rows == [["episode", "steps", "cumulative_reward", "epsilon"]]
    assert os.path.exists(os.path.join(out_dir, "manifest.json"))
    assert os.path.exists(os.path.join(out_dir, "actor.net"))


def test_train_is_bit_deterministic(tmp_path, capsys):
    cfg = os.path.join(tmp_path, "train.cfg")
    with open(cfg, "w") as fh:
        fh.write("batch_size = 16\nwarm_up = 200\n")
    outputs = []
    for name in ("a", "b"):
        out_dir = os.path.join(tmp_path, name)
        code, _, _ = run(capsys, "train", "--steps", "600", "--out", out_dir,
                         "--config", cfg, "--seed", "5", "--max-steps", "50",
                         "--noise", "on")
        assert code == 0
        blob = {}
        for fname in ("training_log.csv", "actor.net", "critic.net", "manifest.json"):
            with open(os.path.join(out_dir, fname), "rb") as fh:
                blob[fname] = fh.read()
        outputs.append(blob)
    assert outputs[0] == outputs[1]
    log_rows = list(csv.reader(outputs[0]["training_log.csv"].decode().splitlines()))
    assert len(log_rows) > 1   # short episodes, so some finished


# ---------------------------------------------------------------------------
# compare


def read_table(path):
    with open(path) as fh:
        header = fh.readline()
        rows = list(csv.DictReader(fh))
    return header, rows


def test_compare_serial_table(tmp_path, capsys):
    out = os.path.join(tmp_path, "table.csv")
    code, text, _ = run(capsys, "compare", "--tracks", "oval", "--controllers", "lqr",
                        "--presets", "1,2", "--seeds", "2", "--jobs", "1",
                        "--max-steps", "40", "--out", out)
    assert code == 0
    assert "# noise=on seeds=0,1" in text
    assert "mean +/- std over the seed bank" in text
    header, rows = read_table(out)
    assert header.startswith("# noise=on")
    assert [r["setup"][:4] for r in rows] == ["row1", "row2"]
    for r in rows:
        assert r["status"] == "ok"
        assert r["completed"] == "2"
        assert float(r["score_mean"]) > 0
        assert float(r["steps_mean"]) == 40.0


def test_compare_parallel_matches_serial(tmp_path, capsys):
    args = ["compare", "--tracks", "oval", "--controllers", "lqr",
            "--presets", "1,2", "--seeds", "2", "--max-steps", "40"]
    out1 = os.path.join(tmp_path, "serial.csv")
    out2 = os.path.join(tmp_path, "parallel.csv")
    assert run(capsys, *args, "--jobs", "1", "--out", out1)[0] == 0
    assert run(capsys, *args, "--jobs", "2", "--out", out2)[0] == 0
    with open(out1, "rb") as f1, open(out2, "rb") as f2:
        assert f1.read() == f2.read()


def test_compare_failed_cell_marks_row(tmp_path, capsys):
    out = os.path.join(tmp_path, "table.csv")
    code, text, _ = run(capsys, "compare", "--tracks", "oval",
                        "--controllers", "lqr,ddpg", "--presets", "1",
                        "--seeds", "1", "--jobs", "1", "--max-steps", "40",
                        "--out", out)
    assert code == 0   # the table still renders
    _, rows = read_table(out)
    by_controller = {r["controller"]: r for r in rows}
    assert by_controller["lqr"]["status"] == "ok"
    assert by_controller["ddpg"]["status"].startswith("FAIL(")
    assert by_controller["ddpg"]["score_mean"] == ""


def test_compare_cell_agrees_with_eval(tmp_path, capsys):
    out = os.path.join(tmp_path, "table.csv")
    code, _, _ = run(capsys, "compare", "--tracks", "oval", "--controllers", "lqr",
                     "--presets", "3", "--seeds", "1", "--seed", "5", "--jobs", "1",
                     "--max-steps", "40", "--out", out)
    assert code == 0
    _, rows = read_table(out)
    cell_score = float(rows[0]["score_mean"])
    code, text, _ = run(capsys, "eval", "--controller", "lqr", "--preset", "3",
                        "--track", "oval", "--seed", "5", "--max-steps", "40",
                        "--noise", "on")
    assert code == 0
    assert score_of(text) == cell_score


def test_compare_groups_presets_by_track(capsys):
    code, text, _ = run(capsys, "compare", "--tracks", "oval,loop",
                        "--controllers", "lqr", "--seeds", "1", "--jobs", "1",
                        "--max-steps", "30")
    assert code == 0
    lines = [ln for ln in text.splitlines() if ln.startswith(("oval", "loop"))]
    # default preset table: rows 1-3 belong to oval, rows 7-9 to loop
    assert [ln.split()[2] for ln in lines if ln.startswith("oval")] == [
        "row1", "row2", "row3"]
    assert [ln.split()[2] for ln in lines if ln.startswith("loop")] == [
        "row7", "row8", "row9"]


def test_compare_rejects_bad_controller(capsys):
    code, _, err = run(capsys, "compare", "--controllers", "pid")
    assert code == 1
    assert "pid" in err


# ---------------------------------------------------------------------------
# config file precedence


def test_config_file_supplies_defaults_and_flags_win(tmp_path, capsys):
    cfg = os.path.join(tmp_path, "eval.cfg")
    with open(cfg, "w") as fh:
        fh.write("seed = 9\nnoise = off\nmax_steps = 60\ncontroller = lqr\n")
    code, out, _ = run(capsys, "eval", "--config", cfg)
    assert code == 0
    assert "noise_sigma=0.0 seed=9" in out
    code, out, _ = run(capsys, "eval", "--config", cfg, "--seed", "3")
    assert code == 0
    assert "noise_sigma=0.0 seed=3" in out


# ---------------------------------------------------------------------------
# serve


def test_serve_subprocess_end_to_end():
    proc = subprocess.Popen(
        [sys.executable, "-m", "lanekeep", "serve", "--port", "0", "--noise", "off"],
        stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True, bufsize=1,
    )
    try:
        line = proc.stdout.readline()
        m = re.match(r"listening on ([\d.]+):(\d+)", line)
        assert m, f"unexpected banner: {line!r}"
        client = EnvClient(m.group(1), int(m.group(2)), timeout=10.0)
        ack = client.hello()
        assert ack.type == "config_ack"
        assert ack.body["noise_sigma"] == 0.0   # the server default applied
        client.reset()
        res = client.step(0.0)
        assert res.body["reward"] == 1.0
        client.close()
        closed = proc.stdout.readline()
        assert "session closed: 1 episodes, 1 steps" in closed
    finally:
        proc.send_signal(signal.SIGINT)
        try:
            proc.wait(timeout=10.0)
        except subprocess.TimeoutExpired:
            proc.kill()
            raise
    assert proc.returncode == 0
