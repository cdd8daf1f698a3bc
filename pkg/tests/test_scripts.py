import json
import subprocess
import sys
from pathlib import Path

SCRIPTS = Path(__file__).resolve().parents[1] / "scripts"


def run(script, *args):
    proc = subprocess.run([sys.executable, str(SCRIPTS / script), *args],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    return proc.stdout.splitlines()


def test_repair_episode_script():
    summary = json.loads(run("run_repair_episode.py", "--budget", "12")[-1])
    assert summary["success_rate"] == 1.0 and summary["all_safe"]


def test_fuzz_safety_script():
    lines = run("fuzz_safety.py", "--seeds", "5", "--calls", "60")
    assert lines[-1] == "SAFE"
    assert json.loads(lines[0])["tool_calls"] == 60
