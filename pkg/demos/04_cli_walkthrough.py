"""The command-line workflow: solve once, then simulate and check the stored solution.

Runs ``stackelberg`` in a temporary directory and prints the exit codes and
a few fields of the JSON each command writes to stdout.
"""

import json
import os
import subprocess
import sys
import tempfile

here = os.path.dirname(os.path.abspath(__file__))
cfg = os.path.join(here, "configs", "scalar.json")


def stackelberg(*args):
    proc = subprocess.run([sys.executable, "-m", "stackelberg_po.cli", *args],
                          capture_output=True, text=True)
    return proc.returncode, proc.stdout, proc.stderr.strip()


with tempfile.TemporaryDirectory() as out:
    code, stdout, _ = stackelberg("solve", "--config", cfg, "--out", out)
    summary = json.loads(stdout)
    print(f"solve    -> exit {code}, route {summary['route']}, "
          f"leader cost {summary['costs']['leader']['total']:.5f}")
    print(f"            files: {', '.join(sorted(os.listdir(out))[:6])}, ...")

    code, stdout, _ = stackelberg("simulate", "--config", cfg, "--out", out, "--paths", "4000",
                                  "--seed", "1")
    leader = json.loads(stdout)["costs"]["leader"]
    print(f"simulate -> exit {code}, leader {leader['mean']:.5f} +/- {leader['se']:.5f}")

    code, stdout, _ = stackelberg("check", "--config", cfg, "--out", out)
    for row in json.loads(stdout)["checks"]:
        print(f"check       {row['name']:<36} {row['value']:.2e}  {'pass' if row['pass'] else 'FAIL'}")
    print(f"check    -> exit {code}")

    code, _, err = stackelberg("solve", "--config", os.path.join(here, "configs", "escape.json"),
                               "--out", out)
    print(f"escape   -> exit {code}: {err}")
    code, _, err = stackelberg("simulate", "--config", cfg, "--out", os.path.join(out, "none"))
    print(f"missing  -> exit {code}: {err}")
