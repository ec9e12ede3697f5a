import json
import os
import subprocess
import sys

import numpy as np

SCRIPT = """
import json, numpy as np
from dhflex._accel import backend
from dhflex.engine import ScenarioConfig, Simulation
sim = Simulation(ScenarioConfig(scenario="distributed_active", prerun_days=2.0, days=0.02))
sim.advance(60)
print(json.dumps({"backend": backend(), "T": sim.T.tolist(), "ts": sim.tr["t_supply"][:60].tolist(),
                  "tank": sim.tT.tolist(), "loss": sim.tr["net_loss"][:60].tolist()}))
"""


def _run(flag):
    env = dict(os.environ, DHFLEX_DISABLE_JIT=flag)
    out = subprocess.run([sys.executable, "-c", SCRIPT], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def test_numba_and_numpy_backends_agree():
    jit, plain = _run("0"), _run("1")
    assert jit["backend"] == "numba" and plain["backend"] == "numpy"
    for key in ("T", "ts", "tank", "loss"):
        np.testing.assert_allclose(jit[key], plain[key], rtol=1e-9, atol=1e-9, err_msg=key)
