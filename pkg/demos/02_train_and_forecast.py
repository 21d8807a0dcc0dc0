"""Fit the tilted model and the Gaussian baseline to one synthetic OU window.

A short run (a couple of minutes on one core).  Both models are trained on the
first 5 time units of an alpha = 1.2 realisation and forecast the next unit.
"""
import logging
import sys

from levy_tilt.data import GenerateConfig, make_realisation
from levy_tilt.experiment import Protocol, run_realisation

logging.getLogger("levy_tilt").setLevel(logging.ERROR)  # path-abort notices

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 100
protocol = Protocol(iterations=iterations, m_paths=32, n_steps=250, k_samples=100, forecast_paths=500)
rz = make_realisation(GenerateConfig(alphas=(1.2,), horizon=6.0), 1.2, 0)
print("true drift:", {k: round(v, 3) for k, v in rz.drift.named_values().items()})

out = run_realisation(rz, protocol)
for name, o in out.items():
    drift = {k: round(v, 3) for k, v in o.drift.items()}
    print(f"{name:9s} CRPS {o.crps:.3f}  jump CRPS p97.5 {o.jump_crps[97.5]:.3f}  "
          f"recovery error {o.recovery:.3f}  drift {drift}  ({o.seconds:.0f}s)")
