"""det(F) of the baseline and of a designed profile against the noise level.

    python3 scripts/sigma_sweep.py [reference.json]

det scales as sigma^-8 for four parameters, so log10 det drops by 8 per decade
of sigma. Useful when comparing det values reported under different noise
assumptions.
"""

import math
import sys

import numpy as np

from fimcharge import ReferenceTrajectory, assemble_fim, d_optimality, load_run_config
from fimcharge.oed import baseline_profile


def main():
    cfg = load_run_config("paper_s4").scenario
    profiles = {"baseline": baseline_profile(cfg)}
    if len(sys.argv) > 1:
        profiles["reference"] = ReferenceTrajectory.load(sys.argv[1]).profile()
    print("sigma_mV  " + "  ".join(f"{k:>10s}" for k in profiles))
    for sigma in np.geomspace(1e-3, 2e-2, 9):
        c = cfg.replace(sigma_v=float(sigma))
        dets = [math.log10(d_optimality(assemble_fim(cfg.nominal_theta, pr, c))) for pr in profiles.values()]
        print(f"{1e3 * sigma:8.2f}  " + "  ".join(f"{d:10.2f}" for d in dets))


if __name__ == "__main__":
    main()
