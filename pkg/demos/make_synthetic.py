"""Write the bundled 20-subject synthetic data set used by the CLI demo and tests.

Two variables on a 0 to 24 month scale, two true components, 4 to 10
observations per subject and variable.
"""

import os

from sparsefpca.simulate import SimScenario, generate_multivariate

HERE = os.path.dirname(os.path.abspath(__file__))


def main(path=os.path.join(HERE, "data", "synthetic20.csv")):
    sc = SimScenario(kind="multivariate", P=2, K_true=2, I=20, M_grid=49, obs_range=(4, 10), snr=4.0, seed=2024)
    rec, _ = generate_multivariate(sc)
    rec["subject"] = [f"s{i + 1:02d}" for i in rec["subject"]]
    rec["variable"] = rec["variable"].map({0: "marker_a", 1: "marker_b"})
    rec["time"] = (24.0 * rec["time"]).round(6)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    rec.to_csv(path, index=False, float_format="%.6f")
    print(f"wrote {len(rec)} rows to {path}")


if __name__ == "__main__":
    main()
