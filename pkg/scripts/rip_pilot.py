"""Pilot run that fixed the RIP probe threshold; writes docs/rip_pilot.json."""

import json
import sys
from pathlib import Path

from flipad.rng import make_rng
from flipad.theory import RIP_FAMILY, RIP_TRIALS, rip_profile


def main(out="docs/rip_pilot.json", seeds=range(5)):
    rows = []
    for seed in seeds:
        _, lm = RIP_FAMILY.draw_map(make_rng(seed))
        reps = rip_profile(lm, [1, 2, 4, 8], RIP_TRIALS, seed=seed)
        rows.append({"seed": seed, "delta_hat": {r.S: r.delta_hat for r in reps}})
    rec = {
        "family": {"in_shape": RIP_FAMILY.in_shape, "out_channels": RIP_FAMILY.out_channels,
                   "kernel": RIP_FAMILY.kernel, "transposed": RIP_FAMILY.transposed},
        "trials_per_level": RIP_TRIALS,
        "runs": rows,
        "max_delta_hat_S4": max(r["delta_hat"][4] for r in rows),
    }
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    Path(out).write_text(json.dumps(rec, indent=2))
    print(json.dumps(rec, indent=2))


if __name__ == "__main__":
    main(*sys.argv[1:2])
