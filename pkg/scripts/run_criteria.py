"""Run selected acceptance checks outside pytest and print one line per check.

Usage: python scripts/run_criteria.py 4 8        # just criteria 4 and 8
       python scripts/run_criteria.py --all --out results/

Criteria 5 and 7 reuse the network trained by 6 when it runs first in the
same invocation; otherwise they start from an untrained one.
"""
import argparse
import json
from pathlib import Path

from bayesqsm import experiments as ex

CHECKS = {
    1: ex.check_operator, 2: ex.check_gradients, 3: ex.check_entropy, 4: ex.check_map_vi,
    6: ex.check_density, 5: ex.check_inference_gap, 7: ex.check_domain_shift,
    8: ex.check_uncertainty, 9: ex.check_metrics, 10: ex.check_golden,
}
NEEDS_CTX = {5, 6, 7}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("criteria", nargs="*", type=int)
    ap.add_argument("--all", action="store_true")
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    wanted = list(CHECKS) if args.all else [c for c in CHECKS if c in args.criteria]
    if not wanted:
        ap.error("name at least one criterion (1-10) or pass --all")
    ctx, results = {}, []
    for c in wanted:
        res = ex._timed(CHECKS[c], ctx) if c in NEEDS_CTX else ex._timed(CHECKS[c])
        print(f"{res.line()}  ({res.seconds:.1f} s)", flush=True)
        results.append(res)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "criteria.json").write_text(
            json.dumps([r.to_dict() for r in results], indent=2, sort_keys=True) + "\n")
        if "pdi_net" in ctx:
            from bayesqsm.net import save_weights
            save_weights(ctx["pdi_net"], args.out / "pdi_weights.bin")
    return 0 if all(r.passed for r in results) else 1


if __name__ == "__main__":
    raise SystemExit(main())
