"""The ten acceptance criteria at their stated tolerances.

Each test prints one PASS/FAIL line (collected into the terminal summary).
Criteria 5 and 7 reuse the network trained for criterion 6; run the whole
module, or they fall back to an untrained network.
"""
import json
import time

import pytest

from bayesqsm import experiments as ex
from bayesqsm.cli import main

from conftest import ACCEPTANCE_LINES

CTX = {}


def _record(res, extra=""):
    line = f"{res.line()}  {extra}".rstrip()
    ACCEPTANCE_LINES.append(line)
    print(line)
    print(json.dumps(res.to_dict()["values"], indent=1, sort_keys=True)[:4000])
    return res


def test_criterion_01_operator():
    res = _record(ex._timed(ex.check_operator))
    assert res.passed and res.seconds < 30


def test_criterion_02_gradients():
    res = _record(ex._timed(ex.check_gradients))
    assert res.passed and res.seconds < 300


def test_criterion_03_entropy():
    assert _record(ex._timed(ex.check_entropy)).passed


def test_criterion_04_map_vi():
    res = _record(ex._timed(ex.check_map_vi))
    worst = max(s["vi_vs_medi_pct"] for s in res.values["subjects"])
    assert res.passed, f"worst VI vs MEDI RMSE {worst:.1f}%"


def test_criterion_06_density():
    res = _record(ex._timed(ex.check_density, CTX))
    assert res.passed, res.values["best_val_rmse_pct"]


def test_criterion_05_inference_gap():
    assert _record(ex._timed(ex.check_inference_gap, CTX)).passed


def test_criterion_07_domain_shift():
    res = _record(ex._timed(ex.check_domain_shift, CTX))
    assert res.passed, res.values


def test_criterion_08_uncertainty():
    res = _record(ex._timed(ex.check_uncertainty))
    assert res.passed and res.seconds < 1200, res.values


def test_criterion_09_metrics():
    assert _record(ex._timed(ex.check_metrics)).passed


def test_criterion_10_repro_smoke_deterministic(tmp_path):
    t = time.perf_counter()
    codes = [main(["repro", "smoke", "--out", str(tmp_path / name)]) for name in ("a", "b")]
    elapsed = time.perf_counter() - t
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
               for f in ("report.json", "table.txt"))
    res = ex.CheckResult(10, "repro_smoke", codes == [0, 0] and same and elapsed < 600,
                         {"exit_codes": codes, "identical_reports": same,
                          "seconds_total": elapsed})
    _record(res)
    assert res.passed, res.values
