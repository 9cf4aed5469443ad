"""Regenerate the bundled 16^3 fixture and its golden MEDI/VI traces.

Usage: python scripts/make_fixture.py [--traces-only]

Only rerun this when the reconstruction code changes on purpose; the
committed traces are what ``repro smoke`` compares against.
"""
import argparse
import shutil
import tempfile

from bayesqsm.dipole import build_dipole_kernel
from bayesqsm.experiments import FIXTURE, run_golden
from bayesqsm.simulate import EchoConfig, build_phantom, random_phantom_spec, run_ensemble
from bayesqsm.volume import SeededRng, save_mask, save_volume


def make_volumes(out):
    spec = random_phantom_spec(SeededRng(16), (16, 16, 16), n_primitives=3)
    maps = build_phantom(spec)
    k = build_dipole_kernel(maps.chi.dims)
    (fe, sd), = run_ensemble(maps, k, EchoConfig(), 1, 16)
    save_volume(fe, out / "field.vol")
    save_volume(sd, out / "sd.vol")
    save_volume(maps.m0, out / "m0.vol")
    save_volume(maps.chi, out / "chi.vol")
    save_mask(maps.support, out / "support.vol")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--traces-only", action="store_true")
    args = ap.parse_args()
    FIXTURE.mkdir(parents=True, exist_ok=True)
    if not args.traces_only:
        make_volumes(FIXTURE)
    with tempfile.TemporaryDirectory() as tmp:
        medi, vi = run_golden(tmp)
        shutil.copy(medi, FIXTURE / "medi_trace.csv")
        shutil.copy(vi, FIXTURE / "vi_trace.csv")
    print(f"wrote {FIXTURE}")


if __name__ == "__main__":
    main()
