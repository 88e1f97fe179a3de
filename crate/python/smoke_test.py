"""Smoke test for the `duvio` extension module.

Builds the module with cargo unless DUVIO_LIB points at a built library,
then exercises the exported types and functions.

    python3 python/smoke_test.py
"""

import importlib.util
import math
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def build():
    lib = os.environ.get("DUVIO_LIB")
    if lib:
        return lib
    subprocess.run(
        ["cargo", "build", "--release", "-p", "duvio-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    target = os.environ.get("CARGO_TARGET_DIR", os.path.join(ROOT, "target"))
    for name in ("libduvio.so", "libduvio.dylib", "duvio.dll"):
        path = os.path.join(target, "release", name)
        if os.path.exists(path):
            return path
    sys.exit("built library not found under " + target)


def load(lib):
    tmp = tempfile.mkdtemp()
    dest = os.path.join(tmp, "duvio.so")
    shutil.copy(lib, dest)
    spec = importlib.util.spec_from_file_location("duvio", dest)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    duvio = load(build())
    print("duvio", duvio.__version__)

    seq = duvio.Sequence.synthesize("duration = 0.5\nwidth = 32\nheight = 16\n")
    assert len(seq) == 11, len(seq)
    w, h, px = seq.frame(0)
    assert (w, h) == (32, 16) and len(px) == w * h

    turbid = seq.disturb("turbid")
    assert turbid.scenario == "turbid"
    m = duvio.image_metrics(w, h, px, turbid.frame(0)[2])
    assert 0.0 < m["psnr"] < 99.0 and abs(m["rmse"] - math.sqrt(m["mse"])) < 1e-12

    refs = seq.reference_deltas()
    assert len(refs) == len(seq) - 1
    assert duvio.compute_rmse(refs, refs) == (0.0, 0.0)
    v, _ = duvio.compute_rmse([[3, 0, 0, 0, 0, 0]], [[0, 0, 0, 0, 0, 0]])
    assert abs(v - math.sqrt(3.0)) < 1e-12

    square = [[1, 0, 0, 0, 0, math.pi / 2]] * 4
    poses = duvio.integrate_trajectory((0.0, [0, 0, 0], [1, 0, 0, 0]), square)
    assert max(abs(c) for c in poses[-1][1]) < 1e-9

    dehazer = duvio.Dehazer('{"base_channels": 8, "depth": 2}', 0)
    out = dehazer.dehaze(w, h, turbid.frame(0)[2])
    assert len(out) == w * h and all(0.0 <= p <= 1.0 for p in out)

    try:
        duvio.validate_config('scenario = "foggy"\nbogus = 1\n')
    except ValueError as e:
        assert "foggy" in str(e) and "bogus" in str(e)
    else:
        raise AssertionError("bad config accepted")

    hw = duvio.capture_hardware(lambda: None)
    assert hw["power"] == "unavailable" and hw["inference_time"] > 0
    hw = duvio.capture_hardware(lambda: None, power=47.41, gpu_util=4.0, memory=923.0, temperature=34.0)
    assert (hw["power"], hw["gpu_util"], hw["memory"], hw["temperature"]) == (47.41, 4.0, 923.0, 34.0)

    with tempfile.TemporaryDirectory() as d:
        seq.save(d)
        back = duvio.Sequence.load(d)
        assert back.frame(3) == seq.frame(3)

    print("smoke test passed")


if __name__ == "__main__":
    main()
