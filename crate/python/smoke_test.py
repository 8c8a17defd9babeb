"""Smoke test of the `discgen` Python extension.

Build the extension first (`cargo build -p discgen-py --release`), then run
`python3 python/smoke_test.py`. The script copies the built library next to a
temporary `discgen.so` so no install step is needed. Set DISCGEN_PY_LIB to
point at a specific build.
"""

import math
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent

CONFIG = """
seed = 1

[dataset]
canvas = 16
train_size = 128
valid_size = 64
test_size = 64

[arch]
image = [1, 16, 16]
latent_dim = 4
base_filters = 4
stages = 2
classifier_hidden = 16

[classifier]
epochs = 2
batch_size = 32

[train]
epochs = 2
batch_size = 32

[blur]
examples = 20
steps = 10
code_dim = 8
"""


def find_library():
    if "DISCGEN_PY_LIB" in os.environ:
        return Path(os.environ["DISCGEN_PY_LIB"])
    target = Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target"))
    for profile in ("release", "debug"):
        lib = target / profile / "libdiscgen_py.so"
        if lib.exists():
            return lib
    sys.exit("libdiscgen_py.so not found; run `cargo build -p discgen-py --release`")


def main():
    work = Path(tempfile.mkdtemp())
    shutil.copy(find_library(), work / "discgen.so")
    sys.path.insert(0, str(work))
    import discgen

    assert discgen.kl_to_standard_normal([0.0], [0.0]) == 0.0
    assert abs(discgen.kl_to_standard_normal([1.0], [0.0]) - 0.5) < 1e-12

    m = discgen.Model(CONFIG)
    assert m.image_shape == [1, 16, 16] and m.latent_dim == 4
    x, shape, labels, label_shape = m.dataset("test")
    assert shape == [64, 1, 16, 16] and label_shape == [64, 5]
    assert all(-1.0 <= v <= 1.0 for v in x)

    acc = m.train_classifier()
    assert 0.0 <= acc <= 1.0
    totals = m.train_vae()
    assert len(totals) == 2 and all(math.isfinite(t) for t in totals)

    batch = x[: 8 * 256]
    terms = m.objective(batch, [8, 1, 16, 16])
    assert len(terms["l_d"]) == 3
    assert abs(terms["total"] - (terms["l_z"] + terms["l_x"] + sum(terms["l_d"]))) < 1e-3 * abs(terms["total"])
    plain = m.objective(batch, [8, 1, 16, 16], lam=[])
    assert plain["l_d"] == [] and plain["l_z"] == terms["l_z"]

    (mu, mu_shape), _ = m.encode(batch, [8, 1, 16, 16])
    assert mu_shape == [8, 4]
    recon, r_shape = m.reconstruct(batch, [8, 1, 16, 16])
    decoded, _ = m.decode(mu, mu_shape)
    assert decoded == recon and r_shape == [8, 1, 16, 16]
    frames, f_shape = m.interpolate(x[:256], x[256:512], 5)
    assert f_shape == [5, 1, 16, 16]
    assert frames[:256] == recon[:256] and frames[-256:] == recon[256:512]
    (z, _), (samples, s_shape) = m.sample(4, seed=3)
    assert s_shape == [4, 1, 16, 16] and m.sample(4, seed=3)[0][0] == z

    per_unit, se, est = m.estimate_nll(batch, [8, 1, 16, 16], k=5)
    assert len(est) == 8 and se >= 0.0
    assert abs(per_unit * 256 - sum(est) / 8) < 1e-9 * abs(per_unit * 256)

    metrics = m.reconstruction_metrics(batch, recon, [8, 1, 16, 16])
    assert len(metrics["feature_distance"]) == 3

    table = m.blur_experiment(sigma=0.0)
    for line in table.splitlines()[1:]:
        name, control, blurred = line.split("\t")
        assert control == blurred, line

    ckpt = work / "model.ckpt"
    m.save(str(ckpt))
    other = discgen.Model(CONFIG, seed=7)
    other.load(str(ckpt))
    assert other.reconstruct(batch, [8, 1, 16, 16])[0] == recon

    discgen.write_image_grid(samples, s_shape, 2, 2, str(work / "grid.ppm"))
    assert (work / "grid.ppm").read_bytes().startswith(b"P6\n32 32\n255\n")

    rows = discgen.gradcheck(instances=2, coordinates=4, seed=1)
    assert len(rows) == 31 and all(err <= 1e-3 for _, _, err in rows)

    try:
        m.load(str(work / "missing.ckpt"))
    except ValueError as e:
        assert str(e).startswith("error: kind=io"), e
    else:
        raise AssertionError("missing checkpoint accepted")
    try:
        discgen.Model("[train]\nepochz = 1\n")
    except ValueError as e:
        assert "kind=config" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    shutil.rmtree(work)
    print("python smoke test passed")


if __name__ == "__main__":
    main()
