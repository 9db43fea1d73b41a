"""Smoke test for the numvae_py extension.

Build and install first:
    pip install --no-build-isolation ./crates/py   (or: maturin develop -m crates/py/Cargo.toml)
"""

import math
import random
import sys
import tempfile
from pathlib import Path

import numvae_py as nv


def check_kl():
    assert nv.kl_divergence([0.0, 0.0], [1.0, 1.0]) == 0.0
    mu, sigma = [0.5, -1.0], [0.8, 1.3]
    want = 0.5 * sum(m * m + s * s - math.log(s * s) - 1 for m, s in zip(mu, sigma))
    assert abs(nv.kl_divergence(mu, sigma) - want) < 1e-12
    try:
        nv.kl_divergence([0.0], [0.0])
    except ValueError:
        pass
    else:
        raise AssertionError("sigma=0 accepted")


def check_scene():
    for n in range(5):
        s = nv.synthesize_scene(n, seed=17 + n)
        assert s.numerosity == n
        assert len(s.image) == s.height * s.width * 3
        assert len(s.boxes) == n
        fg = sum(1 for v in s.labels if v)
        assert fg == s.cumulative_area
        if n == 0:
            assert s.cumulative_area == 0
    a = nv.synthesize_scene(3, seed=5)
    b = nv.synthesize_scene(3, seed=5)
    assert a.image == b.image


def check_probe():
    rng = random.Random(0)
    latents, counts, areas = [], [], []
    for _ in range(400):
        n = rng.randint(1, 4)
        a = n * rng.uniform(50, 150)
        latents.append([math.log(n) + rng.gauss(0, 0.05), rng.gauss(0, 1)])
        counts.append(n)
        areas.append(a)
    fits = nv.probe_dimensions(latents, counts, areas)
    assert fits[0].class_ == "numerosity", fits[0]
    assert fits[0].r_squared > 0.9
    assert fits[1].r_squared < 0.05


def check_ap():
    assert nv.average_precision([0.9, 0.8, 0.1], [True, True, False]) == 1.0
    assert nv.average_precision([0.1, 0.2], [False, False]) is None


def check_gen_data():
    with tempfile.TemporaryDirectory() as d:
        n = nv.gen_data(d, preset="desk", count=12, master_seed=3)
        assert n == 12
        lines = (Path(d) / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 13


def main():
    for check in (check_kl, check_scene, check_probe, check_ap, check_gen_data):
        check()
        print(f"ok  {check.__name__}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
