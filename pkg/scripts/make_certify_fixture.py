"""Regenerate the bundled certification fixture.

Draws seeded 2-3-2 networks (6 certified weights) with standard-normal
weights and biases until one has a certified budget of at least 1 at
p1 = 0.8, p2 = 0 for a fixed input, then writes it next to the package.

    python scripts/make_certify_fixture.py
"""

from pathlib import Path

import numpy as np

from memrobust import certify, neural
from memrobust.fileio import write_json

P1, P2 = 0.8, 0.0
X = [0.5, -0.25]
OUT = Path(__file__).resolve().parents[1] / "src" / "memrobust" / "data" / "certify_fixture.json"


def main():
    for seed in range(1000):
        rng = np.random.default_rng([2024, seed])
        net = neural.DenseNetwork.init([2, 3, 2], seed=rng, noise=(P1, P2))
        for layer in net.layers:
            layer.weights = rng.normal(size=layer.weights.shape)
            layer.bias = rng.normal(size=layer.bias.shape)
        cert = certify.certify_network(net, X, P1, P2)
        if cert.certified and cert.radius >= 1.0:
            report = certify.verify_certificate(net, X, P1, P2)
            if report.ok:
                write_json(OUT, {"model": net.to_dict(), "input": X, "p1": P1, "p2": P2,
                                 "generator_seed": seed})
                print(f"seed {seed}: f_pi0={cert.f_pi0:.6f} radius={cert.radius:.4f} -> {OUT}")
                return
    raise SystemExit("no certifiable network found")


if __name__ == "__main__":
    main()
