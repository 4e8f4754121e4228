"""Two quick numbers worth seeing by hand.

First the per-layer parameter ledger of the reference network at 128x128,
then Cohen's kappa for a balanced 3-class matrix at 98.4% accuracy, where
kappa = (acc - 1/3) / (2/3).

    python3 demos/ledger_and_kappa.py
"""

import numpy as np

from ctnet import SeededRng, build_network, param_count, reference_spec
from ctnet.metrics import ConfusionMatrix, classification_report


def ledger():
    net = build_network(reference_spec(), SeededRng(0), batchnorm_rule=True)
    print(f"{'layer':<24}{'trainable':>10}{'frozen':>8}")
    for i, layer in enumerate(net.layers):
        t = sum(a.size for a in layer.params.values())
        f = sum(a.size for a in layer.buffers.values())
        if t or f:
            print(f"{i:02d} {layer.kind:<21}{t:>10}{f:>8}")
    total, trainable, frozen = param_count(net)
    print(f"{'total':<24}{trainable:>10}{frozen:>8}   ({total} overall)")


def kappa_at_984():
    n, wrong = 2500, 40
    counts = np.full((3, 3), wrong // 2)
    np.fill_diagonal(counts, n - wrong)
    report = classification_report(ConfusionMatrix(counts, ("Normal", "Pneumonia", "COVID-19")))
    print()
    print(report.to_text())


if __name__ == "__main__":
    ledger()
    kappa_at_984()
