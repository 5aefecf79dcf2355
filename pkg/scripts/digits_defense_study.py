#!/usr/bin/env python3
"""Defense comparison on the rendered-digits image task.

Trains a conv net twice from the same initialization: once with plain
cross entropy, once with the combined defense loss. Reports clean and
PGD-robust accuracy, Davies-Bouldin separability of the embeddings,
margin statistics, and the certified distortion lower bound. Optionally
distills a label-query proxy and reports transfer-attack robustness.

The defaults take a few minutes. Example:

    python scripts/digits_defense_study.py --train 2000 --test 500 --epochs 24
"""

import argparse
import time

import numpy as np

from marginlab import (
    AttackConfig,
    DefenseLossConfig,
    DistillConfig,
    QueryOnlyModel,
    TrainConfig,
    blackbox_evaluate,
    conv_classifier,
    davies_bouldin,
    distill_proxy,
    embedding_jacobian_norms,
    embedding_margin,
    evaluate_attack,
    make_digits_dataset,
    mlp_classifier,
    train,
)


def parse_args():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--train", type=int, default=2000)
    parser.add_argument("--test", type=int, default=500)
    parser.add_argument("--noise", type=float, default=0.25)
    parser.add_argument("--epochs", type=int, default=24)
    parser.add_argument("--jacobian-weight", type=float, default=0.1)
    parser.add_argument("--epsilon", type=float, default=0.1)
    parser.add_argument("--seed", type=int, default=3)
    parser.add_argument("--workers", type=int, default=2)
    parser.add_argument("--distill", action="store_true",
                        help="also fit a label-query proxy and report transfer robustness")
    return parser.parse_args()


def fit(net0, dataset, loss, args):
    cfg = TrainConfig(epochs=args.epochs, batch_size=64, learning_rate=0.05,
                      weight_decay=5e-4, loss=loss, jacobian_samples=8,
                      seed=args.seed)
    start = time.time()
    net, _ = train(net0, dataset, cfg)
    return net, time.time() - start


def report(tag, net, x, y, args):
    clean = float(np.mean(net.predict(x) == y))
    attack = AttackConfig("pgd", args.epsilon, 10, seed=args.seed,
                          workers=args.workers)
    ev = evaluate_attack(net, x, y, attack)
    dbi = davies_bouldin(net.embed(x), y)
    rep = embedding_margin(net, x, y, cap=len(y), seed=args.seed)
    mean_j = float(np.mean(embedding_jacobian_norms(net, x[:200])))
    print(f"{tag:>9}  clean={clean:6.3f}  robust={ev.robust_accuracy:6.3f}  "
          f"dbi={dbi:6.3f}  margin={rep.margin:7.4f}  "
          f"bound={rep.distortion_lower_bound:7.4f}  meanJ={mean_j:7.3f}")
    return attack, ev


def main():
    args = parse_args()
    total = args.train + args.test
    data = make_digits_dataset(total, seed=args.seed, noise=args.noise)
    tr = data.take(args.train)
    te = data.take(args.test, offset=args.train)
    x, y = te.inputs.array, te.labels

    net0 = conv_classifier(num_classes=10, image_size=28, channels=(8, 16),
                           embedding_dim=32, seed=args.seed)

    ce_loss = DefenseLossConfig(siamese_weight=0.0, variance_weight=0.0,
                                jacobian_weight=0.0, smoothing=1.0)
    defended_loss = DefenseLossConfig(jacobian_weight=args.jacobian_weight)

    print(f"digits {args.train}/{args.test} noise={args.noise} "
          f"epochs={args.epochs} | pgd epsilon={args.epsilon}")

    ce_net, ce_time = fit(net0, tr, ce_loss, args)
    report("ce", ce_net, x, y, args)
    print(f"           trained in {ce_time:.0f}s")

    def_net, def_time = fit(net0, tr, defended_loss, args)
    attack, _ = report("defended", def_net, x, y, args)
    print(f"           trained in {def_time:.0f}s")

    if args.distill:
        target = QueryOnlyModel(def_net)
        proxy0 = mlp_classifier(num_classes=10, input_dim=x[0].size,
                                hidden=64, embedding_dim=16,
                                seed=args.seed + 1)
        probes = tr.inputs.array[:2000]
        proxy, queries = distill_proxy(target, proxy0, probes,
                                       DistillConfig(seed=args.seed))
        agreement = float(np.mean(proxy.predict(x) == def_net.predict(x)))
        bb = blackbox_evaluate(def_net, proxy, x, y, attack)
        print(f"  distill  queries={queries}  "
              f"gradient_queries={target.gradient_queries}  "
              f"agreement={agreement:6.3f}  "
              f"transfer_robust={bb.robust_accuracy:6.3f}")


if __name__ == "__main__":
    main()
