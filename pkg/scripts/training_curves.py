"""Track reward terms and probe accuracy over training on one synthetic plan.

Every --every rounds a fresh probe is fit on source features and scored on
the held-out group, so one can see whether target accuracy moves with J.

    python3 scripts/training_curves.py --plan ABC->D --rounds 100 --every 20
"""
import argparse
import time

import numpy as np

from tprl import data as D
from tprl import evaluation as E
from tprl import model as M
from tprl import ppo as P
from tprl.numkit import make_rng


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--plan", default="ABC->D")
    ap.add_argument("--rounds", type=int, default=100)
    ap.add_argument("--every", type=int, default=20)
    ap.add_argument("--w-inv", type=float, default=0.5)
    ap.add_argument("--lr", type=float, default=P.PpoConfig.learning_rate)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    spec = D.SynthSpec()
    ws = D.prepare_windows(D.synth_generate(spec))
    plans = {p.name: p for p in D.build_logo_splits({chr(65 + i): [i + 1] for i in range(spec.num_users)})}
    plan = plans[args.plan]
    source, target = ws.users(plan.source_users), ws.users(plan.target_users)
    cfg = P.PpoConfig(rounds=args.rounds, w_inv=args.w_inv, learning_rate=args.lr, seed=args.seed)
    rng = make_rng(args.seed)
    net = M.init_policy(M.ModelConfig(l=ws.x.shape[1], d=ws.x.shape[2]), rng)

    def score(net):
        res, _ = E.evaluate_policy(net, source, target, 1e-2, plan.name, "", args.seed)
        return res

    res = score(net)
    print(f"round    0: target acc {res.accuracy:.3f}  train acc {res.train_accuracy:.3f}")
    window = []
    t0 = time.perf_counter()

    def on_round(rnd, net, row):
        window.append((row["j"], row["r_cls"], row["r_inv"]))
        if (rnd + 1) % args.every == 0:
            j, rc, ri = np.mean(window, axis=0)
            window.clear()
            res = score(net)
            print(f"round {rnd + 1:4d}: target acc {res.accuracy:.3f}  train acc {res.train_accuracy:.3f}  "
                  f"J {j:8.2f}  R_cls {rc:7.2f}  R_inv {ri:8.2f}  ({time.perf_counter() - t0:.0f} s)",
                  flush=True)

    P.train(net, source, cfg, rng, on_round=on_round)


if __name__ == "__main__":
    main()
