"""Cost of the two equivalent forms of linear attention as the sequence grows.

The attention form rereads every stored key at each step (quadratic in T);
the fast-weight form updates a d x d matrix (linear in T).

    python scripts/dual_form_cost.py --d 16
"""

import argparse

from fastweights import attention


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--d", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    print(f"{'T':>6} {'attn flops':>12} {'fwp flops':>12} {'max diff':>10}")
    for T in (1, 4, 16, 64, 256, 1024):
        A, Q, xs = attention.random_instance(args.seed, T, args.d)
        rep = attention.dual_form_check(A, Q, xs, 1e-10)
        print(f"{T:6d} {rep.flops_attn:12d} {rep.flops_fwp:12d} {rep.max_abs_diff:10.1e}")


if __name__ == "__main__":
    main()
