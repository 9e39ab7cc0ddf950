"""Compare backprop against central differences on the tiny 64-bit model.

Prints the worst relative error per parameter tensor for one seed, then the
overall maximum for both decoder modes.
"""

import argparse

from c2fmae.gradcheck import model_gradient_error


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--max-coords", type=int, default=None)
    args = ap.parse_args()

    report = {}
    err = model_gradient_error(args.seed, max_coords=args.max_coords, report=report)
    for name, e in sorted(report.items(), key=lambda kv: -kv[1])[:10]:
        print(f"  {name:32s} {e:.2e}")
    print(f"cascaded: max relative error {err:.2e}")
    err = model_gradient_error(args.seed, "parallel", max_coords=args.max_coords)
    print(f"parallel: max relative error {err:.2e}")


if __name__ == "__main__":
    main()
