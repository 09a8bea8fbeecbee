#!/usr/bin/env python3
"""Time the encoder stack (linear in the variable count) and the decoder
stack (quadratic) across variable counts and fit log-log growth exponents.

Example:
    python3 scripts/run_scaling_check.py --c-values 64,128,256,512 --reps 15
"""

import argparse
import sys

from invdec.experiments import emit_plot_data, emit_report, run_scaling_check


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--c-values", default="64,128,256,512")
    ap.add_argument("--d-model", type=int, default=12)
    ap.add_argument("--n-patches", type=int, default=8)
    ap.add_argument("--reps", type=int, default=15)
    ap.add_argument("--batch", type=int, default=8,
                    help="independent forwards per timed call")
    ap.add_argument("--out", default="scaling.csv")
    ap.add_argument("--plot-prefix", help="write <prefix>_{encoder,decoder}.xy series")
    args = ap.parse_args(argv)

    report = run_scaling_check(
        [int(c) for c in args.c_values.split(",")],
        d_model=args.d_model,
        n_patches=args.n_patches,
        reps=args.reps,
        batch=args.batch,
    )
    emit_report(report.rows(), args.out, "csv")
    for row in report.rows():
        print(f"C={row['n_vars']:>4}: encoder {row['encoder_s'] * 1e3:8.3f} ms   "
              f"decoder {row['decoder_s'] * 1e3:8.3f} ms")
    print(f"encoder slope {report.encoder_slope:.2f} (linear attention over patches)")
    print(f"decoder slope {report.decoder_slope:.2f} (attention across variables)")
    if args.plot_prefix:
        emit_plot_data(report.c_values, report.encoder_seconds,
                       f"{args.plot_prefix}_encoder.xy")
        emit_plot_data(report.c_values, report.decoder_seconds,
                       f"{args.plot_prefix}_decoder.xy")
    print(f"wrote {len(report.c_values)} rows to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
