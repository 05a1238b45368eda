"""Run one of the ablation studies (components, propagation or fusion) at a
small step budget and print the result table with paired p-values.

    python demos/ablation_study.py --study propagation --steps 100
"""

import argparse

from cinerecon.ablation import STUDIES, run_matrix
from cinerecon.config import toy_config


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--study", choices=sorted(STUDIES), default="components")
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--out", default="runs/demo_ablation")
    args = ap.parse_args(argv)

    base = toy_config(**{"data.synthetic_size": 32, "data.synthetic_frames": 6,
                         "data.synthetic_subjects": [6, 2, 4], "train.max_steps": args.steps,
                         "train.epoch_repeats": 2})
    matrix = STUDIES[args.study](base, accelerations=(4.0,))
    result = run_matrix(matrix, out_root=args.out)
    print(result.format_table())


if __name__ == "__main__":
    main()
