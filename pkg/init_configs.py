"""
Experiment File Initialization Script for the EP State Evolution Toolkit
Writes ready-to-run experiment files, one per subcommand, into configs/
"""

import os
import sys

# Add the parent directory to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import load_experiment_config
from validation import ConfigError

SAMPLE_CONFIGS = {
    'acceptance.env': """\
# SE agreement at full size: row-orthogonal Haar, Bernoulli-Gaussian prior
n=2048
delta=0.5
ensemble.kind=row-orthogonal
prior.kind=bg
prior.p=0.1
sigma2=0.01
t_max=10
trials=20
seed=0
checks=se-agreement,orthogonality,variance-bookkeeping,module-a-mse
""",
    'smoke.env': """\
# Seconds-long run for trying the CLI
n=64
delta=0.5
ensemble.kind=row-orthogonal
prior.kind=bg
prior.p=0.1
sigma2=0.01
t_max=5
trials=2
checks=variance-bookkeeping
""",
    'geometric.env': """\
# Ill-conditioned spectrum with history-based checks
n=512
delta=0.5
ensemble.kind=geometric
ensemble.kappa=16
prior.kind=qpsk
sigma2=0.01
t_max=8
trials=20
checks=se-agreement,orthogonality,gram,gaussianity,fourth-moment
""",
    'threshold.env': """\
# Fixed-point count along the compression rate
ensemble.kind=iid-gaussian
prior.kind=bg
prior.p=0.1
sigma2=0.0001
scan.delta_min=0.1
scan.delta_max=0.6
scan.points=26
""",
    'verify.env': """\
# Haar, conditioning and denoiser verification suites
delta=0.5
ensemble.kind=row-orthogonal
prior.kind=bg
prior.p=0.1
sigma2=0.01
haar.sizes=4,8
haar.samples=100000
clt.n=256
clt.k=3
clt.repeats=2000
conditioning.n=64
conditioning.t=3
denoiser.samples=1000000
denoiser.variances=0.05,0.5
""",
}


def init_configs(directory='configs', overwrite=False):
    """Write every sample file and check that it parses."""
    print("=" * 60)
    print("EP State Evolution Toolkit - Experiment Files")
    print("=" * 60)

    os.makedirs(directory, exist_ok=True)
    for i, (name, text) in enumerate(sorted(SAMPLE_CONFIGS.items()), start=1):
        path = os.path.join(directory, name)
        print(f"\n[{i}/{len(SAMPLE_CONFIGS)}] {path}")
        if os.path.exists(path) and not overwrite:
            print("    exists, skipped (use --overwrite to replace)")
        else:
            with open(path, 'w') as f:
                f.write(text)
            print("    written")
        try:
            load_experiment_config(path)
            print("    parses cleanly")
        except ConfigError as e:
            print(f"    [!] invalid: {e}")

    print("\nRun an experiment:")
    print(f"    python app.py run --config {os.path.join(directory, 'smoke.env')}")


if __name__ == '__main__':
    import argparse

    parser = argparse.ArgumentParser(description='Write sample experiment files')
    parser.add_argument('--dir', default='configs', help='target directory')
    parser.add_argument('--overwrite', action='store_true', help='replace existing files')

    args = parser.parse_args()
    init_configs(args.dir, overwrite=args.overwrite)
