"""Write an episode dataset as NDJSON, e.g. to inspect it or to share it.

    python3 scripts/export_dataset.py pendulum data/pendulum.ndjson --episodes 20 --seed 0
"""

import argparse

import numpy as np

from gpld_lab import envs


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("env", choices=sorted(envs.ENVS))
    p.add_argument("out")
    p.add_argument("--policy", default="scripted-sinusoid", choices=["scripted-sinusoid", "uniform-random"])
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--length", type=int, default=100)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--mix-random", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    data = envs.collect_episodes(
        a.env, a.policy, a.episodes, a.length, np.random.default_rng(a.seed), a.noise, a.mix_random
    )
    envs.save_dataset(data, a.out)
    back = envs.load_dataset(a.out)
    print(f"wrote {back.n_episodes} episodes x {back.episode_len} steps of {back.env} to {a.out}")


if __name__ == "__main__":
    main()
