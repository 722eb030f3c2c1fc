"""Shared cache of desk-scale training runs for the acceptance suite.

Checkpoints live in tests/artifacts and are keyed by (lambda, seed); a
missing checkpoint is trained on demand.  Running this module directly
pre-builds every run the acceptance tests need.
"""
import os

ARTIFACT_DIR = os.path.join(os.path.dirname(__file__), "artifacts")

# (lambda, seed) pairs used by the frontier acceptance checks
ACCEPTANCE_RUNS = [(0.0, 1), (0.0, 2), (0.0, 3), (1.0, 1), (1.0, 2), (1.0, 3),
                   (0.3, 1), (0.5, 1), (0.8, 1)]


def checkpoint_path(lam: float, seed: int) -> str:
    return os.path.join(ARTIFACT_DIR, f"desk_s{seed}_l{lam:g}.ckpt")


def ensure_checkpoint(lam: float, seed: int) -> str:
    from matchfrontier.train import desk_config, train

    path = checkpoint_path(lam, seed)
    if os.path.exists(path):
        return path
    os.makedirs(ARTIFACT_DIR, exist_ok=True)
    tmp = path + ".partial"
    config = desk_config(lam, seed=seed, checkpoint_path=tmp,
                         log_path=path + ".log")
    train(config)
    os.replace(tmp, path)
    return path


if __name__ == "__main__":
    for lam, seed in ACCEPTANCE_RUNS:
        print(f"lambda={lam} seed={seed}", flush=True)
        ensure_checkpoint(lam, seed)
    print("all checkpoints ready")
