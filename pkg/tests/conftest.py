"""Shared fixtures; the expensive reference training run happens once per session."""

import time

import pytest

from signforge.dataset import generate_synthetic, ingest_directory, split_train_val
from signforge.models import build_asl_cnn, save_weights
from signforge.trainer import TrainConfig, train


@pytest.fixture(scope="session")
def acceptance_run(tmp_path_factory):
    """The reference experiment: synthetic corpus, 90/10 split, 20-epoch training.

    Training the 355k-parameter net on 5220 images takes on the order of ten
    minutes on a laptop CPU; every test needing a trained model shares this
    one run.
    """
    root = tmp_path_factory.mktemp("acceptance")
    data_root = root / "data"
    generate_synthetic(data_root, per_class=200, seed=42)
    dataset = ingest_directory(data_root)
    train_set, val_set = split_train_val(dataset, 0.1, seed=42)
    model = build_asl_cnn(seed=42)
    config = TrainConfig(seed=42)  # batch 128, lr 1e-4, 20 epochs
    started = time.time()
    history = train(model, train_set, val_set, config,
                    metrics_path=str(root / "metrics.jsonl"), quiet=True)
    elapsed = time.time() - started
    weights = root / "asl_cnn.slwt"
    save_weights(model, weights)
    return {
        "model": model,
        "history": history,
        "weights": weights,
        "train_set": train_set,
        "val_set": val_set,
        "data_root": data_root,
        "train_seconds": elapsed,
    }
