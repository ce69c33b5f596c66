"""Regenerate the shipped normalisation baseline for mCE and mFR.

A small MLP trained on the labeled split of the synthetic benchmark
(sample seed 1000, prototype seed 0) with standard augmentation. The
output is deterministic, so rerunning reproduces the shipped bytes.
"""
from pathlib import Path

from selftrain.config import NoiseConfig, TrainConfig
from selftrain.experiments import desk_config, load_data
from selftrain.nn.checkpoint import save_checkpoint
from selftrain.robust import BASELINE_ASSET, eval_topk
from selftrain.train import train_supervised

SEED = 1000

config = desk_config(SEED)
labeled, _, test = load_data(config.data, SEED)
train = TrainConfig(
    labeled_batch=25, epochs=120, base_lr=0.05, lr_reference_batch=25, seed=SEED,
    noise=NoiseConfig(augment_policy="standard", enable_sd=False, enable_dropout=False),
)
model = train_supervised(labeled, train, "mlp-S").model
out = Path(__file__).resolve().parents[1] / "src" / "selftrain" / "assets" / BASELINE_ASSET
digest = save_checkpoint(out, model, extra={"purpose": "robustness baseline", "sample_seed": SEED, "train": train.model_dump(mode="json")})
print(f"{out.name}: top1={eval_topk(model, test):.4f} sha256={digest}")
