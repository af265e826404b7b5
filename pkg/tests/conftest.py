import pytest

# a configuration small enough that every stage runs in a few seconds
SMALL = [
    "n_points=64", "pretrain_per_kind=1", "cls_train=12", "cls_test=6",
    "seg_train_per_kind=2", "seg_test_per_kind=1", "patches_m=6", "patch_k=6", "knn_k=4",
    "e1_widths=8,8", "e1_out=6", "e2_widths=8,8", "e2_out=8",
    "sim_epochs=2", "sim_batch=2", "con_epochs=3", "con_batch=2",
    "warmup_epochs=1", "interval_epochs=1", "probe_epochs=30",
    "noise_levels=0,0.05", "density_levels=64,32",
]


@pytest.fixture
def small():
    return list(SMALL)
