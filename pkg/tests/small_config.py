"""A pipeline configuration small enough to run end to end in seconds."""

SMALL = {
    "n_train": 16, "n_val": 6, "n_calib": 12, "n_test": 16,
    "slice_size": 32, "n_slices": 4, "ensemble_size": 2, "n_bootstrap": 40,
    "train": {"epochs": 2, "batch_size": 16},
}
