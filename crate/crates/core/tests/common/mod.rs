#![allow(dead_code)]

use maskarch::config::ExperimentConfig;

/// A DARTS-space experiment small enough for a unit-test budget.
pub fn tiny_darts() -> ExperimentConfig {
    ExperimentConfig::from_json(
        r#"{
            "data": {"dataset": "synthetic", "search_images": 16, "train_images": 32,
                     "test_images": 16, "synthetic_size": 16},
            "supernet": {"init_channels": 4},
            "decoder": {"embed_width": 8},
            "search": {"epochs": 2, "batch_size": 4},
            "retrain": {"layers": 5, "init_channels": 4, "epochs": 1, "batch_size": 8}
        }"#,
    )
    .unwrap()
}

/// Dense-cell micro space experiment.
pub fn tiny_dense() -> ExperimentConfig {
    ExperimentConfig::from_json(
        r#"{
            "data": {"dataset": "synthetic", "search_images": 16, "train_images": 32,
                     "test_images": 16, "synthetic_size": 16},
            "supernet": {"topology": "bench201", "num_nodes": 3, "init_channels": 4,
                         "op_set": ["skip_connect", "conv_3x3", "avg_pool_3x3"]},
            "decoder": {"embed_width": 8},
            "search": {"epochs": 1, "batch_size": 4},
            "retrain": {"layers": 5, "init_channels": 4, "epochs": 1, "batch_size": 8},
            "analysis": {"sample_n": 3, "score_images": 8, "score_batch_size": 4, "permutations": 99}
        }"#,
    )
    .unwrap()
}
