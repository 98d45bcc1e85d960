#![allow(dead_code)]

use hypca_harness::{ExperimentConfig, SynthSpec};

/// A configuration small enough to train in about a second.
pub fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.model.channels = 8;
    c.model.blocks = 1;
    c.model.window_sizes = [2, 4];
    c.data = SynthSpec {
        samples: 80,
        image_size: 16,
        ..SynthSpec::default()
    };
    c.train.epochs = 2;
    c.train.batch_size = 16;
    c.train.eval_batch_size = 16;
    c
}
