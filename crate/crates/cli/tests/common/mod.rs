#![allow(dead_code)]

use std::path::Path;

use robustnet::config::ExperimentConfig;

/// Small synthetic experiment that trains in well under a second per seed.
pub fn tiny_config(out: &Path, seeds: &[u64], epochs: usize) -> ExperimentConfig {
    let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
    let text = format!(
        r#"
schema_version = 1
name = "tiny"
output_dir = "{out}"
seeds = [{seeds}]
eval_batch_size = 64

[model]
kind = "stages"
block = "robust"
depths = [1, 1, 1]
widths = [1, 1, 1]

[dataset]
kind = "synthetic"
classes = 2
resolution = 8
n_train = 96
n_test = 48

[recipe]
regime = "baseline"
loss = "trades"
epochs = {epochs}
batch_size = 32
lr_initial = 0.1
lr_schedule = [2]
momentum = 0.9
nesterov = false
weight_decay = 0.0005
exclude_norm_affine_from_decay = false
ema_decay = 0.9

[recipe.inner]
family = "pgd"
epsilon = 0.0313725
alpha = 0.00784
steps = 2
random_start = true

[[attacks]]
family = "fgsm"
epsilon = 0.0313725
alpha = 0.0313725
steps = 1
random_start = false

[[attacks]]
family = "pgd"
epsilon = 0.0313725
alpha = 0.00784
steps = 5
random_start = true
"#,
        out = out.display(),
        seeds = seeds.join(", "),
    );
    ExperimentConfig::from_toml(&text).unwrap()
}
