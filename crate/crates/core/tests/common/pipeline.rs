//! A pipeline configuration small enough to run every stage in seconds.

use pathosynth::experiment::ExperimentConfig;

pub const TINY_TOML: &str = r#"
seed = 3

[data]
n_healthy = 2
n_pathological = 4
test_fraction = 0.5

[phantom]
shape = [32, 32, 16]

[patch]
patch_shape = [32, 32, 16]

[synthesis]
batch_size = 1

[synthesis.generator]
base_channels = 2
num_resblocks = 1

[synthesis.critic]
base_channels = 2

[synthesis.weights]
critic_steps_per_gen_step = 1

[synthesis_training]
steps = 2

[classifier]
patch_radius = 4
channels = [2, 4, 4, 4]
steps = 4
batch_size = 4

[evaluation.bootstrap]
n_boot = 20
"#;

pub fn tiny_config() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(TINY_TOML).unwrap()
}
