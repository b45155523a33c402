//! Built-in systems, models and experiments, addressable as `builtin:<name>`.

const SYSTEMS: &[(&str, &str)] = &[
    ("sec5_system", include_str!("../fixtures/sec5_system.json")),
    ("sec6_system", include_str!("../fixtures/sec6_system.json")),
];

const MODELS: &[(&str, &str)] = &[
    ("sec5_2_model", include_str!("../fixtures/sec5_2_model.json")),
    ("sec5_3a_model", include_str!("../fixtures/sec5_3a_model.json")),
    ("sec5_3b_model", include_str!("../fixtures/sec5_3b_model.json")),
    ("sec6_2_model", include_str!("../fixtures/sec6_2_model.json")),
    ("sec6_3_model", include_str!("../fixtures/sec6_3_model.json")),
];

const EXPERIMENTS: &[(&str, &str)] = &[
    ("sec5_experiment", include_str!("../fixtures/sec5_experiment.json")),
    ("sec5_ergodic_experiment", include_str!("../fixtures/sec5_ergodic_experiment.json")),
    ("sec6_experiment", include_str!("../fixtures/sec6_experiment.json")),
];

pub const PREFIX: &str = "builtin:";

fn lookup(table: &[(&str, &'static str)], name: &str) -> Option<&'static str> {
    table.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

/// JSON text of any built-in fixture by bare name (without the prefix).
pub fn builtin(name: &str) -> Option<&'static str> {
    lookup(SYSTEMS, name).or_else(|| lookup(MODELS, name)).or_else(|| lookup(EXPERIMENTS, name))
}

pub fn names() -> Vec<&'static str> {
    SYSTEMS.iter().chain(MODELS).chain(EXPERIMENTS).map(|(n, _)| *n).collect()
}
