//! Bundled experiment configs and the reference design they point to.

/// Preset names accepted as `preset:NAME`.
pub const CONFIG_NAMES: &[&str] = &[
    "poisson_product",
    "poisson_clayton_eps",
    "poisson_clayton_tenth",
    "poisson_clayton_third",
    "poisson_gumbel_eps",
    "poisson_gumbel_tenth",
    "poisson_gumbel_third",
    "materials_local_null",
    "materials_local_shifted",
    "materials_bayes_null",
    "materials_bayes_shifted",
    "poisson_scenarios",
];

const CONFIGS: &[(&str, &str)] = &[
    ("poisson_product", include_str!("../../presets/poisson_product.cfg")),
    ("poisson_clayton_eps", include_str!("../../presets/poisson_clayton_eps.cfg")),
    ("poisson_clayton_tenth", include_str!("../../presets/poisson_clayton_tenth.cfg")),
    ("poisson_clayton_third", include_str!("../../presets/poisson_clayton_third.cfg")),
    ("poisson_gumbel_eps", include_str!("../../presets/poisson_gumbel_eps.cfg")),
    ("poisson_gumbel_tenth", include_str!("../../presets/poisson_gumbel_tenth.cfg")),
    ("poisson_gumbel_third", include_str!("../../presets/poisson_gumbel_third.cfg")),
    ("materials_local_null", include_str!("../../presets/materials_local_null.cfg")),
    ("materials_local_shifted", include_str!("../../presets/materials_local_shifted.cfg")),
    ("materials_bayes_null", include_str!("../../presets/materials_bayes_null.cfg")),
    ("materials_bayes_shifted", include_str!("../../presets/materials_bayes_shifted.cfg")),
    ("poisson_scenarios", include_str!("../../presets/poisson_scenarios.cfg")),
];

const FILES: &[(&str, &str)] = &[("gee_design.csv", include_str!("../../presets/gee_design.csv"))];

pub fn config(name: &str) -> Option<&'static str> {
    CONFIGS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Any bundled file: configs by name (with or without `.cfg`) and data files.
pub fn get(name: &str) -> Option<&'static str> {
    config(name.strip_suffix(".cfg").unwrap_or(name)).or_else(|| FILES.iter().find(|(n, _)| *n == name).map(|(_, t)| *t))
}
