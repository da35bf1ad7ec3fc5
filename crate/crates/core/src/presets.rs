//! Built-in scenarios, feeders and partitions, embedded at compile time.

macro_rules! embed {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../presets/", $name)))),*]
    };
}

/// `(file name, contents)` for every embedded file.
static FILES: &[(&str, &str)] = embed![
    "5bus.feeder.toml",
    "5bus-1ca.partition.toml",
    "5bus-2ca.partition.toml",
    "5bus-step-1ca.toml",
    "5bus-step-2ca.toml",
    "5bus-step-2ca-lpfpid.toml",
    "5bus-tightened-limits.toml",
    "synthetic6.feeder.toml",
    "synthetic6.partition.toml",
    "synthetic-ramp-multiarea.toml",
];

/// `(preset name, one-line description)`.
static SCENARIOS: &[(&str, &str)] = &[
    ("5bus-step-1ca", "5-bus feeder, one area, 200 kW step and 100 kW load disturbance"),
    ("5bus-step-2ca", "5-bus feeder, two areas, same schedule"),
    ("5bus-step-2ca-lpfpid", "5-bus feeder, two areas with VDER filtering and PID duals"),
    ("5bus-tightened-limits", "5-bus feeder, two areas, tightened voltage and current limits"),
    ("synthetic-ramp-multiarea", "66-bus synthetic feeder, six areas, 20 kW/s stepped ramp"),
];

pub fn file(name: &str) -> Option<&'static str> {
    FILES.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// The embedded scenario file for a preset name, if any.
pub fn scenario_file_name(name: &str) -> Option<String> {
    SCENARIOS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(n, _)| format!("{n}.toml"))
}

pub fn list() -> &'static [(&'static str, &'static str)] {
    SCENARIOS
}

/// Names of every embedded file, for exporting presets to disk.
pub fn files() -> impl Iterator<Item = (&'static str, &'static str)> {
    FILES.iter().copied()
}
