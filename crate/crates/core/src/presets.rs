//! Spec files shipped with the library.

use crate::specparse::{parse_system, SpecError, SystemSpec};

pub const NAMES: [&str; 4] = ["goodwin", "othmer_tyson", "competitive", "ex5_5"];

pub fn text(name: &str) -> Option<&'static str> {
    match name {
        "goodwin" => Some(include_str!("../presets/goodwin.spec")),
        "othmer_tyson" => Some(include_str!("../presets/othmer_tyson.spec")),
        "competitive" => Some(include_str!("../presets/competitive.spec")),
        "ex5_5" => Some(include_str!("../presets/ex5_5.spec")),
        _ => None,
    }
}

pub fn load(name: &str) -> Result<SystemSpec, SpecError> {
    let t = text(name).ok_or_else(|| SpecError::Invalid(format!("unknown preset `{name}`")))?;
    parse_system(t)
}
