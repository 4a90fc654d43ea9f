//! The four preset stories, shipped as StoryConfig JSON.

use crate::model::{validate_story, StoryConfig, Violation};

pub const PRESETS: [&str; 4] = ["inheritance", "lawcourt", "philosophy", "casting"];

#[derive(Debug, thiserror::Error)]
pub enum StoryError {
    #[error("unknown preset `{0}` (expected one of: inheritance, lawcourt, philosophy, casting)")]
    UnknownPreset(String),
    #[error("malformed story: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid story: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("cannot read story: {0}")]
    Io(#[from] std::io::Error),
}

fn preset_text(name: &str) -> Option<&'static str> {
    Some(match name {
        "inheritance" => include_str!("../../stories/inheritance.json"),
        "lawcourt" => include_str!("../../stories/lawcourt.json"),
        "philosophy" => include_str!("../../stories/philosophy.json"),
        "casting" => include_str!("../../stories/casting.json"),
        _ => return None,
    })
}

/// Loads and validates a preset by name.
pub fn load_preset(name: &str) -> Result<StoryConfig, StoryError> {
    let text = preset_text(name).ok_or_else(|| StoryError::UnknownPreset(name.to_string()))?;
    parse_story(text)
}

pub fn parse_story(text: &str) -> Result<StoryConfig, StoryError> {
    let story = StoryConfig::from_json(text)?;
    validate_story(&story).map_err(StoryError::Invalid)?;
    Ok(story)
}

/// A preset name, or a path to a StoryConfig JSON file.
pub fn load_story(name_or_path: &str) -> Result<StoryConfig, StoryError> {
    if preset_text(name_or_path).is_some() {
        return load_preset(name_or_path);
    }
    let path = std::path::Path::new(name_or_path);
    if path.exists() {
        return parse_story(&std::fs::read_to_string(path)?);
    }
    Err(StoryError::UnknownPreset(name_or_path.to_string()))
}
