//! Fixed instruction templates.

use alloc::format;
use alloc::string::String;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, ModalityId, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTask {
    Caption,
    OpenQa,
    OptionQa,
    Region,
    Imu,
    Fmri,
}

impl PromptTask {
    pub const ALL: [PromptTask; 6] = [
        PromptTask::Caption,
        PromptTask::OpenQa,
        PromptTask::OptionQa,
        PromptTask::Region,
        PromptTask::Imu,
        PromptTask::Fmri,
    ];

    pub fn template(self) -> &'static str {
        match self {
            PromptTask::Caption => "Provide a one-sentence caption for the provided {modal}.",
            PromptTask::OpenQa => "{Question} Answer the question using a single word or phrase.",
            PromptTask::OptionQa => {
                "{Question} {Options} Answer with the option's letter from the given choices directly"
            }
            PromptTask::Region => "Provide a short description for this region.",
            PromptTask::Imu => "Describe the motion.",
            PromptTask::Fmri => "Describe this scene based on fMRI data.",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptTask::Caption => "caption",
            PromptTask::OpenQa => "open_qa",
            PromptTask::OptionQa => "option_qa",
            PromptTask::Region => "region",
            PromptTask::Imu => "imu",
            PromptTask::Fmri => "fmri",
        }
    }

    /// Captioning prompt task for a modality.
    pub fn caption_task(m: ModalityId) -> Self {
        match m {
            ModalityId::Imu => PromptTask::Imu,
            ModalityId::Fmri => PromptTask::Fmri,
            _ => PromptTask::Caption,
        }
    }
}

impl fmt::Display for PromptTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown prompt task `{s}`")))
    }
}

/// Fills `{name}` placeholders of `task`'s template from `fields`.
/// Every placeholder must be supplied; extra fields are ignored.
pub fn render_prompt(task: PromptTask, fields: &[(&str, &str)]) -> Result<String> {
    let template = task.template();
    let mut out = String::with_capacity(template.len() + 32);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::Template(format!("unterminated placeholder in `{template}`")))?;
        let name = &rest[open + 1..open + close];
        let value = fields
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Template(format!("missing field `{name}` for {task} prompt")))?;
        out.push_str(value);
        rest = &rest[open + close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// The captioning prompt for a modality.
pub fn caption_prompt(m: ModalityId) -> String {
    let task = PromptTask::caption_task(m);
    render_prompt(task, &[("modal", m.prompt_name())]).expect("caption templates take only {modal}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_render_byte_exact() {
        assert_eq!(
            render_prompt(PromptTask::Caption, &[("modal", "image")]).unwrap(),
            "Provide a one-sentence caption for the provided image."
        );
        assert_eq!(
            render_prompt(PromptTask::OpenQa, &[("Question", "What color is the shape?")]).unwrap(),
            "What color is the shape? Answer the question using a single word or phrase."
        );
        assert_eq!(render_prompt(PromptTask::Imu, &[]).unwrap(), "Describe the motion.");
    }

    #[test]
    fn missing_placeholder_is_a_template_error() {
        assert!(matches!(
            render_prompt(PromptTask::OptionQa, &[("Question", "Q?")]),
            Err(Error::Template(_))
        ));
    }
}
