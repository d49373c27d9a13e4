use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::grammar::{self, GrammarError, MarkupDoc, ModalityLabel, TaskTag};

/// The eight instruction task formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Scheduling,
    Decision,
    Decomposition,
    Relation,
    Detection,
    Caption,
    Classification,
    Vqa,
}

impl TaskKind {
    pub const ALL: [TaskKind; 8] = [
        TaskKind::Scheduling,
        TaskKind::Decision,
        TaskKind::Decomposition,
        TaskKind::Relation,
        TaskKind::Detection,
        TaskKind::Caption,
        TaskKind::Classification,
        TaskKind::Vqa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Scheduling => "scheduling",
            TaskKind::Decision => "decision",
            TaskKind::Decomposition => "decomposition",
            TaskKind::Relation => "relation",
            TaskKind::Detection => "detection",
            TaskKind::Caption => "caption",
            TaskKind::Classification => "classification",
            TaskKind::Vqa => "vqa",
        }
    }

    /// Leading task token of the prompt, for the four reasoning tasks.
    pub fn task_tag(self) -> Option<TaskTag> {
        match self {
            TaskKind::Scheduling => Some(TaskTag::Navigation),
            TaskKind::Decision => Some(TaskTag::Decision),
            TaskKind::Decomposition => Some(TaskTag::Decomposition),
            TaskKind::Relation => Some(TaskTag::Reasoning),
            _ => None,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown task `{s}`"))
    }
}

/// One image-text sample. Serialized as one JSONL line with keys in
/// declaration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub image_refs: Vec<String>,
    pub modality: ModalityLabel,
    pub task: TaskKind,
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecordField {
    Prompt,
    Response,
}

impl fmt::Display for RecordField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecordField::Prompt => "prompt",
            RecordField::Response => "response",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RecordError {
    #[error("{field}: {source}")]
    Markup {
        field: RecordField,
        #[source]
        source: GrammarError,
    },
    #[error("record has no image reference")]
    NoImage,
    #[error("prompt should open with {expected:?} but has {found:?}")]
    WrongTaskTag {
        expected: Option<TaskTag>,
        found: Option<TaskTag>,
    },
    #[error("response carries a task tag")]
    TaggedResponse,
}

/// Parsed prompt and response of a valid record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedRecord {
    pub prompt: MarkupDoc,
    pub response: MarkupDoc,
}

impl InstructionRecord {
    /// Checks that both texts parse and the prompt carries exactly the task
    /// token its task requires.
    pub fn check(&self) -> Result<ParsedRecord, RecordError> {
        if self.image_refs.is_empty() {
            return Err(RecordError::NoImage);
        }
        let prompt = grammar::parse(&self.prompt).map_err(|source| RecordError::Markup {
            field: RecordField::Prompt,
            source,
        })?;
        let response = grammar::parse(&self.response).map_err(|source| RecordError::Markup {
            field: RecordField::Response,
            source,
        })?;
        let expected = self.task.task_tag();
        if prompt.task() != expected {
            return Err(RecordError::WrongTaskTag {
                expected,
                found: prompt.task(),
            });
        }
        if response.task().is_some() {
            return Err(RecordError::TaggedResponse);
        }
        Ok(ParsedRecord { prompt, response })
    }
}
