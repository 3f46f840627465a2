//! Instruction and dialogue data: records, prompt rendering, tokenization and
//! supervised-sample encoding with response-only loss masks.

pub mod dataset;
pub mod prompt;
pub mod tokenizer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{merge_datasets, read_jsonl, write_jsonl, MergedDataset};
pub use prompt::{render_chat_prompt, render_instruction_prompt, structure_output, DEFAULT_TEMPLATE};
pub use tokenizer::{train_tokenizer, Tokenizer};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InstructionExample {
    pub instruction: String,
    #[serde(default)]
    pub input: String,
    pub output: String,
    /// Template the record was prepared for, when it names one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
}

impl InstructionExample {
    pub fn new(instruction: impl Into<String>, input: impl Into<String>, output: impl Into<String>) -> Self {
        Self {
            instruction: instruction.into(),
            input: input.into(),
            output: output.into(),
            template: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.instruction.is_empty() {
            return Err(Error::Data("instruction is empty".into()));
        }
        if self.output.is_empty() {
            return Err(Error::Data("output is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            text: text.into(),
        }
    }
}

/// A dialogue whose final assistant turn is the supervised target.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatExample {
    pub turns: Vec<Turn>,
}

impl ChatExample {
    pub fn validate(&self) -> Result<()> {
        prompt::check_alternation(&self.turns)?;
        match self.turns.last() {
            Some(t) if t.role == Role::Assistant => Ok(()),
            _ => Err(Error::Data("dialogue must end with an assistant turn".into())),
        }
    }
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Example {
    Instruction(InstructionExample),
    Chat(ChatExample),
}

impl Example {
    pub fn validate(&self) -> Result<()> {
        match self {
            Example::Instruction(e) => e.validate(),
            Example::Chat(e) => e.validate(),
        }
    }

    /// `(prompt, target)` for supervised training.
    pub fn prompt_and_target(&self, template_id: &str) -> Result<(String, String)> {
        match self {
            Example::Instruction(e) => Ok((render_instruction_prompt(e, template_id)?, e.output.clone())),
            Example::Chat(c) => {
                c.validate()?;
                let (last, history) = c.turns.split_last().expect("validated non-empty");
                Ok((render_chat_prompt(history)?, last.text.clone()))
            }
        }
    }
}

impl From<InstructionExample> for Example {
    fn from(e: InstructionExample) -> Self {
        Example::Instruction(e)
    }
}

impl From<ChatExample> for Example {
    fn from(e: ChatExample) -> Self {
        Example::Chat(e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSample {
    pub ids: Vec<u32>,
    pub loss_mask: Vec<u8>,
    pub truncated: bool,
}

impl EncodedSample {
    pub fn supervised(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m != 0).count()
    }

    /// Next-token view: inputs `ids[..n-1]`, targets `ids[1..]`, mask of targets.
    pub fn shifted(&self) -> (&[u32], &[u32], &[u8]) {
        let n = self.ids.len();
        (&self.ids[..n - 1], &self.ids[1..], &self.loss_mask[1..])
    }
}

/// `encode(prompt) ++ encode(target) ++ [eos]`, right-truncated to
/// `cutoff_len`; the mask covers target tokens and the end-of-sequence token.
/// A prompt that fills the whole cutoff leaves nothing to supervise and is
/// rejected.
pub fn encode_sample(prompt: &str, target: &str, tok: &Tokenizer, cutoff_len: usize) -> Result<EncodedSample> {
    if cutoff_len == 0 {
        return Err(Error::Config("cutoff_len must be positive".into()));
    }
    let p = tok.encode(prompt);
    if p.len() >= cutoff_len {
        return Err(Error::Data(format!(
            "prompt of {} tokens leaves no supervised positions within cutoff {cutoff_len}",
            p.len()
        )));
    }
    let t = tok.encode(target);
    let mut ids = p.clone();
    ids.extend_from_slice(&t);
    ids.push(tok.eos());
    let mut loss_mask = vec![0u8; p.len()];
    loss_mask.resize(ids.len(), 1);
    let truncated = ids.len() > cutoff_len;
    ids.truncate(cutoff_len);
    loss_mask.truncate(cutoff_len);
    Ok(EncodedSample {
        ids,
        loss_mask,
        truncated,
    })
}

/// How instruction records are rendered for one run. A run uses a single
/// template; records naming a different template are rejected unless mixing
/// is explicitly allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPolicy {
    pub template_id: String,
    pub allow_mixed_templates: bool,
}

impl Default for PromptPolicy {
    fn default() -> Self {
        Self {
            template_id: DEFAULT_TEMPLATE.to_string(),
            allow_mixed_templates: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EncodedDataset {
    pub samples: Vec<EncodedSample>,
    /// Index into the source examples for each sample.
    pub source_index: Vec<usize>,
    pub dropped: usize,
    pub truncated: usize,
}

pub fn encode_dataset(
    examples: &[Example],
    tok: &Tokenizer,
    policy: &PromptPolicy,
    cutoff_len: usize,
) -> Result<EncodedDataset> {
    let mut out = EncodedDataset::default();
    for (i, ex) in examples.iter().enumerate() {
        ex.validate()?;
        let template = match ex {
            Example::Instruction(InstructionExample {
                template: Some(t), ..
            }) if t != &policy.template_id => {
                if !policy.allow_mixed_templates {
                    return Err(Error::Config(format!(
                        "example {i} uses template {t:?} but the run uses {:?}; pass --allow-mixed-templates to mix",
                        policy.template_id
                    )));
                }
                t.as_str()
            }
            _ => policy.template_id.as_str(),
        };
        let (prompt, target) = ex.prompt_and_target(template)?;
        match encode_sample(&prompt, &target, tok, cutoff_len) {
            Ok(s) => {
                out.truncated += usize::from(s.truncated);
                out.samples.push(s);
                out.source_index.push(i);
            }
            Err(Error::Data(_)) => out.dropped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
