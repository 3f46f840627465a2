//! Prompt templates. Output of every function here is byte-stable; the golden
//! files under `tests/golden/` pin it.

use super::{InstructionExample, Role, Turn};
use crate::error::{Error, Result};

pub const DEFAULT_TEMPLATE: &str = "default";

/// Registered instruction template ids.
pub const TEMPLATES: [&str; 2] = [DEFAULT_TEMPLATE, "concise"];

pub fn render_instruction_prompt(ex: &InstructionExample, template_id: &str) -> Result<String> {
    let has_input = !ex.input.is_empty();
    match template_id {
        DEFAULT_TEMPLATE => {
            let mut out = String::from("Below is an instruction that describes a task.");
            if has_input {
                out.push_str(" It is paired with an input that provides further context.");
            }
            out.push_str(" Write a response.\n### Instruction:\n");
            out.push_str(&ex.instruction);
            out.push('\n');
            if has_input {
                out.push_str("### Input:\n");
                out.push_str(&ex.input);
                out.push('\n');
            }
            out.push_str("### Response:\n");
            Ok(out)
        }
        "concise" => {
            let mut out = format!("### Instruction:\n{}\n", ex.instruction);
            if has_input {
                out.push_str(&format!("### Input:\n{}\n", ex.input));
            }
            out.push_str("### Response:\n");
            Ok(out)
        }
        other => Err(Error::Config(format!(
            "unknown prompt template {other:?}; registered: {}",
            TEMPLATES.join(", ")
        ))),
    }
}

pub(crate) fn check_alternation(turns: &[Turn]) -> Result<()> {
    for (i, t) in turns.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
        if t.role != expected {
            return Err(Error::Data(format!(
                "turn {i} is {:?}, expected {:?} (turns alternate starting with user)",
                t.role, expected
            )));
        }
    }
    Ok(())
}

/// `User: {u}\n\nAssistant: {a}\n\n` per completed exchange, then
/// `User: {u}\n\nAssistant: ` when the last user turn is still unanswered.
pub fn render_chat_prompt(turns: &[Turn]) -> Result<String> {
    check_alternation(turns)?;
    let mut out = String::new();
    for pair in turns.chunks(2) {
        out.push_str("User: ");
        out.push_str(&pair[0].text);
        out.push_str("\n\nAssistant: ");
        if let Some(reply) = pair.get(1) {
            out.push_str(&reply.text);
            out.push_str("\n\n");
        }
    }
    Ok(out)
}

/// `1. a\n2. b` with no trailing newline.
pub fn structure_output<S: AsRef<str>>(items: &[S]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s.as_ref()))
        .collect::<Vec<_>>()
        .join("\n")
}
