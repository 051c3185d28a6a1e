//! Prompt assembly.

use crate::gateway::ChatMessage;

pub const SYSTEM_PROMPT_VERSION: &str = "v1";
pub const SYSTEM_PROMPT: &str = include_str!("../assets/system_prompt.v1.txt");

const EXPERIENCE_HEADER: &str = "## Experiences from earlier successful episodes";

/// One system message (instructions plus demonstration blocks in library
/// order) followed by the question as the user message.
pub fn render_prompt(question: &str, demonstrations: &[String]) -> Vec<ChatMessage> {
    let mut system = SYSTEM_PROMPT.trim_end().to_string();
    if !demonstrations.is_empty() {
        system.push_str("\n\n");
        system.push_str(EXPERIENCE_HEADER);
        for (i, demo) in demonstrations.iter().enumerate() {
            system.push_str(&format!("\n\n<experience index=\"{}\">\n{}\n</experience>", i + 1, demo.trim()));
        }
    }
    vec![ChatMessage::system(system), ChatMessage::user(format!("Question: {}", question.trim()))]
}
