//! Versioned prompt templates and their slot substitution, plus the
//! bracketed single-quoted list format used for subtask plans.

use thiserror::Error;

use crate::model::{fmt_displacement, fmt_gripper, Action};

/// Relabeling prompt sent to the annotator model, with slots for the main
/// instruction and the action log.
pub const ANNOTATION_PROMPT_V1: &str = include_str!("../assets/prompts/annotation_v1.txt");
/// Subtask-prediction prompt, slot: `{{main_task}}`.
pub const SUBTASK_PROMPT_V1: &str = include_str!("../assets/prompts/subtask_v1.txt");
/// Motion-planning prompt, slot: `{{subtask}}`.
pub const MOTION_PROMPT_V1: &str = include_str!("../assets/prompts/motion_v1.txt");
/// Action-generation prompt, slots: `{{subtask}}`, `{{motion_plan}}`.
pub const ACTION_PROMPT_V1: &str = include_str!("../assets/prompts/action_v1.txt");
/// Verifier instruction block, slots: `{{current_subtask}}`, `{{next_subtask}}`.
pub const VERIFIER_PROMPT_V1: &str = include_str!("../assets/prompts/verifier_v1.txt");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unknown prompt version {0:?}")]
    UnknownVersion(String),
    #[error("no bracketed list found in text")]
    NoListFound,
    #[error("subtask list is empty")]
    EmptyList,
}

/// Resolves a prompt-version tag to the annotation template it names.
pub fn annotation_template(version: &str) -> Result<&'static str, PromptError> {
    match version {
        "v1" => Ok(ANNOTATION_PROMPT_V1),
        other => Err(PromptError::UnknownVersion(other.to_string())),
    }
}

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = template.trim_end_matches('\n').to_string();
    for (name, value) in slots {
        out = out.replace(&format!("{{{{{name}}}}}"), value);
    }
    out
}

/// Renders the annotation prompt for one trajectory: instruction plus the
/// full action list, one `[dx, dy, dz, gripper]` row per frame.
pub fn render_annotation_prompt(template: &str, instruction: &str, actions: &[Action]) -> String {
    let log = actions
        .iter()
        .map(|a| {
            format!(
                "[{}, {}, {}, {}]",
                fmt_displacement(a.dx()),
                fmt_displacement(a.dy()),
                fmt_displacement(a.dz()),
                fmt_gripper(a.gripper())
            )
        })
        .collect::<Vec<_>>()
        .join("\n");
    fill(
        template,
        &[
            ("main_instruction", instruction),
            ("trajectory_log_content", &log),
        ],
    )
}

pub fn render_subtask_prompt(main_task: &str) -> String {
    fill(SUBTASK_PROMPT_V1, &[("main_task", main_task)])
}

pub fn render_motion_prompt(subtask: &str) -> String {
    fill(MOTION_PROMPT_V1, &[("subtask", subtask)])
}

pub fn render_action_prompt(subtask: &str, motion_plan: &str) -> String {
    fill(
        ACTION_PROMPT_V1,
        &[("subtask", subtask), ("motion_plan", motion_plan)],
    )
}

/// Renders the verifier instruction block. A missing next subtask (final
/// cycle) is announced as task completion.
pub fn render_verifier_prompt(current_subtask: &str, next_subtask: Option<&str>) -> String {
    fill(
        VERIFIER_PROMPT_V1,
        &[
            ("current_subtask", current_subtask),
            ("next_subtask", next_subtask.unwrap_or("(task complete)")),
        ],
    )
}

/// Renders subtasks as the bracketed quoted list the policy is trained to
/// emit, e.g. `['Move Down to Pot', 'Grasp Pot']`. Items containing a single
/// quote switch to double quotes.
pub fn render_subtask_list(subtasks: &[String]) -> String {
    let items = subtasks
        .iter()
        .map(|s| {
            if s.contains('\'') {
                format!("\"{s}\"")
            } else {
                format!("'{s}'")
            }
        })
        .collect::<Vec<_>>()
        .join(", ");
    format!("[{items}]")
}

/// Extracts the quoted items of the first bracketed list in a completion.
/// Both quote styles are accepted; prose outside the list is ignored.
pub fn parse_subtask_list(text: &str) -> Result<Vec<String>, PromptError> {
    let start = text.find('[').ok_or(PromptError::NoListFound)?;
    let mut items = Vec::new();
    let mut quote: Option<char> = None;
    let mut current = String::new();
    let mut closed = false;
    for ch in text[start + 1..].chars() {
        match quote {
            Some(q) => {
                if ch == q {
                    items.push(current.clone());
                    current.clear();
                    quote = None;
                } else {
                    current.push(ch);
                }
            }
            None => match ch {
                '\'' | '"' => quote = Some(ch),
                ']' => {
                    closed = true;
                    break;
                }
                _ => {}
            },
        }
    }
    if !closed || quote.is_some() {
        return Err(PromptError::NoListFound);
    }
    let items: Vec<String> = items
        .into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if items.is_empty() {
        return Err(PromptError::EmptyList);
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Action;

    #[test]
    fn annotation_prompt_contains_convention_and_instruction() {
        let actions = vec![Action::new(0.0, 0.0, 0.0, 1.0).unwrap()];
        let prompt = render_annotation_prompt(ANNOTATION_PROMPT_V1, "open the silver pot", &actions);
        assert!(prompt.contains("Positive x points forward"));
        assert!(prompt.contains("Instruction: open the silver pot"));
        assert!(prompt.contains("[0.000, 0.000, 0.000, 1.0]"));
        assert!(!prompt.contains("{{main_instruction}}"));
        assert!(!prompt.contains("{{trajectory_log_content}}"));
        // The literal example braces survive substitution.
        assert!(prompt.contains("\"step_description\": \"Grasp the Pepper\""));
    }

    #[test]
    fn subtask_prompt_substitution() {
        let p = render_subtask_prompt("put the pot in the sink");
        assert!(p.starts_with("Describe the sequence of remaining high-level steps"));
        assert!(p.contains("'put the pot in the sink'"));
        assert!(p.ends_with("Start with 'Move to'"));
    }

    #[test]
    fn motion_and_action_prompt_substitution() {
        let m = render_motion_prompt("Grasp Pot");
        assert!(m.contains("\"Grasp Pot\""));
        assert!(m.contains("+dx is forward"));
        let a = render_action_prompt("Grasp Pot", "move down slightly");
        assert!(a.contains("'Grasp Pot'"));
        assert!(a.contains("'move down slightly'"));
        assert!(a.ends_with("PROVIDE ONLY THE PYTHON LIST."));
    }

    #[test]
    fn verifier_prompt_substitution() {
        let v = render_verifier_prompt("Grasp Pot", Some("Lift Pot"));
        assert!(v.starts_with("You are a precision-oriented robot inspector."));
        assert!(v.contains("Current Subtask: Grasp Pot"));
        assert!(v.contains("Next Subtask: Lift Pot"));
        let last = render_verifier_prompt("Release", None);
        assert!(last.contains("Next Subtask: (task complete)"));
    }

    #[test]
    fn subtask_list_round_trip() {
        let subtasks = vec!["Move Down to Pot".to_string(), "Grasp Pot".to_string()];
        let rendered = render_subtask_list(&subtasks);
        assert_eq!(rendered, "['Move Down to Pot', 'Grasp Pot']");
        assert_eq!(parse_subtask_list(&rendered).unwrap(), subtasks);
    }

    #[test]
    fn subtask_list_parses_reference_example() {
        let text = "['Move Down to Pot', 'Grasp Pot', 'Lift Pot High', 'Move Pot Left to the Sink', 'Lower Pot to Sink', 'Release']";
        assert_eq!(parse_subtask_list(text).unwrap().len(), 6);
    }

    #[test]
    fn subtask_list_tolerates_prose_and_quote_style() {
        let got = parse_subtask_list("Here is the plan: [\"Move to Carrot\", 'Grasp Carrot']!").unwrap();
        assert_eq!(got, vec!["Move to Carrot", "Grasp Carrot"]);
    }

    #[test]
    fn subtask_list_with_apostrophe_survives() {
        let subtasks = vec!["Move to Ash's Card".to_string()];
        let rendered = render_subtask_list(&subtasks);
        assert_eq!(parse_subtask_list(&rendered).unwrap(), subtasks);
    }

    #[test]
    fn subtask_list_rejects_prose_without_list() {
        assert!(parse_subtask_list("I cannot help with that.").is_err());
    }
}
