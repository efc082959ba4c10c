use std::fmt::Write as _;

use serde_json::{json, Map, Value};

use super::{GenError, GenerationSpec};
use crate::codebook::Codebook;

pub const DEFAULT_PROMPT_TEMPLATE: &str = include_str!("../../assets/prompt_template.txt");

const PLACEHOLDERS: [&str; 4] = ["state", "year", "variables", "n_rows"];

/// `{name}` tokens in order of appearance.
fn placeholders(template: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let ident_len = after
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(after.len());
        let starts_ok = after
            .chars()
            .next()
            .is_some_and(|c| c.is_ascii_alphabetic() || c == '_');
        if starts_ok && after[ident_len..].starts_with('}') {
            out.push(&after[..ident_len]);
            rest = &after[ident_len + 1..];
        } else {
            rest = after;
        }
    }
    out
}

pub(crate) fn check_template(template: &str) -> Result<(), GenError> {
    let found = placeholders(template);
    if let Some(unknown) = found.iter().find(|p| !PLACEHOLDERS.contains(p)) {
        return Err(GenError::UnresolvedPlaceholder(unknown.to_string()));
    }
    for p in PLACEHOLDERS {
        if !found.contains(&p) {
            return Err(GenError::MissingPlaceholder(p.to_string()));
        }
    }
    if found.iter().filter(|p| **p == "variables").count() > 1 {
        return Err(GenError::InvalidSpec(
            "prompt template uses {variables} more than once".into(),
        ));
    }
    Ok(())
}

fn variable_block(codebook: &Codebook) -> String {
    let mut out = String::new();
    for var in codebook.variables() {
        let _ = write!(out, "- {}", var.name);
        if let Some(d) = &var.description {
            let _ = write!(out, " ({d})");
        }
        out.push_str(": ");
        let coding: Vec<String> = var
            .codes
            .iter()
            .map(|&c| match var.label(c) {
                Some(l) => format!("{c} = {l}"),
                None => c.to_string(),
            })
            .collect();
        out.push_str(&coding.join("; "));
        out.push('\n');
    }
    out.trim_end().to_string()
}

/// Instantiates the zero-shot prompt for one batch of `batch_size` rows.
pub fn build_prompt(spec: &GenerationSpec) -> Result<String, GenError> {
    check_template(&spec.prompt_template)?;
    Ok(spec
        .prompt_template
        .replace("{state}", &spec.state_name)
        .replace("{year}", &spec.year.to_string())
        .replace("{n_rows}", &spec.batch_size.to_string())
        .replace("{variables}", &variable_block(&spec.codebook)))
}

/// Structured-output schema: an object with a `records` array of objects
/// keyed by every codebook variable, each an integer. Code ranges are left
/// to row validation.
pub fn record_schema(codebook: &Codebook) -> Value {
    let mut props = Map::new();
    for name in codebook.names() {
        props.insert(name.to_string(), json!({ "type": "integer" }));
    }
    let required: Vec<&str> = codebook.names().collect();
    json!({
        "type": "object",
        "properties": {
            "records": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": props,
                    "required": required,
                    "additionalProperties": false
                }
            }
        },
        "required": ["records"],
        "additionalProperties": false
    })
}
