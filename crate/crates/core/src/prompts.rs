//! Prompt templates. Texts live in `prompts/*.txt`; bump [`PROMPT_VERSION`]
//! whenever one of them changes.

pub const PROMPT_VERSION: &str = "1";

pub const MAP_SYSTEM: &str = include_str!("../prompts/map_system.txt");
pub const MAP_USER: &str = include_str!("../prompts/map_user.txt");
pub const REDUCE_SYSTEM: &str = include_str!("../prompts/reduce_system.txt");
pub const REDUCE_USER: &str = include_str!("../prompts/reduce_user.txt");
pub const REASK: &str = include_str!("../prompts/reask.txt");
pub const CLASSIFY_SYSTEM: &str = include_str!("../prompts/classify_system.txt");
pub const CLASSIFY_USER: &str = include_str!("../prompts/classify_user.txt");

/// Substitutes `{name}` placeholders in a single pass, so substituted values
/// are never re-expanded.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let replaced = after.find('}').and_then(|close| {
            let key = &after[..close];
            vars.iter().find(|(k, _)| *k == key).map(|(_, v)| (*v, close))
        });
        match replaced {
            Some((value, close)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}
