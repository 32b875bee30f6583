//! Prompt templates for the LLM roles. Defaults are compiled in; a directory
//! of same-named `.txt` files overrides them.

use std::path::Path;

use super::TemplateRepo;
use crate::schema::Schema;

#[derive(Debug, Clone)]
pub struct PromptSet {
    pub coarse: String,
    pub fine: String,
    pub optimizer: String,
    pub answerer: String,
    pub zero_shot: String,
    pub one_shot: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            coarse: include_str!("../../prompts/coarse.txt").into(),
            fine: include_str!("../../prompts/fine.txt").into(),
            optimizer: include_str!("../../prompts/optimizer.txt").into(),
            answerer: include_str!("../../prompts/answerer.txt").into(),
            zero_shot: include_str!("../../prompts/zero_shot.txt").into(),
            one_shot: include_str!("../../prompts/one_shot.txt").into(),
        }
    }
}

/// Replace `{{name}}` placeholders.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    vars.iter().fold(template.to_string(), |acc, (k, v)| {
        acc.replace(&format!("{{{{{k}}}}}"), v)
    })
}

impl PromptSet {
    pub fn load_dir(dir: impl AsRef<Path>) -> std::io::Result<Self> {
        let mut set = Self::default();
        let dir = dir.as_ref();
        for (name, slot) in [
            ("coarse", &mut set.coarse),
            ("fine", &mut set.fine),
            ("optimizer", &mut set.optimizer),
            ("answerer", &mut set.answerer),
            ("zero_shot", &mut set.zero_shot),
            ("one_shot", &mut set.one_shot),
        ] {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                *slot = std::fs::read_to_string(path)?;
            }
        }
        Ok(set)
    }

    pub fn coarse(&self, query: &str, schema: &Schema, templates: &TemplateRepo) -> String {
        render(
            &self.coarse,
            &[
                ("schema", &schema.to_json()),
                ("templates", &templates.describe()),
                ("query", query),
            ],
        )
    }

    pub fn optimizer(&self, query: &str, schema: &Schema, dags: &str) -> String {
        render(
            &self.optimizer,
            &[("schema", &schema.to_json()), ("query", query), ("dags", dags)],
        )
    }

    pub fn answerer(&self, query: &str, results: &str) -> String {
        render(&self.answerer, &[("query", query), ("results", results)])
    }

    pub fn zero_shot(&self, query: &str, schema: &Schema) -> String {
        render(&self.zero_shot, &[("schema", &schema.to_json()), ("query", query)])
    }

    pub fn one_shot(&self, query: &str, schema: &Schema, example: &str) -> String {
        render(
            &self.one_shot,
            &[("schema", &schema.to_json()), ("query", query), ("example", example)],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholders_are_filled() {
        let schema = Schema::from_json(r#"{"age": {"type": "numeric", "bounds": [0, 120]}}"#).unwrap();
        let p = PromptSet::default().coarse("average age", &schema, &TemplateRepo::standard());
        assert!(p.contains("average age"));
        assert!(p.contains("\"age\""));
        assert!(p.contains("Mean"));
        assert!(!p.contains("{{"));
    }

    #[test]
    fn directory_overrides() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("answerer.txt"), "Q={{query}} R={{results}}").unwrap();
        let set = PromptSet::load_dir(dir.path()).unwrap();
        assert_eq!(set.answerer("a", "b"), "Q=a R=b");
        assert_eq!(set.coarse, PromptSet::default().coarse);
    }
}
