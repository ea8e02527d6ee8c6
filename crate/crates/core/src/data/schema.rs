use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub vocab: u32,
}

/// Categorical feature layout plus the number of domains.
///
/// On disk this is TOML:
///
/// ```toml
/// domains = 3
///
/// [[fields]]
/// name = "user_age"
/// vocab = 7
/// ```
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub domains: usize,
    pub fields: Vec<FieldSpec>,
}

impl Schema {
    pub fn new(domains: usize, fields: Vec<FieldSpec>) -> Result<Self> {
        let schema = Self { domains, fields };
        schema.validate()?;
        Ok(schema)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let schema: Schema = toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schema is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains == 0 {
            return Err(Error::Schema("domain count must be positive".into()));
        }
        if self.fields.is_empty() {
            return Err(Error::Schema(
                "at least one feature field is required".into(),
            ));
        }
        let mut seen = HashSet::new();
        for f in &self.fields {
            if f.name.is_empty() || f.name == "domain" || f.name == "label" {
                return Err(Error::Schema(format!("invalid field name `{}`", f.name)));
            }
            if f.name.contains(',') {
                return Err(Error::Schema(format!(
                    "field name `{}` contains a comma",
                    f.name
                )));
            }
            if f.vocab == 0 {
                return Err(Error::Schema(format!(
                    "field `{}` has empty vocabulary",
                    f.name
                )));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate field `{}`", f.name)));
            }
        }
        Ok(())
    }

    pub fn field_count(&self) -> usize {
        self.fields.len()
    }

    /// The CSV header this schema expects.
    pub fn csv_header(&self) -> Vec<String> {
        let mut cols = vec!["domain".to_string(), "label".to_string()];
        cols.extend(self.fields.iter().map(|f| f.name.clone()));
        cols
    }
}
