use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Role a class plays in the incremental protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassRole {
    Base,
    Novel,
    /// Diffuse low-IoU filler samples; never trained or scored.
    Background,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
    pub role: ClassRole,
}

/// Ordered, append-only class list: base classes first, novel classes in
/// enrollment order. Ids are never reordered or removed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRegistry {
    classes: Vec<ClassInfo>,
}

impl ClassRegistry {
    pub fn new(classes: Vec<ClassInfo>) -> Result<Self> {
        let reg = ClassRegistry { classes };
        reg.validate()?;
        Ok(reg)
    }

    fn validate(&self) -> Result<()> {
        for (i, a) in self.classes.iter().enumerate() {
            for b in &self.classes[i + 1..] {
                if a.id == b.id {
                    return Err(Error::validation(
                        "registry.classes",
                        format!("duplicate class id {}", a.id),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.classes.iter().any(|c| c.id == id)
    }

    pub fn name_of(&self, id: u32) -> Option<&str> {
        self.classes.iter().find(|c| c.id == id).map(|c| c.name.as_str())
    }

    pub fn role_of(&self, id: u32) -> Option<ClassRole> {
        self.classes.iter().find(|c| c.id == id).map(|c| c.role)
    }

    /// Position of a class id in registry order (the classifier row index).
    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.classes.iter().position(|c| c.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.iter().map(|c| c.id)
    }

    pub fn base_ids(&self) -> Vec<u32> {
        self.classes
            .iter()
            .filter(|c| c.role == ClassRole::Base)
            .map(|c| c.id)
            .collect()
    }

    pub fn novel_ids(&self) -> Vec<u32> {
        self.classes
            .iter()
            .filter(|c| c.role == ClassRole::Novel)
            .map(|c| c.id)
            .collect()
    }

    /// Classes that take part in training and scoring (non-background).
    pub fn scored_ids(&self) -> Vec<u32> {
        self.classes
            .iter()
            .filter(|c| c.role != ClassRole::Background)
            .map(|c| c.id)
            .collect()
    }

    /// Appends a novel class; rejects ids already present.
    pub fn enroll_novel(&mut self, id: u32, name: &str) -> Result<()> {
        if self.contains(id) {
            return Err(Error::validation(
                "registry.enroll",
                format!("class {id} already registered"),
            ));
        }
        self.classes.push(ClassInfo {
            id,
            name: name.to_string(),
            role: ClassRole::Novel,
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(id: u32) -> ClassInfo {
        ClassInfo {
            id,
            name: format!("base_{id}"),
            role: ClassRole::Base,
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(ClassRegistry::new(vec![base(0), base(0)]).is_err());
    }

    #[test]
    fn enroll_appends_and_rejects_duplicates() {
        let mut reg = ClassRegistry::new(vec![base(0), base(1)]).unwrap();
        reg.enroll_novel(7, "novel_7").unwrap();
        assert_eq!(reg.index_of(7), Some(2));
        assert!(reg.enroll_novel(1, "dup").is_err());
        assert_eq!(reg.novel_ids(), vec![7]);
        assert_eq!(reg.base_ids(), vec![0, 1]);
    }
}
