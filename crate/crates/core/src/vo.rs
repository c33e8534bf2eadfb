//! Virtual organization registry and gridmap files.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::VoError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CertAuthority {
    Globus,
    #[serde(rename = "DOESG")]
    DoeSg,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridUser {
    pub dn: String,
    pub ca: CertAuthority,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserDirectory {
    users: BTreeMap<String, GridUser>,
    groups: BTreeMap<String, Vec<String>>,
    local_account_map: BTreeMap<String, String>,
}

impl UserDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create_group(&mut self, group: &str, local_account: &str) -> Result<(), VoError> {
        if self.groups.contains_key(group) {
            return Err(VoError::DuplicateGroup(group.to_string()));
        }
        if local_account.is_empty() || local_account.contains(char::is_whitespace) {
            return Err(VoError::BadAccount(local_account.to_string()));
        }
        self.groups.insert(group.to_string(), Vec::new());
        self.local_account_map
            .insert(group.to_string(), local_account.to_string());
        Ok(())
    }

    /// Add `user` to `group`. Re-adding an existing member is a no-op.
    pub fn add_user(&mut self, user: GridUser, group: &str) -> Result<(), VoError> {
        if user.dn.trim().is_empty() || user.dn.contains('"') || user.dn.contains('\n') {
            return Err(VoError::BadDn(user.dn));
        }
        let members = self
            .groups
            .get_mut(group)
            .ok_or_else(|| VoError::UnknownGroup(group.to_string()))?;
        if let Some(existing) = self.users.get(&user.dn) {
            if existing.ca != user.ca {
                return Err(VoError::ConflictingCa(user.dn));
            }
        }
        if !members.contains(&user.dn) {
            members.push(user.dn.clone());
        }
        self.users.insert(user.dn.clone(), user);
        Ok(())
    }

    pub fn members(&self, group: &str) -> Option<&[String]> {
        self.groups.get(group).map(Vec::as_slice)
    }

    pub fn groups_of(&self, dn: &str) -> BTreeSet<&str> {
        self.groups
            .iter()
            .filter(|(_, m)| m.iter().any(|d| d == dn))
            .map(|(g, _)| g.as_str())
            .collect()
    }

    pub fn user(&self, dn: &str) -> Option<&GridUser> {
        self.users.get(dn)
    }

    pub fn account_for_group(&self, group: &str) -> Option<&str> {
        self.local_account_map.get(group).map(String::as_str)
    }

    pub fn group_names(&self) -> impl Iterator<Item = &str> {
        self.groups.keys().map(String::as_str)
    }
}

/// One `"<DN>" <account>` line per (user, group) membership, sorted by DN
/// then account.
pub fn mkgridmap(dir: &UserDirectory) -> String {
    let mut entries: Vec<(&str, &str)> = dir
        .groups
        .iter()
        .flat_map(|(group, members)| {
            let account = dir.local_account_map[group].as_str();
            members.iter().map(move |dn| (dn.as_str(), account))
        })
        .collect();
    entries.sort_unstable();
    entries.dedup();
    let mut out = String::new();
    for (dn, account) in entries {
        out.push('"');
        out.push_str(dn);
        out.push_str("\" ");
        out.push_str(account);
        out.push('\n');
    }
    out
}

/// A site's parsed copy of a gridmap file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Gridmap {
    entries: Vec<(String, String)>,
}

impl Gridmap {
    pub fn parse(content: &str) -> Result<Self, VoError> {
        let mut entries = Vec::new();
        for (i, line) in content.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || VoError::BadGridmapLine {
                line: i + 1,
                text: line.to_string(),
            };
            let rest = line.strip_prefix('"').ok_or_else(bad)?;
            let close = rest.find('"').ok_or_else(bad)?;
            let dn = &rest[..close];
            let account = rest[close + 1..].strip_prefix(' ').ok_or_else(bad)?;
            if dn.is_empty() || account.is_empty() || account.contains(' ') {
                return Err(bad());
            }
            entries.push((dn.to_string(), account.to_string()));
        }
        Ok(Self { entries })
    }

    pub fn from_directory(dir: &UserDirectory) -> Self {
        Self::parse(&mkgridmap(dir)).expect("mkgridmap output parses")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Local account for `dn`, first matching line wins.
    pub fn authorize(&self, dn: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(d, _)| d == dn)
            .map(|(_, a)| a.as_str())
    }
}
