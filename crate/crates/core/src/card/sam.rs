//! Secure access module: the terminal-side keystore that lets a reader
//! open secure channels to cards. Master keys live only in memory; the
//! type deliberately has no serialization.

use std::collections::BTreeMap;
use std::fmt;

pub const MASTER_KEY_LEN: usize = 32;

#[derive(Clone, PartialEq, Eq)]
pub struct Sam {
    pub sam_id: String,
    master_keys: BTreeMap<String, [u8; MASTER_KEY_LEN]>,
}

impl fmt::Debug for Sam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Sam")
            .field("sam_id", &self.sam_id)
            .field("master_keys", &self.master_keys.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Sam {
    pub fn new(sam_id: impl Into<String>) -> Self {
        Self { sam_id: sam_id.into(), master_keys: BTreeMap::new() }
    }

    pub fn install_master_key(&mut self, label: impl Into<String>, key: [u8; MASTER_KEY_LEN]) {
        self.master_keys.insert(label.into(), key);
    }

    pub fn master_key(&self, label: &str) -> Option<&[u8; MASTER_KEY_LEN]> {
        self.master_keys.get(label)
    }

    pub fn holds(&self, label: &str) -> bool {
        self.master_keys.contains_key(label)
    }
}
