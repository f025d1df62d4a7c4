//! Module and library catalogs. Defaults ship as JSON data files.

use serde::{Deserialize, Serialize};

use crate::addr::PAGE_4K;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleEntry {
    pub name: String,
    /// Size in bytes as reported by `/proc/modules`.
    pub size: u64,
}

impl ModuleEntry {
    pub fn pages(&self) -> u64 {
        self.size.div_ceil(PAGE_4K).max(1)
    }
}

/// A shared library described by its four section sizes, in the mapping
/// order `r-x`, `---`, `r--`, `rw-`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub name: String,
    pub section_sizes: [u64; 4],
}

impl LibraryEntry {
    pub fn section_pages(&self) -> [u64; 4] {
        self.section_sizes.map(|s| s.div_ceil(PAGE_4K))
    }

    pub fn total_pages(&self) -> u64 {
        self.section_pages().iter().sum()
    }
}

const MODULES_JSON: &str = include_str!("../../data/modules.json");
const LIBRARIES_JSON: &str = include_str!("../../data/libraries.json");

pub fn default_modules() -> Vec<ModuleEntry> {
    serde_json::from_str(MODULES_JSON).expect("bundled module catalog is valid JSON")
}

pub fn default_libraries() -> Vec<LibraryEntry> {
    serde_json::from_str(LIBRARIES_JSON).expect("bundled library catalog is valid JSON")
}

/// Catalog names grouped by page count; used for size-based identification.
pub fn names_with_pages(catalog: &[ModuleEntry], pages: u64) -> Vec<String> {
    catalog
        .iter()
        .filter(|m| m.pages() == pages)
        .map(|m| m.name.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn default_module_catalog_shape() {
        let cat = default_modules();
        assert_eq!(cat.len(), 125);
        let mut by_pages: HashMap<u64, usize> = HashMap::new();
        for m in &cat {
            *by_pages.entry(m.pages()).or_default() += 1;
        }
        let unique = cat.iter().filter(|m| by_pages[&m.pages()] == 1).count();
        assert_eq!(unique, 19);
        for name in ["video", "mac_hid", "pinctrl_icelake"] {
            let m = cat.iter().find(|m| m.name == name).unwrap();
            assert_eq!(by_pages[&m.pages()], 1, "{name}");
        }
        let a = cat.iter().find(|m| m.name == "autofs4").unwrap();
        let x = cat.iter().find(|m| m.name == "x_tables").unwrap();
        assert_eq!(a.pages(), x.pages());
        assert_eq!(by_pages[&a.pages()], 2);
    }

    #[test]
    fn library_signatures_are_distinct() {
        let libs = default_libraries();
        for (i, a) in libs.iter().enumerate() {
            for b in &libs[i + 1..] {
                assert_ne!(a.section_pages(), b.section_pages(), "{} {}", a.name, b.name);
            }
        }
    }
}
