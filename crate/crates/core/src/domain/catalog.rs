use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DomainError;

/// Index of a lab group inside a [`LabCatalog`] (dense, `0..K`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub u8);

impl GroupId {
    pub const fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Well-known group ids of the default catalog.
pub mod groups {
    use super::GroupId;

    pub const CBC: GroupId = GroupId(0);
    pub const CHEM: GroupId = GroupId(1);
    pub const COAG: GroupId = GroupId(2);
    pub const UA: GroupId = GroupId(3);
    pub const LACTATE: GroupId = GroupId(4);
    pub const LFTS: GroupId = GroupId(5);
    pub const LIPASE: GroupId = GroupId(6);
    pub const LYTES: GroupId = GroupId(7);
    pub const CARDIO: GroupId = GroupId(8);
    pub const BLOOD_GAS: GroupId = GroupId(9);
    pub const TOX: GroupId = GroupId(10);
    pub const INFLAMMATION: GroupId = GroupId(11);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamingMode {
    /// Lab tests appear under their raw names ("Hematocrit").
    #[default]
    RawName,
    /// Lab tests appear as positional aliases (`feature1`, `feature2`, ...) within their group.
    StandardFeature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabTest {
    pub id: u16,
    pub name: String,
    pub group_id: GroupId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabGroup {
    pub id: GroupId,
    pub name: String,
    pub short_name: String,
    /// Test ids, in display order.
    pub tests: Vec<u16>,
    /// Turnaround time in minutes.
    pub time_cost: u32,
}

/// Coarse rarity tier of a lab group, used for the personalization cohorts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortTier {
    Top,
    Middle,
    Rare,
}

impl CohortTier {
    pub const ALL: [CohortTier; 3] = [CohortTier::Top, CohortTier::Middle, CohortTier::Rare];

    pub fn as_str(self) -> &'static str {
        match self {
            CohortTier::Top => "top",
            CohortTier::Middle => "middle",
            CohortTier::Rare => "rare",
        }
    }
}

/// Lab groups, their member tests and their time costs.
#[derive(Debug, Clone, PartialEq)]
pub struct LabCatalog {
    pub groups: Vec<LabGroup>,
    pub tests: Vec<LabTest>,
    pub naming_mode: NamingMode,
    /// Groups ordered from most to least frequently ordered in a reference cohort.
    pub frequency_rank: Vec<GroupId>,
}

const DEFAULT_GROUPS: [(&str, &str, u32, &[&str]); 12] = [
    (
        "Complete Blood Count",
        "CBC",
        30,
        &[
            "Hematocrit",
            "White Blood Cells",
            "Hemoglobin",
            "Red Blood Cells",
            "Mean Corpuscular Volume",
            "Mean Corpuscular Hemoglobin",
            "Mean Corpuscular Hemoglobin Concentration",
            "Red Blood Cell Distribution Width",
            "Platelet Count",
            "Basophils",
            "Eosinophils",
            "Lymphocytes",
            "Neutrophils",
            "Red Cell Distribution Width (Standard Deviation)",
            "Absolute Lymphocyte Count",
            "Absolute Basophil Count",
            "Absolute Eosinophil Count",
            "Absolute Monocyte Count",
            "Absolute Neutrophil Count",
            "Bands",
            "Atypical Lymphocytes",
            "Nucleated Red Cells",
            "Monocytes",
        ],
    ),
    (
        "Chemistry",
        "CHEM",
        60,
        &[
            "Urea Nitrogen",
            "Creatinine",
            "Sodium",
            "Chloride",
            "Bicarbonate",
            "Glucose (Chemistry)",
            "Potassium",
            "Anion Gap",
            "Calcium, Total",
        ],
    ),
    (
        "Coagulation",
        "COAG",
        48,
        &[
            "Prothrombin Time",
            "International Normalised Ratio",
            "Partial thromboplastin time",
        ],
    ),
    (
        "Urinalysis",
        "UA",
        40,
        &[
            "PH (Urine)",
            "Specific Gravity",
            "Red Blood Count (Urine)",
            "White Blood Count (Urine)",
            "Epithelial Cells",
            "Protein",
            "Hyaline Casts",
            "Ketone",
            "Urobilinogen",
            "Glucose (Urine)",
        ],
    ),
    ("Lactate", "Lactate", 4, &["Lactate"]),
    (
        "Liver Function",
        "LFTs",
        104,
        &[
            "Alkaline Phosphatase",
            "Asparate Aminotransferase (AST)",
            "Alanine Aminotransferase (ALT)",
            "Bilirubin, Total",
            "Albumin",
        ],
    ),
    ("Lipase", "Lipase", 100, &["Lipase"]),
    ("Electrolyte", "LYTES", 89, &["Magnesium", "Phosphate"]),
    ("Cardiovascular", "CARDIO", 122, &["NT-proBNP", "Troponin T"]),
    (
        "Blood Gas",
        "Blood Gas",
        12,
        &[
            "Potassium, Whole Blood",
            "PH (Blood Gas)",
            "Calculated Total CO2",
            "Base Excess",
            "PO2",
            "PCO2",
            "Glucose (Blood Gas)",
            "Sodium, Whole Blood",
        ],
    ),
    ("Toxicology", "TOX", 70, &["Ethanol"]),
    (
        "Inflammation",
        "Inflammation",
        178,
        &["Creatine Kinase (CK)", "C-Reactive Protein"],
    ),
];

// CHEM and CBC first, then the middle six, then the four rarest.
const DEFAULT_FREQUENCY_RANK: [u8; 12] = [1, 0, 3, 2, 4, 7, 5, 6, 9, 8, 11, 10];

/// The 12-group emergency-department catalog with turnaround times in minutes.
pub fn default_catalog() -> LabCatalog {
    let mut groups = Vec::with_capacity(DEFAULT_GROUPS.len());
    let mut tests = Vec::new();
    for (gi, (name, short, cost, names)) in DEFAULT_GROUPS.iter().enumerate() {
        let gid = GroupId(gi as u8);
        let mut ids = Vec::with_capacity(names.len());
        for n in names.iter() {
            let id = tests.len() as u16;
            tests.push(LabTest {
                id,
                name: (*n).to_string(),
                group_id: gid,
            });
            ids.push(id);
        }
        groups.push(LabGroup {
            id: gid,
            name: (*name).to_string(),
            short_name: (*short).to_string(),
            tests: ids,
            time_cost: *cost,
        });
    }
    LabCatalog {
        groups,
        tests,
        naming_mode: NamingMode::RawName,
        frequency_rank: DEFAULT_FREQUENCY_RANK.iter().map(|&g| GroupId(g)).collect(),
    }
}

/// Characters and tokens that may not appear inside a test or group name.
pub const RESERVED_DELIMITERS: [&str; 3] = [":", "|", "[EOS]"];

pub(crate) fn check_name(name: &str) -> Result<(), DomainError> {
    if name.trim().is_empty() {
        return Err(DomainError::InvalidCatalog("empty name".into()));
    }
    if let Some(d) = RESERVED_DELIMITERS.iter().find(|d| name.contains(*d)) {
        return Err(DomainError::InvalidCatalog(format!(
            "name {name:?} contains reserved delimiter {d:?}"
        )));
    }
    Ok(())
}

impl LabCatalog {
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, id: GroupId) -> Result<&LabGroup, DomainError> {
        self.groups
            .get(id.index())
            .ok_or(DomainError::UnknownGroup(id))
    }

    pub fn cost(&self, id: GroupId) -> u32 {
        self.groups[id.index()].time_cost
    }

    pub fn group_ids(&self) -> impl Iterator<Item = GroupId> + '_ {
        self.groups.iter().map(|g| g.id)
    }

    pub fn total_cost(&self) -> u32 {
        self.groups.iter().map(|g| g.time_cost).sum()
    }

    pub fn group_by_short_name(&self, short: &str) -> Option<&LabGroup> {
        self.groups
            .iter()
            .find(|g| g.short_name.eq_ignore_ascii_case(short))
    }

    pub fn with_naming_mode(mut self, mode: NamingMode) -> Self {
        self.naming_mode = mode;
        self
    }

    /// Checks every structural invariant of the catalog.
    pub fn validate(&self) -> Result<(), DomainError> {
        let err = |m: String| Err(DomainError::InvalidCatalog(m));
        if self.groups.is_empty() {
            return err("catalog has no groups".into());
        }
        if self.groups.len() > u8::MAX as usize {
            return err("too many groups".into());
        }
        let mut seen_test = vec![false; self.tests.len()];
        let mut names = HashSet::new();
        for (i, t) in self.tests.iter().enumerate() {
            if t.id as usize != i {
                return err(format!("test ids must be dense, found {} at {i}", t.id));
            }
            check_name(&t.name)?;
            if !names.insert(t.name.as_str()) {
                return err(format!("duplicate test name {:?}", t.name));
            }
            if t.group_id.index() >= self.groups.len() {
                return err(format!("test {:?} points to unknown group", t.name));
            }
        }
        for (i, g) in self.groups.iter().enumerate() {
            if g.id.index() != i {
                return err(format!("group ids must be dense, found {} at {i}", g.id));
            }
            check_name(&g.name)?;
            check_name(&g.short_name)?;
            if g.time_cost == 0 {
                return err(format!("group {} has zero time cost", g.short_name));
            }
            if g.tests.is_empty() {
                return err(format!("group {} has no tests", g.short_name));
            }
            for &t in &g.tests {
                let Some(test) = self.tests.get(t as usize) else {
                    return err(format!("group {} lists unknown test {t}", g.short_name));
                };
                if test.group_id != g.id || seen_test[t as usize] {
                    return err(format!("test {:?} must belong to exactly one group", test.name));
                }
                seen_test[t as usize] = true;
            }
        }
        if seen_test.iter().any(|s| !s) {
            return err("every test must belong to a group".into());
        }
        let mut rank = self.frequency_rank.clone();
        rank.sort();
        if rank != self.group_ids().collect::<Vec<_>>() {
            return err("frequency_rank must be a permutation of the group ids".into());
        }
        Ok(())
    }

    /// Stable lowercase hex SHA-256 over group ids, names and costs and test ids,
    /// names and memberships.
    ///
    /// Canonical byte stream: one line per group `G\t{id}\t{name}\t{short}\t{cost}\n`
    /// followed by one line per test `T\t{id}\t{name}\t{group}\n`, UTF-8.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for g in &self.groups {
            h.update(format!("G\t{}\t{}\t{}\t{}\n", g.id, g.name, g.short_name, g.time_cost));
        }
        for t in &self.tests {
            h.update(format!("T\t{}\t{}\t{}\n", t.id, t.name, t.group_id));
        }
        hex::encode(h.finalize())
    }

    /// Rarity tier of a group according to `frequency_rank`: the two most frequent
    /// groups are `Top`, the next six `Middle`, the rest `Rare`.
    pub fn tier(&self, id: GroupId) -> Result<CohortTier, DomainError> {
        let pos = self
            .frequency_rank
            .iter()
            .position(|&g| g == id)
            .ok_or(DomainError::UnknownGroup(id))?;
        Ok(match pos {
            0..=1 => CohortTier::Top,
            2..=7 => CohortTier::Middle,
            _ => CohortTier::Rare,
        })
    }

    /// Re-ranks groups by how often they occur in `panels` (ties broken by id).
    pub fn rank_by_frequency<'a, I>(&mut self, panels: I)
    where
        I: IntoIterator<Item = &'a [GroupId]>,
    {
        let mut counts = vec![0usize; self.groups.len()];
        for panel in panels {
            for g in panel {
                if let Some(c) = counts.get_mut(g.index()) {
                    *c += 1;
                }
            }
        }
        let mut ids: Vec<GroupId> = self.group_ids().collect();
        ids.sort_by(|a, b| counts[b.index()].cmp(&counts[a.index()]).then(a.cmp(b)));
        self.frequency_rank = ids;
    }

    /// Name under which a test appears in linearized text and in the vocabulary.
    pub fn display_name(&self, test_id: u16) -> String {
        let test = &self.tests[test_id as usize];
        match self.naming_mode {
            NamingMode::RawName => test.name.clone(),
            NamingMode::StandardFeature => {
                let g = &self.groups[test.group_id.index()];
                let pos = g.tests.iter().position(|&t| t == test_id).unwrap_or(0);
                format!("feature{}", pos + 1)
            }
        }
    }

    pub fn max_group_size(&self) -> usize {
        self.groups.iter().map(|g| g.tests.len()).max().unwrap_or(0)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(&CatalogFile::from(self)).expect("catalog serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, DomainError> {
        let file: CatalogFile =
            toml::from_str(text).map_err(|e| DomainError::InvalidCatalog(e.to_string()))?;
        file.try_into()
    }
}

pub const CATALOG_SCHEMA_VERSION: u32 = 1;

/// Human-editable catalog document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogFile {
    schema_version: u32,
    naming_mode: NamingMode,
    /// Short names, most frequent first.
    frequency_rank: Vec<String>,
    groups: Vec<GroupEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupEntry {
    name: String,
    short_name: String,
    time_cost: u32,
    tests: Vec<String>,
}

impl From<&LabCatalog> for CatalogFile {
    fn from(c: &LabCatalog) -> Self {
        CatalogFile {
            schema_version: CATALOG_SCHEMA_VERSION,
            naming_mode: c.naming_mode,
            frequency_rank: c
                .frequency_rank
                .iter()
                .map(|g| c.groups[g.index()].short_name.clone())
                .collect(),
            groups: c
                .groups
                .iter()
                .map(|g| GroupEntry {
                    name: g.name.clone(),
                    short_name: g.short_name.clone(),
                    time_cost: g.time_cost,
                    tests: g.tests.iter().map(|&t| c.tests[t as usize].name.clone()).collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<CatalogFile> for LabCatalog {
    type Error = DomainError;

    fn try_from(f: CatalogFile) -> Result<Self, DomainError> {
        if f.schema_version != CATALOG_SCHEMA_VERSION {
            return Err(DomainError::InvalidCatalog(format!(
                "unsupported catalog schema version {}",
                f.schema_version
            )));
        }
        let mut groups = Vec::new();
        let mut tests = Vec::new();
        for (gi, entry) in f.groups.into_iter().enumerate() {
            let gid = GroupId(u8::try_from(gi).map_err(|_| {
                DomainError::InvalidCatalog("too many groups".into())
            })?);
            let mut ids = Vec::new();
            for name in entry.tests {
                let id = tests.len() as u16;
                tests.push(LabTest {
                    id,
                    name,
                    group_id: gid,
                });
                ids.push(id);
            }
            groups.push(LabGroup {
                id: gid,
                name: entry.name,
                short_name: entry.short_name,
                tests: ids,
                time_cost: entry.time_cost,
            });
        }
        let mut frequency_rank = Vec::new();
        for short in &f.frequency_rank {
            let g = groups
                .iter()
                .find(|g| &g.short_name == short)
                .ok_or_else(|| {
                    DomainError::InvalidCatalog(format!("frequency_rank names unknown group {short:?}"))
                })?;
            frequency_rank.push(g.id);
        }
        let catalog = LabCatalog {
            groups,
            tests,
            naming_mode: f.naming_mode,
            frequency_rank,
        };
        catalog.validate()?;
        Ok(catalog)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_costs_match_reference_table() {
        let c = default_catalog();
        c.validate().unwrap();
        assert_eq!(c.num_groups(), 12);
        assert_eq!(c.cost(groups::CBC), 30);
        assert_eq!(c.cost(groups::INFLAMMATION), 178);
        let expected = [30, 60, 48, 40, 4, 104, 100, 89, 122, 12, 70, 178];
        let costs: Vec<u32> = c.groups.iter().map(|g| g.time_cost).collect();
        assert_eq!(costs, expected);
        // 30+60+48+40+4+104+100+89+122+12+70+178, summed by hand
        assert_eq!(c.total_cost(), 857);
    }

    #[test]
    fn default_catalog_lists_67_tests() {
        let c = default_catalog();
        assert_eq!(c.tests.len(), 67);
        assert_eq!(c.group(groups::CBC).unwrap().tests.len(), 23);
        assert_eq!(c.group(groups::BLOOD_GAS).unwrap().tests.len(), 8);
    }

    #[test]
    fn tiers_follow_frequency_rank() {
        let c = default_catalog();
        assert_eq!(c.tier(groups::CHEM).unwrap(), CohortTier::Top);
        assert_eq!(c.tier(groups::CBC).unwrap(), CohortTier::Top);
        assert_eq!(c.tier(groups::LACTATE).unwrap(), CohortTier::Middle);
        assert_eq!(c.tier(groups::INFLAMMATION).unwrap(), CohortTier::Rare);
        assert!(c.tier(GroupId(40)).is_err());
        let rare: Vec<_> = c.group_ids().filter(|&g| c.tier(g).unwrap() == CohortTier::Rare).collect();
        assert_eq!(rare.len(), 4);
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let c = default_catalog().with_naming_mode(NamingMode::StandardFeature);
        let text = c.to_toml();
        let back = LabCatalog::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn hash_is_lowercase_hex_and_sensitive_to_costs() {
        let c = default_catalog();
        let h = c.hash();
        assert_eq!(h.len(), 64);
        assert!(h.chars().all(|ch| ch.is_ascii_digit() || ('a'..='f').contains(&ch)));
        let mut d = c.clone();
        d.groups[4].time_cost = 5;
        assert_ne!(d.hash(), h);
        // naming mode is presentation only
        assert_eq!(c.clone().with_naming_mode(NamingMode::StandardFeature).hash(), h);
    }

    #[test]
    fn delimiter_in_name_is_rejected() {
        let mut c = default_catalog();
        c.tests[0].name = "Hemato:crit".into();
        assert!(c.validate().is_err());
        let mut c = default_catalog();
        c.tests[3].name = "x [EOS]".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn standard_feature_names_are_positional() {
        let c = default_catalog().with_naming_mode(NamingMode::StandardFeature);
        let cbc = c.group(groups::CBC).unwrap();
        assert_eq!(c.display_name(cbc.tests[0]), "feature1");
        assert_eq!(c.display_name(cbc.tests[8]), "feature9");
    }

    #[test]
    fn rank_by_frequency_counts_panels() {
        let mut c = default_catalog();
        let panels = vec![
            vec![groups::LACTATE, groups::TOX],
            vec![groups::TOX],
            vec![groups::TOX, groups::CBC],
        ];
        c.rank_by_frequency(panels.iter().map(|p| p.as_slice()));
        assert_eq!(c.frequency_rank[0], groups::TOX);
        assert_eq!(c.frequency_rank[1], groups::CBC);
        assert_eq!(c.frequency_rank[2], groups::LACTATE);
    }
}
