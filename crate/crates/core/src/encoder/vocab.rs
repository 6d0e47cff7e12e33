use serde::{Deserialize, Serialize};

use crate::domain::{
    LabCatalog, LabResult, NamingMode, PatientRecord, TriageRecord, CHIEF_COMPLAINTS,
    CHIEF_COMPLAINT_FEATURE, NUM_TRIAGE_FEATURES, TRIAGE_FEATURES,
};

use super::EncoderError;

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const COLON: u32 = 2;
pub const PIPE: u32 = 3;
pub const OUTCOME_POS: u32 = 4;
pub const OUTCOME_NEG: u32 = 5;
pub const TRIAGE_GROUP: u32 = 6;
const FIRST_GROUP_TOKEN: u32 = 7;

pub const DEFAULT_NUM_BINS: usize = 16;
pub const DEFAULT_MAX_LEN: usize = 512;

const STRUCTURAL: [&str; 7] = ["[PAD]", "[EOS]", ":", "|", "[POS]", "[NEG]", "[TRIAGE]"];

/// Observed information up to some point of an episode: the triage block and
/// the lab groups acquired so far, in order.
#[derive(Debug, Clone, Copy)]
pub struct Prefix<'a> {
    pub triage: &'a TriageRecord,
    pub observed: &'a [LabResult],
}

impl<'a> Prefix<'a> {
    /// The triage block plus the first `k` groups of `record`.
    pub fn of(record: &'a PatientRecord, k: usize) -> Self {
        Prefix {
            triage: &record.triage,
            observed: &record.observed[..k],
        }
    }

    pub fn full(record: &'a PatientRecord) -> Self {
        Self::of(record, record.observed.len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    /// Index of the EOS closing each block: triage first, then one per group.
    pub eos_positions: Vec<usize>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Token inventory and value-bin boundaries.
///
/// Ids are laid out as: structural tokens, one token per lab group, the
/// triage feature names, the lab feature names (one per test, or one per
/// in-group position under [`NamingMode::StandardFeature`]), the bin tokens
/// and the chief-complaint tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocab {
    pub naming_mode: NamingMode,
    pub catalog_hash: String,
    pub num_bins: usize,
    pub max_len: usize,
    /// Test ids of every group, copied from the catalog.
    pub group_tests: Vec<Vec<u16>>,
    pub tokens: Vec<String>,
    /// Ascending bin boundaries per numeric feature: triage features first,
    /// then one entry per lab test id.
    pub boundaries: Vec<Vec<f64>>,
}

impl Vocab {
    /// Builds the vocabulary and fits quantile bins on `train`.
    pub fn fit(
        catalog: &LabCatalog,
        train: &[PatientRecord],
        num_bins: usize,
        max_len: usize,
    ) -> Result<Vocab, EncoderError> {
        catalog.validate()?;
        if num_bins < 2 {
            return Err(EncoderError::Vocab("need at least two bins".into()));
        }
        let n_features = NUM_TRIAGE_FEATURES + catalog.tests.len();
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); n_features];
        for p in train {
            for (f, &v) in p.triage.values.iter().enumerate() {
                columns[f].push(v);
            }
            for r in &p.observed {
                let g = catalog.group(r.group_id)?;
                for (&t, &v) in g.tests.iter().zip(&r.values) {
                    columns[NUM_TRIAGE_FEATURES + t as usize].push(v);
                }
            }
        }
        let boundaries = columns
            .into_iter()
            .map(|mut col| quantile_boundaries(&mut col, num_bins))
            .collect();

        let mut tokens: Vec<String> = STRUCTURAL.iter().map(|s| s.to_string()).collect();
        tokens.extend(catalog.groups.iter().map(|g| format!("[G:{}]", g.short_name)));
        tokens.extend(TRIAGE_FEATURES.iter().map(|s| s.to_string()));
        tokens.push(CHIEF_COMPLAINT_FEATURE.to_string());
        match catalog.naming_mode {
            NamingMode::RawName => tokens.extend(catalog.tests.iter().map(|t| t.name.clone())),
            NamingMode::StandardFeature => {
                tokens.extend((1..=catalog.max_group_size()).map(|i| format!("feature{i}")))
            }
        }
        tokens.extend((0..num_bins).map(|b| format!("[BIN_{b}]")));
        tokens.extend(CHIEF_COMPLAINTS.iter().map(|c| format!("[CC:{c}]")));

        Ok(Vocab {
            naming_mode: catalog.naming_mode,
            catalog_hash: catalog.hash(),
            num_bins,
            max_len,
            group_tests: catalog.groups.iter().map(|g| g.tests.clone()).collect(),
            tokens,
            boundaries,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_groups(&self) -> usize {
        self.group_tests.len()
    }

    fn num_tests(&self) -> usize {
        self.group_tests.iter().map(Vec::len).sum()
    }

    fn triage_name_base(&self) -> u32 {
        FIRST_GROUP_TOKEN + self.num_groups() as u32
    }

    fn lab_name_base(&self) -> u32 {
        self.triage_name_base() + NUM_TRIAGE_FEATURES as u32 + 1
    }

    fn lab_name_count(&self) -> usize {
        match self.naming_mode {
            NamingMode::RawName => self.num_tests(),
            NamingMode::StandardFeature => {
                self.group_tests.iter().map(Vec::len).max().unwrap_or(0)
            }
        }
    }

    fn bin_base(&self) -> u32 {
        self.lab_name_base() + self.lab_name_count() as u32
    }

    fn complaint_base(&self) -> u32 {
        self.bin_base() + self.num_bins as u32
    }

    pub fn group_token(&self, g: usize) -> u32 {
        FIRST_GROUP_TOKEN + g as u32
    }

    pub fn bin_token(&self, bin: usize) -> u32 {
        self.bin_base() + bin as u32
    }

    /// Number of boundaries strictly below `value`: a value equal to a
    /// boundary falls in the lower bin.
    pub fn bin_of(&self, feature: usize, value: f64) -> usize {
        self.boundaries[feature].partition_point(|&b| b < value)
    }

    /// Checks internal consistency and that the vocabulary was built for `catalog`.
    /// The naming mode is the vocabulary's own; the catalog's setting is ignored.
    pub fn check(&self, catalog: &LabCatalog) -> Result<(), EncoderError> {
        let hash = catalog.hash();
        if hash != self.catalog_hash {
            return Err(EncoderError::CatalogMismatch {
                expected: self.catalog_hash.clone(),
                found: hash,
            });
        }
        self.check_layout()
    }

    pub(crate) fn check_layout(&self) -> Result<(), EncoderError> {
        let expected = self.complaint_base() as usize + CHIEF_COMPLAINTS.len();
        if self.tokens.len() != expected {
            return Err(EncoderError::Vocab(format!(
                "{} tokens, layout implies {expected}",
                self.tokens.len()
            )));
        }
        if self.boundaries.len() != NUM_TRIAGE_FEATURES + self.num_tests()
            || self.boundaries.iter().any(|b| b.len() + 1 != self.num_bins)
        {
            return Err(EncoderError::Vocab("bin boundaries do not match the layout".into()));
        }
        Ok(())
    }

    fn push_pair(out: &mut Vec<u32>, first: bool, name: u32, value: u32) {
        if !first {
            out.push(PIPE);
        }
        out.extend([name, COLON, value]);
    }

    /// `[TRIAGE] name : bin | ... | Chief Complaint : [CC:..] [EOS]`.
    pub fn triage_block(&self, triage: &TriageRecord) -> Result<Vec<u32>, EncoderError> {
        triage.validate()?;
        let mut out = vec![TRIAGE_GROUP];
        let base = self.triage_name_base();
        for (f, &v) in triage.values.iter().enumerate() {
            let bin = self.bin_token(self.bin_of(f, v));
            Self::push_pair(&mut out, f == 0, base + f as u32, bin);
        }
        let cc = self.complaint_base() + triage.chief_complaint as u32;
        Self::push_pair(&mut out, false, base + NUM_TRIAGE_FEATURES as u32, cc);
        out.push(EOS);
        Ok(out)
    }

    /// `[G:group] name : bin | ... [EOS]`.
    pub fn group_block(&self, result: &LabResult) -> Result<Vec<u32>, EncoderError> {
        let g = result.group_id.index();
        let tests = self
            .group_tests
            .get(g)
            .ok_or(EncoderError::Vocab(format!("unknown group {g}")))?;
        if tests.len() != result.values.len() {
            return Err(EncoderError::Vocab(format!(
                "group {g} expects {} values, got {}",
                tests.len(),
                result.values.len()
            )));
        }
        let mut out = vec![self.group_token(g)];
        for (pos, (&t, &v)) in tests.iter().zip(&result.values).enumerate() {
            let name = match self.naming_mode {
                NamingMode::RawName => self.lab_name_base() + t as u32,
                NamingMode::StandardFeature => self.lab_name_base() + pos as u32,
            };
            let bin = self.bin_token(self.bin_of(NUM_TRIAGE_FEATURES + t as usize, v));
            Self::push_pair(&mut out, pos == 0, name, bin);
        }
        out.push(EOS);
        Ok(out)
    }

    pub fn tokenize(&self, prefix: Prefix<'_>) -> Result<TokenSeq, EncoderError> {
        let mut ids = self.triage_block(prefix.triage)?;
        let mut eos_positions = vec![ids.len() - 1];
        for r in prefix.observed {
            ids.extend(self.group_block(r)?);
            eos_positions.push(ids.len() - 1);
        }
        if ids.len() > self.max_len {
            return Err(EncoderError::TooLong {
                len: ids.len(),
                max: self.max_len,
            });
        }
        Ok(TokenSeq { ids, eos_positions })
    }
}

fn quantile_boundaries(col: &mut [f64], num_bins: usize) -> Vec<f64> {
    if col.is_empty() {
        return vec![0.0; num_bins - 1];
    }
    col.sort_by(f64::total_cmp);
    let n = col.len();
    (1..num_bins)
        .map(|i| {
            let rank = (i * n).div_ceil(num_bins);
            col[rank.saturating_sub(1).min(n - 1)]
        })
        .collect()
}

/// Shortest decimal with at most one fractional digit.
pub fn render_value(v: f64) -> String {
    let s = format!("{v:.1}");
    let s = s.strip_suffix(".0").unwrap_or(&s).to_string();
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

fn join_pairs<'a>(pairs: impl Iterator<Item = (String, String)> + 'a) -> String {
    let body: Vec<String> = pairs.map(|(n, v)| format!("{n} : {v}")).collect();
    format!("{} [EOS]", body.join(" | "))
}

/// Text form of one lab group: `name1 : value1 | name2 : value2 [EOS]`.
pub fn linearize_group(
    result: &LabResult,
    catalog: &LabCatalog,
    naming_mode: NamingMode,
) -> Result<String, EncoderError> {
    result.validate(catalog)?;
    let g = &catalog.groups[result.group_id.index()];
    let names = g.tests.iter().enumerate().map(|(pos, &t)| match naming_mode {
        NamingMode::RawName => catalog.tests[t as usize].name.clone(),
        NamingMode::StandardFeature => format!("feature{}", pos + 1),
    });
    Ok(join_pairs(
        names.zip(result.values.iter().map(|&v| render_value(v))),
    ))
}

/// Text form of a prefix: the triage block then every group, space separated.
pub fn linearize_text(
    prefix: Prefix<'_>,
    catalog: &LabCatalog,
    naming_mode: NamingMode,
) -> Result<String, EncoderError> {
    catalog.validate()?;
    prefix.triage.validate()?;
    let triage = TRIAGE_FEATURES
        .iter()
        .zip(&prefix.triage.values)
        .map(|(n, &v)| (n.to_string(), render_value(v)))
        .chain(std::iter::once((
            CHIEF_COMPLAINT_FEATURE.to_string(),
            CHIEF_COMPLAINTS[prefix.triage.chief_complaint as usize].to_string(),
        )));
    let mut blocks = vec![join_pairs(triage)];
    for r in prefix.observed {
        blocks.push(linearize_group(r, catalog, naming_mode)?);
    }
    Ok(blocks.join(" "))
}

/// Splits linearized text back into `(name, value)` pairs per block.
pub fn parse_linearized(text: &str) -> Vec<Vec<(String, String)>> {
    text.split("[EOS]")
        .map(str::trim)
        .filter(|b| !b.is_empty())
        .map(|block| {
            block
                .split(" | ")
                .filter_map(|pair| {
                    let (n, v) = pair.split_once(" : ")?;
                    Some((n.trim().to_string(), v.trim().to_string()))
                })
                .collect()
        })
        .collect()
}
