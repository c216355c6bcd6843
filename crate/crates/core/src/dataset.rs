//! Annotation records, population strata and cultural-index tables.
//!
//! CSV with a header row is the only input format. Lines starting with `#`
//! are treated as comments so artifacts written by this toolkit (which carry
//! a provenance header) can be read back directly.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("no records survive filtering")]
    EmptyAfterFilter,
    #[error("no population row for cell {0}")]
    MissingCell(CellKey),
    #[error("invalid strata table: {0}")]
    InvalidStrata(String),
    #[error("invalid hofstede table: {0}")]
    InvalidHofstede(String),
    #[error("country `{0}` has no hofstede row")]
    MissingHofstede(String),
}

type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
    Other,
}

impl Gender {
    pub const ALL: [Gender; 3] = [Gender::Female, Gender::Male, Gender::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Female => "female",
            Gender::Male => "male",
            Gender::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Gender> {
        match s.trim().to_ascii_lowercase().as_str() {
            "female" | "f" | "woman" => Some(Gender::Female),
            "male" | "m" | "man" => Some(Gender::Male),
            "other" | "non-binary" | "nonbinary" => Some(Gender::Other),
            _ => None,
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeGroup {
    #[serde(rename = "18-24")]
    Age18To24,
    #[serde(rename = "25-34")]
    Age25To34,
    #[serde(rename = "35-44")]
    Age35To44,
    #[serde(rename = "45-55")]
    Age45To55,
    #[serde(rename = "55+")]
    Age55Plus,
}

impl AgeGroup {
    pub const ALL: [AgeGroup; 5] = [
        AgeGroup::Age18To24,
        AgeGroup::Age25To34,
        AgeGroup::Age35To44,
        AgeGroup::Age45To55,
        AgeGroup::Age55Plus,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgeGroup::Age18To24 => "18-24",
            AgeGroup::Age25To34 => "25-34",
            AgeGroup::Age35To44 => "35-44",
            AgeGroup::Age45To55 => "45-55",
            AgeGroup::Age55Plus => "55+",
        }
    }

    /// Ordinal code 0..=4, used as an integer covariate for matching.
    pub fn ordinal(self) -> u8 {
        self as u8
    }

    pub fn parse(s: &str) -> Option<AgeGroup> {
        let t = s.trim();
        AgeGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == t)
            .or(match t {
                "18 - 24" => Some(AgeGroup::Age18To24),
                "25 - 34" => Some(AgeGroup::Age25To34),
                "35 - 44" => Some(AgeGroup::Age35To44),
                "45 - 55" => Some(AgeGroup::Age45To55),
                "55 +" | "56+" => Some(AgeGroup::Age55Plus),
                _ => None,
            })
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Lower bounds (inclusive, in years) of the five age buckets, used when an
/// input file carries a numeric age instead of a bucket label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgeBuckets {
    pub lower_bounds: [u32; 5],
}

impl Default for AgeBuckets {
    fn default() -> Self {
        AgeBuckets { lower_bounds: [18, 25, 35, 45, 56] }
    }
}

impl AgeBuckets {
    /// Maps an age in years onto a bucket. Ages below the first bound go to
    /// the first bucket; the second value is `true` when that clamping
    /// happened.
    pub fn bucket(&self, age: u32) -> (AgeGroup, bool) {
        if age < self.lower_bounds[0] {
            return (AgeGroup::Age18To24, true);
        }
        let idx = self.lower_bounds.iter().rposition(|&b| age >= b).unwrap_or(0);
        (AgeGroup::ALL[idx], false)
    }
}

/// One respondent's vote on one (item, label) pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub respondent_id: Arc<str>,
    pub country: Arc<str>,
    pub gender: Gender,
    pub age_group: AgeGroup,
    pub survey_language: Arc<str>,
    pub item_id: Arc<str>,
    pub label_id: Arc<str>,
    pub annotated: bool,
    pub play_frequency: u8,
    pub english_play_frequency: u8,
    pub ambassador: bool,
}

impl AnnotationRecord {
    pub fn cell(&self) -> CellKey {
        CellKey {
            country: self.country.clone(),
            gender: self.gender,
            age_group: self.age_group,
        }
    }

    pub fn pair(&self) -> PairKey {
        PairKey {
            item_id: self.item_id.clone(),
            label_id: self.label_id.clone(),
        }
    }
}

/// A poststratification cell: country x gender x age group.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub country: Arc<str>,
    pub gender: Gender,
    pub age_group: AgeGroup,
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.country, self.gender, self.age_group)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairKey {
    pub item_id: Arc<str>,
    pub label_id: Arc<str>,
}

impl PairKey {
    pub fn new(item: &str, label: &str) -> Self {
        PairKey { item_id: item.into(), label_id: label.into() }
    }
}

impl fmt::Display for PairKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.item_id, self.label_id)
    }
}

/// Canonical annotation columns, in file order.
pub const ANNOTATION_COLUMNS: [&str; 11] = [
    "respondent_id",
    "country",
    "gender",
    "age_group",
    "survey_language",
    "item_id",
    "label_id",
    "annotated",
    "play_frequency",
    "english_play_frequency",
    "ambassador",
];

/// Maps canonical column names onto the headers used by a particular file.
/// Columns without an entry are looked up under their canonical name.
#[derive(Debug, Clone, Default)]
pub struct ColumnMapping {
    renames: BTreeMap<String, String>,
    pub age_buckets: AgeBuckets,
}

impl ColumnMapping {
    pub fn with(mut self, canonical: &str, header: &str) -> Self {
        self.renames.insert(canonical.to_string(), header.to_string());
        self
    }

    pub fn header_for<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.renames.get(canonical).map(String::as_str).unwrap_or(canonical)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowErrorKind {
    BadEnum { field: String, value: String },
    BadValue { field: String, value: String },
    DuplicateTriple { respondent_id: String, item_id: String, label_id: String },
}

/// A rejected input row. `row` is the 1-based data row number (the header
/// is row 0).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowError {
    pub row: usize,
    #[serde(flatten)]
    pub kind: RowErrorKind,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedAnnotations {
    pub records: Vec<AnnotationRecord>,
    pub ledger: Vec<RowError>,
    /// Rows whose numeric age was clamped into the first bucket.
    pub age_warnings: usize,
}

#[derive(Default)]
struct Interner(HashMap<String, Arc<str>>);

impl Interner {
    fn get(&mut self, s: &str) -> Arc<str> {
        if let Some(a) = self.0.get(s) {
            return a.clone();
        }
        let a: Arc<str> = Arc::from(s);
        self.0.insert(s.to_string(), a.clone());
        a
    }
}

fn csv_reader<R: Read>(rdr: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(rdr)
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "y" | "t" => Some(true),
        "0" | "false" | "no" | "n" | "f" => Some(false),
        _ => None,
    }
}

fn parse_ordinal(s: &str) -> Option<u8> {
    s.trim().parse::<u8>().ok().filter(|v| *v <= 5)
}

pub fn load_annotations(path: &Path, schema: &ColumnMapping) -> Result<LoadedAnnotations> {
    read_annotations(open(path)?, schema)
}

/// Parses annotation rows. File-level problems (a missing column, malformed
/// CSV) are errors; row-level problems land in the returned ledger.
pub fn read_annotations<R: Read>(rdr: R, schema: &ColumnMapping) -> Result<LoadedAnnotations> {
    let mut reader = csv_reader(rdr);
    let headers = reader.headers()?.clone();
    let mut idx = [0usize; 11];
    for (slot, canonical) in idx.iter_mut().zip(ANNOTATION_COLUMNS) {
        let name = schema.header_for(canonical);
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))?;
    }
    let mut out = LoadedAnnotations::default();
    let mut interner = Interner::default();
    let mut seen: HashSet<(Arc<str>, Arc<str>, Arc<str>)> = HashSet::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let field = |k: usize| rec.get(idx[k]).unwrap_or("");
        let bad_enum = |k: usize| RowError {
            row,
            kind: RowErrorKind::BadEnum {
                field: ANNOTATION_COLUMNS[k].to_string(),
                value: field(k).to_string(),
            },
        };
        let bad_value = |k: usize| RowError {
            row,
            kind: RowErrorKind::BadValue {
                field: ANNOTATION_COLUMNS[k].to_string(),
                value: field(k).to_string(),
            },
        };
        let Some(gender) = Gender::parse(field(2)) else {
            out.ledger.push(bad_enum(2));
            continue;
        };
        let age_group = match AgeGroup::parse(field(3)) {
            Some(a) => a,
            None => match field(3).parse::<u32>() {
                Ok(age) => {
                    let (g, clamped) = schema.age_buckets.bucket(age);
                    if clamped {
                        log::warn!("row {row}: age {age} below first bucket, mapped to {g}");
                        out.age_warnings += 1;
                    }
                    g
                }
                Err(_) => {
                    out.ledger.push(bad_enum(3));
                    continue;
                }
            },
        };
        let Some(annotated) = parse_bool(field(7)) else {
            out.ledger.push(bad_value(7));
            continue;
        };
        let Some(play_frequency) = parse_ordinal(field(8)) else {
            out.ledger.push(bad_value(8));
            continue;
        };
        let Some(english_play_frequency) = parse_ordinal(field(9)) else {
            out.ledger.push(bad_value(9));
            continue;
        };
        let Some(ambassador) = parse_bool(field(10)) else {
            out.ledger.push(bad_value(10));
            continue;
        };
        if field(0).is_empty() || field(1).is_empty() || field(5).is_empty() || field(6).is_empty() {
            let k = [0, 1, 5, 6].into_iter().find(|&k| field(k).is_empty()).unwrap_or(0);
            out.ledger.push(bad_value(k));
            continue;
        }
        let record = AnnotationRecord {
            respondent_id: interner.get(field(0)),
            country: interner.get(field(1)),
            gender,
            age_group,
            survey_language: interner.get(field(4)),
            item_id: interner.get(field(5)),
            label_id: interner.get(field(6)),
            annotated,
            play_frequency,
            english_play_frequency,
            ambassador,
        };
        let triple = (
            record.respondent_id.clone(),
            record.item_id.clone(),
            record.label_id.clone(),
        );
        if !seen.insert(triple) {
            out.ledger.push(RowError {
                row,
                kind: RowErrorKind::DuplicateTriple {
                    respondent_id: field(0).to_string(),
                    item_id: field(5).to_string(),
                    label_id: field(6).to_string(),
                },
            });
            continue;
        }
        out.records.push(record);
    }
    Ok(out)
}

/// Writes records in the canonical annotations.csv layout.
pub fn write_annotations<W: std::io::Write>(w: W, records: &[AnnotationRecord]) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(ANNOTATION_COLUMNS)?;
    for r in records {
        wtr.write_record([
            &*r.respondent_id,
            &*r.country,
            r.gender.as_str(),
            r.age_group.as_str(),
            &*r.survey_language,
            &*r.item_id,
            &*r.label_id,
            if r.annotated { "1" } else { "0" },
            &r.play_frequency.to_string(),
            &r.english_play_frequency.to_string(),
            if r.ambassador { "1" } else { "0" },
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterPolicy {
    pub excluded_countries: BTreeSet<String>,
    pub excluded_items: BTreeSet<String>,
    pub excluded_genders: BTreeSet<Gender>,
    pub min_subgroup_size: usize,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy {
            excluded_countries: BTreeSet::new(),
            excluded_items: BTreeSet::new(),
            excluded_genders: BTreeSet::new(),
            min_subgroup_size: 6,
        }
    }
}

impl FilterPolicy {
    pub fn excluding_countries<I: IntoIterator<Item = S>, S: Into<String>>(mut self, c: I) -> Self {
        self.excluded_countries.extend(c.into_iter().map(Into::into));
        self
    }

    pub fn with_min_subgroup_size(mut self, n: usize) -> Self {
        self.min_subgroup_size = n.max(1);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DroppedCell {
    pub cell: CellKey,
    pub respondents: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FilterReport {
    pub input_records: usize,
    pub removed_by_country: usize,
    pub removed_by_item: usize,
    pub removed_by_gender: usize,
    pub removed_by_privacy: usize,
    pub dropped_cells: Vec<DroppedCell>,
    pub output_records: usize,
}

/// Removes excluded countries, items and genders, then every
/// (country, gender, age group) cell with fewer than `min_subgroup_size`
/// distinct respondents. Surviving records are returned untouched and in
/// their original order.
pub fn apply_filters(
    records: &[AnnotationRecord],
    policy: &FilterPolicy,
) -> Result<(Vec<AnnotationRecord>, FilterReport)> {
    let mut report = FilterReport { input_records: records.len(), ..Default::default() };
    let mut kept: Vec<&AnnotationRecord> = Vec::with_capacity(records.len());
    for r in records {
        if policy.excluded_countries.contains(&*r.country) {
            report.removed_by_country += 1;
        } else if policy.excluded_items.contains(&*r.item_id) {
            report.removed_by_item += 1;
        } else if policy.excluded_genders.contains(&r.gender) {
            report.removed_by_gender += 1;
        } else {
            kept.push(r);
        }
    }
    let mut respondents: BTreeMap<CellKey, HashSet<&str>> = BTreeMap::new();
    for r in &kept {
        respondents.entry(r.cell()).or_default().insert(&r.respondent_id);
    }
    let min = policy.min_subgroup_size.max(1);
    let small: HashSet<CellKey> = respondents
        .iter()
        .filter(|(_, ids)| ids.len() < min)
        .map(|(cell, ids)| {
            report.dropped_cells.push(DroppedCell { cell: cell.clone(), respondents: ids.len() });
            cell.clone()
        })
        .collect();
    let out: Vec<AnnotationRecord> = kept
        .into_iter()
        .filter(|r| {
            let drop = !small.is_empty() && small.contains(&r.cell());
            if drop {
                report.removed_by_privacy += 1;
            }
            !drop
        })
        .cloned()
        .collect();
    if out.is_empty() {
        return Err(DatasetError::EmptyAfterFilter);
    }
    report.output_records = out.len();
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrataCell {
    pub country: Arc<str>,
    pub gender: Gender,
    pub age_group: AgeGroup,
    pub weight: f64,
}

impl StrataCell {
    pub fn key(&self) -> CellKey {
        CellKey { country: self.country.clone(), gender: self.gender, age_group: self.age_group }
    }
}

/// Normalized poststratification table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Strata {
    pub cells: Vec<StrataCell>,
    /// True when weights were computed from the sample itself rather than a
    /// population table.
    pub empirical: bool,
}

impl Strata {
    pub fn weight(&self, key: &CellKey) -> Option<f64> {
        self.cells.iter().find(|c| c.key() == *key).map(|c| c.weight)
    }

    pub fn weight_map(&self) -> BTreeMap<CellKey, f64> {
        self.cells.iter().map(|c| (c.key(), c.weight)).collect()
    }

    pub fn countries(&self) -> Vec<Arc<str>> {
        let set: BTreeSet<Arc<str>> = self.cells.iter().map(|c| c.country.clone()).collect();
        set.into_iter().collect()
    }

    pub fn total(&self) -> f64 {
        self.cells.iter().map(|c| c.weight).sum()
    }
}

pub fn load_strata(path: &Path) -> Result<Vec<StrataCell>> {
    read_strata(open(path)?)
}

pub fn read_strata<R: Read>(rdr: R) -> Result<Vec<StrataCell>> {
    let mut reader = csv_reader(rdr);
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
    };
    let (ci, gi, ai, wi) = (col("country")?, col("gender")?, col("age_group")?, col("weight")?);
    let mut interner = Interner::default();
    let mut cells = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let get = |k: usize| rec.get(k).unwrap_or("");
        let row = i + 1;
        let gender = Gender::parse(get(gi))
            .ok_or_else(|| DatasetError::InvalidStrata(format!("row {row}: bad gender `{}`", get(gi))))?;
        let age_group = AgeGroup::parse(get(ai))
            .ok_or_else(|| DatasetError::InvalidStrata(format!("row {row}: bad age group `{}`", get(ai))))?;
        let weight: f64 = get(wi)
            .parse()
            .ok()
            .filter(|w: &f64| w.is_finite() && *w >= 0.0)
            .ok_or_else(|| DatasetError::InvalidStrata(format!("row {row}: bad weight `{}`", get(wi))))?;
        let cell = StrataCell { country: interner.get(get(ci)), gender, age_group, weight };
        if !seen.insert(cell.key()) {
            return Err(DatasetError::InvalidStrata(format!("row {row}: duplicate cell {}", cell.key())));
        }
        cells.push(cell);
    }
    Ok(cells)
}

pub fn write_strata<W: std::io::Write>(w: W, cells: &[StrataCell]) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["country", "gender", "age_group", "weight"])?;
    for c in cells {
        wtr.write_record([&*c.country, c.gender.as_str(), c.age_group.as_str(), &format!("{}", c.weight)])?;
    }
    wtr.flush()?;
    Ok(())
}

/// One stratum per observed (country, gender, age group) cell, weights
/// normalized to sum to one. Without a population file the weights are the
/// empirical record counts.
pub fn build_strata(records: &[AnnotationRecord], population_path: Option<&Path>) -> Result<Strata> {
    match population_path {
        Some(p) => build_strata_with(records, Some(&load_strata(p)?)),
        None => build_strata_with(records, None),
    }
}

pub fn build_strata_with(records: &[AnnotationRecord], population: Option<&[StrataCell]>) -> Result<Strata> {
    let mut observed: BTreeMap<CellKey, f64> = BTreeMap::new();
    for r in records {
        *observed.entry(r.cell()).or_default() += 1.0;
    }
    let weighted: Vec<(CellKey, f64)> = match population {
        None => observed.into_iter().collect(),
        Some(pop) => {
            let table: HashMap<CellKey, f64> = pop.iter().map(|c| (c.key(), c.weight)).collect();
            observed
                .into_keys()
                .map(|k| match table.get(&k) {
                    Some(w) => Ok((k, *w)),
                    None => Err(DatasetError::MissingCell(k)),
                })
                .collect::<Result<_>>()?
        }
    };
    let total: f64 = weighted.iter().map(|(_, w)| w).sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(DatasetError::InvalidStrata("weights do not sum to a positive number".into()));
    }
    let cells = weighted
        .into_iter()
        .map(|(k, w)| StrataCell { country: k.country, gender: k.gender, age_group: k.age_group, weight: w / total })
        .collect();
    Ok(Strata { cells, empirical: population.is_none() })
}

/// The six national-culture indices, in file order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    PowerDistance,
    Individualism,
    Masculinity,
    Uncertainty,
    LongTermOrientation,
    Indulgence,
}

impl Dimension {
    pub const ALL: [Dimension; 6] = [
        Dimension::PowerDistance,
        Dimension::Individualism,
        Dimension::Masculinity,
        Dimension::Uncertainty,
        Dimension::LongTermOrientation,
        Dimension::Indulgence,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::PowerDistance => "power_distance",
            Dimension::Individualism => "individualism",
            Dimension::Masculinity => "masculinity",
            Dimension::Uncertainty => "uncertainty",
            Dimension::LongTermOrientation => "long_term_orientation",
            Dimension::Indulgence => "indulgence",
        }
    }

    pub fn parse(s: &str) -> Option<Dimension> {
        Dimension::ALL.into_iter().find(|d| d.as_str() == s.trim())
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HofstedeRow {
    pub country: Arc<str>,
    /// Values on the 0..1 scale, indexed by [`Dimension::index`].
    pub values: [f64; 6],
}

impl HofstedeRow {
    pub fn get(&self, d: Dimension) -> f64 {
        self.values[d.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct HofstedeTable {
    pub rows: Vec<HofstedeRow>,
}

const BUNDLED_HOFSTEDE: &str = include_str!("../fixtures/hofstede.csv");

impl HofstedeTable {
    /// Published six-dimension indices for the surveyed countries; see
    /// `fixtures/hofstede.md` for provenance.
    pub fn bundled() -> HofstedeTable {
        read_hofstede(BUNDLED_HOFSTEDE.as_bytes()).expect("bundled hofstede fixture parses")
    }

    pub fn get(&self, country: &str) -> Option<&HofstedeRow> {
        self.rows.iter().find(|r| &*r.country == country)
    }

    pub fn countries(&self) -> Vec<Arc<str>> {
        self.rows.iter().map(|r| r.country.clone()).collect()
    }

    pub fn restricted_to(&self, countries: &[Arc<str>]) -> HofstedeTable {
        HofstedeTable {
            rows: self.rows.iter().filter(|r| countries.contains(&r.country)).cloned().collect(),
        }
    }

    /// Fails on the first record country without a row.
    pub fn check_coverage(&self, records: &[AnnotationRecord]) -> Result<()> {
        let countries: BTreeSet<&str> = records.iter().map(|r| &*r.country).collect();
        for c in countries {
            if self.get(c).is_none() {
                return Err(DatasetError::MissingHofstede(c.to_string()));
            }
        }
        Ok(())
    }
}

pub fn load_hofstede(path: &Path) -> Result<HofstedeTable> {
    read_hofstede(open(path)?)
}

/// Reads 0..100 indices and rescales them to 0..1.
pub fn read_hofstede<R: Read>(rdr: R) -> Result<HofstedeTable> {
    let mut reader = csv_reader(rdr);
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
    };
    let ci = col("country")?;
    let dims: Vec<usize> = Dimension::ALL.iter().map(|d| col(d.as_str())).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let country = rec.get(ci).unwrap_or("").to_string();
        if !seen.insert(country.clone()) {
            return Err(DatasetError::InvalidHofstede(format!("duplicate country `{country}`")));
        }
        let mut values = [0.0; 6];
        for (v, &k) in values.iter_mut().zip(&dims) {
            let raw: f64 = rec
                .get(k)
                .and_then(|s| s.parse().ok())
                .filter(|x: &f64| (0.0..=100.0).contains(x))
                .ok_or_else(|| {
                    DatasetError::InvalidHofstede(format!("row {}: value `{}` outside 0..100", i + 1, rec.get(k).unwrap_or("")))
                })?;
            *v = raw / 100.0;
        }
        rows.push(HofstedeRow { country: country.into(), values });
    }
    Ok(HofstedeTable { rows })
}

pub fn write_hofstede<W: std::io::Write>(w: W, table: &HofstedeTable) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["country"];
    header.extend(Dimension::ALL.iter().map(|d| d.as_str()));
    wtr.write_record(&header)?;
    for r in &table.rows {
        let mut row = vec![r.country.to_string()];
        row.extend(r.values.iter().map(|v| format!("{}", (v * 100.0 * 1e6).round() / 1e6)));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Distinct respondents per country, in country order.
pub fn respondents_by_country(records: &[AnnotationRecord]) -> BTreeMap<Arc<str>, usize> {
    let mut sets: BTreeMap<Arc<str>, HashSet<&str>> = BTreeMap::new();
    for r in records {
        sets.entry(r.country.clone()).or_default().insert(&r.respondent_id);
    }
    sets.into_iter().map(|(k, v)| (k, v.len())).collect()
}

/// Groups records by (item, label) pair, preserving record order within a
/// group.
pub fn group_by_pair(records: &[AnnotationRecord]) -> BTreeMap<PairKey, Vec<&AnnotationRecord>> {
    let mut out: BTreeMap<PairKey, Vec<&AnnotationRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.pair()).or_default().push(r);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "respondent_id,country,gender,age_group,survey_language,item_id,label_id,annotated,play_frequency,english_play_frequency,ambassador\n";

    fn parse(body: &str) -> LoadedAnnotations {
        read_annotations(format!("{HEADER}{body}").as_bytes(), &ColumnMapping::default()).unwrap()
    }

    fn rec(id: &str, country: &str, gender: Gender, age: AgeGroup) -> AnnotationRecord {
        AnnotationRecord {
            respondent_id: id.into(),
            country: country.into(),
            gender,
            age_group: age,
            survey_language: "en".into(),
            item_id: "g1".into(),
            label_id: "l1".into(),
            annotated: true,
            play_frequency: 3,
            english_play_frequency: 3,
            ambassador: false,
        }
    }

    #[test]
    fn well_formed_file_loads() {
        let got = parse(
            "r1,US,male,25-34,en,g1,l1,1,3,5,0\n\
             r1,US,male,25-34,en,g1,l2,0,3,5,0\n\
             r2,KR,female,18-24,ko,g1,l1,true,2,1,1\n",
        );
        assert_eq!(got.records.len(), 3);
        assert!(got.ledger.is_empty());
        assert_eq!(got.records[2].gender, Gender::Female);
        assert!(got.records[2].ambassador);
    }

    #[test]
    fn unknown_gender_is_rejected() {
        let got = parse("r1,US,unknown,25-34,en,g1,l1,1,3,5,0\nr2,US,male,25-34,en,g1,l1,1,3,5,0\n");
        assert_eq!(got.records.len(), 1);
        assert_eq!(
            got.ledger,
            vec![RowError {
                row: 1,
                kind: RowErrorKind::BadEnum { field: "gender".into(), value: "unknown".into() }
            }]
        );
    }

    #[test]
    fn duplicate_triple_second_occurrence_rejected() {
        let got = parse("r1,US,male,25-34,en,g1,l1,1,3,5,0\nr1,US,male,25-34,en,g1,l1,0,3,5,0\n");
        assert_eq!(got.records.len(), 1);
        assert!(got.records[0].annotated);
        assert_eq!(got.ledger.len(), 1);
        assert_eq!(got.ledger[0].row, 2);
        assert!(matches!(got.ledger[0].kind, RowErrorKind::DuplicateTriple { .. }));
    }

    #[test]
    fn ordinal_out_of_range_and_bad_bool() {
        let got = parse("r1,US,male,25-34,en,g1,l1,1,9,5,0\nr2,US,male,25-34,en,g1,l1,maybe,3,5,0\n");
        assert!(got.records.is_empty());
        assert_eq!(got.ledger.len(), 2);
    }

    #[test]
    fn missing_column_is_file_error() {
        let err = read_annotations("respondent_id,country\nr1,US\n".as_bytes(), &ColumnMapping::default());
        assert!(matches!(err, Err(DatasetError::MissingColumn(c)) if c == "gender"));
    }

    #[test]
    fn column_mapping_renames_headers() {
        let body = HEADER.replace("respondent_id", "rid") + "r1,US,male,25-34,en,g1,l1,1,3,5,0\n";
        let schema = ColumnMapping::default().with("respondent_id", "rid");
        assert_eq!(read_annotations(body.as_bytes(), &schema).unwrap().records.len(), 1);
    }

    #[test]
    fn numeric_ages_map_to_nearest_bucket() {
        let got = parse("r1,US,male,17,en,g1,l1,1,3,5,0\nr2,US,male,60,en,g1,l1,1,3,5,0\nr3,US,male,30,en,g1,l1,1,3,5,0\n");
        let ages: Vec<_> = got.records.iter().map(|r| r.age_group).collect();
        assert_eq!(ages, vec![AgeGroup::Age18To24, AgeGroup::Age55Plus, AgeGroup::Age25To34]);
        assert_eq!(got.age_warnings, 1);
    }

    #[test]
    fn country_exclusion_is_set_difference() {
        let mut records = Vec::new();
        for i in 0..10 {
            records.push(rec(&format!("in{i}"), "IN", Gender::Male, AgeGroup::Age25To34));
        }
        for i in 0..90 {
            records.push(rec(&format!("us{i}"), "US", Gender::Male, AgeGroup::Age25To34));
        }
        let policy = FilterPolicy::default().excluding_countries(["IN"]);
        let (out, report) = apply_filters(&records, &policy).unwrap();
        assert_eq!(out.len(), 90);
        assert_eq!(report.removed_by_country, 10);
    }

    #[test]
    fn small_cells_are_dropped_and_reported() {
        let mut records = Vec::new();
        for i in 0..5 {
            records.push(rec(&format!("a{i}"), "KR", Gender::Female, AgeGroup::Age18To24));
        }
        for i in 0..6 {
            records.push(rec(&format!("b{i}"), "US", Gender::Male, AgeGroup::Age18To24));
        }
        let (out, report) = apply_filters(&records, &FilterPolicy::default()).unwrap();
        assert_eq!(out.len(), 6);
        assert_eq!(report.dropped_cells.len(), 1);
        assert_eq!(report.dropped_cells[0].respondents, 5);
        assert_eq!(&*report.dropped_cells[0].cell.country, "KR");
    }

    #[test]
    fn identity_policy_and_idempotence() {
        let records: Vec<_> = (0..7)
            .map(|i| rec(&format!("r{i}"), if i % 2 == 0 { "US" } else { "KR" }, Gender::Male, AgeGroup::Age35To44))
            .collect();
        let identity = FilterPolicy::default().with_min_subgroup_size(1);
        assert_eq!(apply_filters(&records, &identity).unwrap().0, records);
        let policy = FilterPolicy::default().with_min_subgroup_size(4);
        let once = apply_filters(&records, &policy).unwrap().0;
        let twice = apply_filters(&once, &policy).unwrap().0;
        assert_eq!(once, twice);
    }

    #[test]
    fn everything_filtered_is_an_error() {
        let records = vec![rec("r", "IN", Gender::Male, AgeGroup::Age18To24)];
        let policy = FilterPolicy::default().excluding_countries(["IN"]);
        assert!(matches!(apply_filters(&records, &policy), Err(DatasetError::EmptyAfterFilter)));
    }

    #[test]
    fn strata_from_population_normalizes() {
        let records = vec![
            rec("a", "US", Gender::Male, AgeGroup::Age18To24),
            rec("b", "US", Gender::Female, AgeGroup::Age18To24),
        ];
        let pop = read_strata("country,gender,age_group,weight\nUS,male,18-24,75\nUS,female,18-24,25\nUS,male,55+,10\n".as_bytes()).unwrap();
        let strata = build_strata_with(&records, Some(&pop)).unwrap();
        assert_eq!(strata.cells.len(), 2);
        let w = strata.weight_map();
        assert!((w[&records[0].cell()] - 0.75).abs() < 1e-15);
        assert!((w[&records[1].cell()] - 0.25).abs() < 1e-15);
        assert!(!strata.empirical);
    }

    #[test]
    fn empirical_strata_fallback() {
        let mut records = Vec::new();
        for i in 0..10 {
            records.push(rec(&format!("a{i}"), "US", Gender::Male, AgeGroup::Age18To24));
        }
        for i in 0..30 {
            records.push(rec(&format!("b{i}"), "US", Gender::Female, AgeGroup::Age18To24));
        }
        let strata = build_strata_with(&records, None).unwrap();
        assert!(strata.empirical);
        let w: Vec<f64> = strata.cells.iter().map(|c| c.weight).collect();
        // female sorts before male
        assert_eq!(w, vec![0.75, 0.25]);
        assert!((strata.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn record_outside_population_is_missing_cell() {
        let records = vec![rec("a", "KR", Gender::Male, AgeGroup::Age18To24)];
        let pop = read_strata("country,gender,age_group,weight\nUS,male,18-24,1\n".as_bytes()).unwrap();
        assert!(matches!(build_strata_with(&records, Some(&pop)), Err(DatasetError::MissingCell(_))));
    }

    #[test]
    fn duplicate_strata_rows_rejected() {
        let err = read_strata("country,gender,age_group,weight\nUS,male,18-24,1\nUS,male,18-24,2\n".as_bytes());
        assert!(matches!(err, Err(DatasetError::InvalidStrata(_))));
    }

    #[test]
    fn bundled_hofstede_rescaled() {
        let t = HofstedeTable::bundled();
        let kr = t.get("KR").unwrap();
        assert_eq!(kr.get(Dimension::Uncertainty), 0.85);
        assert_eq!(kr.get(Dimension::LongTermOrientation), 1.0);
        assert!(t.rows.iter().all(|r| r.values.iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn hofstede_out_of_range_rejected() {
        let body = "country,power_distance,individualism,masculinity,uncertainty,long_term_orientation,indulgence\nXX,1,2,3,140,5,6\n";
        assert!(matches!(read_hofstede(body.as_bytes()), Err(DatasetError::InvalidHofstede(_))));
    }
}
