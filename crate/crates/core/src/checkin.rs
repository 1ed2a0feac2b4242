//! Check-in ingestion, chronological splitting and transition extraction.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{self, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::spatial::haversine_km;

/// One raw check-in record.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckIn {
    pub user_id: String,
    pub poi_id: String,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
    pub category: Option<String>,
}

/// Column positions of the fields in an input line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ColumnOrder {
    pub user: usize,
    pub poi: usize,
    pub timestamp: usize,
    pub lat: usize,
    pub lon: usize,
    pub category: Option<usize>,
}

impl Default for ColumnOrder {
    fn default() -> Self {
        ColumnOrder {
            user: 0,
            poi: 1,
            timestamp: 2,
            lat: 3,
            lon: 4,
            category: Some(5),
        }
    }
}

fn parse_error(line: usize, field: &'static str, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        field,
        message: message.into(),
    }
}

/// Parses a single tab- or comma-separated line. Tabs win when both occur.
/// `line_no` is only used for error messages.
pub fn parse_checkin_line(line: &str, schema: &ColumnOrder, line_no: usize) -> Result<CheckIn> {
    let line = line.trim_end_matches(['\r', '\n']);
    let fields: Vec<&str> = if line.contains('\t') {
        line.split('\t').collect()
    } else {
        line.split(',').collect()
    };

    let get = |idx: usize, name: &'static str| -> Result<&str> {
        match fields.get(idx).map(|s| s.trim()) {
            Some(s) if !s.is_empty() => Ok(s),
            _ => Err(parse_error(line_no, name, "missing")),
        }
    };

    let user_id = get(schema.user, "user_id")?.to_string();
    let poi_id = get(schema.poi, "poi_id")?.to_string();

    let ts_raw = get(schema.timestamp, "timestamp")?;
    let timestamp: i64 = ts_raw
        .parse()
        .map_err(|_| parse_error(line_no, "timestamp", format!("not an integer: `{ts_raw}`")))?;
    if timestamp <= 0 {
        return Err(parse_error(line_no, "timestamp", "must be positive"));
    }

    let lat_raw = get(schema.lat, "lat")?;
    let lat: f64 = lat_raw
        .parse()
        .map_err(|_| parse_error(line_no, "lat", format!("not a number: `{lat_raw}`")))?;
    if !(-90.0..=90.0).contains(&lat) {
        return Err(parse_error(line_no, "lat", format!("{lat} out of range [-90, 90]")));
    }

    let lon_raw = get(schema.lon, "lon")?;
    let lon: f64 = lon_raw
        .parse()
        .map_err(|_| parse_error(line_no, "lon", format!("not a number: `{lon_raw}`")))?;
    if !(-180.0..=180.0).contains(&lon) {
        return Err(parse_error(line_no, "lon", format!("{lon} out of range [-180, 180]")));
    }

    let category = schema
        .category
        .and_then(|idx| fields.get(idx))
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(str::to_string);

    Ok(CheckIn {
        user_id,
        poi_id,
        timestamp,
        lat,
        lon,
        category,
    })
}

/// A venue in the dense index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub category: Option<u32>,
}

/// Dense id tables shared by every dataset derived from one ingest.
#[derive(Debug, PartialEq)]
pub struct Catalog {
    users: Vec<String>,
    pois: Vec<Poi>,
    categories: Vec<String>,
    user_lookup: HashMap<String, u32>,
    poi_lookup: HashMap<String, u32>,
    category_lookup: HashMap<String, u32>,
    fingerprint: [u8; 32],
}

impl Catalog {
    pub fn new(users: Vec<String>, pois: Vec<Poi>, categories: Vec<String>) -> Self {
        let lookup = |ids: &mut dyn Iterator<Item = &String>| -> HashMap<String, u32> {
            ids.enumerate().map(|(i, id)| (id.clone(), i as u32)).collect()
        };
        let user_lookup = lookup(&mut users.iter());
        let poi_lookup = lookup(&mut pois.iter().map(|p| &p.id));
        let category_lookup = lookup(&mut categories.iter());

        let mut hasher = Sha256::new();
        let mut put = |s: &str| {
            hasher.update((s.len() as u64).to_le_bytes());
            hasher.update(s.as_bytes());
        };
        put("users");
        users.iter().for_each(|u| put(u));
        put("categories");
        categories.iter().for_each(|c| put(c));
        put("pois");
        for p in &pois {
            put(&p.id);
            put(&format!("{:?}|{:?}|{:?}", p.lat.to_bits(), p.lon.to_bits(), p.category));
        }
        let fingerprint = hasher.finalize().into();

        Catalog {
            users,
            pois,
            categories,
            user_lookup,
            poi_lookup,
            category_lookup,
            fingerprint,
        }
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_pois(&self) -> usize {
        self.pois.len()
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn pois(&self) -> &[Poi] {
        &self.pois
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn user_index(&self, id: &str) -> Option<u32> {
        self.user_lookup.get(id).copied()
    }

    pub fn poi_index(&self, id: &str) -> Option<u32> {
        self.poi_lookup.get(id).copied()
    }

    pub fn category_index(&self, label: &str) -> Option<u32> {
        self.category_lookup.get(label).copied()
    }

    pub fn poi_distance_km(&self, a: u32, b: u32) -> f64 {
        let (p, q) = (&self.pois[a as usize], &self.pois[b as usize]);
        haversine_km(p.lat, p.lon, q.lat, q.lon)
    }

    /// SHA-256 over every id, coordinate and category in the tables.
    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    pub fn fingerprint_hex(&self) -> String {
        self.fingerprint.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Where a dataset came from. Training refuses [`Provenance::Test`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Full,
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Visit {
    pub poi: u32,
    pub timestamp: i64,
}

/// Per-user chronologically sorted visits over a shared [`Catalog`].
#[derive(Clone, Debug)]
pub struct Dataset {
    catalog: Arc<Catalog>,
    sequences: Vec<Vec<Visit>>,
    provenance: Provenance,
}

impl Dataset {
    /// Builds a dataset, sorting each sequence by timestamp (stable).
    pub fn from_sequences(catalog: Arc<Catalog>, mut sequences: Vec<Vec<Visit>>, provenance: Provenance) -> Result<Self> {
        if sequences.len() != catalog.num_users() {
            return Err(Error::Mismatch(format!(
                "{} sequences for {} users",
                sequences.len(),
                catalog.num_users()
            )));
        }
        for seq in &mut sequences {
            if let Some(v) = seq.iter().find(|v| v.poi as usize >= catalog.num_pois()) {
                return Err(Error::IndexOutOfRange {
                    kind: "poi",
                    index: v.poi as usize,
                    size: catalog.num_pois(),
                });
            }
            seq.sort_by_key(|v| v.timestamp);
        }
        Ok(Dataset {
            catalog,
            sequences,
            provenance,
        })
    }

    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.catalog
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn num_users(&self) -> usize {
        self.catalog.num_users()
    }

    pub fn num_pois(&self) -> usize {
        self.catalog.num_pois()
    }

    pub fn sequence(&self, user: u32) -> &[Visit] {
        &self.sequences[user as usize]
    }

    pub fn sequences(&self) -> &[Vec<Visit>] {
        &self.sequences
    }

    pub fn num_checkins(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Users with at least one visit.
    pub fn active_users(&self) -> impl Iterator<Item = u32> + '_ {
        self.sequences
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.is_empty())
            .map(|(u, _)| u as u32)
    }

    pub fn checkins(&self, user: u32) -> impl Iterator<Item = CheckIn> + '_ {
        let user_id = &self.catalog.users[user as usize];
        self.sequences[user as usize].iter().map(move |v| {
            let poi = &self.catalog.pois[v.poi as usize];
            CheckIn {
                user_id: user_id.clone(),
                poi_id: poi.id.clone(),
                timestamp: v.timestamp,
                lat: poi.lat,
                lon: poi.lon,
                category: poi.category.map(|c| self.catalog.categories[c as usize].clone()),
            }
        })
    }

    /// Writes every check-in as a tab-separated line in the input format.
    /// Floats use the shortest round-trip representation.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for u in 0..self.num_users() as u32 {
            for c in self.checkins(u) {
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    c.user_id,
                    c.poi_id,
                    c.timestamp,
                    c.lat,
                    c.lon,
                    c.category.as_deref().unwrap_or("")
                )?;
            }
        }
        Ok(())
    }
}

fn collect_checkins<I, S>(lines: I, schema: &ColumnOrder) -> Result<Vec<CheckIn>>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut out = Vec::new();
    for (i, line) in lines.into_iter().enumerate() {
        let line = line.as_ref();
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push(parse_checkin_line(line, schema, i + 1)?);
    }
    Ok(out)
}

/// Builds a catalog from check-ins. Ids are indexed in lexicographic order;
/// a POI takes the coordinates of its first record and its first non-empty
/// category.
fn catalog_from(checkins: &[&CheckIn]) -> Catalog {
    let users: Vec<String> = checkins
        .iter()
        .map(|c| c.user_id.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut poi_first: BTreeMap<&str, (f64, f64, Option<&str>)> = BTreeMap::new();
    for c in checkins {
        let entry = poi_first.entry(&c.poi_id).or_insert((c.lat, c.lon, None));
        if entry.2.is_none() {
            entry.2 = c.category.as_deref();
        }
    }
    let categories: Vec<String> = poi_first
        .values()
        .filter_map(|p| p.2)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .map(str::to_string)
        .collect();
    let cat_index: HashMap<&str, u32> = categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i as u32))
        .collect();
    let pois = poi_first
        .into_iter()
        .map(|(id, (lat, lon, cat))| Poi {
            id: id.to_string(),
            lat,
            lon,
            category: cat.map(|c| cat_index[c]),
        })
        .collect();

    Catalog::new(users, pois, categories)
}

fn sequences_for(catalog: &Catalog, checkins: &[&CheckIn]) -> Vec<Vec<Visit>> {
    let mut sequences = vec![Vec::new(); catalog.num_users()];
    for c in checkins {
        let u = catalog.user_index(&c.user_id).expect("user in catalog");
        let p = catalog.poi_index(&c.poi_id).expect("poi in catalog");
        sequences[u as usize].push(Visit {
            poi: p,
            timestamp: c.timestamp,
        });
    }
    sequences
}

/// Parses lines with the default column order and keeps users with at least
/// `min_user_checkins` records.
pub fn ingest<I, S>(lines: I, min_user_checkins: usize) -> Result<Dataset>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    ingest_with_schema(lines, &ColumnOrder::default(), min_user_checkins)
}

pub fn ingest_with_schema<I, S>(lines: I, schema: &ColumnOrder, min_user_checkins: usize) -> Result<Dataset>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if min_user_checkins == 0 {
        return Err(Error::Config("min_user_checkins must be at least 1".into()));
    }
    let all = collect_checkins(lines, schema)?;

    let mut counts: HashMap<&str, usize> = HashMap::new();
    for c in &all {
        *counts.entry(&c.user_id).or_default() += 1;
    }
    let kept: Vec<&CheckIn> = all
        .iter()
        .filter(|c| counts[c.user_id.as_str()] >= min_user_checkins)
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyDataset { min_user_checkins });
    }

    let catalog = Arc::new(catalog_from(&kept));
    let sequences = sequences_for(&catalog, &kept);
    Dataset::from_sequences(catalog, sequences, Provenance::Full)
}

/// Per-user chronological train/test partition over one catalog.
#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
    pub split_fraction: f64,
}

/// Number of a user's earliest events that go to the training side.
pub fn train_count(n: usize, fraction: f64) -> usize {
    // guard against 0.8 * 10 landing a hair above 8
    (((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Earliest `ceil(fraction * n)` events of each user go to train. Users whose
/// test part is empty keep an empty test sequence and take no part in
/// evaluation. A fraction of exactly 1.0 is accepted and yields an empty test.
pub fn chronological_split(dataset: &Dataset, fraction: f64) -> Result<SplitDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} not in (0, 1]")));
    }
    let mut train = Vec::with_capacity(dataset.num_users());
    let mut test = Vec::with_capacity(dataset.num_users());
    for seq in dataset.sequences() {
        let k = train_count(seq.len(), fraction);
        train.push(seq[..k].to_vec());
        test.push(seq[k..].to_vec());
    }
    Ok(SplitDataset {
        train: Dataset {
            catalog: Arc::clone(dataset.catalog()),
            sequences: train,
            provenance: Provenance::Train,
        },
        test: Dataset {
            catalog: Arc::clone(dataset.catalog()),
            sequences: test,
            provenance: Provenance::Test,
        },
        split_fraction: fraction,
    })
}

/// Rebuilds a split from separately stored train and test files. The catalog
/// is built over the union of both, which reproduces the catalog of the
/// dataset they were split from.
pub fn load_split<I, J, S, T>(train_lines: I, test_lines: J, split_fraction: f64) -> Result<SplitDataset>
where
    I: IntoIterator<Item = S>,
    J: IntoIterator<Item = T>,
    S: AsRef<str>,
    T: AsRef<str>,
{
    let schema = ColumnOrder::default();
    let train = collect_checkins(train_lines, &schema)?;
    let test = collect_checkins(test_lines, &schema)?;
    if train.is_empty() {
        return Err(Error::EmptyDataset { min_user_checkins: 1 });
    }
    let train_refs: Vec<&CheckIn> = train.iter().collect();
    let test_refs: Vec<&CheckIn> = test.iter().collect();
    let union: Vec<&CheckIn> = train.iter().chain(test.iter()).collect();
    let catalog = Arc::new(catalog_from(&union));
    Ok(SplitDataset {
        train: Dataset::from_sequences(Arc::clone(&catalog), sequences_for(&catalog, &train_refs), Provenance::Train)?,
        test: Dataset::from_sequences(Arc::clone(&catalog), sequences_for(&catalog, &test_refs), Provenance::Test)?,
        split_fraction,
    })
}

/// One observed move of a user from `prev_poi` to `next_poi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub user: u32,
    pub prev_poi: u32,
    pub next_poi: u32,
    pub prev_time: i64,
    pub next_time: i64,
    pub distance_km: f64,
}

impl Transition {
    pub fn gap_hours(&self) -> f64 {
        (self.next_time - self.prev_time) as f64 / 3600.0
    }
}

pub fn transition_between(catalog: &Catalog, user: u32, prev: Visit, next: Visit) -> Transition {
    Transition {
        user,
        prev_poi: prev.poi,
        next_poi: next.poi,
        prev_time: prev.timestamp,
        next_time: next.timestamp,
        distance_km: catalog.poi_distance_km(prev.poi, next.poi),
    }
}

/// Every consecutive pair of each user's sequence, optionally dropping pairs
/// further apart in time than `max_gap_hours`.
pub fn build_transitions(dataset: &Dataset, max_gap_hours: Option<f64>) -> Vec<Transition> {
    let catalog = dataset.catalog();
    let mut out = Vec::new();
    let mut short_users = 0usize;
    for (u, seq) in dataset.sequences().iter().enumerate() {
        if seq.len() < 2 {
            short_users += 1;
            continue;
        }
        for pair in seq.windows(2) {
            let t = transition_between(catalog, u as u32, pair[0], pair[1]);
            if max_gap_hours.is_some_and(|g| t.gap_hours() > g) {
                continue;
            }
            out.push(t);
        }
    }
    if short_users > 0 {
        log::info!("{short_users} users with fewer than 2 check-ins yield no transitions");
    }
    out
}
