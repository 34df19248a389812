//! Long-format functional datasets, CSV loading, and the multi-day
//! binarization used for accelerometry activity profiles.

use nalgebra::DMatrix;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::family::{Family, FamilyKind};

/// MIMS value at or above which a minute counts as active.
pub const DEFAULT_ACTIVITY_THRESHOLD: f64 = 10.558;

/// Functional outcomes `Z_i(s_k)` on a common grid with subject-level
/// covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct LongDataset {
    pub subjects: Vec<String>,
    pub grid: Vec<f64>,
    /// `I x K`; entries where `observed` is false are NaN.
    pub outcomes: DMatrix<f64>,
    pub observed: DMatrix<bool>,
    /// `I x p` covariates (no intercept column).
    pub covariates: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    pub family_hint: Option<FamilyKind>,
}

impl LongDataset {
    /// Complete-grid dataset.
    pub fn new(
        subjects: Vec<String>,
        grid: Vec<f64>,
        outcomes: DMatrix<f64>,
        covariates: DMatrix<f64>,
    ) -> Result<Self> {
        let observed = DMatrix::from_element(outcomes.nrows(), outcomes.ncols(), true);
        Self::with_mask(subjects, grid, outcomes, observed, covariates)
    }

    pub fn with_mask(
        subjects: Vec<String>,
        grid: Vec<f64>,
        mut outcomes: DMatrix<f64>,
        observed: DMatrix<bool>,
        covariates: DMatrix<f64>,
    ) -> Result<Self> {
        let (i, k) = outcomes.shape();
        if subjects.len() != i || grid.len() != k {
            return Err(Error::validation(format!(
                "outcome matrix is {i}x{k} but there are {} subjects and {} grid points",
                subjects.len(),
                grid.len()
            )));
        }
        if observed.shape() != (i, k) || covariates.nrows() != i {
            return Err(Error::validation("mask or covariate shape does not match outcomes"));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) || grid.iter().any(|g| !g.is_finite()) {
            return Err(Error::validation("grid must be finite and strictly increasing"));
        }
        if covariates.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation("covariates must be finite"));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &subjects {
            if !seen.insert(s.as_str()) {
                return Err(Error::validation(format!("duplicate subject id '{s}'")));
            }
        }
        for r in 0..i {
            for c in 0..k {
                if !observed[(r, c)] {
                    outcomes[(r, c)] = f64::NAN;
                } else if !outcomes[(r, c)].is_finite() {
                    return Err(Error::validation(format!(
                        "non-finite outcome for subject '{}' at s = {}",
                        subjects[r], grid[c]
                    )));
                }
            }
        }
        let names = (1..=covariates.ncols()).map(|j| format!("x{j}")).collect();
        Ok(LongDataset {
            subjects,
            grid,
            outcomes,
            observed,
            covariates,
            covariate_names: names,
            family_hint: None,
        })
    }

    pub fn with_covariate_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.covariates.ncols() {
            return Err(Error::validation("covariate name count does not match columns"));
        }
        self.covariate_names = names;
        Ok(self)
    }

    pub fn with_family_hint(mut self, kind: FamilyKind) -> Self {
        self.family_hint = Some(kind);
        self
    }

    pub fn n_subjects(&self) -> usize {
        self.outcomes.nrows()
    }

    pub fn n_grid(&self) -> usize {
        self.outcomes.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        let total = self.observed.len();
        if total == 0 {
            return 0.0;
        }
        1.0 - self.n_observed() as f64 / total as f64
    }

    pub fn is_complete(&self) -> bool {
        self.observed.iter().all(|&o| o)
    }

    /// Covariate row with a leading 1 for the intercept.
    pub fn design_row(&self, i: usize) -> Vec<f64> {
        std::iter::once(1.0).chain(self.covariates.row(i).iter().copied()).collect()
    }

    /// Checks every observed outcome against the family's support.
    pub fn validate_family(&self, family: &Family) -> Result<()> {
        for r in 0..self.n_subjects() {
            for c in 0..self.n_grid() {
                if self.observed[(r, c)] && !family.validate_outcome(self.outcomes[(r, c)]) {
                    return Err(Error::validation(format!(
                        "outcome {} for subject '{}' at s = {} is outside the {} support",
                        self.outcomes[(r, c)],
                        self.subjects[r],
                        self.grid[c],
                        family.kind
                    )));
                }
            }
        }
        Ok(())
    }

    /// Writes `subject_id,s,value,x1..xp`; missing cells are skipped.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["subject_id".to_string(), "s".into(), "value".into()];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for r in 0..self.n_subjects() {
            let cov: Vec<String> = self.covariates.row(r).iter().map(|x| x.to_string()).collect();
            for c in 0..self.n_grid() {
                if !self.observed[(r, c)] {
                    continue;
                }
                let mut rec = vec![
                    self.subjects[r].clone(),
                    self.grid[c].to_string(),
                    self.outcomes[(r, c)].to_string(),
                ];
                rec.extend(cov.iter().cloned());
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Column layout for [`load_long_csv`].
#[derive(Debug, Clone, Default)]
pub struct LongSchema {
    /// Covariate columns to use; `None` takes every column after `value`.
    pub covariates: Option<Vec<String>>,
    /// Accept a non-rectangular grid or empty cells as missing at random.
    pub allow_missing: bool,
}

fn parse_cell(raw: &str) -> Option<f64> {
    let t = raw.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
        return None;
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn parse_required(raw: &str, what: &str, line: u64) -> Result<f64> {
    parse_cell(raw).ok_or_else(|| {
        Error::validation(format!("line {line}: cannot parse {what} from '{raw}'"))
    })
}

pub fn load_long_csv(path: impl AsRef<Path>, schema: &LongSchema) -> Result<LongDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_long_csv(file, schema)
}

/// Reads `subject_id, s, value, x1..xp` from any reader. Lines starting
/// with `#` are ignored.
pub fn read_long_csv<R: Read>(reader: R, schema: &LongSchema) -> Result<LongDataset> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expect = ["subject_id", "s", "value"];
    for (j, name) in expect.iter().enumerate() {
        if headers.get(j) != Some(name) {
            return Err(Error::validation(format!(
                "header column {} must be '{name}', found {:?}",
                j + 1,
                headers.get(j)
            )));
        }
    }
    let cov_names: Vec<String> = match &schema.covariates {
        Some(names) => names.clone(),
        None => headers.iter().skip(3).map(str::to_string).collect(),
    };
    let cov_idx: Vec<usize> = cov_names
        .iter()
        .map(|n| {
            headers
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| Error::validation(format!("covariate column '{n}' not in header")))
        })
        .collect::<Result<_>>()?;

    struct Row {
        subject: usize,
        s: f64,
        value: Option<f64>,
    }
    let mut subject_index: HashMap<String, usize> = HashMap::new();
    let mut subjects: Vec<String> = Vec::new();
    let mut cov_rows: Vec<Vec<f64>> = Vec::new();
    let mut rows: Vec<Row> = Vec::new();

    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let sid = rec.get(0).unwrap_or("").to_string();
        if sid.is_empty() {
            return Err(Error::validation(format!("line {line}: empty subject_id")));
        }
        let s = parse_required(rec.get(1).unwrap_or(""), "s", line)?;
        let raw = rec.get(2).unwrap_or("");
        let value = if is_na(raw) { None } else { Some(parse_required(raw, "value", line)?) };
        let cov: Vec<f64> = cov_idx
            .iter()
            .map(|&j| parse_required(rec.get(j).unwrap_or(""), &headers[j], line))
            .collect::<Result<_>>()?;
        let idx = match subject_index.get(&sid) {
            Some(&idx) => {
                if cov_rows[idx] != cov {
                    return Err(Error::validation(format!(
                        "line {line}: covariates for subject '{sid}' change across rows"
                    )));
                }
                idx
            }
            None => {
                let idx = subjects.len();
                subject_index.insert(sid.clone(), idx);
                subjects.push(sid);
                cov_rows.push(cov);
                idx
            }
        };
        rows.push(Row { subject: idx, s, value });
    }
    if subjects.is_empty() {
        return Err(Error::validation("no data rows"));
    }

    let mut grid: Vec<f64> = rows.iter().map(|r| r.s).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let (n_i, n_k, n_p) = (subjects.len(), grid.len(), cov_names.len());
    let mut outcomes = DMatrix::from_element(n_i, n_k, f64::NAN);
    let mut observed = DMatrix::from_element(n_i, n_k, false);
    let mut filled = DMatrix::from_element(n_i, n_k, false);
    for row in &rows {
        let c = grid.binary_search_by(|g| g.total_cmp(&row.s)).expect("grid built from rows");
        if filled[(row.subject, c)] {
            return Err(Error::validation(format!(
                "duplicate row for (subject_id = {}, s = {})",
                subjects[row.subject], row.s
            )));
        }
        filled[(row.subject, c)] = true;
        if let Some(v) = row.value {
            outcomes[(row.subject, c)] = v;
            observed[(row.subject, c)] = true;
        }
    }
    let n_missing = observed.iter().filter(|&&o| !o).count();
    if n_missing > 0 && !schema.allow_missing {
        return Err(Error::validation(format!(
            "{n_missing} of {} (subject, s) cells are missing; enable missing-at-random to accept them",
            n_i * n_k
        )));
    }
    let covariates = DMatrix::from_fn(n_i, n_p, |r, c| cov_rows[r][c]);
    let data = LongDataset::with_mask(subjects, grid, outcomes, observed, covariates)?
        .with_covariate_names(cov_names)?;
    log::info!(
        "loaded I = {}, K = {}, p = {}, missing = {:.4}",
        data.n_subjects(),
        data.n_grid(),
        data.n_covariates(),
        data.missing_fraction()
    );
    Ok(data)
}

fn is_na(raw: &str) -> bool {
    let t = raw.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

/// Raw per-day measurements `Y_ih(s)` for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiDayProfile {
    pub subject_id: String,
    /// One vector of length `K` per day; NaN marks a missing minute.
    pub days: Vec<Vec<f64>>,
    pub valid_days: Vec<bool>,
}

impl MultiDayProfile {
    pub fn new(subject_id: impl Into<String>, days: Vec<Vec<f64>>) -> Self {
        let valid_days = vec![true; days.len()];
        MultiDayProfile { subject_id: subject_id.into(), days, valid_days }
    }

    pub fn n_valid_days(&self) -> usize {
        self.valid_days.iter().filter(|&&v| v).count()
    }
}

/// Median of binary indicators, with ties resolved as active.
///
/// Returns `None` when no day contributes.
pub fn active_median<I: IntoIterator<Item = bool>>(flags: I) -> Option<bool> {
    let (active, total) = flags
        .into_iter()
        .fold((0usize, 0usize), |(a, t), f| (a + f as usize, t + 1));
    (total > 0).then_some(2 * active >= total)
}

/// Thresholds each valid day and takes the per-minute median across days.
///
/// Subjects without a valid day are skipped with a warning; non-finite raw
/// values drop out of that minute's median.
pub fn binarize_profiles(
    profiles: &[MultiDayProfile],
    grid: &[f64],
    threshold: f64,
) -> Result<LongDataset> {
    let k = grid.len();
    let mut subjects = Vec::new();
    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    for p in profiles {
        if p.valid_days.len() != p.days.len() {
            return Err(Error::validation(format!(
                "subject '{}': {} day flags for {} days",
                p.subject_id,
                p.valid_days.len(),
                p.days.len()
            )));
        }
        if let Some(d) = p.days.iter().find(|d| d.len() != k) {
            return Err(Error::validation(format!(
                "subject '{}': day vector of length {} on a grid of {k}",
                p.subject_id,
                d.len()
            )));
        }
        if p.n_valid_days() == 0 {
            log::warn!("subject '{}' has no valid days; skipped", p.subject_id);
            continue;
        }
        let row = (0..k)
            .map(|s| {
                let flags = p
                    .days
                    .iter()
                    .zip(&p.valid_days)
                    .filter(|(d, &v)| v && d[s].is_finite())
                    .map(|(d, _)| d[s] >= threshold);
                active_median(flags).map(|z| if z { 1.0 } else { 0.0 })
            })
            .collect();
        subjects.push(p.subject_id.clone());
        rows.push(row);
    }
    if subjects.is_empty() {
        return Err(Error::validation("no subject has a valid day"));
    }
    let n = subjects.len();
    let outcomes = DMatrix::from_fn(n, k, |r, c| rows[r][c].unwrap_or(f64::NAN));
    let observed = DMatrix::from_fn(n, k, |r, c| rows[r][c].is_some());
    Ok(LongDataset::with_mask(subjects, grid.to_vec(), outcomes, observed, DMatrix::zeros(n, 0))?
        .with_family_hint(FamilyKind::BernoulliLogit))
}

/// Reads `subject_id, day, s, value[, valid]`. Returns the common grid and
/// one profile per subject in order of first appearance.
pub fn read_multiday_csv<R: Read>(reader: R) -> Result<(Vec<f64>, Vec<MultiDayProfile>)> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    for (j, name) in ["subject_id", "day", "s", "value"].iter().enumerate() {
        if headers.get(j) != Some(name) {
            return Err(Error::validation(format!(
                "header column {} must be '{name}', found {:?}",
                j + 1,
                headers.get(j)
            )));
        }
    }
    let has_valid = headers.get(4) == Some("valid");

    struct Row {
        subject: usize,
        day: String,
        s: f64,
        value: f64,
        valid: bool,
    }
    let mut subject_index: HashMap<String, usize> = HashMap::new();
    let mut subjects: Vec<String> = Vec::new();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let sid = rec.get(0).unwrap_or("").to_string();
        let day = rec.get(1).unwrap_or("").to_string();
        let s = parse_required(rec.get(2).unwrap_or(""), "s", line)?;
        let value = parse_cell(rec.get(3).unwrap_or("")).unwrap_or(f64::NAN);
        let valid = if has_valid {
            match rec.get(4).unwrap_or("1") {
                "1" | "true" | "TRUE" => true,
                "0" | "false" | "FALSE" => false,
                other => {
                    return Err(Error::validation(format!("line {line}: bad valid flag '{other}'")))
                }
            }
        } else {
            true
        };
        let idx = *subject_index.entry(sid.clone()).or_insert_with(|| {
            subjects.push(sid);
            subjects.len() - 1
        });
        rows.push(Row { subject: idx, day, s, value, valid });
    }
    let mut grid: Vec<f64> = rows.iter().map(|r| r.s).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let k = grid.len();

    let mut day_index: Vec<HashMap<String, usize>> = vec![HashMap::new(); subjects.len()];
    let mut profiles: Vec<MultiDayProfile> = subjects
        .iter()
        .map(|s| MultiDayProfile { subject_id: s.clone(), days: Vec::new(), valid_days: Vec::new() })
        .collect();
    let mut filled: Vec<Vec<Vec<bool>>> = vec![Vec::new(); subjects.len()];
    for r in rows {
        let p = &mut profiles[r.subject];
        let d = *day_index[r.subject].entry(r.day.clone()).or_insert_with(|| {
            p.days.push(vec![f64::NAN; k]);
            p.valid_days.push(r.valid);
            filled[r.subject].push(vec![false; k]);
            p.days.len() - 1
        });
        if p.valid_days[d] != r.valid {
            return Err(Error::validation(format!(
                "subject '{}' day '{}': inconsistent valid flag",
                p.subject_id, r.day
            )));
        }
        let c = grid.binary_search_by(|g| g.total_cmp(&r.s)).expect("grid built from rows");
        if filled[r.subject][d][c] {
            return Err(Error::validation(format!(
                "duplicate row for (subject_id = {}, day = {}, s = {})",
                p.subject_id, r.day, r.s
            )));
        }
        filled[r.subject][d][c] = true;
        p.days[d][c] = r.value;
    }
    Ok((grid, profiles))
}
