//! CSV readers and writers, observed-data loading and the key-value run
//! manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{bail, Error, Result};
use crate::histogram::Histogram;
use crate::model::{MIN_AGE_YEARS, PARAM_NAMES};
use crate::simulate::{CohortResult, MicroDistributions, SummaryLayout, SummaryVector, N_AGES};
use crate::validation::{CvReport, MicroValidationReport, PpcReport};

fn open_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn open_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {:?}", path.display(), other)),
    }
}

fn check_header(path: &Path, reader: &mut csv::Reader<fs::File>, expected: &[&str]) -> Result<()> {
    let headers = reader.headers().map_err(|e| csv_err(path, e))?;
    if headers.iter().ne(expected.iter().copied()) {
        bail!(
            Format,
            "{}: expected header `{}`, found `{}`",
            path.display(),
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        );
    }
    Ok(())
}

/// Yields `(line, record)` pairs, checking the field count.
fn records(
    path: &Path,
    reader: &mut csv::Reader<fs::File>,
    width: usize,
) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            bail!(Format, "{}: line {line}: expected {width} fields, found {}", path.display(), rec.len());
        }
        out.push((line, rec));
    }
    Ok(out)
}

fn parse_cell<T: FromStr>(path: &Path, line: u64, column: &str, cell: &str) -> Result<T> {
    cell.parse()
        .map_err(|_| Error::Format(format!("{}: line {line}: bad {column} value `{cell}`", path.display())))
}

fn parse_float(path: &Path, line: u64, column: &str, cell: &str) -> Result<f64> {
    match cell {
        "inf" | "Inf" | "INF" | "infinity" => Ok(f64::INFINITY),
        _ => parse_cell(path, line, column, cell),
    }
}

/// Reads a `bin_lo,bin_hi,mass` histogram. Bins must be contiguous; the last
/// upper edge may be `inf`. Masses are renormalized.
pub fn read_histogram(path: &Path) -> Result<Histogram> {
    let mut reader = open_reader(path)?;
    check_header(path, &mut reader, &["bin_lo", "bin_hi", "mass"])?;
    let rows = records(path, &mut reader, 3)?;
    if rows.is_empty() {
        bail!(Format, "{}: histogram has no bins", path.display());
    }
    let mut edges = Vec::with_capacity(rows.len() + 1);
    let mut masses = Vec::with_capacity(rows.len());
    for (line, rec) in &rows {
        let lo = parse_float(path, *line, "bin_lo", &rec[0])?;
        let hi = parse_float(path, *line, "bin_hi", &rec[1])?;
        let mass: f64 = parse_cell(path, *line, "mass", &rec[2])?;
        if !(mass >= 0.0) || !mass.is_finite() {
            bail!(Format, "{}: line {line}: mass must be finite and non-negative", path.display());
        }
        if let Some(&prev) = edges.last() {
            if prev != lo {
                bail!(Format, "{}: line {line}: bin starts at {lo}, previous bin ends at {prev}", path.display());
            }
        } else {
            edges.push(lo);
        }
        if !(hi > lo) {
            bail!(Format, "{}: line {line}: empty or reversed bin [{lo}, {hi})", path.display());
        }
        edges.push(hi);
        masses.push(mass);
    }
    if masses.iter().sum::<f64>() <= 0.0 {
        bail!(Format, "{}: histogram has zero total mass", path.display());
    }
    Histogram::from_weights(edges, masses, 0).map_err(|e| e.context(path.display()))
}

pub fn write_histogram(path: &Path, h: &Histogram) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(["bin_lo", "bin_hi", "mass"]).map_err(|e| csv_err(path, e))?;
    for (k, m) in h.masses.iter().enumerate() {
        w.write_record([h.edges[k].to_string(), h.edges[k + 1].to_string(), m.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an `age,rate` table covering exactly the ages 10..49.
pub fn read_rates(path: &Path) -> Result<Vec<f64>> {
    let mut reader = open_reader(path)?;
    check_header(path, &mut reader, &["age", "rate"])?;
    let mut rates: Vec<Option<f64>> = vec![None; N_AGES];
    for (line, rec) in records(path, &mut reader, 2)? {
        let age: u32 = parse_cell(path, line, "age", &rec[0])?;
        let rate: f64 = parse_cell(path, line, "rate", &rec[1])?;
        let Some(slot) = age
            .checked_sub(MIN_AGE_YEARS)
            .and_then(|k| rates.get_mut(k as usize))
        else {
            bail!(Format, "{}: line {line}: age {age} outside 10..49", path.display());
        };
        if slot.is_some() {
            bail!(Format, "{}: line {line}: duplicate age {age}", path.display());
        }
        if !rate.is_finite() || rate < 0.0 {
            bail!(Format, "{}: line {line}: rate at age {age} must be finite and non-negative, got {rate}", path.display());
        }
        *slot = Some(rate);
    }
    rates
        .iter()
        .enumerate()
        .map(|(k, r)| {
            r.ok_or_else(|| {
                Error::Format(format!(
                    "{}: missing age {}",
                    path.display(),
                    k as u32 + MIN_AGE_YEARS
                ))
            })
        })
        .collect()
}

pub fn write_rates(path: &Path, rates: &[f64]) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(["age", "rate"]).map_err(|e| csv_err(path, e))?;
    for (k, r) in rates.iter().enumerate() {
        w.write_record([(k as u32 + MIN_AGE_YEARS).to_string(), r.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// File locations of an observed cohort.
#[derive(Debug, Clone, Default)]
pub struct ObservedPaths {
    pub asfr: PathBuf,
    pub asufr: Option<PathBuf>,
    pub age_first_sex: Option<PathBuf>,
    pub desired_family_size: Option<PathBuf>,
    pub birth_intervals: Option<PathBuf>,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservedData {
    pub asfr: Vec<f64>,
    pub asufr: Option<Vec<f64>>,
    pub micro: Option<MicroDistributions>,
    pub label: String,
}

impl ObservedData {
    /// Completed fertility of the cohort: the sum of its ASFR.
    pub fn tfr(&self) -> f64 {
        self.asfr.iter().sum()
    }

    pub fn summary(&self, layout: SummaryLayout) -> Result<SummaryVector> {
        SummaryVector {
            asfr: self.asfr.clone(),
            asufr: self.asufr.clone(),
        }
        .with_layout(layout)
        .map_err(|_| {
            Error::Consistency(format!(
                "cohort `{}`: layout {} needs an asufr table",
                self.label,
                layout.name()
            ))
        })
    }
}

pub fn load_observed(paths: &ObservedPaths) -> Result<ObservedData> {
    let asfr = read_rates(&paths.asfr)?;
    let asufr = paths.asufr.as_deref().map(read_rates).transpose()?;
    if let Some(u) = &asufr {
        for (k, (a, u)) in asfr.iter().zip(u).enumerate() {
            if u > a {
                bail!(
                    Consistency,
                    "asufr {u} exceeds asfr {a} at age {}",
                    k as u32 + MIN_AGE_YEARS
                );
            }
        }
    }
    let micro = match (&paths.age_first_sex, &paths.desired_family_size, &paths.birth_intervals) {
        (None, None, None) => None,
        (Some(s), Some(d), Some(b)) => Some(MicroDistributions {
            age_first_sex: read_histogram(s)?,
            desired_family_size: read_histogram(d)?,
            birth_intervals: read_histogram(b)?,
        }),
        _ => bail!(Config, "micro histograms must be given all three or not at all"),
    };
    Ok(ObservedData {
        asfr,
        asufr,
        micro,
        label: paths.label.clone(),
    })
}

pub fn write_births(path: &Path, cohort: &CohortResult) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(["woman_id", "mother_age_months", "conception_month", "planned"])
        .map_err(|e| csv_err(path, e))?;
    for b in &cohort.births {
        w.write_record([
            b.woman_id.to_string(),
            b.mother_age_months.to_string(),
            b.conception_month.to_string(),
            (b.planned as u8).to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_traits(path: &Path, cohort: &CohortResult) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(["woman_id", "x_i", "r_i", "d_i", "b_i"])
        .map_err(|e| csv_err(path, e))?;
    for (i, t) in cohort.traits.iter().enumerate() {
        w.write_record([
            i.to_string(),
            t.x_i.to_string(),
            t.r_i.to_string(),
            t.d_i.to_string(),
            t.b_i.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes rows of named float columns.
pub fn write_table(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        if r.len() != header.len() {
            bail!(Contract, "row of width {} under a header of width {}", r.len(), header.len());
        }
        w.write_record(r.iter().map(|v| v.to_string()))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a float table written by [`write_table`].
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = open_reader(path)?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for (line, rec) in records(path, &mut reader, header.len())? {
        rows.push(
            rec.iter()
                .zip(&header)
                .map(|(c, h)| parse_float(path, line, h, c))
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    Ok((header, rows))
}

/// Writes parameter draws with one column per parameter.
pub fn write_draws(path: &Path, names: &[String], draws: &[Vec<f64>]) -> Result<()> {
    write_table(path, names, draws)
}

pub fn default_param_names() -> Vec<String> {
    PARAM_NAMES.iter().map(|s| s.to_string()).collect()
}

/// Ordered `key = value` text; `#` starts a comment line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets `key`, replacing an earlier value.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Format(format!("manifest is missing `{key}`")))
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.require(key)?;
        v.parse()
            .map_err(|_| Error::Format(format!("manifest key `{key}` has bad value `{v}`")))
    }

    /// Comma-separated floats.
    pub fn parse_floats(&self, key: &str) -> Result<Vec<f64>> {
        let v = self.require(key)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("manifest key `{key}` has bad float `{s}`")))
            })
            .collect()
    }

    pub fn set_floats(&mut self, key: &str, values: &[f64]) {
        let joined = values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        self.set(key, joined);
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(Format, "manifest line {}: expected `key = value`", i + 1);
            };
            let k = k.trim();
            if k.is_empty() {
                bail!(Format, "manifest line {}: empty key", i + 1);
            }
            if m.get(k).is_some() {
                bail!(Format, "manifest line {}: duplicate key `{k}`", i + 1);
            }
            m.entries.push((k.to_string(), v.trim().to_string()));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text).map_err(|e| e.context(path.display()))
    }
}

/// `age,observed,mean,lo95,hi95`, one row per age.
pub fn write_ppc(path: &Path, r: &PpcReport) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(["age", "observed", "mean", "lo95", "hi95"])
        .map_err(|e| csv_err(path, e))?;
    for a in 0..r.observed.len() {
        w.write_record([
            (a as u32 + MIN_AGE_YEARS).to_string(),
            r.observed[a].to_string(),
            r.mean[a].to_string(),
            r.lo95[a].to_string(),
            r.hi95[a].to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per fold: seeds, status, truth and estimate.
pub fn write_cv_folds(path: &Path, r: &CvReport) -> Result<()> {
    let mut w = open_writer(path)?;
    let mut header = vec!["fold".to_string(), "seed".into(), "data_seed".into(), "status".into()];
    header.extend(r.names.iter().map(|n| format!("true_{n}")));
    header.extend(r.names.iter().map(|n| format!("hat_{n}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for f in &r.folds {
        let mut row = vec![
            f.index.to_string(),
            f.seed.to_string(),
            f.data_seed.to_string(),
            f.error.clone().unwrap_or_else(|| "ok".into()),
        ];
        row.extend(f.theta_true.iter().map(|v| v.to_string()));
        match &f.theta_hat {
            Some(h) => row.extend(h.iter().map(|v| v.to_string())),
            None => row.extend(r.names.iter().map(|_| String::new())),
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_nrmse(path: &Path, r: &CvReport) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(["parameter", "nrmse"]).map_err(|e| csv_err(path, e))?;
    for (n, v) in r.names.iter().zip(&r.nrmse) {
        w.write_record([n.clone(), v.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_micro_report(path: &Path, r: &MicroValidationReport) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(["outcome", "js_bits", "dropped_mass"])
        .map_err(|e| csv_err(path, e))?;
    for o in &r.outcomes {
        w.write_record([o.name.to_string(), o.js_bits.to_string(), o.dropped_mass.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn rates_csv(dir: &Path, name: &str, rows: impl Iterator<Item = (u32, f64)>) -> PathBuf {
        let p = dir.join(name);
        let mut s = String::from("age,rate\n");
        for (a, r) in rows {
            s.push_str(&format!("{a},{r}\n"));
        }
        fs::write(&p, s).unwrap();
        p
    }

    #[test]
    fn well_formed_asfr_loads_with_tfr() {
        let d = tempdir().unwrap();
        let p = rates_csv(d.path(), "asfr.csv", (10..50).map(|a| (a, 0.1)));
        let obs = load_observed(&ObservedPaths {
            asfr: p,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(obs.asfr.len(), 40);
        assert!((obs.tfr() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn missing_age_names_it() {
        let d = tempdir().unwrap();
        let p = rates_csv(d.path(), "asfr.csv", (10..50).filter(|a| *a != 31).map(|a| (a, 0.1)));
        let err = read_rates(&p).unwrap_err();
        assert_eq!(err.class(), "format");
        assert!(err.to_string().contains("missing age 31"), "{err}");
    }

    #[test]
    fn negative_rate_is_format_error() {
        let d = tempdir().unwrap();
        let p = rates_csv(d.path(), "asfr.csv", (10..50).map(|a| (a, if a == 20 { -0.1 } else { 0.1 })));
        let err = read_rates(&p).unwrap_err();
        assert_eq!(err.class(), "format");
        assert!(err.to_string().contains("line 12"), "{err}");
    }

    #[test]
    fn malformed_cell_names_line() {
        let d = tempdir().unwrap();
        let p = d.path().join("asfr.csv");
        fs::write(&p, "age,rate\n10,0.1\n11,abc\n").unwrap();
        let err = read_rates(&p).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn wrong_header_rejected() {
        let d = tempdir().unwrap();
        let p = d.path().join("asfr.csv");
        fs::write(&p, "age,value\n10,0.1\n").unwrap();
        assert_eq!(read_rates(&p).unwrap_err().class(), "format");
    }

    #[test]
    fn asufr_above_asfr_names_age() {
        let d = tempdir().unwrap();
        let a = rates_csv(d.path(), "asfr.csv", (10..50).map(|a| (a, 0.1)));
        let u = rates_csv(d.path(), "asufr.csv", (10..50).map(|a| (a, if a == 22 { 0.2 } else { 0.01 })));
        let err = load_observed(&ObservedPaths {
            asfr: a,
            asufr: Some(u),
            ..Default::default()
        })
        .unwrap_err();
        assert_eq!(err.class(), "consistency");
        assert!(err.to_string().contains("age 22"), "{err}");
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_rates(Path::new("/nonexistent/asfr.csv")).unwrap_err();
        assert_eq!(err.class(), "io");
    }

    #[test]
    fn scenario_three_layout_needs_asufr() {
        let obs = ObservedData {
            asfr: vec![0.0; 40],
            asufr: None,
            micro: None,
            label: "x".into(),
        };
        assert_eq!(obs.summary(SummaryLayout::AsfrAsufr).unwrap_err().class(), "consistency");
        assert_eq!(obs.summary(SummaryLayout::Asfr).unwrap().to_vec().len(), 40);
    }

    #[test]
    fn histogram_round_trip_with_open_bin() {
        let d = tempdir().unwrap();
        let h = Histogram::from_weights(vec![0.0, 1.5, 3.0, f64::INFINITY], vec![1.0, 2.0, 1.0], 4).unwrap();
        let p = d.path().join("h.csv");
        write_histogram(&p, &h).unwrap();
        let back = read_histogram(&p).unwrap();
        assert_eq!(back.edges, h.edges);
        assert_eq!(back.masses, h.masses);
    }

    #[test]
    fn gapped_histogram_rejected() {
        let d = tempdir().unwrap();
        let p = d.path().join("h.csv");
        fs::write(&p, "bin_lo,bin_hi,mass\n0,1,0.5\n2,3,0.5\n").unwrap();
        assert_eq!(read_histogram(&p).unwrap_err().class(), "format");
    }

    #[test]
    fn rates_round_trip_exactly() {
        let d = tempdir().unwrap();
        let p = d.path().join("r.csv");
        let rates: Vec<f64> = (0..40).map(|k| (k as f64 * 0.37).sin().abs() / 3.0).collect();
        write_rates(&p, &rates).unwrap();
        assert_eq!(read_rates(&p).unwrap(), rates);
    }

    #[test]
    fn manifest_round_trip() {
        let mut m = Manifest::new();
        m.set("seed", 42u64);
        m.set_floats("x_o", &[0.1, 1e-300, 3.0]);
        m.set("seed", 7u64);
        let back = Manifest::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.parse_value::<u64>("seed").unwrap(), 7);
        assert_eq!(back.parse_floats("x_o").unwrap(), vec![0.1, 1e-300, 3.0]);
        assert_eq!(back.require("nope").unwrap_err().class(), "format");
    }

    #[test]
    fn ppc_csv_has_one_row_per_age() {
        let d = tempdir().unwrap();
        let p = d.path().join("ppc.csv");
        let r = PpcReport {
            observed: vec![0.1; 40],
            mean: vec![0.1; 40],
            lo95: vec![0.0; 40],
            hi95: vec![0.2; 40],
            coverage: 1.0,
            n_draws: 3,
        };
        write_ppc(&p, &r).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 41);
        assert_eq!(lines[0], "age,observed,mean,lo95,hi95");
        assert!(lines[40].starts_with("49,"));
    }

    #[test]
    fn table_round_trip() {
        let d = tempdir().unwrap();
        let p = d.path().join("t.csv");
        let header = vec!["a".to_string(), "b".to_string()];
        let rows = vec![vec![1.0, 2.5], vec![f64::INFINITY, -0.125]];
        write_table(&p, &header, &rows).unwrap();
        assert_eq!(read_table(&p).unwrap(), (header, rows));
    }
}
