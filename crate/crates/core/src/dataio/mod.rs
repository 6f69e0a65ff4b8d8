//! Raw transaction data: CSV ingestion, design construction and market tagging.
//!
//! Required CSV headers are `PRICE` (or `LOG.PRICE`), `REGION`, `SECTIONS`,
//! `YEAR` and `WEIGHT`; `MONTH` is optional. Every other column is a candidate
//! covariate: numeric when every value parses as a number, categorical
//! otherwise. Categorical columns expand to indicator blocks named
//! `NAME=level`, dropping the lexically first level as reference.

pub mod selection;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{Bedrooms, Design, Region, Sections, TransactionPanel, UnitTags};

pub use selection::{select_variables, SelectionOptions, SelectionTrace};
pub use synthetic::{generate_synthetic, SyntheticData, SyntheticSpec};

pub const YEAR_BLOCK: &str = "YEAR";
pub const SECTIONS_BLOCK: &str = "SECTIONS";
pub const BEDROOMS_COLUMN: &str = "BEDROOMS";

const RESERVED: [&str; 7] = ["PRICE", "LOG.PRICE", "REGION", "SECTIONS", "YEAR", "WEIGHT", "MONTH"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Column {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sorted distinct levels of a categorical column.
    pub fn levels(&self) -> Vec<String> {
        match self {
            Column::Numeric(_) => Vec::new(),
            Column::Categorical(v) => v.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect(),
        }
    }

    fn select(&self, keep: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(keep.iter().map(|&i| v[i]).collect()),
            Column::Categorical(v) => Column::Categorical(keep.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

/// Validated transaction records before design construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDataset {
    pub log_price: Vec<f64>,
    pub region: Vec<Region>,
    pub sections: Vec<Sections>,
    pub year: Vec<i32>,
    pub month: Vec<u8>,
    pub weight: Vec<f64>,
    /// Candidate covariates in file order.
    pub covariates: Vec<(String, Column)>,
    /// Numeric covariates meant as 0-1 indicators.
    pub binary: BTreeSet<String>,
}

/// Row counts from ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub rejected_missing: usize,
    pub rejected_invalid: usize,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.log_price.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_price.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.covariates.iter().find(|(n, _)| n == name).map(|(_, c)| c)
    }

    pub fn years(&self) -> Vec<i32> {
        self.year.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Check the REGION / SECTIONS coding and column lengths.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        for (what, len) in [
            ("REGION", self.region.len()),
            ("SECTIONS", self.sections.len()),
            ("YEAR", self.year.len()),
            ("MONTH", self.month.len()),
            ("WEIGHT", self.weight.len()),
        ] {
            if len != n {
                return Err(Error::Data(format!("{what} has {len} values for {n} records")));
            }
        }
        for (name, col) in &self.covariates {
            if col.len() != n {
                return Err(Error::Data(format!("column {name} has {} values for {n} records", col.len())));
            }
        }
        for i in 0..n {
            if self.region[i] == Region::National && self.sections[i] != Sections::ThreePlus {
                return Err(Error::Data(format!("record {i}: REGION code 5 with {} section home", self.sections[i].name())));
            }
        }
        Ok(())
    }

    /// Keep only the listed rows.
    pub fn subset(&self, keep: &[usize]) -> RawDataset {
        RawDataset {
            log_price: keep.iter().map(|&i| self.log_price[i]).collect(),
            region: keep.iter().map(|&i| self.region[i]).collect(),
            sections: keep.iter().map(|&i| self.sections[i]).collect(),
            year: keep.iter().map(|&i| self.year[i]).collect(),
            month: keep.iter().map(|&i| self.month[i]).collect(),
            weight: keep.iter().map(|&i| self.weight[i]).collect(),
            covariates: self.covariates.iter().map(|(n, c)| (n.clone(), c.select(keep))).collect(),
            binary: self.binary.clone(),
        }
    }

    /// Write in the ingest schema; log prices are written exactly, so
    /// ingesting the output reproduces the dataset bit for bit.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> =
            ["LOG.PRICE", "REGION", "SECTIONS", "YEAR", "MONTH", "WEIGHT"].iter().map(|s| s.to_string()).collect();
        header.extend(self.covariates.iter().map(|(n, _)| n.clone()));
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![
                self.log_price[i].to_string(),
                self.region[i].code().to_string(),
                self.sections[i].name().to_string(),
                self.year[i].to_string(),
                self.month[i].to_string(),
                self.weight[i].to_string(),
            ];
            for (_, col) in &self.covariates {
                row.push(match col {
                    Column::Numeric(v) => v[i].to_string(),
                    Column::Categorical(v) => v[i].clone(),
                });
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Read a CSV source. Rows with a missing or invalid mandatory field, or a
/// missing covariate value, are dropped and counted.
pub fn ingest<R: Read>(source: R, binary: &[String]) -> Result<(RawDataset, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.to_string()).collect();
    let find = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let log_col = find("LOG.PRICE");
    let price_col = find("PRICE");
    if log_col.is_none() && price_col.is_none() {
        return Err(Error::MissingColumn("PRICE".into()));
    }
    let require = |name: &str| find(name).ok_or_else(|| Error::MissingColumn(name.into()));
    let region_col = require("REGION")?;
    let sections_col = require("SECTIONS")?;
    let year_col = require("YEAR")?;
    let weight_col = require("WEIGHT")?;
    let month_col = find("MONTH");
    let cov_cols: Vec<usize> = (0..headers.len())
        .filter(|&j| !RESERVED.iter().any(|r| headers[j].eq_ignore_ascii_case(r)))
        .collect();

    let mut report = IngestReport::default();
    let mut raw_cov: Vec<Vec<String>> = vec![Vec::new(); cov_cols.len()];
    let mut ds = RawDataset {
        log_price: Vec::new(),
        region: Vec::new(),
        sections: Vec::new(),
        year: Vec::new(),
        month: Vec::new(),
        weight: Vec::new(),
        covariates: Vec::new(),
        binary: BTreeSet::new(),
    };
    for rec in rdr.records() {
        let rec = rec?;
        let get = |j: usize| rec.get(j).unwrap_or("").trim();
        let mandatory = [log_col.or(price_col), Some(region_col), Some(sections_col), Some(year_col), Some(weight_col)];
        if mandatory.iter().flatten().any(|&j| get(j).is_empty()) || cov_cols.iter().any(|&j| get(j).is_empty()) {
            report.rejected_missing += 1;
            continue;
        }
        let parsed = (|| -> Result<(f64, Region, Sections, i32, u8, f64)> {
            let y = match log_col {
                Some(j) => get(j).parse::<f64>().map_err(|_| Error::Data("LOG.PRICE".into()))?,
                None => {
                    let price: f64 = get(price_col.expect("checked")).parse().map_err(|_| Error::Data("PRICE".into()))?;
                    if !(price > 0.0 && price.is_finite()) {
                        return Err(Error::Data("PRICE must be positive".into()));
                    }
                    price.ln()
                }
            };
            if !y.is_finite() {
                return Err(Error::Data("LOG.PRICE not finite".into()));
            }
            let region: Region = get(region_col).parse()?;
            let sections: Sections = get(sections_col).parse()?;
            if region == Region::National && sections != Sections::ThreePlus {
                return Err(Error::Data("REGION code 5 is reserved for three-or-more section homes".into()));
            }
            let year: i32 = get(year_col).parse().map_err(|_| Error::Data("YEAR".into()))?;
            let month: u8 = match month_col {
                Some(j) if !get(j).is_empty() => get(j).parse().map_err(|_| Error::Data("MONTH".into()))?,
                _ => 0,
            };
            let weight: f64 = get(weight_col).parse().map_err(|_| Error::Data("WEIGHT".into()))?;
            if !(weight > 0.0 && weight.is_finite()) {
                return Err(Error::Data("WEIGHT must be positive".into()));
            }
            Ok((y, region, sections, year, month, weight))
        })();
        let Ok((y, region, sections, year, month, weight)) = parsed else {
            report.rejected_invalid += 1;
            continue;
        };
        ds.log_price.push(y);
        ds.region.push(region);
        ds.sections.push(sections);
        ds.year.push(year);
        ds.month.push(month);
        ds.weight.push(weight);
        for (k, &j) in cov_cols.iter().enumerate() {
            raw_cov[k].push(get(j).to_string());
        }
        report.accepted += 1;
    }
    for (k, &j) in cov_cols.iter().enumerate() {
        let values = std::mem::take(&mut raw_cov[k]);
        let numeric: Option<Vec<f64>> = values.iter().map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite())).collect();
        let col = match numeric {
            Some(v) => Column::Numeric(v),
            None => Column::Categorical(values),
        };
        ds.covariates.push((headers[j].clone(), col));
    }
    for name in binary {
        if !ds.covariates.iter().any(|(n, _)| n == name) {
            return Err(Error::MissingColumn(name.clone()));
        }
        ds.binary.insert(name.clone());
    }
    for (name, col) in &ds.covariates {
        if let Column::Numeric(v) = col {
            if !v.is_empty() && v.iter().all(|x| *x == 0.0 || *x == 1.0) {
                ds.binary.insert(name.clone());
            }
        }
    }
    Ok((ds, report))
}

/// A numeric covariate, optionally log transformed (named `LOG.<name>`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NumericTerm {
    pub column: String,
    pub log: bool,
}

impl NumericTerm {
    pub fn raw(column: &str) -> Self {
        Self { column: column.to_string(), log: false }
    }

    pub fn design_name(&self) -> String {
        if self.log {
            format!("LOG.{}", self.column)
        } else {
            self.column.clone()
        }
    }
}

/// Which covariates enter the fixed-effects design.
///
/// `categorical` may name `YEAR` and `SECTIONS` besides categorical covariate
/// columns; `drop` removes individual expanded columns afterwards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub intercept: bool,
    pub numeric: Vec<NumericTerm>,
    pub categorical: Vec<String>,
    #[serde(default)]
    pub drop: Vec<String>,
}

impl DesignSpec {
    /// Every covariate raw, every categorical expanded, plus SECTIONS and YEAR blocks.
    pub fn full(ds: &RawDataset) -> Self {
        let mut numeric = Vec::new();
        let mut categorical = vec![SECTIONS_BLOCK.to_string()];
        for (name, col) in &ds.covariates {
            match col {
                Column::Numeric(_) => numeric.push(NumericTerm::raw(name)),
                Column::Categorical(_) => categorical.push(name.clone()),
            }
        }
        categorical.push(YEAR_BLOCK.to_string());
        Self { intercept: true, numeric, categorical, drop: Vec::new() }
    }
}

/// Levels and values of a categorical block, including the YEAR and SECTIONS pseudo-columns.
fn block_values(ds: &RawDataset, name: &str) -> Result<Vec<String>> {
    if name == YEAR_BLOCK {
        return Ok(ds.year.iter().map(|y| y.to_string()).collect());
    }
    if name == SECTIONS_BLOCK {
        return Ok(ds.sections.iter().map(|s| s.name().to_string()).collect());
    }
    match ds.column(name) {
        Some(Column::Categorical(v)) => Ok(v.clone()),
        Some(Column::Numeric(v)) => Ok(v.iter().map(|x| x.to_string()).collect()),
        None => Err(Error::MissingColumn(name.to_string())),
    }
}

/// Indicator columns `NAME=level` for every non-reference level.
pub fn expand_block(ds: &RawDataset, name: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let values = block_values(ds, name)?;
    let levels: Vec<String> = values.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    Ok(levels
        .iter()
        .skip(1)
        .map(|lvl| (format!("{name}={lvl}"), values.iter().map(|v| f64::from(u8::from(v == lvl))).collect()))
        .collect())
}

/// Numeric column values after the optional log transform.
pub fn numeric_values(ds: &RawDataset, term: &NumericTerm) -> Result<Vec<f64>> {
    let Some(Column::Numeric(v)) = ds.column(&term.column) else {
        return Err(Error::MissingColumn(term.column.clone()));
    };
    if !term.log {
        return Ok(v.clone());
    }
    if v.iter().any(|x| *x <= 0.0) {
        return Err(Error::Data(format!("cannot log-transform {} with non-positive values", term.column)));
    }
    Ok(v.iter().map(|x| x.ln()).collect())
}

/// Assemble the design matrix for `spec`.
pub fn build_design(ds: &RawDataset, spec: &DesignSpec) -> Result<Design> {
    let n = ds.len();
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    if spec.intercept {
        columns.push(("(Intercept)".to_string(), vec![1.0; n]));
    }
    for term in &spec.numeric {
        columns.push((term.design_name(), numeric_values(ds, term)?));
    }
    for block in &spec.categorical {
        columns.extend(expand_block(ds, block)?);
    }
    for name in &spec.drop {
        if !columns.iter().any(|(c, _)| c == name) {
            return Err(Error::InvalidArgument(format!("cannot drop unknown design column `{name}`")));
        }
    }
    columns.retain(|(c, _)| !spec.drop.contains(c));
    let names: Vec<String> = columns.iter().map(|(c, _)| c.clone()).collect();
    let mut seen = BTreeSet::new();
    if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
        return Err(Error::InvalidArgument(format!("duplicate design column `{dup}`")));
    }
    let p = columns.len();
    let mut data = vec![0.0; n * p];
    for (j, (_, col)) in columns.iter().enumerate() {
        for i in 0..n {
            data[i * p + j] = col[i];
        }
    }
    Design::new(names, data)
}

/// BEDROOMS tag of every record, when a BEDROOMS column exists.
fn bedroom_tags(ds: &RawDataset) -> Result<Option<Vec<Bedrooms>>> {
    match ds.column(BEDROOMS_COLUMN) {
        None => Ok(None),
        Some(Column::Numeric(v)) => Ok(Some(
            v.iter().map(|&c| if c <= 2.0 { Bedrooms::TwoOrFewer } else { Bedrooms::ThreeOrMore }).collect(),
        )),
        Some(Column::Categorical(v)) => v.iter().map(|s| s.parse()).collect::<Result<Vec<_>>>().map(Some),
    }
}

/// Build the model panel: design per `spec`, one random-effect group per
/// REGION code, and the subpopulation of every record.
pub fn tag_subpopulations(ds: &RawDataset, spec: &DesignSpec) -> Result<TransactionPanel> {
    ds.validate()?;
    let bedrooms = bedroom_tags(ds)?;
    let tags = (0..ds.len())
        .map(|i| UnitTags::market(ds.region[i], ds.sections[i], bedrooms.as_ref().map(|b| b[i])))
        .collect::<Result<Vec<_>>>()?;
    let design = build_design(ds, spec)?;
    TransactionPanel::new(
        design,
        ds.log_price.clone(),
        ds.region.iter().map(|r| r.index()).collect(),
        Region::ALL.len(),
        ds.year.clone(),
        ds.weight.clone(),
        tags,
    )?
    .with_months(ds.month.clone())
}

/// Records per subpopulation number (index 0 unused).
pub fn subpopulation_counts(panel: &TransactionPanel) -> [usize; 10] {
    let mut counts = [0usize; 10];
    for t in &panel.tags {
        if let Some(s) = t.subpopulation {
            counts[usize::from(s.number())] += 1;
        }
    }
    counts
}

/// Count records per (region, sections) pair; handy for summaries.
pub fn market_counts(ds: &RawDataset) -> BTreeMap<(Region, Sections), usize> {
    let mut out = BTreeMap::new();
    for i in 0..ds.len() {
        *out.entry((ds.region[i], ds.sections[i])).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "\
PRICE,REGION,SECTIONS,YEAR,WEIGHT,SQFT,LOCATION,BEDROOMS
100000,1,single,2015,2.0,1200,inside,2
-5,2,double,2015,1.0,1500,outside,3
150000,2,double,2016,1.5,,outside,3
90000,5,three,2016,3.0,2000,inside,4
80000,5,single,2016,3.0,900,inside,2
120000,4,double,2016,1.0,1600,outside,3
";

    #[test]
    fn ingest_counts_and_log_price() {
        let (ds, report) = ingest(CSV.as_bytes(), &[]).unwrap();
        assert_eq!(report, IngestReport { accepted: 3, rejected_missing: 1, rejected_invalid: 2 });
        assert_eq!(ds.log_price[0], 100000f64.ln());
        assert!(matches!(ds.column("SQFT"), Some(Column::Numeric(_))));
        assert!(matches!(ds.column("LOCATION"), Some(Column::Categorical(_))));
    }

    #[test]
    fn missing_mandatory_column_named() {
        let err = ingest("PRICE,REGION,SECTIONS,YEAR\n1,1,single,2015\n".as_bytes(), &[]).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(c) if c == "WEIGHT"));
        let err = ingest("REGION,SECTIONS,YEAR,WEIGHT\n1,single,2015,1\n".as_bytes(), &[]).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(c) if c == "PRICE"));
    }

    #[test]
    fn design_expansion_and_tags() {
        let (ds, _) = ingest(CSV.as_bytes(), &[]).unwrap();
        let spec = DesignSpec::full(&ds);
        let panel = tag_subpopulations(&ds, &spec).unwrap();
        let names = panel.design.names();
        assert_eq!(names[0], "(Intercept)");
        assert!(names.contains(&"LOCATION=outside".to_string()));
        assert!(!names.contains(&"LOCATION=inside".to_string()));
        assert!(names.contains(&"YEAR=2016".to_string()));
        let subs: Vec<u8> = panel.tags.iter().map(|t| t.subpopulation.unwrap().number()).collect();
        assert_eq!(subs, vec![1, 9, 8]);
        assert_eq!(panel.tags[1].bedrooms, Some(Bedrooms::ThreeOrMore));
        assert_eq!(panel.group, vec![0, 4, 3]);
    }

    #[test]
    fn write_then_ingest_is_identity() {
        let (ds, _) = ingest(CSV.as_bytes(), &[]).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let (again, report) = ingest(buf.as_slice(), &[]).unwrap();
        assert_eq!(report.accepted, ds.len());
        assert_eq!(again, ds);
    }
}
