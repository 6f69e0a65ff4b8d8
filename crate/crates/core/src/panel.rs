//! Longitudinal transaction panel and the market segmentation used for domains.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// REGION codes: four census regions plus a national code that only carries
/// three-or-more section homes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Northeast,
    Midwest,
    South,
    West,
    National,
}

impl Region {
    pub const ALL: [Region; 5] =
        [Region::Northeast, Region::Midwest, Region::South, Region::West, Region::National];

    /// Numeric REGION code, 1 to 5.
    pub fn code(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Region::ALL.get(usize::from(code).checked_sub(1)?).copied()
    }

    /// Zero-based random-effect group index.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Northeast => "northeast",
            Region::Midwest => "midwest",
            Region::South => "south",
            Region::West => "west",
            Region::National => "national",
        }
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if let Ok(code) = t.parse::<u8>() {
            return Region::from_code(code)
                .ok_or_else(|| Error::Data(format!("REGION code {code} outside 1..=5")));
        }
        Region::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(t))
            .ok_or_else(|| Error::Data(format!("unknown REGION `{s}`")))
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sections {
    Single,
    Double,
    ThreePlus,
}

impl Sections {
    pub fn name(self) -> &'static str {
        match self {
            Sections::Single => "single",
            Sections::Double => "double",
            Sections::ThreePlus => "three_plus",
        }
    }
}

impl FromStr for Sections {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "single" | "one" => Ok(Sections::Single),
            "2" | "double" | "two" => Ok(Sections::Double),
            "3" | "3+" | "three" | "three_plus" | "three-or-more" | "three_or_more" => {
                Ok(Sections::ThreePlus)
            }
            other => Err(Error::Data(format!("unknown SECTIONS `{other}`"))),
        }
    }
}

/// BEDROOMS collapsed to two classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bedrooms {
    TwoOrFewer,
    ThreeOrMore,
}

impl Bedrooms {
    pub fn name(self) -> &'static str {
        match self {
            Bedrooms::TwoOrFewer => "two_or_fewer",
            Bedrooms::ThreeOrMore => "three_or_more",
        }
    }
}

impl FromStr for Bedrooms {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        if let Ok(count) = t.parse::<f64>() {
            return Ok(if count <= 2.0 { Bedrooms::TwoOrFewer } else { Bedrooms::ThreeOrMore });
        }
        match t.as_str() {
            "two_or_fewer" | "2-" | "<=2" | "two or fewer" => Ok(Bedrooms::TwoOrFewer),
            "three_or_more" | "3+" | ">=3" | "three or more" => Ok(Bedrooms::ThreeOrMore),
            other => Err(Error::Data(format!("unknown BEDROOMS `{other}`"))),
        }
    }
}

/// One of the nine REGION x SECTIONS market segments, numbered 1 to 9.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Subpopulation(u8);

impl Subpopulation {
    pub fn new(k: u8) -> Result<Self> {
        if (1..=9).contains(&k) {
            Ok(Self(k))
        } else {
            Err(Error::InvalidArgument(format!("subpopulation {k} outside 1..=9")))
        }
    }

    pub fn number(self) -> u8 {
        self.0
    }

    /// Single and double section homes are keyed by census region; every
    /// three-or-more section home falls in segment 9 whatever its REGION code.
    pub fn classify(region: Region, sections: Sections) -> Result<Self> {
        let offset = match region {
            Region::Northeast => 1,
            Region::Midwest => 2,
            Region::South => 3,
            Region::West => 4,
            Region::National => 0,
        };
        match (sections, offset) {
            (Sections::ThreePlus, _) => Ok(Self(9)),
            (_, 0) => Err(Error::Data(format!(
                "REGION code 5 is reserved for three-or-more section homes, got {} section",
                sections.name()
            ))),
            (Sections::Single, o) => Ok(Self(o)),
            (Sections::Double, o) => Ok(Self(4 + o)),
        }
    }
}

/// Per-record segmentation tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UnitTags {
    pub region: Option<Region>,
    pub sections: Option<Sections>,
    pub bedrooms: Option<Bedrooms>,
    pub subpopulation: Option<Subpopulation>,
}

impl UnitTags {
    pub fn market(region: Region, sections: Sections, bedrooms: Option<Bedrooms>) -> Result<Self> {
        Ok(Self {
            region: Some(region),
            sections: Some(sections),
            bedrooms,
            subpopulation: Some(Subpopulation::classify(region, sections)?),
        })
    }
}

/// Population or one subpopulation; a predicate over [`UnitTags`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Domain {
    Population,
    Subpopulation(Subpopulation),
}

impl Domain {
    /// Population followed by subpopulations 1 to 9.
    pub fn standard() -> Vec<Domain> {
        std::iter::once(Domain::Population)
            .chain((1..=9).map(|k| Domain::Subpopulation(Subpopulation(k))))
            .collect()
    }

    pub fn contains(&self, tags: &UnitTags) -> bool {
        match self {
            Domain::Population => true,
            Domain::Subpopulation(s) => tags.subpopulation == Some(*s),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Domain::Population => "population".to_string(),
            Domain::Subpopulation(s) => format!("sub{}", s.0),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        if t == "population" || t == "pop" || t == "0" {
            return Ok(Domain::Population);
        }
        let digits = t.strip_prefix("sub").unwrap_or(&t);
        let k: u8 = digits
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("unknown domain `{s}`")))?;
        Ok(Domain::Subpopulation(Subpopulation::new(k)?))
    }
}

impl TryFrom<String> for Domain {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Domain> for String {
    fn from(d: Domain) -> String {
        d.label()
    }
}

/// Row-major design matrix with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    names: Vec<String>,
    data: Vec<f64>,
    rows: usize,
}

impl Design {
    pub fn new(names: Vec<String>, data: Vec<f64>) -> Result<Self> {
        let p = names.len();
        if p == 0 {
            return Err(Error::InvalidArgument("design needs at least one column".into()));
        }
        if !data.len().is_multiple_of(p) {
            return Err(Error::DimensionMismatch { expected: p, got: data.len() % p });
        }
        let rows = data.len() / p;
        Ok(Self { names, data, rows })
    }

    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let p = names.len();
        let mut data = Vec::with_capacity(rows.len() * p);
        for r in rows {
            if r.len() != p {
                return Err(Error::DimensionMismatch { expected: p, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::new(names, data)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ncols(&self) -> usize {
        self.names.len()
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.ncols();
        &self.data[i * p..(i + 1) * p]
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Sale transactions with log prices, covariates, random-effect group, period,
/// sampling weight and segmentation tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TransactionPanel {
    pub design: Design,
    pub log_price: Vec<f64>,
    /// Zero-based random-effect group (region) of each record.
    pub group: Vec<usize>,
    pub n_groups: usize,
    pub year: Vec<i32>,
    /// Month within year, 0 when unknown; orders records inside the last period.
    pub month: Vec<u8>,
    pub weight: Vec<f64>,
    pub tags: Vec<UnitTags>,
}

impl TransactionPanel {
    /// Validate lengths, groups and weights.
    pub fn new(
        design: Design,
        log_price: Vec<f64>,
        group: Vec<usize>,
        n_groups: usize,
        year: Vec<i32>,
        weight: Vec<f64>,
        tags: Vec<UnitTags>,
    ) -> Result<Self> {
        let n = design.nrows();
        for (what, len) in [
            ("log_price", log_price.len()),
            ("group", group.len()),
            ("year", year.len()),
            ("weight", weight.len()),
            ("tags", tags.len()),
        ] {
            if len != n {
                return Err(Error::Data(format!("{what} has {len} entries for {n} records")));
            }
        }
        if n_groups == 0 {
            return Err(Error::Data("at least one region is required".into()));
        }
        if let Some(g) = group.iter().find(|g| **g >= n_groups) {
            return Err(Error::Data(format!("group index {g} outside 0..{n_groups}")));
        }
        if let Some(w) = weight.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::Data(format!("sampling weight must be positive, got {w}")));
        }
        if log_price.iter().any(|y| !y.is_finite()) {
            return Err(Error::Data("non-finite log price".into()));
        }
        Ok(Self { design, log_price, group, n_groups, year, month: vec![0; n], weight, tags })
    }

    /// Single-covariate-set panel without tags, years or weights; convenient for
    /// pure model fitting.
    pub fn simple(design: Design, log_price: Vec<f64>, group: Vec<usize>, n_groups: usize) -> Result<Self> {
        let n = design.nrows();
        Self::new(design, log_price, group, n_groups, vec![0; n], vec![1.0; n], vec![UnitTags::default(); n])
    }

    pub fn with_months(mut self, month: Vec<u8>) -> Result<Self> {
        if month.len() != self.len() {
            return Err(Error::Data("month column length mismatch".into()));
        }
        self.month = month;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.log_price.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_price.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.design.ncols()
    }

    pub fn last_year(&self) -> Option<i32> {
        self.year.iter().copied().max()
    }

    /// Same records with replaced log prices.
    pub fn with_log_prices(&self, log_price: Vec<f64>) -> Self {
        assert_eq!(log_price.len(), self.len());
        Self { log_price, ..self.clone() }
    }

    /// Number of records per group.
    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_groups];
        for &g in &self.group {
            sizes[g] += 1;
        }
        sizes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subpopulation_map() {
        let s = |r, x| Subpopulation::classify(r, x).unwrap().number();
        assert_eq!(s(Region::Northeast, Sections::Single), 1);
        assert_eq!(s(Region::West, Sections::Single), 4);
        assert_eq!(s(Region::Northeast, Sections::Double), 5);
        assert_eq!(s(Region::West, Sections::Double), 8);
        for r in Region::ALL {
            assert_eq!(s(r, Sections::ThreePlus), 9);
        }
        assert!(Subpopulation::classify(Region::National, Sections::Single).is_err());
        assert!(Subpopulation::classify(Region::National, Sections::Double).is_err());
    }

    #[test]
    fn parse_tags() {
        assert_eq!("5".parse::<Region>().unwrap(), Region::National);
        assert_eq!("South".parse::<Region>().unwrap(), Region::South);
        assert!("6".parse::<Region>().is_err());
        assert_eq!("3".parse::<Sections>().unwrap(), Sections::ThreePlus);
        assert_eq!("4".parse::<Bedrooms>().unwrap(), Bedrooms::ThreeOrMore);
        assert_eq!("2".parse::<Bedrooms>().unwrap(), Bedrooms::TwoOrFewer);
        assert_eq!("sub7".parse::<Domain>().unwrap().label(), "sub7");
        assert_eq!("population".parse::<Domain>().unwrap(), Domain::Population);
        assert!("sub10".parse::<Domain>().is_err());
    }

    #[test]
    fn standard_domains() {
        let d = Domain::standard();
        assert_eq!(d.len(), 10);
        assert_eq!(d[0], Domain::Population);
        assert_eq!(d[9].label(), "sub9");
    }

    #[test]
    fn panel_validation() {
        let design = Design::from_rows(vec!["one".into()], &[vec![1.0], vec![1.0]]).unwrap();
        assert!(TransactionPanel::simple(design.clone(), vec![0.0, 1.0], vec![0, 2], 2).is_err());
        assert!(TransactionPanel::new(
            design.clone(),
            vec![0.0, 1.0],
            vec![0, 1],
            2,
            vec![0, 0],
            vec![1.0, 0.0],
            vec![UnitTags::default(); 2]
        )
        .is_err());
        let p = TransactionPanel::simple(design, vec![0.0, 1.0], vec![0, 1], 2).unwrap();
        assert_eq!(p.group_sizes(), vec![1, 1]);
    }
}
