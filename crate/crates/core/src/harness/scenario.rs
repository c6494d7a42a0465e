//! Split strings such as `"d0(0-3), d1(4-7)"` and the label masks they imply.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::GdaDataset;
use crate::error::{GdaError, Result};
use crate::rng::stream;

const STREAM_SCENARIO: u64 = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioClause {
    pub domain: String,
    /// Inclusive class ranges.
    pub ranges: Vec<(u32, u32)>,
}

impl ScenarioClause {
    pub fn classes(&self) -> BTreeSet<u32> {
        self.ranges.iter().flat_map(|&(lo, hi)| lo..=hi).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub clauses: Vec<ScenarioClause>,
    pub labeled_fraction: f64,
    pub hide_domain_labels: bool,
}

struct Parser<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, message: impl Into<String>) -> GdaError {
        GdaError::ScenarioParse {
            position: self.pos,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(|c| c.is_whitespace()) {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    fn expect(&mut self, c: char) -> Result<()> {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected `{c}`")))
        }
    }

    fn take_while(&mut self, f: impl Fn(char) -> bool) -> &'a str {
        let start = self.pos;
        while self.peek().is_some_and(&f) {
            self.pos += self.peek().map_or(0, char::len_utf8);
        }
        &self.text[start..self.pos]
    }

    fn number(&mut self) -> Result<u32> {
        self.skip_ws();
        let start = self.pos;
        let digits = self.take_while(|c| c.is_ascii_digit());
        if digits.is_empty() {
            return Err(self.err("expected a class number"));
        }
        digits.parse().map_err(|_| GdaError::ScenarioParse {
            position: start,
            message: "class number out of range".into(),
        })
    }

    fn range(&mut self) -> Result<(u32, u32)> {
        self.skip_ws();
        let start = self.pos;
        let lo = self.number()?;
        self.skip_ws();
        let hi = if self.peek() == Some('-') {
            self.pos += 1;
            self.number()?
        } else {
            lo
        };
        if lo > hi {
            return Err(GdaError::ScenarioParse {
                position: start,
                message: format!("empty range {lo}-{hi}"),
            });
        }
        Ok((lo, hi))
    }

    fn clause(&mut self) -> Result<ScenarioClause> {
        self.skip_ws();
        let domain = self.take_while(|c| c.is_alphanumeric() || c == '_').to_string();
        if domain.is_empty() {
            return Err(self.err("expected a domain name"));
        }
        self.expect('(')?;
        let mut ranges = vec![self.range()?];
        loop {
            self.skip_ws();
            match self.peek() {
                Some(',') => {
                    self.pos += 1;
                    ranges.push(self.range()?);
                }
                Some(')') => {
                    self.pos += 1;
                    break;
                }
                _ => return Err(self.err("expected `,` or `)`")),
            }
        }
        Ok(ScenarioClause { domain, ranges })
    }
}

/// Parse comma-separated `name(lo-hi[,lo-hi...])` clauses. The result has
/// `labeled_fraction = 1` and hidden domain labels.
pub fn parse_scenario(text: &str) -> Result<ScenarioSpec> {
    let mut p = Parser { text, pos: 0 };
    let mut clauses: Vec<ScenarioClause> = Vec::new();
    loop {
        let start = {
            p.skip_ws();
            p.pos
        };
        let clause = p.clause()?;
        if clauses.iter().any(|c| c.domain == clause.domain) {
            return Err(GdaError::ScenarioParse {
                position: start,
                message: format!("domain `{}` appears twice", clause.domain),
            });
        }
        clauses.push(clause);
        p.skip_ws();
        match p.peek() {
            None => break,
            Some(',') => p.pos += 1,
            Some(_) => return Err(p.err("expected `,` between clauses")),
        }
    }
    Ok(ScenarioSpec {
        clauses,
        labeled_fraction: 1.0,
        hide_domain_labels: true,
    })
}

/// Domain id for a clause name: a position in `names` when given, otherwise
/// `d<N>` or a bare `<N>`.
pub fn resolve_domain(name: &str, names: &[String]) -> Result<u32> {
    if !names.is_empty() {
        return names
            .iter()
            .position(|n| n == name)
            .map(|i| i as u32)
            .ok_or_else(|| GdaError::UnknownDomain(name.to_string()));
    }
    name.strip_prefix('d')
        .unwrap_or(name)
        .parse()
        .map_err(|_| GdaError::UnknownDomain(name.to_string()))
}

/// Copy of `dataset` with visibility flags set by `spec`. Within every
/// matching (domain, class) cell, `round(f * n)` samples (at least one) are
/// labeled, chosen by a seeded shuffle; everything else is unlabeled.
pub fn apply_scenario(dataset: &GdaDataset, spec: &ScenarioSpec, names: &[String], seed: u64) -> Result<GdaDataset> {
    let f = spec.labeled_fraction;
    if !(f > 0.0 && f <= 1.0) {
        return Err(GdaError::invalid(format!("labeled_fraction must be in (0, 1], got {f}")));
    }
    let present = dataset.domains();
    let mut labeled_cells = BTreeSet::new();
    for clause in &spec.clauses {
        let d = resolve_domain(&clause.domain, names)?;
        if !present.contains(&d) {
            return Err(GdaError::UnknownDomain(clause.domain.clone()));
        }
        labeled_cells.extend(clause.classes().into_iter().map(|c| (d, c)));
    }
    let mut out = dataset.clone();
    for s in out.samples_mut() {
        s.class_visible = false;
        s.domain_visible = !spec.hide_domain_labels;
    }
    for &(d, c) in &labeled_cells {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| {
                let s = dataset.get(i);
                s.domain_label == d && s.class_label == c
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut stream(seed, &[STREAM_SCENARIO, u64::from(d), u64::from(c)]));
        let take = ((f * members.len() as f64).round() as usize).max(1);
        for &i in &members[..take] {
            out.samples_mut()[i].class_visible = true;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;
    use crate::image::Image;
    use crate::problem::{classify_scenario, ScenarioName};

    fn grid(domains: u32, classes: u32, per: usize) -> GdaDataset {
        let img = Image::filled(1, 4, 4, 0.0).unwrap();
        let mut samples = Vec::new();
        for d in 0..domains {
            for c in 0..classes {
                for _ in 0..per {
                    samples.push(Sample {
                        image: img.clone(),
                        class_label: c,
                        domain_label: d,
                        class_visible: true,
                        domain_visible: true,
                    });
                }
            }
        }
        GdaDataset::new(samples)
    }

    #[test]
    fn parses_split_strings() {
        let s = parse_scenario("d0(0-3), d1(4-7)").unwrap();
        assert_eq!(s.clauses.len(), 2);
        assert_eq!(s.clauses[0].classes(), (0..=3).collect());
        assert_eq!(s.clauses[1].classes(), (4..=7).collect());
        let o = parse_scenario("sv(0-5), sy(2-7)").unwrap();
        assert_eq!(o.clauses[0].domain, "sv");
        let m = parse_scenario(" a(0, 2-3 ,5) ").unwrap();
        assert_eq!(m.clauses[0].classes(), [0, 2, 3, 5].into_iter().collect());
    }

    #[test]
    fn parse_errors_carry_positions() {
        let pos = |t: &str| match parse_scenario(t) {
            Err(GdaError::ScenarioParse { position, .. }) => position,
            other => panic!("expected parse error for {t:?}, got {other:?}"),
        };
        assert_eq!(pos(""), 0);
        assert_eq!(pos("d0(3-1)"), 3);
        assert_eq!(pos("d0(0-3) d1(4)"), 8);
        assert_eq!(pos("d0(0-3"), 6);
        assert_eq!(pos("d0(0), d0(1)"), 7);
        assert_eq!(pos("(1)"), 0);
    }

    #[test]
    fn domain_names() {
        assert_eq!(resolve_domain("d3", &[]).unwrap(), 3);
        assert_eq!(resolve_domain("2", &[]).unwrap(), 2);
        let names = vec!["sv".to_string(), "sy".to_string()];
        assert_eq!(resolve_domain("sy", &names).unwrap(), 1);
        assert!(matches!(resolve_domain("mn", &names), Err(GdaError::UnknownDomain(_))));
    }

    #[test]
    fn full_fraction_gives_gda1() {
        let ds = grid(2, 6, 3);
        let spec = parse_scenario("d0(0-1), d1(2-3)").unwrap();
        let out = apply_scenario(&ds, &spec, &[], 1).unwrap();
        assert!(classify_scenario(&out).unwrap().contains(&ScenarioName::Gda1));
        assert_eq!(out.stripped(), ds.stripped());
    }

    #[test]
    fn half_fraction_counts_and_determinism() {
        let ds = grid(2, 2, 100);
        let mut spec = parse_scenario("d0(0), d1(1)").unwrap();
        spec.labeled_fraction = 0.5;
        let out = apply_scenario(&ds, &spec, &[], 7).unwrap();
        let cell = |d: u32, c: u32| {
            out.iter()
                .filter(|s| s.domain_label == d && s.class_label == c && s.class_visible)
                .count()
        };
        assert_eq!((cell(0, 0), cell(1, 1), cell(0, 1)), (50, 50, 0));
        assert_eq!(out, apply_scenario(&ds, &spec, &[], 7).unwrap());
        assert_ne!(out, apply_scenario(&ds, &spec, &[], 8).unwrap());
        assert!(classify_scenario(&out).unwrap().contains(&ScenarioName::Gda2));
    }

    #[test]
    fn rejects_unknown_domains_and_bad_fractions() {
        let ds = grid(2, 2, 1);
        let spec = parse_scenario("d5(0)").unwrap();
        assert!(matches!(apply_scenario(&ds, &spec, &[], 0), Err(GdaError::UnknownDomain(_))));
        let mut spec = parse_scenario("d0(0)").unwrap();
        spec.labeled_fraction = 0.0;
        assert!(apply_scenario(&ds, &spec, &[], 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn ground_truth_is_never_touched(
            lo in 0u32..4,
            span in 0u32..3,
            frac in 0.05f64..=1.0,
            hide in proptest::bool::ANY,
            seed in 0u64..1000,
        ) {
            let ds = grid(3, 6, 4);
            let mut spec = parse_scenario(&format!("d0({lo}-{}), d2({})", lo + span, 5 - lo)).unwrap();
            spec.labeled_fraction = frac;
            spec.hide_domain_labels = hide;
            let out = apply_scenario(&ds, &spec, &[], seed).unwrap();
            proptest::prop_assert_eq!(out.stripped(), ds.stripped());
            proptest::prop_assert!(out.iter().all(|s| s.domain_visible != hide));
            let labeled = out.iter().filter(|s| s.class_visible).count();
            let per_cell = ((frac * 4.0).round() as usize).max(1);
            proptest::prop_assert_eq!(labeled, per_cell * (span as usize + 2));
        }
    }
}
