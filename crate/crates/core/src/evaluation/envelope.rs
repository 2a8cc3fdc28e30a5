// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::steering::RunRecord;

/// One (trait, coherency) aggregate for a coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    #[serde(rename = "trait")]
    pub trait_score: f64,
    pub coherency: f64,
    pub coefficient: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frontier {
    pub label: String,
    pub points: Vec<ParetoPoint>,
}

impl Frontier {
    pub fn new(label: impl Into<String>, points: &[(f64, f64)]) -> Self {
        let label = label.into();
        Self {
            points: points
                .iter()
                .enumerate()
                .map(|(i, (t, c))| ParetoPoint {
                    trait_score: *t,
                    coherency: *c,
                    coefficient: i as f64,
                    label: label.clone(),
                })
                .collect(),
            label,
        }
    }

    fn check(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Envelope(format!("frontier `{}` has no points", self.label)));
        }
        for p in &self.points {
            if !(p.trait_score.is_finite() && p.coherency.is_finite()) {
                return Err(Error::Envelope(format!("frontier `{}` has a non-finite point", self.label)));
            }
        }
        Ok(())
    }

    pub fn max_coherency(&self) -> Result<f64> {
        self.check()?;
        Ok(self.points.iter().map(|p| p.coherency).fold(f64::NEG_INFINITY, f64::max))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeVariant {
    /// Best trait reachable at coherency at least `c`.
    #[default]
    Upper,
    /// Worst trait among points with coherency at least `c`.
    Lower,
}

/// Piecewise-constant envelope over coherency.
///
/// `values[k]` holds on `(breaks[k-1], breaks[k]]`; the first piece extends
/// down to minus infinity and the function is undefined above the last break.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    pub breaks: Vec<f64>,
    pub values: Vec<f64>,
}

impl StepFunction {
    pub fn of(frontier: &Frontier, variant: EnvelopeVariant) -> Result<Self> {
        frontier.check()?;
        let mut pts: Vec<(f64, f64)> = frontier.points.iter().map(|p| (p.coherency, p.trait_score)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut breaks = Vec::new();
        let mut values = Vec::new();
        // Sweep from the highest coherency down, carrying the running max/min.
        let mut acc: Option<f64> = None;
        for (c, t) in pts.iter().rev() {
            acc = Some(match (acc, variant) {
                (None, _) => *t,
                (Some(a), EnvelopeVariant::Upper) => a.max(*t),
                (Some(a), EnvelopeVariant::Lower) => a.min(*t),
            });
            if breaks.last() == Some(c) {
                *values.last_mut().unwrap() = acc.unwrap();
            } else {
                breaks.push(*c);
                values.push(acc.unwrap());
            }
        }
        breaks.reverse();
        values.reverse();
        Ok(Self { breaks, values })
    }

    pub fn max_coherency(&self) -> f64 {
        *self.breaks.last().unwrap()
    }

    pub fn value_at(&self, c: f64) -> Option<f64> {
        let k = self.breaks.partition_point(|b| *b < c);
        self.values.get(k).copied()
    }

    /// Exact integral over `[a, b]`; `b` must not exceed the last break.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let mut total = 0.0;
        let mut prev = f64::NEG_INFINITY;
        for (brk, v) in self.breaks.iter().zip(&self.values) {
            let lo = prev.max(a);
            let hi = brk.min(b);
            if hi > lo {
                total += (hi - lo) * v;
            }
            prev = *brk;
        }
        total
    }
}

/// Smallest of the frontiers' maximum coherencies.
pub fn c_max_common(frontiers: &[Frontier]) -> Result<f64> {
    if frontiers.is_empty() {
        return Err(Error::Envelope("no frontiers".into()));
    }
    frontiers
        .iter()
        .map(Frontier::max_coherency)
        .try_fold(f64::INFINITY, |m, c| c.map(|c| m.min(c)))
}

/// Mean envelope value of `target` over `[tau, c_max_common]`, where the
/// common ceiling is taken over `frontiers` and `target` together.
pub fn envelope_score(frontiers: &[Frontier], target: &Frontier, tau: f64, variant: EnvelopeVariant) -> Result<f64> {
    let ceiling = c_max_common(frontiers)?.min(target.max_coherency()?);
    if !(tau < ceiling) {
        return Err(Error::Envelope(format!(
            "tau {tau} is not below the common coherency ceiling {ceiling}; no common safe range"
        )));
    }
    let step = StepFunction::of(target, variant)?;
    Ok(step.integral(tau, ceiling) / (ceiling - tau))
}

/// One point per coefficient, averaging the run-level aggregates.
pub fn build_frontier(records: &[RunRecord]) -> Result<Frontier> {
    let first = records
        .first()
        .ok_or_else(|| Error::Envelope("cannot build a frontier from zero records".into()))?;
    let mut groups: BTreeMap<u64, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        if r.persona != first.persona || r.site_set != first.site_set || r.configuration != first.configuration {
            return Err(Error::Envelope(format!(
                "records mix {}/{} with {}/{}",
                first.persona, first.site_set, r.persona, r.site_set
            )));
        }
        groups.entry(ordered_bits(r.coefficient)).or_default().push(r);
    }
    let mut points = Vec::new();
    for (_, mut group) in groups {
        group.sort_by_key(|r| (r.run, r.seed));
        let n = group.len() as f64;
        points.push(ParetoPoint {
            trait_score: group.iter().map(|r| r.mean_trait).sum::<f64>() / n,
            coherency: group.iter().map(|r| r.mean_coherency).sum::<f64>() / n,
            coefficient: group[0].coefficient,
            label: first.site_set.clone(),
        });
    }
    Ok(Frontier {
        label: first.site_set.clone(),
        points,
    })
}

/// Maps an `f64` to a `u64` with the same total order.
fn ordered_bits(x: f64) -> u64 {
    let b = x.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

pub fn points_csv(frontiers: &[Frontier]) -> String {
    let mut out = String::from("label,coefficient,trait,coherency\n");
    for f in frontiers {
        for p in &f.points {
            writeln!(out, "{},{},{:.6},{:.6}", f.label, p.coefficient, p.trait_score, p.coherency).unwrap();
        }
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Scatter of frontier points with their upper envelopes; coherency on x, trait on y.
pub fn frontiers_svg(frontiers: &[Frontier]) -> Result<String> {
    let (w, h, m) = (480.0, 360.0, 40.0);
    let x = |c: f64| m + c.clamp(0.0, 100.0) / 100.0 * (w - 2.0 * m);
    let y = |t: f64| h - m - t.clamp(0.0, 100.0) / 100.0 * (h - 2.0 * m);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(
        s,
        r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * m,
        h - 2.0 * m
    )
    .unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">coherency</text>"#, w / 2.0, h - 8.0).unwrap();
    writeln!(s, r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})">trait</text>"#, h / 2.0, h / 2.0).unwrap();
    for (i, f) in frontiers.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let step = StepFunction::of(f, EnvelopeVariant::Upper)?;
        let mut path = String::new();
        let mut prev = 0.0;
        for (b, v) in step.breaks.iter().zip(&step.values) {
            write!(path, "{:.2},{:.2} {:.2},{:.2} ", x(prev), y(*v), x(*b), y(*v)).unwrap();
            prev = *b;
        }
        writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            path.trim_end()
        )
        .unwrap();
        for p in &f.points {
            writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"><title>{} α={}</title></circle>"#,
                x(p.coherency),
                y(p.trait_score),
                f.label,
                p.coefficient
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            w - m - 110.0,
            m + 14.0 * (i as f64 + 1.0),
            f.label
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}
