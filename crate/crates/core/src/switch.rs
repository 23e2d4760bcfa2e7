//! Switch specifications: ordered lists of width fractions such as `[0.5,0.25,0.25]x`.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One deployable configuration of the shared network. Sub-model `i` owns the
/// channel interval `[offset_i, offset_i + width_i)` in units of the base width.
#[derive(Clone, Debug, PartialEq)]
pub struct SwitchSpec {
    widths: Vec<f64>,
}

impl SwitchSpec {
    pub fn new(widths: Vec<f64>) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::SwitchSyntax {
                input: format!("{widths:?}"),
                reason: "a switch needs at least one width".into(),
            });
        }
        if let Some(w) = widths.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::SwitchSyntax {
                input: format!("{widths:?}"),
                reason: format!("width {w} is not a positive fraction"),
            });
        }
        Ok(Self { widths })
    }

    /// A single-network switch `[w]x`.
    pub fn single(width: f64) -> Result<Self> {
        Self::new(vec![width])
    }

    pub fn full() -> Self {
        Self { widths: vec![1.0] }
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.widths.iter().sum()
    }

    pub fn is_full(&self) -> bool {
        self.widths == [1.0]
    }

    /// Fits inside the width-1.0 network and can therefore be deployed after
    /// the wide channels are discarded.
    pub fn is_deployable(&self) -> bool {
        self.total() <= 1.0 + 1e-9
    }

    /// Start offsets of each sub-model, in base-width units.
    pub fn offsets(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.widths
            .iter()
            .map(|w| {
                let o = acc;
                acc += w;
                o
            })
            .collect()
    }

    /// Channel index ranges of each sub-model for a layer with `base`
    /// channels at width 1.0. Endpoints are rounded half-up from cumulative
    /// offsets, so the intervals tile `[0, round(total * base))` exactly.
    pub fn channel_ranges(&self, base: usize) -> Vec<Range<usize>> {
        let mut acc = 0.0;
        let mut start = 0;
        self.widths
            .iter()
            .map(|w| {
                acc += w;
                let end = round_half_up(acc * base as f64);
                let r = start..end;
                start = end;
                r
            })
            .collect()
    }

    pub fn canonical(&self) -> String {
        self.to_string()
    }
}

/// `round(x)` with ties going up; tolerant of tiny float accumulation error.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

fn format_width(w: f64) -> String {
    if w.fract() == 0.0 {
        format!("{w:.1}")
    } else {
        format!("{w}")
    }
}

impl fmt::Display for SwitchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.widths.iter().map(|&w| format_width(w)).collect();
        write!(f, "[{}]x", parts.join(","))
    }
}

impl FromStr for SwitchSpec {
    type Err = Error;

    /// Accepts `[0.5,0.25,0.25]x`, the repeat shorthand `[4x0.25]x`, `×` for
    /// `x`, `;` for `,` and surrounding whitespace.
    fn from_str(s: &str) -> Result<Self> {
        let err = |reason: &str| Error::SwitchSyntax {
            input: s.to_string(),
            reason: reason.to_string(),
        };
        let norm: String = s
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| if c == '×' || c == 'X' { 'x' } else { c })
            .collect();
        let body = norm
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix("]x"))
            .ok_or_else(|| err("must look like [w1,w2,...]x"))?;
        if body.is_empty() {
            return Err(err("empty width list"));
        }
        let mut widths = Vec::new();
        for item in body.split([',', ';']) {
            let (count, width) = match item.split_once('x') {
                Some((n, w)) => {
                    let n: usize = n.parse().map_err(|_| err(&format!("bad repeat count in {item:?}")))?;
                    if n == 0 {
                        return Err(err("repeat count must be at least 1"));
                    }
                    (n, w)
                }
                None => (1, item),
            };
            let w: f64 = width.parse().map_err(|_| err(&format!("bad width {width:?}")))?;
            widths.extend(std::iter::repeat_n(w, count));
        }
        Self::new(widths).map_err(|e| match e {
            Error::SwitchSyntax { reason, .. } => err(&reason),
            other => other,
        })
    }
}
