//! Generalized causal attention mask over `[condition | clean | noisy]`.
//!
//! Layout of a sequence of `seq = cl + v + l` tokens:
//!
//! ```text
//!   cols:    cond  | clean k_0 .. k_{v-blocks} | noisy n_0 .. n_{S-1}
//!   cond     .     |  #                        |  #
//!   clean    .     |  block lower-triangular   |  #
//!   noisy    .     |  strictly causal          |  block diagonal
//! ```
//!
//! `0` means attention is allowed, `1` means blocked. The partial variant
//! carries clean tokens for every step but the last; the full variant
//! carries all of them.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::arplan::ArPlan;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskVariant {
    #[default]
    Partial,
    Full,
}

impl fmt::Display for MaskVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskVariant::Partial => "partial",
            MaskVariant::Full => "full",
        })
    }
}

impl std::str::FromStr for MaskVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "partial" => Ok(MaskVariant::Partial),
            "full" => Ok(MaskVariant::Full),
            other => Err(Error::Config(format!(
                "variant must be `partial` or `full`, got `{other}`"
            ))),
        }
    }
}

impl MaskVariant {
    /// Number of clean tokens the layout carries for `plan`.
    pub fn visible_clean(self, plan: &ArPlan) -> usize {
        match self {
            MaskVariant::Partial => plan.len() - plan.last_size(),
            MaskVariant::Full => plan.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    cl: usize,
    v: usize,
    l: usize,
    grid: Arc<Vec<u8>>,
}

impl AttnMask {
    /// Wraps a raw grid. Used for fault injection and by external tools.
    pub fn from_grid(cl: usize, v: usize, l: usize, grid: Vec<u8>) -> Result<Self> {
        let seq = cl + v + l;
        if grid.len() != seq * seq {
            return Err(Error::Shape(format!(
                "grid has {} cells, layout needs {seq}x{seq}",
                grid.len()
            )));
        }
        if grid.iter().any(|&g| g > 1) {
            return Err(Error::Contract("mask cells must be 0 or 1".into()));
        }
        Ok(Self {
            cl,
            v,
            l,
            grid: Arc::new(grid),
        })
    }

    pub fn seq(&self) -> usize {
        self.cl + self.v + self.l
    }

    pub fn cl(&self) -> usize {
        self.cl
    }

    pub fn v(&self) -> usize {
        self.v
    }

    pub fn l(&self) -> usize {
        self.l
    }

    /// Offset of the first noisy token.
    pub fn ctx(&self) -> usize {
        self.cl + self.v
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn shared_grid(&self) -> &Arc<Vec<u8>> {
        &self.grid
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.grid[row * self.seq() + col]
    }

    pub fn is_blocked(&self, row: usize, col: usize) -> bool {
        self.get(row, col) == 1
    }

    /// Returns a copy with one cell flipped.
    pub fn with_flipped(&self, row: usize, col: usize) -> Self {
        let mut grid = (*self.grid).clone();
        let i = row * self.seq() + col;
        grid[i] ^= 1;
        Self {
            grid: Arc::new(grid),
            ..self.clone()
        }
    }

    /// ASCII rendering, `.` for attend and `#` for blocked.
    pub fn to_ascii(&self) -> String {
        let seq = self.seq();
        let mut out = String::with_capacity(seq * (seq + 1));
        for r in 0..seq {
            for c in 0..seq {
                out.push(if self.is_blocked(r, c) { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }

    /// Comma-separated 0/1 rows.
    pub fn to_csv(&self) -> String {
        let seq = self.seq();
        let mut out = String::new();
        for r in 0..seq {
            let row: Vec<&str> = (0..seq)
                .map(|c| if self.is_blocked(r, c) { "1" } else { "0" })
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Builds the mask for `plan` with `cl` condition tokens.
///
/// Both variants share one construction: the full variant only runs the
/// clean-block loop one block further.
pub fn build_mask(plan: &ArPlan, cl: usize, variant: MaskVariant) -> Result<AttnMask> {
    if cl < 1 {
        return Err(Error::Config(
            "condition length must be at least 1; use the null condition for unconditional runs"
                .into(),
        ));
    }
    let l = plan.len();
    let v = variant.visible_clean(plan);
    let ctx = cl + v;
    let seq = ctx + l;
    let cm = plan.cumsum();
    let steps = plan.steps();

    let mut grid = vec![1u8; seq * seq];
    let mut zero = |r: std::ops::Range<usize>, c: std::ops::Range<usize>| {
        for row in r {
            grid[row * seq + c.start..row * seq + c.end].fill(0);
        }
    };

    zero(0..seq, 0..cl);

    let clean_blocks = match variant {
        MaskVariant::Partial => steps - 1,
        MaskVariant::Full => steps,
    };
    for i in 0..clean_blocks {
        // clean block i sees clean blocks 0..=i
        zero(cl + cm[i]..cl + cm[i + 1], cl..cl + cm[i + 1]);
        // noisy block i+1 sees clean blocks 0..=i
        if i + 2 <= steps {
            zero(ctx + cm[i + 1]..ctx + cm[i + 2], cl..cl + cm[i + 1]);
        }
    }
    for i in 0..steps {
        zero(ctx + cm[i]..ctx + cm[i + 1], ctx + cm[i]..ctx + cm[i + 1]);
    }

    Ok(AttnMask {
        cl,
        v,
        l,
        grid: Arc::new(grid),
    })
}

/// Region a token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Cond,
    Clean(usize),
    Noisy(usize),
}

/// A cell where the mask disagrees with the attention rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellViolation {
    pub row: usize,
    pub col: usize,
    pub expected: u8,
    pub actual: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskReport {
    /// Layout disagreements (lengths), each a human-readable line.
    pub layout: Vec<String>,
    pub cells: Vec<CellViolation>,
}

impl MaskReport {
    pub fn is_clean(&self) -> bool {
        self.layout.is_empty() && self.cells.is_empty()
    }
}

/// Whether a token in region `row` may attend to one in region `col`.
pub fn attention_allowed(row: Region, col: Region) -> bool {
    match (row, col) {
        (_, Region::Cond) => true,
        (Region::Cond, _) => false,
        (Region::Clean(i), Region::Clean(j)) => j <= i,
        (Region::Clean(_), Region::Noisy(_)) => false,
        (Region::Noisy(j), Region::Clean(i)) => i < j,
        (Region::Noisy(j), Region::Noisy(k)) => j == k,
    }
}

/// Re-derives every cell from [`attention_allowed`] and reports each
/// disagreement with `mask`.
pub fn verify_mask(mask: &AttnMask, plan: &ArPlan, cl: usize, variant: MaskVariant) -> MaskReport {
    let mut report = MaskReport::default();
    let l = plan.len();
    let v = variant.visible_clean(plan);
    if mask.cl() != cl {
        report
            .layout
            .push(format!("condition length {} != {cl}", mask.cl()));
    }
    if mask.v() != v {
        report
            .layout
            .push(format!("visible clean length {} != {v} ({variant})", mask.v()));
    }
    if mask.l() != l {
        report.layout.push(format!("noisy length {} != {l}", mask.l()));
    }
    if !report.layout.is_empty() {
        return report;
    }

    let classify = |idx: usize| -> Region {
        if idx < cl {
            Region::Cond
        } else if idx < cl + v {
            Region::Clean(plan.block_of(idx - cl))
        } else {
            Region::Noisy(plan.block_of(idx - cl - v))
        }
    };
    let seq = mask.seq();
    for r in 0..seq {
        let rr = classify(r);
        for c in 0..seq {
            let expected = u8::from(!attention_allowed(rr, classify(c)));
            let actual = mask.get(r, c);
            if expected != actual {
                report.cells.push(CellViolation {
                    row: r,
                    col: c,
                    expected,
                    actual,
                });
            }
        }
    }
    report
}
