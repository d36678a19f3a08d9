//! Forward-pass timing of the attention variants over token grids.

use std::time::Instant;

use agile_core::attention::{Attention, AttentionConfig, AttentionKind};
use agile_core::params::{ParamStore, Session};
use agile_core::rng::Rng;
use agile_core::Tensor;

use crate::CliError;

pub const DIM: usize = 32;
pub const HEADS: usize = 2;
pub const NEIGHBORHOOD: usize = 7;
pub const WINDOW: usize = 8;
pub const RUNS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: &'static str,
    pub tokens: usize,
    pub micros: u128,
}

/// `"nmsa,full"` or `"all"`.
pub fn parse_ops(s: &str) -> Result<Vec<AttentionKind>, CliError> {
    if s == "all" {
        return Ok(vec![AttentionKind::Nmsa, AttentionKind::Wmsa, AttentionKind::Dmsa, AttentionKind::Full]);
    }
    s.split(',')
        .map(|p| {
            AttentionKind::parse(p.trim())
                .ok_or_else(|| CliError::Usage(format!("unknown bench op `{p}`; expected nmsa, wmsa, dmsa, full or all")))
        })
        .collect()
}

/// `"32x32,32x64"`.
pub fn parse_sizes(s: &str) -> Result<Vec<(usize, usize)>, CliError> {
    s.split(',')
        .map(|p| {
            let bad = || CliError::Usage(format!("bad size `{p}`; expected HxW"));
            let (h, w) = p.trim().split_once('x').ok_or_else(bad)?;
            let h: usize = h.parse().map_err(|_| bad())?;
            let w: usize = w.parse().map_err(|_| bad())?;
            if h == 0 || w == 0 {
                return Err(bad());
            }
            Ok((h, w))
        })
        .collect()
}

fn median(mut v: Vec<u128>) -> u128 {
    v.sort_unstable();
    v[v.len() / 2]
}

/// One warm-up pass, then the median of [`RUNS`] timed passes.
pub fn time_variant(kind: AttentionKind, grid: (usize, usize), seed: u64) -> Result<u128, CliError> {
    let mut store = ParamStore::new(seed);
    let window = WINDOW.min(grid.0).min(grid.1);
    let layer = Attention::new(&mut store, "a", AttentionConfig::new(DIM, HEADS, kind, NEIGHBORHOOD, window)?);
    let mut r = Rng::derive(seed, "bench-input");
    let x = Tensor::from_fn(&[grid.0 * grid.1, DIM], |_| r.normal());
    let run = || -> Result<u128, CliError> {
        let mut s = Session::inference(&store);
        let v = s.constant(x.clone());
        let start = Instant::now();
        let y = layer.forward(&mut s, v, grid)?;
        std::hint::black_box(s.value(y));
        Ok(start.elapsed().as_micros())
    };
    run()?;
    let times = (0..RUNS).map(|_| run()).collect::<Result<Vec<_>, _>>()?;
    Ok(median(times))
}

pub fn run(kinds: &[AttentionKind], sizes: &[(usize, usize)], seed: u64) -> Result<Vec<BenchRow>, CliError> {
    let mut rows = Vec::new();
    for &kind in kinds {
        for &grid in sizes {
            rows.push(BenchRow {
                variant: kind.name(),
                tokens: grid.0 * grid.1,
                micros: time_variant(kind, grid, seed)?,
            });
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("variant,L,micros\n");
    for r in rows {
        s += &format!("{},{},{}\n", r.variant, r.tokens, r.micros);
    }
    s
}
